"""Risk-controlled early-exit classification.

Train a toy multi-exit MLP with hierarchical distillation, calibrate
per-exit stopping thresholds with conformal risk control, run the
earliest-exit policy, and emit selective-risk / calibration / compute
reports with their figures.
"""

from .calib import (
    CalibrationPoint,
    RiskCurve,
    ThresholdSchedule,
    calibrate_all_exits,
    crc_threshold,
    heuristic_schedule,
    risk_curve,
)
from .core import (
    DatasetSplit,
    ExitRecord,
    RngStream,
    Sample,
    argmax_class,
    softmax,
    split_dataset,
)
from .errors import (
    CalibrationError,
    ConfigError,
    ExitguardError,
    FormatError,
    InvalidInputError,
    ParseError,
    TrainingDivergedError,
)
from .metrics import (
    CostModel,
    EceConfig,
    ece,
    entropy,
    expected_compute,
    msp,
    nll,
    reliability_bins,
    selective_risk,
    uncertainty_score,
)
from .policy import (
    ExitDecision,
    PolicyReport,
    ValidityResult,
    choose_exit,
    evaluate_policy,
    mc_validity,
    shift_evaluate,
)
from .synth import synth_blobs
from .train import (
    LossConfig,
    MultiExitMlp,
    TeacherState,
    TrainConfig,
    ce_loss,
    dkd_loss,
    ema_update,
    export_logits,
    grad_check,
    kd_loss,
    total_loss,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "CalibrationPoint",
    "ConfigError",
    "CostModel",
    "DatasetSplit",
    "EceConfig",
    "ExitDecision",
    "ExitRecord",
    "ExitguardError",
    "FormatError",
    "InvalidInputError",
    "LossConfig",
    "MultiExitMlp",
    "ParseError",
    "PolicyReport",
    "RiskCurve",
    "RngStream",
    "Sample",
    "TeacherState",
    "ThresholdSchedule",
    "TrainConfig",
    "TrainingDivergedError",
    "ValidityResult",
    "argmax_class",
    "calibrate_all_exits",
    "ce_loss",
    "choose_exit",
    "crc_threshold",
    "dkd_loss",
    "ece",
    "ema_update",
    "entropy",
    "evaluate_policy",
    "expected_compute",
    "export_logits",
    "grad_check",
    "heuristic_schedule",
    "kd_loss",
    "mc_validity",
    "msp",
    "nll",
    "reliability_bins",
    "risk_curve",
    "selective_risk",
    "shift_evaluate",
    "softmax",
    "split_dataset",
    "synth_blobs",
    "total_loss",
    "train_loop",
    "uncertainty_score",
]
