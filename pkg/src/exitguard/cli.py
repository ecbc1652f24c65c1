"""Command line interface wiring the pipeline:

synth -> train -> export -> calibrate -> evaluate / risk-curve / validity.

Exit status 0 on success, 2 on configuration/usage errors, 1 on runtime
errors. Every failure writes one machine-parseable JSON line to stderr.
Report subcommands render PNG figures next to their CSV output unless
``--no-figures`` is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import calib, figures, formats, policy, reports, synth, train
from .config import RunConfig, load_config, override
from .core import (
    RngStream,
    STREAM_CURVE,
    STREAM_GRADCHECK,
    STREAM_MC,
    STREAM_SPLIT,
    STREAM_SYNTH,
    split_dataset,
)
from .errors import ConfigError, ExitguardError
from .metrics import CostModel, EceConfig

SEED_ENV_VAR = "EXITGUARD_SEED"

_ERROR_KINDS = {
    "ConfigError": "config",
    "InvalidInputError": "invalid-input",
    "CalibrationError": "calibration",
    "ParseError": "parse",
    "FormatError": "format",
    "TrainingDivergedError": "training-diverged",
}


def _fail(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _parse_float_list(text: str, flag: str) -> tuple:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{flag}: expected comma-separated numbers, got {text!r}") from exc
    if not values:
        raise ConfigError(f"{flag}: empty list")
    return values


def _parse_int_list(text: str, flag: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{flag}: expected comma-separated integers, got {text!r}") from exc


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = override(cfg, seed=args.seed)
    elif os.environ.get(SEED_ENV_VAR):
        raw = os.environ[SEED_ENV_VAR]
        try:
            cfg = override(cfg, seed=int(raw))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR}={raw!r} is not an integer") from exc
    return cfg


def _cost_model(args, cfg: RunConfig, num_exits: int) -> CostModel:
    costs = _parse_float_list(args.costs, "--costs") if getattr(args, "costs", None) else cfg.costs
    if costs is None:
        return CostModel.normalized_depth(num_exits)
    if len(costs) != num_exits:
        raise ConfigError(f"--costs has {len(costs)} entries, records have {num_exits} exits")
    return CostModel(costs)


def _loss_config(args, cfg: RunConfig) -> train.LossConfig:
    alpha = cfg.alpha if args.alpha is None else args.alpha
    beta = cfg.beta if args.beta is None else args.beta
    if getattr(args, "no_consistency", False):
        beta = 0.0
    if getattr(args, "no_distill", False):
        alpha = 0.0
        beta = 0.0
    return train.LossConfig(
        alpha=alpha,
        beta=beta,
        temperature=cfg.temperature if args.temp is None else args.temp,
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    cfg = _resolve(args)
    samples = synth.synth_blobs(
        args.n, args.classes, args.dim, args.separation, RngStream(cfg.seed, STREAM_SYNTH)
    )
    formats.write_samples(samples, args.classes, args.out)
    print(f"wrote {len(samples)} samples ({args.classes} classes, dim {args.dim}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve(args)
    cfg = override(
        cfg,
        epochs=args.epochs,
        batch_size=args.batch_size,
        peak_lr=args.lr,
        warmup_fraction=args.warmup,
        weight_decay=args.weight_decay,
        ema_momentum=args.ema,
        widths=_parse_int_list(args.widths, "--widths") if args.widths else None,
    )
    samples, num_classes = formats.read_samples(args.data)
    split = split_dataset(samples, cfg.fractions, RngStream(cfg.seed, STREAM_SPLIT))
    model = train.default_model(
        samples[0].features.size, num_classes, cfg.widths, seed=cfg.seed
    )
    train_cfg = train.TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        peak_lr=cfg.peak_lr,
        warmup_fraction=cfg.warmup_fraction,
        weight_decay=cfg.weight_decay,
        seed=cfg.seed,
        ema_momentum=cfg.ema_momentum,
    )
    result = train.train_loop(split, model, train_cfg, _loss_config(args, cfg))
    formats.write_checkpoint(result.model, args.out)
    for stats in result.log:
        print(
            f"epoch {stats.epoch}: loss {stats.mean_loss:.6f} "
            f"val_acc {stats.val_accuracy:.4f}"
        )
    print(
        f"best epoch {result.best_epoch} (val_acc {result.best_val_accuracy:.4f}); "
        f"checkpoint -> {args.out}"
    )
    return 0


def _cmd_export(args) -> int:
    cfg = _resolve(args)
    samples, _ = formats.read_samples(args.data)
    model = formats.read_checkpoint(args.model)
    if args.split == "all":
        subset = samples
    else:
        split = split_dataset(samples, cfg.fractions, RngStream(cfg.seed, STREAM_SPLIT))
        subset = list(getattr(split, args.split))
    records = train.export_logits(model, subset)
    formats.write_logits(records, args.out)
    print(f"exported {len(records)} records ({args.split}) to {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    cfg = _resolve(args)
    cfg = override(cfg, delta=args.delta, budget=args.budget)
    records = formats.read_logits(args.logits)
    method = args.method.replace("-", "_")
    if method == calib.METHOD_CRC:
        schedule = calib.calibrate_all_exits(records, cfg.delta, cfg.budget)
    else:
        if args.value is None:
            raise ConfigError(f"--method {args.method} requires --value")
        schedule = calib.heuristic_schedule(method, args.value, records[0].num_exits)
    formats.write_thresholds(schedule, args.out)
    shown = ["never" if t is None else f"{t:.6g}" for t in schedule.thresholds]
    print(f"method {schedule.method}: thresholds {shown} -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    records = formats.read_logits(args.logits)
    schedule = formats.read_thresholds(args.thresholds)
    cost = _cost_model(args, cfg, schedule.num_exits)
    ece_cfg = EceConfig(args.bins if args.bins is not None else cfg.ece_bins)
    report = policy.evaluate_policy(records, schedule, cost, ece_cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports.write_policy_report(report, out_dir / reports.POLICY_REPORT_FILE)
    table = reports.exit_reliability_table(records, ece_cfg)
    reports.write_reliability_bins(table, out_dir / reports.RELIABILITY_FILE)
    if not args.no_figures:
        figures.save_exit_rate_figure(report, out_dir / "exit_rates.png")
        figures.save_reliability_figure(table, out_dir / "reliability.png")
    risk = "undefined" if report.overall_early_risk is None else f"{report.overall_early_risk:.4f}"
    print(
        f"policy {report.policy}: acc {report.accuracy:.4f} "
        f"expected_compute {report.expected_compute:.4f} early_risk {risk}"
    )
    return 0


def _cmd_risk_curve(args) -> int:
    cfg = _resolve(args)
    cfg = override(
        cfg,
        budget=args.budget,
        cal_fraction=args.cal_fraction,
        deltas=_parse_float_list(args.deltas, "--deltas") if args.deltas else None,
    )
    records = formats.read_logits(args.logits)
    cost = _cost_model(args, cfg, records[0].num_exits)
    curve = calib.risk_curve(
        records,
        cfg.deltas,
        cfg.cal_fraction,
        cost,
        RngStream(cfg.seed, STREAM_CURVE),
        cfg.budget,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports.write_risk_curve(curve, out_dir / reports.RISK_CURVE_FILE)
    if not args.no_figures:
        figures.save_risk_curve_figure(curve, out_dir / "risk_curve.png")
    print(f"risk curve over {len(curve.rows)} deltas -> {out_dir}")
    return 0


def _cmd_validity(args) -> int:
    cfg = _resolve(args)
    cfg = override(
        cfg, delta=args.delta, budget=args.budget,
        mc_trials=args.trials, cal_fraction=args.cal_fraction,
    )
    records = formats.read_logits(args.logits)
    result = policy.mc_validity(
        records,
        cfg.delta,
        cfg.mc_trials,
        cfg.cal_fraction,
        RngStream(cfg.seed, STREAM_MC),
        cfg.budget,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports.write_validity(result, out_dir / reports.VALIDITY_FILE)
    if not args.no_figures:
        figures.save_validity_figure(result, out_dir / "validity.png")
    for e in result.exits:
        mean = "undefined" if e.mean_risk is None else f"{e.mean_risk:.4f}"
        print(f"exit {e.exit_index}: mean_risk {mean} over {e.n_used} trials "
              f"({e.n_skipped} skipped)")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    widths = _parse_int_list(args.widths, "--widths") if args.widths else (12, 12, 12)
    model = train.default_model(args.dim, args.classes, widths, seed=cfg.seed)
    loss_cfg = train.LossConfig(
        alpha=args.alpha if args.alpha is not None else cfg.alpha,
        beta=args.beta if args.beta is not None else cfg.beta,
        temperature=args.temp if args.temp is not None else cfg.temperature,
    )
    err = train.grad_check(model, loss_cfg, RngStream(cfg.seed, STREAM_GRADCHECK))
    print(f"max_rel_err {err:.3e} over {model.num_params} parameters (tol {args.tol:g})")
    return 0 if err <= args.tol else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help=f"global seed (falls back to ${SEED_ENV_VAR}, then config)")
    common.add_argument("--config", default=None, help="JSON run-config file")

    parser = argparse.ArgumentParser(
        prog="exitguard",
        description="risk-controlled early-exit classification pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate Gaussian blob data")
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the multi-exit model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--ema", type=float, default=None)
    p.add_argument("--widths", default=None, help="comma-separated stage widths")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--temp", type=float, default=None)
    p.add_argument("--no-consistency", action="store_true", help="drop the deep-to-shallow term")
    p.add_argument("--no-distill", action="store_true", help="plain multi-exit cross-entropy")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("export", parents=[common], help="export per-exit logits")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["train", "val", "cal", "test", "all"], default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("calibrate", parents=[common], help="calibrate stopping thresholds")
    p.add_argument("--logits", required=True)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--budget", choices=["per-exit", "union"], default=None)
    p.add_argument("--method", choices=["crc", "fixed-msp", "entropy"], default="crc")
    p.add_argument("--value", type=float, default=None,
                   help="gate value for fixed-msp / entropy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("evaluate", parents=[common], help="run the exit policy on logits")
    p.add_argument("--logits", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--costs", default=None, help="comma-separated per-exit costs")
    p.add_argument("--bins", type=int, default=None, help="ECE bin count")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("risk-curve", parents=[common],
                       help="observed risk across a delta grid")
    p.add_argument("--logits", required=True)
    p.add_argument("--deltas", default=None, help="comma-separated increasing deltas")
    p.add_argument("--cal-fraction", type=float, default=None)
    p.add_argument("--budget", choices=["per-exit", "union"], default=None)
    p.add_argument("--costs", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_risk_curve)

    p = sub.add_parser("validity", parents=[common],
                       help="Monte Carlo risk validity over resplits")
    p.add_argument("--logits", required=True)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--cal-fraction", type=float, default=None)
    p.add_argument("--budget", choices=["per-exit", "union"], default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_validity)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of the training gradients")
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--widths", default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--temp", type=float, default=None)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        code = exc.code if isinstance(exc.code, int) else 2
        if code != 0:
            _fail("usage", "invalid command line")
        return code
    try:
        return args.func(args)
    except ConfigError as exc:
        _fail("config", str(exc))
        return 2
    except ExitguardError as exc:
        kind = _ERROR_KINDS.get(type(exc).__name__, "runtime")
        _fail(kind, str(exc))
        return 1
    except OSError as exc:
        _fail("io", str(exc))
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
