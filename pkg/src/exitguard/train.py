"""Toy multi-exit MLP trained with hierarchical distillation.

The network is a stack of dense tanh stages with one linear classifier head
per stage. The training objective combines, per exit: cross-entropy against
the label, decoupled distillation (target / non-target split) against an
EMA teacher's final-exit logits, and for every non-final exit a softened KL
consistency term chasing the (gradient-detached) final exit. All gradients
are derived by hand and checked against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .core import PROB_FLOOR, DatasetSplit, ExitRecord, RngStream, Sample, STREAM_BATCH, STREAM_INIT
from .errors import ConfigError, InvalidInputError, TrainingDivergedError


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.clip(p, PROB_FLOOR, 1.0))


# ---------------------------------------------------------------------------
# model


@dataclass
class MultiExitMlp:
    """Dense trunk of K tanh stages, one linear head after each stage."""

    input_dim: int
    widths: tuple
    num_classes: int
    trunk_weights: list = field(default_factory=list)  # stage j: (fan_in, widths[j])
    trunk_biases: list = field(default_factory=list)
    head_weights: list = field(default_factory=list)  # head j: (widths[j], C)
    head_biases: list = field(default_factory=list)

    @classmethod
    def init(
        cls, input_dim: int, widths: Sequence[int], num_classes: int, rng: RngStream
    ) -> "MultiExitMlp":
        if input_dim < 1 or num_classes < 2:
            raise ConfigError("need input_dim >= 1 and num_classes >= 2")
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigError("need at least two positive stage widths")
        g = rng.generator()
        model = cls(input_dim=input_dim, widths=widths, num_classes=num_classes)
        fan_in = input_dim
        for w in widths:
            model.trunk_weights.append(g.standard_normal((fan_in, w)) / math.sqrt(fan_in))
            model.trunk_biases.append(np.zeros(w))
            model.head_weights.append(g.standard_normal((w, num_classes)) / math.sqrt(w))
            model.head_biases.append(np.zeros(num_classes))
            fan_in = w
        return model

    @property
    def num_exits(self) -> int:
        return len(self.widths)

    @property
    def num_params(self) -> int:
        return sum(a.size for _, a in self.param_items())

    def param_items(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters in a fixed order (the checkpoint/flattening order)."""
        for j in range(self.num_exits):
            yield f"trunk_w_{j + 1}", self.trunk_weights[j]
            yield f"trunk_b_{j + 1}", self.trunk_biases[j]
        for j in range(self.num_exits):
            yield f"head_w_{j + 1}", self.head_weights[j]
            yield f"head_b_{j + 1}", self.head_biases[j]

    def copy(self) -> "MultiExitMlp":
        return MultiExitMlp(
            input_dim=self.input_dim,
            widths=self.widths,
            num_classes=self.num_classes,
            trunk_weights=[w.copy() for w in self.trunk_weights],
            trunk_biases=[b.copy() for b in self.trunk_biases],
            head_weights=[w.copy() for w in self.head_weights],
            head_biases=[b.copy() for b in self.head_biases],
        )

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.param_items()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        offset = 0
        for _, a in self.param_items():
            a[...] = flat[offset : offset + a.size].reshape(a.shape)
            offset += a.size
        if offset != flat.size:
            raise InvalidInputError("flat parameter vector has the wrong length")

    def forward_stages(self, x: np.ndarray) -> tuple[list, list]:
        """Stage activations and per-exit logits for a (B, d) batch."""
        h = x
        activations = []
        logits = []
        for j in range(self.num_exits):
            h = np.tanh(h @ self.trunk_weights[j] + self.trunk_biases[j])
            activations.append(h)
            logits.append(h @ self.head_weights[j] + self.head_biases[j])
        return activations, logits

    def forward(self, x) -> np.ndarray:
        """Per-exit logits: (K, C) for a vector input, (B, K, C) for a batch."""
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.input_dim:
            raise InvalidInputError(
                f"input has dimension {arr.shape[-1]}, model expects {self.input_dim}"
            )
        _, logits = self.forward_stages(arr)
        out = np.stack(logits, axis=1)
        return out[0] if single else out


@dataclass
class TeacherState:
    """EMA copy of the student, the distillation target."""

    model: MultiExitMlp
    momentum: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"EMA momentum {self.momentum!r} outside [0, 1]")


def ema_update(teacher: MultiExitMlp, student: MultiExitMlp, momentum: float) -> MultiExitMlp:
    """In-place ``theta_T <- m * theta_T + (1 - m) * theta_S``."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"EMA momentum {momentum!r} outside [0, 1]")
    for (name_t, p_t), (name_s, p_s) in zip(teacher.param_items(), student.param_items()):
        if name_t != name_s or p_t.shape != p_s.shape:
            raise InvalidInputError("teacher/student parameter shapes differ")
        p_t *= momentum
        p_t += (1.0 - momentum) * p_s
    return teacher


# ---------------------------------------------------------------------------
# losses (batched cores; the scalar API wraps a batch of one)


@dataclass(frozen=True)
class LossConfig:
    """Weights of the combined training objective.

    ``exit_weights`` must be normalized (sum 1); None means uniform 1/K.
    ``alpha`` scales decoupled distillation against the teacher, ``beta``
    the deep-to-shallow consistency term. With ``exit_matched_teacher`` the
    teacher's exit-j logits replace its final-exit logits as the
    distillation target for exit j (off by default).
    """

    exit_weights: tuple | None = None
    alpha: float = 1.0
    beta: float = 0.5
    temperature: float = 4.0
    dkd_tckd_weight: float = 1.0
    dkd_nckd_weight: float = 1.0
    exit_matched_teacher: bool = False

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature {self.temperature!r} must be > 0")
        for name in ("alpha", "beta", "dkd_tckd_weight", "dkd_nckd_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.exit_weights is not None:
            w = tuple(float(v) for v in self.exit_weights)
            if any(v < 0 for v in w):
                raise ConfigError("exit weights must be >= 0")
            if abs(sum(w) - 1.0) > 1e-9:
                raise ConfigError(f"exit weights sum to {sum(w)!r}, expected 1")
            object.__setattr__(self, "exit_weights", w)

    def weights_for(self, num_exits: int) -> np.ndarray:
        if self.exit_weights is None:
            return np.full(num_exits, 1.0 / num_exits)
        if len(self.exit_weights) != num_exits:
            raise ConfigError(
                f"{len(self.exit_weights)} exit weights for a {num_exits}-exit model"
            )
        return np.asarray(self.exit_weights)


def _ce_batch(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample CE and its gradient wrt logits: softmax(z) - onehot(y)."""
    p = _softmax_rows(z)
    rows = np.arange(z.shape[0])
    losses = -_safe_log(p[rows, y])
    grad = p.copy()
    grad[rows, y] -= 1.0
    return losses, grad


def _kd_batch(z_s: np.ndarray, z_t: np.ndarray, temperature: float):
    """Per-sample T^2 * KL(teacher || student) on softened logits."""
    t = temperature
    p_t = _softmax_rows(z_t / t)
    p_s = _softmax_rows(z_s / t)
    losses = t * t * np.sum(p_t * (_safe_log(p_t) - _safe_log(p_s)), axis=1)
    grad = t * (p_s - p_t)
    return losses, grad


def _dkd_batch(
    z_s: np.ndarray,
    z_t: np.ndarray,
    y: np.ndarray,
    temperature: float,
    w_tckd: float,
    w_nckd: float,
):
    """Per-sample decoupled distillation and its gradient wrt student logits.

    Splits the softened KL into a binary target-vs-rest term and a
    renormalized non-target term; with unit weights they recompose into the
    plain KD loss via TCKD + (1 - p_t(y)) * NCKD. For C = 2 the non-target
    distribution is a single point, so NCKD is 0 by convention.
    """
    t = temperature
    n, c = z_s.shape
    rows = np.arange(n)
    p_t = _softmax_rows(z_t / t)
    p_s = _softmax_rows(z_s / t)
    a_t = p_t[rows, y]
    a_s = p_s[rows, y]

    # Binary target-vs-rest KL.
    tckd = a_t * (_safe_log(a_t) - _safe_log(a_s)) + (1.0 - a_t) * (
        _safe_log(1.0 - a_t) - _safe_log(1.0 - a_s)
    )
    # d(TCKD)/d(softened logit k) = (onehot_y - p_s)_k * g1
    g1 = (1.0 - a_t) * a_s / np.clip(1.0 - a_s, PROB_FLOOR, None) - a_t
    onehot = np.zeros_like(p_s)
    onehot[rows, y] = 1.0
    grad = w_tckd * t * (onehot - p_s) * g1[:, None]

    if c > 2 and w_nckd > 0.0:
        mask = np.ones_like(p_s, dtype=bool)
        mask[rows, y] = False
        denom_t = np.clip(1.0 - a_t, PROB_FLOOR, None)[:, None]
        denom_s = np.clip(1.0 - a_s, PROB_FLOOR, None)[:, None]
        ph_t = np.where(mask, p_t / denom_t, 0.0)
        ph_s = np.where(mask, p_s / denom_s, 0.0)
        nckd = np.sum(
            np.where(mask, ph_t * (_safe_log(ph_t) - _safe_log(ph_s)), 0.0), axis=1
        )
        # Renormalized non-target softmax is independent of the target logit.
        grad += w_nckd * t * np.where(mask, ph_s - ph_t, 0.0)
    else:
        nckd = np.zeros(n)

    losses = t * t * (w_tckd * tckd + w_nckd * nckd)
    return losses, grad


def ce_loss(z, y: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of logits against a label, with gradient wrt logits."""
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= y < z.size:
        raise InvalidInputError(f"label {y} outside [0, {z.size})")
    losses, grad = _ce_batch(z[None, :], np.array([y]))
    return float(losses[0]), grad[0]


def kd_loss(z_s, z_t, temperature: float) -> tuple[float, np.ndarray]:
    """Softened-KL distillation loss; the teacher side carries no gradient."""
    if temperature <= 0:
        raise ConfigError(f"temperature {temperature!r} must be > 0")
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_s.shape != z_t.shape:
        raise InvalidInputError("student/teacher logit shapes differ")
    losses, grad = _kd_batch(z_s[None, :], z_t[None, :], temperature)
    return float(losses[0]), grad[0]


def dkd_loss(
    z_s,
    z_t,
    y: int,
    temperature: float,
    w_tckd: float = 1.0,
    w_nckd: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Decoupled distillation loss, with gradient wrt student logits."""
    if temperature <= 0:
        raise ConfigError(f"temperature {temperature!r} must be > 0")
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_s.shape != z_t.shape:
        raise InvalidInputError("student/teacher logit shapes differ")
    if not 0 <= y < z_s.size:
        raise InvalidInputError(f"label {y} outside [0, {z_s.size})")
    losses, grad = _dkd_batch(
        z_s[None, :], z_t[None, :], np.array([y]), temperature, w_tckd, w_nckd
    )
    return float(losses[0]), grad[0]


def _total_batch(
    student_logits: np.ndarray,  # (B, K, C)
    teacher_logits: np.ndarray,  # (B, K, C), only what the config needs is read
    y: np.ndarray,
    cfg: LossConfig,
    consistency_target: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean combined loss over a batch and its gradient wrt every exit's logits.

    The consistency target is the student's own final exit and carries no
    gradient; pass it explicitly (frozen) when probing with finite
    differences, so the oracle differentiates the same detached objective.
    """
    b, k, _ = student_logits.shape
    w = cfg.weights_for(k)
    grads = np.zeros_like(student_logits)
    total = 0.0
    if consistency_target is None:
        consistency_target = student_logits[:, k - 1, :]
    z_final = consistency_target

    for j in range(k):
        z_j = student_logits[:, j, :]
        ce_l, ce_g = _ce_batch(z_j, y)
        total += w[j] * float(np.mean(ce_l))
        grads[:, j, :] += w[j] * ce_g / b
        if cfg.alpha > 0.0:
            t_idx = j if cfg.exit_matched_teacher else k - 1
            dkd_l, dkd_g = _dkd_batch(
                z_j,
                teacher_logits[:, t_idx, :],
                y,
                cfg.temperature,
                cfg.dkd_tckd_weight,
                cfg.dkd_nckd_weight,
            )
            total += w[j] * cfg.alpha * float(np.mean(dkd_l))
            grads[:, j, :] += w[j] * cfg.alpha * dkd_g / b
        if cfg.beta > 0.0 and j < k - 1:
            kd_l, kd_g = _kd_batch(z_j, z_final, cfg.temperature)
            total += w[j] * cfg.beta * float(np.mean(kd_l))
            grads[:, j, :] += w[j] * cfg.beta * kd_g / b
    return total, grads


def total_loss(
    student_logits, teacher_final, y: int, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    """Combined objective for one sample's K exits.

    ``teacher_final`` is the teacher's final-exit logit vector, used as the
    distillation target at every exit; the consistency target is the
    student's own final exit, treated as a constant.
    """
    z = np.asarray(student_logits, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidInputError("student logits must be K x C")
    zt = np.asarray(teacher_final, dtype=np.float64)
    if zt.shape != (z.shape[1],):
        raise InvalidInputError("teacher final logits must have length C")
    teacher = np.tile(zt, (z.shape[0], 1))
    loss, grads = _total_batch(z[None], teacher[None], np.array([y]), cfg)
    return loss, grads[0]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    peak_lr: float = 0.01
    warmup_fraction: float = 0.1
    weight_decay: float = 1e-4
    seed: int = 0
    ema_momentum: float = 0.999

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.peak_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("peak_lr must be > 0 and weight_decay >= 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction {self.warmup_fraction!r} outside [0, 1)")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError(f"ema_momentum {self.ema_momentum!r} outside [0, 1]")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    val_accuracy: float
    learning_rate: float


@dataclass(frozen=True)
class TrainResult:
    model: MultiExitMlp
    log: tuple
    best_epoch: int
    best_val_accuracy: float


def _lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    warmup = int(round(cfg.warmup_fraction * total_steps))
    if step < warmup:
        return cfg.peak_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def loss_and_param_grads(
    model: MultiExitMlp,
    x: np.ndarray,
    y: np.ndarray,
    teacher_logits: np.ndarray,
    cfg: LossConfig,
) -> tuple[float, dict]:
    """Mean batch loss and gradients for every model parameter."""
    k = model.num_exits
    activations, logits = model.forward_stages(x)
    student = np.stack(logits, axis=1)
    loss, dz = _total_batch(student, teacher_logits, y, cfg)

    grads: dict[str, np.ndarray] = {}
    dh = [np.zeros_like(h) for h in activations]
    for j in range(k):
        g = dz[:, j, :]
        grads[f"head_w_{j + 1}"] = activations[j].T @ g
        grads[f"head_b_{j + 1}"] = g.sum(axis=0)
        dh[j] += g @ model.head_weights[j].T
    upstream = np.zeros_like(activations[-1])
    for j in range(k - 1, -1, -1):
        da = (dh[j] + upstream) * (1.0 - activations[j] ** 2)
        prev = x if j == 0 else activations[j - 1]
        grads[f"trunk_w_{j + 1}"] = prev.T @ da
        grads[f"trunk_b_{j + 1}"] = da.sum(axis=0)
        upstream = da @ model.trunk_weights[j].T
    return loss, grads


def _final_exit_accuracy(model: MultiExitMlp, x: np.ndarray, y: np.ndarray) -> float:
    _, logits = model.forward_stages(x)
    return float(np.mean(np.argmax(logits[-1], axis=1) == y))


def train_loop(
    data: DatasetSplit,
    model: MultiExitMlp,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
) -> TrainResult:
    """AdamW with linear warmup and cosine decay, EMA teacher per step.

    Deterministic given ``cfg.seed``: batch order comes from a dedicated
    stream and all math is single-threaded float64. Returns the checkpoint
    with the best validation final-exit accuracy (earliest epoch on ties).
    """
    if not data.train or not data.val:
        raise InvalidInputError("train_loop: train and val splits must be non-empty")
    x_train = np.stack([s.features for s in data.train])
    y_train = np.array([s.label for s in data.train])
    x_val = np.stack([s.features for s in data.val])
    y_val = np.array([s.label for s in data.val])

    model = model.copy()
    if cfg.epochs == 0:
        return TrainResult(model=model, log=(), best_epoch=0, best_val_accuracy=float("nan"))

    teacher = TeacherState(model=model.copy(), momentum=cfg.ema_momentum)
    m_state = {name: np.zeros_like(p) for name, p in model.param_items()}
    v_state = {name: np.zeros_like(p) for name, p in model.param_items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    g_batches = RngStream(cfg.seed, STREAM_BATCH).generator()
    n = len(data.train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    best_model = None
    best_acc = -1.0
    best_epoch = -1
    log = []
    step = 0
    adam_t = 0
    for epoch in range(cfg.epochs):
        perm = g_batches.permutation(n)
        epoch_losses = []
        lr = cfg.peak_lr
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            teacher_logits = np.stack(teacher.model.forward_stages(xb)[1], axis=1)
            loss, grads = loss_and_param_grads(model, xb, yb, teacher_logits, loss_cfg)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, batch {b + 1}"
                )
            epoch_losses.append(loss)

            lr = _lr_at(step, total_steps, cfg)
            adam_t += 1
            for name, p in model.param_items():
                g = grads[name]
                m_state[name] = beta1 * m_state[name] + (1 - beta1) * g
                v_state[name] = beta2 * v_state[name] + (1 - beta2) * g * g
                m_hat = m_state[name] / (1 - beta1**adam_t)
                v_hat = v_state[name] / (1 - beta2**adam_t)
                p -= lr * (m_hat / (np.sqrt(v_hat) + eps) + cfg.weight_decay * p)
            ema_update(teacher.model, model, teacher.momentum)
            step += 1

        val_acc = _final_exit_accuracy(model, x_val, y_val)
        log.append(
            EpochStats(
                epoch=epoch + 1,
                mean_loss=float(np.mean(epoch_losses)),
                val_accuracy=val_acc,
                learning_rate=lr,
            )
        )
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch + 1
            best_model = model.copy()

    return TrainResult(
        model=best_model, log=tuple(log), best_epoch=best_epoch, best_val_accuracy=best_acc
    )


def export_logits(model: MultiExitMlp, samples: Sequence[Sample]) -> list[ExitRecord]:
    """One ExitRecord per sample, with the model's K x C logits."""
    if not samples:
        return []
    x = np.stack([s.features for s in samples])
    out = model.forward(x)  # (B, K, C)
    return [
        ExitRecord(id=s.id, label=s.label, logits=out[i]) for i, s in enumerate(samples)
    ]


def grad_check(model: MultiExitMlp, loss_cfg: LossConfig, rng: RngStream) -> float:
    """Max relative error between analytic and central-difference gradients.

    Perturbs every parameter by +-1e-5 on a small random batch against a
    perturbed-copy teacher. Relative error is |g_a - g_n| / (|g_a| + |g_n|
    + 1e-12), so exactly-zero directions stay finite.
    """
    if model.num_params > 5000:
        raise InvalidInputError(
            f"grad_check: {model.num_params} parameters exceeds the 5000 limit"
        )
    g = rng.generator()
    batch = 4
    x = g.standard_normal((batch, model.input_dim))
    y = g.integers(0, model.num_classes, batch)
    teacher = model.copy()
    for _, p in teacher.param_items():
        p += 0.1 * g.standard_normal(p.shape)
    teacher_logits = np.stack(teacher.forward_stages(x)[1], axis=1)

    _, grads = loss_and_param_grads(model, x, y, teacher_logits, loss_cfg)
    analytic = np.concatenate([grads[name].ravel() for name, _ in model.param_items()])

    # The consistency target is detached, so the probes hold it fixed at its
    # unperturbed value; at the base point both objectives share gradients.
    target0 = np.stack(model.forward_stages(x)[1], axis=1)[:, -1, :].copy()

    probe = model.copy()
    flat = probe.flat_params()
    h = 1e-5
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        probe.set_flat_params(flat)
        up, _ = _total_batch(
            np.stack(probe.forward_stages(x)[1], axis=1), teacher_logits, y, loss_cfg,
            consistency_target=target0,
        )
        flat[i] = orig - h
        probe.set_flat_params(flat)
        down, _ = _total_batch(
            np.stack(probe.forward_stages(x)[1], axis=1), teacher_logits, y, loss_cfg,
            consistency_target=target0,
        )
        flat[i] = orig
        numeric[i] = (up - down) / (2 * h)
    probe.set_flat_params(flat)

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(np.max(rel))


def default_model(
    input_dim: int, num_classes: int, widths: Sequence[int] = (64, 64, 64), seed: int = 0
) -> MultiExitMlp:
    return MultiExitMlp.init(input_dim, widths, num_classes, RngStream(seed, STREAM_INIT))
