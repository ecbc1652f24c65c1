"""Text file formats: logits / feature records, thresholds, checkpoints.

Everything is line-delimited and versioned. Floats are written with
``repr`` (JSON lines) or 17 significant digits (checkpoints, thresholds),
both of which round-trip float64 bit-exactly. Writes go through a temp file
plus rename so readers never observe a partial file.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .calib import BUDGETS, METHODS, ThresholdSchedule
from .core import LOGIT_CAP, ExitRecord, Sample, check_uniform_shape
from .errors import FormatError, ParseError
from .train import MultiExitMlp

LOGITS_MAGIC = "exitguard-logits"
FEATURES_MAGIC = "exitguard-features"
THRESHOLDS_MAGIC = "exitguard-thresholds"
CHECKPOINT_MAGIC = "exitguard-mlp"
FORMAT_VERSION = 1

NEVER_EXIT_TOKEN = "never"


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _fmt17(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# logits files


def write_logits(records: Sequence[ExitRecord], path) -> None:
    k, c = check_uniform_shape(records)
    lines = [
        json.dumps(
            {"format": LOGITS_MAGIC, "version": FORMAT_VERSION, "k": k, "c": c},
            separators=(",", ":"),
        )
    ]
    for r in records:
        lines.append(
            json.dumps(
                {"id": r.id, "label": r.label, "logits": r.logits.tolist()},
                separators=(",", ":"),
            )
        )
    _atomic_write(path, "\n".join(lines) + "\n")


def _parse_header(path, first_line: str, magic: str) -> dict:
    try:
        header = json.loads(first_line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line 1: invalid header ({exc.msg})") from exc
    if not isinstance(header, dict) or header.get("format") != magic:
        raise FormatError(f"{path}: line 1: expected a {magic} header")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
    return header


def read_logits(path) -> list[ExitRecord]:
    """Parse a logits file, validating every line against the header."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = _parse_header(path, lines[0], LOGITS_MAGIC)
    k, c = header.get("k"), header.get("c")
    if not (isinstance(k, int) and isinstance(c, int) and k >= 2 and c >= 2):
        raise FormatError(f"{path}: header needs integer k >= 2 and c >= 2")

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc.msg}") from exc
        if not isinstance(obj, dict) or not {"id", "label", "logits"} <= obj.keys():
            raise ParseError(f"{path}: line {lineno}: missing id/label/logits")
        logits = obj["logits"]
        if len(logits) != k or any(len(row) != c for row in logits):
            raise FormatError(
                f"{path}: line {lineno}: logits shape does not match header "
                f"(k={k}, c={c})"
            )
        for row in logits:
            for v in row:
                if not (isinstance(v, (int, float)) and abs(v) <= LOGIT_CAP):
                    raise ParseError(
                        f"{path}: line {lineno}: logit {v!r} outside +-{LOGIT_CAP:g}"
                    )
        records.append(
            ExitRecord(
                id=str(obj["id"]),
                label=int(obj["label"]),
                logits=np.array(logits, dtype=np.float64),
            )
        )
    return records


# ---------------------------------------------------------------------------
# feature files


def write_samples(samples: Sequence[Sample], num_classes: int, path) -> None:
    if not samples:
        raise ParseError("write_samples: nothing to write")
    d = samples[0].features.size
    lines = [
        json.dumps(
            {"format": FEATURES_MAGIC, "version": FORMAT_VERSION, "d": d, "c": num_classes},
            separators=(",", ":"),
        )
    ]
    for s in samples:
        lines.append(
            json.dumps(
                {"id": s.id, "label": s.label, "features": s.features.tolist()},
                separators=(",", ":"),
            )
        )
    _atomic_write(path, "\n".join(lines) + "\n")


def read_samples(path) -> tuple[list[Sample], int]:
    """Parse a features file; returns (samples, num_classes)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = _parse_header(path, lines[0], FEATURES_MAGIC)
    d, c = header.get("d"), header.get("c")
    if not (isinstance(d, int) and isinstance(c, int) and d >= 1 and c >= 2):
        raise FormatError(f"{path}: header needs integer d >= 1 and c >= 2")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc.msg}") from exc
        if not isinstance(obj, dict) or not {"id", "label", "features"} <= obj.keys():
            raise ParseError(f"{path}: line {lineno}: missing id/label/features")
        feats = obj["features"]
        if len(feats) != d:
            raise FormatError(f"{path}: line {lineno}: expected {d} features")
        label = int(obj["label"])
        if not 0 <= label < c:
            raise FormatError(f"{path}: line {lineno}: label {label} outside [0, {c})")
        samples.append(
            Sample(id=str(obj["id"]), label=label, features=np.array(feats, dtype=np.float64))
        )
    return samples, c


# ---------------------------------------------------------------------------
# threshold schedules


def write_thresholds(schedule: ThresholdSchedule, path) -> None:
    lines = [f"{THRESHOLDS_MAGIC} v{FORMAT_VERSION}"]
    lines.append(f"method {schedule.method}")
    lines.append(f"delta {'none' if schedule.delta is None else _fmt17(schedule.delta)}")
    lines.append(f"budget {schedule.budget}")
    lines.append(f"exits {schedule.num_exits}")
    for j, tau in enumerate(schedule.thresholds, start=1):
        token = NEVER_EXIT_TOKEN if tau is None else _fmt17(tau)
        lines.append(f"threshold {j} {token}")
    for j, size in enumerate(schedule.cal_sizes, start=1):
        lines.append(f"cal_size {j} {size}")
    _atomic_write(path, "\n".join(lines) + "\n")


def read_thresholds(path) -> ThresholdSchedule:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(THRESHOLDS_MAGIC):
        raise FormatError(f"{path}: not a {THRESHOLDS_MAGIC} file")
    if lines[0] != f"{THRESHOLDS_MAGIC} v{FORMAT_VERSION}":
        raise FormatError(f"{path}: unsupported version line {lines[0]!r}")

    fields: dict[str, str] = {}
    thresholds: dict[int, float | None] = {}
    cal_sizes: dict[int, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if parts[0] == "threshold":
                j = int(parts[1])
                thresholds[j] = (
                    None if parts[2] == NEVER_EXIT_TOKEN else float(parts[2])
                )
            elif parts[0] == "cal_size":
                cal_sizes[int(parts[1])] = int(parts[2])
            elif parts[0] in ("method", "delta", "budget", "exits"):
                fields[parts[0]] = parts[1]
            else:
                raise ParseError(f"{path}: line {lineno}: unknown field {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}: line {lineno}: malformed line") from exc

    try:
        num_exits = int(fields["exits"])
        method = fields["method"]
        delta = None if fields["delta"] == "none" else float(fields["delta"])
        budget = fields["budget"]
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc.args[0]!r}") from exc
    if method not in METHODS:
        raise FormatError(f"{path}: unknown method {method!r}")
    if budget not in BUDGETS + ("none",):
        raise FormatError(f"{path}: unknown budget {budget!r}")
    expected = set(range(1, num_exits))
    if set(thresholds) != expected or set(cal_sizes) != expected:
        raise FormatError(f"{path}: expected thresholds/cal_sizes for exits 1..{num_exits - 1}")
    return ThresholdSchedule(
        thresholds=tuple(thresholds[j] for j in sorted(thresholds)),
        method=method,
        delta=delta,
        budget=budget,
        cal_sizes=tuple(cal_sizes[j] for j in sorted(cal_sizes)),
    )


# ---------------------------------------------------------------------------
# model checkpoints


def write_checkpoint(model: MultiExitMlp, path) -> None:
    """Shapes plus row-major parameter values at 17 significant digits."""
    lines = [f"{CHECKPOINT_MAGIC} v{FORMAT_VERSION}"]
    lines.append(f"input_dim {model.input_dim}")
    lines.append(f"num_classes {model.num_classes}")
    lines.append("widths " + " ".join(str(w) for w in model.widths))
    for name, arr in model.param_items():
        shape = " ".join(str(s) for s in arr.shape)
        lines.append(f"param {name} {shape}")
        lines.append(" ".join(_fmt17(v) for v in arr.ravel(order="C")))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_checkpoint(path) -> MultiExitMlp:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"{CHECKPOINT_MAGIC} v{FORMAT_VERSION}":
        raise FormatError(f"{path}: not a {CHECKPOINT_MAGIC} v{FORMAT_VERSION} file")
    try:
        input_dim = int(lines[1].split()[1])
        num_classes = int(lines[2].split()[1])
        widths = tuple(int(w) for w in lines[3].split()[1:])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{path}: malformed checkpoint header") from exc

    params: dict[str, np.ndarray] = {}
    i = 4
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if head[0] != "param" or len(head) < 3:
            raise ParseError(f"{path}: line {i + 1}: expected a param declaration")
        name = head[1]
        shape = tuple(int(s) for s in head[2:])
        if i + 1 >= len(lines):
            raise ParseError(f"{path}: line {i + 1}: param {name!r} missing values")
        values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        if values.size != math.prod(shape):
            raise FormatError(
                f"{path}: line {i + 2}: param {name!r} has {values.size} values, "
                f"expected {math.prod(shape)}"
            )
        params[name] = values.reshape(shape)
        i += 2

    model = MultiExitMlp(input_dim=input_dim, widths=widths, num_classes=num_classes)
    try:
        for j in range(len(widths)):
            model.trunk_weights.append(params[f"trunk_w_{j + 1}"])
            model.trunk_biases.append(params[f"trunk_b_{j + 1}"])
            model.head_weights.append(params[f"head_w_{j + 1}"])
            model.head_biases.append(params[f"head_b_{j + 1}"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing parameter {exc.args[0]!r}") from exc
    return model
