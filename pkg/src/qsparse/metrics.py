"""Uplink bit accounting, per-step records and CSV/JSON emission."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import QsparseError
from .operators import (
    Composed, Identity, Piecewise, Qsgd, RandK, RotatedLevels, Sign, SignComp,
    StochasticLevels, TopK,
)

VALUE_BITS = 32
NORM_BITS = 32
SIGN_BITS = 1

CSV_FIELDS = ("t", "loss", "grad_norm", "bits", "mem_norm_mean", "local_dev", "virtual_gap")


def index_bits(d):
    """ceil(log2 d), at least one bit."""
    return max(1, (int(d) - 1).bit_length())


def level_bits(s):
    """ceil(log2(s + 1)): bits to name one of s + 1 levels."""
    return max(1, int(s).bit_length())


@dataclass(frozen=True)
class BitModel:
    d: int
    value_bits: int = VALUE_BITS
    norm_bits: int = NORM_BITS
    sign_bits: int = SIGN_BITS

    @property
    def idx_bits(self):
        return index_bits(self.d)

    def lvl_bits(self, s):
        return level_bits(s)


def bit_cost(spec, payload, d):
    """Fixed-width encoding cost in bits of one compressed update.

    ``payload`` is the :class:`~qsparse.operators.Payload` returned by
    :func:`~qsparse.operators.compress`.
    """
    ib = index_bits(d)
    nnz = payload.nnz
    if isinstance(spec, Identity):
        return VALUE_BITS * d
    if isinstance(spec, (TopK, RandK)):
        return nnz * (ib + VALUE_BITS)
    if isinstance(spec, Sign):
        return SIGN_BITS * d
    if isinstance(spec, Qsgd):
        return 0 if nnz == 0 else NORM_BITS + d * (level_bits(spec.s) + SIGN_BITS)
    if isinstance(spec, StochasticLevels):
        return 2 * NORM_BITS + d * level_bits(spec.s)
    if isinstance(spec, RotatedLevels):
        return 2 * NORM_BITS + payload.padded * level_bits(spec.s)
    if isinstance(spec, Composed):
        if nnz == 0:
            return 0
        lb = level_bits(spec.quantizer.s)
        if isinstance(spec.quantizer, RotatedLevels):
            # rotated domain is dense: send the support once plus every rotated level
            return 2 * NORM_BITS + spec.sparsifier.k * ib + payload.padded * lb
        return NORM_BITS + nnz * (ib + lb + SIGN_BITS)
    if isinstance(spec, SignComp):
        return 0 if nnz == 0 else nnz * (ib + SIGN_BITS) + NORM_BITS
    if isinstance(spec, Piecewise):
        return sum(bit_cost(sub, p, hi - lo) for ((lo, hi), sub), p in zip(spec.segments, payload.parts))
    raise QsparseError(f"no bit model for {spec!r}")


@dataclass
class StepRecord:
    t: int
    loss: float
    grad_norm: float | None
    bits: int
    mem_norms: list = field(default_factory=list)
    local_dev: float = 0.0
    virtual_gap: float | None = None
    mem_bound: float | None = None
    local_dev_bound: float | None = None
    virtual_gap_bound: float | None = None

    @property
    def mem_norm_mean(self):
        return float(np.mean(self.mem_norms)) if self.mem_norms else 0.0

    def row(self):
        return {
            "t": self.t,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "bits": self.bits,
            "mem_norm_mean": self.mem_norm_mean,
            "local_dev": self.local_dev,
            "virtual_gap": self.virtual_gap,
        }


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def emit_csv(records, path):
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for rec in records:
                row = rec.row()
                w.writerow([_fmt(row[k]) for k in CSV_FIELDS])
    except OSError as exc:
        raise QsparseError(f"cannot write CSV to {path}: {exc.strerror or exc}") from exc


def read_csv(path):
    """Parse a CSV written by :func:`emit_csv` back into dict rows."""
    rows = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            out = {}
            for k, v in row.items():
                if v == "":
                    out[k] = None
                elif k in ("t", "bits"):
                    out[k] = int(v)
                else:
                    out[k] = float(v)
            rows.append(out)
    return rows


def bits_to_target(records, target_loss):
    """Cumulative uplink bits at the first record with loss <= target, else None."""
    for rec in records:
        if rec.loss <= target_loss:
            return rec.bits
    return None


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating,)):
        return _jsonable(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def summary(result):
    recs = result.records
    losses = [r.loss for r in recs]
    out = {
        "final_loss": losses[-1] if losses else None,
        "best_loss": min(losses) if losses else None,
        "total_uplink_bits": int(result.uplink_bits),
        "total_downlink_bits": int(result.downlink_bits),
        "diagnostics": {k: _jsonable(v) for k, v in result.diagnostics.items()},
        "bits_to_target": [],
    }
    if losses:
        first, best = losses[0], min(losses)
        for frac in (0.5, 0.25, 0.1, 0.05, 0.01):
            target = best + frac * (first - best)
            out["bits_to_target"].append({"target_loss": target, "bits": bits_to_target(recs, target)})
    return out


def emit_summary_json(result, path, config=None):
    doc = summary(result)
    if config is not None:
        doc["config"] = config
    path = Path(path)
    try:
        path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    except OSError as exc:
        raise QsparseError(f"cannot write summary JSON to {path}: {exc.strerror or exc}") from exc
    return doc
