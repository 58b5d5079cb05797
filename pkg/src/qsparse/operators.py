"""Quantizers, sparsifiers and their compositions.

Every operator is described by a small frozen dataclass (an "operator spec")
and applied through :func:`apply_operator`, which returns the reconstruction
the master would use together with the number of uplink bits it costs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import DataError, ParameterError

__all__ = [
    "Identity", "TopK", "RandK", "Qsgd", "StochasticLevels", "RotatedLevels",
    "Sign", "Composed", "SignComp", "Piecewise", "SparseUpdate", "Payload",
    "CompressionReport", "top_k", "rand_k", "qsgd_quantize",
    "stochastic_levels_quantize", "rotated_levels_quantize", "sign_quantize",
    "random_rotation", "inverse_rotation", "apply_operator", "compress",
    "beta", "theoretical_gamma", "data_gamma", "empirical_compression_check",
    "validate", "spec_from_dict", "spec_to_dict", "is_randomized",
    "default_catalog",
]


# -- specs -------------------------------------------------------------------

@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class TopK:
    k: int


@dataclass(frozen=True)
class RandK:
    k: int


@dataclass(frozen=True)
class Qsgd:
    s: int


@dataclass(frozen=True)
class StochasticLevels:
    s: int


@dataclass(frozen=True)
class RotatedLevels:
    s: int


@dataclass(frozen=True)
class Sign:
    pass


@dataclass(frozen=True)
class Composed:
    quantizer: Qsgd | StochasticLevels | RotatedLevels
    sparsifier: TopK | RandK
    scaled: bool = False


@dataclass(frozen=True)
class SignComp:
    sparsifier: TopK | RandK
    m: int = 2


@dataclass(frozen=True)
class Piecewise:
    # ((start, stop), spec) pairs covering [0, d) in order
    segments: tuple = field(default_factory=tuple)


QUANTIZERS = (Qsgd, StochasticLevels, RotatedLevels)
SPARSIFIERS = (TopK, RandK)


@dataclass(frozen=True)
class SparseUpdate:
    indices: np.ndarray
    values: np.ndarray
    dim: int

    @property
    def entries(self):
        return [(int(i), float(v)) for i, v in zip(self.indices, self.values)]

    def to_dense(self):
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


class Payload(NamedTuple):
    """What went over the wire: enough for the bit model to price it."""

    nnz: int
    dim: int
    parts: tuple = ()
    padded: int = 0


# -- helpers -----------------------------------------------------------------

def _as_vector(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"expected a 1-d vector, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("vector contains non-finite values")
    return x


def _check_k(k, d):
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= d:
        raise ParameterError(f"k must be an integer in [1, {d}], got {k!r}")


def _next_pow2(n):
    return 1 << max(0, (int(n) - 1).bit_length())


def _m_norm(v, m):
    if v.size == 0:
        return 0.0
    scale = float(np.max(np.abs(v)))
    if scale == 0.0:
        return 0.0
    return scale * float(np.sum((np.abs(v) / scale) ** m)) ** (1.0 / m)


# -- sparsifiers -------------------------------------------------------------

def top_k(x, k):
    """k largest-magnitude coordinates; equal magnitudes resolve to the lower index."""
    x = _as_vector(x)
    _check_k(k, x.size)
    idx = kernels.top_k_indices(x, int(k))
    return SparseUpdate(idx, x[idx].copy(), x.size)


def rand_k(x, k, rng):
    x = _as_vector(x)
    _check_k(k, x.size)
    idx = np.sort(rng.choice(x.size, size=int(k), replace=False)).astype(np.int64)
    return SparseUpdate(idx, x[idx].copy(), x.size)


def _sparsify(spec, x, rng):
    if isinstance(spec, TopK):
        return top_k(x, spec.k)
    return rand_k(x, spec.k, rng)


# -- quantizers --------------------------------------------------------------

def qsgd_quantize(x, s, rng):
    """Unbiased stochastic rounding of |x_i|/||x|| onto {0, 1/s, ..., 1}."""
    x = _as_vector(x)
    if s < 1:
        raise ParameterError(f"qsgd needs s >= 1, got {s}")
    u = rng.random(x.size)
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        return np.zeros_like(x)
    return kernels.qsgd_round(x, norm, int(s), u)


def stochastic_levels_quantize(x, s, rng):
    """Stochastic rounding onto s+1 evenly spaced points between min(x) and max(x)."""
    x = _as_vector(x)
    if s < 2:
        raise ParameterError(f"stochastic levels need s >= 2, got {s}")
    return _levels(x, s, rng)


def _levels(x, s, rng):
    u = rng.random(x.size)
    if x.size == 0:
        return x.copy()
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return x.copy()
    step = (hi - lo) / s
    return kernels.levels_round(x, lo, hi, step, int(s), u)


def random_rotation(x, rng):
    """Randomized Hadamard rotation of x zero-padded to a power of two.

    Returns the rotated vector and the random sign diagonal needed to undo it.
    """
    return _rotate(_as_vector(x), rng)


def _rotate(x, rng):
    n = _next_pow2(x.size)
    signs = rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0
    y = np.zeros(n)
    y[: x.size] = x
    y *= signs
    kernels.fwht(y, 1.0 / math.sqrt(n))
    return y, signs


def inverse_rotation(y, signs, d):
    z = np.array(y, dtype=np.float64, copy=True)
    kernels.fwht(z, 1.0 / math.sqrt(z.size))
    z *= signs
    return z[:d].copy()


def _rotated(x, s, rng):
    y, signs = _rotate(x, rng)
    q = _levels(y, s, rng)
    return inverse_rotation(q, signs, x.size), q


def rotated_levels_quantize(x, s, rng):
    x = _as_vector(x)
    if s < 2:
        raise ParameterError(f"rotated levels need s >= 2, got {s}")
    return _rotated(x, s, rng)[0]


def sign_quantize(x):
    x = _as_vector(x)
    return np.where(x >= 0, 1.0, -1.0)


def _quantize(spec, v, rng):
    if isinstance(spec, Qsgd):
        out = qsgd_quantize(v, spec.s, rng)
        return out, int(np.count_nonzero(out)), 0
    if isinstance(spec, StochasticLevels):
        out = stochastic_levels_quantize(v, spec.s, rng)
        return out, int(np.count_nonzero(out)), 0
    out, q = _rotated(_as_vector(v), spec.s, rng)
    return out, int(np.count_nonzero(q)), q.size


# -- coefficients ------------------------------------------------------------

def beta(spec, n):
    """Second-moment blow-up of a stochastic quantizer on n-dimensional input."""
    if isinstance(spec, Qsgd):
        return min(n / spec.s ** 2, math.sqrt(n) / spec.s)
    if isinstance(spec, StochasticLevels):
        return n / (2.0 * spec.s ** 2)
    if isinstance(spec, RotatedLevels):
        return 2.0 * math.log2(2 * _next_pow2(n)) / spec.s ** 2
    raise ParameterError(f"beta is defined only for stochastic quantizers, got {type(spec).__name__}")


def theoretical_gamma(spec, d):
    """Static compression coefficient, or None when there is none."""
    if isinstance(spec, Identity):
        return 1.0
    if isinstance(spec, SPARSIFIERS):
        return spec.k / d
    if isinstance(spec, QUANTIZERS):
        b = beta(spec, d)
        return 1.0 - b if b < 1.0 else None
    if isinstance(spec, Sign):
        return None
    if isinstance(spec, Composed):
        k = spec.sparsifier.k
        b = beta(spec.quantizer, k)
        if spec.scaled:
            return k / (d * (1.0 + b))
        return (1.0 - b) * k / d if b < 1.0 else None
    if isinstance(spec, SignComp):
        if spec.m == 1:
            return None
        k = spec.sparsifier.k
        return k ** (2.0 / spec.m - 1.0) / d
    if isinstance(spec, Piecewise):
        gammas = [theoretical_gamma(s, hi - lo) for (lo, hi), s in spec.segments]
        if any(g is None for g in gammas):
            return None
        return min(gammas)
    raise ParameterError(f"unknown operator spec {spec!r}")


def data_gamma(spec, x):
    """Coefficient for this particular x.

    Equals :func:`theoretical_gamma` except for the l1-scaled sign operator,
    whose guarantee depends on the l1/l2 ratio of x.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    if isinstance(spec, SignComp) and spec.m == 1:
        k = spec.sparsifier.k
        n2 = float(np.linalg.norm(x))
        if n2 == 0.0:
            return 1.0 / d
        ratio = float(np.sum(np.abs(x))) / (math.sqrt(d) * n2)
        return max(1.0 / d, (k / d) * ratio ** 2)
    if isinstance(spec, Piecewise):
        gammas = [data_gamma(s, x[lo:hi]) for (lo, hi), s in spec.segments]
        if any(g is None for g in gammas):
            return None
        return min(gammas)
    return theoretical_gamma(spec, d)


# -- validation --------------------------------------------------------------

def validate(spec, d):
    """Raise ParameterError if spec cannot be applied to d-dimensional vectors."""
    if d < 1:
        raise ParameterError(f"dimension must be positive, got {d}")
    if isinstance(spec, (Identity, Sign)):
        return
    if isinstance(spec, SPARSIFIERS):
        _check_k(spec.k, d)
    elif isinstance(spec, Qsgd):
        if not isinstance(spec.s, (int, np.integer)) or spec.s < 1:
            raise ParameterError(f"qsgd.s must be an integer >= 1, got {spec.s!r}")
    elif isinstance(spec, (StochasticLevels, RotatedLevels)):
        if not isinstance(spec.s, (int, np.integer)) or spec.s < 2:
            raise ParameterError(f"{type(spec).__name__}.s must be an integer >= 2, got {spec.s!r}")
    elif isinstance(spec, Composed):
        if not isinstance(spec.quantizer, QUANTIZERS):
            raise ParameterError("composed.quantizer must be qsgd, levels or rotated")
        if not isinstance(spec.sparsifier, SPARSIFIERS):
            raise ParameterError("composed.sparsifier must be topk or randk")
        validate(spec.quantizer, spec.sparsifier.k)
        validate(spec.sparsifier, d)
        if not spec.scaled:
            b = beta(spec.quantizer, spec.sparsifier.k)
            if b >= 1.0:
                raise ParameterError(
                    f"unscaled composed operator needs beta_(k,s) < 1 (operating regime), "
                    f"got beta={b:.6g} for k={spec.sparsifier.k}; use scaled=true")
    elif isinstance(spec, SignComp):
        if not isinstance(spec.sparsifier, SPARSIFIERS):
            raise ParameterError("signcomp.sparsifier must be topk or randk")
        if not isinstance(spec.m, (int, np.integer)) or spec.m < 1:
            raise ParameterError(f"signcomp.m must be a positive integer, got {spec.m!r}")
        validate(spec.sparsifier, d)
    elif isinstance(spec, Piecewise):
        if not spec.segments:
            raise ParameterError("piecewise operator needs at least one segment")
        pos = 0
        for (lo, hi), sub in spec.segments:
            if lo != pos or hi <= lo:
                raise ParameterError(
                    f"piecewise segments must partition [0, {d}) in order; bad segment [{lo}, {hi})")
            validate(sub, hi - lo)
            pos = hi
        if pos != d:
            raise ParameterError(f"piecewise segments cover [0, {pos}) but d={d}")
    else:
        raise ParameterError(f"unknown operator spec {spec!r}")


def is_randomized(spec):
    if isinstance(spec, (Identity, Sign, TopK)):
        return False
    if isinstance(spec, (RandK,) + QUANTIZERS):
        return True
    if isinstance(spec, Composed):
        return True
    if isinstance(spec, SignComp):
        return isinstance(spec.sparsifier, RandK)
    if isinstance(spec, Piecewise):
        return any(is_randomized(s) for _, s in spec.segments)
    return True


# -- application -------------------------------------------------------------

def compress(spec, x, rng):
    """Apply spec to x; returns (reconstruction, Payload)."""
    x = _as_vector(x)
    d = x.size
    if isinstance(spec, Identity):
        return x.copy(), Payload(d, d)
    if isinstance(spec, SPARSIFIERS):
        sp = _sparsify(spec, x, rng)
        return sp.to_dense(), Payload(int(np.count_nonzero(sp.values)), d)
    if isinstance(spec, QUANTIZERS):
        out, nnz, padded = _quantize(spec, x, rng)
        return out, Payload(nnz, d, padded=padded)
    if isinstance(spec, Sign):
        return sign_quantize(x), Payload(d, d)
    if isinstance(spec, Composed):
        sp = _sparsify(spec.sparsifier, x, rng)
        q, nnz, padded = _quantize(spec.quantizer, sp.values, rng)
        if spec.scaled:
            q = q / (1.0 + beta(spec.quantizer, spec.sparsifier.k))
        out = np.zeros(d)
        out[sp.indices] = q
        return out, Payload(nnz, d, padded=padded)
    if isinstance(spec, SignComp):
        sp = _sparsify(spec.sparsifier, x, rng)
        k = sp.indices.size
        scale = _m_norm(sp.values, spec.m) / k
        out = np.zeros(d)
        if scale == 0.0:
            return out, Payload(0, d)
        out[sp.indices] = scale * sign_quantize(sp.values)
        return out, Payload(k, d)
    if isinstance(spec, Piecewise):
        out = np.empty(d)
        parts = []
        for (lo, hi), sub in spec.segments:
            out[lo:hi], p = compress(sub, x[lo:hi], rng)
            parts.append(p)
        return out, Payload(sum(p.nnz for p in parts), d, tuple(parts))
    raise ParameterError(f"unknown operator spec {spec!r}")


def apply_operator(spec, x, rng):
    """Compress x with spec; returns (reconstruction, uplink bits)."""
    from .metrics import bit_cost

    out, payload = compress(spec, x, rng)
    return out, bit_cost(spec, payload, out.size)


# -- empirical check ---------------------------------------------------------

@dataclass
class CompressionReport:
    gamma_theoretical: float | None
    beta: float | None
    empirical_ratio: float
    trials: int
    max_ratio: float
    inner: int = 1
    data_gamma_mean: float | None = None
    slack_mean: float = 0.0
    slack_se: float = 0.0
    passed: bool = True


def _draw(distribution, d, rng):
    if distribution == "normal":
        x = rng.standard_normal(d)
    elif distribution == "heavy":
        x = rng.standard_t(3, size=d)
    elif distribution == "sparse":
        x = rng.standard_normal(d) * (rng.random(d) < 0.1)
        if not np.any(x):
            x[rng.integers(d)] = rng.standard_normal()
    else:
        raise ParameterError(f"unknown distribution {distribution!r}")
    return x


def _report_beta(spec, d):
    if isinstance(spec, QUANTIZERS):
        return beta(spec, d)
    if isinstance(spec, Composed):
        return beta(spec.quantizer, spec.sparsifier.k)
    return None


def empirical_compression_check(spec, d, trials, rng, distribution="normal", inner=None):
    """Monte-Carlo estimate of E||x - C(x)||^2 / ||x||^2 against 1 - gamma.

    Each of ``trials`` vectors is compressed ``inner`` times (once for
    deterministic operators). The check passes when the mean per-vector
    excess over 1 - gamma(x) is within three standard errors of zero.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    validate(spec, d)
    if inner is None:
        inner = 16 if is_randomized(spec) else 1
    ratios = np.empty(trials)
    slack = np.empty(trials)
    gammas = np.empty(trials)
    for i in range(trials):
        x = _draw(distribution, d, rng)
        nx = float(x @ x)
        err = 0.0
        for _ in range(inner):
            out, _ = compress(spec, x, rng)
            r = x - out
            err += float(r @ r)
        ratios[i] = err / inner / nx
        g = data_gamma(spec, x)
        gammas[i] = np.nan if g is None else g
        slack[i] = ratios[i] - (1.0 - gammas[i])
    gamma = theoretical_gamma(spec, d)
    has_bound = not np.any(np.isnan(gammas))
    if has_bound:
        smean = float(slack.mean())
        sse = float(slack.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
        passed = smean <= 3.0 * sse + 1e-12
    else:
        smean, sse, passed = float("nan"), float("nan"), False
    dg = None
    if isinstance(spec, SignComp) and spec.m == 1 or (gamma is None and has_bound):
        dg = float(gammas.mean())
    return CompressionReport(
        gamma_theoretical=gamma,
        beta=_report_beta(spec, d),
        empirical_ratio=float(ratios.mean()),
        trials=trials,
        max_ratio=float(ratios.max()),
        inner=inner,
        data_gamma_mean=dg,
        slack_mean=smean,
        slack_se=sse,
        passed=bool(passed),
    )


def default_catalog(d):
    """Operators exercised by ``qsparse check-ops`` for dimension d."""
    k = max(1, d // 16)
    half = d // 2
    return [
        ("identity", Identity()),
        ("topk", TopK(k)),
        ("randk", RandK(k)),
        ("qsgd", Qsgd(max(2, int(math.ceil(2 * math.sqrt(d)))))),
        ("levels", StochasticLevels(max(2, int(math.ceil(math.sqrt(d)))))),
        ("rotated", RotatedLevels(8)),
        ("qsgd-topk", Composed(Qsgd(max(2, int(math.ceil(2 * math.sqrt(k))))), TopK(k))),
        ("qsgd-topk-scaled", Composed(Qsgd(max(2, int(math.ceil(2 * math.sqrt(k))))), TopK(k), scaled=True)),
        ("qsgd2-topk-scaled", Composed(Qsgd(2), TopK(k), scaled=True)),
        ("levels-randk", Composed(StochasticLevels(4), RandK(k))),
        ("levels2-randk-scaled", Composed(StochasticLevels(2), RandK(k), scaled=True)),
        ("rotated-topk-scaled", Composed(RotatedLevels(2), TopK(k), scaled=True)),
        ("sign-topk-m1", SignComp(TopK(k), m=1)),
        ("sign-topk-m2", SignComp(TopK(k), m=2)),
        ("sign-topk-m64", SignComp(TopK(k), m=64)),
        ("sign-randk-m1", SignComp(RandK(k), m=1)),
        ("sign-randk-m2", SignComp(RandK(k), m=2)),
        ("piecewise", Piecewise((
            ((0, half), Composed(Qsgd(max(2, int(math.ceil(2 * math.sqrt(max(1, half // 16)))))),
                                 TopK(max(1, half // 16)))),
            ((half, d), SignComp(TopK(max(1, (d - half) // 16)), m=2)),
        ))),
    ]


# -- dict round trip ---------------------------------------------------------

_KINDS = {
    "identity": (Identity, ()),
    "topk": (TopK, ("k",)),
    "randk": (RandK, ("k",)),
    "qsgd": (Qsgd, ("s",)),
    "levels": (StochasticLevels, ("s",)),
    "rotated": (RotatedLevels, ("s",)),
    "sign": (Sign, ()),
}


def spec_from_dict(doc, where="operator"):
    """Build a spec from its config mapping; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ParameterError(f"{where}: expected a table, got {type(doc).__name__}")
    kind = doc.get("kind")
    if kind is None:
        raise ParameterError(f"{where}.kind is required")

    def _known(keys):
        extra = sorted(set(doc) - set(keys) - {"kind"})
        if extra:
            raise ParameterError(f"{where}: unknown key(s) {', '.join(extra)}")

    def _int(key):
        if key not in doc:
            raise ParameterError(f"{where}.{key} is required")
        v = doc[key]
        if isinstance(v, bool) or not isinstance(v, int):
            raise ParameterError(f"{where}.{key} must be an integer, got {v!r}")
        return v

    if kind in _KINDS:
        cls, keys = _KINDS[kind]
        _known(keys)
        return cls(*(_int(k) for k in keys))
    if kind == "composed":
        _known(("quantizer", "sparsifier", "scaled"))
        for key in ("quantizer", "sparsifier"):
            if key not in doc:
                raise ParameterError(f"{where}.{key} is required")
        scaled = doc.get("scaled", False)
        if not isinstance(scaled, bool):
            raise ParameterError(f"{where}.scaled must be a boolean")
        q = spec_from_dict(doc["quantizer"], f"{where}.quantizer")
        s = spec_from_dict(doc["sparsifier"], f"{where}.sparsifier")
        if not isinstance(q, QUANTIZERS):
            raise ParameterError(f"{where}.quantizer must be qsgd, levels or rotated")
        if not isinstance(s, SPARSIFIERS):
            raise ParameterError(f"{where}.sparsifier must be topk or randk")
        return Composed(q, s, scaled)
    if kind == "signcomp":
        _known(("sparsifier", "m"))
        if "sparsifier" not in doc:
            raise ParameterError(f"{where}.sparsifier is required")
        s = spec_from_dict(doc["sparsifier"], f"{where}.sparsifier")
        if not isinstance(s, SPARSIFIERS):
            raise ParameterError(f"{where}.sparsifier must be topk or randk")
        m = _int("m") if "m" in doc else 2
        return SignComp(s, m)
    if kind == "piecewise":
        _known(("segments",))
        segs = doc.get("segments")
        if not isinstance(segs, list) or not segs:
            raise ParameterError(f"{where}.segments must be a non-empty list")
        out = []
        for i, seg in enumerate(segs):
            w = f"{where}.segments[{i}]"
            if not isinstance(seg, dict):
                raise ParameterError(f"{w}: expected a table")
            extra = sorted(set(seg) - {"start", "stop", "operator"})
            if extra:
                raise ParameterError(f"{w}: unknown key(s) {', '.join(extra)}")
            try:
                lo, hi, sub = int(seg["start"]), int(seg["stop"]), seg["operator"]
            except KeyError as exc:
                raise ParameterError(f"{w}.{exc.args[0]} is required") from None
            out.append(((lo, hi), spec_from_dict(sub, f"{w}.operator")))
        return Piecewise(tuple(out))
    raise ParameterError(f"{where}.kind: unknown operator kind {kind!r}")


def spec_to_dict(spec):
    for kind, (cls, keys) in _KINDS.items():
        if type(spec) is cls:
            return {"kind": kind, **{k: int(getattr(spec, k)) for k in keys}}
    if isinstance(spec, Composed):
        return {"kind": "composed", "quantizer": spec_to_dict(spec.quantizer),
                "sparsifier": spec_to_dict(spec.sparsifier), "scaled": bool(spec.scaled)}
    if isinstance(spec, SignComp):
        return {"kind": "signcomp", "sparsifier": spec_to_dict(spec.sparsifier), "m": int(spec.m)}
    if isinstance(spec, Piecewise):
        return {"kind": "piecewise", "segments": [
            {"start": int(lo), "stop": int(hi), "operator": spec_to_dict(sub)}
            for (lo, hi), sub in spec.segments]}
    raise ParameterError(f"unknown operator spec {spec!r}")
