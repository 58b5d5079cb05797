"""Loss and gradient oracles.

Three objectives are supported:

* ``Quadratic`` -- 0.5 w'Aw - c'w. Sample i adds a linear noise term -xi_i'w,
  where xi_i is row i of the dataset's feature matrix (centered noise), so
  mini-batch gradients are unbiased and the population optimum is exact.
* ``Softmax`` -- multinomial logistic regression with an l2 penalty on the
  weights (not the biases).
* ``NonConvexLogistic`` -- binary logistic loss plus the smooth non-convex
  penalty alpha * sum w_i^2 / (1 + w_i^2).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError, UnsupportedError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.shape[0]:
            raise DataError(f"features {f.shape} and labels {y.shape} do not line up")
        if not np.all(np.isfinite(f)):
            raise DataError("features contain non-finite values")
        if y.size and y.min() < 0:
            raise DataError("labels must be non-negative")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d_in(self):
        return self.features.shape[1]

    def __eq__(self, other):
        return (isinstance(other, Dataset)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Quadratic:
    A: np.ndarray
    c: np.ndarray

    @property
    def dim(self):
        return self.A.shape[0]


@dataclass(frozen=True)
class Softmax:
    lam: float | None = None
    n_classes: int | None = None


@dataclass(frozen=True)
class NonConvexLogistic:
    alpha: float = 0.1


def make_quadratic(d, mu, L, seed):
    """Random SPD quadratic with eigenvalues spread evenly over [mu, L]."""
    if not 0 < mu <= L:
        raise ParameterError(f"need 0 < mu <= L, got mu={mu}, L={L}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = np.linspace(mu, L, d)
    A = (q * eig) @ q.T
    A = 0.5 * (A + A.T)
    c = rng.standard_normal(d)
    return Quadratic(A, c)


def quadratic_noise(n, d, sigma, seed):
    """Centered Gaussian noise rows for a Quadratic objective."""
    rng = np.random.default_rng(seed)
    xi = sigma * rng.standard_normal((n, d))
    xi -= xi.mean(axis=0)
    return Dataset(xi, np.zeros(n, dtype=np.int64))


def n_classes(obj, data):
    if obj.n_classes is not None:
        return int(obj.n_classes)
    return int(data.labels.max()) + 1


def reg_lambda(obj, data):
    return 1.0 / data.n if obj.lam is None else float(obj.lam)


def param_dim(obj, data):
    if isinstance(obj, Quadratic):
        return obj.dim
    if isinstance(obj, Softmax):
        L = n_classes(obj, data)
        return data.d_in * L + L
    if isinstance(obj, NonConvexLogistic):
        return data.d_in
    raise UnsupportedError(f"unknown objective {obj!r}")


def validate_objective(obj, data):
    """Raise on any mismatch between objective and dataset."""
    if isinstance(obj, Quadratic):
        A = np.asarray(obj.A)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or obj.c.shape != (A.shape[0],):
            raise ParameterError("quadratic: A must be d x d and c a d-vector")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ParameterError("quadratic: A must be symmetric")
        try:
            np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise ParameterError("quadratic: A is not positive definite") from None
        if data is not None and data.n and data.d_in != A.shape[0]:
            raise ParameterError(f"quadratic: noise rows have {data.d_in} columns, expected {A.shape[0]}")
        return
    if data is None or data.n == 0:
        raise DataError("objective needs a non-empty dataset")
    if isinstance(obj, Softmax):
        L = n_classes(obj, data)
        if L < 2:
            raise ParameterError("softmax: need at least 2 classes")
        if data.labels.max() >= L:
            raise DataError(f"softmax: label {int(data.labels.max())} out of range for {L} classes")
        if obj.lam is not None and obj.lam <= 0:
            raise ParameterError("softmax: lambda must be positive")
    elif isinstance(obj, NonConvexLogistic):
        if data.labels.max() > 1:
            raise DataError("nonconvex logistic: labels must be 0 or 1")
        if obj.alpha <= 0:
            raise ParameterError("nonconvex logistic: alpha must be positive")
    else:
        raise UnsupportedError(f"unknown objective {obj!r}")


def _rows(data, subset):
    if subset is None:
        return data.features, data.labels
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ParameterError("subset must not be empty")
    return data.features[subset], data.labels[subset]


def _softmax_parts(obj, w, data):
    L = n_classes(obj, data)
    k = data.d_in * L
    return w[:k].reshape(L, data.d_in), w[k:], L


def loss(obj, w, data, subset=None):
    """Mean loss over ``subset`` (all points when None) plus regularizer."""
    w = np.asarray(w, dtype=np.float64)
    if isinstance(obj, Quadratic):
        val = 0.5 * w @ (obj.A @ w) - obj.c @ w
        if subset is not None:
            xi, _ = _rows(data, subset)
            val -= xi.mean(axis=0) @ w
        return float(val)
    a, y = _rows(data, subset)
    if isinstance(obj, Softmax):
        W, z, _ = _softmax_parts(obj, w, data)
        logits = a @ W.T + z
        lse = np.logaddexp.reduce(logits, axis=1)
        nll = np.mean(lse - logits[np.arange(y.size), y])
        return float(nll + 0.5 * reg_lambda(obj, data) * np.sum(W * W))
    if isinstance(obj, NonConvexLogistic):
        margin = (2.0 * y - 1.0) * (a @ w)
        w2 = w * w
        return float(np.mean(np.logaddexp(0.0, -margin)) + obj.alpha * np.sum(w2 / (1.0 + w2)))
    raise UnsupportedError(f"unknown objective {obj!r}")


def grad(obj, w, data, subset=None):
    w = np.asarray(w, dtype=np.float64)
    if isinstance(obj, Quadratic):
        g = obj.A @ w - obj.c
        if subset is not None:
            xi, _ = _rows(data, subset)
            g = g - xi.mean(axis=0)
        return g
    a, y = _rows(data, subset)
    m = y.size
    if isinstance(obj, Softmax):
        W, z, L = _softmax_parts(obj, w, data)
        logits = a @ W.T + z
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(m), y] -= 1.0
        gW = p.T @ a / m + reg_lambda(obj, data) * W
        gz = p.mean(axis=0)
        return np.concatenate([gW.ravel(), gz])
    if isinstance(obj, NonConvexLogistic):
        sgn = 2.0 * y - 1.0
        margin = sgn * (a @ w)
        # d/dm log(1 + e^-m) = -sigmoid(-m)
        coef = -sgn * _sigmoid(-margin)
        return a.T @ coef / m + obj.alpha * 2.0 * w / (1.0 + w * w) ** 2
    raise UnsupportedError(f"unknown objective {obj!r}")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def per_sample_grads(obj, w, data, idx):
    """Rows are the gradients of the individual sample losses at w."""
    idx = np.asarray(idx, dtype=np.int64)
    return np.stack([grad(obj, w, data, idx[j:j + 1]) for j in range(idx.size)])


def sample_batch(rng, n, b):
    """b indices drawn uniformly with replacement from range(n)."""
    if b < 1:
        raise ParameterError(f"batch size must be >= 1, got {b}")
    if n < 1:
        raise ParameterError("cannot sample from an empty shard")
    return rng.integers(0, n, size=b)


def optimum(obj):
    """Minimizer and minimum of a Quadratic objective."""
    if not isinstance(obj, Quadratic):
        raise UnsupportedError("closed-form optimum is only available for Quadratic")
    chol = np.linalg.cholesky(obj.A)
    w = np.linalg.solve(chol.T, np.linalg.solve(chol, obj.c))
    return w, loss(obj, w, None)


@dataclass
class Constants:
    G_hat: float
    sigma_hat: list = field(default_factory=list)
    L_hat: float = 0.0


def estimate_constants(obj, data, probes, rng, shards=None, scale=1.0, max_points=256, power_iters=30):
    """Empirical smoothness, gradient-norm and variance constants.

    Probe points are drawn sequentially from N(0, scale^2 I), so adding probes
    only extends the earlier sequence and G_hat is a running maximum.
    """
    if probes < 1:
        raise ParameterError("probes must be >= 1")
    dim = param_dim(obj, data)
    has_data = data is not None and data.n > 0
    if shards is None:
        shards = [np.arange(data.n)] if has_data else [None]
    G = 0.0
    L_hat = 0.0
    sig2 = [0.0] * len(shards)
    h = 1e-4
    for _ in range(probes):
        w = scale * rng.standard_normal(dim)
        for j, shard in enumerate(shards):
            if shard is None or not has_data:
                gi = grad(obj, w, None)[None, :]
            else:
                shard = np.asarray(shard)
                pick = shard if shard.size <= max_points else rng.choice(shard, max_points, replace=False)
                gi = per_sample_grads(obj, w, data, pick)
            G = max(G, float(np.max(np.einsum("ij,ij->i", gi, gi))))
            # shifting by the first row keeps identical samples at exactly zero variance
            dev = gi - gi[0]
            m = dev.mean(axis=0)
            var = float(np.mean(np.einsum("ij,ij->i", dev, dev)) - m @ m)
            sig2[j] = max(sig2[j], var, 0.0)
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(power_iters):
            hv = (grad(obj, w + h * v, data) - grad(obj, w - h * v, data)) / (2 * h)
            lam = float(np.linalg.norm(hv))
            if lam == 0.0:
                break
            v = hv / lam
        L_hat = max(L_hat, lam)
    return Constants(float(np.sqrt(G)), [float(np.sqrt(s)) for s in sig2], L_hat)
