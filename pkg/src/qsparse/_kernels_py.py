"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Operation order matches the compiled code so results agree bit for bit.
"""
import numpy as np


def top_k_indices(x, k):
    order = np.argsort(-np.abs(x), kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def qsgd_round(x, norm, s, u):
    y = np.minimum(np.abs(x) / norm * s, float(s))
    lvl = np.floor(y)
    frac = y - lvl
    lvl = lvl + (u < frac)
    val = lvl / s * norm
    return np.where(x < 0, -val, val)


def levels_round(x, lo, hi, step, s, u):
    y = np.clip((x - lo) / step, 0.0, float(s))
    lvl = np.floor(y)
    frac = y - lvl
    lvl = lvl + (u < frac)
    return np.where(lvl >= s, hi, lo + lvl * step)


def fwht(x, scale):
    n = x.shape[0]
    h = 1
    while h < n:
        view = x.reshape(-1, 2, h)
        a = view[:, 0, :].copy()
        b = view[:, 1, :]
        view[:, 0, :] = a + b
        view[:, 1, :] = a - b
        h *= 2
    x *= scale
