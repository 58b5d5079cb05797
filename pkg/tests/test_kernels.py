"""The compiled and numpy kernels must agree bit for bit."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from qsparse import _kernels_py, kernels

BACKENDS = kernels.backends()
needs_both = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
vec = st.integers(1, 64).flatmap(lambda d: arrays(np.float64, d, elements=finite))


def test_fallback_always_available():
    assert BACKENDS["python"] is _kernels_py
    assert kernels.BACKEND in BACKENDS


def test_top_k_ties_prefer_lower_index():
    for impl in BACKENDS.values():
        assert list(impl.top_k_indices(np.array([1.0, -1.0, 1.0, 0.5]), 2)) == [0, 1]


def test_fwht_matches_hadamard_matrix():
    n = 8
    h = np.array([[1.0]])
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    x = np.random.default_rng(0).standard_normal(n)
    for impl in BACKENDS.values():
        y = x.copy()
        impl.fwht(y, 1.0 / np.sqrt(n))
        assert np.allclose(y, h @ x / np.sqrt(n), atol=1e-12)


@needs_both
@settings(max_examples=200, deadline=None)
@given(vec, st.data())
def test_top_k_backends_identical(x, data):
    k = data.draw(st.integers(1, x.size))
    # coarse values create many ties
    x = np.round(x / 1e5)
    a = BACKENDS["cython"].top_k_indices(x, k)
    b = BACKENDS["python"].top_k_indices(x, k)
    assert np.array_equal(a, b)


@needs_both
@settings(max_examples=200, deadline=None)
@given(vec, st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_rounding_backends_identical(x, s, seed):
    u = np.random.default_rng(seed).random(x.size)
    norm = float(np.linalg.norm(x))
    if norm > 0:
        a = BACKENDS["cython"].qsgd_round(x, norm, s, u)
        b = BACKENDS["python"].qsgd_round(x, norm, s, u)
        assert np.array_equal(a, b)
    lo, hi = float(x.min()), float(x.max())
    if hi > lo and s >= 2:
        step = (hi - lo) / s
        a = BACKENDS["cython"].levels_round(x, lo, hi, step, s, u)
        b = BACKENDS["python"].levels_round(x, lo, hi, step, s, u)
        assert np.array_equal(a, b)


@needs_both
@settings(max_examples=100, deadline=None)
@given(st.integers(0, 9), st.integers(0, 2**32 - 1))
def test_fwht_backends_identical(log_n, seed):
    x = np.random.default_rng(seed).standard_normal(1 << log_n)
    a, b = x.copy(), x.copy()
    BACKENDS["cython"].fwht(a, 0.5)
    BACKENDS["python"].fwht(b, 0.5)
    assert np.array_equal(a, b)


def test_env_var_forces_fallback():
    code = "import qsparse.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, QSPARSE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
