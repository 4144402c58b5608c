import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nqr import _kernels_py, kernels

try:
    from nqr import _kernels as compiled
except ImportError:
    compiled = None

needs_ext = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def _mog_state(n, k=3, seed=0):
    rng = np.random.default_rng(seed)
    means = rng.random((k, n))
    variances = rng.uniform(1e-4, 0.05, (k, n))
    weights = rng.random((k, n))
    weights[:, : n // 4] = 0  # some pixels with empty modes
    weights[0, : n // 4] = 1
    weights /= weights.sum(axis=0)
    return means, variances, weights


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    if compiled is not None:
        assert kernels.BACKEND == "cython"


def test_bilinear_exact_on_pixel_centers():
    img = np.arange(12, dtype=float).reshape(3, 4)
    ys, xs = np.mgrid[0:3, 0:4]
    out = _kernels_py.bilinear_sample(img, xs.ravel() + 0.5, ys.ravel() + 0.5)
    assert np.array_equal(out, img.ravel())


def test_bilinear_midpoint_and_clamp():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = _kernels_py.bilinear_sample(img, np.array([1.0, -10.0, 10.0]), np.array([1.0, 0.5, 1.5]))
    assert np.allclose(out, [1.5, 0.0, 3.0])


@needs_ext
def test_bilinear_backends_agree():
    rng = np.random.default_rng(0)
    img = rng.random((40, 50))
    xs, ys = rng.uniform(-5, 55, 5000), rng.uniform(-5, 45, 5000)
    a = _kernels_py.bilinear_sample(img, xs, ys)
    b = compiled.bilinear_sample(img, xs, ys)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@needs_ext
def test_mog_backends_agree():
    n = 4000
    rng = np.random.default_rng(1)
    states = [_mog_state(n), _mog_state(n)]
    for step in range(6):
        frame = rng.random(n) if step % 2 else states[0][0][0] + rng.normal(0, 0.01, n)
        masks = [mod.mog_update(*s, frame, 0.05, 2.5, 0.7, 0.01, 1e-4)
                 for mod, s in zip((_kernels_py, compiled), states)]
        assert np.array_equal(np.asarray(masks[0]), np.asarray(masks[1]))
        for x, y in zip(*states):
            assert np.allclose(x, y, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.5))
def test_mog_weights_stay_normalized(seed, lr):
    rng = np.random.default_rng(seed)
    state = _mog_state(64, seed=seed)
    for _ in range(4):
        kernels.mog_update(*state, rng.random(64), lr, 2.5, 0.7, 0.01, 1e-4)
        means, variances, weights = state
        assert np.allclose(weights.sum(axis=0), 1.0, atol=1e-6)
        assert np.all(variances >= 1e-4)
        assert np.all(weights >= 0)
