import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradinv import kernels


@st.composite
def conv_case(draw):
    k = draw(st.integers(1, 4))
    p = draw(st.integers(0, 2))
    s = draw(st.integers(1, 3))
    d = draw(st.integers(max(1, k - 2 * p), 9))
    B = draw(st.integers(1, 2))
    C = draw(st.integers(1, 3))
    h = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**31 - 1))
    return B, C, d, h, k, s, p, seed


def _arrays(B, C, d, h, k, s, p, seed):
    rng = np.random.default_rng(seed)
    dp = kernels.out_width(d, k, p, s)
    x = rng.standard_normal((B, C, d, d))
    w = rng.standard_normal((h, C, k, k))
    g = rng.standard_normal((B, h, dp, dp))
    return x, w, g


def test_out_width():
    assert kernels.out_width(32, 5, 2, 2) == 16
    assert kernels.out_width(28, 3, 1, 2) == 14
    assert kernels.out_width(7, 1, 0, 1) == 7
    with pytest.raises(ValueError):
        kernels.out_width(3, 5, 0, 1)
    with pytest.raises(ValueError):
        kernels.out_width(8, 3, 0, 0)


@settings(max_examples=60, deadline=None)
@given(conv_case())
def test_backends_agree(case):
    B, C, d, h, k, s, p, seed = case
    x, w, g = _arrays(*case)
    np.testing.assert_allclose(kernels.conv2d_numba(x, w, s, p), kernels.conv2d_numpy(x, w, s, p), atol=1e-12)
    np.testing.assert_allclose(
        kernels.conv2d_input_grad_numba(g, w, s, p, d), kernels.conv2d_input_grad_numpy(g, w, s, p, d), atol=1e-12
    )
    np.testing.assert_allclose(
        kernels.conv2d_kernel_grad_numba(x, g, s, p, k), kernels.conv2d_kernel_grad_numpy(x, g, s, p, k), atol=1e-12
    )


@settings(max_examples=60, deadline=None)
@given(conv_case())
def test_adjoint_identities(case):
    # <conv(x, w), g> = <x, conv_tx(g, w)> = <w, conv_tw(x, g)>
    B, C, d, h, k, s, p, seed = case
    x, w, g = _arrays(*case)
    t0 = np.sum(kernels.conv2d(x, w, s, p) * g)
    t1 = np.sum(x * kernels.conv2d_input_grad(g, w, s, p, d))
    t2 = np.sum(w * kernels.conv2d_kernel_grad(x, g, s, p, k))
    scale = max(1.0, abs(t0))
    assert abs(t0 - t1) <= 1e-10 * scale
    assert abs(t0 - t2) <= 1e-10 * scale


def _direct_conv(x, w, s, p):
    B, C, d, _ = x.shape
    h, _, k, _ = w.shape
    dp = kernels.out_width(d, k, p, s)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((B, h, dp, dp))
    for b in range(B):
        for m in range(h):
            for i in range(dp):
                for j in range(dp):
                    out[b, m, i, j] = np.sum(w[m] * xp[b, :, s * i : s * i + k, s * j : s * j + k])
    return out


@pytest.mark.parametrize("impl", [kernels.conv2d_numpy, kernels.conv2d_numba, kernels.conv2d])
def test_forward_matches_direct_sum(impl, rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((2, 3, 3, 3))
    np.testing.assert_allclose(impl(x, w, 2, 1), _direct_conv(x, w, 2, 1), atol=1e-12)


def test_dispatch_boundary(monkeypatch, rng):
    # both sides of the size threshold give the same numbers
    x = rng.standard_normal((1, 3, 16, 16))
    w = rng.standard_normal((4, 3, 3, 3))
    ref = kernels.conv2d_numpy(x, w, 1, 1)
    for limit in (0, 10**9):
        monkeypatch.setattr(kernels, "NUMBA_MAX_WORK", limit)
        np.testing.assert_allclose(kernels.conv2d(x, w, 1, 1), ref, atol=1e-12)


def test_sigmoid_is_stable():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    s = kernels.sigmoid(x)
    assert np.all(np.isfinite(s))
    assert s[2] == 0.5
    np.testing.assert_allclose(s + kernels.sigmoid(-x), 1.0, atol=1e-15)


def test_softmax_rows(rng):
    a = rng.standard_normal((5, 7)) * 50
    p = kernels.softmax_rows(a)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(kernels.logsumexp_rows(a), np.log(np.exp(a - a.max(1, keepdims=True)).sum(1)) + a.max(1))


def test_env_flag_selects_numpy_backend():
    code = (
        "import numpy as np; from gradinv import kernels, _accel; "
        "x = np.arange(2*16, dtype=float).reshape(1, 2, 4, 4); w = np.ones((3, 2, 3, 3)); "
        "print(kernels.BACKEND, _accel.HAVE_NUMBA, repr(float(kernels.conv2d(x, w, 1, 1).sum())))"
    )
    outs = {}
    for flag in ("1", "0"):
        env = dict(os.environ, GRADINV_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        outs[flag] = res.stdout.split()
    assert outs["1"][:2] == ["numpy", "False"]
    assert outs["0"][0] == "numba"
    assert float(outs["1"][2]) == pytest.approx(float(outs["0"][2]), rel=1e-14)
