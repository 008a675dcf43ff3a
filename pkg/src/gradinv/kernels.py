"""Hot numeric kernels.

The three convolution kernels below are the trilinear form

    T(x, K, g) = sum_{b,m,i,j,c,u,v} g[b,m,i,j] K[m,c,u,v] xpad[b,c,s*i+u,s*j+v]

differentiated with respect to each of its arguments, so each one's adjoint
is expressible through the other two. That closure is what lets the autodiff
engine differentiate convolution gradients a second time.

Every kernel has a numba implementation and a numpy implementation with the
same signature. With numba available, calls whose multiply-add count is at
most ``NUMBA_MAX_WORK`` run the loop kernels; larger calls go to the numpy
versions, whose einsum contractions reach BLAS and win at that size (see
``benchmarks/bench_kernels.py``). ``GRADINV_DISABLE_NUMBA=1`` forces numpy
throughout.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import HAVE_NUMBA, njit

BACKEND = "numba" if HAVE_NUMBA else "numpy"
NUMBA_MAX_WORK = 100_000


def out_width(d, k, p, s):
    """Spatial output width of a square convolution, floor((d+2p-k)/s)+1."""
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    if d + 2 * p < k:
        raise ValueError(f"kernel of width {k} exceeds padded input of width {d + 2 * p}")
    return (d + 2 * p - k) // s + 1


def sigmoid(x):
    # tanh form never overflows and is exactly symmetric: s(x) + s(-x) == 1
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax_rows(a):
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logsumexp_rows(a):
    mx = a.max(axis=1)
    return mx + np.log(np.exp(a - mx[:, None]).sum(axis=1))


# --- numpy kernels ---------------------------------------------------------


def _windows(x, k, s, p, dp):
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    w = sliding_window_view(xp, (k, k), axis=(2, 3))
    return w[:, :, : s * (dp - 1) + 1 : s, : s * (dp - 1) + 1 : s]  # (B, C, d', d', k, k)


def conv2d_numpy(x, kern, s, p):
    k = kern.shape[2]
    dp = out_width(x.shape[2], k, p, s)
    cols = _windows(x, k, s, p, dp)
    return np.ascontiguousarray(np.einsum("bcijuv,mcuv->bmij", cols, kern, optimize=True))


def conv2d_input_grad_numpy(g, kern, s, p, d):
    bsz, _, dp, _ = g.shape
    _, chans, k, _ = kern.shape
    cols = np.einsum("bmij,mcuv->bcuvij", g, kern, optimize=True)
    dpad = d + 2 * p
    gx = np.zeros((bsz, chans, dpad, dpad))
    span = s * (dp - 1) + 1
    for u in range(k):
        for v in range(k):
            gx[:, :, u : u + span : s, v : v + span : s] += cols[:, :, u, v]
    return np.ascontiguousarray(gx[:, :, p : p + d, p : p + d])


def conv2d_kernel_grad_numpy(x, g, s, p, k):
    dp = g.shape[2]
    cols = _windows(x, k, s, p, dp)
    return np.ascontiguousarray(np.einsum("bcijuv,bmij->mcuv", cols, g, optimize=True))


# --- numba kernels ---------------------------------------------------------


@njit(cache=True)
def _conv2d_nb(x, kern, s, p, dp):
    bsz, chans, d, _ = x.shape
    h, _, k, _ = kern.shape
    out = np.zeros((bsz, h, dp, dp))
    for b in range(bsz):
        for m in range(h):
            for i in range(dp):
                for j in range(dp):
                    acc = 0.0
                    for c in range(chans):
                        for u in range(k):
                            r = s * i + u - p
                            if r < 0 or r >= d:
                                continue
                            for v in range(k):
                                q = s * j + v - p
                                if q < 0 or q >= d:
                                    continue
                                acc += kern[m, c, u, v] * x[b, c, r, q]
                    out[b, m, i, j] = acc
    return out


@njit(cache=True)
def _conv2d_input_grad_nb(g, kern, s, p, d):
    bsz, h, dp, _ = g.shape
    _, chans, k, _ = kern.shape
    gx = np.zeros((bsz, chans, d, d))
    for b in range(bsz):
        for m in range(h):
            for i in range(dp):
                for j in range(dp):
                    gv = g[b, m, i, j]
                    if gv == 0.0:
                        continue
                    for c in range(chans):
                        for u in range(k):
                            r = s * i + u - p
                            if r < 0 or r >= d:
                                continue
                            for v in range(k):
                                q = s * j + v - p
                                if q < 0 or q >= d:
                                    continue
                                gx[b, c, r, q] += gv * kern[m, c, u, v]
    return gx


@njit(cache=True)
def _conv2d_kernel_grad_nb(x, g, s, p, k):
    bsz, chans, d, _ = x.shape
    _, h, dp, _ = g.shape
    gk = np.zeros((h, chans, k, k))
    for m in range(h):
        for c in range(chans):
            for u in range(k):
                for v in range(k):
                    acc = 0.0
                    for b in range(bsz):
                        for i in range(dp):
                            r = s * i + u - p
                            if r < 0 or r >= d:
                                continue
                            for j in range(dp):
                                q = s * j + v - p
                                if q < 0 or q >= d:
                                    continue
                                acc += g[b, m, i, j] * x[b, c, r, q]
                    gk[m, c, u, v] = acc
    return gk


def conv2d_numba(x, kern, s, p):
    dp = out_width(x.shape[2], kern.shape[2], p, s)
    return _conv2d_nb(np.ascontiguousarray(x), np.ascontiguousarray(kern), s, p, dp)


def conv2d_input_grad_numba(g, kern, s, p, d):
    return _conv2d_input_grad_nb(np.ascontiguousarray(g), np.ascontiguousarray(kern), s, p, d)


def conv2d_kernel_grad_numba(x, g, s, p, k):
    return _conv2d_kernel_grad_nb(np.ascontiguousarray(x), np.ascontiguousarray(g), s, p, k)


def _conv_work(bsz, h, dp, chans, k):
    return bsz * h * dp * dp * chans * k * k


def _use_numba(work):
    return BACKEND == "numba" and work <= NUMBA_MAX_WORK


def conv2d(x, kern, s, p):
    """(B, C, d, d) input, (h, C, k, k) kernels -> (B, h, d', d')."""
    h, chans, k, _ = kern.shape
    dp = out_width(x.shape[2], k, p, s)
    if _use_numba(_conv_work(x.shape[0], h, dp, chans, k)):
        return conv2d_numba(x, kern, s, p)
    return conv2d_numpy(x, kern, s, p)


def conv2d_input_grad(g, kern, s, p, d):
    """Adjoint of ``conv2d`` in its input: (B, h, d', d') -> (B, C, d, d)."""
    h, chans, k, _ = kern.shape
    if _use_numba(_conv_work(g.shape[0], h, g.shape[2], chans, k)):
        return conv2d_input_grad_numba(g, kern, s, p, d)
    return conv2d_input_grad_numpy(g, kern, s, p, d)


def conv2d_kernel_grad(x, g, s, p, k):
    """Adjoint of ``conv2d`` in its kernels: -> (h, C, k, k)."""
    if _use_numba(_conv_work(x.shape[0], g.shape[1], g.shape[2], x.shape[1], k)):
        return conv2d_kernel_grad_numba(x, g, s, p, k)
    return conv2d_kernel_grad_numpy(x, g, s, p, k)
