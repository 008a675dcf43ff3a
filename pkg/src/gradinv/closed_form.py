"""Non-iterative recovery from single-instance gradients.

For a dense layer ``u = W x + b`` with bias, every unit j has
``dl/dW[j, i] = dl/db[j] * x_i``, so a single unit whose bias gradient is not
zero reveals the layer input exactly as a ratio of two gradient rows. For an
MLP that input is the image; for a CNN it is the flattened conv output H.
"""

from dataclasses import dataclass

import numpy as np

from .models import CnnConfig, GradientBundle

# the ratio stays exact at any normal magnitude, so only zero or subnormal bias gradients are refused
EPS_DIV = float(np.finfo(float).tiny)


class DegenerateGradientError(ValueError):
    """No hidden unit has a usable (non-vanishing) bias gradient."""


@dataclass
class DemixResult:
    H: np.ndarray
    exact: np.ndarray  # per element; False where unit-wise estimates disagree
    unit: int


def _usable_units(g_b, eps):
    return np.flatnonzero(np.abs(g_b) >= eps)


def _ratio(g_w, g_b, unit=0, eps=EPS_DIV):
    """Row ``unit`` of g_w divided by g_b[unit], falling back to the strongest unit."""
    g_b = np.asarray(g_b)
    if abs(g_b[unit]) < eps:
        unit = int(np.argmax(np.abs(g_b)))
        if abs(g_b[unit]) < eps:
            raise DegenerateGradientError(
                f"all {g_b.size} bias gradients are below {eps:g}; the input cannot be recovered"
            )
    return g_w[unit] / g_b[unit], unit


def _check_single(v):
    if v.batch_size != 1:
        raise ValueError(f"closed-form recovery needs a single-instance gradient, got B={v.batch_size}")


def recon_single_mlp(v: GradientBundle, unit=0, eps=EPS_DIV, shape=None):
    """Recover the input of an MLP from its first-layer weight and bias gradients.

    One division per input coordinate; deeper layers are never touched.
    """
    _check_single(v)
    g_w, g_b = v.tensors[0], v.tensors[1]
    if g_w.ndim != 2 or g_b.shape != (g_w.shape[0],):
        raise ValueError("bundle does not start with a biased dense layer")
    x, _ = _ratio(g_w, g_b, unit, eps)
    return x.reshape(shape) if shape is not None else x


def demix_cnn_single(v: GradientBundle, cfg: CnnConfig, unit=0, eps=EPS_DIV, rtol=1e-6):
    """Recover the flattened conv output H from the first dense layer's gradients."""
    _check_single(v)
    if cfg.dense_units < 1:
        raise ValueError("demixing needs a dense layer after the convolution")
    g_w, g_b = v.tensors[2], v.tensors[3]
    if g_w.shape != (cfg.dense_units, cfg.n0):
        raise ValueError(f"dense gradient shape {g_w.shape} does not match n0={cfg.n0}")
    H, used = _ratio(g_w, g_b, unit, eps)
    exact = np.ones(H.shape, dtype=bool)
    for u in _usable_units(g_b, eps):
        if u == used:
            continue
        other = g_w[u] / g_b[u]
        exact &= np.abs(other - H) <= rtol * (np.abs(H) + 1.0)
    return DemixResult(H=H, exact=exact, unit=used)
