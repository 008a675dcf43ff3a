"""Attackable architectures: sigmoid MLP and one-conv-layer CNN.

Weights follow the (out, in) convention, so a dense layer computes
``x @ W.T + b``. The CNN convolves (no activation), flattens the conv output
``z`` channel-major into ``H`` and feeds it to an MLP head.

Two independent routes produce parameter gradients:

* :func:`batch_gradient` differentiates the autodiff graph;
* :func:`analytic_grads_mlp` / :func:`analytic_grads_cnn` evaluate the
  hand-derived per-layer formulas in plain numpy.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import kernels


class UnsupportedModelError(NotImplementedError):
    pass


def conv_output_width(d, k, p, s):
    """Output width floor((d + 2p - k) / s) + 1.

    >>> conv_output_width(32, 5, 2, 2)
    16
    """
    return kernels.out_width(d, k, p, s)


@dataclass(frozen=True)
class MlpConfig:
    """Layer widths ``(d, n1, ..., n_L)``; the last entry is the class count."""

    layer_sizes: tuple
    bias: bool = True

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def classes(self):
        return self.layer_sizes[-1]

    @property
    def input_shape(self):
        return (self.layer_sizes[0],)

    def weight_shapes(self):
        s = self.layer_sizes
        return [(s[i + 1], s[i]) for i in range(len(s) - 1)]


@dataclass(frozen=True)
class CnnConfig:
    channels: int
    input_width: int
    kernel_size: int
    padding: int
    stride: int
    kernel_count: int
    dense_units: int
    classes: int

    def __post_init__(self):
        for name in ("channels", "input_width", "kernel_size", "stride", "kernel_count", "classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.padding < 0 or self.dense_units < 0:
            raise ValueError("padding and dense_units must be >= 0")
        conv_output_width(self.input_width, self.kernel_size, self.padding, self.stride)

    @property
    def out_width(self):
        return conv_output_width(self.input_width, self.kernel_size, self.padding, self.stride)

    @property
    def n0(self):
        return self.kernel_count * self.out_width**2

    @property
    def input_shape(self):
        return (self.channels, self.input_width, self.input_width)

    @property
    def input_dim(self):
        return self.channels * self.input_width**2

    def head(self):
        """The dense part as an MLP over the flattened conv output."""
        sizes = (self.n0, self.dense_units, self.classes) if self.dense_units else (self.n0, self.classes)
        return MlpConfig(sizes)


@dataclass
class ModelParams:
    """Per-layer ``(weight, bias)`` pairs; for a CNN the first pair is (l0, r)."""

    layers: list

    def tensors(self):
        out = []
        for w, b in self.layers:
            out.append(w)
            if b is not None:
                out.append(b)
        return out

    def replace_tensors(self, tensors):
        it = iter(tensors)
        layers = []
        for w, b in self.layers:
            nw = next(it)
            nb = next(it) if b is not None else None
            layers.append((nw, nb))
        return ModelParams(layers)

    def copy(self):
        return self.replace_tensors([t.copy() for t in self.tensors()])


@dataclass
class GradientBundle:
    """Gradient tensors aligned with ``ModelParams.tensors()``, averaged over ``batch_size``."""

    tensors: list
    batch_size: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def __len__(self):
        return len(self.tensors)

    def __getitem__(self, i):
        return self.tensors[i]


def param_shapes(arch):
    """Shapes of (weight, bias-or-None) per layer."""
    if isinstance(arch, MlpConfig):
        return [(ws, (ws[0],) if arch.bias else None) for ws in arch.weight_shapes()]
    if isinstance(arch, CnnConfig):
        conv = ((arch.kernel_count, arch.channels, arch.kernel_size, arch.kernel_size), (arch.kernel_count,))
        return [conv] + param_shapes(arch.head())
    raise TypeError(f"unknown architecture {arch!r}")


def _fan_in(wshape):
    return int(np.prod(wshape[1:]))


def init_params(arch, seed=0, scale=0.5, fan_in=False):
    """Uniform(-scale, scale) initialisation, seeded.

    With ``fan_in=True`` each layer's bound is ``1/sqrt(fan_in)`` instead, which
    keeps sigmoid pre-activations O(1) for wide inputs (d=784 and up).
    """
    rng = np.random.default_rng(seed)
    layers = []
    for wshape, bshape in param_shapes(arch):
        bound = 1.0 / np.sqrt(_fan_in(wshape)) if fan_in else scale
        w = rng.uniform(-bound, bound, size=wshape)
        b = rng.uniform(-bound, bound, size=bshape) if bshape is not None else None
        layers.append((w, b))
    return ModelParams(layers)


def one_hot(labels, classes):
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels outside [0, {classes})")
    y = np.zeros((labels.size, classes))
    y[np.arange(labels.size), labels] = 1.0
    return y


def _as_targets(y, classes, batch):
    y = np.asarray(y)
    if y.ndim == 2 and y.shape == (batch, classes):
        return y.astype(np.float64)
    if y.ndim == 1 and y.shape == (classes,) and batch == 1 and not np.issubdtype(y.dtype, np.integer):
        return y.reshape(1, classes).astype(np.float64)
    return one_hot(y, classes)


def _as_batch(arch, x):
    x = np.asarray(x, dtype=np.float64)
    shape = arch.input_shape
    if x.shape == shape:
        return x.reshape((1,) + shape)
    if x.shape[1:] == shape:
        return x
    if isinstance(arch, MlpConfig) and x.ndim > 2:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1:] == shape:
            return flat
    if isinstance(arch, MlpConfig) and x.size == arch.input_dim:
        return x.reshape(1, -1)
    raise ad.ShapeError(f"input of shape {x.shape} does not fit architecture input {shape}")


# --- numpy forward -----------------------------------------------------------


def _dense_forward(layers, h):
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        a = np.matmul(h, np.ascontiguousarray(w.T))
        if b is not None:
            a = a + b
        h = kernels.sigmoid(a) if i < last else a
    return h


def mlp_forward(cfg, w, x):
    """Logits of the MLP; ``x`` is one input of length d or a (B, d) batch."""
    single = np.ndim(x) == 1
    out = _dense_forward(w.layers, _as_batch(cfg, x))
    return out[0] if single else out


def cnn_forward(cfg, w, x, return_hidden=False):
    """Logits of the CNN for a (C, d, d) input or (B, C, d, d) batch."""
    single = np.ndim(x) == 3
    xb = _as_batch(cfg, x)
    l0, r = w.layers[0]
    z = kernels.conv2d(xb, l0, cfg.stride, cfg.padding) + r[None, :, None, None]
    hidden = z.reshape(z.shape[0], -1)
    out = _dense_forward(w.layers[1:], hidden)
    if single:
        out, hidden = out[0], hidden[0]
    return (out, hidden) if return_hidden else out


def forward(arch, w, x):
    return mlp_forward(arch, w, x) if isinstance(arch, MlpConfig) else cnn_forward(arch, w, x)


# --- graph construction --------------------------------------------------------


def _dense_graph(layer_nodes, h):
    last = len(layer_nodes) - 1
    for i, (w, b) in enumerate(layer_nodes):
        a = ad.matmul(h, ad.transpose(w))
        if b is not None:
            a = ad.add_bias(a, b)
        h = ad.sigmoid(a) if i < last else a
    return h


def build_logits(arch, layer_nodes, x):
    """Append the forward pass; ``x`` is (B, d) for an MLP, (B, C, d, d) for a CNN."""
    if isinstance(arch, MlpConfig):
        return _dense_graph(layer_nodes, x)
    l0, r = layer_nodes[0]
    z = ad.conv2d(x, l0, r, stride=arch.stride, padding=arch.padding)
    hidden = ad.reshape(z, (x.shape[0], arch.n0))
    return _dense_graph(layer_nodes[1:], hidden)


def param_variables(graph, arch):
    layers = []
    for i, (wshape, bshape) in enumerate(param_shapes(arch)):
        w = graph.variable(wshape, name=f"w{i}")
        b = graph.variable(bshape, name=f"b{i}") if bshape is not None else None
        layers.append((w, b))
    return layers


def flat_nodes(layer_nodes):
    out = []
    for w, b in layer_nodes:
        out.append(w)
        if b is not None:
            out.append(b)
    return out


def loss_and_grads(arch, layer_nodes, x, y):
    """Append mean cross-entropy and its gradients w.r.t. every parameter node."""
    loss = ad.softmax_cross_entropy(build_logits(arch, layer_nodes, x), y)
    return loss, ad.gradient(loss, flat_nodes(layer_nodes))


class GradientProgram:
    """Compiled graph computing the mean loss gradient for a fixed (arch, B)."""

    def __init__(self, arch, batch):
        self.arch = arch
        self.batch = batch
        g = ad.Graph()
        self.graph = g
        self.layers = param_variables(g, arch)
        self.x = g.variable((batch,) + arch.input_shape, name="x")
        self.y = g.variable((batch, arch.classes), name="y")
        self.loss, self.grads = loss_and_grads(arch, self.layers, self.x, self.y)

    def leafs(self, params, x, y):
        vals = dict(zip(flat_nodes(self.layers), params.tensors()))
        vals[self.x] = x
        vals[self.y] = y
        return vals

    def __call__(self, params, x, y):
        out = self.graph.eval(self.leafs(params, x, y), [self.loss] + self.grads)
        return out[0], out[1:]


@lru_cache(maxsize=64)
def gradient_program(arch, batch):
    return GradientProgram(arch, batch)


def batch_gradient(arch, w, x, y):
    """Mean cross-entropy gradient over a batch, via autodiff.

    ``y`` may be integer labels, one-hot rows or (for B=1) a single row.
    """
    xb = _as_batch(arch, x)
    if xb.shape[0] < 1:
        raise ValueError("empty batch")
    yb = _as_targets(y, arch.classes, xb.shape[0])
    _, grads = gradient_program(arch, xb.shape[0])(w, xb, yb)
    return GradientBundle([np.array(g) for g in grads], batch_size=xb.shape[0])


def loss_value(arch, w, x, y):
    xb = _as_batch(arch, x)
    yb = _as_targets(y, arch.classes, xb.shape[0])
    logits = forward(arch, w, xb)
    ls = kernels.logsumexp_rows(logits)
    return float(np.mean(yb.sum(axis=1) * ls - (yb * logits).sum(axis=1)))


# --- hand-derived gradients ---------------------------------------------------


def _check_activation(activation):
    if activation != "sigmoid":
        raise UnsupportedModelError(f"analytic gradients are derived for sigmoid only, not {activation!r}")


def _dense_backward(layers, x, y):
    """Per-layer gradients of one instance through a sigmoid MLP.

    Returns the flat gradient list and dl/dx (the gradient reaching the input).
    """
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        a = w @ h + (b if b is not None else 0.0)
        h = kernels.sigmoid(a) if i < last else a
        acts.append(h)
    p = np.exp(h - h.max())
    p /= p.sum()
    delta = p * y.sum() - y  # = p - y for one-hot y
    grads = []
    for i in range(last, -1, -1):
        w, b = layers[i]
        if i < last:
            s = acts[i + 1]
            delta = delta * s * (1.0 - s)
        layer = [np.outer(delta, acts[i])]
        if b is not None:
            layer.append(delta.copy())
        grads = layer + grads
        delta = w.T @ delta
    return grads, delta


def _one_hidden_layer(layers, x, y):
    (w1, b1), (w2, b2) = layers
    s = kernels.sigmoid(w1 @ x + b1)
    a = w2 @ s + b2
    p = np.exp(a - a.max())
    p /= p.sum()
    err = p - y
    g_b2 = err
    g_w2 = np.outer(err, s)
    g_b1 = (w2.T @ err) * s * (1.0 - s)
    g_w1 = np.outer(g_b1, x)
    return [g_w1, g_b1, g_w2, g_b2]


def analytic_grads_mlp(cfg, w, x, y, activation="sigmoid"):
    """Closed-form cross-entropy gradients of an MLP, averaged over the batch."""
    _check_activation(activation)
    xb = _as_batch(cfg, x)
    yb = _as_targets(y, cfg.classes, xb.shape[0])
    total = None
    explicit = len(w.layers) == 2 and cfg.bias
    for xi, yi in zip(xb, yb):
        if explicit and yi.sum() == 1.0:
            gi = _one_hidden_layer(w.layers, xi, yi)
        else:
            gi, _ = _dense_backward(w.layers, xi, yi)
        total = gi if total is None else [t + g for t, g in zip(total, gi)]
    n = xb.shape[0]
    return GradientBundle([t / n for t in total], batch_size=n)


def _pad(x, p):
    return np.pad(x, ((0, 0), (p, p), (p, p))) if p else x


def conv_reference(x, l0, r, s, p):
    """Direct conv sum for one (C, d, d) input, independent of ``kernels``."""
    h, _, k, _ = l0.shape
    dp = conv_output_width(x.shape[1], k, p, s)
    xp = _pad(x, p)
    z = np.zeros((h, dp, dp))
    span = s * (dp - 1) + 1
    for u in range(k):
        for v in range(k):
            patch = xp[:, u : u + span : s, v : v + span : s]
            z += np.einsum("mc,cij->mij", l0[:, :, u, v], patch)
    return z + r[:, None, None]


def analytic_grads_cnn(cfg, w, x, y, activation="sigmoid"):
    """Closed-form gradients for conv layer + dense head, averaged over the batch.

    dl/dz is read off the head's input gradient through the channel-major
    flattening H[m*d'^2 + i*d' + j] = z[m, i, j].
    """
    _check_activation(activation)
    if len(w.layers) != len(param_shapes(cfg)):
        raise UnsupportedModelError("parameters do not match a single-conv-layer network")
    xb = _as_batch(cfg, x)
    yb = _as_targets(y, cfg.classes, xb.shape[0])
    l0, r = w.layers[0]
    s, p, k, dp = cfg.stride, cfg.padding, cfg.kernel_size, cfg.out_width
    span = s * (dp - 1) + 1
    total = None
    for xi, yi in zip(xb, yb):
        z = conv_reference(xi, l0, r, s, p)
        head, g_h = _dense_backward(w.layers[1:], z.reshape(-1), yi)
        g_z = g_h.reshape(cfg.kernel_count, dp, dp)
        g_r = g_z.sum(axis=(1, 2))
        xp = _pad(xi, p)
        g_l0 = np.zeros_like(l0)
        for u in range(k):
            for v in range(k):
                patch = xp[:, u : u + span : s, v : v + span : s]
                g_l0[:, :, u, v] = np.einsum("mij,cij->mc", g_z, patch)
        gi = [g_l0, g_r] + head
        total = gi if total is None else [t + g for t, g in zip(total, gi)]
    n = xb.shape[0]
    return GradientBundle([t / n for t in total], batch_size=n)
