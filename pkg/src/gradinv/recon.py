"""Iterative gradient-matching reconstruction and the three-case dispatch.

``reconstruct`` picks the cheapest route for a job:

1. one instance, MLP: closed-form ratio of first-layer gradients;
2. one instance, CNN with a dense layer: closed-form recovery of the conv
   output H, then iterative deconvolution matching ``conv(x_hat) = H``;
3. anything else: iterative matching of all parameter gradients,
   ``L = ||v - G(x_hat, y_hat)||^2 + lam * R(x_hat)``.

The iterative loss is differentiated by double backprop through the model
graph and minimised with Adam. ``lam`` is multiplied by ``decay_factor``
after every ``decay_interval`` iterations.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import closed_form, feasibility
from .metrics import match_batch, mean_l1
from .models import CnnConfig, GradientBundle, MlpConfig, ModelParams, loss_and_grads

logger = logging.getLogger(__name__)

PRIORS = ("uniform", "normal")
REGULARIZERS = ("none", "orthogonality", "l2")
_REG_ALIASES = {"orth": "orthogonality", "ortho": "orthogonality", None: "none"}
EPS_NORM = 1e-30

_PRIOR_ALIASES = {"uniform01": "uniform", "standard_normal": "normal", "gaussian": "normal"}


@dataclass
class ReconJob:
    target: GradientBundle
    params: ModelParams
    arch: object
    batch: int = 1
    prior: str = "uniform"
    iterations: int = 5000
    lr: float = 0.05
    regularizer: str = "none"
    lambda0: float = 0.0
    decay_interval: int = 200
    decay_factor: float = 0.9
    seed: int = 0
    mask: list | None = None
    mode: str = "auto"  # "auto" dispatches by case, "iterative" forces case 3
    truth: np.ndarray | None = None  # ground truth, evaluation mode only
    tol: float | None = None  # stop once the loss falls to tol
    stop_l1: float | None = None  # stop once matched L1 falls below (needs truth)
    use_kernel_grad: bool = True  # deconvolution also fits the conv kernel gradient
    keep_best: bool = False  # return the lowest-loss iterate instead of the last one

    def __post_init__(self):
        self.regularizer = _REG_ALIASES.get(self.regularizer, self.regularizer)
        self.prior = _PRIOR_ALIASES.get(self.prior, self.prior)

    def validate(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_interval < 1:
            raise ValueError("decay_interval must be >= 1")
        if self.prior not in PRIORS:
            raise ValueError(f"unknown prior {self.prior!r}; choose from {PRIORS}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}; choose from {REGULARIZERS}")
        if self.mode not in ("auto", "iterative"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not isinstance(self.arch, (MlpConfig, CnnConfig)):
            raise TypeError(f"unsupported architecture {self.arch!r}")
        shapes = [t.shape for t in self.params.tensors()]
        if [t.shape for t in self.target.tensors] != shapes:
            raise ValueError("target gradient is not shape-congruent with the parameters")
        if self.mask is not None:
            _normalize_mask(self.mask, self.target.tensors)
        if self.truth is not None and np.shape(self.truth)[0] != self.batch:
            raise ValueError("truth batch size differs from job batch")


@dataclass
class ReconResult:
    X_hat: np.ndarray
    Y_hat: np.ndarray | None
    loss_trajectory: np.ndarray
    l1_trajectory: np.ndarray | None
    iterations_run: int
    terminated_reason: str
    case: int
    warnings: list = field(default_factory=list)
    demix: closed_form.DemixResult | None = None
    final_lambda: float = 0.0

    @property
    def best_loss(self):
        return float(self.loss_trajectory.min()) if len(self.loss_trajectory) else 0.0


# --- regularizers --------------------------------------------------------------


def orth_regularizer(X):
    """Sum over ordered pairs k != k' of (x_k . x_k')^2, instances flattened."""
    X = np.asarray(X, dtype=float)
    F = X.reshape(X.shape[0], -1)
    G = F @ F.T
    np.fill_diagonal(G, 0.0)
    return float(np.sum(G * G))


def l2_regularizer(X):
    X = np.asarray(X, dtype=float)
    return float(np.sum(X * X))


def orth_regularizer_node(x):
    g = x.graph
    B = x.shape[0]
    flat = ad.reshape(x, (B, int(np.prod(x.shape[1:]))))
    gram = flat @ flat.T
    off = ad.mul(gram, g.constant(1.0 - np.eye(B)))
    return ad.square(off).sum()


def l2_regularizer_node(x):
    return ad.square(x).sum()


_REG_NODES = {"orthogonality": orth_regularizer_node, "l2": l2_regularizer_node}


# --- masking ------------------------------------------------------------------------


def _normalize_mask(mask, tensors):
    if len(mask) != len(tensors):
        raise ValueError(f"mask has {len(mask)} entries for {len(tensors)} gradient tensors")
    out = []
    for m, t in zip(mask, tensors):
        if m is None or m is True:
            out.append(np.ones(t.shape, dtype=bool))
        elif m is False:
            out.append(np.zeros(t.shape, dtype=bool))
        else:
            m = np.asarray(m, dtype=bool)
            if m.shape != t.shape:
                raise ValueError(f"mask entry of shape {m.shape} for gradient of shape {t.shape}")
            out.append(m)
    if not any(m.any() for m in out):
        raise ValueError("mask selects no gradient coordinates; the objective would be empty")
    return out


def apply_mask(v, v_hat, mask):
    """Restrict observed and guessed gradients to the unmasked coordinates.

    Returns two flat arrays whose squared distance is the masked loss.
    """
    v = [np.asarray(t) for t in v]
    m = _normalize_mask(mask, v) if mask is not None else [np.ones(t.shape, bool) for t in v]
    a = np.concatenate([t[mi] for t, mi in zip(v, m)])
    b = np.concatenate([np.asarray(t)[mi] for t, mi in zip(v_hat, m)])
    return a, b


def masked_distance(v, v_hat, mask=None):
    a, b = apply_mask(v, v_hat, mask)
    return float(np.sum((a - b) ** 2))


# --- Adam ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params):
    return AdamState(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update; returns the new state and parameters."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mi + (1.0 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1.0 - b2) * (g * g) for vi, g in zip(state.v, grads)]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return AdamState(m=m, v=v, t=t, beta1=b1, beta2=b2, eps=state.eps), new


# --- objectives ---------------------------------------------------------------------


def _const_layers(graph, params):
    return [
        (graph.constant(w), graph.constant(b) if b is not None else None) for w, b in params.layers
    ]


class GradientMatchingObjective:
    """``||mask * (v - G(x, softmax(y)))||^2 + lam * R(x)`` and its input gradients."""

    def __init__(self, arch, params, target, batch, regularizer="none", mask=None):
        g = ad.Graph()
        self.graph = g
        self.x = g.variable((batch,) + arch.input_shape, name="x_hat")
        self.y = g.variable((batch, arch.classes), name="y_hat")
        layers = _const_layers(g, params)
        _, g_hat = loss_and_grads(arch, layers, self.x, ad.softmax(self.y))
        masks = _normalize_mask(mask, target.tensors) if mask is not None else None
        terms = []
        for i, (v, gh) in enumerate(zip(target.tensors, g_hat)):
            if masks is not None and not masks[i].any():
                continue
            diff = g.constant(v) - gh
            if masks is not None and not masks[i].all():
                diff = ad.mul(diff, g.constant(masks[i].astype(float)))
            terms.append(ad.square(diff).sum())
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        self.matching = loss
        self.lam = None
        if regularizer != "none":
            self.lam = g.variable((), name="lambda")
            self.reg = _REG_NODES[regularizer](self.x)
            loss = loss + ad.mul(self.lam, self.reg)
        self.loss = loss
        self.grad_x, self.grad_y = ad.gradient(loss, [self.x, self.y])
        self.optimizes_labels = True

    def __call__(self, x, y, lam):
        leaves = {self.x: x, self.y: y}
        if self.lam is not None:
            leaves[self.lam] = np.asarray(lam, dtype=float)
        loss, gx, gy = self.graph.eval(leaves, [self.loss, self.grad_x, self.grad_y])
        return float(loss), gx, gy


class DeconvolutionObjective:
    """Fit the input of a known conv layer to its recovered output H.

    The base term is ``||H - vec(conv(x) + r)||^2``. Passing the observed
    kernel gradient ``g_kernel`` together with ``dz = dl/dz`` (known once H is
    demixed, since the dense head is linear in H) adds
    ``||g_kernel - corr(x, dz)||^2``, which is also linear in x. Each term is
    divided by its target's squared norm so neither dominates by scale.
    """

    def __init__(self, arch, params, H, g_kernel=None, dz=None):
        g = ad.Graph()
        self.graph = g
        self.x = g.variable((1,) + arch.input_shape, name="x_hat")
        l0, r = params.layers[0]
        H = np.asarray(H, dtype=float).reshape(1, arch.n0)
        z = ad.conv2d(self.x, g.constant(l0), g.constant(r), stride=arch.stride, padding=arch.padding)
        diff = g.constant(H) - ad.reshape(z, (1, arch.n0))
        loss = ad.scale(ad.square(diff).sum(), 1.0 / max(float(np.sum(H**2)), EPS_NORM))
        self.uses_kernel_grad = g_kernel is not None and dz is not None
        if self.uses_kernel_grad:
            g_kernel = np.asarray(g_kernel, dtype=float).reshape(l0.shape)
            dz = np.asarray(dz, dtype=float).reshape((1, arch.kernel_count, arch.out_width, arch.out_width))
            gk = ad._conv_tw(self.x, g.constant(dz), arch.stride, arch.padding, arch.kernel_size)
            kdiff = g.constant(g_kernel) - gk
            norm = max(float(np.sum(g_kernel**2)), EPS_NORM)
            loss = loss + ad.scale(ad.square(kdiff).sum(), 1.0 / norm)
        self.loss = loss
        (self.grad_x,) = ad.gradient(self.loss, [self.x])
        self.optimizes_labels = False

    def __call__(self, x, y, lam):
        loss, gx = self.graph.eval({self.x: x}, [self.loss, self.grad_x])
        return float(loss), gx, None


def conv_output_grad(v: GradientBundle, params, arch):
    """dl/dz for a single instance, from the first dense layer's bias gradient."""
    W1 = params.layers[1][0]
    dh = W1.T @ np.asarray(v.tensors[3], dtype=float)
    return dh.reshape(1, arch.kernel_count, arch.out_width, arch.out_width)


# --- iterative reconstruction ----------------------------------------------------


def _sample_prior(rng, prior, shape):
    if prior == "uniform":
        return rng.uniform(0.0, 1.0, size=shape)
    return rng.standard_normal(size=shape)


def _l1_now(x_hat, truth):
    if x_hat.shape[0] == 1:
        return mean_l1(x_hat, truth)
    return match_batch(x_hat, truth).mean_l1


def itr_rec(job, flag="all", target=None, x0=None, y0=None):
    """Adam on the gradient-matching loss.

    ``flag="all"`` matches every (unmasked) parameter gradient and adds the
    job's regularizer; ``flag="partial"`` matches the conv output ``target``
    (the recovered H) through the conv layer only, plus the conv kernel
    gradient when ``job.use_kernel_grad`` is set.
    """
    arch = job.arch
    B = job.batch
    if flag == "all":
        obj = GradientMatchingObjective(arch, job.params, job.target, B, job.regularizer, job.mask)
    elif flag == "partial":
        if not isinstance(arch, CnnConfig):
            raise ValueError("partial reconstruction applies to the conv layer of a CNN")
        g_kernel = dz = None
        if job.use_kernel_grad and arch.dense_units:
            g_kernel = job.target.tensors[0]
            dz = conv_output_grad(job.target, job.params, arch)
        obj = DeconvolutionObjective(arch, job.params, target, g_kernel=g_kernel, dz=dz)
    else:
        raise ValueError(f"unknown flag {flag!r}")

    rng = np.random.default_rng(job.seed)
    x = _sample_prior(rng, job.prior, (B,) + arch.input_shape) if x0 is None else np.array(x0, float)
    y = _sample_prior(rng, job.prior, (B, arch.classes)) if y0 is None else np.array(y0, float)
    truth = None
    if job.truth is not None:
        truth = np.asarray(job.truth, dtype=float).reshape((B,) + arch.input_shape)

    opt_vars = [x, y] if obj.optimizes_labels else [x]
    state = adam_init(opt_vars)
    lam = job.lambda0
    losses, l1s = [], []
    best = (np.inf, x, y)
    reason = "completed"
    it = 0
    for it in range(1, job.iterations + 1):
        loss, gx, gy = obj(x, y, lam)
        if not np.isfinite(loss) or not np.all(np.isfinite(gx)):
            reason = "diverged"
            it -= 1
            break
        losses.append(loss)
        if loss < best[0]:
            best = (loss, x, y)
        if truth is not None:
            l1s.append(_l1_now(x, truth))
            if job.stop_l1 is not None and l1s[-1] < job.stop_l1:
                reason = "reached_l1"
                break
        if job.tol is not None and loss <= job.tol:
            reason = "converged"
            break
        grads = [gx, gy] if obj.optimizes_labels else [gx]
        state, opt_vars = adam_step(state, opt_vars, grads, job.lr)
        if obj.optimizes_labels:
            x, y = opt_vars
        else:
            (x,) = opt_vars
        if it % job.decay_interval == 0:
            lam *= job.decay_factor

    if reason == "diverged":
        logger.warning("reconstruction diverged after %d iterations; returning best iterate", it)
    if (reason == "diverged" or job.keep_best) and best[0] < np.inf:
        _, x, y = best
    return ReconResult(
        X_hat=x,
        Y_hat=y,
        loss_trajectory=np.asarray(losses),
        l1_trajectory=np.asarray(l1s) if truth is not None else None,
        iterations_run=len(losses),
        terminated_reason=reason,
        case=3 if flag == "all" else 2,
        final_lambda=lam,
    )


def feasibility_for(arch, B):
    if isinstance(arch, MlpConfig):
        return feasibility.check_mlp_batch(arch.input_dim, arch.layer_sizes[1], arch.classes, B)
    if arch.dense_units:
        return feasibility.check_cnn(arch, B)
    return feasibility.check_cnn_no_dense(arch, B)


def reconstruct(job: ReconJob) -> ReconResult:
    """Dispatch a job to closed-form, two-step or fully iterative reconstruction."""
    job.validate()
    arch = job.arch
    warnings = []
    report = feasibility_for(arch, job.batch)
    if not report.feasible:
        msg = "architecture fails the counting condition: " + "; ".join(report.notes or ["equations < unknowns"])
        logger.warning(msg)
        warnings.append(msg)

    single = job.batch == 1 and job.mode == "auto"
    if single and isinstance(arch, MlpConfig):
        x = closed_form.recon_single_mlp(job.target).reshape(1, arch.input_dim)
        return ReconResult(
            X_hat=x,
            Y_hat=None,
            loss_trajectory=np.zeros(0),
            l1_trajectory=np.zeros(0) if job.truth is not None else None,
            iterations_run=0,
            terminated_reason="closed_form",
            case=1,
            warnings=warnings,
        )
    if single and isinstance(arch, CnnConfig) and arch.dense_units:
        demix = closed_form.demix_cnn_single(job.target, arch)
        result = itr_rec(job, flag="partial", target=demix.H)
        result.demix = demix
        result.warnings = warnings
        return result
    result = itr_rec(job, flag="all")
    result.warnings = warnings
    return result
