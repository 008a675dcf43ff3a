"""Equation-counting feasibility checks for full reconstruction.

Each check compares the number of gradient equations an observer receives
with the number of unknowns (input pixels, per-instance hidden activations,
label terms). The counts are necessary conditions only: the checks assume
the equations are independent and never inspect the actual linear system,
so a feasible report does not prove that reconstruction succeeds.

A report is built from one or more counting stages. It is feasible when
every stage has ``equations >= unknowns`` and every precondition holds; the
top-level ``equations``/``unknowns`` are those of the tightest stage.
"""

from dataclasses import dataclass, field

from .models import CnnConfig, conv_output_width


def _ceil_div(a, b):
    return -(-a // b)


@dataclass
class Stage:
    name: str
    equations: int
    unknowns: int

    @property
    def ok(self):
        return self.equations >= self.unknowns


@dataclass
class FeasibilityReport:
    equations: int
    unknowns: int
    feasible: bool
    min_n1_exact: int | None = None
    min_n1_approx: int | None = None
    min_kernels: int | None = None
    notes: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    per_layer_min_kernels: list | None = None

    def lines(self):
        out = [
            f"feasible = {self.feasible}",
            f"equations = {self.equations}",
            f"unknowns = {self.unknowns}",
        ]
        for key in ("min_n1_exact", "min_n1_approx", "min_kernels"):
            value = getattr(self, key)
            if value is not None:
                out.append(f"{key} = {value}")
        for st in self.stages:
            out.append(f"stage {st.name}: equations = {st.equations}, unknowns = {st.unknowns}, ok = {st.ok}")
        out.extend(f"note: {n}" for n in self.notes)
        return out


def _assemble(stages, notes, preconditions_ok=True, **mins):
    tight = min(stages, key=lambda s: s.equations - s.unknowns)
    feasible = preconditions_ok and all(s.ok for s in stages)
    return FeasibilityReport(
        equations=tight.equations,
        unknowns=tight.unknowns,
        feasible=feasible,
        notes=notes,
        stages=stages,
        **mins,
    )


def _mlp_stage(d, n1, n2, B, name="dense"):
    return Stage(name, n2 + n1 * n2 + n1 + n1 * d, B * n2 + n1 * B + B * d)


def check_mlp_batch(d, n1, n2, B):
    """Counting condition for recovering a batch of B inputs of size d.

    The exact bound solves ``n2 + n1*n2 + n1 + n1*d >= B*n2 + n1*B + B*d``
    for n1; for d much larger than n2 and B it tends to ``n1 >= B``.
    """
    for name, val in (("d", d), ("n1", n1), ("n2", n2), ("B", B)):
        if val < 1:
            raise ValueError(f"{name} must be >= 1, got {val}")
    notes = []
    denom = n2 + 1 + d - B
    numer = B * n2 + B * d - n2
    if denom > 0:
        min_exact = max(1, _ceil_div(numer, denom))
    else:
        min_exact = None
        notes.append(f"no hidden width suffices: d = {d} <= B - n2 - 1 = {B - n2 - 1}")
    stage = _mlp_stage(d, n1, n2, B)
    report = _assemble([stage], notes, min_n1_exact=min_exact, min_n1_approx=B)
    if not report.feasible:
        notes.append(f"n1 = {n1} hidden units give {stage.equations} equations for {stage.unknowns} unknowns")
    return report


def _conv_stage(cfg, B, extra_factor=1, name="conv"):
    dp = cfg.out_width
    # B cancels when a dense layer de-mixes H; without one every instance's
    # pixels must come from the same h*d'^2 equations
    return Stage(name, dp * dp * cfg.kernel_count, cfg.input_width**2 * cfg.channels * extra_factor)


def _min_kernels(cfg, factor=1):
    dp = cfg.out_width
    return _ceil_div(cfg.input_width**2 * cfg.channels * factor, dp * dp)


def check_cnn(cfg: CnnConfig, B):
    """One conv layer followed by a dense layer: h >= (d/d')^2 C, plus the head's own bound."""
    if B < 1:
        raise ValueError("B must be >= 1")
    if cfg.dense_units < 1:
        raise ValueError("check_cnn needs a dense layer; use check_cnn_no_dense")
    min_k = _min_kernels(cfg)
    conv = _conv_stage(cfg, B)
    head = check_mlp_batch(cfg.n0, cfg.dense_units, cfg.classes, B)
    notes = []
    if not conv.ok:
        notes.append(f"h = {cfg.kernel_count} kernels, at least {min_k} required")
    notes.extend(f"dense head: {n}" for n in head.notes)
    stages = [conv] + [Stage("dense", s.equations, s.unknowns) for s in head.stages]
    return _assemble(
        stages,
        notes,
        preconditions_ok=head.min_n1_exact is not None,
        min_kernels=min_k,
        min_n1_exact=head.min_n1_exact,
        min_n1_approx=head.min_n1_approx,
    )


def check_cnn_no_dense(cfg: CnnConfig, B, n1_out=None):
    """Conv layer feeding the output layer directly.

    Needs h >= (d/d')^2 C B, n0 >= n1(B-1)/(n1-B) and 1 < B < n1, where n1 is
    the output width.
    """
    n1_out = cfg.classes if n1_out is None else n1_out
    notes = []
    pre_ok = True
    if B <= 1:
        pre_ok = False
        notes.append("B must exceed 1 for the no-dense counting argument")
    if B >= n1_out:
        pre_ok = False
        notes.append("B must be below output width")
    min_k = _min_kernels(cfg, factor=B)
    conv = _conv_stage(cfg, B, extra_factor=B)
    n0 = cfg.n0
    # n0 (n1 - B) >= n1 (B - 1)  <=>  n1 n0 + n1 >= B n0 + B n1
    out = Stage("output", n1_out * n0 + n1_out, B * n0 + B * n1_out)
    if not conv.ok:
        notes.append(f"h = {cfg.kernel_count} kernels, at least {min_k} required")
    if pre_ok and not out.ok:
        need = _ceil_div(n1_out * (B - 1), n1_out - B)
        notes.append(f"n0 = {n0} below required {need}")
    return _assemble([conv, out], notes, preconditions_ok=pre_ok, min_kernels=min_k)


def check_multilayer_cnn(layers, C, d, B, dense_units=None, classes=None):
    """Stacked conv layers, each given as (k, p, s, h).

    Every layer's output must be at least as large as its input so that each
    intermediate H can be recovered; layers are examined from last to first.
    With ``dense_units``/``classes`` the dense head is checked as well.
    """
    if not layers:
        raise ValueError("need at least one conv layer")
    sizes = []
    chans, width = C, d
    for k, p, s, h in layers:
        dp = conv_output_width(width, k, p, s)
        sizes.append((chans, width, h, dp))
        chans, width = h, dp
    stages, notes, min_kernels = [], [], []
    for idx in range(len(layers) - 1, -1, -1):
        cin, win, h, dp = sizes[idx]
        st = Stage(f"conv{idx + 1}", h * dp * dp, cin * win * win)
        need = _ceil_div(cin * win * win, dp * dp)
        min_kernels.append(need)
        if not st.ok:
            notes.append(f"layer {idx + 1}: h = {h} kernels, at least {need} required")
        stages.append(st)
    stages.reverse()
    min_kernels.reverse()
    pre_ok = True
    min_n1_exact = min_n1_approx = None
    if dense_units:
        n0 = chans * width * width
        head = check_mlp_batch(n0, dense_units, classes, B)
        stages.extend(Stage("dense", s.equations, s.unknowns) for s in head.stages)
        notes.extend(f"dense head: {n}" for n in head.notes)
        pre_ok = head.min_n1_exact is not None
        min_n1_exact, min_n1_approx = head.min_n1_exact, head.min_n1_approx
    return _assemble(
        stages,
        notes,
        preconditions_ok=pre_ok,
        min_kernels=min_kernels[0],
        min_n1_exact=min_n1_exact,
        min_n1_approx=min_n1_approx,
        per_layer_min_kernels=min_kernels,
    )
