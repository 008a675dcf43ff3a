"""Command-line interface: ``gradinv <command> [options]``.

Exit codes: 0 success, 1 infeasible architecture under ``--strict``,
2 invalid input or I/O failure.
"""

import argparse
import os
import sys

import numpy as np

from . import feasibility
from .config import ConfigError, load_config, load_model_config, write_snapshot
from .data import SYNTH_KINDS, synth_dataset
from .fileio import FormatError, load_idx, save_image, write_trajectory_csv
from .fl_sim import FlConfig, attack_template, global_loss, make_shards, run
from .metrics import match_batch, mean_l1
from .models import CnnConfig, MlpConfig, batch_gradient, init_params
from .recon import ReconJob, feasibility_for, reconstruct

EXIT_OK, EXIT_INFEASIBLE, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    pass


def _int_list(text):
    return [int(t) for t in str(text).replace(",", " ").split()]


# name -> (type, default, choices, help); every option may also come from --config
OPTIONS = {
    "arch": (str, "mlp", ("mlp", "cnn", "cnn-nodense", "cnn-multi"), "architecture family"),
    "d": (int, 28, None, "input width (MLP input is c*d*d)"),
    "c": (int, 1, None, "input channels"),
    "n1": (int, 1, None, "first hidden / dense units"),
    "n2": (int, 10, None, "classes"),
    "b": (int, 1, None, "batch size"),
    "k": (str, "3", None, "kernel size (comma list for cnn-multi)"),
    "p": (str, "0", None, "padding (comma list for cnn-multi)"),
    "s": (str, "1", None, "stride (comma list for cnn-multi)"),
    "h_kernels": (str, "1", None, "kernel count (comma list for cnn-multi)"),
    "model_config": (str, None, None, "INI file with a [model] section"),
    "init": (str, None, ("uniform", "fan_in"), "weight initialisation"),
    "init_seed": (int, None, None, "weight initialisation seed"),
    "data": (str, "synth:blobs", None, "IDX image file or synth:KIND[:n=N,seed=S]"),
    "labels": (str, None, None, "IDX label file for --data"),
    "index": (int, 0, None, "first dataset item to attack"),
    "out": (str, None, None, "output run directory"),
    "reg": (str, "none", ("none", "orth", "l2"), "batch regularizer"),
    "lambda0": (float, 0.0, None, "initial regularizer weight"),
    "decay_m": (int, 200, None, "iterations between lambda decays"),
    "decay_factor": (float, 0.9, None, "lambda multiplier per decay"),
    "iters": (int, 5000, None, "Adam iterations"),
    "eta": (float, 0.05, None, "Adam learning rate"),
    "prior": (str, "uniform", ("uniform", "normal"), "initial guess distribution"),
    "seed": (int, 0, None, "reconstruction / simulation seed"),
    "workers": (int, 2, None, "federated workers"),
    "rounds": (int, 3, None, "federated rounds"),
    "attack": (str, "on", ("on", "off"), "run the server-side attack"),
    "fl_lr": (float, 0.1, None, "federated SGD learning rate"),
    "partition": (str, "contiguous", ("contiguous", "label_skew"), "shard partitioner"),
    "hs": (str, "1,5,11,12", None, "kernel counts for sweep-kernels"),
    "strict": (bool, False, None, "exit 1 when the architecture is infeasible"),
}

ARCH_OPTS = ["arch", "d", "c", "n1", "n2", "b", "k", "p", "s", "h_kernels"]
MODEL_OPTS = ARCH_OPTS + ["model_config", "init", "init_seed"]
ITER_OPTS = ["iters", "eta", "prior", "seed"]
COMMANDS = {
    "check": ARCH_OPTS,
    "attack-single": MODEL_OPTS + ["data", "labels", "index", "out"] + ITER_OPTS,
    "attack-batch": MODEL_OPTS
    + ["data", "labels", "index", "out", "reg", "lambda0", "decay_m", "decay_factor"]
    + ITER_OPTS,
    "fl-run": MODEL_OPTS
    + ["data", "labels", "out", "workers", "rounds", "attack", "fl_lr", "partition"]
    + ["reg", "lambda0", "decay_m", "decay_factor"]
    + ITER_OPTS,
    "sweep-kernels": MODEL_OPTS + ["data", "labels", "index", "out", "hs"] + ITER_OPTS,
}
HELP = {
    "check": "feasibility report for an architecture",
    "attack-single": "reconstruct one instance (closed form or two-step)",
    "attack-batch": "reconstruct a batch by gradient matching",
    "fl-run": "federated simulation with a passive attacker",
    "sweep-kernels": "mean L1 of the two-step attack against kernel count",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="gradinv", description="Gradient inversion toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for cmd, names in COMMANDS.items():
        sp = sub.add_parser(cmd, help=HELP[cmd], description=HELP[cmd])
        sp.add_argument("--config", help="INI file of option defaults; flags override it")
        for name in names + ["strict"]:
            typ, default, choices, text = OPTIONS[name]
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, action="store_const", const=True, default=None, help=text)
            else:
                shown = f" (default {default})" if default is not None else ""
                sp.add_argument(flag, type=typ, choices=choices, default=None, help=text + shown)
    return parser


def _coerce(name, raw):
    typ, _, choices, _ = OPTIONS[name]
    try:
        if typ is bool:
            value = str(raw).strip().lower() in ("1", "true", "yes", "on")
        else:
            value = typ(raw)
    except ValueError:
        raise CliError(f"config value for {name!r} is not a valid {typ.__name__}: {raw!r}") from None
    if choices and value not in choices:
        raise CliError(f"config value for {name!r} must be one of {choices}, got {value!r}")
    return value


def resolve_options(args):
    """Defaults, then --config values, then explicit flags."""
    names = COMMANDS[args.command] + ["strict"]
    file_vals = load_config(args.config) if args.config else {}
    unknown = sorted(set(file_vals) - set(names))
    if unknown:
        raise CliError(f"{args.config}: options not accepted by {args.command}: {', '.join(unknown)}")
    opts = {}
    for name in names:
        flag_val = getattr(args, name)
        if flag_val is not None:
            opts[name] = flag_val
        elif name in file_vals:
            opts[name] = _coerce(name, file_vals[name])
        else:
            opts[name] = OPTIONS[name][1]
    return opts


# --- architecture and data -------------------------------------------------------


def _single(opts, name):
    vals = _int_list(opts[name])
    if len(vals) != 1:
        raise CliError(f"--{name.replace('_', '-')} takes one value for --arch {opts['arch']}")
    return vals[0]


def arch_from_options(opts):
    kind = opts["arch"]
    if kind == "mlp":
        return MlpConfig((opts["c"] * opts["d"] ** 2, opts["n1"], opts["n2"]))
    if kind in ("cnn", "cnn-nodense"):
        return CnnConfig(
            channels=opts["c"],
            input_width=opts["d"],
            kernel_size=_single(opts, "k"),
            padding=_single(opts, "p"),
            stride=_single(opts, "s"),
            kernel_count=_single(opts, "h_kernels"),
            dense_units=opts["n1"] if kind == "cnn" else 0,
            classes=opts["n2"],
        )
    raise CliError(f"--arch {kind} cannot be attacked; use check")


def model_from_options(opts):
    init = {"fan_in": False, "seed": 0}
    if opts.get("model_config"):
        arch, init = load_model_config(opts["model_config"])
    else:
        arch = arch_from_options(opts)
    if opts.get("init") is not None:
        init["fan_in"] = opts["init"] == "fan_in"
    if opts.get("init_seed") is not None:
        init["seed"] = opts["init_seed"]
    return arch, init_params(arch, init["seed"], fan_in=init["fan_in"]), init


def _input_geometry(arch, opts):
    if isinstance(arch, CnnConfig):
        return arch.channels, arch.input_width
    c, d = opts["c"], opts["d"]
    if c * d * d != arch.input_dim:
        raise CliError(f"MLP input dim {arch.input_dim} does not match c*d*d = {c * d * d}; set --c/--d")
    return c, d


def load_data(spec, arch, opts, n_min):
    classes = arch.classes
    if spec.startswith("synth:"):
        parts = spec.split(":")
        kind = parts[1] if len(parts) > 1 else ""
        if kind not in SYNTH_KINDS:
            raise CliError(f"unknown synthetic kind {kind!r}; expected one of {', '.join(SYNTH_KINDS)}")
        kv = {}
        for item in ",".join(parts[2:]).split(","):
            if item:
                key, _, val = item.partition("=")
                kv[key.strip()] = int(val)
        c, d = _input_geometry(arch, opts)
        n = max(kv.get("n", n_min), n_min)
        return synth_dataset(kind, n, c, d, classes, kv.get("seed", opts["seed"]))
    ds = load_idx(spec, opts.get("labels"), classes=classes)
    c, d = _input_geometry(arch, opts)
    if ds.images.shape[1:] != (c, d, d):
        raise CliError(f"{spec}: images are {ds.images.shape[1:]}, the model expects {(c, d, d)}")
    if len(ds) < n_min:
        raise CliError(f"{spec}: {len(ds)} items, need at least {n_min}")
    return ds


def _inputs(arch, ds, idx):
    return ds.flat(idx) if isinstance(arch, MlpConfig) else ds.images[idx]


# --- outputs ---------------------------------------------------------------------


def _image_shape(arch, opts):
    if isinstance(arch, CnnConfig):
        return arch.input_shape
    c, d = _input_geometry(arch, opts)
    return (c, d, d)


def write_worker_dir(path, result, truth, shape, extra_lines):
    os.makedirs(path, exist_ok=True)
    X = np.asarray(result.X_hat).reshape((-1,) + shape)
    for i, img in enumerate(X):
        save_image(img, os.path.join(path, f"recon_{i:02d}"))
    write_trajectory_csv(result, os.path.join(path, "trajectory.csv"))
    lines = [
        f"case = {result.case}",
        f"iterations_run = {result.iterations_run}",
        f"terminated_reason = {result.terminated_reason}",
    ]
    if truth is not None:
        truth = np.asarray(truth).reshape(X.shape)
        if len(X) == 1:
            lines.append(f"mean_l1 = {mean_l1(X, truth):.6e}")
        else:
            rep = match_batch(X, truth)
            lines.append(f"mean_l1 = {rep.mean_l1:.6e}")
            lines.append("assignment = " + " ".join(str(a) for a in rep.assignment))
            lines.append("pair_l1 = " + " ".join(f"{v:.6e}" for v in rep.pair_l1))
    lines.extend(extra_lines)
    lines.extend(f"warning: {w}" for w in result.warnings)
    with open(os.path.join(path, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return lines


def _snapshot(opts, command):
    if opts.get("out"):
        os.makedirs(opts["out"], exist_ok=True)
        write_snapshot(dict(opts, command=command), os.path.join(opts["out"], "config.snapshot"))


def _recon_job(opts, arch, w, v, B, truth, regularizer="none"):
    return ReconJob(
        target=v,
        params=w,
        arch=arch,
        batch=B,
        prior=opts["prior"],
        iterations=opts["iters"],
        lr=opts["eta"],
        regularizer=regularizer,
        lambda0=opts.get("lambda0", 0.0),
        decay_interval=opts.get("decay_m", 200),
        decay_factor=opts.get("decay_factor", 0.9),
        seed=opts["seed"],
        truth=truth,
    )


def _strict_stop(opts, report, out):
    for line in report.lines():
        print(line, file=out)
    return EXIT_INFEASIBLE if opts["strict"] and not report.feasible else None


# --- commands --------------------------------------------------------------------


def cmd_check(opts, out):
    kind, B = opts["arch"], opts["b"]
    if kind == "mlp":
        report = feasibility.check_mlp_batch(opts["c"] * opts["d"] ** 2, opts["n1"], opts["n2"], B)
    elif kind == "cnn-multi":
        ks, ps, ss, hs = (_int_list(opts[n]) for n in ("k", "p", "s", "h_kernels"))
        n = max(map(len, (ks, ps, ss, hs)))
        layers = []
        for i in range(n):
            pick = [vals[i] if len(vals) > 1 else vals[0] for vals in (ks, ps, ss, hs)]
            layers.append(tuple(pick))
        if any(len(v) not in (1, n) for v in (ks, ps, ss, hs)):
            raise CliError("--k/--p/--s/--h-kernels lists must have equal length (or a single value)")
        report = feasibility.check_multilayer_cnn(layers, opts["c"], opts["d"], B, opts["n1"], opts["n2"])
    else:
        report = feasibility_for(arch_from_options(opts), B)
    for line in report.lines():
        print(line, file=out)
    return EXIT_INFEASIBLE if opts["strict"] and not report.feasible else EXIT_OK


def cmd_attack(opts, out, batch_mode):
    arch, w, _ = model_from_options(opts)
    B = opts["b"] if batch_mode else 1
    stop = _strict_stop(opts, feasibility_for(arch, B), out)
    if stop is not None:
        return stop
    ds = load_data(opts["data"], arch, opts, opts["index"] + B)
    idx = np.arange(opts["index"], opts["index"] + B)
    X = _inputs(arch, ds, idx)
    v = batch_gradient(arch, w, X, ds.labels[idx])
    reg = {"orth": "orthogonality"}.get(opts.get("reg", "none"), opts.get("reg", "none"))
    job = _recon_job(opts, arch, w, v, B, X, regularizer=reg)
    if batch_mode:
        job.mode = "iterative"
    result = reconstruct(job)
    _snapshot(opts, "attack-batch" if batch_mode else "attack-single")
    lines = [f"case = {result.case}", f"iterations_run = {result.iterations_run}"]
    if opts.get("out"):
        path = os.path.join(opts["out"], "round_000", "worker_00")
        lines = write_worker_dir(path, result, X, _image_shape(arch, opts), [])
    else:
        score = mean_l1(result.X_hat.reshape(X.shape), X) if B == 1 else match_batch(result.X_hat, X).mean_l1
        lines.append(f"mean_l1 = {score:.6e}")
    for line in lines:
        print(line, file=out)
    return EXIT_OK


def cmd_fl_run(opts, out):
    arch, w, _ = model_from_options(opts)
    B = opts["b"]
    stop = _strict_stop(opts, feasibility_for(arch, B), out)
    if stop is not None:
        return stop
    ds = load_data(opts["data"], arch, opts, max(opts["workers"] * B, 1))
    template = None
    if opts["attack"] == "on":
        reg = {"orth": "orthogonality"}.get(opts["reg"], opts["reg"])
        template = attack_template(
            prior=opts["prior"],
            iterations=opts["iters"],
            lr=opts["eta"],
            regularizer=reg,
            lambda0=opts["lambda0"],
            decay_interval=opts["decay_m"],
            decay_factor=opts["decay_factor"],
            seed=opts["seed"],
        )
    cfg = FlConfig(
        arch=arch,
        workers=opts["workers"],
        rounds=opts["rounds"],
        batch=B,
        lr=opts["fl_lr"],
        partition=opts["partition"],
        seed=opts["seed"],
        attack=template,
    )
    logs = run(cfg, ds, params=w)
    shards = make_shards(cfg, ds)
    _snapshot(opts, "fl-run")
    shape = _image_shape(arch, opts)
    for log in logs:
        loss = global_loss(arch, log.params, ds, shards)
        scores = "" if log.l1 is None else " mean_l1 = " + " ".join(f"{s:.3e}" for s in log.l1)
        print(f"round {log.round}: global_loss = {loss:.6f}{scores}", file=out)
        for err in log.errors:
            print(f"round {log.round}: {err}", file=out)
        if opts.get("out") and log.recon is not None:
            for j, (res, idx) in enumerate(zip(log.recon, log.indices)):
                if res is None:
                    continue
                path = os.path.join(opts["out"], f"round_{log.round:03d}", f"worker_{j:02d}")
                extra = ["indices = " + " ".join(str(i) for i in idx)]
                write_worker_dir(path, res, _inputs(arch, ds, idx), shape, extra)
    return EXIT_OK


def cmd_sweep(opts, out):
    base, _, init = model_from_options(opts)
    if not isinstance(base, CnnConfig) or not base.dense_units:
        raise CliError("sweep-kernels needs --arch cnn (or a cnn model config) with --n1 >= 1")
    ds = load_data(opts["data"], base, opts, opts["index"] + 1)
    x = ds.images[opts["index"]]
    y = ds.labels[opts["index"] : opts["index"] + 1]
    rows = []
    for h in _int_list(opts["hs"]):
        arch = CnnConfig(
            base.channels, base.input_width, base.kernel_size, base.padding, base.stride, h, base.dense_units, base.classes
        )
        w = init_params(arch, init["seed"], fan_in=init["fan_in"])
        v = batch_gradient(arch, w, x, y)
        res = reconstruct(_recon_job(opts, arch, w, v, 1, x[None]))
        score = mean_l1(res.X_hat.reshape(x.shape), x)
        feasible = feasibility_for(arch, 1).feasible
        rows.append((h, score, feasible))
    print("h\tmean_l1\tfeasible", file=out)
    for h, score, feasible in rows:
        print(f"{h}\t{score:.6e}\t{feasible}", file=out)
    if opts.get("out"):
        os.makedirs(opts["out"], exist_ok=True)
        _snapshot(opts, "sweep-kernels")
        with open(os.path.join(opts["out"], "sweep.csv"), "w") as fh:
            fh.write("h,mean_l1,feasible\n")
            for h, score, feasible in rows:
                fh.write(f"{h},{score:.17g},{feasible}\n")
    return EXIT_OK


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        opts = resolve_options(args)
        if args.command == "check":
            return cmd_check(opts, out)
        if args.command == "attack-single":
            return cmd_attack(opts, out, batch_mode=False)
        if args.command == "attack-batch":
            return cmd_attack(opts, out, batch_mode=True)
        if args.command == "fl-run":
            return cmd_fl_run(opts, out)
        return cmd_sweep(opts, out)
    except (CliError, ConfigError, FormatError, OSError, ValueError) as exc:
        print(f"gradinv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
