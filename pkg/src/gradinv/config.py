"""INI-style configuration files.

Run configs hold one ``key = value`` per line under any ``[section]`` header;
keys are CLI long-option names (``decay-m`` or ``decay_m``). Sections only
group keys, so a key may appear in at most one of them. Model configs use a
``[model]`` section::

    [model]
    type = cnn            # or mlp
    layer_sizes = 784, 5, 10   # mlp only
    channels = 3
    input_width = 32
    kernel_size = 5
    padding = 2
    stride = 2
    kernels = 12
    dense_units = 4       # 0 feeds the conv output straight to the classes
    classes = 10
    init = uniform        # or fan_in
    init_seed = 0
"""

import configparser

from .models import CnnConfig, MlpConfig

MODEL_TYPES = ("mlp", "cnn")


class ConfigError(ValueError):
    pass


def _parser():
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = lambda k: k.strip().lower().replace("-", "_")
    return cp


def _read(path):
    cp = _parser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cp


def load_config(path):
    """Flat ``{key: string}`` mapping of every option in the file."""
    cp = _read(path)
    flat = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            if key in flat:
                raise ConfigError(f"{path}: key {key!r} appears in more than one section")
            flat[key] = value
    return flat


def write_snapshot(options, path, section="run"):
    """Write ``options`` as a single sorted section; values via ``str``."""
    cp = _parser()
    cp[section] = {k: "" if v is None else str(v) for k, v in sorted(options.items())}
    with open(path, "w") as fh:
        cp.write(fh)


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def arch_from_mapping(m):
    kind = m.get("type", "").strip().lower()
    try:
        if kind == "mlp":
            return MlpConfig(_ints(m["layer_sizes"]))
        if kind == "cnn":
            return CnnConfig(
                channels=int(m["channels"]),
                input_width=int(m["input_width"]),
                kernel_size=int(m["kernel_size"]),
                padding=int(m.get("padding", 0)),
                stride=int(m.get("stride", 1)),
                kernel_count=int(m["kernels"]),
                dense_units=int(m.get("dense_units", 0)),
                classes=int(m.get("classes", 10)),
            )
    except KeyError as exc:
        raise ConfigError(f"model config lacks {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(f"invalid model config: {exc}") from None
    raise ConfigError(f"model type must be one of {MODEL_TYPES}, got {kind!r}")


def load_model_config(path):
    """Returns ``(arch, init_options)`` from the ``[model]`` section."""
    cp = _read(path)
    if not cp.has_section("model"):
        raise ConfigError(f"{path}: missing [model] section")
    m = dict(cp.items("model"))
    init = m.get("init", "uniform").strip().lower()
    if init not in ("uniform", "fan_in"):
        raise ConfigError(f"{path}: init must be uniform or fan_in, got {init!r}")
    return arch_from_mapping(m), {"fan_in": init == "fan_in", "seed": int(m.get("init_seed", 0))}
