"""Flat ``key = value`` experiment configuration.

Keys use underscores; the CLI accepts the same keys as ``--key-name`` flags,
which override file values. Every value is validated before any run starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .blocks import parse_net_spec
from .errors import ConfigError

MODES = ("train-parent", "train-solo", "train-hkt", "train-kd", "eval", "grad-check", "compare")
DATA_SOURCES = ("spiral", "patches", "cifar10")
METHODS = ("solo", "kd", "hkt")


def weights_violation(alpha1: float, alpha2: float, alpha3: float, tol: float = 1e-9):
    """Describe the first violated loss-weight constraint, or return None."""
    for name, a in (("alpha1", alpha1), ("alpha2", alpha2), ("alpha3", alpha3)):
        if not 0.0 <= a <= 1.0:
            return f"{name}={a} must lie in [0, 1]"
    total = alpha1 + alpha2 + alpha3
    if abs(total - 1.0) > tol:
        return f"constraint alpha1 + alpha2 + alpha3 = 1 violated (sum is {total:.12g})"
    if max(alpha1, alpha3) > alpha2 + 1e-12:
        return f"constraint max(alpha1, alpha3) <= alpha2 violated (max({alpha1}, {alpha3}) > {alpha2})"
    return None


def validate_weights(alpha1: float, alpha2: float, alpha3: float) -> None:
    problem = weights_violation(alpha1, alpha2, alpha3)
    if problem:
        raise ConfigError(problem, key="alphas")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _names(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


@dataclass
class ExperimentConfig:
    mode: str
    seed: int = 0
    out: str = "runs/default"
    # data
    data: str = "spiral"
    data_dir: str = ""
    data_seed: int = 0
    split_seed: int = 1
    val_fraction: float = 0.2
    n_per_class: int = 500
    classes: int = 3
    noise: float = 0.25
    turns: float = 2.0
    patch_n: int = 600
    patch_size: int = 16
    dump_data: bool = False
    # networks
    stages: int = 3
    parent: str = ""
    child: str = ""
    parent_seed: int = 0
    parent_ckpt: str = ""
    parent_epochs: int = 80
    parent_lr: float = 0.01
    checkpoint: str = ""
    # transfer
    lam: float = 0.5
    alphas: tuple = (0.25, 0.5, 0.25)
    task_loss: str = "ce"
    # optimisation
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 80
    batch_size: int = 32
    lr_decay_every: int = 60
    lr_decay_gamma: float = 0.1
    eval_every: int = 1
    # kd baseline
    kd_temperature: float = 4.0
    kd_mix: float = 0.5
    # grad-check
    gradcheck_eps: float = 1e-5
    gradcheck_batch: int = 4
    # compare
    seeds: tuple = (0, 1, 2, 3, 4)
    methods: tuple = METHODS
    jobs: int = 1
    # output
    emit_attention: bool = False
    record_timing: bool = False
    figures: bool = True
    sources: dict = field(default_factory=dict, compare=False, repr=False)

    def to_text(self) -> str:
        """Serialise as a config file that :func:`parse_config` reads back identically."""
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "sources":
                continue
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, tuple):
                text = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{_KEY_FOR_FIELD.get(f.name, f.name)} = {text}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        validate_config(cfg)
        return cfg


_FIELD_FOR_KEY = {"lambda": "lam"}
_KEY_FOR_FIELD = {v: k for k, v in _FIELD_FOR_KEY.items()}
_CONVERTERS = {int: int, float: float, str: str, bool: _bool}
_TUPLE_CONVERTERS = {"alphas": _floats, "seeds": _ints, "methods": _names}
KEYS = tuple(
    _KEY_FOR_FIELD.get(f.name, f.name) for f in dataclasses.fields(ExperimentConfig) if f.name != "sources"
)


def _convert(key: str, text: str):
    name = _FIELD_FOR_KEY.get(key, key)
    if name in _TUPLE_CONVERTERS:
        return _TUPLE_CONVERTERS[name](text)
    ftype = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}[name]
    kind = {"int": int, "float": float, "str": str, "bool": bool}[ftype]
    return _CONVERTERS[kind](text.strip())


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def read_config_file(path) -> dict:
    """Raw ``{key: (value, line)}`` pairs from a config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if key in entries:
            raise ConfigError("duplicate key", key=key, line=lineno)
        entries[key] = (value.strip(), lineno)
    return entries


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a validated config from an optional file plus flag overrides.

    ``overrides`` maps keys (dashes or underscores) to string values and wins
    over the file.
    """
    entries = read_config_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        entries[normalize_key(key)] = (str(value), None)
    values, sources = {}, {}
    for key, (text, line) in entries.items():
        if key not in KEYS:
            raise ConfigError("unknown key", key=key, line=line)
        try:
            values[_FIELD_FOR_KEY.get(key, key)] = _convert(key, text)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"invalid value {text!r}: {exc}", key=key, line=line) from None
        sources[key] = line
    if "mode" not in values:
        raise ConfigError("required key is missing", key="mode")
    cfg = ExperimentConfig(**values, sources=sources)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    src = cfg.sources

    def fail(key, msg):
        raise ConfigError(msg, key=key, line=src.get(key))

    if cfg.mode not in MODES:
        fail("mode", f"must be one of {', '.join(MODES)}, got {cfg.mode!r}")
    if cfg.data not in DATA_SOURCES:
        fail("data", f"must be one of {', '.join(DATA_SOURCES)}, got {cfg.data!r}")
    if cfg.data == "cifar10" and not cfg.data_dir:
        fail("data_dir", "cifar10 needs data_dir")
    if len(cfg.alphas) != 3:
        fail("alphas", f"needs three comma-separated weights, got {len(cfg.alphas)}")
    problem = weights_violation(*cfg.alphas)
    if problem:
        fail("alphas", problem)
    if not 0.0 <= cfg.lam <= 1.0:
        fail("lambda", f"must lie in [0, 1], got {cfg.lam}")
    if not 0.0 <= cfg.momentum < 1.0:
        fail("momentum", f"must lie in [0, 1), got {cfg.momentum}")
    for key in ("lr", "parent_lr"):
        if getattr(cfg, key) < 0:
            fail(key, "must be non-negative")
    for key in ("epochs", "parent_epochs", "lr_decay_every"):
        if getattr(cfg, key) < 0:
            fail(key, "must be non-negative")
    for key in ("batch_size", "stages", "n_per_class", "classes", "patch_n", "eval_every",
                "gradcheck_batch", "jobs"):
        if getattr(cfg, key) < 1:
            fail(key, "must be >= 1")
    if cfg.patch_size < 4:
        fail("patch_size", "must be >= 4")
    if cfg.noise < 0:
        fail("noise", "must be non-negative")
    if cfg.turns <= 0:
        fail("turns", "must be positive")
    if not 0.0 < cfg.val_fraction < 1.0:
        fail("val_fraction", "must lie in (0, 1)")
    if cfg.task_loss not in ("ce", "mae"):
        fail("task_loss", f"must be 'ce' or 'mae', got {cfg.task_loss!r}")
    if cfg.kd_temperature <= 0:
        fail("kd_temperature", "must be positive")
    if not 0.0 <= cfg.kd_mix <= 1.0:
        fail("kd_mix", "must lie in [0, 1]")
    if cfg.gradcheck_eps <= 0:
        fail("gradcheck_eps", "must be positive")
    if not cfg.seeds:
        fail("seeds", "needs at least one seed")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad or not cfg.methods:
        fail("methods", f"must be a subset of {', '.join(METHODS)}, got {', '.join(cfg.methods) or 'nothing'}")
    if cfg.mode == "eval" and not cfg.checkpoint:
        fail("checkpoint", "eval mode needs a checkpoint path")
    for key in ("parent", "child"):
        spec = getattr(cfg, key)
        if spec:
            try:
                parse_net_spec(spec)
            except Exception as exc:
                fail(key, str(exc))
