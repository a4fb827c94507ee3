"""Flat dotted-key configuration: defaults < config file < command line.

File format: one ``key = value`` per line, ``#`` starts a comment.
"""

import dataclasses
from pathlib import Path

from .backbone import BackboneConfig
from .data import META_DIM
from .errors import ConfigError
from .head import INIT_MODES, build_model
from .training import TrainConfig

DEFAULTS = {
    "model.variant": "densenet121",
    "model.use_metadata": True,
    "head.hidden1": 512,
    "head.init": "identity_start",
    "data.image_size": 224,
    "data.split_train": 0.7,
    "data.split_val": 0.1,
    "data.split_test": 0.2,
    "data.workers": 1,
    "train.batch_size": 16,
    "train.lr": 0.001,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.adam_eps": 1e-8,
    "train.plateau_factor": 10.0,
    "train.plateau_patience": 1,
    "train.plateau_threshold": 1e-4,
    "train.min_lr": 1e-6,
    "train.max_epochs": 44,
    "train.seed": 0,
    "train.augment": True,
    "train.pos_weight": False,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(DEFAULTS[key])
    if isinstance(value, kind) and not (kind is float and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def parse_config_text(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def format_config(cfg):
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in cfg.items())


def parse_override(item):
    if "=" not in item:
        raise ConfigError(f"override must be key=value, got {item!r}")
    key, value = (part.strip() for part in item.split("=", 1))
    return key, value


def resolve_config(path=None, overrides=()):
    """Merge defaults, an optional config file and ``key=value`` overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        cfg.update(parse_config_text(text))
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        cfg[key] = _coerce(key, value)
    validate(cfg)
    return cfg


def from_echo(echo):
    """Rebuild a validated config from a checkpoint's config echo."""
    cfg = dict(DEFAULTS)
    for key, value in echo.items():
        cfg[key] = _coerce(key, value)
    validate(cfg)
    return cfg


def validate(cfg):
    backbone_config(cfg)
    train_config(cfg)
    if cfg["head.init"] not in INIT_MODES:
        raise ConfigError(f"head.init must be one of {INIT_MODES}")
    if cfg["head.hidden1"] < 1:
        raise ConfigError("head.hidden1 must be >= 1")
    ratios = split_ratios(cfg)
    if min(ratios) <= 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError(f"data.split_* must be positive and sum to 1, got {ratios}")


def split_ratios(cfg):
    return (cfg["data.split_train"], cfg["data.split_val"], cfg["data.split_test"])


def backbone_config(cfg):
    base = BackboneConfig.variant(cfg["model.variant"])
    size = cfg["data.image_size"]
    # every transition halves the map, and the imagenet stem divides by 4
    factor = 2 ** (len(base.block_layers) - 1) * (4 if base.stem == "imagenet" else 1)
    if size < factor or size % factor:
        raise ConfigError(f"data.image_size={size} must be a positive multiple of {factor} for {base.variant_name}")
    return dataclasses.replace(base, input_size=size)


def train_config(cfg):
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    kwargs = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("train.") and k.split(".", 1)[1] in fields}
    return TrainConfig(**kwargs, head_init=cfg["head.init"], variant=cfg["model.variant"])


def build_model_from_config(cfg):
    return build_model(
        backbone_config(cfg),
        hidden1=cfg["head.hidden1"],
        meta_dim=META_DIM,
        seed=cfg["train.seed"],
        init_mode=cfg["head.init"],
        use_metadata=cfg["model.use_metadata"],
    )
