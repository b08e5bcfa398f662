"""Run configuration.

On disk a config is flat UTF-8 ``key = value`` lines: ``#`` starts a comment,
dotted keys nest (``optim.lr = 0.05``), comma-separated values form lists.
In memory it is a validated pydantic tree; unknown keys are rejected.
"""

from typing import Literal, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .data import SceneSpec
from .errors import ConfigError, IoError
from .net import NetworkConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class VariantConfig(_Section):
    upsampler: Literal["bilinear", "srm"] = "srm"
    context: Literal["none", "crm"] = "crm"


class NetSection(_Section):
    num_classes: int = 4
    in_channels: int = 3
    stage_widths: Tuple[int, int, int, int] = (16, 32, 64, 128)
    decoder_width: int = 64
    embedding_dim: int = 256
    blocks_per_stage: int = 2


class DataSection(_Section):
    size: Tuple[int, int] = (64, 64)
    train_scenes: int = 200
    eval_scenes: int = 100
    shapes: Tuple[int, int] = (2, 5)
    noise_std: float = 0.14


class OptimSection(_Section):
    lr: float = 0.05
    momentum: float = 0.9
    poly_power: float = 0.9


class TrainSection(_Section):
    steps: int = 2000
    batch_size: int = 4
    checkpoint_interval: int = 500


class LossSection(_Section):
    lam: float = 1.0
    tau: float = 0.1
    anchors: int = 1024


class AblateSection(_Section):
    seeds: int = 5


class RunConfig(_Section):
    seed: int = 0
    out: str = "runs/default"
    variant: VariantConfig = Field(default_factory=VariantConfig)
    net: NetSection = Field(default_factory=NetSection)
    data: DataSection = Field(default_factory=DataSection)
    optim: OptimSection = Field(default_factory=OptimSection)
    train: TrainSection = Field(default_factory=TrainSection)
    loss: LossSection = Field(default_factory=LossSection)
    ablate: AblateSection = Field(default_factory=AblateSection)


def parse_text(text):
    """Flat key=value text -> nested plain dict (values stay strings)."""
    tree = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line.strip()!r}")
        key, _, value = body.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        parts = key.split(".")
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {key!r} nests under a scalar key")
        leaf = parts[-1]
        if leaf in node:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        node[leaf] = [v.strip() for v in value.split(",")] if "," in value else value
    return tree


def from_dict(tree):
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def loads(text):
    return from_dict(parse_text(text))


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(config):
    """Canonical flat text; loads(dumps(c)) == c."""
    lines = []

    def walk(prefix, node):
        for key, value in node.items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, dict):
                walk(path, value)
            else:
                lines.append(f"{path} = {_format_value(value)}")

    walk("", config.model_dump())
    return "\n".join(lines) + "\n"


def load(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise IoError(f"cannot read config {path}: {e}") from e
    return loads(text)


def save(path, config):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(dumps(config))
    except OSError as e:
        raise IoError(f"cannot write config {path}: {e}") from e


def apply_variant(config, text):
    """Apply a ``--variant upsampler=srm,context=crm`` style override."""
    fields = dict(config.variant.model_dump())
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ConfigError(f"variant override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        key, value = key.strip(), value.strip()
        if key not in fields:
            raise ConfigError(f"unknown variant field {key!r}")
        fields[key] = value
    try:
        variant = VariantConfig.model_validate(fields)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    return config.model_copy(update={"variant": variant})


def resolve(config_text=None, path=None, seed=None, out=None, variant=None):
    """Config from text or file (defaults if neither), with overrides applied."""
    if config_text is not None and path is not None:
        raise ConfigError("pass either config text or a config path, not both")
    if path is not None:
        config = load(path)
    elif config_text:
        config = loads(config_text)
    else:
        config = RunConfig()
    updates = {}
    if seed is not None:
        updates["seed"] = int(seed)
    if out is not None:
        updates["out"] = str(out)
    if updates:
        config = config.model_copy(update=updates)
    if variant:
        config = apply_variant(config, variant)
    return config


def scene_spec(config):
    return SceneSpec(size=config.data.size, num_classes=config.net.num_classes,
                     shapes=config.data.shapes, noise_std=config.data.noise_std,
                     seed=config.seed)


def net_config(config):
    return NetworkConfig(num_classes=config.net.num_classes,
                         in_channels=config.net.in_channels,
                         stage_widths=config.net.stage_widths,
                         decoder_width=config.net.decoder_width,
                         embedding_dim=config.net.embedding_dim,
                         blocks_per_stage=config.net.blocks_per_stage)
