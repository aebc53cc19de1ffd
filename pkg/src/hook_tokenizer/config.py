"""Model, training and data configuration with a flat ``key = value`` file format.

Keys are namespaced (``opm.dim``, ``ovm.tokens``, ``backbone.preset``,
``head.task``, ``train.lr``, ``data.size``). Later sources override earlier
ones; unknown keys are rejected by name.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .tensor import ContractError

BACKBONE_PRESETS = {
    "tiny": (1, 64, 4),
    "small": (12, 384, 4),
    "base": (12, 768, 8),
    "large": (24, 1024, 8),
    "huge": (32, 1280, 10),
}

SHAPE_KINDS = ("disk", "rectangle", "triangle")


class ConfigError(ValueError):
    pass


_LAYOUT_BLOCKED = re.compile(r"^L(?:x(\d+))?\+G(?:x(\d+))?$")
_LAYOUT_ALTERNATING = re.compile(r"^\(L\+G\)x(\d+)$")


def parse_layout(layout: str) -> list[str]:
    """Expand a layout string into a sequence of ``"L"``/``"G"`` layers.

    Accepts ``L+G``, ``Lx3+Gx3`` (blocked) and ``(L+G)x3`` (alternating).
    """
    s = layout.replace(" ", "").replace("×", "x")
    m = _LAYOUT_BLOCKED.match(s)
    if m:
        a = int(m.group(1) or 1)
        b = int(m.group(2) or 1)
        return ["L"] * a + ["G"] * b
    m = _LAYOUT_ALTERNATING.match(s)
    if m:
        return ["L", "G"] * int(m.group(1))
    raise ConfigError(f"bad opm.layout {layout!r}; expected 'Lxa+Gxb' or '(L+G)xa'")


@dataclass
class OpmConfig:
    seed_size: int = 4
    dim: int = 512
    heads: int = 8
    window_divisor: int = 2
    use_local: bool = True
    use_global: bool = True
    layout: str = "L+G"
    pos_embed: bool = True
    convs_per_stage: int = 1

    def attention_layers(self) -> list[str]:
        kinds = parse_layout(self.layout)
        return [k for k in kinds if (k == "L" and self.use_local) or (k == "G" and self.use_global)]

    @property
    def local_layers(self):
        return self.attention_layers().count("L")

    @property
    def global_layers(self):
        return self.attention_layers().count("G")

    def validate(self):
        s = self.seed_size
        if s < 2 or s & (s - 1):
            raise ConfigError(f"opm.seed_size must be a power of two >= 2, got {s}")
        if self.dim % self.heads:
            raise ConfigError(f"opm.dim {self.dim} not divisible by opm.heads {self.heads}")
        if self.window_divisor < 1:
            raise ConfigError("opm.window_divisor must be positive")
        parse_layout(self.layout)


@dataclass
class OvmConfig:
    tokens: int = 6
    cross_dim: int = 256
    out_dim: int = 768
    heads: int = 8
    layers: int = 1

    def validate(self):
        if self.tokens < 1:
            raise ConfigError("ovm.tokens must be >= 1")
        if self.cross_dim % self.heads:
            raise ConfigError(f"ovm.cross_dim {self.cross_dim} not divisible by ovm.heads {self.heads}")
        if self.layers < 1:
            raise ConfigError("ovm.layers must be >= 1")


@dataclass
class BackboneConfig:
    layers: int = 12
    dim: int = 768
    heads: int = 8

    @classmethod
    def preset(cls, name: str) -> "BackboneConfig":
        try:
            return cls(*BACKBONE_PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown backbone preset {name!r}; choose from {sorted(BACKBONE_PRESETS)}") from None

    def validate(self):
        if self.dim % self.heads:
            raise ConfigError(f"backbone.dim {self.dim} not divisible by backbone.heads {self.heads}")


@dataclass
class HeadConfig:
    task: str = "classify"
    classes: int = 4
    # segment only: divide each seed's attention column by its sum so spatial
    # features are convex mixtures of tokens, then layer-normalise them
    seed_normalize: bool = True
    norm: bool = True

    def validate(self):
        if self.task not in ("classify", "segment"):
            raise ConfigError(f"head.task must be classify or segment, got {self.task!r}")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    warmup_epochs: int = 10
    weight_decay: float = 0.05
    batch_size: int = 32
    seed: int = 0

    @classmethod
    def for_task(cls, task: str) -> "TrainConfig":
        if task == "segment":
            return cls(lr=5e-6, batch_size=8)
        return cls()

    def validate(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError("train.warmup_epochs exceeds train.epochs")
        if self.lr < 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("train values must be non-negative with batch_size >= 1")


@dataclass
class DataConfig:
    size: int = 64
    classes: int = 3
    count: int = 60
    min_objects: int = 1
    max_objects: int = 3
    min_object_size: int = 12
    max_object_size: int = 28
    texture: float = 0.08
    jitter: float = 0.08
    seed: int = 0


@dataclass
class ModelConfig:
    opm: OpmConfig = field(default_factory=OpmConfig)
    ovm: OvmConfig = field(default_factory=OvmConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    image_size: int = 64

    def validate(self):
        self.opm.validate()
        self.ovm.validate()
        self.backbone.validate()
        self.head.validate()
        if self.ovm.out_dim != self.backbone.dim:
            raise ConfigError(f"ovm.out_dim {self.ovm.out_dim} must equal backbone.dim {self.backbone.dim}")
        if self.image_size % self.opm.seed_size:
            raise ConfigError(f"image size {self.image_size} not divisible by opm.seed_size {self.opm.seed_size}")
        grid = self.image_size // self.opm.seed_size
        if self.opm.use_local and "L" in parse_layout(self.opm.layout) and grid % self.opm.window_divisor:
            raise ConfigError(f"seed grid {grid} not divisible by opm.window_divisor {self.opm.window_divisor}")
        return self


def tiny_config(task="classify", seed_dim=64, tokens=6, image_size=64, seed_size=4, classes=4) -> ModelConfig:
    """Desk-scale model: scaled seed dim, tiny backbone."""
    return ModelConfig(
        opm=OpmConfig(seed_size=seed_size, dim=seed_dim, heads=4),
        ovm=OvmConfig(tokens=tokens, cross_dim=max(seed_dim // 2, 4), out_dim=64, heads=4),
        backbone=BackboneConfig.preset("tiny"),
        head=HeadConfig(task=task, classes=classes),
        image_size=image_size,
    ).validate()


@dataclass
class RunConfig:
    """Everything a CLI invocation can configure."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _coerce(value: str, typ):
    if typ is bool or typ == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if typ is int or typ == "int":
        return int(value)
    if typ is float or typ == "float":
        return float(value)
    return value.strip()


_SECTIONS = {
    "opm": ("model", "opm"),
    "ovm": ("model", "ovm"),
    "backbone": ("model", "backbone"),
    "head": ("model", "head"),
    "train": ("train",),
    "data": ("data",),
}


def _target(cfg: RunConfig, section: str):
    obj = cfg
    for attr in _SECTIONS[section]:
        obj = getattr(obj, attr)
    return obj


def parse_kv_lines(lines, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_pairs(cfg: RunConfig, pairs) -> RunConfig:
    """Apply key/value pairs in order; a ``backbone.preset`` resets layers/dim/heads."""
    for key, value in pairs:
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        if section == "backbone" and name == "preset":
            preset = BackboneConfig.preset(value.strip().lower())
            cfg.model.backbone = preset
            cfg.model.ovm.out_dim = preset.dim
            continue
        if section == "head" and name == "task":
            cfg.model.head.task = value.strip()
            continue
        if section == "data" and name == "size":
            cfg.data.size = int(value)
            cfg.model.image_size = int(value)
            continue
        target = _target(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(value, fields[name].type))
        if section == "backbone" and name == "dim":
            cfg.model.ovm.out_dim = cfg.model.backbone.dim
    return cfg


def load_run_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    pairs = []
    if path is not None:
        text = Path(path).read_text()
        pairs += parse_kv_lines(text.splitlines(), str(path))
    pairs += parse_kv_lines(overrides, "<override>")
    apply_pairs(cfg, pairs)
    # task-specific training defaults unless set explicitly
    given = {k for k, _ in pairs}
    task_defaults = TrainConfig.for_task(cfg.model.head.task)
    for name in ("lr", "batch_size"):
        if f"train.{name}" not in given:
            setattr(cfg.train, name, getattr(task_defaults, name))
    cfg.model.head.classes = cfg.data.classes + 1
    cfg.model.validate()
    cfg.train.validate()
    return cfg


def model_config_items(cfg: ModelConfig) -> list[tuple[str, str]]:
    """Flatten a model config to ordered ``(key, value)`` pairs."""
    items = []
    for section in ("opm", "ovm", "backbone", "head"):
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            items.append((f"{section}.{f.name}", _fmt(getattr(obj, f.name))))
    items.append(("model.image_size", str(cfg.image_size)))
    return items


def model_config_from_items(items) -> ModelConfig:
    cfg = ModelConfig()
    for key, value in items:
        section, _, name = key.partition(".")
        if key == "model.image_size":
            cfg.image_size = int(value)
            continue
        if section not in ("opm", "ovm", "backbone", "head"):
            raise ConfigError(f"unknown model config key {key!r}")
        obj = getattr(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise ConfigError(f"unknown model config key {key!r}")
        setattr(obj, name, _coerce(value, fields[name].type))
    return cfg.validate()


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {v}" for k, v in model_config_items(cfg.model) if not k.startswith("model.")]
    for section in ("train", "data"):
        obj = getattr(cfg, section)
        lines += [f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
    return "\n".join(lines) + "\n"


__all__ = [
    "BACKBONE_PRESETS", "SHAPE_KINDS", "ConfigError", "ContractError", "OpmConfig", "OvmConfig",
    "BackboneConfig", "HeadConfig", "TrainConfig", "DataConfig", "ModelConfig", "RunConfig",
    "parse_layout", "tiny_config", "load_run_config", "model_config_items", "model_config_from_items",
    "dump_config", "parse_kv_lines", "apply_pairs",
]
