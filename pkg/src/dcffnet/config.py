"""Model geometry and run settings, with an INI-style text format.

Sections are ``[model]``, ``[train]``, ``[tracker]`` and ``[eval]``. Conv
layers are written ``kernel,stride,padding,out_channels`` and residual stages
``units,mid_channels,out_channels,first_stride``. ``preset = toy`` or
``preset = reference`` in ``[model]`` selects the base geometry; any other key
overrides it.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    stride: int
    padding: int
    out_channels: int

    def __str__(self):
        return f"{self.kernel},{self.stride},{self.padding},{self.out_channels}"


@dataclass(frozen=True)
class BlockSpec:
    units: int
    mid_channels: int
    out_channels: int
    stride: int

    def __str__(self):
        return f"{self.units},{self.mid_channels},{self.out_channels},{self.stride}"


CONV_NAMES = ("conv1", "conv2", "conv3", "conv4", "conv5", "conv6")
BLOCK_NAMES = ("block2", "block3")


@dataclass(frozen=True)
class ModelConfig:
    template_size: int = 127
    search_size: int = 255
    in_channels: int = 3
    conv1: LayerSpec = LayerSpec(11, 2, 0, 32)
    conv2: LayerSpec = LayerSpec(19, 1, 0, 64)
    conv3: LayerSpec = LayerSpec(19, 1, 0, 96)
    block2: BlockSpec = BlockSpec(3, 64, 256, 2)
    block3: BlockSpec = BlockSpec(4, 128, 512, 1)
    conv4: LayerSpec = LayerSpec(3, 1, 0, 512)
    conv5: LayerSpec = LayerSpec(3, 1, 0, 512)
    conv6: LayerSpec = LayerSpec(3, 1, 0, 512)
    cf_first: bool = True
    cf_second: bool = True
    # divide correlation responses by the template window area
    cf_response_scaling: bool = True
    head_channels: int = 256
    # multiplier on the similarity-head correlation; 0 means 1/(C*Ht*Wt)
    fc_response_scale: float = 0.0

    def __post_init__(self):
        if self.template_size >= self.search_size:
            raise ConfigError("template_size must be smaller than search_size")
        for name in CONV_NAMES:
            spec = getattr(self, name)
            if spec.kernel % 2 == 0 or spec.kernel < 1 or spec.stride < 1 or spec.padding < 0:
                raise ConfigError(f"{name}: bad layer spec {spec}")

    def ablation(self, name: str) -> "ModelConfig":
        """The Baseline / CF-1st / CF-2nd / CF-double wiring of this geometry."""
        flags = {"baseline": (False, False), "cf-1st": (True, False),
                 "cf-2nd": (False, True), "cf-double": (True, True)}
        try:
            first, second = flags[name.lower()]
        except KeyError:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(flags)}") from None
        return replace(self, cf_first=first, cf_second=second)


REFERENCE = ModelConfig()

TOY = ModelConfig(
    template_size=31, search_size=63,
    conv1=LayerSpec(3, 2, 0, 8), conv2=LayerSpec(3, 1, 0, 8), conv3=LayerSpec(3, 1, 0, 8),
    block2=BlockSpec(1, 4, 8, 2), block3=BlockSpec(1, 4, 8, 1),
    conv4=LayerSpec(3, 1, 1, 8), conv5=LayerSpec(3, 1, 1, 8), conv6=LayerSpec(3, 1, 1, 8),
    head_channels=8,
)

PRESETS = {"reference": REFERENCE, "toy": TOY}

ABLATIONS = ("baseline", "cf-1st", "cf-2nd", "cf-double")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    dtype: str = "float32"
    batch_size: int = 8
    epoch_divisor: int = 50
    pairs_per_epoch: int = 512
    momentum: float = 0.9
    weight_decay: float = 0.0005
    # per-tensor gradient L2 clip; 0 disables
    grad_clip: float = 0.15
    # stages: "name:epochs@lr" with name in {pretrain, finetune}; full-scale values
    plan: str = "pretrain:150@0.01 finetune:150@0.01 finetune:100@0.001 finetune:50@0.0001"
    max_frame_gap: int = 100
    jitter: float = 32.0
    # search-context scale factor range for pair sampling; 0 keeps crops target-normalised
    scale_jitter: float = 0.0
    label_radius: float = 16.0
    balanced_cls: bool = True
    aug_grayscale: float = 0.25
    aug_flip: float = 0.5
    aug_translate: float = 8.0
    aug_scale_min: float = 0.95
    aug_scale_max: float = 1.05


@dataclass(frozen=True)
class TrackerConfig:
    window_influence: float = 0.4
    size_smoothing: float = 0.3
    min_size: float = 2.0


@dataclass(frozen=True)
class EvalConfig:
    success_bins: int = 101
    precision_max: int = 50
    precision_report: int = 20


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=lambda: REFERENCE)
    train: TrainConfig = field(default_factory=TrainConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _parse_value(kind, text: str, key: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (LayerSpec, BlockSpec):
            parts = [int(p) for p in text.replace(" ", "").split(",")]
            return kind(*parts)
        return kind(text)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse {key} = {text!r} as {kind.__name__}") from None


def _field_types(cls):
    hints = {"int": int, "float": float, "bool": bool, "str": str,
             "LayerSpec": LayerSpec, "BlockSpec": BlockSpec}
    return {f.name: hints[f.type] for f in fields(cls)}


def _section(parser, name, cls, base):
    if not parser.has_section(name):
        return base
    types = _field_types(cls)
    updates = {}
    for key, text in parser.items(name):
        if key == "preset":
            continue
        if key not in types:
            raise ConfigError(f"unknown key [{name}] {key}")
        updates[key] = _parse_value(types[key], text, f"[{name}] {key}")
    try:
        return replace(base, **updates)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(text: str) -> Config:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for sec in parser.sections():
        if sec not in ("model", "train", "tracker", "eval"):
            raise ConfigError(f"unknown section [{sec}]")
    base_model = REFERENCE
    if parser.has_option("model", "preset"):
        preset = parser.get("model", "preset").strip()
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        base_model = PRESETS[preset]
    return Config(
        model=_section(parser, "model", ModelConfig, base_model),
        train=_section(parser, "train", TrainConfig, TrainConfig()),
        tracker=_section(parser, "tracker", TrackerConfig, TrackerConfig()),
        eval=_section(parser, "eval", EvalConfig, EvalConfig()),
    )


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: Config) -> str:
    """Full text form; every key is written so the file is self-describing."""
    lines = []
    for section in ("model", "train", "tracker", "eval"):
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{f.name} = {val}")
        lines.append("")
    return "\n".join(lines)


def as_dict(obj):
    return dataclasses.asdict(obj)
