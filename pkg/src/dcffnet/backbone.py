"""Modified ResNet-50 trunk: conv1-3, two bottleneck stages, conv4-6.

Each conv is followed by a per-channel affine (folded batch norm) and, except
for conv6, a ReLU. Correlation-fusion taps sit after conv3 and after block2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .autodiff import Graph
from .config import BLOCK_NAMES, ModelConfig
from .fusion import correlation_fusion_node

TAPS = ("after_conv3", "after_block2", "final")


def conv_spec(layer, in_channels: int) -> T.ConvSpec:
    return T.ConvSpec(layer.kernel, layer.kernel, layer.stride, layer.padding, in_channels, layer.out_channels)


def _unit_specs(block, in_channels: int, first: bool):
    """ConvSpecs of one bottleneck unit: reduce, mid, expand and optional projection."""
    stride = block.stride if first else 1
    specs = {
        "reduce": T.ConvSpec(1, 1, 1, 0, in_channels, block.mid_channels),
        "mid": T.ConvSpec(3, 3, stride, 1, block.mid_channels, block.mid_channels),
        "expand": T.ConvSpec(1, 1, 1, 0, block.mid_channels, block.out_channels),
    }
    if stride != 1 or in_channels != block.out_channels:
        specs["proj"] = T.ConvSpec(1, 1, stride, 0, in_channels, block.out_channels)
    return specs


def layer_plan(cfg: ModelConfig):
    """Ordered ``(name, kind, spec)`` entries; kind is "conv" or "unit"."""
    plan = []
    ch = cfg.in_channels
    for name in ("conv1", "conv2", "conv3"):
        spec = conv_spec(getattr(cfg, name), ch)
        plan.append((name, "conv", spec))
        ch = spec.out_channels
    for bname in BLOCK_NAMES:
        block = getattr(cfg, bname)
        for u in range(block.units):
            specs = _unit_specs(block, ch, u == 0)
            plan.append((f"{bname}.{u}", "unit", specs))
            ch = block.out_channels
    for name in ("conv4", "conv5", "conv6"):
        spec = conv_spec(getattr(cfg, name), ch)
        plan.append((name, "conv", spec))
        ch = spec.out_channels
    return plan


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    for name, kind, spec in layer_plan(cfg):
        convs = {"": spec} if kind == "conv" else {"." + k: s for k, s in spec.items()}
        for suffix, s in convs.items():
            prefix = name + suffix
            shapes[prefix + ".weight"] = s.weight_shape
            shapes[prefix + ".gamma"] = (s.out_channels,)
            shapes[prefix + ".beta"] = (s.out_channels,)
    return shapes


def _propagate(cfg: ModelConfig, size: int):
    """Per-layer output shapes for a square input, plus the index->pixel affine map."""
    c, h, w = cfg.in_channels, size, size
    scale, offset = 1.0, 0.0
    table = {}
    for name, kind, spec in layer_plan(cfg):
        if kind == "conv":
            h, w = spec.out_extent(h, w)
            c = spec.out_channels
            offset += scale * ((spec.kernel_h - 1) / 2 - spec.padding)
            scale *= spec.stride
        else:
            mid = spec["mid"]
            h, w = mid.out_extent(h, w)
            c = spec["expand"].out_channels
            scale *= mid.stride
        table[name] = (c, h, w)
    return table, scale, offset


def shape_table(cfg: ModelConfig) -> dict[str, dict[str, tuple]]:
    """Output shape of every layer and tap, for both branches."""
    out = {}
    for role, size in (("template", cfg.template_size), ("search", cfg.search_size)):
        table, _, _ = _propagate(cfg, size)
        last2 = f"block2.{cfg.block2.units - 1}"
        table["after_conv3"] = table["conv3"]
        table["after_block2"] = table[last2]
        table["final"] = table["conv6"]
        out[role] = table
    return out


@dataclass(frozen=True)
class HeadGeometry:
    extent: tuple[int, int]
    stride: float
    offset: float


def head_geometry(cfg: ModelConfig) -> HeadGeometry:
    """Response-map extent and its affine map to search-image coordinates.

    Image coordinates put pixel ``i`` at ``[i, i + 1)``, so its centre is
    ``i + 0.5``.
    """
    s_table, scale, offset = _propagate(cfg, cfg.search_size)
    t_table, _, _ = _propagate(cfg, cfg.template_size)
    _, hs, ws = s_table["conv6"]
    _, ht, wt = t_table["conv6"]
    if ht > hs or wt > ws:
        raise T.ShapeError(f"template final {ht}x{wt} exceeds search final {hs}x{ws}")
    return HeadGeometry((hs - ht + 1, ws - wt + 1), scale, offset + scale * (ht - 1) / 2 + 0.5)


@dataclass
class StagewiseFeatures:
    taps: dict[str, np.ndarray] = field(default_factory=dict)

    def shapes(self):
        return {k: v.shape for k, v in self.taps.items()}


# ---------------------------------------------------------------- graph builders

def conv_affine(g: Graph, x: int, prefix: str, params: dict, spec: T.ConvSpec, relu: bool) -> int:
    w = g.param(prefix + ".weight", params[prefix + ".weight"])
    dtype = params[prefix + ".weight"].dtype
    zero = g.const(np.zeros(spec.out_channels, dtype=dtype))
    y = g.conv2d(x, w, zero, spec)
    y = g.scale_shift(y, g.param(prefix + ".gamma", params[prefix + ".gamma"]),
                      g.param(prefix + ".beta", params[prefix + ".beta"]))
    return g.relu(y) if relu else y


def bottleneck_node(g: Graph, x: int, prefix: str, params: dict, specs: dict) -> int:
    h = conv_affine(g, x, prefix + ".reduce", params, specs["reduce"], relu=True)
    h = conv_affine(g, h, prefix + ".mid", params, specs["mid"], relu=True)
    h = conv_affine(g, h, prefix + ".expand", params, specs["expand"], relu=False)
    if "proj" in specs:
        short = conv_affine(g, x, prefix + ".proj", params, specs["proj"], relu=False)
    else:
        short = x
    return g.relu(g.add(short, h))


def bottleneck_forward(x: np.ndarray, weights: dict, stride: int) -> np.ndarray:
    """One bottleneck unit on arrays.

    ``weights`` maps ``reduce``/``mid``/``expand``/``proj`` to
    ``(weight, gamma, beta)``; ``proj`` is required when the stride or the
    channel count changes.
    """
    x = T.as_tensor(x)
    w_reduce = weights["reduce"][0]
    if w_reduce.shape[1] != x.shape[0]:
        raise T.ShapeError(f"input {x.shape} does not match reduce weight {w_reduce.shape}")
    mid_ch, out_ch = w_reduce.shape[0], weights["expand"][0].shape[0]
    specs = {
        "reduce": T.ConvSpec(1, 1, 1, 0, x.shape[0], mid_ch),
        "mid": T.ConvSpec(3, 3, stride, 1, mid_ch, mid_ch),
        "expand": T.ConvSpec(1, 1, 1, 0, mid_ch, out_ch),
    }
    if stride != 1 or x.shape[0] != out_ch:
        if "proj" not in weights:
            raise T.ShapeError("projection shortcut weights required when stride or channels change")
        specs["proj"] = T.ConvSpec(1, 1, stride, 0, x.shape[0], out_ch)
    params = {}
    for part in specs:
        w, gamma, beta = weights[part]
        params[f"u.{part}.weight"], params[f"u.{part}.gamma"], params[f"u.{part}.beta"] = w, gamma, beta
    g = Graph()
    return g.value(bottleneck_node(g, g.const(x), "u", params, specs))


def forward_branch_node(g: Graph, image: int, cfg: ModelConfig, params: dict, role: str,
                        fusion_inputs: dict | None = None, reports: list | None = None) -> dict[str, int]:
    """Build one branch in ``g``; returns tap name -> node id.

    On the search branch each enabled correlation-fusion tap needs the matching
    template tap in ``fusion_inputs`` (a node id or an array).
    """
    if role not in ("template", "search"):
        raise ValueError(f"role must be 'template' or 'search', got {role!r}")
    expected = cfg.template_size if role == "template" else cfg.search_size
    shape = g.value(image).shape
    if shape != (cfg.in_channels, expected, expected):
        raise T.ShapeError(f"{role} image must be {cfg.in_channels}x{expected}x{expected}, got {shape}")
    fusion_inputs = fusion_inputs or {}

    def fuse(x, tap, enabled):
        if not (enabled and role == "search"):
            return x
        if tap not in fusion_inputs:
            raise ValueError(f"correlation fusion at {tap} needs the template feature for that tap")
        t = fusion_inputs[tap]
        if not isinstance(t, (int, np.integer)):
            t = g.const(t)
        return correlation_fusion_node(g, x, t, scaled=cfg.cf_response_scaling, tap=tap, reports=reports)

    taps = {}
    x = image
    for name, kind, spec in layer_plan(cfg):
        if kind == "conv":
            x = conv_affine(g, x, name, params, spec, relu=name != "conv6")
        else:
            x = bottleneck_node(g, x, name, params, spec)
        if name == "conv3":
            taps["after_conv3"] = x
            x = fuse(x, "after_conv3", cfg.cf_first)
        elif name == f"block2.{cfg.block2.units - 1}":
            taps["after_block2"] = x
            x = fuse(x, "after_block2", cfg.cf_second)
    taps["final"] = x
    return taps


def forward_branch(image, cfg: ModelConfig, params: dict, role: str,
                   fusion_inputs: dict | None = None) -> StagewiseFeatures:
    """Array-level wrapper around :func:`forward_branch_node`."""
    g = Graph()
    img = g.const(T.as_tensor(image, dtype=next(iter(params.values())).dtype))
    taps = forward_branch_node(g, img, cfg, params, role, fusion_inputs)
    return StagewiseFeatures({k: g.value(v) for k, v in taps.items()})


def freeze_mask(cfg: ModelConfig, stage: str, names) -> set[str]:
    """Trainable parameter names for a stage.

    ``pretrain`` trains everything; ``finetune`` only conv5, conv6 and the
    classification-regression head.
    """
    names = list(names)
    if stage == "pretrain":
        return set(names)
    if stage == "finetune":
        keep = ("conv5.", "conv6.", "head.cls.", "head.reg.")
        return {n for n in names if n.startswith(keep)}
    raise ValueError(f"unknown stage {stage!r}")
