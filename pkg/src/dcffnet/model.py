"""Full siamese model: parameter table, initialisation, pair forward."""
from __future__ import annotations

import numpy as np

from .autodiff import Graph
from .backbone import forward_branch_node, param_shapes as backbone_shapes
from .config import ModelConfig
from .heads import clsreg_node, fc_node, head_param_shapes

HEAD_OUT_STD = 0.01
INPUT_SHIFT = 0.5


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = backbone_shapes(cfg)
    shapes.update(head_param_shapes(cfg))
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """He fan-in normal conv weights, unit gamma, zero beta and biases.

    The two head output convs draw from N(0, 0.01^2) instead so the initial
    logits start near zero. The regression bias starts at ``log(template/4)``:
    a target fills about half the template crop, so a quarter of the crop is
    the typical side distance and the exp output starts at the right scale.
    """
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".out.weight"):
            params[name] = (rng.standard_normal(shape) * HEAD_OUT_STD).astype(dtype)
        elif name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name == "head.reg.out.bias":
            params[name] = np.full(shape, np.log(cfg.template_size / 4.0), dtype=dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def forward_pair(g: Graph, cfg: ModelConfig, params: dict, template_img, search_img, head: str,
                 reports: list | None = None):
    """Build both branches and a head in ``g``.

    ``head="similarity"`` returns the response-map node; ``head="clsreg"``
    returns ``(cls, reg)`` nodes.
    """
    dtype = params["conv1.weight"].dtype
    # images arrive in [0, 1]; the network sees them shifted to zero mean
    z = g.const(np.asarray(template_img, dtype=dtype) - dtype.type(INPUT_SHIFT))
    x = g.const(np.asarray(search_img, dtype=dtype) - dtype.type(INPUT_SHIFT))
    t_taps = forward_branch_node(g, z, cfg, params, "template")
    s_taps = forward_branch_node(g, x, cfg, params, "search", fusion_inputs=t_taps, reports=reports)
    if head == "similarity":
        return fc_node(g, s_taps["final"], t_taps["final"], cfg, params)
    if head == "clsreg":
        return clsreg_node(g, s_taps["final"], t_taps["final"], cfg, params)
    raise ValueError(f"unknown head {head!r}")

