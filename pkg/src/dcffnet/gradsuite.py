"""Finite-difference checks for every differentiable op, loss and composite.

Inputs are drawn in float64. Ops with kinks (relu, the IoU min terms) are
re-drawn until the registered margin shows every input is at least
``KINK_CLEARANCE`` away from a non-smooth point, so the central difference
never straddles one.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .autodiff import OPS, GradCheckReport, grad_check
from .backbone import bottleneck_node, _unit_specs
from .config import BlockSpec, TOY
from .fusion import correlation_fusion_node
from .heads import clsreg_node, fc_node, head_param_shapes

KINK_CLEARANCE = 1e-3
TOLERANCE = 1e-4


def _away_from_kinks(op, draw, rng, tries=200):
    margin = OPS[op].margin
    for _ in range(tries):
        args = draw(rng)
        if margin is None or margin(*args) > KINK_CLEARANCE:
            return args
    raise RuntimeError(f"could not draw inputs clear of the kinks of {op}")


def _check(name, build, inputs):
    return grad_check(build, inputs, tolerance=TOLERANCE, name=name)


def check_conv2d(rng):
    spec = T.ConvSpec(3, 1, stride=2, padding=1, in_channels=2, out_channels=3)
    return _check("conv2d", lambda g, p: g.conv2d(p["x"], p["w"], p["b"], spec),
                  {"x": rng.standard_normal((2, 5, 6)), "w": rng.standard_normal(spec.weight_shape),
                   "b": rng.standard_normal(3)})


def check_depthwise_xcorr(rng):
    return _check("depthwise_xcorr", lambda g, p: g.depthwise_xcorr(p["s"], p["t"]),
                  {"s": rng.standard_normal((2, 6, 5)), "t": rng.standard_normal((2, 3, 2))})


def check_resize(rng):
    return _check("resize_trilinear", lambda g, p: g.resize(p["x"], (3, 7, 5)),
                  {"x": rng.standard_normal((2, 4, 3))})


def check_add(rng):
    return _check("add", lambda g, p: g.add(p["a"], p["b"]),
                  {"a": rng.standard_normal((2, 3, 3)), "b": rng.standard_normal((2, 3, 3))})


def check_relu(rng):
    (x,) = _away_from_kinks("relu", lambda r: (r.standard_normal((2, 4, 4)),), rng)
    return _check("relu", lambda g, p: g.relu(p["x"]), {"x": x})


def check_scale_shift(rng):
    return _check("scale_shift", lambda g, p: g.scale_shift(p["x"], p["gamma"], p["beta"]),
                  {"x": rng.standard_normal((3, 2, 4)), "gamma": rng.standard_normal(3),
                   "beta": rng.standard_normal(3)})


def check_scale(rng):
    return _check("scale", lambda g, p: g.scale(p["x"], -0.37), {"x": rng.standard_normal((2, 3))})


def check_exp(rng):
    return _check("exp", lambda g, p: g.exp(p["x"]), {"x": rng.standard_normal((4, 3))})


def check_channel_sum(rng):
    return _check("channel_sum", lambda g, p: g.channel_sum(p["x"]), {"x": rng.standard_normal((4, 3, 2))})


def check_add_scalar(rng):
    return _check("add_scalar", lambda g, p: g.add_scalar(p["x"], p["b"]),
                  {"x": rng.standard_normal((1, 3, 3)), "b": rng.standard_normal(1)})


def check_sum(rng):
    return _check("sum", lambda g, p: g.sum(p["x"]), {"x": rng.standard_normal((2, 3, 2))})


def check_mean_of(rng):
    return _check("mean_of", lambda g, p: g.mean_of([p["a"], p["b"], p["c"]]),
                  {k: rng.standard_normal((2, 2)) for k in "abc"})


def check_mul_const(rng):
    c = rng.standard_normal((3, 2))
    return _check("mul_const", lambda g, p: g.apply("mul_const", p["x"], c=c), {"x": rng.standard_normal((3, 2))})


def check_logistic_loss(rng):
    labels = np.where(rng.random((1, 5, 5)) < 0.3, 1.0, -1.0)
    return _check("logistic_loss", lambda g, p: g.apply("logistic_loss", p["v"], labels=labels),
                  {"v": 2.0 * rng.standard_normal((1, 5, 5))})


def check_softmax_ce(rng):
    labels = (rng.random((4, 4)) < 0.3).astype(np.uint8)
    labels[0, 0], labels[1, 1] = 1, 0
    return _check("softmax_ce", lambda g, p: g.apply("softmax_ce", p["z"], labels=labels, balanced=True),
                  {"z": rng.standard_normal((2, 4, 4))})


def check_iou_loss(rng):
    mask = rng.random((3, 3)) < 0.6
    mask[1, 1] = True

    def draw(r):
        target = r.uniform(1.0, 5.0, (4, 3, 3))
        pred = target * r.uniform(0.5, 1.5, target.shape)
        return pred, target, mask

    pred, target, _ = _away_from_kinks("iou_loss", draw, rng)
    return _check("iou_loss", lambda g, p: g.apply("iou_loss", p["pred"], target=target, mask=mask),
                  {"pred": pred})


def check_correlation_fusion(rng):
    return _check("correlation_fusion",
                  lambda g, p: correlation_fusion_node(g, p["s"], p["t"], scaled=True),
                  {"s": rng.standard_normal((2, 7, 7)), "t": rng.standard_normal((2, 3, 3))})


def check_bottleneck(rng):
    specs = _unit_specs(BlockSpec(1, 2, 3, 2), 2, True)
    inputs = {"x": rng.standard_normal((2, 5, 5))}
    for role, spec in specs.items():
        inputs[f"u.{role}.weight"] = rng.standard_normal(spec.weight_shape) * 0.5
        inputs[f"u.{role}.gamma"] = rng.uniform(0.5, 1.5, spec.out_channels)
        inputs[f"u.{role}.beta"] = rng.standard_normal(spec.out_channels) * 0.1

    def build(g, p):
        return bottleneck_node(g, p["x"], "u", {k: g.value(v) for k, v in p.items()}, specs)

    return _check("bottleneck", build, inputs)


def check_clsreg_head(rng):
    cfg = TOY
    c = cfg.conv6.out_channels
    inputs = {"s": rng.standard_normal((c, 6, 6)) * 0.5, "t": rng.standard_normal((c, 3, 3)) * 0.5}
    for name, shape in head_param_shapes(cfg).items():
        if name.startswith("head.fc"):
            continue
        inputs[name] = rng.standard_normal(shape) * 0.2

    def build(g, p):
        params = {k: g.value(v) for k, v in p.items()}
        cls, reg = clsreg_node(g, p["s"], p["t"], cfg, params)
        return g.add(g.sum(cls), g.sum(g.scale(reg, 0.1)))

    return _check("clsreg_head", build, inputs)


def check_fc_head(rng):
    cfg = TOY
    c = cfg.conv6.out_channels
    inputs = {"s": rng.standard_normal((c, 6, 6)), "t": rng.standard_normal((c, 3, 3)),
              "head.fc.bias": rng.standard_normal(1)}

    def build(g, p):
        return fc_node(g, p["s"], p["t"], cfg, {"head.fc.bias": g.value(p["head.fc.bias"])})

    return _check("similarity_head", build, inputs)


CHECKS = {
    "conv2d": check_conv2d,
    "depthwise_xcorr": check_depthwise_xcorr,
    "resize_trilinear": check_resize,
    "add": check_add,
    "relu": check_relu,
    "scale_shift": check_scale_shift,
    "scale": check_scale,
    "exp": check_exp,
    "channel_sum": check_channel_sum,
    "add_scalar": check_add_scalar,
    "sum": check_sum,
    "mean_of": check_mean_of,
    "mul_const": check_mul_const,
    "logistic_loss": check_logistic_loss,
    "softmax_ce": check_softmax_ce,
    "iou_loss": check_iou_loss,
    "correlation_fusion": check_correlation_fusion,
    "bottleneck": check_bottleneck,
    "clsreg_head": check_clsreg_head,
    "similarity_head": check_fc_head,
}


def run(names=None, seed: int = 0) -> list[GradCheckReport]:
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient check(s): {', '.join(unknown)}")
    order = list(CHECKS)
    # each check draws from its own stream, so a subset sees the same inputs as the full run
    return [CHECKS[n](np.random.default_rng([seed, order.index(n)])) for n in names]


def covered_ops() -> set[str]:
    """Registered op names that have a dedicated check."""
    return set(OPS) & set(CHECKS)
