"""Prediction heads, target assignment and training losses.

Two heads share the backbone: a similarity head (channel-summed correlation
plus a scalar bias, trained with the logistic loss) and a
classification-regression head on the depthwise correlation of the final
features (softmax cross-entropy plus IoU loss). Maps are channel-first:
``cls`` is 2 x h x w (channel 1 = target), ``reg`` is 4 x h x w holding
``(l, t, r, b)`` distances in search-image pixels.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autodiff import Graph, register_op
from .backbone import HeadGeometry, conv_affine
from .config import ModelConfig

IOU_EPS = 1e-7


class TargetWarning(UserWarning):
    """The ground-truth box covers no response-map location."""


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 <= self.x1 and self.y0 <= self.y1):
            raise ValueError(f"corners out of order: {self}")

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @classmethod
    def from_xywh(cls, x, y, w, h):
        return cls(x, y, x + w, y + h)

    @property
    def center(self):
        return (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2

    @property
    def size(self):
        return self.x1 - self.x0, self.y1 - self.y0

    @property
    def area(self):
        w, h = self.size
        return w * h

    def as_center(self):
        return (*self.center, *self.size)

    def as_array(self):
        return np.array([self.x0, self.y0, self.x1, self.y1])


@dataclass(frozen=True)
class RegVector:
    l: float
    t: float
    r: float
    b: float


@dataclass
class HeadOutput:
    cls: np.ndarray
    reg: np.ndarray
    stride: float
    offset: float

    def __post_init__(self):
        if self.cls.shape[1:] != self.reg.shape[1:] or self.cls.shape[0] != 2 or self.reg.shape[0] != 4:
            raise T.ShapeError(f"cls {self.cls.shape} / reg {self.reg.shape} are not 2xhxw / 4xhxw")

    @property
    def extent(self):
        return self.cls.shape[1:]

    def location_to_image(self, x, y):
        return self.offset + self.stride * x, self.offset + self.stride * y


# ---------------------------------------------------------------- similarity head

def fc_response(search_final, template_final, b) -> np.ndarray:
    """Channel-summed valid cross-correlation plus scalar bias ``b``."""
    s, t = T.as_tensor(search_final), T.as_tensor(template_final)
    if s.shape[0] != t.shape[0]:
        raise T.ShapeError(f"channel mismatch: search {s.shape} vs template {t.shape}")
    g = Graph()
    node = g.add_scalar(g.channel_sum(g.depthwise_xcorr(g.const(s), g.const(t))),
                        g.const(np.array([b], dtype=s.dtype)))
    return g.value(node)


def fc_labels(map_extent, stride: float, radius_px: float, center=(0.0, 0.0)) -> np.ndarray:
    """+1 within ``radius_px`` (image pixels) of the search centre, else -1.

    ``center`` shifts the disk by ``(dx, dy)`` image pixels, for pairs whose
    target is not centred.
    """
    if radius_px < 0:
        raise ValueError("radius must be non-negative")
    h, w = map_extent
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = center
    dist = np.hypot(stride * (yy - (h - 1) / 2) - dy, stride * (xx - (w - 1) / 2) - dx)
    return np.where(dist <= radius_px, 1.0, -1.0)


def _logistic_fwd(v, labels):
    return np.array([np.logaddexp(0.0, -labels * v).mean()], dtype=v.dtype)


def _logistic_bwd(g, out, v, labels):
    z = -labels * v
    sig = np.exp(z - np.logaddexp(0.0, z))
    return ((-labels * sig * (g[0] / v.size)).astype(v.dtype),)


register_op("logistic_loss", _logistic_fwd, _logistic_bwd)


def _check_pm1(labels):
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 1) | (labels == -1)):
        raise ValueError("labels must be +1 or -1")
    return labels


def logistic_loss(response, labels) -> float:
    """Mean of ``log(1 + exp(-y * v))`` over map locations."""
    v = T.as_tensor(response)
    labels = _check_pm1(labels)
    if labels.shape != v.shape:
        raise T.ShapeError(f"labels {labels.shape} vs response {v.shape}")
    return float(_logistic_fwd(v, labels)[0])


# ---------------------------------------------------------------- classification

def _ce_weights(labels, balanced):
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if not balanced or n_pos == 0 or n_neg == 0:
        return np.full(labels.shape, 1.0 / labels.size)
    return np.where(pos, 0.5 / n_pos, 0.5 / n_neg)


def _ce_fwd(logits, labels, balanced):
    lse = np.logaddexp(logits[0], logits[1])
    picked = np.where(labels > 0, logits[1], logits[0])
    w = _ce_weights(labels, balanced)
    return np.array([(w * (lse - picked)).sum()], dtype=logits.dtype)


def _ce_bwd(g, out, logits, labels, balanced):
    lse = np.logaddexp(logits[0], logits[1])
    p1 = np.exp(logits[1] - lse)
    w = _ce_weights(labels, balanced) * g[0]
    d1 = w * (p1 - (labels > 0))
    return (np.stack([-d1, d1]).astype(logits.dtype),)


register_op("softmax_ce", _ce_fwd, _ce_bwd)


def cls_loss(logits, labels, balanced=True) -> float:
    """Two-class softmax cross-entropy; ``labels`` are 1 (target) / 0."""
    return float(_ce_fwd(T.as_tensor(logits), np.asarray(labels), balanced)[0])


# ---------------------------------------------------------------- regression

def _iou_terms(p, t):
    wi = np.minimum(p[0], t[0]) + np.minimum(p[2], t[2])
    hi = np.minimum(p[1], t[1]) + np.minimum(p[3], t[3])
    inter = wi * hi
    area_p = (p[0] + p[2]) * (p[1] + p[3])
    area_t = (t[0] + t[2]) * (t[1] + t[3])
    union = area_p + area_t - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where((wi > 0) & (hi > 0) & (union > 0), inter / union, 0.0)
    return wi, hi, inter, union, iou


def _iou_fwd(pred, target, mask):
    n_pos = int(mask.sum())
    if n_pos == 0:
        return np.zeros(1, dtype=pred.dtype)
    p, t = pred[:, mask], target[:, mask]
    iou = np.clip(_iou_terms(p, t)[4], IOU_EPS, 1.0)
    return np.array([-np.log(iou).sum() / n_pos], dtype=pred.dtype)


def _iou_bwd(g, out, pred, target, mask):
    grad = np.zeros_like(pred)
    n_pos = int(mask.sum())
    if n_pos == 0:
        return (grad,)
    p, t = pred[:, mask], target[:, mask]
    wi, hi, inter, union, iou = _iou_terms(p, t)
    live = (iou > IOU_EPS) & (iou < 1.0 + 1e-12)
    # d inter / d side: the min() picks the prediction when it is the smaller side
    sel = (p <= t).astype(p.dtype)
    d_inter = np.stack([sel[0] * hi, sel[1] * wi, sel[2] * hi, sel[3] * wi])
    d_area = np.stack([p[1] + p[3], p[0] + p[2], p[1] + p[3], p[0] + p[2]])
    d_union = d_area - d_inter
    with np.errstate(divide="ignore", invalid="ignore"):
        d = -(d_inter / inter - d_union / union)
    d = np.where(live, d, 0.0) * (g[0] / n_pos)
    grad[:, mask] = d
    return (grad,)


def _iou_margin(pred, target, mask):
    if not mask.any():
        return np.inf
    return float(np.min(np.abs(pred[:, mask] - target[:, mask])))


register_op("iou_loss", _iou_fwd, _iou_bwd, _iou_margin)


def iou_loss(pred, target, labels) -> tuple[float, bool]:
    """Mean ``-ln IoU`` over positive locations.

    Returns ``(loss, skipped)``; with no positives the loss is 0 and
    ``skipped`` is True.
    """
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    mask = np.asarray(labels) > 0
    if pred.shape != target.shape or pred.shape[1:] != mask.shape:
        raise T.ShapeError(f"pred {pred.shape}, target {target.shape}, labels {mask.shape}")
    return float(_iou_fwd(pred, target, mask)[0]), not mask.any()


@dataclass(frozen=True)
class TotalLoss:
    cls: float
    reg: float
    reg_skipped: bool

    @property
    def total(self):
        return self.cls + self.reg


def total_loss(cls_out, reg_out, labels, targets, balanced=True) -> TotalLoss:
    reg, skipped = iou_loss(reg_out, targets, labels)
    return TotalLoss(cls_loss(cls_out, labels, balanced), reg, skipped)


# ---------------------------------------------------------------- targets and decoding

def assign_targets(geom: HeadGeometry, gt: BBox):
    """Per-location labels (1/0) and ``(l, t, r, b)`` targets for ``gt``.

    A location is positive when its image point lies inside the box
    (boundary inclusive).
    """
    h, w = geom.extent
    xs = geom.offset + geom.stride * np.arange(w)
    ys = geom.offset + geom.stride * np.arange(h)
    X, Y = np.meshgrid(xs, ys)
    inside = (gt.x0 <= X) & (X <= gt.x1) & (gt.y0 <= Y) & (Y <= gt.y1)
    targets = np.zeros((4, h, w))
    targets[0] = X - gt.x0
    targets[1] = Y - gt.y0
    targets[2] = gt.x1 - X
    targets[3] = gt.y1 - Y
    targets[:, ~inside] = 0.0
    if not inside.any():
        warnings.warn(f"ground truth {gt} covers no response location", TargetWarning, stacklevel=2)
    return inside.astype(np.uint8), targets


def decode_box(location, reg, stride: float, offset: float) -> BBox:
    """Invert the distance encoding at map location ``(x, y)``."""
    x, y = location
    if isinstance(reg, RegVector):
        l, t, r, b = reg.l, reg.t, reg.r, reg.b
    else:
        l, t, r, b = (float(v) for v in reg)
    if min(l, t, r, b) < 0:
        raise ValueError("regression distances must be non-negative")
    xs, ys = offset + stride * x, offset + stride * y
    return BBox(xs - l, ys - t, xs + r, ys + b)


def argmax_location(score: np.ndarray):
    """Row-major first maximum as ``(x, y)``."""
    idx = int(np.argmax(score))
    y, x = divmod(idx, score.shape[1])
    return x, y


# ---------------------------------------------------------------- head parameters and graphs

def head_param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    c = cfg.conv6.out_channels
    hc = cfg.head_channels
    shapes = {"head.fc.bias": (1,)}
    for branch, n_out in (("cls", 2), ("reg", 4)):
        shapes[f"head.{branch}.tower.weight"] = (hc, c, 3, 3)
        shapes[f"head.{branch}.tower.gamma"] = (hc,)
        shapes[f"head.{branch}.tower.beta"] = (hc,)
        shapes[f"head.{branch}.out.weight"] = (n_out, hc, 3, 3)
        shapes[f"head.{branch}.out.bias"] = (n_out,)
    return shapes


def fc_scale(cfg: ModelConfig, template_shape) -> float:
    if cfg.fc_response_scale > 0:
        return cfg.fc_response_scale
    c, h, w = template_shape
    return 1.0 / (c * h * w)


def fc_node(g: Graph, search: int, template: int, cfg: ModelConfig, params: dict) -> int:
    t_shape = g.value(template).shape
    t_scaled = g.scale(template, fc_scale(cfg, t_shape))
    resp = g.channel_sum(g.depthwise_xcorr(search, t_scaled))
    return g.add_scalar(resp, g.param("head.fc.bias", params["head.fc.bias"]))


def clsreg_node(g: Graph, search: int, template: int, cfg: ModelConfig, params: dict):
    """Returns ``(cls logits node, reg distance node)``."""
    m = g.depthwise_xcorr(search, template)
    c = g.value(m).shape[0]
    outs = []
    for branch, n_out in (("cls", 2), ("reg", 4)):
        tower = T.ConvSpec(3, 3, 1, 1, c, cfg.head_channels)
        h = conv_affine(g, m, f"head.{branch}.tower", params, tower, relu=True)
        spec = T.ConvSpec(3, 3, 1, 1, cfg.head_channels, n_out)
        y = g.conv2d(h, g.param(f"head.{branch}.out.weight", params[f"head.{branch}.out.weight"]),
                     g.param(f"head.{branch}.out.bias", params[f"head.{branch}.out.bias"]), spec)
        outs.append(y)
    return outs[0], g.exp(outs[1])


def clsreg_forward(final_search, final_template, head_weights: dict, cfg: ModelConfig,
                   geom: HeadGeometry) -> HeadOutput:
    s, t = T.as_tensor(final_search), T.as_tensor(final_template)
    if s.shape[0] != t.shape[0]:
        raise T.ShapeError(f"channel mismatch: search {s.shape} vs template {t.shape}")
    g = Graph()
    cls, reg = clsreg_node(g, g.const(s), g.const(t), cfg, head_weights)
    return HeadOutput(g.value(cls), g.value(reg), geom.stride, geom.offset)
