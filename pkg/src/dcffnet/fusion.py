"""Correlation-fusion: depthwise correlation, resize back, elementwise add."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autodiff import Graph


@dataclass(frozen=True)
class FusionTapReport:
    tap: str
    response_shape: tuple
    resized_shape: tuple
    output_shape: tuple
    response_min: float
    response_max: float


def correlation_fusion_node(g: Graph, search: int, template: int, scaled: bool = True,
                            tap: str = "", reports: list | None = None) -> int:
    s_shape = g.value(search).shape
    resp = g.depthwise_xcorr(search, template)
    if scaled:
        t_shape = g.value(template).shape
        resp = g.scale(resp, 1.0 / (t_shape[1] * t_shape[2]))
    resized = g.resize(resp, s_shape)
    out = g.add(search, resized)
    if reports is not None:
        r = g.value(resp)
        reports.append(FusionTapReport(tap, r.shape, g.value(resized).shape, g.value(out).shape,
                                       float(r.min()), float(r.max())))
    return out


def correlation_fusion(search_feat, template_feat, scaled: bool = True) -> np.ndarray:
    """``search + resize(xcorr(search, template))`` with the search shape kept.

    With ``scaled`` the response is divided by the template window area
    before resizing. The op has no parameters.
    """
    s, t = T.as_tensor(search_feat), T.as_tensor(template_feat)
    g = Graph()
    return g.value(correlation_fusion_node(g, g.const(s), g.const(t), scaled))
