"""Offline-template tracking loop: init on the first frame, update per frame."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .backbone import forward_branch, forward_branch_node, head_geometry, HeadGeometry
from .config import ModelConfig, TrackerConfig
from .data import Sequence, context_side, crop, format_box, write_ppm
from .heads import BBox, argmax_location, clsreg_node, decode_box
from .model import INPUT_SHIFT


class TrackingError(RuntimeError):
    """Raised when the score map is not finite."""


@dataclass(frozen=True)
class TrackerModel:
    cfg: ModelConfig
    params: dict

    @property
    def dtype(self):
        return self.params["conv1.weight"].dtype

    @property
    def geometry(self) -> HeadGeometry:
        return head_geometry(self.cfg)


@dataclass(frozen=True)
class TrackerState:
    box: BBox
    template: dict  # tap name -> read-only array
    settings: TrackerConfig
    frame_index: int = 0
    nodes_last_update: int = 0


def _check_box(box: BBox, frame_shape):
    h, w = frame_shape[:2]
    if box.area <= 0:
        raise ValueError(f"box {box} has no area")
    if box.x1 <= 0 or box.y1 <= 0 or box.x0 >= w or box.y0 >= h:
        raise ValueError(f"box {box} lies outside the {w}x{h} frame")


def _network_input(patch, dtype):
    return np.asarray(patch, dtype=dtype) - dtype.type(INPUT_SHIFT)


def init(frame: np.ndarray, gt: BBox, model: TrackerModel, settings: TrackerConfig | None = None) -> TrackerState:
    """Crop the template around ``gt`` and cache every template tap."""
    _check_box(gt, frame.shape)
    cfg = model.cfg
    patch, _ = crop(frame, *gt.center, context_side(gt), cfg.template_size)
    feats = forward_branch(_network_input(patch, model.dtype), cfg, model.params, "template")
    taps = {}
    for name, arr in feats.taps.items():
        arr = np.array(arr)
        arr.setflags(write=False)
        taps[name] = arr
    return TrackerState(gt, taps, settings or TrackerConfig())


def cosine_window(extent) -> np.ndarray:
    h, w = extent
    return np.outer(np.hanning(h), np.hanning(w))


def score_map(cls_logits: np.ndarray, window_influence: float) -> np.ndarray:
    """Positive-class softmax, optionally blended with a cosine window."""
    score = 1.0 / (1.0 + np.exp(cls_logits[0] - cls_logits[1]))
    if window_influence == 0:
        return score
    return score * ((1.0 - window_influence) + window_influence * cosine_window(score.shape))


def _clamp(cx, cy, w, h, frame_shape, min_size) -> BBox:
    fh, fw = frame_shape[:2]
    cx = min(max(cx, 0.0), float(fw))
    cy = min(max(cy, 0.0), float(fh))
    w = min(max(w, min_size), float(fw))
    h = min(max(h, min_size), float(fh))
    box = BBox.from_center(cx, cy, w, h)
    return BBox(max(box.x0, 0.0), max(box.y0, 0.0), min(box.x1, float(fw)), min(box.y1, float(fh)))


def update(state: TrackerState, frame: np.ndarray, model: TrackerModel, overlay: list | None = None):
    """Track one frame. Returns ``(new_state, box)``.

    ``overlay``, when given, receives the search patch and the decoded box in
    patch coordinates for debug rendering.
    """
    cfg, st = model.cfg, state.settings
    side = context_side(state.box) * cfg.search_size / cfg.template_size
    patch, transform = crop(frame, *state.box.center, side, cfg.search_size)

    g = Graph()
    x = g.const(_network_input(patch, model.dtype))
    s_taps = forward_branch_node(g, x, cfg, model.params, "search", fusion_inputs=state.template)
    cls, reg = clsreg_node(g, s_taps["final"], g.const(state.template["final"]), cfg, model.params)
    logits, dist = g.value(cls), g.value(reg)
    if not (np.isfinite(logits).all() and np.isfinite(dist).all()):
        raise TrackingError(f"non-finite head output at frame {state.frame_index + 1} "
                            f"(cls finite {np.isfinite(logits).mean():.3f}, reg finite {np.isfinite(dist).mean():.3f})")

    score = score_map(logits.astype(np.float64), st.window_influence)
    loc = argmax_location(score)
    geom = model.geometry
    local = decode_box(loc, dist[:, loc[1], loc[0]].astype(np.float64), geom.stride, geom.offset)
    if overlay is not None:
        overlay.extend([patch, local])
    found = transform.box_to_frame(local)

    (cx, cy), (w, h) = found.center, found.size
    ow, oh = state.box.size
    gamma = st.size_smoothing
    box = _clamp(cx, cy, (1 - gamma) * ow + gamma * w, (1 - gamma) * oh + gamma * h, frame.shape, st.min_size)
    new = replace(state, box=box, frame_index=state.frame_index + 1, nodes_last_update=len(g.nodes))
    return new, box


def draw_box(image: np.ndarray, box: BBox, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Copy of an H x W x 3 image with a one-pixel box outline."""
    out = np.array(image, dtype=np.float64)
    h, w = out.shape[:2]
    x0, x1 = (int(np.clip(math.floor(v), 0, w - 1)) for v in (box.x0, box.x1))
    y0, y1 = (int(np.clip(math.floor(v), 0, h - 1)) for v in (box.y0, box.y1))
    out[y0, x0:x1 + 1] = color
    out[y1, x0:x1 + 1] = color
    out[y0:y1 + 1, x0] = color
    out[y0:y1 + 1, x1] = color
    return out


def track_sequence(model: TrackerModel, seq: Sequence, settings: TrackerConfig | None = None,
                   overlay_dir=None) -> list[BBox]:
    """Run a whole sequence from its first ground-truth box."""
    first = seq.frame(0)
    state = init(first, seq.boxes[0], model, settings)
    boxes = [seq.boxes[0]]
    if overlay_dir is not None:
        overlay_dir = Path(overlay_dir)
        overlay_dir.mkdir(parents=True, exist_ok=True)
        write_ppm(overlay_dir / "0001.ppm", draw_box(first, boxes[0]))
    for i in range(1, len(seq)):
        frame = seq.frame(i)
        state, box = update(state, frame, model)
        boxes.append(box)
        if overlay_dir is not None:
            write_ppm(overlay_dir / f"{i + 1:04d}.ppm", draw_box(frame, box))
    return boxes


def write_results(boxes, path) -> Path:
    path = Path(path)
    path.write_text("".join(format_box(b) + "\n" for b in boxes))
    return path
