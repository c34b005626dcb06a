"""Sequences on disk, crops, pair sampling, augmentation and synthetic data.

Image coordinates are continuous with pixel ``i`` covering ``[i, i + 1)``.
Ground-truth files use the OTB convention: one ``x,y,w,h`` line per frame
with a 1-based top-left corner.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .heads import BBox


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- PPM

def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 image in [0, 1] (or uint8) as binary P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected H x W x 3 image, got {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file as float64 H x W x 3 in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace byte after maxval
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * 3
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float64) / maxval


# ---------------------------------------------------------------- sequences

@dataclass
class Sequence:
    name: str
    boxes: list
    frames: list | None = None
    paths: list | None = None

    def __len__(self):
        return len(self.boxes)

    def frame(self, i: int) -> np.ndarray:
        if self.frames is not None:
            return self.frames[i]
        return read_ppm(self.paths[i])


def parse_groundtruth(text: str) -> list[BBox]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = [p for p in re.split(r"[,\s]+", line) if p]
        if len(parts) != 4:
            raise DataError(f"groundtruth line {lineno}: expected x,y,w,h, got {line!r}")
        x, y, w, h = (float(p) for p in parts)
        boxes.append(BBox.from_xywh(x - 1, y - 1, w, h))
    return boxes


def format_box(box: BBox) -> str:
    x, y, (w, h) = float(box.x0) + 1, float(box.y0) + 1, box.size
    return f"{x!r},{y!r},{float(w)!r},{float(h)!r}"


def load_sequence(path) -> Sequence:
    path = Path(path)
    gt_file = path / "groundtruth_rect.txt"
    if not gt_file.exists():
        raise DataError(f"{path}: missing groundtruth_rect.txt")
    boxes = parse_groundtruth(gt_file.read_text())
    frames = sorted((path / "img").glob("*.ppm"))
    if len(frames) != len(boxes):
        raise DataError(f"{path}: {len(frames)} frames but {len(boxes)} boxes")
    return Sequence(path.name, boxes, paths=frames)


def load_dataset(root) -> list[Sequence]:
    """A sequence directory, or a directory of sequence directories."""
    root = Path(root)
    if (root / "groundtruth_rect.txt").exists():
        return [load_sequence(root)]
    seqs = [load_sequence(p) for p in sorted(root.iterdir()) if (p / "groundtruth_rect.txt").exists()]
    if not seqs:
        raise DataError(f"{root}: no sequences found")
    return seqs


def write_sequence(seq: Sequence, path) -> Path:
    path = Path(path)
    (path / "img").mkdir(parents=True, exist_ok=True)
    for i in range(len(seq)):
        write_ppm(path / "img" / f"{i + 1:04d}.ppm", seq.frame(i))
    (path / "groundtruth_rect.txt").write_text("".join(format_box(b) + "\n" for b in seq.boxes))
    return path


# ---------------------------------------------------------------- synthetic sequences

@dataclass(frozen=True)
class SynthSpec:
    frame_size: int = 160
    length: int = 60
    step: float = 8.0
    target_size: int = 24
    angle: float = 30.0
    texture_seed: int = 0
    seed: int = 0

    @classmethod
    def parse(cls, text: str) -> "SynthSpec":
        """``key=value`` pairs separated by commas, e.g. ``length=60,step=8``."""
        kw = {}
        types = {"frame_size": int, "length": int, "step": float, "target_size": int,
                 "angle": float, "texture_seed": int, "seed": int}
        for item in filter(None, (s.strip() for s in text.split(","))):
            key, _, val = item.partition("=")
            key = key.strip()
            if key not in types:
                raise DataError(f"unknown synth key {key!r}")
            kw[key] = types[key](val)
        return cls(**kw)


def make_texture(size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    cells = rng.random((4, 4, 3))
    tex = np.kron(cells, np.ones((size // 4 + 1, size // 4 + 1, 1)))[:size, :size]
    tex[:2], tex[-2:], tex[:, :2], tex[:, -2:] = 1.0, 1.0, 1.0, 1.0
    return tex


def _coverage(lo, hi, n):
    centers = np.arange(n)
    return np.clip(np.minimum(centers + 1, hi) - np.maximum(centers, lo), 0.0, 1.0)


def render_frame(background, texture, box: BBox) -> np.ndarray:
    h, w, _ = background.shape
    ax = _coverage(box.x0, box.x1, w)
    ay = _coverage(box.y0, box.y1, h)
    alpha = ay[:, None] * ax[None, :]
    th, tw, _ = texture.shape
    u = np.clip(np.floor(np.arange(w) + 0.5 - box.x0), 0, tw - 1).astype(int)
    v = np.clip(np.floor(np.arange(h) + 0.5 - box.y0), 0, th - 1).astype(int)
    tex = texture[v][:, u]
    return background * (1 - alpha[..., None]) + tex * alpha[..., None]


def make_synth_sequence(spec: SynthSpec, name: str = "synth") -> Sequence:
    """A textured square bouncing over a noisy background at ``step`` px/frame."""
    n, s = spec.frame_size, spec.target_size
    if spec.step > s:
        raise DataError("motion step must not exceed the target size")
    rng = np.random.default_rng(spec.seed)
    base = rng.random((n // 8 + 1, n // 8 + 1, 1))
    background = 0.35 + 0.3 * np.kron(base, np.ones((8, 8, 1)))[:n, :n]
    background = np.repeat(background, 3, axis=2)
    texture = make_texture(s, spec.texture_seed)
    a = math.radians(spec.angle)
    vx, vy = spec.step * math.cos(a), spec.step * math.sin(a)
    x, y = (n - s) / 2, (n - s) / 2
    boxes, frames = [], []
    for _ in range(spec.length):
        box = BBox(x, y, x + s, y + s)
        boxes.append(box)
        noise = rng.normal(0.0, 0.02, background.shape)
        frames.append(np.clip(render_frame(background, texture, box) + noise, 0.0, 1.0))
        if not 0 <= x + vx <= n - s:
            vx = -vx
        if not 0 <= y + vy <= n - s:
            vy = -vy
        x, y = x + vx, y + vy
    # quantise like a PPM round trip so in-memory and on-disk sequences agree
    frames = [np.rint(f * 255.0) / 255.0 for f in frames]
    return Sequence(name, boxes, frames=frames)


def synth_sequence(spec: SynthSpec, out_dir, name: str | None = None) -> Path:
    out_dir = Path(out_dir)
    seq = make_synth_sequence(spec, name or out_dir.name)
    try:
        return write_sequence(seq, out_dir)
    except OSError as exc:
        raise DataError(f"cannot write {out_dir}: {exc}") from None


# ---------------------------------------------------------------- crops

@dataclass(frozen=True)
class CropTransform:
    """Maps frame coordinates into a square crop of ``out_size`` pixels."""

    cx: float
    cy: float
    scale: float  # frame pixels per crop pixel
    out_size: int

    def to_crop(self, x, y):
        half = self.out_size / 2
        return (x - self.cx) / self.scale + half, (y - self.cy) / self.scale + half

    def to_frame(self, u, v):
        half = self.out_size / 2
        return (u - half) * self.scale + self.cx, (v - half) * self.scale + self.cy

    def box_to_crop(self, box: BBox) -> BBox:
        x0, y0 = self.to_crop(box.x0, box.y0)
        x1, y1 = self.to_crop(box.x1, box.y1)
        return BBox(x0, y0, x1, y1)

    def box_to_frame(self, box: BBox) -> BBox:
        x0, y0 = self.to_frame(box.x0, box.y0)
        x1, y1 = self.to_frame(box.x1, box.y1)
        return BBox(x0, y0, x1, y1)


def context_side(box: BBox) -> float:
    """Side of the context-padded template square, ``sqrt((w+p)(h+p))`` with ``p=(w+h)/2``."""
    w, h = box.size
    p = (w + h) / 2
    return math.sqrt((w + p) * (h + p))


def sample_image(image: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill) -> np.ndarray:
    """Bilinear lookup of an H x W x 3 image at continuous coordinates.

    Returns a 3 x len(ys) x len(xs) array; samples outside the image blend
    towards ``fill``.
    """
    h, w, _ = image.shape
    padded = np.empty((h + 2, w + 2, 3))
    padded[...] = fill
    padded[1:-1, 1:-1] = image
    # +1 for the pad border, -0.5 because pixel i is centred at i + 0.5
    fx = np.clip(xs + 0.5, 0.0, w + 1.0)
    fy = np.clip(ys + 0.5, 0.0, h + 1.0)
    x0 = np.minimum(np.floor(fx).astype(int), w)
    y0 = np.minimum(np.floor(fy).astype(int), h)
    wx = (fx - x0)[None, :, None]
    wy = (fy - y0)[:, None, None]
    top = padded[y0][:, x0] * (1 - wx) + padded[y0][:, x0 + 1] * wx
    bot = padded[y0 + 1][:, x0] * (1 - wx) + padded[y0 + 1][:, x0 + 1] * wx
    return np.transpose(top * (1 - wy) + bot * wy, (2, 0, 1))


def crop(frame: np.ndarray, cx: float, cy: float, side: float, out_size: int):
    """Square crop of ``side`` frame pixels centred at ``(cx, cy)``, resampled to ``out_size``."""
    t = CropTransform(cx, cy, side / out_size, out_size)
    coords = np.arange(out_size) + 0.5
    xs, ys = t.to_frame(coords, coords)
    fill = frame.reshape(-1, 3).mean(axis=0)
    return sample_image(frame, xs, ys, fill), t


# ---------------------------------------------------------------- training pairs

@dataclass
class TrainingSample:
    template: np.ndarray
    search: np.ndarray
    gt: BBox
    source: tuple


@dataclass
class SamplerStats:
    skipped: int = 0


def clip_box(box: BBox, size: float) -> BBox:
    return BBox(*(float(np.clip(v, 0.0, size)) for v in (box.x0, box.y0, box.x1, box.y1)))


def sample_pair(dataset, rng: np.random.Generator, template_size: int, search_size: int,
                max_gap: int = 100, jitter: float = 0.0, stats: SamplerStats | None = None,
                max_tries: int = 100, scale_jitter: float = 0.0) -> TrainingSample:
    """Draw a (template, search) pair from two frames at most ``max_gap`` apart.

    ``jitter`` is the largest target offset from the search centre, in
    search-image pixels. ``scale_jitter`` widens or narrows the search context
    by a log-uniform factor in [1/(1+j), 1+j], so the target size in the
    search crop varies and the regression branch has to measure it.
    """
    if not dataset:
        raise DataError("empty dataset")
    for _ in range(max_tries):
        si = int(rng.integers(len(dataset)))
        seq = dataset[si]
        n = len(seq)
        i = int(rng.integers(n))
        j = int(rng.integers(max(0, i - max_gap), min(n, i + max_gap + 1)))
        dx, dy = rng.uniform(-jitter, jitter, 2) if jitter > 0 else (0.0, 0.0)
        zbox, xbox = seq.boxes[i], seq.boxes[j]
        if zbox.area <= 0 or xbox.area <= 0:
            if stats is not None:
                stats.skipped += 1
            continue
        s_z = context_side(zbox)
        template, _ = crop(seq.frame(i), *zbox.center, s_z, template_size)
        s_x = context_side(xbox) * search_size / template_size
        if scale_jitter > 0:
            s_x *= float(np.exp(rng.uniform(-1, 1) * np.log1p(scale_jitter)))
        scale = s_x / search_size
        cx, cy = xbox.center
        search, t = crop(seq.frame(j), cx - dx * scale, cy - dy * scale, s_x, search_size)
        gt = clip_box(t.box_to_crop(xbox), search_size)
        return TrainingSample(template, search, gt, (seq.name, i, j))
    raise DataError(f"no valid pair after {max_tries} tries")


def _grayscale(img):
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.broadcast_to(lum, img.shape).copy()


def augment(sample: TrainingSample, rng: np.random.Generator, stage: str, p_gray=0.25, p_flip=0.5,
            max_translate=8.0, scale_range=(0.95, 1.05)) -> TrainingSample:
    """Grayscale, flip, translate and scale, applied only in the pretrain stage."""
    if stage != "pretrain":
        return sample
    gray = rng.random() < p_gray
    flip = rng.random() < p_flip
    tx, ty = rng.uniform(-max_translate, max_translate, 2) if max_translate > 0 else (0.0, 0.0)
    lo, hi = scale_range
    s = rng.uniform(lo, hi) if hi > lo else lo
    z, x, gt = sample.template, sample.search, sample.gt
    size = x.shape[1]
    if gray:
        z, x = _grayscale(z), _grayscale(x)
    if flip:
        z, x = z[:, :, ::-1].copy(), x[:, :, ::-1].copy()
        gt = BBox(size - gt.x1, gt.y0, size - gt.x0, gt.y1)
    if s != 1.0 or tx != 0.0 or ty != 0.0:
        c = size / 2
        x0, y0, x1, y1 = ((v - c) * s + c for v in (gt.x0, gt.y0, gt.x1, gt.y1))
        # keep the transformed box inside the image
        tx = float(np.clip(tx, -x0, size - x1)) if x1 - x0 <= size else 0.0
        ty = float(np.clip(ty, -y0, size - y1)) if y1 - y0 <= size else 0.0
        coords = np.arange(size) + 0.5
        src_x = (coords - c - tx) / s + c
        src_y = (coords - c - ty) / s + c
        img = np.transpose(x, (1, 2, 0))
        x = sample_image(img, src_x, src_y, img.reshape(-1, 3).mean(axis=0))
        gt = clip_box(BBox(x0 + tx, y0 + ty, x1 + tx, y1 + ty), size)
    return replace(sample, template=z, search=x, gt=gt)
