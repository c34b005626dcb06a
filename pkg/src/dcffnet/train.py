"""Staged training: plan parsing, batches, SGD loop, resumable state."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import Graph, OptimState, backward, sgd_step
from .backbone import freeze_mask, head_geometry
from .checkpoint import Checkpoint
from .config import Config, dump_config
from .data import SamplerStats, TrainingSample, augment, sample_pair
from .heads import assign_targets, fc_labels
from .model import forward_pair, init_params, param_shapes

HEADS = {"pretrain": "similarity", "finetune": "clsreg", "overfit": "clsreg"}


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, batch_ids):
        super().__init__(f"non-finite loss at step {step}; batch {batch_ids}")
        self.step = step
        self.batch_ids = batch_ids


@dataclass(frozen=True)
class Stage:
    kind: str  # pretrain | finetune | overfit
    epochs: int
    lr: float

    @property
    def head(self) -> str:
        return HEADS[self.kind]

    @property
    def augmented(self) -> bool:
        return self.kind == "pretrain"


def parse_plan(text: str, divisor: int = 1) -> list[Stage]:
    """``kind:epochs@lr`` items; epoch counts are divided by ``divisor`` (at least 1 remains)."""
    stages = []
    for item in text.split():
        m = re.fullmatch(r"(\w+):(\d+)@([0-9.eE+-]+)", item)
        if m is None or m.group(1) not in HEADS:
            raise ValueError(f"bad plan item {item!r}")
        epochs = int(m.group(2))
        if epochs <= 0:
            raise ValueError(f"plan item {item!r}: epochs must be positive")
        stages.append(Stage(m.group(1), max(1, math.ceil(epochs / divisor)), float(m.group(3))))
    if not stages:
        raise ValueError("empty plan")
    return stages


class SequenceSource:
    """Fresh pairs from sequences, augmented in the pretrain stage."""

    def __init__(self, dataset, cfg: Config):
        self.dataset = dataset
        self.cfg = cfg
        self.stats = SamplerStats()

    def batch(self, rng, stage: Stage, size: int) -> list[TrainingSample]:
        t, m = self.cfg.train, self.cfg.model
        out = []
        for _ in range(size):
            s = sample_pair(self.dataset, rng, m.template_size, m.search_size, t.max_frame_gap,
                            t.jitter, self.stats, scale_jitter=t.scale_jitter)
            s = augment(s, rng, "pretrain" if stage.augmented else "finetune", t.aug_grayscale, t.aug_flip,
                        t.aug_translate, (t.aug_scale_min, t.aug_scale_max))
            out.append(s)
        return out


class FixedSource:
    """The same samples every step, cycled in order."""

    def __init__(self, samples):
        self.samples = list(samples)
        self.cursor = 0

    def batch(self, rng, stage, size):
        out = []
        for _ in range(size):
            out.append(self.samples[self.cursor % len(self.samples)])
            self.cursor += 1
        return out


def new_checkpoint(cfg: Config) -> Checkpoint:
    rng = np.random.default_rng(cfg.train.seed)
    params = init_params(cfg.model, rng, np.dtype(cfg.train.dtype))
    optim = OptimState(0.0, cfg.train.momentum, cfg.train.weight_decay)
    return Checkpoint(params, optim, rng.bit_generator.state, config_text=dump_config(cfg))


def sample_loss(g: Graph, cfg: Config, params: dict, sample: TrainingSample, head: str) -> int:
    geom = head_geometry(cfg.model)
    if head == "similarity":
        v = forward_pair(g, cfg.model, params, sample.template, sample.search, "similarity")
        cx, cy = sample.gt.center
        c = cfg.model.search_size / 2
        labels = fc_labels(geom.extent, geom.stride, cfg.train.label_radius, center=(cx - c, cy - c))
        return g.apply("logistic_loss", v, labels=labels[None].astype(g.value(v).dtype))
    cls, reg = forward_pair(g, cfg.model, params, sample.template, sample.search, "clsreg")
    labels, targets = assign_targets(geom, sample.gt)
    dt = g.value(reg).dtype
    lc = g.apply("softmax_ce", cls, labels=labels, balanced=cfg.train.balanced_cls)
    lr = g.apply("iou_loss", reg, target=targets.astype(dt), mask=labels.astype(bool))
    return g.add(lc, lr)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Rescale each gradient in place so its own L2 norm is at most ``max_norm``.

    Per-tensor rather than global: a spike in one layer does not stall the
    others. Returns the global norm before clipping.
    """
    total = 0.0
    for name, g in grads.items():
        n = math.sqrt(float(np.sum(g.astype(np.float64) ** 2)))
        total += n * n
        if n > max_norm:
            grads[name] = (g * (max_norm / n)).astype(g.dtype)
    return math.sqrt(total)


def train_step(cfg: Config, params: dict, optim: OptimState, samples, stage: Stage, trainable, step: int):
    g = Graph()
    losses = [sample_loss(g, cfg, params, s, stage.head) for s in samples]
    loss = g.mean_of(losses)
    value = float(g.value(loss)[0])
    if not math.isfinite(value):
        raise TrainingDivergedError(step, [s.source for s in samples])
    grads = backward(g, loss)
    if cfg.train.grad_clip > 0:
        clip_gradients(grads, cfg.train.grad_clip)
    sgd_step(params, grads, optim, trainable)
    return value


def steps_per_epoch(cfg: Config) -> int:
    return max(1, cfg.train.pairs_per_epoch // cfg.train.batch_size)


def run_stage(stage: Stage, ck: Checkpoint, source, cfg: Config, steps: int | None = None,
              trainable=None, callback=None) -> Checkpoint:
    """Run one stage in place on ``ck`` and return it.

    ``steps`` defaults to ``epochs * steps_per_epoch``. ``trainable``
    defaults to the stage's freeze mask (``overfit`` trains everything).
    """
    rng = np.random.default_rng()
    rng.bit_generator.state = ck.rng_state
    if trainable is None:
        mask_stage = "finetune" if stage.kind == "finetune" else "pretrain"
        trainable = freeze_mask(cfg.model, mask_stage, ck.params)
    ck.optim.lr = stage.lr
    n = steps if steps is not None else stage.epochs * steps_per_epoch(cfg)
    for _ in range(n):
        batch = source.batch(rng, stage, cfg.train.batch_size)
        loss = train_step(cfg, ck.params, ck.optim, batch, stage, trainable, ck.step)
        ck.loss_history.append(loss)
        ck.step += 1
        if callback is not None:
            callback(ck.step, loss)
    ck.stages_done += 1
    ck.rng_state = rng.bit_generator.state
    return ck


def run_plan(cfg: Config, source, ck: Checkpoint | None = None, stop_after: int | None = None,
             steps_per_stage: int | None = None) -> Checkpoint:
    """Run the configured plan from ``ck`` (or a fresh start) up to ``stop_after`` stages."""
    plan = parse_plan(cfg.train.plan, cfg.train.epoch_divisor)
    ck = ck if ck is not None else new_checkpoint(cfg)
    end = len(plan) if stop_after is None else min(stop_after, len(plan))
    for stage in plan[ck.stages_done:end]:
        run_stage(stage, ck, source, cfg, steps=steps_per_stage)
    return ck


def load_checkpoint(path, cfg: Config | None = None) -> Checkpoint:
    from .config import parse_config

    ck = ckpt_io.load(path)
    cfg = cfg or parse_config(ck.config_text)
    ckpt_io.validate_shapes(ck.params, param_shapes(cfg.model))
    return ck
