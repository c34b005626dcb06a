"""Tape-based reverse-mode differentiation and the SGD optimizer.

A :class:`Graph` is an append-only list of nodes; each node records the op
name, its input node ids, static attributes and the computed value. Ops are
registered in :data:`OPS` with a forward and a backward rule, so higher-level
modules (the losses) can add their own.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T


@dataclass
class OpDef:
    forward: Callable
    backward: Callable | None
    # returns the distance of the evaluation point from a non-smooth point, or None
    margin: Callable | None = None


OPS: dict[str, OpDef] = {}


def register_op(name, forward, backward, margin=None):
    if name in OPS:
        raise ValueError(f"op {name!r} already registered")
    OPS[name] = OpDef(forward, backward, margin)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        # smallest distance to a kink seen in any op (relu at 0, min() ties, ...)
        self.kink_margin = np.inf

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name: str, value: np.ndarray) -> int:
        """Register a parameter leaf; repeated names return the same node (weight sharing)."""
        if name in self.params:
            nid = self.params[name]
            if self.nodes[nid].value is not value:
                raise ValueError(f"parameter {name!r} registered twice with different arrays")
            return nid
        nid = self._push(Node("param", (), value, name=name))
        self.params[name] = nid
        return nid

    def const(self, value) -> int:
        return self._push(Node("const", (), np.asarray(value)))

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def apply(self, op: str, *inputs: int, **attrs) -> int:
        try:
            opdef = OPS[op]
        except KeyError:
            raise KeyError(f"no op named {op!r}") from None
        args = [self.nodes[i].value for i in inputs]
        out = opdef.forward(*args, **attrs)
        if opdef.margin is not None:
            self.kink_margin = min(self.kink_margin, opdef.margin(*args, **attrs))
        return self._push(Node(op, tuple(inputs), out, attrs))

    # convenience wrappers for the core op set
    def conv2d(self, x, w, b, spec):
        return self.apply("conv2d", x, w, b, spec=spec)

    def depthwise_xcorr(self, s, t):
        return self.apply("depthwise_xcorr", s, t)

    def resize(self, x, shape):
        return self.apply("resize_trilinear", x, shape=tuple(shape))

    def add(self, a, b):
        return self.apply("add", a, b)

    def relu(self, x):
        return self.apply("relu", x)

    def scale_shift(self, x, gamma, beta):
        return self.apply("scale_shift", x, gamma, beta)

    def scale(self, x, alpha: float):
        return self.apply("scale", x, alpha=alpha)

    def exp(self, x):
        return self.apply("exp", x)

    def channel_sum(self, x):
        return self.apply("channel_sum", x)

    def add_scalar(self, x, b):
        return self.apply("add_scalar", x, b)

    def sum(self, x):
        return self.apply("sum", x)

    def mean_of(self, nids):
        """Mean of several scalar nodes."""
        return self.apply("mean_of", *nids)

    def count(self, op: str) -> int:
        return sum(1 for n in self.nodes if n.op == op)


# ---------------------------------------------------------------- core ops

def _conv_fwd(x, w, b, spec):
    return T.conv2d(x, w, b, spec)


def _conv_bwd(g, out, x, w, b, spec):
    return T.conv2d_grads(g, x, w, spec)


def _relu_fwd(x):
    return T.pointwise("relu", x)


def _relu_bwd(g, out, x):
    # subgradient at 0 is 0
    return (np.where(x > 0, g, np.zeros((), dtype=g.dtype)),)


def _relu_margin(x):
    return float(np.min(np.abs(x)))


def _scale_shift_fwd(x, gamma, beta):
    return T.pointwise("scale_shift", x, (gamma, beta))


def _scale_shift_bwd(g, out, x, gamma, beta):
    return g * gamma[:, None, None], (g * x).sum(axis=(1, 2)), g.sum(axis=(1, 2))


def _add_scalar_fwd(x, b):
    if b.shape != (1,):
        raise T.ShapeError(f"add_scalar expects a (1,) bias, got {b.shape}")
    return x + b[0]


def _channel_sum(x):
    # sequential over channels so the sum order is fixed
    acc = x[0].copy()
    for c in range(1, x.shape[0]):
        acc += x[c]
    return acc[None]


register_op("conv2d", _conv_fwd, _conv_bwd)
register_op("depthwise_xcorr", T.depthwise_xcorr,
            lambda g, out, s, t: T.depthwise_xcorr_grads(g, s, t))
register_op("resize_trilinear", lambda x, shape: T.resize_trilinear(x, shape),
            lambda g, out, x, shape: (T.resize_trilinear_grad(g, x.shape),))
register_op("add", lambda a, b: T.pointwise("add", a, b), lambda g, out, a, b: (g, g))
register_op("relu", _relu_fwd, _relu_bwd, _relu_margin)
register_op("scale_shift", _scale_shift_fwd, _scale_shift_bwd)
register_op("scale", lambda x, alpha: x * x.dtype.type(alpha),
            lambda g, out, x, alpha: (g * g.dtype.type(alpha),))
register_op("exp", np.exp, lambda g, out, x: (g * out,))
register_op("channel_sum", _channel_sum,
            lambda g, out, x: (np.broadcast_to(g, x.shape).copy(),))
register_op("add_scalar", _add_scalar_fwd, lambda g, out, x, b: (g, np.array([g.sum()], dtype=b.dtype)))
register_op("sum", lambda x: np.array([x.sum()], dtype=x.dtype),
            lambda g, out, x: (np.full_like(x, g[0]),))
register_op("mean_of", lambda *xs: sum(xs[1:], xs[0].copy()) / len(xs),
            lambda g, out, *xs: tuple(g / len(xs) for _ in xs))


# ---------------------------------------------------------------- backward

def backward(graph: Graph, loss_node: int, seed: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of a scalar node with respect to every parameter in ``graph``.

    Returns a dict keyed by parameter name. Non-parameter leaves get no entry.
    """
    loss = graph.nodes[loss_node].value
    if loss.size != 1:
        raise T.ShapeError(f"loss node must be scalar-shaped, got {loss.shape}")
    grads: dict[int, np.ndarray] = {loss_node: np.full(loss.shape, seed, dtype=loss.dtype)}
    for nid in range(loss_node, -1, -1):
        g = grads.get(nid)
        node = graph.nodes[nid]
        if g is None or not node.inputs:
            continue
        opdef = OPS[node.op]
        if opdef.backward is None:
            raise TypeError(f"op {node.op!r} has no differentiable rule")
        args = [graph.nodes[i].value for i in node.inputs]
        in_grads = opdef.backward(g, node.value, *args, **node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    out = {}
    for name, nid in graph.params.items():
        if nid in grads:
            out[name] = np.asarray(grads[nid], dtype=graph.nodes[nid].value.dtype)
    return out


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if min(self.lr, self.momentum, self.weight_decay) < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")


def sgd_step(params: dict, grads: dict, state: OptimState, trainable=None) -> None:
    """Heavy-ball SGD, in place: ``v = m*v + g + wd*p``; ``p -= lr*v``.

    Only names in ``grads`` (and in ``trainable``, when given) are touched, so
    frozen parameters stay bitwise constant.
    """
    for name, g in grads.items():
        if trainable is not None and name not in trainable:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient {g.shape} does not match parameter {name!r} {p.shape}")
        dt = p.dtype.type
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise T.ShapeError(f"velocity {v.shape} does not match parameter {name!r} {p.shape}")
        v = dt(state.momentum) * v + g + dt(state.weight_decay) * p
        state.velocity[name] = v
        p -= dt(state.lr) * v


# ---------------------------------------------------------------- gradient check

def relative_error(analytic, numeric, floor=1e-5):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: dict[str, float]
    worst_index: dict[str, tuple]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def grad_check(build: Callable[[Graph, dict[str, int]], int], inputs: dict[str, np.ndarray],
               tolerance: float = 1e-4, name: str = "op", rel_step: float = 1e-6) -> GradCheckReport:
    """Compare :func:`backward` with central differences.

    ``build(graph, ids)`` must construct the computation from the parameter
    node ids in ``ids`` and return a node; non-scalar outputs are reduced with
    a fixed random projection so every output element contributes.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    proj_rng = np.random.default_rng(12345)
    proj = {}

    def evaluate(values):
        g = Graph()
        ids = {k: g.param(k, v) for k, v in values.items()}
        out = build(g, ids)
        if g.value(out).size != 1:
            if "w" not in proj:
                proj["w"] = proj_rng.standard_normal(g.value(out).shape)
            out = g.sum(g.apply("mul_const", out, c=proj["w"]))
        return g, out

    g, out = evaluate(inputs)
    analytic = backward(g, out)
    errs, where = {}, {}
    for k, x in inputs.items():
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = _eval_scalar(evaluate, inputs)
            flat[i] = orig - h
            fm = _eval_scalar(evaluate, inputs)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        a = analytic.get(k, np.zeros_like(x))
        rel = relative_error(a, numeric)
        idx = np.unravel_index(int(np.argmax(rel)), rel.shape)
        errs[k] = float(rel[idx])
        where[k] = tuple(int(i) for i in idx)
    return GradCheckReport(name, errs, where, tolerance)


def _eval_scalar(evaluate, inputs):
    g, out = evaluate(inputs)
    return float(g.value(out)[0])


register_op("mul_const", lambda x, c: x * c, lambda g, out, x, c: (g * c,))
