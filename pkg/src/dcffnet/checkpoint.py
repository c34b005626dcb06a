"""Binary checkpoint format.

Layout (little-endian)::

    b"DCFF"  u32 version (=1)
    four sections in order: params, optimizer, rng, stage
    each section: u32 entry count, then per entry
        u16 name length, UTF-8 name, u8 dtype code, u8 rank, rank x u64 dims, raw data

dtype codes: 0 = f32, 1 = f64, 2 = u64, 3 = u8.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import OptimState

MAGIC = b"DCFF"
VERSION = 1
SECTIONS = ("params", "optimizer", "rng", "stage")
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<u8"): 2, np.dtype("u1"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optim: OptimState
    rng_state: dict
    stages_done: int = 0
    step: int = 0
    loss_history: list = field(default_factory=list)
    config_text: str = ""


def _rng_words(state: dict) -> np.ndarray:
    if state.get("bit_generator") != "PCG64":
        raise CheckpointError(f"unsupported bit generator {state.get('bit_generator')!r}")
    mask = (1 << 64) - 1
    s, inc = state["state"]["state"], state["state"]["inc"]
    return np.array([s >> 64, s & mask, inc >> 64, inc & mask,
                     state["has_uint32"], state["uinteger"]], dtype="<u8")


def _rng_state(words) -> dict:
    w = [int(v) for v in words]
    return {"bit_generator": "PCG64",
            "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
            "has_uint32": w[4], "uinteger": w[5]}


def _encode_entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    if dt not in _CODES:
        raise CheckpointError(f"entry {name!r}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def _sections(ck: Checkpoint) -> dict[str, dict[str, np.ndarray]]:
    opt = {"lr": np.array([ck.optim.lr]), "momentum": np.array([ck.optim.momentum]),
           "weight_decay": np.array([ck.optim.weight_decay])}
    for name in sorted(ck.optim.velocity):
        opt["velocity/" + name] = ck.optim.velocity[name]
    return {
        "params": ck.params,
        "optimizer": opt,
        "rng": {"pcg64": _rng_words(ck.rng_state)},
        "stage": {
            "cursor": np.array([ck.stages_done, ck.step], dtype="<u8"),
            "loss_history": np.asarray(ck.loss_history, dtype="<f8"),
            "config": np.frombuffer(ck.config_text.encode("utf-8"), dtype="u1"),
        },
    }


def to_bytes(ck: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for sec in _sections(ck).values():
        out.append(struct.pack("<I", len(sec)))
        out.extend(_encode_entry(name, arr) for name, arr in sec.items())
    return b"".join(out)


def save(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ck))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes, expected_shapes: dict | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointMagicError("bad magic: not a DCFF checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    sections = {}
    for sec in SECTIONS:
        (count,) = r.unpack("<I", f"{sec} entry count")
        entries = {}
        for _ in range(count):
            (nlen,) = r.unpack("<H", f"{sec} name length")
            try:
                name = r.take(nlen, f"{sec} name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"{sec}: entry name is not UTF-8") from None
            code, rank = r.unpack("<BB", f"{sec}/{name} dtype")
            if code not in _DTYPES:
                raise CheckpointError(f"{sec}/{name}: unknown dtype code {code}")
            dims = r.unpack(f"<{rank}Q", f"{sec}/{name} dims")
            dt = _DTYPES[code]
            n = int(np.prod(dims)) if rank else 1
            raw = r.take(n * dt.itemsize, f"{sec}/{name} data")
            if name in entries:
                raise CheckpointError(f"{sec}: duplicate entry {name!r}")
            entries[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
        sections[sec] = entries
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after stage section")

    params = sections["params"]
    if expected_shapes is not None:
        validate_shapes(params, expected_shapes)
    opt = sections["optimizer"]
    try:
        optim = OptimState(float(opt["lr"][0]), float(opt["momentum"][0]), float(opt["weight_decay"][0]),
                           {k[len("velocity/"):]: v for k, v in opt.items() if k.startswith("velocity/")})
        stage = sections["stage"]
        stages_done, step = (int(v) for v in stage["cursor"])
        return Checkpoint(params, optim, _rng_state(sections["rng"]["pcg64"]), stages_done, step,
                          [float(v) for v in stage["loss_history"]],
                          stage["config"].tobytes().decode("utf-8"))
    except KeyError as exc:
        raise CheckpointError(f"missing required entry {exc}") from None


def validate_shapes(params: dict, expected_shapes: dict) -> None:
    for name, shape in expected_shapes.items():
        if name not in params:
            raise CheckpointShapeError(f"parameter {name!r} missing from checkpoint")
        if params[name].shape != tuple(shape):
            raise CheckpointShapeError(
                f"parameter {name!r} has shape {params[name].shape}, config expects {tuple(shape)}")
    extra = set(params) - set(expected_shapes)
    if extra:
        raise CheckpointShapeError(f"unexpected parameters {sorted(extra)}")


def load(path, expected_shapes: dict | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return from_bytes(data, expected_shapes)
