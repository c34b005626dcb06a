import struct

import numpy as np
import pytest

from dcffnet import checkpoint as ckpt_io
from dcffnet.autodiff import OptimState
from dcffnet.checkpoint import (Checkpoint, CheckpointError, CheckpointMagicError, CheckpointShapeError,
                                CheckpointTruncatedError, CheckpointVersionError)
from dcffnet.config import TOY
from dcffnet.model import init_params, param_shapes


def make_ck(dtype=np.float32):
    rng = np.random.default_rng(9)
    params = init_params(TOY, rng, dtype)
    rng.random(3)  # advance so the stored state is not the seed state
    vel = {k: rng.standard_normal(v.shape).astype(dtype) for k, v in list(params.items())[:5]}
    return Checkpoint(params, OptimState(0.01, 0.9, 0.0005, vel), rng.bit_generator.state, 2, 37,
                      [1.5, 0.25, float("inf")], "[model]\npreset = toy\n")


def assert_same(a: Checkpoint, b: Checkpoint):
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].dtype == b.params[k].dtype
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert a.optim.velocity.keys() == b.optim.velocity.keys()
    for k in a.optim.velocity:
        assert a.optim.velocity[k].tobytes() == b.optim.velocity[k].tobytes()
    assert (a.optim.lr, a.optim.momentum, a.optim.weight_decay) == (b.optim.lr, b.optim.momentum, b.optim.weight_decay)
    assert a.rng_state == b.rng_state
    assert (a.stages_done, a.step, a.config_text) == (b.stages_done, b.step, b.config_text)
    assert a.loss_history == b.loss_history


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_roundtrip_bitwise(tmp_path, dtype):
    ck = make_ck(dtype)
    path = tmp_path / "a.ckpt"
    ckpt_io.save(ck, path)
    back = ckpt_io.load(path, param_shapes(TOY))
    assert_same(ck, back)
    assert ckpt_io.to_bytes(back) == path.read_bytes()


def test_rng_state_restores_the_stream(tmp_path):
    ck = make_ck()
    back = ckpt_io.from_bytes(ckpt_io.to_bytes(ck))
    r1, r2 = np.random.default_rng(), np.random.default_rng()
    r1.bit_generator.state, r2.bit_generator.state = ck.rng_state, back.rng_state
    assert np.array_equal(r1.random(10), r2.random(10))


def test_header_layout():
    data = ckpt_io.to_bytes(make_ck())
    assert data[:4] == b"DCFF"
    assert struct.unpack("<I", data[4:8]) == (1,)
    n_params = struct.unpack("<I", data[8:12])[0]
    assert n_params == len(param_shapes(TOY))


def test_corrupt_magic_and_version():
    data = bytearray(ckpt_io.to_bytes(make_ck()))
    bad = bytearray(data)
    bad[1] ^= 0xFF
    with pytest.raises(CheckpointMagicError, match="magic"):
        ckpt_io.from_bytes(bytes(bad))
    bad = bytearray(data)
    bad[4] = 7
    with pytest.raises(CheckpointVersionError, match="version"):
        ckpt_io.from_bytes(bytes(bad))


@pytest.mark.parametrize("cut", [2, 6, 11, 40, 1000, -1])
def test_truncation(cut):
    data = ckpt_io.to_bytes(make_ck())
    with pytest.raises(CheckpointTruncatedError):
        ckpt_io.from_bytes(data[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(CheckpointError, match="trailing"):
        ckpt_io.from_bytes(ckpt_io.to_bytes(make_ck()) + b"\0")


def test_shape_mismatch_names_the_parameter():
    ck = make_ck()
    ck.params["conv2.weight"] = np.zeros((8, 8, 5, 5), np.float32)
    data = ckpt_io.to_bytes(ck)
    with pytest.raises(CheckpointShapeError, match="conv2.weight"):
        ckpt_io.from_bytes(data, param_shapes(TOY))
    del ck.params["conv2.weight"]
    with pytest.raises(CheckpointShapeError, match="missing"):
        ckpt_io.from_bytes(ckpt_io.to_bytes(ck), param_shapes(TOY))


def test_error_kinds_are_distinct():
    kinds = {CheckpointMagicError, CheckpointVersionError, CheckpointTruncatedError, CheckpointShapeError}
    assert len(kinds) == 4
    assert all(issubclass(k, CheckpointError) for k in kinds)


def test_unsupported_dtype_rejected():
    ck = make_ck()
    ck.params["x"] = np.zeros(2, np.int32)
    with pytest.raises(CheckpointError):
        ckpt_io.to_bytes(ck)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "nope.ckpt")
