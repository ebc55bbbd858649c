import struct
from dataclasses import replace

import numpy as np
import pytest

from pbbn.checkpoint import (ArchitectureMismatchError, BadMagicError, CheckpointError, TruncatedError,
                             UnsupportedVersionError, dumps, load_checkpoint, loads, save_checkpoint)
from pbbn.model import PbbnConfig, build
from pbbn.resample import InterpMethod, ResizePolicy
from pbbn.training import perturb_state

SMALL = dict(base_channels=4, input_h=16, input_w=16, frames=5, channels=1)
POLICY = ResizePolicy(16, 16, InterpMethod.LANCZOS4, InterpMethod.AREA)


def trained_like(cfg, seed=0, dtype=np.float32):
    # non-trivial biases and batch-norm statistics so every record carries data
    return perturb_state(build(cfg, seed=seed, dtype=dtype), seed=seed)


def test_save_load_save_identical(tmp_path):
    model = trained_like(PbbnConfig(2, 2, **SMALL))
    save_checkpoint(model, POLICY, tmp_path / "a.pbbn")
    loaded, policy = load_checkpoint(tmp_path / "a.pbbn")
    save_checkpoint(loaded, policy, tmp_path / "b.pbbn")
    assert (tmp_path / "a.pbbn").read_bytes() == (tmp_path / "b.pbbn").read_bytes()
    assert policy == POLICY


@pytest.mark.parametrize("p", [1, 2, 3])
@pytest.mark.parametrize("b", [1, 2, 3])
@pytest.mark.parametrize("dws", [False, True])
def test_round_trip_every_small_architecture(p, b, dws):
    cfg = PbbnConfig(p, b, dws=dws, base_channels=4, input_h=24, input_w=24, frames=5, channels=1)
    model = trained_like(cfg, seed=p * 10 + b)
    loaded, policy = loads(dumps(model))
    assert policy is None and loaded.config == cfg
    for (n1, a1), (n2, a2) in zip(model.state(), loaded.state()):
        assert n1 == n2 and a1.dtype == a2.dtype
        assert a1.tobytes() == a2.tobytes()


def test_float64_round_trip():
    model = trained_like(PbbnConfig(1, 2, **SMALL), dtype=np.float64)
    loaded, _ = loads(dumps(model, POLICY))
    assert loaded.dtype == np.float64
    assert dumps(loaded, POLICY) == dumps(model, POLICY)


def test_loaded_model_predicts_identically():
    cfg = PbbnConfig(2, 2, dws=True, **SMALL)
    model = trained_like(cfg)
    x = np.random.default_rng(0).random((2, *cfg.input_shape)).astype(np.float32)
    assert np.array_equal(loads(dumps(model))[0].forward(x), model.forward(x))


def test_header_layout():
    model = build(PbbnConfig(1, 1, **SMALL))
    data = dumps(model, POLICY)
    assert data[:4] == b"PBBN"
    assert struct.unpack("<H", data[4:6]) == (1,)
    (n,) = struct.unpack("<I", data[6:10])
    assert data[10:10 + n].decode() == model.config.to_text()
    assert struct.unpack("<BIIBB", data[10 + n:21 + n]) == (1, 16, 16, 4, 2)


def test_bad_magic():
    data = dumps(build(PbbnConfig(1, 1, **SMALL)))
    with pytest.raises(BadMagicError):
        loads(b"XXXX" + data[4:])


def test_unsupported_version():
    data = dumps(build(PbbnConfig(1, 1, **SMALL)))
    with pytest.raises(UnsupportedVersionError):
        loads(data[:4] + struct.pack("<H", 9) + data[6:])


@pytest.mark.parametrize("cut", [3, 8, 40, -1])
def test_truncated(cut):
    data = dumps(build(PbbnConfig(1, 1, **SMALL)), POLICY)
    with pytest.raises((TruncatedError, BadMagicError)):
        loads(data[:cut])


def test_truncation_is_reported_as_such():
    data = dumps(build(PbbnConfig(1, 1, **SMALL)))
    with pytest.raises(TruncatedError):
        loads(data[:-5])


def test_trailing_bytes():
    data = dumps(build(PbbnConfig(1, 1, **SMALL)))
    with pytest.raises(CheckpointError):
        loads(data + b"\x00")


def test_expected_architecture_mismatch(tmp_path):
    save_checkpoint(build(PbbnConfig(3, 2, **{**SMALL, "input_h": 24, "input_w": 24})), None,
                    tmp_path / "p3.pbbn")
    with pytest.raises(ArchitectureMismatchError):
        load_checkpoint(tmp_path / "p3.pbbn", expected=PbbnConfig(2, 2, **SMALL))


def test_records_disagreeing_with_config_text():
    small = PbbnConfig(1, 2, **SMALL)
    data = dumps(build(small))
    (n,) = struct.unpack("<I", data[6:10])
    wider = replace(small, base_channels=8).to_text().encode()
    forged = data[:6] + struct.pack("<I", len(wider)) + wider + data[10 + n:]
    with pytest.raises(ArchitectureMismatchError, match="input.conv.weight"):
        loads(forged)


def test_missing_records():
    small = PbbnConfig(1, 2, **SMALL)
    data = dumps(build(small))
    (n,) = struct.unpack("<I", data[6:10])
    deeper = replace(small, branches=3).to_text().encode()
    forged = data[:6] + struct.pack("<I", len(deeper)) + deeper + data[10 + n:]
    with pytest.raises(ArchitectureMismatchError):
        loads(forged)
