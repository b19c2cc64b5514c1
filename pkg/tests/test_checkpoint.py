import struct

import numpy as np
import pytest

from fractional_qat.checkpoint import (
    MAGIC,
    CheckpointError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from fractional_qat.layers import LayerSelection, Selection, ToyModel, select_trainable, set_bits
from fractional_qat.quant import calibrate_static

from conftest import SMALL


def test_layout(small_model):
    buf = to_bytes(small_model)
    assert buf[:4] == MAGIC
    version, n = struct.unpack_from("<II", buf, 4)
    assert version == 1
    n_params = sum(p.data.size for p in small_model.parameters())
    assert len(buf) == 12 + n + 4 * n_params


def test_round_trip_is_byte_exact(small_model, tmp_path, small_input):
    set_bits(small_model, 4.25)
    select_trainable(small_model, LayerSelection(Selection.FF))
    path = tmp_path / "m.fqat"
    save_checkpoint(small_model, str(path))
    loaded = load_checkpoint(str(path))
    assert to_bytes(loaded) == path.read_bytes()
    for (na, a), (nb, b) in zip(small_model.iter_params(), loaded.iter_params()):
        assert na == nb and a.data.tobytes() == b.data.tobytes()
    assert [l.weight_spec for l in loaded.linears()] == [l.weight_spec for l in small_model.linears()]
    assert [l.trainable for l in loaded.linears()] == [l.trainable for l in small_model.linears()]
    assert np.array_equal(loaded(small_input).data, small_model(small_input).data)


def test_static_specs_survive(small_model):
    rng = np.random.default_rng(0)
    for lin in small_model.linears():
        lin.calibrate(calibrate_static([rng.standard_normal(5) for _ in range(4)]))
    loaded = from_bytes(to_bytes(small_model))
    assert [l.act_spec for l in loaded.linears()] == [l.act_spec for l in small_model.linears()]


def test_full_precision_model():
    fp = ToyModel.build(SMALL, seed=5)
    assert to_bytes(from_bytes(to_bytes(fp))) == to_bytes(fp)


def test_bad_magic(small_model):
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"XXXX" + to_bytes(small_model)[4:])


def test_truncated(small_model):
    with pytest.raises(CheckpointError):
        from_bytes(to_bytes(small_model)[:-4])


def test_trailing_bytes(small_model):
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(to_bytes(small_model) + b"\0\0\0\0")


def test_rejects_non_float32_params(small_model):
    small_model.head.weight.data[0, 0] = 0.1  # not representable in float32
    with pytest.raises(CheckpointError):
        to_bytes(small_model)
