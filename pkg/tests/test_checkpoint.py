import struct

import numpy as np
import pytest

from mtalab.checkpoint import END, MAGIC, load_checkpoint, save_checkpoint
from mtalab.errors import CheckpointError
from mtalab.model import ModelConfig, build_model
from mtalab.optim import TrainState


def small_model(arch="mta", seed=0):
    return build_model(ModelConfig.toy(arch, n_layers=2, model_dim=16, max_seq_len=32, seed=seed))


def test_round_trip_bit_exact(tmp_path):
    model = small_model()
    rng = np.random.default_rng(0)
    state = TrainState(step=7, data_seed=3, metrics={"last_eval_error": 12.5})
    for name, p in model.named_parameters():
        state.m[name] = rng.normal(size=p.shape).astype(p.dtype)
        state.v[name] = rng.random(size=p.shape).astype(p.dtype)
    path = save_checkpoint(model, state, tmp_path / "a.ckpt")
    loaded, st = load_checkpoint(path)
    assert loaded.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2
        assert p1.data.dtype == p2.data.dtype
        np.testing.assert_array_equal(p1.data, p2.data)
        np.testing.assert_array_equal(state.m[n1], st.m[n1])
        np.testing.assert_array_equal(state.v[n1], st.v[n1])
    assert (st.step, st.data_seed, st.metrics) == (7, 3, {"last_eval_error": 12.5})


def test_layout_header(tmp_path):
    raw = save_checkpoint(small_model(), None, tmp_path / "a.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    version, itemsize = struct.unpack("<II", raw[8:16])
    assert (version, itemsize) == (1, 4)
    assert raw[-4:] == END


def test_float64_checkpoint(tmp_path, f64):
    model = small_model()
    loaded, _ = load_checkpoint(save_checkpoint(model, None, tmp_path / "a.ckpt"))
    assert loaded.params["tok_emb"].data.dtype == np.float64


def test_unknown_version(tmp_path):
    path = save_checkpoint(small_model(), None, tmp_path / "a.ckpt")
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [5, 20, 400, -2])
def test_truncation(tmp_path, cut):
    path = save_checkpoint(small_model(), None, tmp_path / "a.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_shape_mismatch_names_record(tmp_path):
    model = small_model()
    path = save_checkpoint(model, None, tmp_path / "a.ckpt")
    # swap in the metadata of a wider model so every stored record mismatches
    other = build_model(ModelConfig.toy("mta", n_layers=2, model_dim=32, max_seq_len=32))
    other_path = save_checkpoint(other, None, tmp_path / "b.ckpt")
    a, b = path.read_bytes(), other_path.read_bytes()
    meta_a = struct.unpack("<I", a[16:20])[0]
    meta_b = struct.unpack("<I", b[16:20])[0]
    spliced = b[:20 + meta_b] + a[20 + meta_a:]
    path.write_bytes(spliced)
    with pytest.raises(CheckpointError, match="'tok_emb'"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello world, definitely not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_loaded_model_predicts_identically(tmp_path):
    model = small_model()
    loaded, _ = load_checkpoint(save_checkpoint(model, None, tmp_path / "a.ckpt"))
    tokens = np.arange(12) % 30
    np.testing.assert_array_equal(model.forward(tokens).data, loaded.forward(tokens).data)
