"""Checkpoint container: bit-exact round trips and corruption detection."""

import json

import numpy as np
import pytest

from byteblocks import checkpoint as ck
from byteblocks import model as mdl
from byteblocks import training as tr
from byteblocks.bytetext import EOS_ID, CorruptionExample
from byteblocks.frontier import FrontierConfig


def tiny_config():
    return mdl.ModelConfig(hidden_dim=16, enc_layers=1, dec_layers=1, heads=2,
                           dropout=0.0, max_blocks=16, max_target_len=16,
                           frontier=FrontierConfig(embed_dim=8, layers=1, heads=2, window=4))


def random_tensors(seed):
    rng = np.random.default_rng(seed)
    return {
        "alpha": rng.normal(size=(3, 4)).astype(np.float32),
        "beta": rng.normal(size=(7,)).astype(np.float32),
        "gamma.delta": rng.normal(size=(2, 2, 2)).astype(np.float32),
    }


def test_round_trip_is_bit_exact(tmp_path):
    path = tmp_path / "t.bbck"
    tensors = random_tensors(0)
    ck.write_checkpoint(path, tensors, {"note": "hello", "n": 3})
    loaded, meta = ck.read_checkpoint(path)
    assert meta == {"note": "hello", "n": 3}
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == np.float32
        assert loaded[k].tobytes() == tensors[k].tobytes()


def test_header_is_plain_json(tmp_path):
    path = tmp_path / "t.bbck"
    ck.write_checkpoint(path, random_tensors(1), {})
    blob = path.read_bytes()
    assert blob[:4] == ck.MAGIC
    header_len = int.from_bytes(blob[4:8], "little")
    header = json.loads(blob[8:8 + header_len])
    assert header["version"] == ck.VERSION
    names = [e["name"] for e in header["tensors"]]
    assert names == sorted(names)
    for entry in header["tensors"]:
        assert entry["dtype"] == "<f4"


def test_checksum_rejects_flipped_payload_byte(tmp_path):
    path = tmp_path / "t.bbck"
    ck.write_checkpoint(path, random_tensors(2), {})
    blob = bytearray(path.read_bytes())
    blob[-12] ^= 0xFF  # inside the payload, before the 8-byte trailer
    path.write_bytes(bytes(blob))
    with pytest.raises(ck.CheckpointError, match="checksum"):
        ck.read_checkpoint(path)


def test_bad_magic_and_truncation_rejected(tmp_path):
    path = tmp_path / "bad.bbck"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ck.CheckpointError, match="not a checkpoint"):
        ck.read_checkpoint(path)
    good = tmp_path / "good.bbck"
    ck.write_checkpoint(good, random_tensors(3), {})
    short = tmp_path / "short.bbck"
    short.write_bytes(good.read_bytes()[:10])
    with pytest.raises(ck.CheckpointError):
        ck.read_checkpoint(short)


def _handcrafted(path, entries, payload):
    header = json.dumps({"version": ck.VERSION, "meta": {}, "tensors": entries}).encode()
    blob = ck.MAGIC + len(header).to_bytes(4, "little") + header + payload
    path.write_bytes(blob + ck._digest(payload))


def test_out_of_bounds_offset_rejected(tmp_path):
    path = tmp_path / "oob.bbck"
    _handcrafted(path, [{"name": "x", "shape": [4], "dtype": "<f4", "offset": 8}],
                 b"\x00" * 16)
    with pytest.raises(ck.CheckpointError, match="out of bounds"):
        ck.read_checkpoint(path)


def test_overlapping_tensors_rejected(tmp_path):
    path = tmp_path / "ovl.bbck"
    _handcrafted(path, [{"name": "x", "shape": [2], "dtype": "<f4", "offset": 0},
                        {"name": "y", "shape": [2], "dtype": "<f4", "offset": 4}],
                 b"\x00" * 12)
    with pytest.raises(ck.CheckpointError, match="overlap"):
        ck.read_checkpoint(path)


def test_unknown_version_rejected(tmp_path):
    path = tmp_path / "v9.bbck"
    header = json.dumps({"version": 9, "meta": {}, "tensors": []}).encode()
    payload = b""
    path.write_bytes(ck.MAGIC + len(header).to_bytes(4, "little") + header
                     + payload + ck._digest(payload))
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.read_checkpoint(path)


# -- training state -------------------------------------------------------------


def test_train_state_round_trip(tmp_path):
    cfg = tiny_config()
    state = tr.init_train_state(cfg, seed=5)
    batch = mdl.collate([CorruptionExample(
        np.arange(2, 14), np.array([30, 31, 32, EOS_ID]), [])])
    tcfg = tr.TrainConfig(schedule=tr.Schedule(1, 10), batch_size=1, seq_len=16)
    for _ in range(3):
        state, _ = tr.training_step(state, batch, cfg, tcfg)

    path = tmp_path / "state.bbck"
    ck.save_train_state(path, state, cfg)
    loaded, cfg2 = ck.load_train_state(path)
    assert cfg2 == cfg
    assert (loaded.step, loaded.seed, loaded.adam_t) == (state.step, state.seed, state.adam_t)
    for k in state.params:
        assert loaded.params[k].data.tobytes() == state.params[k].data.tobytes()
        assert loaded.m[k].tobytes() == state.m[k].tobytes()
        assert loaded.v[k].tobytes() == state.v[k].tobytes()


def test_loaded_state_reproduces_loss_bit_exactly(tmp_path):
    cfg = tiny_config()
    state = tr.init_train_state(cfg, seed=6)
    ex = CorruptionExample(np.arange(2, 12), np.array([40, 41, EOS_ID]), [])
    before = float(mdl.encode_decode_loss(state.params, cfg, ex)[0].data)
    path = tmp_path / "state.bbck"
    ck.save_train_state(path, state, cfg)
    loaded, cfg2 = ck.load_train_state(path)
    after = float(mdl.encode_decode_loss(loaded.params, cfg2, ex)[0].data)
    assert before == after


def test_missing_moments_rejected(tmp_path):
    cfg = tiny_config()
    state = tr.init_train_state(cfg, seed=7)
    path = tmp_path / "state.bbck"
    ck.save_train_state(path, state, cfg)
    tensors, meta = ck.read_checkpoint(path)
    del tensors["opt.m.pool.kernel"]
    ck.write_checkpoint(path, tensors, meta)
    with pytest.raises(ck.CheckpointError, match="moments"):
        ck.load_train_state(path)
