import numpy as np
import pytest

from sparsemem.errors import CheckpointError
from sparsemem.harness import checkpoint as ck
from sparsemem.memory import MemoryConfig
from sparsemem.model import ModelConfig, init_model
from sparsemem.numerics import make_rng
from sparsemem.ranking import BackgroundIndexStore

TINY = ModelConfig(vocab_size=40, d_model=16, n_layers=2, n_attn_heads=2, memory_layer_index=1, max_seq_len=8,
                   memory=MemoryConfig(mem_size=64, topk=4, n_mem_heads=2, value_dim=8, key_dim=8), seed=3)


@pytest.fixture
def ckpt():
    model = init_model(TINY)
    store = BackgroundIndexStore.from_counts([{1: 2, 5: 1}, {5: 3}], "pretrain")
    rng = make_rng(7, 1)
    rng.random(3)
    return ck.Checkpoint.from_model(model, store, ck.rng_state(rng), {"note": "x"})


def _probe_logits(model):
    tokens = np.array([[1, 5, 9, 2, 0, 0, 0, 0], [1, 30, 31, 32, 33, 2, 0, 0]])
    return model.logits(tokens, tokens != 0)[0].data


def test_round_trip_is_bit_identical(tmp_path, ckpt):
    path = tmp_path / "a.ckpt"
    ck.save_checkpoint(ckpt, path)
    loaded = ck.load_checkpoint(path)
    assert _probe_logits(loaded.build_model()).tobytes() == _probe_logits(ckpt.build_model()).tobytes()
    assert loaded.store == ckpt.store
    assert loaded.config == TINY
    assert loaded.extra == {"note": "x"}
    rng_a, rng_b = ck.restore_rng(loaded.rng_state), ck.restore_rng(ckpt.rng_state)
    assert rng_a.random(4).tobytes() == rng_b.random(4).tobytes()


def test_save_load_save_is_byte_identical(tmp_path, ckpt):
    ck.save_checkpoint(ckpt, tmp_path / "a")
    ck.save_checkpoint(ck.load_checkpoint(tmp_path / "a"), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_no_store_or_rng(tmp_path):
    c = ck.Checkpoint.from_model(init_model(TINY))
    loaded = ck.from_bytes(ck.to_bytes(c))
    assert loaded.store is None and loaded.rng_state is None


@pytest.mark.parametrize("cut", [5, 60, -100, -1])
def test_truncated_file_is_rejected(ckpt, cut):
    blob = ck.to_bytes(ckpt)
    with pytest.raises(CheckpointError):
        ck.from_bytes(blob[:cut])


def test_flipped_byte_fails_checksum(ckpt):
    blob = bytearray(ck.to_bytes(ckpt))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        ck.from_bytes(bytes(blob))


def test_version_mismatch(ckpt):
    blob = bytearray(ck.to_bytes(ckpt))
    blob[len(ck.MAGIC)] = ck.VERSION + 1
    with pytest.raises(CheckpointError, match="version"):
        ck.from_bytes(bytes(blob))


def test_bad_magic(ckpt):
    with pytest.raises(CheckpointError):
        ck.from_bytes(b"NOTACKPT" + ck.to_bytes(ckpt)[8:])


def test_header_digest_tracks_config(ckpt):
    blob = ck.to_bytes(ckpt)
    assert blob[len(ck.MAGIC) + 2 : len(ck.MAGIC) + 34] == ck.config_digest(TINY)
    assert ck.config_digest(TINY) != ck.config_digest(ModelConfig())
