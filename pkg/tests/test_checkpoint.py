"""Checkpoint container: round trips, integrity, RNG state."""

import numpy as np
import pytest

from picomt.checkpoint import (
    Checkpoint,
    load_checkpoint,
    rng_from_meta,
    rng_state_to_meta,
    save_checkpoint,
    tensor_table_checksum,
)
from picomt.errors import IntegrityError


def sample_checkpoint(rng):
    tensors = {
        "enc.w": rng.normal(size=(4, 6)).astype(np.float32),
        "scalar": np.float32(3.5).reshape(()),
        "vec": rng.normal(size=17).astype(np.float32),
    }
    meta = {"kind": "mt", "epoch": 3, "best_bleu": 12.5, "nested": {"a": [1, 2]}}
    return Checkpoint(config_text="lr = 0.0001\nseed = 7\n", meta=meta, tensors=tensors)


class TestRoundTrip:
    def test_bitwise(self, tmp_path, rng):
        ck = sample_checkpoint(rng)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, ck)
        loaded = load_checkpoint(path)
        assert loaded.config_text == ck.config_text
        assert loaded.meta == ck.meta
        assert set(loaded.tensors) == set(ck.tensors)
        for name, arr in ck.tensors.items():
            got = loaded.tensors[name]
            assert got.shape == np.asarray(arr).shape
            assert np.asarray(arr).tobytes() == got.tobytes()

    def test_save_is_deterministic_regardless_of_dict_order(self, tmp_path, rng):
        ck = sample_checkpoint(rng)
        reordered = Checkpoint(
            config_text=ck.config_text,
            meta=dict(reversed(list(ck.meta.items()))),
            tensors=dict(reversed(list(ck.tensors.items()))),
        )
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(p1, ck)
        save_checkpoint(p2, reordered)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_no_tmp_file_left_behind(self, tmp_path, rng):
        path = str(tmp_path / "x.ckpt")
        save_checkpoint(path, sample_checkpoint(rng))
        assert sorted(p.name for p in tmp_path.iterdir()) == ["x.ckpt"]


class TestIntegrity:
    def test_truncated_file(self, tmp_path, rng):
        path = str(tmp_path / "t.ckpt")
        save_checkpoint(path, sample_checkpoint(rng))
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) // 2])
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_flipped_byte(self, tmp_path, rng):
        path = str(tmp_path / "f.ckpt")
        save_checkpoint(path, sample_checkpoint(rng))
        blob = bytearray(open(path, "rb").read())
        blob[len(blob) // 3] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(IntegrityError, match="checksum"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = str(tmp_path / "nope.ckpt")
        open(path, "wb").write(b"just some text, definitely not binary tensors" * 4)
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IntegrityError):
            load_checkpoint(str(tmp_path / "absent.ckpt"))


class TestRngState:
    def test_stream_continues_identically(self):
        a = np.random.default_rng(42)
        a.random(100)
        state = rng_state_to_meta(a)
        b = rng_from_meta(state)
        np.testing.assert_array_equal(a.random(50), b.random(50))

    def test_json_round_trip(self, tmp_path):
        gen = np.random.default_rng(7)
        gen.random(13)
        ck = Checkpoint(config_text="", meta={"rng_state": rng_state_to_meta(gen)}, tensors={})
        path = str(tmp_path / "rng.ckpt")
        save_checkpoint(path, ck)
        restored = rng_from_meta(load_checkpoint(path).meta["rng_state"])
        np.testing.assert_array_equal(gen.random(20), restored.random(20))


def test_tensor_table_checksum_order_independent(rng):
    a = rng.normal(size=(3, 3)).astype(np.float32)
    b = rng.normal(size=5).astype(np.float32)
    fwd = tensor_table_checksum({"a": a, "b": b})
    rev = tensor_table_checksum({"b": b, "a": a})
    assert fwd == rev
    changed = tensor_table_checksum({"a": a + 1e-6, "b": b})
    assert changed != fwd
