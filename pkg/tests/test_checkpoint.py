"""Checkpoint binary format: layout, round trips, and corruption errors."""

import struct

import numpy as np
import pytest

from expnet.checkpoint import (
    Checkpoint,
    checkpoint_from_bytes,
    load_checkpoint,
    save_checkpoint,
)


def sample_checkpoint():
    rng = np.random.default_rng(3)
    return Checkpoint(
        config_text="train.seed = 1\n",
        tensors={
            "conv1.w": rng.normal(size=(4, 2, 3, 3)),
            "dense.b": np.array([1e-300, -1e300, np.nextafter(0.5, 1.0)]),
            "scalar": np.array(2.5),
        },
        state={"epoch": 3, "rng": {"a": 2**100}, "metrics": [{"loss": 0.1}]},
    )


class TestRoundTrip:
    def test_values_and_state_survive_exactly(self):
        ckpt = sample_checkpoint()
        back = checkpoint_from_bytes(ckpt.to_bytes())
        assert back.config_text == ckpt.config_text
        assert set(back.tensors) == set(ckpt.tensors)
        for name, arr in ckpt.tensors.items():
            assert back.tensors[name].shape == np.asarray(arr).shape
            assert np.array_equal(back.tensors[name], arr), name
        assert back.state == ckpt.state
        assert back.state["rng"]["a"] == 2**100

    def test_file_round_trip(self, tmp_path):
        ckpt = sample_checkpoint()
        save_checkpoint(ckpt, tmp_path / "run.ckpt")
        back = load_checkpoint(tmp_path / "run.ckpt")
        assert back.to_bytes() == ckpt.to_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="run.ckpt"):
            load_checkpoint(tmp_path / "run.ckpt")

    def test_bytes_independent_of_insertion_order(self):
        a = Checkpoint("c", {"x": np.ones(2), "y": np.zeros(3)}, {"epoch": 0})
        b = Checkpoint("c", {"y": np.zeros(3), "x": np.ones(2)}, {"epoch": 0})
        assert a.to_bytes() == b.to_bytes()

    def test_serialization_is_deterministic(self):
        ckpt = sample_checkpoint()
        assert ckpt.to_bytes() == ckpt.to_bytes()


class TestLayout:
    def test_header_bytes(self):
        raw = Checkpoint("hi", {}, {}).to_bytes()
        assert raw[:4] == b"EXPN"
        assert struct.unpack("<H", raw[4:6]) == (1,)
        assert struct.unpack("<I", raw[6:10]) == (2,)
        assert raw[10:12] == b"hi"

    def test_payload_is_little_endian_f64(self):
        raw = Checkpoint("", {"t": np.array([1.5])}, {}).to_bytes()
        # name table: count=1, name len=1, 't', dtype=0, rank=1, dim=1, payload
        idx = 4 + 2 + 4 + 0 + 4 + 2 + 1 + 1 + 1 + 4
        assert raw[idx : idx + 8] == struct.pack("<d", 1.5)


class TestCorruption:
    def test_bad_magic(self):
        raw = b"NOPE" + sample_checkpoint().to_bytes()[4:]
        with pytest.raises(ValueError, match="bad magic"):
            checkpoint_from_bytes(raw)

    def test_bad_version(self):
        raw = bytearray(sample_checkpoint().to_bytes())
        raw[4:6] = struct.pack("<H", 9)
        with pytest.raises(ValueError, match="version 9"):
            checkpoint_from_bytes(bytes(raw))

    def test_truncation_names_offset(self):
        raw = sample_checkpoint().to_bytes()
        with pytest.raises(ValueError, match="truncated.*offset"):
            checkpoint_from_bytes(raw[: len(raw) // 2])

    def test_trailing_bytes_rejected(self):
        raw = sample_checkpoint().to_bytes() + b"\x00"
        with pytest.raises(ValueError, match="trailing"):
            checkpoint_from_bytes(raw)

    def test_unknown_dtype_code(self):
        ckpt = Checkpoint("", {"t": np.array([1.0])}, {})
        raw = bytearray(ckpt.to_bytes())
        # dtype code byte follows magic(4) version(2) cfg-len(4) count(4) name-len(2) name(1)
        raw[4 + 2 + 4 + 4 + 2 + 1] = 7
        with pytest.raises(ValueError, match="dtype code 7"):
            checkpoint_from_bytes(bytes(raw))
