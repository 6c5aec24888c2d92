"""Checkpoint container tests: round-trips and fault injection."""

import struct

import numpy as np
import pytest

from venom.checkpoint import load_tensors, save_tensors
from venom.errors import ContractViolationError, FormatError


def _sample_tensors():
    rng = np.random.default_rng(4)
    return {
        "w0": rng.normal(size=(3, 4)),
        "b0": rng.normal(size=4),
        "t_train": np.float64(200.0),
        "beta": rng.uniform(1e-4, 0.02, size=200),
    }


def test_round_trip_names_shapes_values(tmp_path):
    p = tmp_path / "m.vnmc"
    tensors = _sample_tensors()
    save_tensors(p, tensors)
    back = load_tensors(p)
    assert list(back) == list(tensors)
    for name, value in tensors.items():
        expect = np.asarray(value).astype(np.float32).astype(np.float64)
        assert back[name].shape == np.asarray(value).shape
        assert np.array_equal(back[name], expect)


def test_save_load_save_is_byte_stable(tmp_path):
    p1 = tmp_path / "a.vnmc"
    p2 = tmp_path / "b.vnmc"
    save_tensors(p1, _sample_tensors())
    save_tensors(p2, load_tensors(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_scalar_rank_zero(tmp_path):
    p = tmp_path / "s.vnmc"
    save_tensors(p, {"arch": 1.0})
    back = load_tensors(p)
    assert back["arch"].shape == ()
    assert back["arch"] == 1.0


def test_empty_checkpoint(tmp_path):
    p = tmp_path / "e.vnmc"
    save_tensors(p, {})
    assert load_tensors(p) == {}


def test_bad_magic(tmp_path):
    p = tmp_path / "m.vnmc"
    save_tensors(p, _sample_tensors())
    blob = bytearray(p.read_bytes())
    blob[:4] = b"XXXX"
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="bad magic") as exc:
        load_tensors(p)
    assert exc.value.offset == 0


def test_bad_version(tmp_path):
    p = tmp_path / "m.vnmc"
    save_tensors(p, {"x": np.ones(2)})
    blob = bytearray(p.read_bytes())
    blob[4:8] = struct.pack("<I", 2)
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        load_tensors(p)


def test_truncation_everywhere(tmp_path):
    p = tmp_path / "m.vnmc"
    save_tensors(p, _sample_tensors())
    blob = p.read_bytes()
    for cut in (2, 6, 11, 13, 20, len(blob) - 1):
        p.write_bytes(blob[:cut])
        with pytest.raises(FormatError, match="truncated"):
            load_tensors(p)


def test_trailing_data(tmp_path):
    p = tmp_path / "m.vnmc"
    save_tensors(p, {"x": np.ones(2)})
    p.write_bytes(p.read_bytes() + b"!")
    with pytest.raises(FormatError, match="trailing"):
        load_tensors(p)


def test_non_finite_value_rejected(tmp_path):
    p = tmp_path / "m.vnmc"
    save_tensors(p, {"x": np.ones(3)})
    blob = bytearray(p.read_bytes())
    # value bytes start after: 4 magic + 4 version + 4 count + 2 namelen + 1 name + 1 rank + 4 dim
    val_off = 4 + 4 + 4 + 2 + 1 + 1 + 4
    blob[val_off : val_off + 4] = np.float32(np.nan).tobytes()
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="non-finite"):
        load_tensors(p)


def test_duplicate_name_rejected(tmp_path):
    p = tmp_path / "m.vnmc"
    body = b"".join(
        [
            b"VNMC",
            struct.pack("<I", 1),
            struct.pack("<I", 2),
            struct.pack("<H", 1), b"x", struct.pack("<B", 0), np.float32(1.0).tobytes(),
            struct.pack("<H", 1), b"x", struct.pack("<B", 0), np.float32(2.0).tobytes(),
        ]
    )
    p.write_bytes(body)
    with pytest.raises(FormatError, match="duplicate"):
        load_tensors(p)


def test_empty_name_rejected_on_save(tmp_path):
    with pytest.raises(ContractViolationError):
        save_tensors(tmp_path / "m.vnmc", {"": np.ones(1)})
