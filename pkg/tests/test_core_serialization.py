"""Tests for sonar_kd.core.serialization."""

import io
import struct

import numpy as np
import pytest

from sonar_kd.core.serialization import (
    TENSOR_MAGIC,
    load_named_tensors,
    read_tensor,
    save_named_tensors,
    tensor_from_bytes,
    tensor_to_bytes,
    write_tensor,
)
from sonar_kd.errors import FormatError, MissingFileError


class TestTensorRecords:
    """Test single KDT1 records."""

    def test_layout(self):
        """Test the byte layout: magic, rank, extents, float32 payload."""
        blob = tensor_to_bytes(np.array([[1.0, 2.0, 3.0]]))
        assert blob[:4] == TENSOR_MAGIC
        assert struct.unpack("<III", blob[4:16]) == (2, 1, 3)
        np.testing.assert_array_equal(np.frombuffer(blob[16:], dtype="<f4"), [1.0, 2.0, 3.0])
        assert len(blob) == 16 + 12

    def test_round_trip_is_float32_exact(self, rng):
        """Test float32 values survive bit for bit and float64 is rounded to float32."""
        values = rng.normal(size=(2, 3, 4)).astype(np.float32)
        out = tensor_from_bytes(tensor_to_bytes(values))
        assert out.dtype == np.float32
        assert out.tobytes() == values.tobytes()
        wide = rng.normal(size=5)
        np.testing.assert_array_equal(tensor_from_bytes(tensor_to_bytes(wide)), wide.astype(np.float32))

    def test_scalar_and_empty(self):
        """Test rank-0 and zero-size records."""
        assert tensor_from_bytes(tensor_to_bytes(np.float64(2.5))).shape == ()
        assert tensor_from_bytes(tensor_to_bytes(np.zeros((0, 3)))).shape == (0, 3)

    def test_scalar_header_has_rank_zero(self):
        """Test a rank-0 value is written with no extents and one float32 payload."""
        raw = tensor_to_bytes(np.float32(2.5))
        assert raw == TENSOR_MAGIC + struct.pack("<I", 0) + struct.pack("<f", 2.5)
        assert tensor_from_bytes(raw).item() == 2.5

    def test_consecutive_records(self):
        """Test several records read back from one stream in order."""
        stream = io.BytesIO()
        write_tensor(stream, np.ones(2))
        write_tensor(stream, np.zeros((1, 1)))
        stream.seek(0)
        assert read_tensor(stream).shape == (2,)
        assert read_tensor(stream).shape == (1, 1)

    def test_bad_magic(self):
        """Test a corrupted magic is rejected."""
        blob = b"XXXX" + tensor_to_bytes(np.ones(2))[4:]
        with pytest.raises(FormatError):
            tensor_from_bytes(blob)

    def test_truncated_payload(self):
        """Test a short payload is rejected."""
        blob = tensor_to_bytes(np.ones(4))
        with pytest.raises(FormatError):
            tensor_from_bytes(blob[:-3])
        with pytest.raises(FormatError):
            tensor_from_bytes(blob[:6])


class TestNamedTensors:
    """Test keyed record files."""

    def test_save_and_load(self, tmp_path, rng):
        """Test keys and insertion order are preserved."""
        tensors = {"b.weight": rng.normal(size=(2, 2)), "a.bias": np.arange(3.0)}
        path = tmp_path / "weights.kdt"
        save_named_tensors(path, tensors)
        loaded = load_named_tensors(path)
        assert list(loaded) == ["b.weight", "a.bias"]
        np.testing.assert_array_equal(loaded["a.bias"], [0.0, 1.0, 2.0])

    def test_missing_file(self, tmp_path):
        """Test a missing file raises MissingFileError."""
        with pytest.raises(MissingFileError):
            load_named_tensors(tmp_path / "nope.kdt")

    def test_trailing_bytes(self, tmp_path):
        """Test extra bytes after the last record are rejected."""
        path = tmp_path / "weights.kdt"
        save_named_tensors(path, {"x": np.ones(1)})
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_named_tensors(path)

    def test_truncated_key(self, tmp_path):
        """Test a key shorter than its declared length is rejected."""
        path = tmp_path / "weights.kdt"
        path.write_bytes(struct.pack("<II", 1, 10) + b"abc")
        with pytest.raises(FormatError):
            load_named_tensors(path)
