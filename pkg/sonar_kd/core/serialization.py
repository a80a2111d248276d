"""Binary tensor records.

A record is the magic ``KDT1``, a little-endian u32 rank, ``rank`` u32 extents, then the
elements as little-endian IEEE-754 float32 in row-major order. Named record files (used by
checkpoints) are a u32 record count followed by ``(u32 key length, utf-8 key, record)`` triples.
"""

import io
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Union

import numpy as np

from sonar_kd.errors import FormatError, MissingFileError

TENSOR_MAGIC = b"KDT1"
_U32 = struct.Struct("<I")


def write_u32(stream: BinaryIO, value: int) -> None:
    stream.write(_U32.pack(value))


def read_u32(stream: BinaryIO, what: str = "u32") -> int:
    raw = stream.read(4)
    if len(raw) != 4:
        raise FormatError(f"truncated record while reading {what}")
    return int(_U32.unpack(raw)[0])


def write_tensor(stream: BinaryIO, array: Union[np.ndarray, float]) -> None:
    """Append one ``KDT1`` record; values are stored as float32."""
    data = np.asarray(array, dtype="<f4")
    stream.write(TENSOR_MAGIC)
    write_u32(stream, data.ndim)
    for extent in data.shape:
        write_u32(stream, extent)
    stream.write(data.tobytes(order="C"))


def read_tensor(stream: BinaryIO) -> np.ndarray:
    """Read one ``KDT1`` record as a float32 array."""
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError("bad tensor magic bytes", {"expected": TENSOR_MAGIC.decode(), "got": magic.hex()})
    rank = read_u32(stream, "rank")
    shape = tuple(read_u32(stream, "extent") for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated tensor payload", {"expected_bytes": 4 * count, "got_bytes": len(payload)})
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def tensor_to_bytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    write_tensor(buffer, array)
    return buffer.getvalue()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))


def save_named_tensors(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> None:
    """Write ``tensors`` as keyed records, in insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as stream:
        write_u32(stream, len(tensors))
        for key, array in tensors.items():
            encoded = key.encode("utf-8")
            write_u32(stream, len(encoded))
            stream.write(encoded)
            write_tensor(stream, array)


def load_named_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"tensor file not found: {path}", {"path": str(path)})
    tensors: Dict[str, np.ndarray] = {}
    with path.open("rb") as stream:
        count = read_u32(stream, "record count")
        for _ in range(count):
            length = read_u32(stream, "key length")
            key = stream.read(length)
            if len(key) != length:
                raise FormatError("truncated record key", {"path": str(path)})
            tensors[key.decode("utf-8")] = read_tensor(stream)
        if stream.read(1):
            raise FormatError("trailing bytes after the last record", {"path": str(path)})
    return tensors
