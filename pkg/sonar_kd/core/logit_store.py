"""Offline teacher-logit store.

One ``.kdl`` file per image: magic ``KDL1``, u32 format version, the 32-byte SHA-256 contract
hash, u32 image-id length and the utf-8 id, then nine ``KDT1`` tensor records ordered by scale
(finest first) and, within a scale, cls, reg, obj. ``index.json`` maps image ids to file names.
"""

import hashlib
import io
import json
import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from sonar_kd.core.autodiff import no_grad
from sonar_kd.core.cache import Cache
from sonar_kd.core.dataaug import Sample
from sonar_kd.core.detector import FpnLogits, Model, ModelSpec, forward, to_input
from sonar_kd.core.serialization import read_tensor, read_u32, write_tensor, write_u32
from sonar_kd.errors import DatasetError, FormatError, LogitStoreError, MissingFileError, SpecMismatchError

logger = logging.getLogger(__name__)

LOGIT_MAGIC = b"KDL1"
LOGIT_FORMAT_VERSION = 1
HASH_BYTES = 32
INDEX_NAME = "index.json"
RECORD_SUFFIX = ".kdl"
TENSORS_PER_SCALE = 3
NUM_SCALES = 3


def contract_hash(input_size: Sequence[int], strides: Sequence[int], num_classes: int) -> bytes:
    """SHA-256 of the logit shape contract; teacher and student must agree on it."""
    contract = {"input_size": [int(v) for v in input_size], "strides": [int(s) for s in strides], "num_classes": int(num_classes)}
    return hashlib.sha256(json.dumps(contract, sort_keys=True).encode("utf-8")).digest()


def spec_hash(spec: ModelSpec) -> bytes:
    return contract_hash(spec.input_size, spec.strides, spec.num_classes)


@dataclass
class LogitRecord:
    """Teacher logits of one image (batch dimension 1) and the contract they were produced under."""

    image_id: str
    logits: FpnLogits
    spec_hash: bytes


def record_to_bytes(record: LogitRecord) -> bytes:
    if len(record.spec_hash) != HASH_BYTES:
        raise LogitStoreError("contract hash must be 32 bytes", {"length": len(record.spec_hash)})
    arrays = record.logits.arrays()
    if len(arrays) != NUM_SCALES:
        raise LogitStoreError("a record holds exactly three scales", {"scales": len(arrays)})
    stream = io.BytesIO()
    stream.write(LOGIT_MAGIC)
    write_u32(stream, LOGIT_FORMAT_VERSION)
    stream.write(record.spec_hash)
    encoded = record.image_id.encode("utf-8")
    write_u32(stream, len(encoded))
    stream.write(encoded)
    for triple in arrays:
        for array in triple:
            write_tensor(stream, array)
    return stream.getvalue()


def record_from_bytes(blob: bytes, source: str = "<bytes>") -> LogitRecord:
    stream = io.BytesIO(blob)
    magic = stream.read(4)
    if magic != LOGIT_MAGIC:
        raise LogitStoreError(
            f"{source}: not a logit record (bad magic bytes)",
            {"path": source, "expected": LOGIT_MAGIC.decode(), "got": magic.hex()},
        )
    try:
        version = read_u32(stream, "version")
        if version != LOGIT_FORMAT_VERSION:
            raise LogitStoreError(f"{source}: unsupported record version {version}", {"path": source, "version": version})
        digest = stream.read(HASH_BYTES)
        if len(digest) != HASH_BYTES:
            raise LogitStoreError(f"{source}: truncated header", {"path": source})
        length = read_u32(stream, "id length")
        raw_id = stream.read(length)
        if len(raw_id) != length:
            raise LogitStoreError(f"{source}: truncated image id", {"path": source})
        scales = [tuple(read_tensor(stream) for _ in range(TENSORS_PER_SCALE)) for _ in range(NUM_SCALES)]
    except FormatError as exc:
        raise LogitStoreError(f"{source}: corrupt record: {exc.message}", {"path": source}) from exc
    if stream.read(1):
        raise LogitStoreError(f"{source}: trailing bytes after the last tensor", {"path": source})
    return LogitRecord(raw_id.decode("utf-8"), FpnLogits.from_arrays(scales, dtype=np.float32), digest)


def _record_name(image_id: str) -> str:
    if not image_id or image_id in (".", "..") or any(sep in image_id for sep in ("/", "\\", "\0")):
        raise DatasetError(f"image id {image_id!r} cannot name a record file", {"image_id": image_id})
    return f"{image_id}{RECORD_SUFFIX}"


def dump_teacher_logits(
    model: Model,
    samples: Sequence[Sample],
    path: Union[str, Path],
    batch_size: int = 8,
) -> Path:
    """Run the teacher over ``samples`` and write one record per image plus the index."""
    for sample in samples:
        _record_name(sample.image_id)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    digest = spec_hash(model.spec)
    index: Dict[str, str] = {}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        with no_grad():
            logits = forward(model, to_input([s.image for s in chunk], model.spec.np_dtype))
        for offset, sample in enumerate(chunk):
            if sample.image_id in index:
                raise LogitStoreError("duplicate image id in dump", {"image_id": sample.image_id})
            record = LogitRecord(sample.image_id, logits.image(offset), digest)
            (root / _record_name(sample.image_id)).write_bytes(record_to_bytes(record))
            index[sample.image_id] = _record_name(sample.image_id)
        logger.debug("Dumped logits for %d/%d images", min(start + batch_size, len(samples)), len(samples))
    manifest = {
        "format_version": LOGIT_FORMAT_VERSION,
        "hash": digest.hex(),
        "contract": {
            "input_size": list(model.spec.input_size),
            "strides": list(model.spec.strides),
            "num_classes": model.spec.num_classes,
        },
        "records": index,
    }
    (root / INDEX_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Wrote %d teacher logit records to %s", len(index), root)
    return root / INDEX_NAME


def _read_index(root: Path) -> Dict[str, Any]:
    index_path = root / INDEX_NAME
    if not index_path.is_file():
        raise MissingFileError(f"logit index not found: {index_path}", {"path": str(index_path)})
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
        if not isinstance(index.get("records"), dict) or not isinstance(index.get("hash"), str):
            raise KeyError("records")
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise LogitStoreError(f"invalid logit index {index_path}", {"path": str(index_path)}) from exc
    return index


class LogitStore:
    """Read access to a logit directory with hash checks, an LRU cache and background prefetch."""

    def __init__(
        self,
        path: Union[str, Path],
        expected_hash: Optional[bytes] = None,
        cache_size: int = 256,
        workers: int = 2,
    ) -> None:
        self.root = Path(path)
        index = _read_index(self.root)
        self.records: Dict[str, str] = dict(index["records"])
        self.hash = bytes.fromhex(index["hash"])
        if expected_hash is not None and expected_hash != self.hash:
            raise SpecMismatchError(
                "teacher logits were produced under a different shape contract",
                {"store": self.hash.hex(), "expected": expected_hash.hex(), "contract": index.get("contract")},
            )
        self._cache: "Cache[LogitRecord]" = Cache(max_entries=cache_size)
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="logit-prefetch") if workers > 0 else None
        self._pending: Dict[str, "Future[LogitRecord]"] = {}

    @property
    def ids(self) -> List[str]:
        return sorted(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.records

    def require(self, image_ids: Iterable[str]) -> None:
        """Fail unless every id has a record."""
        missing = [i for i in image_ids if i not in self.records]
        if missing:
            raise LogitStoreError(
                f"{len(missing)} images have no teacher logits",
                {"missing": missing[:10], "store": str(self.root)},
            )

    def _load(self, image_id: str) -> LogitRecord:
        if image_id not in self.records:
            raise LogitStoreError(f"no teacher logits for {image_id!r}", {"image_id": image_id, "store": str(self.root)})
        path = self.root / self.records[image_id]
        if not path.is_file():
            raise MissingFileError(f"logit record missing: {path}", {"path": str(path)})
        record = record_from_bytes(path.read_bytes(), str(path))
        if record.spec_hash != self.hash:
            raise SpecMismatchError("record hash differs from the store index", {"path": str(path)})
        if record.image_id != image_id:
            raise LogitStoreError("record holds a different image id", {"path": str(path), "got": record.image_id})
        return record

    def get(self, image_id: str) -> LogitRecord:
        cached = self._cache.get(image_id)
        if cached is not None:
            return cached
        future = self._pending.pop(image_id, None)
        record = future.result() if future is not None else self._load(image_id)
        self._cache.set(image_id, record)
        return record

    def prefetch(self, image_ids: Iterable[str]) -> None:
        """Start loading records in the background; later ``get`` calls pick them up."""
        if self._pool is None:
            return
        for image_id in image_ids:
            if image_id in self._pending or image_id in self._cache:
                continue
            self._pending[image_id] = self._pool.submit(self._load, image_id)

    def batch(self, image_ids: Sequence[str], dtype: Any = None) -> FpnLogits:
        """Teacher logits for ``image_ids`` stacked along the batch axis."""
        return FpnLogits.stack([self.get(i).logits for i in image_ids], dtype=dtype)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
        self._pending.clear()

    def __enter__(self) -> "LogitStore":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def load_teacher_logits(path: Union[str, Path], image_id: str, expected_hash: Optional[bytes] = None) -> LogitRecord:
    """Read one record from a store directory."""
    with LogitStore(path, expected_hash=expected_hash, workers=0) as store:
        return store.get(image_id)
