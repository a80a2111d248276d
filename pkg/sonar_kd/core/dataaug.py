"""Sonar samples, the noise/flip augmentations, splitting, resizing, a synthetic generator and dataset I/O.

Annotation files hold one ``class cx cy w h`` line per box in coordinates normalized to [0, 1];
images without walls have empty annotation files.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from sonar_kd.core.boxes import GTBox, box_in_bounds
from sonar_kd.errors import ConfigError, DatasetError, FormatError, MissingFileError
from sonar_kd.protocols import ManifestEntry

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 0.5 * 255
DEFAULT_SIZE = 64
SPLITS = ("train", "val", "test")
PROVENANCES = ("original", "noise", "flip", "noise_flip")
# Share of origins held out for validation and for test; the remainder trains.
HOLDOUT_PERCENT = 15
DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
IMAGE_SUFFIXES = (".png", ".pgm")

SeedLike = Union[int, Sequence[int]]


@dataclass(frozen=True, eq=False)
class Sample:
    """An 8-bit image (HxW or HxWx3) with its boxes in pixel coordinates."""

    image: np.ndarray
    boxes: Tuple[GTBox, ...] = ()
    split: str = "train"
    provenance: str = "original"
    image_id: str = ""
    origin_id: str = ""

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def has_wall(self) -> bool:
        return len(self.boxes) > 0

    def validate(self) -> None:
        if self.image.dtype != np.uint8:
            raise DatasetError(f"{self.image_id}: images must be 8-bit", {"dtype": str(self.image.dtype)})
        for box in self.boxes:
            if not box_in_bounds(box, self.width, self.height):
                raise DatasetError(
                    f"{self.image_id}: box outside the {self.width}x{self.height} image",
                    {"image_id": self.image_id, "box": [box.cx, box.cy, box.w, box.h]},
                )


# Augmentations


def sample_noise(shape: Tuple[int, ...], sigma: float, seed: SeedLike) -> np.ndarray:
    """Zero-mean Gaussian noise before clamping and quantization."""
    if sigma < 0:
        raise ConfigError("noise sigma must be non-negative", {"sigma": sigma})
    return np.random.default_rng(seed).normal(0.0, sigma, size=shape)


def gaussian_noise(image: np.ndarray, sigma: float = DEFAULT_SIGMA, seed: SeedLike = 0) -> np.ndarray:
    """Add N(0, sigma^2) per pixel, clamp to [0, 255] and round back to 8 bits."""
    noisy = image.astype(np.float64) + sample_noise(image.shape, sigma, seed)
    return np.rint(np.clip(noisy, 0.0, 255.0)).astype(np.uint8)


def hflip(sample: Sample) -> Sample:
    """Mirror across the vertical axis; box centers map ``cx -> W - cx``."""
    width = sample.width
    boxes = tuple(replace(b, cx=width - b.cx) for b in sample.boxes)
    return replace(sample, image=np.ascontiguousarray(sample.image[:, ::-1]), boxes=boxes)


def noise_flip(sample: Sample, sigma: float = DEFAULT_SIGMA, seed: SeedLike = 0) -> Sample:
    """Flip first, then add noise to the flipped image."""
    flipped = hflip(sample)
    return replace(flipped, image=gaussian_noise(flipped.image, sigma, seed))


def augment_sample(sample: Sample, sigma: float = DEFAULT_SIGMA, seed: SeedLike = 0) -> List[Sample]:
    """The original plus its noise, flip and noise-flip variants, all sharing the original's split."""
    seeds = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    origin = sample.origin_id or sample.image_id
    base = replace(sample, origin_id=origin)
    noisy = replace(
        base,
        image=gaussian_noise(sample.image, sigma, seeds + [1]),
        provenance="noise",
        image_id=f"{sample.image_id}_noise",
    )
    flipped = replace(hflip(base), provenance="flip", image_id=f"{sample.image_id}_flip")
    both = replace(
        noise_flip(base, sigma, seeds + [2]),
        provenance="noise_flip",
        image_id=f"{sample.image_id}_noise_flip",
    )
    return [base, noisy, flipped, both]


def augment_dataset(samples: Iterable[Sample], sigma: float = DEFAULT_SIGMA, seed: int = 0) -> List[Sample]:
    out: List[Sample] = []
    for index, sample in enumerate(samples):
        out.extend(augment_sample(sample, sigma, [seed, index]))
    return out


def random_augment(sample: Sample, rng: np.random.Generator, sigma: float = DEFAULT_SIGMA) -> Sample:
    """Online augmentation: flip with probability 1/2, then noise with probability 1/2."""
    if rng.random() < 0.5:
        sample = hflip(sample)
    if rng.random() < 0.5:
        sample = replace(sample, image=gaussian_noise(sample.image, sigma, int(rng.integers(2**31))))
    return sample


# Splitting and resizing


def split_dataset(samples: Sequence[Sample], seed: int = 0) -> Dict[str, List[Sample]]:
    """Shuffle origins deterministically and partition them 70/15/15.

    Validation and test each get ``floor(15% of origins)``, training gets the rest. Every
    sample follows its origin, so augmented variants never cross splits.
    """
    if not samples:
        raise DatasetError("cannot split an empty dataset")
    origins: List[str] = []
    seen = set()
    for s in samples:
        origin = s.origin_id or s.image_id
        if origin not in seen:
            seen.add(origin)
            origins.append(origin)
    order = np.random.default_rng(seed).permutation(len(origins))
    holdout = len(origins) * HOLDOUT_PERCENT // 100
    assignment: Dict[str, str] = {}
    for rank, index in enumerate(order):
        split = "val" if rank < holdout else "test" if rank < 2 * holdout else "train"
        assignment[origins[index]] = split
    result: Dict[str, List[Sample]] = {name: [] for name in SPLITS}
    for s in samples:
        split = assignment[s.origin_id or s.image_id]
        result[split].append(replace(s, split=split))
    logger.info("Split %d origins: %s", len(origins), {k: len(v) for k, v in result.items()})
    return result


def resize_image(image: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``(height, width)``."""
    height, width = target
    if image.shape[:2] == (height, width):
        return image.copy()
    resized = Image.fromarray(image).resize((width, height), Image.BILINEAR)
    return np.asarray(resized, dtype=np.uint8)


def resize(sample: Sample, target: Tuple[int, int], max_stride: int = 32) -> Sample:
    """Plain (non-letterboxed) resize of the image with a linear rescale of its boxes."""
    height, width = target
    if height <= 0 or width <= 0 or height % max_stride or width % max_stride:
        raise ConfigError(
            f"resize target {height}x{width} must be positive and divisible by {max_stride}",
            {"target": [height, width], "max_stride": max_stride},
        )
    sx, sy = width / sample.width, height / sample.height
    boxes = tuple(replace(b, cx=b.cx * sx, cy=b.cy * sy, w=b.w * sx, h=b.h * sy) for b in sample.boxes)
    return replace(sample, image=resize_image(sample.image, (height, width)), boxes=boxes)


# Synthetic sonar


def _wall_band(rng: np.random.Generator, size: int) -> np.ndarray:
    """Mask of a bright, gently sloped streak spanning most of the image width."""
    length = int(rng.integers(size * 5 // 8, size + 1))
    x0 = int(rng.integers(0, size - length + 1))
    thickness = int(rng.integers(max(2, size // 16), max(3, size // 8) + 1))
    slope = rng.uniform(-0.25, 0.25)
    margin = int(np.ceil(abs(slope) * length)) + thickness
    y0 = int(rng.integers(0, max(1, size - margin)))
    if slope < 0:
        y0 += int(np.ceil(-slope * length))
    ys, xs = np.mgrid[0:size, 0:size]
    centre = y0 + slope * (xs - x0)
    return (xs >= x0) & (xs < x0 + length) & (ys >= centre) & (ys < centre + thickness)


def synth_sonar(seed: int, n: int, size: int = DEFAULT_SIZE, wall_ratio: float = 0.5) -> List[Sample]:
    """Speckled grayscale images; ``round(n * wall_ratio)`` of them carry a wall streak (class 0)."""
    if n < 0 or not 0.0 <= wall_ratio <= 1.0:
        raise ConfigError("n must be >= 0 and wall_ratio in [0, 1]", {"n": n, "wall_ratio": wall_ratio})
    rng = np.random.default_rng(seed)
    walls = set(rng.permutation(n)[: int(round(n * wall_ratio))].tolist())
    samples = []
    for i in range(n):
        speckle = rng.rayleigh(scale=28.0, size=(size, size))
        image = np.clip(speckle, 0, 255)
        boxes: Tuple[GTBox, ...] = ()
        if i in walls:
            band = _wall_band(rng, size)
            image = np.where(band, rng.uniform(190.0, 255.0, size=(size, size)), image)
            ys, xs = np.nonzero(band)
            x1, x2, y1, y2 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
            boxes = (GTBox(0, (x1 + x2) / 2.0, (y1 + y2) / 2.0, float(x2 - x1), float(y2 - y1)),)
        image_id = f"s{i:05d}"
        samples.append(Sample(np.rint(image).astype(np.uint8), boxes, image_id=image_id, origin_id=image_id))
    logger.debug("Synthesized %d images (%d with walls)", n, len(walls))
    return samples


# Files


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Read a PNG/PGM as uint8, grayscale as HxW and everything else as HxWx3."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"image not found: {path}", {"path": str(path)})
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            return np.asarray(img, dtype=np.uint8).copy()
    except UnidentifiedImageError as exc:
        raise FormatError(f"cannot decode image {path}", {"path": str(path)}) from exc


def save_image(path: Union[str, Path], image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def format_annotations(boxes: Iterable[GTBox], width: int, height: int) -> str:
    lines = [f"{b.class_id} {b.cx / width:.8f} {b.cy / height:.8f} {b.w / width:.8f} {b.h / height:.8f}" for b in boxes]
    return "".join(line + "\n" for line in lines)


def write_annotations(path: Union[str, Path], boxes: Iterable[GTBox], width: int, height: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_annotations(boxes, width, height), encoding="utf-8")


def parse_annotations(text: str, width: int, height: int, source: str = "<string>") -> List[GTBox]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        try:
            if len(fields) != 5:
                raise ValueError(f"expected 5 fields, got {len(fields)}")
            cls = int(fields[0])
            cx, cy, w, h = (float(v) for v in fields[1:])
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: {exc}", {"path": source, "line": lineno}) from exc
        boxes.append(GTBox(cls, cx * width, cy * height, w * width, h * height))
    return boxes


def read_annotations(path: Union[str, Path], width: int, height: int) -> List[GTBox]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"annotation file not found: {path}", {"path": str(path)})
    return parse_annotations(path.read_text(encoding="utf-8"), width, height, str(path))


@dataclass
class DatasetIndex:
    """Manifest entries of a dataset directory, in file order."""

    root: Path
    entries: List[ManifestEntry] = field(default_factory=list)

    def ids(self, split: Optional[str] = None) -> List[str]:
        return [e["image_id"] for e in self.entries if split is None or e["split"] == split]


def save_dataset(samples: Sequence[Sample], out_dir: Union[str, Path], image_format: str = "png") -> Path:
    """Write images, annotation files and ``manifest.json`` under ``out_dir``."""
    if image_format not in ("png", "pgm"):
        raise ConfigError("image format must be png or pgm", {"image_format": image_format})
    root = Path(out_dir)
    entries: List[ManifestEntry] = []
    for s in samples:
        image_rel = f"images/{s.image_id}.{image_format}"
        label_rel = f"labels/{s.image_id}.txt"
        save_image(root / image_rel, s.image)
        write_annotations(root / label_rel, s.boxes, s.width, s.height)
        entries.append(
            ManifestEntry(
                image_id=s.image_id,
                image=image_rel,
                annotation=label_rel,
                split=s.split,
                provenance=s.provenance,
                origin_id=s.origin_id or s.image_id,
            )
        )
    manifest = {"format_version": DATASET_FORMAT_VERSION, "samples": entries}
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    logger.info("Wrote %d samples to %s", len(entries), root)
    return root / MANIFEST_NAME


def read_index(path: Union[str, Path]) -> DatasetIndex:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.is_file():
        raise MissingFileError(f"dataset manifest not found: {manifest_path}", {"path": str(manifest_path)})
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        entries = manifest["samples"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid dataset manifest {manifest_path}", {"path": str(manifest_path)}) from exc
    for entry in entries:
        if entry.get("split") not in SPLITS or entry.get("provenance") not in PROVENANCES:
            raise FormatError(
                "manifest entry has an unknown split or provenance",
                {"image_id": entry.get("image_id"), "split": entry.get("split"), "provenance": entry.get("provenance")},
            )
    return DatasetIndex(manifest_path.parent, list(entries))


def load_dataset(path: Union[str, Path], split: Optional[str] = None) -> List[Sample]:
    """Load every sample of a dataset directory (or only one split)."""
    if split is not None and split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}", {"split": split, "choices": list(SPLITS)})
    index = read_index(path)
    samples = []
    for entry in index.entries:
        if split is not None and entry["split"] != split:
            continue
        image = load_image(index.root / entry["image"])
        boxes = read_annotations(index.root / entry["annotation"], image.shape[1], image.shape[0])
        sample = Sample(
            image,
            tuple(boxes),
            split=entry["split"],
            provenance=entry["provenance"],
            image_id=entry["image_id"],
            origin_id=entry.get("origin_id", entry["image_id"]),
        )
        sample.validate()
        samples.append(sample)
    logger.debug("Loaded %d samples from %s", len(samples), index.root)
    return samples


def list_images(directory: Union[str, Path]) -> List[Path]:
    """PNG and PGM files of a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFileError(f"image directory not found: {directory}", {"path": str(directory)})
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def import_samples(directory: Union[str, Path], size: Optional[int] = None) -> List[Sample]:
    """Read images with optional same-stem annotation files; a missing file means no wall.

    With ``size`` every image is resized to ``size x size`` and its boxes rescaled.
    """
    paths = list_images(directory)
    if not paths:
        raise DatasetError(f"no PNG/PGM images in {directory}", {"path": str(directory)})
    samples = []
    for path in paths:
        image = load_image(path)
        label = path.with_suffix(".txt")
        boxes: List[GTBox] = []
        if label.is_file():
            boxes = read_annotations(label, image.shape[1], image.shape[0])
        else:
            logger.debug("No annotation for %s, treating it as NoWall", path.name)
        sample = Sample(image, tuple(boxes), image_id=path.stem, origin_id=path.stem)
        sample.validate()
        if size is not None:
            sample = resize(sample, (size, size))
        samples.append(sample)
    logger.info("Imported %d images from %s", len(samples), directory)
    return samples
