"""Volume I/O, intensity normalisation and mask-constrained random cropping.

Arrays are kept in (D, H, W) = (axial, coronal, sagittal) order; crop sizes use
the same order, so the 256 x 256 x 64 axial patch is ``(64, 256, 256)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .tabular_text import ClinicalRecord

NUM_CLASSES = 4
LUNG_CLASSES = (1, 2)
HU_WINDOW = (-1000.0, 400.0)
DEFAULT_CROP = (64, 256, 256)

ClassKey = Union[int, tuple]


class DataError(ValueError):
    pass


class VolumeReadError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class MaskClassError(DataError):
    def __init__(self, value: int, count: int, num_classes: int):
        super().__init__(f"mask label {value} outside 0..{num_classes - 1} at {count} voxel(s)")
        self.value = value
        self.count = count


class CropSizeError(DataError):
    pass


# -- volume containers ------------------------------------------------------

def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def _raw_header(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_volume(path: str | os.PathLike, array: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> Path:
    """Write a (D, H, W) array as NIfTI (``.nii``/``.nii.gz``) or raw + JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array)
    if _is_nifti(path):
        import nibabel as nib

        affine = np.diag([spacing[2], spacing[1], spacing[0], 1.0])
        nib.save(nib.Nifti1Image(np.ascontiguousarray(array.transpose(2, 1, 0)), affine), str(path))
        return path
    dtype = np.dtype(array.dtype).newbyteorder("<")
    header = {"shape": list(array.shape), "dtype": dtype.str, "spacing": [float(s) for s in spacing], "order": "C"}
    path.write_bytes(np.ascontiguousarray(array, dtype=dtype).tobytes())
    _raw_header(path).write_text(json.dumps(header) + "\n", encoding="utf-8")
    return path


def read_volume(path: str | os.PathLike) -> tuple[np.ndarray, tuple[float, float, float]]:
    path = Path(path)
    if not path.exists():
        raise VolumeReadError(f"{path}: no such file")
    try:
        if _is_nifti(path):
            import nibabel as nib

            img = nib.load(str(path))
            data = np.asarray(img.dataobj).transpose(2, 1, 0)
            zooms = img.header.get_zooms()[:3]
            return np.ascontiguousarray(data), (float(zooms[2]), float(zooms[1]), float(zooms[0]))
        header = json.loads(_raw_header(path).read_text("utf-8"))
        data = np.frombuffer(path.read_bytes(), dtype=np.dtype(header["dtype"]))
        data = data.reshape(header["shape"]).astype(np.dtype(header["dtype"]).newbyteorder("="))
        return data, tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0)))
    except VolumeReadError:
        raise
    except Exception as exc:
        raise VolumeReadError(f"{path}: cannot read volume: {exc}") from exc


def normalize_hu(hu: np.ndarray, window: Sequence[float] = HU_WINDOW) -> np.ndarray:
    """Clip to the HU window and map it affinely onto [-1, 1]."""
    lo, hi = window
    clipped = np.clip(np.asarray(hu, dtype=np.float64), lo, hi)
    return (2.0 * (clipped - lo) / (hi - lo) - 1.0).astype(np.float32)


def denormalize_hu(x: np.ndarray, window: Sequence[float] = HU_WINDOW) -> np.ndarray:
    lo, hi = window
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0 * (hi - lo) + lo


# -- samples ----------------------------------------------------------------

@dataclass
class VolumeSample:
    image: np.ndarray  # float32 (D, H, W), normalised
    mask: np.ndarray  # int64 (D, H, W)
    record: ClinicalRecord
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def subject_id(self) -> str:
        return self.record.subject_id

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.image.shape)


def validate_mask(mask: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    if not np.issubdtype(mask.dtype, np.integer):
        if not np.all(np.equal(np.mod(mask, 1), 0)):
            raise DataError("mask contains non-integer labels")
    mask = mask.astype(np.int64)
    bad = (mask < 0) | (mask >= num_classes)
    if bad.any():
        values, counts = np.unique(mask[bad], return_counts=True)
        raise MaskClassError(int(values[0]), int(counts[0]), num_classes)
    return mask


def load_sample(image_path, mask_path, record: ClinicalRecord, num_classes: int = NUM_CLASSES,
                window: Sequence[float] = HU_WINDOW) -> VolumeSample:
    image, spacing = read_volume(image_path)
    mask, _ = read_volume(mask_path)
    if image.ndim != 3:
        raise ShapeMismatchError(f"{image_path}: expected a 3-D volume, got shape {image.shape}")
    if image.shape != mask.shape:
        raise ShapeMismatchError(f"image shape {image.shape} != mask shape {mask.shape} for {record.subject_id}")
    return VolumeSample(normalize_hu(image, window), validate_mask(mask, num_classes), record, spacing)


# -- cropping ---------------------------------------------------------------

def lung_criterion(size: Sequence[int], fraction: float = 0.01) -> dict:
    """At least ``fraction`` of the crop voxels in either lung class."""
    return {LUNG_CLASSES: int(math.ceil(fraction * int(np.prod(size))))}


@dataclass
class CropSpec:
    size: tuple[int, int, int] = DEFAULT_CROP
    min_mask_voxels: Optional[Mapping[ClassKey, int]] = None  # None = default lung criterion
    max_attempts: int = 50

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        if len(self.size) != 3 or min(self.size) <= 0:
            raise DataError(f"crop size must be three positive ints, got {self.size}")
        if self.max_attempts <= 0:
            raise DataError("max_attempts must be positive")
        if self.min_mask_voxels is None:
            self.min_mask_voxels = lung_criterion(self.size)


@dataclass
class Crop:
    image: np.ndarray
    mask: np.ndarray
    offset: tuple[int, int, int]
    attempts: int
    fallback: bool = False


def _class_count(mask: np.ndarray, key: ClassKey) -> int:
    classes = key if isinstance(key, tuple) else (key,)
    return int(np.isin(mask, classes).sum())


def _criterion_score(mask: np.ndarray, criteria: Mapping[ClassKey, int]) -> float:
    """min over criteria of count / threshold; >= 1 means every criterion is met."""
    score = math.inf
    for key, need in criteria.items():
        if need <= 0:
            continue
        score = min(score, _class_count(mask, key) / need)
    return score


def random_crop(sample: VolumeSample, spec: CropSpec, rng: np.random.Generator) -> Crop:
    shape = sample.image.shape
    if any(s < c for s, c in zip(shape, spec.size)):
        raise CropSizeError(f"volume {shape} of {sample.subject_id!r} is smaller than crop {spec.size}")
    best, best_score = None, -math.inf
    for attempt in range(1, spec.max_attempts + 1):
        offset = tuple(int(rng.integers(0, s - c + 1)) for s, c in zip(shape, spec.size))
        window = tuple(slice(o, o + c) for o, c in zip(offset, spec.size))
        mask = sample.mask[window]
        score = _criterion_score(mask, spec.min_mask_voxels)
        if score >= 1:
            return Crop(sample.image[window].copy(), mask.copy(), offset, attempt)
        if score > best_score:
            best, best_score = (offset, window), score
    offset, window = best
    return Crop(sample.image[window].copy(), sample.mask[window].copy(), offset, spec.max_attempts, fallback=True)


def subject_seed(global_seed: int, subject_id: str) -> int:
    digest = hashlib.sha256(f"{int(global_seed)}:{subject_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def eval_crops(sample: VolumeSample, spec: CropSpec, global_seed: int, n: int = 5) -> list[Crop]:
    """``n`` crops drawn from a generator seeded by (global_seed, subject_id)."""
    rng = np.random.default_rng(subject_seed(global_seed, sample.subject_id))
    return [random_crop(sample, spec, rng) for _ in range(n)]


# -- dataset manifests ------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    image: Path
    mask: Path
    row_key: str


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Newline-delimited JSON; relative paths resolve against the manifest directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    entries = []
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            sid = str(obj["subject_id"])
            entries.append(ManifestEntry(sid, path.parent / obj["image"], path.parent / obj["mask"],
                                         str(obj.get("row_key", sid))))
        except (KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}:{lineno}: bad manifest entry ({exc})") from exc
    if not entries:
        raise DataError(f"{path}: manifest is empty")
    return entries


def write_manifest(path: str | os.PathLike, entries: Sequence[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(dict(e)) + "\n" for e in entries), encoding="utf-8")
    return path


def load_dataset(manifest_path, records: Sequence[ClinicalRecord], num_classes: int = NUM_CLASSES,
                 window: Sequence[float] = HU_WINDOW) -> list[VolumeSample]:
    by_key = {r.subject_id: r for r in records}
    samples = []
    for entry in read_manifest(manifest_path):
        record = by_key.get(entry.row_key, ClinicalRecord(entry.subject_id, {}))
        if record.subject_id != entry.subject_id:
            record = ClinicalRecord(entry.subject_id, record.values)
        samples.append(load_sample(entry.image, entry.mask, record, num_classes, window))
    return samples
