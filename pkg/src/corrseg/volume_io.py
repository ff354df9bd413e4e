"""Loading, validation, normalization and spatial standardization of
multi-modal volumes, plus the raw fixture format and dataset manifests."""

from __future__ import annotations

import os
import random
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import (BadLabelError, DuplicateIdError, EmptyCaseError, ShapeMismatchError,
                     VolumeIOError)

MODALITY_TAGS = ("FLAIR", "T1", "T1c", "T2")
LABEL_VALUES = (0, 1, 2, 4)
# contiguous class index -> stored label value
CLASS_TO_LABEL = np.array(LABEL_VALUES, dtype=np.uint8)

RAW_MAGIC = b"MMSV"
RAW_HEADER = struct.Struct("<4s3I")


@dataclass
class ModalityVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality_tag: str = "FLAIR"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatchError(f"volume must be 3D with positive axes, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{self.modality_tag}: volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LabelVolume:
    """Label grid stored as contiguous classes {0,1,2,3}; ``values`` gives {0,1,2,4}."""

    classes: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def from_values(cls, values, spacing=(1.0, 1.0, 1.0)) -> "LabelVolume":
        return cls(encode_labels(values), spacing)

    @property
    def values(self) -> np.ndarray:
        return CLASS_TO_LABEL[self.classes]

    @property
    def shape(self):
        return self.classes.shape


@dataclass
class MultiModalCase:
    case_id: str
    modalities: list[ModalityVolume]
    labels: LabelVolume | None = None

    def __post_init__(self):
        if not self.modalities:
            raise ShapeMismatchError("case has no modalities")
        ref = self.modalities[0]
        for vol in self.modalities[1:]:
            if vol.shape != ref.shape:
                raise ShapeMismatchError(
                    f"{self.case_id}: {vol.modality_tag} shape {vol.shape} != {ref.shape}")
            if not np.allclose(vol.spacing, ref.spacing):
                raise ShapeMismatchError(f"{self.case_id}: spacing mismatch")
        if self.labels is not None and self.labels.shape != ref.shape:
            raise ShapeMismatchError(
                f"{self.case_id}: label shape {self.labels.shape} != {ref.shape}")

    @property
    def shape(self):
        return self.modalities[0].shape

    @property
    def spacing(self):
        return self.modalities[0].spacing

    def stack(self, dtype=np.float32) -> np.ndarray:
        """(N, D, H, W) array in modality order."""
        return np.stack([v.data for v in self.modalities]).astype(dtype, copy=False)


def encode_labels(values) -> np.ndarray:
    """Map label values {0,1,2,4} to classes {0,1,2,3}."""
    values = np.asarray(values)
    bad = np.setdiff1d(np.unique(values), LABEL_VALUES)
    if bad.size:
        raise BadLabelError(f"illegal label values {bad.tolist()}; legal set is {LABEL_VALUES}")
    classes = values.astype(np.uint8)
    classes[values == 4] = 3
    return classes


def decode_labels(classes) -> np.ndarray:
    return CLASS_TO_LABEL[np.asarray(classes)]


# --- file formats ---------------------------------------------------------

def write_raw(path, data: np.ndarray, labels: bool = False) -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise ShapeMismatchError("raw volumes are 3D")
    payload = data.astype("<u1" if labels else "<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(RAW_HEADER.pack(RAW_MAGIC, *data.shape))
        fh.write(np.ascontiguousarray(payload).tobytes(order="C"))


def read_raw(path, labels: bool | None = None) -> np.ndarray:
    """Read a raw volume; element type is inferred from the file size when
    ``labels`` is None."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read {path}: {exc}") from exc
    if len(blob) < RAW_HEADER.size:
        raise VolumeIOError(f"{path}: truncated header")
    magic, d, h, w = RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise VolumeIOError(f"{path}: bad magic {magic!r}")
    n = d * h * w
    body = len(blob) - RAW_HEADER.size
    if labels is None:
        if body == 4 * n:
            labels = False
        elif body == n:
            labels = True
        else:
            raise VolumeIOError(f"{path}: payload of {body} bytes does not fit {d}x{h}x{w}")
    width = 1 if labels else 4
    if body != width * n:
        raise VolumeIOError(f"{path}: expected {width * n} payload bytes, found {body}")
    dtype = "<u1" if labels else "<f4"
    return np.frombuffer(blob, dtype=dtype, offset=RAW_HEADER.size).reshape(d, h, w).copy()


def _is_nifti(path) -> bool:
    name = str(path).lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def read_volume(path, labels: bool = False) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Return (array, spacing) from a NIfTI or raw file."""
    if not os.path.exists(path):
        raise VolumeIOError(f"no such file: {path}")
    if _is_nifti(path):
        import nibabel as nib
        try:
            img = nib.load(str(path))
            arr = np.asarray(img.dataobj)
        except Exception as exc:
            raise VolumeIOError(f"cannot parse {path}: {exc}") from exc
        if arr.ndim != 3:
            raise VolumeIOError(f"{path}: expected a 3D image, got {arr.ndim}D")
        spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
        if labels:
            rounded = np.rint(arr)
            if not np.array_equal(rounded, arr):
                raise BadLabelError(f"{path}: non-integer label values")
            arr = rounded.astype(np.int64)
        else:
            arr = arr.astype(np.float32)
        return arr, spacing
    return read_raw(path, labels=labels), (1.0, 1.0, 1.0)


def load_case(paths: Sequence, label_path=None, case_id: str | None = None,
              tags: Sequence[str] = MODALITY_TAGS) -> MultiModalCase:
    if case_id is None:
        case_id = Path(paths[0]).name.split(".")[0]
    vols = []
    for k, p in enumerate(paths):
        arr, spacing = read_volume(p)
        tag = tags[k] if k < len(tags) else f"M{k}"
        vols.append(ModalityVolume(arr, spacing, tag))
    labels = None
    if label_path is not None:
        arr, spacing = read_volume(label_path, labels=True)
        if arr.shape != vols[0].shape:
            raise ShapeMismatchError(f"{case_id}: label shape {arr.shape} != {vols[0].shape}")
        labels = LabelVolume.from_values(arr, spacing)
    return MultiModalCase(case_id, vols, labels)


@dataclass
class ManifestEntry:
    case_id: str
    modality_paths: list[str]
    label_path: str | None = None


def read_manifest(path) -> list[ManifestEntry]:
    """One case per line: case_id, 4 modality paths, optional label path.

    Relative paths resolve against the manifest's directory; blank lines and
    lines starting with '#' are skipped.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise VolumeIOError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (5, 6):
            raise VolumeIOError(f"{path}:{lineno}: expected 5 or 6 fields, got {len(parts)}")
        resolve = lambda p: str(p if os.path.isabs(p) else base / p)
        label = resolve(parts[5]) if len(parts) == 6 and parts[5] else None
        out.append(ManifestEntry(parts[0], [resolve(p) for p in parts[1:5]], label))
    return out


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    base = Path(path).parent
    rel = lambda p: os.path.relpath(p, base)
    with open(path, "w") as fh:
        for e in entries:
            fields = [e.case_id] + [rel(p) for p in e.modality_paths]
            if e.label_path:
                fields.append(rel(e.label_path))
            fh.write(",".join(fields) + "\n")


def load_manifest_cases(path) -> list[MultiModalCase]:
    return [load_case(e.modality_paths, e.label_path, e.case_id) for e in read_manifest(path)]


# --- preprocessing --------------------------------------------------------

def znormalize(vol: ModalityVolume, eps: float = 1e-8) -> ModalityVolume:
    """Zero-mean, unit (population) std over nonzero voxels; background stays 0."""
    data = np.asarray(vol.data, dtype=np.float64)
    mask = data != 0
    out = np.zeros_like(data)
    if mask.any():
        fg = data[mask]
        std = fg.std()
        if std >= eps:
            out[mask] = (fg - fg.mean()) / std
    dtype = vol.data.dtype if np.issubdtype(vol.data.dtype, np.floating) else np.float32
    return replace(vol, data=out.astype(dtype))


def foreground_bbox(case: MultiModalCase) -> tuple[slice, slice, slice]:
    mask = np.zeros(case.shape, dtype=bool)
    for v in case.modalities:
        mask |= v.data != 0
    if not mask.any():
        raise EmptyCaseError(f"{case.case_id}: every modality is zero")
    idx = np.nonzero(mask)
    return tuple(slice(int(a.min()), int(a.max()) + 1) for a in idx)


def _resample(arr: np.ndarray, target, order: int) -> np.ndarray:
    if arr.shape == tuple(target):
        return arr.copy()
    zoom = [t / s for t, s in zip(target, arr.shape)]
    out = ndimage.zoom(arr, zoom, order=order, mode="nearest", grid_mode=True)
    if out.shape != tuple(target):
        raise ShapeMismatchError(f"resample produced {out.shape}, wanted {tuple(target)}")
    return out


def crop_resize(case: MultiModalCase, target=(128, 128, 128)) -> MultiModalCase:
    """Crop to the joint nonzero bounding box, then resample to ``target``.

    Modalities use trilinear interpolation, labels nearest neighbour. Spacing
    is rescaled so physical extent of the cropped box is kept.
    """
    target = tuple(int(t) for t in target)
    box = foreground_bbox(case)
    cropped_shape = tuple(s.stop - s.start for s in box)
    spacing = tuple(sp * c / t for sp, c, t in zip(case.spacing, cropped_shape, target))
    mods = []
    for v in case.modalities:
        arr = _resample(np.asarray(v.data)[box].astype(np.float64), target, order=1)
        mods.append(ModalityVolume(arr.astype(v.data.dtype if np.issubdtype(v.data.dtype, np.floating)
                                              else np.float32), spacing, v.modality_tag))
    labels = None
    if case.labels is not None:
        cls = _resample(case.labels.classes[box], target, order=0)
        labels = LabelVolume(cls.astype(np.uint8), spacing)
    return MultiModalCase(case.case_id, mods, labels)


def preprocess_case(case: MultiModalCase, target=None) -> MultiModalCase:
    """z-normalize every modality, then optionally crop/resize."""
    case = MultiModalCase(case.case_id, [znormalize(v) for v in case.modalities], case.labels)
    if target is not None:
        case = crop_resize(case, target)
    return case


def split_dataset(case_ids: Sequence[str], ratio: float = 0.8, seed: int = 0):
    """Deterministic shuffled split; ``len(train) == floor(ratio * N)``."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DuplicateIdError(f"duplicate case ids: {dupes}")
    order = sorted(ids)
    random.Random(seed).shuffle(order)
    n_train = int(np.floor(ratio * len(order) + 1e-9))
    return order[:n_train], order[n_train:]
