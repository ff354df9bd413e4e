"""Synthetic multi-modal cases whose modalities are affine images of one
shared latent volume, and a joint-histogram analyzer for modality pairs."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .pnm import write_pgm
from .volume_io import (LabelVolume, ManifestEntry, ModalityVolume, MultiModalCase,
                        MODALITY_TAGS, write_manifest, write_raw)

DEFAULT_COEFFS = ((2.0, 0.5), (1.5, 1.0), (2.5, 0.2), (1.8, 0.8))

# latent intensity per tumour sub-region, keyed by label value
REGION_LATENT = {2: 1.25, 1: 1.55, 4: 1.85}


@dataclass
class PhantomConfig:
    seed: int = 0
    shape: tuple[int, int, int] = (32, 32, 32)
    n_cases: int = 4
    noise_std: float = 0.05
    modality_coeffs: Sequence[tuple[float, float]] = DEFAULT_COEFFS
    n_regions: int = 3

    def __post_init__(self):
        if isinstance(self.shape, int):
            self.shape = (self.shape,) * 3
        self.shape = tuple(int(s) for s in self.shape)
        self.modality_coeffs = tuple((float(a), float(b)) for a, b in self.modality_coeffs)
        if self.n_cases < 1:
            raise ConfigError("n_cases must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if any(a == 0 for a, _ in self.modality_coeffs):
            raise ConfigError("modality scale coefficients must be nonzero")
        if not 0 <= self.n_regions <= 3:
            raise ConfigError("n_regions must be between 0 and 3")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"bad shape {self.shape}")


def smooth_field(shape, rng: np.random.Generator, n_terms: int = 5) -> np.ndarray:
    """Sum of random-frequency cosine products, rescaled to [0, 1]."""
    axes = [np.arange(s, dtype=np.float64) / s for s in shape]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    total = np.zeros(shape)
    for _ in range(n_terms):
        fz, fy, fx = rng.uniform(0.5, 2.5, size=3)
        pz, py, px = rng.uniform(0, 2 * np.pi, size=3)
        total += (np.cos(2 * np.pi * fz * z + pz) * np.cos(2 * np.pi * fy * y + py)
                  * np.cos(2 * np.pi * fx * x + px))
    lo, hi = total.min(), total.max()
    if hi - lo < 1e-12:
        return np.zeros(shape)
    return (total - lo) / (hi - lo)


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    """Voxel-centre membership; parts beyond the grid are simply clipped."""
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    r2 = sum(((g - c) / max(r, 1e-6)) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def phantom_latent(shape, rng: np.random.Generator, n_regions: int = 3):
    """Return (latent, label_values) for one case."""
    shape = tuple(shape)
    latent = smooth_field(shape, rng)
    labels = np.zeros(shape, dtype=np.uint8)
    if n_regions == 0:
        return latent, labels
    s = np.array(shape, dtype=np.float64)
    center = s / 2 + rng.uniform(-0.12, 0.12, size=3) * s
    outer = rng.uniform(0.18, 0.3, size=3) * s
    scales = [1.0, rng.uniform(0.55, 0.7), rng.uniform(0.3, 0.4)]
    # outer -> edema (2), middle -> necrotic (1), inner -> enhancing (4)
    for value, scale in list(zip((2, 1, 4), scales))[:n_regions]:
        mask = ellipsoid_mask(shape, center, outer * scale)
        labels[mask] = value
        latent[mask] = REGION_LATENT[value]
    return latent, labels


def generate_case(config: PhantomConfig, index: int) -> MultiModalCase:
    rng = np.random.default_rng(config.seed + index)
    latent, label_values = phantom_latent(config.shape, rng, config.n_regions)
    tags = list(MODALITY_TAGS) if len(config.modality_coeffs) == 4 else [
        f"P{k}" for k in range(len(config.modality_coeffs))]
    mods = []
    for tag, (a, b) in zip(tags, config.modality_coeffs):
        data = a * latent + b
        if config.noise_std > 0:
            data = data + rng.normal(0.0, config.noise_std, size=latent.shape)
        mods.append(ModalityVolume(data, modality_tag=tag))
    return MultiModalCase(f"phantom_{index:03d}", mods, LabelVolume.from_values(label_values))


def generate_phantom(config: PhantomConfig) -> list[MultiModalCase]:
    return [generate_case(config, k) for k in range(config.n_cases)]


def save_cases(cases: Sequence[MultiModalCase], out_dir, manifest_name: str = "manifest.txt") -> Path:
    """Write cases in the raw fixture format plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cases:
        paths = []
        for vol in case.modalities:
            p = out_dir / f"{case.case_id}_{vol.modality_tag}.mmsv"
            write_raw(p, vol.data)
            paths.append(str(p))
        label_path = None
        if case.labels is not None:
            label_path = str(out_dir / f"{case.case_id}_seg.mmsv")
            write_raw(label_path, case.labels.values, labels=True)
        entries.append(ManifestEntry(case.case_id, paths, label_path))
    manifest = out_dir / manifest_name
    write_manifest(manifest, entries)
    return manifest


# --- joint intensity analysis --------------------------------------------

@dataclass
class JointHistogram:
    counts: np.ndarray
    edges_a: np.ndarray
    edges_b: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def off_diagonal_fraction(self, band: int = 1) -> float:
        """Mass share of bins with |i - j| > band."""
        i, j = np.indices(self.counts.shape)
        total = self.counts.sum()
        if total == 0:
            return 0.0
        return float(self.counts[np.abs(i - j) > band].sum() / total)

    def to_image(self) -> np.ndarray:
        """Log-scaled 8-bit image; ``a`` on the horizontal axis, ``b`` increasing upward."""
        c = np.log1p(self.counts.astype(np.float64))
        peak = c.max()
        img = np.zeros_like(c) if peak == 0 else 255.0 * c / peak
        return np.round(img.T[::-1]).astype(np.uint8)

    def save(self, stem) -> None:
        write_pgm(f"{stem}.pgm", self.to_image())
        np.savetxt(f"{stem}.txt", self.counts, fmt="%d")


def _as_array(v):
    return v.data if isinstance(v, ModalityVolume) else np.asarray(v)


def foreground_pair(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes {a.shape} and {b.shape} differ")
    mask = (a != 0) | (b != 0)
    return a[mask].astype(np.float64), b[mask].astype(np.float64)


def _edges(x: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    if hi <= lo:
        lo, hi = lo - 0.5, lo + 0.5
    return np.linspace(lo, hi, bins + 1)


def joint_histogram(a, b, bins: int = 32) -> JointHistogram:
    """2D histogram of foreground (nonzero in either volume) intensity pairs,
    each axis spanning its own min..max in ``bins`` equal bins."""
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    xa, xb = foreground_pair(a, b)
    ea, eb = _edges(xa, bins), _edges(xb, bins)
    counts, _, _ = np.histogram2d(xa, xb, bins=[ea, eb])
    return JointHistogram(counts.astype(np.int64), ea, eb)


def pearson(a, b) -> float:
    xa, xb = foreground_pair(a, b)
    xa, xb = xa - xa.mean(), xb - xb.mean()
    denom = np.sqrt((xa * xa).sum() * (xb * xb).sum())
    return float((xa * xb).sum() / denom) if denom > 0 else 0.0
