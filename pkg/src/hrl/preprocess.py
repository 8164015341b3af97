"""Intensity preprocessing, affine augmentation, ROI statistics and masking."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

TISSUES = ("gm", "wm", "csf")
TISSUE_CODES = {"gm": 1, "wm": 2, "csf": 3}

# foreground percentiles used as landmarks: 1st, deciles, 99th
LANDMARK_PERCENTILES = np.array([1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99], dtype=float)
DEFAULT_TARGET_LANDMARKS = np.linspace(0.0, 100.0, len(LANDMARK_PERCENTILES))


@dataclass
class Atlas:
    roi_labels: np.ndarray
    tissue_labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.roi_labels = np.asarray(self.roi_labels, dtype=np.uint16)
        self.tissue_labels = np.asarray(self.tissue_labels, dtype=np.uint16)
        if self.roi_labels.shape != self.tissue_labels.shape or self.roi_labels.ndim != 3:
            raise ValueError(f"roi/tissue planes differ: {self.roi_labels.shape} vs {self.tissue_labels.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.roi_labels.shape

    @property
    def roi_ids(self) -> np.ndarray:
        ids = np.unique(self.roi_labels)
        return ids[ids > 0]

    @property
    def roi_count(self) -> int:
        return len(self.roi_ids)


# ----------------------------------------------------------------------
# intensity


def foreground_landmarks(volume: np.ndarray, percentiles=LANDMARK_PERCENTILES) -> np.ndarray:
    """Percentiles of voxels brighter than the volume mean."""
    v = np.asarray(volume, dtype=np.float64)
    fg = v[v > v.mean()]
    if fg.size == 0:
        fg = v.reshape(-1)
    return np.percentile(fg, percentiles)


def histogram_standardize(volume: np.ndarray, source, target) -> np.ndarray:
    """Piecewise-linear intensity map sending ``source[i]`` to ``target[i]``.

    Values beyond the first/last landmark follow the end segments.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 1 or src.size < 2:
        raise ValueError("landmark tables must be 1-d, equal length, and have >= 2 entries")
    if np.any(np.diff(src) <= 0) or np.any(np.diff(tgt) <= 0):
        raise ValueError("landmarks must be strictly increasing in source and target")
    v = np.asarray(volume, dtype=np.float64)
    out = np.interp(v, src, tgt)
    lo, hi = v < src[0], v > src[-1]
    if lo.any():
        slope = (tgt[1] - tgt[0]) / (src[1] - src[0])
        out[lo] = tgt[0] + (v[lo] - src[0]) * slope
    if hi.any():
        slope = (tgt[-1] - tgt[-2]) / (src[-1] - src[-2])
        out[hi] = tgt[-1] + (v[hi] - src[-1]) * slope
    return out


def standardize_to_reference(volume: np.ndarray, target=DEFAULT_TARGET_LANDMARKS) -> np.ndarray:
    """Histogram standardization with landmarks measured on the volume itself."""
    src = foreground_landmarks(volume)
    # ties (e.g. flat volumes) would break monotonicity; spread them minimally
    src = src + np.arange(src.size) * 1e-9
    return histogram_standardize(volume, src, target)


def normalize_rescale(volume: np.ndarray) -> np.ndarray:
    """Zero-mean/unit-variance normalization, then min-max rescale to [0, 1].

    A constant volume maps to 0.5 everywhere.
    """
    v = np.asarray(volume, dtype=np.float64)
    std = v.std()
    if std == 0.0:
        return np.full(v.shape, 0.5)
    z = (v - v.mean()) / std
    lo, hi = z.min(), z.max()
    if hi == lo:
        return np.full(v.shape, 0.5)
    return (z - lo) / (hi - lo)


def preprocess_volume(volume: np.ndarray) -> np.ndarray:
    """The network input pipeline: histogram standardization, normalization, rescale."""
    return normalize_rescale(standardize_to_reference(volume)).astype(np.float32)


# ----------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AffineRanges:
    rotation_degrees: float = 10.0
    scale: float = 0.1
    translation: float = 2.0

    def __post_init__(self):
        if min(self.rotation_degrees, self.scale, self.translation) < 0:
            raise ValueError("affine ranges must be non-negative")

    @property
    def is_identity(self) -> bool:
        return self.rotation_degrees == 0 and self.scale == 0 and self.translation == 0


def _rotation(angles_rad) -> np.ndarray:
    a, b, c = angles_rad
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_affine(ranges: AffineRanges, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (matrix, translation) uniformly within the ranges."""
    angles = np.deg2rad(rng.uniform(-ranges.rotation_degrees, ranges.rotation_degrees, size=3))
    scales = rng.uniform(1 - ranges.scale, 1 + ranges.scale, size=3)
    shift = rng.uniform(-ranges.translation, ranges.translation, size=3)
    return _rotation(angles) @ np.diag(scales), shift


def affine_resample(volume: np.ndarray, matrix: np.ndarray, translation) -> np.ndarray:
    """Apply ``y = M (x - c) + c + t`` about the volume centre with trilinear
    interpolation and zero fill outside the domain."""
    v = np.asarray(volume)
    centre = (np.array(v.shape) - 1) / 2.0
    inv = np.linalg.inv(matrix)
    # scipy maps output coords o to input coords inv @ o + offset
    offset = centre - inv @ (centre + np.asarray(translation, dtype=float))
    return ndimage.affine_transform(v, inv, offset=offset, order=1, mode="constant", cval=0.0)


def random_affine(volume: np.ndarray, ranges: AffineRanges, seed: int) -> np.ndarray:
    if ranges.is_identity:
        return np.array(volume, copy=True)
    matrix, shift = sample_affine(ranges, np.random.default_rng(seed))
    return affine_resample(volume, matrix, shift).astype(np.asarray(volume).dtype)


# ----------------------------------------------------------------------
# handcrafted features


def feature_names(roi_ids) -> list[str]:
    """Slot names: three tissue-mean blocks, then volume and surface blocks."""
    names = [f"roi{r}.{t}.mean" for t in TISSUES for r in roi_ids]
    names += [f"roi{r}.volume" for r in roi_ids]
    names += [f"roi{r}.surface" for r in roi_ids]
    return names


def _boundary_count(mask: np.ndarray) -> int:
    """Voxels of ``mask`` with at least one 6-neighbour outside it."""
    if not mask.any():
        return 0
    padded = np.pad(mask, 1)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(3, 1))
    return int(mask.sum() - interior[1:-1, 1:-1, 1:-1].sum())


def roi_statistics(volume: np.ndarray, atlas: Atlas, presence_threshold: float = 0.1,
                   warn: bool = True) -> np.ndarray:
    """Per-ROI tissue means plus volume and surface proxies (length 5R).

    Volume counts ROI voxels brighter than ``presence_threshold``; surface counts
    those with a 6-neighbour that is not. Empty ROI/tissue intersections give 0.
    """
    v = np.asarray(volume, dtype=np.float64)
    if v.shape != atlas.shape:
        raise ValueError(f"volume extents {v.shape} do not match atlas {atlas.shape}")
    ids = atlas.roi_ids
    n = len(ids)
    out = np.zeros(5 * n)
    roi = atlas.roi_labels
    tissue = atlas.tissue_labels
    flat_roi = roi.reshape(-1)
    flat_tissue = tissue.reshape(-1)
    flat_v = v.reshape(-1)
    empty = []
    for ti, name in enumerate(TISSUES):
        sel = flat_tissue == TISSUE_CODES[name]
        sums = np.bincount(flat_roi[sel], weights=flat_v[sel], minlength=int(ids.max()) + 1)
        counts = np.bincount(flat_roi[sel], minlength=int(ids.max()) + 1)
        for j, r in enumerate(ids):
            if counts[r]:
                out[ti * n + j] = sums[r] / counts[r]
            else:
                empty.append(f"{r}/{name}")
    if empty and warn:
        logger.warning("empty ROI/tissue intersections, means set to 0: %s", ", ".join(empty))
    present = v > presence_threshold
    for j, r in enumerate(ids):
        mask = (roi == r) & present
        out[3 * n + j] = mask.sum()
        out[4 * n + j] = _boundary_count(mask)
    return out


def apply_roi_mask(volume: np.ndarray, atlas: Atlas, keep) -> np.ndarray:
    """Zero every voxel whose ROI label is not in ``keep``."""
    keep = {int(k) for k in keep}
    if not keep:
        raise ValueError("keep set must be non-empty")
    unknown = keep - set(int(r) for r in atlas.roi_ids)
    if unknown:
        raise ValueError(f"unknown ROI ids {sorted(unknown)}")
    v = np.asarray(volume)
    return np.where(np.isin(atlas.roi_labels, sorted(keep)), v, np.zeros((), dtype=v.dtype))
