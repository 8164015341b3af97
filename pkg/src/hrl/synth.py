"""Seeded synthetic atlases and labelled subject volumes.

Class information can be carried by two kinds of effect:

* ROI-level changes (intensity shift, atrophy) that move the handcrafted
  ROI statistics, and
* a sinusoidal texture on GM/WM, centred within every ROI/tissue cell, which
  leaves the ROI statistics unchanged and is only visible to a model looking
  at the image itself.

ROI id 0 in ``shift_rois`` means the background; listing 0 together with every
ROI shifts the whole volume, which the network input normalization removes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .preprocess import TISSUE_CODES, Atlas, feature_names, roi_statistics
from .volume_io import load_atlas, load_volume, read_feature_csv, save_atlas, save_volume, write_feature_csv


@dataclass
class ClassEffect:
    intensity_shift: float = 0.0
    shift_rois: tuple[int, ...] = ()
    texture_frequency: float = 0.0
    texture_amplitude: float = 0.0
    atrophy_fraction: float = 0.0
    atrophy_rois: tuple[int, ...] = ()

    def __post_init__(self):
        self.shift_rois = tuple(int(r) for r in self.shift_rois)
        self.atrophy_rois = tuple(int(r) for r in self.atrophy_rois)
        if self.texture_frequency < 0 or self.texture_amplitude < 0:
            raise ValueError("texture frequency/amplitude must be non-negative")
        if not 0.0 <= self.atrophy_fraction < 1.0:
            raise ValueError("atrophy_fraction must lie in [0, 1)")


@dataclass
class PhantomConfig:
    extents: tuple[int, int, int] = (24, 28, 24)
    roi_count: int = 16
    effects: list[ClassEffect] = field(default_factory=lambda: [ClassEffect(), ClassEffect(0.1, (1, 2, 3, 4))])
    subjects_per_class: int | list[int] = 100
    noise_std: float = 0.03
    roi_jitter: float = 0.0
    site_bias: float = 0.0
    # each subject shows only one effect group (ROI-level or texture), chosen at random
    split_expression: bool = False
    # fixes the atlas independently of the subject seed, e.g. for transfer pairs
    atlas_seed: int | None = None
    tissue_intensity: dict[str, float] = field(default_factory=lambda: {"gm": 0.55, "wm": 0.85, "csf": 0.25})

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.effects = [e if isinstance(e, ClassEffect) else ClassEffect(**e) for e in self.effects]
        if len(self.effects) < 2:
            raise ValueError("need effects for at least 2 classes")
        if self.noise_std < 0 or self.roi_jitter < 0:
            raise ValueError("noise levels must be non-negative")
        if isinstance(self.subjects_per_class, int):
            self.subjects_per_class = [self.subjects_per_class] * len(self.effects)
        self.subjects_per_class = [int(n) for n in self.subjects_per_class]
        if len(self.subjects_per_class) != len(self.effects):
            raise ValueError("subjects_per_class must list one count per class")

    @property
    def class_count(self) -> int:
        return len(self.effects)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Subject:
    id: str
    volume: np.ndarray
    features: np.ndarray
    label: int
    site: int = 0
    source_id: str | None = None

    @property
    def origin(self) -> str:
        """Id of the original subject (augmented copies point at their source)."""
        return self.source_id or self.id


@dataclass
class Dataset:
    subjects: list[Subject]
    atlas: Atlas
    feature_names: list[str]
    class_count: int

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.subjects], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.subjects[i] for i in indices], self.atlas, self.feature_names, self.class_count)

    def label_histogram(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.class_count).tolist()


# ----------------------------------------------------------------------
# atlas


def foreground_mask(extents) -> np.ndarray:
    """Ellipsoid filling about 90% of each axis."""
    grids = np.meshgrid(*[np.arange(n) for n in extents], indexing="ij")
    r = sum(((g - (n - 1) / 2) / (0.45 * n)) ** 2 for g, n in zip(grids, extents))
    return r <= 1.0


def roi_depth(roi_labels: np.ndarray) -> np.ndarray:
    """Euclidean distance of each ROI voxel to the nearest voxel outside its ROI."""
    depth = np.zeros(roi_labels.shape)
    for r in np.unique(roi_labels):
        if r == 0:
            continue
        mask = np.pad(roi_labels == r, 1)
        depth[roi_labels == r] = ndimage.distance_transform_edt(mask)[1:-1, 1:-1, 1:-1][roi_labels == r]
    return depth


def generate_atlas(extents, roi_count: int, seed: int) -> Atlas:
    """Voronoi ROIs inside an ellipsoid, each shelled into CSF / GM / WM."""
    extents = tuple(int(e) for e in extents)
    if roi_count < 2:
        raise ValueError("need at least 2 ROIs")
    if min(extents) < 8:
        raise ValueError(f"extents must be >= 8 per axis, got {extents}")
    fg = foreground_mask(extents)
    coords = np.argwhere(fg)
    if roi_count > len(coords):
        raise ValueError(f"{roi_count} ROIs exceed the {len(coords)} foreground voxels")
    rng = np.random.default_rng(seed)
    sites = coords[rng.choice(len(coords), roi_count, replace=False)]
    d2 = ((coords[:, None, :] - sites[None, :, :]) ** 2).sum(axis=-1)
    roi = np.zeros(extents, dtype=np.uint16)
    roi[tuple(coords.T)] = d2.argmin(axis=1) + 1

    depth = roi_depth(roi)
    tissue = np.zeros(extents, dtype=np.uint16)
    tissue[fg & (depth < 1.5)] = TISSUE_CODES["csf"]
    tissue[fg & (depth >= 1.5) & (depth < 2.5)] = TISSUE_CODES["gm"]
    tissue[fg & (depth >= 2.5)] = TISSUE_CODES["wm"]
    return Atlas(roi, tissue)


# ----------------------------------------------------------------------
# subjects

_TEXTURE_DIRECTION = np.array([1.0, 2.0, 1.0]) / np.sqrt(6.0)


def _atrophy_mask(atlas: Atlas, depth: np.ndarray, rois, fraction: float, rng) -> np.ndarray:
    """Outermost ``fraction`` of each listed ROI (by depth, random tie-break)."""
    out = np.zeros(atlas.shape, dtype=bool)
    if fraction <= 0:
        return out
    for r in rois:
        idx = np.flatnonzero(atlas.roi_labels.reshape(-1) == r)
        n_remove = int(round(fraction * len(idx)))
        if n_remove == 0:
            continue
        keys = depth.reshape(-1)[idx] + rng.uniform(0, 1e-3, size=len(idx))
        out.reshape(-1)[idx[np.argsort(keys, kind="stable")[:n_remove]]] = True
    return out


def _cell_centered(wave: np.ndarray, cells: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``wave[mask]`` minus its mean within each cell, so cell means are unchanged."""
    ids = cells[mask].astype(np.int64)
    sums = np.bincount(ids, weights=wave[mask])
    counts = np.maximum(np.bincount(ids), 1)
    return wave[mask] - (sums / counts)[ids]


def generate_subject(atlas: Atlas, label: int, config: PhantomConfig, seed: int, site: int = 0,
                     depth: np.ndarray | None = None) -> np.ndarray:
    """Raw (unnormalized) float32 volume for one subject of class ``label``."""
    if not 0 <= label < config.class_count:
        raise ValueError(f"label {label} outside [0, {config.class_count})")
    rng = np.random.default_rng(seed)
    effect = config.effects[label]
    if depth is None:
        depth = roi_depth(atlas.roi_labels)
    roi, tissue = atlas.roi_labels, atlas.tissue_labels
    fg = roi > 0

    # draws happen in a fixed order whatever the config, so effects never reshuffle noise
    jitter = rng.normal(0.0, 1.0, size=int(roi.max()) + 1)
    phase = rng.uniform(0, 2 * np.pi)
    roi_group = rng.random() < 0.5
    tie_rng = np.random.default_rng(rng.integers(2**32))
    noise = rng.normal(0.0, 1.0, size=atlas.shape)

    show_roi = show_texture = True
    if config.split_expression:
        show_roi, show_texture = roi_group, not roi_group

    v = np.zeros(atlas.shape)
    for name, code in TISSUE_CODES.items():
        v[tissue == code] = config.tissue_intensity[name]
    jitter[0] = 0.0
    v[fg] += config.roi_jitter * jitter[roi[fg]]

    removed = np.zeros(atlas.shape, dtype=bool)
    if show_roi:
        removed = _atrophy_mask(atlas, depth, effect.atrophy_rois, effect.atrophy_fraction, tie_rng)
        v[removed] = 0.0
        if effect.intensity_shift and effect.shift_rois:
            v[np.isin(roi, effect.shift_rois)] += effect.intensity_shift

    if show_texture and effect.texture_amplitude > 0 and effect.texture_frequency > 0:
        grids = np.indices(atlas.shape).astype(float)
        proj = np.tensordot(_TEXTURE_DIRECTION, grids, axes=1)
        wave = effect.texture_amplitude * np.sin(2 * np.pi * effect.texture_frequency * proj + phase)
        tex = fg & ~removed & (tissue != TISSUE_CODES["csf"])
        v[tex] += _cell_centered(wave, roi * 4 + tissue, tex)

    if site == 1:
        v += config.site_bias
    v += config.noise_std * noise
    return v.astype(np.float32)


def generate_dataset(config: PhantomConfig, seed: int) -> Dataset:
    atlas = generate_atlas(config.extents, config.roi_count, seed if config.atlas_seed is None else config.atlas_seed)
    depth = roi_depth(atlas.roi_labels)
    seeds = np.random.SeedSequence(seed).spawn(sum(config.subjects_per_class))
    subjects = []
    i = 0
    for label, count in enumerate(config.subjects_per_class):
        for _ in range(count):
            site = i % 2
            sub_seed = int(seeds[i].generate_state(1)[0])
            vol = generate_subject(atlas, label, config, sub_seed, site, depth)
            subjects.append(Subject(f"s{i:04d}", vol, roi_statistics(vol, atlas, warn=i == 0), label, site))
            i += 1
    return Dataset(subjects, atlas, feature_names(atlas.roi_ids), config.class_count)


# ----------------------------------------------------------------------
# on-disk layout: manifest.csv, atlas.hatl, features.csv, volumes/<id>.hvol

MANIFEST = "manifest.csv"
ATLAS_FILE = "atlas.hatl"
FEATURE_FILE = "features.csv"
META_FILE = "dataset.json"


def save_dataset(dataset: Dataset, out_dir, config: PhantomConfig | None = None) -> Path:
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    save_atlas(out / ATLAS_FILE, dataset.atlas)
    write_feature_csv(out / FEATURE_FILE, dataset.ids, dataset.feature_names,
                      np.stack([s.features for s in dataset.subjects]))
    with open(out / MANIFEST, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class", "site", "volume", "features"])
        for s in dataset.subjects:
            rel = f"volumes/{s.id}.hvol"
            save_volume(out / rel, s.volume)
            writer.writerow([s.id, s.label, s.site, rel, FEATURE_FILE])
    meta = {"class_count": dataset.class_count}
    if config is not None:
        meta["generator"] = config.to_dict()
    (out / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / MANIFEST).exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    atlas = load_atlas(root / ATLAS_FILE)
    feature_cache: dict[str, tuple[list[str], list[str], np.ndarray]] = {}
    subjects = []
    names: list[str] = []
    with open(root / MANIFEST, newline="") as fh:
        for row in csv.DictReader(fh):
            fpath = row["features"]
            if fpath not in feature_cache:
                feature_cache[fpath] = read_feature_csv(root / fpath)
            ids, names, table = feature_cache[fpath]
            vol, _ = load_volume(root / row["volume"])
            subjects.append(Subject(row["id"], vol, table[ids.index(row["id"])], int(row["class"]), int(row["site"])))
    meta_path = root / META_FILE
    if meta_path.exists():
        k = int(json.loads(meta_path.read_text())["class_count"])
    else:
        k = int(max(s.label for s in subjects)) + 1
    return Dataset(subjects, atlas, names, k)
