"""Export backbone activations as 8-bit grayscale slices (binary PGM).

Each channel is min-max scaled over its whole 3-d activation volume, so the
three views of one channel share a scale. A constant channel has no range
and is written as uniform mid gray (128).

Views take the middle index ``(n - 1) // 2`` of one axis of the [l, w, h]
map: sagittal fixes axis 0, coronal axis 1, axial axis 2.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .fusion import HrlModel
from .tensor import Tensor, no_grad

VIEWS = ("sagittal", "coronal", "axial")
STAGES = (1, 2, 3, 4)
CONSTANT_GRAY = 128


def stage_activations(model: HrlModel, volume: np.ndarray, stage: int) -> np.ndarray:
    """Eval-mode activations [C, l, w, h] after residual stage ``stage`` (1-4)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage}; expected one of {STAGES}")
    model.backbone.eval()
    x = np.asarray(volume, dtype=model.dtype)[None, None]
    with no_grad():
        return model.backbone.forward_stages(Tensor(x))[stage - 1].data[0]


def quantize(channel: np.ndarray) -> np.ndarray:
    lo, hi = float(channel.min()), float(channel.max())
    if hi == lo:
        return np.full(channel.shape, CONSTANT_GRAY, dtype=np.uint8)
    return np.rint(255.0 * (channel - lo) / (hi - lo)).astype(np.uint8)


def mid_slice(volume: np.ndarray, view: str) -> np.ndarray:
    axis = VIEWS.index(view)
    return np.take(volume, (volume.shape[axis] - 1) // 2, axis=axis)


def write_pgm(path, image: np.ndarray) -> Path:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError(f"PGM images are 2-d, got {image.shape}")
    rows, cols = image.shape
    path = Path(path)
    path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + image.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    cols, rows = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=rows * cols).reshape(rows, cols)


def export_stage_maps(model: HrlModel, volume: np.ndarray, stage: int, out_dir) -> list[Path]:
    """One PGM per channel per view; returns the written paths."""
    acts = stage_activations(model, volume, stage)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, channel in enumerate(acts):
        q = quantize(channel)
        for view in VIEWS:
            paths.append(write_pgm(out / f"stage{stage}_ch{c:03d}_{view}.pgm", mid_slice(q, view)))
    return paths
