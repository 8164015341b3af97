"""Binary containers for volumes and atlases, and feature CSV export.

Layout (all little-endian)::

    magic      8 bytes   b"HRLVOL\\x00\\x00" or b"HRLATL\\x00\\x00"
    version    uint32
    extents    3 x uint32
    spacing    3 x float32
    payload    float32 voxels (volume) | uint16 roi plane + uint16 tissue plane (atlas)
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .preprocess import Atlas

VOLUME_MAGIC = b"HRLVOL\x00\x00"
ATLAS_MAGIC = b"HRLATL\x00\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI3I3f")


class FormatError(ValueError):
    pass


def _write(path, magic: bytes, shape, spacing, payloads: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, *shape, *spacing))
        for arr in payloads:
            fh.write(np.ascontiguousarray(arr).tobytes(order="C"))


def _read_header(buf: bytes, magic: bytes):
    if len(buf) < _HEADER.size:
        raise FormatError("file too short for header")
    got, version, d, h, w, sx, sy, sz = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    return (d, h, w), (sx, sy, sz)


def save_volume(path, volume: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> None:
    v = np.asarray(volume)
    if v.ndim != 3:
        raise ValueError(f"volume must be 3-d, got shape {v.shape}")
    _write(path, VOLUME_MAGIC, v.shape, spacing, [v.astype("<f4")])


def load_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    buf = Path(path).read_bytes()
    shape, spacing = _read_header(buf, VOLUME_MAGIC)
    n = int(np.prod(shape))
    if len(buf) != _HEADER.size + 4 * n:
        raise FormatError("payload length does not match extents")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size)
    return data.reshape(shape).astype(np.float32), spacing


def save_atlas(path, atlas: Atlas) -> None:
    _write(path, ATLAS_MAGIC, atlas.shape, atlas.spacing,
           [atlas.roi_labels.astype("<u2"), atlas.tissue_labels.astype("<u2")])


def load_atlas(path) -> Atlas:
    buf = Path(path).read_bytes()
    shape, spacing = _read_header(buf, ATLAS_MAGIC)
    n = int(np.prod(shape))
    if len(buf) != _HEADER.size + 4 * n:
        raise FormatError("payload length does not match extents")
    roi = np.frombuffer(buf, dtype="<u2", count=n, offset=_HEADER.size).reshape(shape)
    tissue = np.frombuffer(buf, dtype="<u2", count=n, offset=_HEADER.size + 2 * n).reshape(shape)
    return Atlas(roi.copy(), tissue.copy(), spacing)


def write_feature_csv(path, ids: Sequence[str], names: Sequence[str], rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *names])
        for sid, row in zip(ids, rows):
            writer.writerow([sid, *(repr(float(x)) for x in row)])


def read_feature_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ids, rows = [], []
        for rec in reader:
            ids.append(rec[0])
            rows.append([float(x) for x in rec[1:]])
    return ids, header[1:], np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
