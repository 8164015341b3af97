"""Versioned binary parameter containers.

Layout (little-endian)::

    magic        8 bytes  b"HRLCKPT\\x00"
    version      uint32
    config_len   uint32, then that many bytes of UTF-8 JSON
    n_records    uint32
    per record:  uint16 name length, name bytes, uint8 ndim, ndim x uint32 dims,
                 float32 data (C order)

The JSON block records the kind of object stored (``backbone`` or ``model``),
its configuration and, for models, the variant and whether the backbone went
through stage-1 training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backbone import Backbone3D, BackboneConfig
from .fusion import HrlModel, ModelConfig
from .volume_io import FormatError

MAGIC = b"HRLCKPT\x00"
VERSION = 1


def _pack(kind: str, config: dict, state: dict[str, np.ndarray], extra: dict | None = None) -> bytes:
    block = json.dumps({"kind": kind, "config": config, **(extra or {})}, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(block)), block, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def _unpack(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:8] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:8]!r}")
    try:
        version, n = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(buf[pos : pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + ln].decode()
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise FormatError(f"record {name!r} runs past end of file")
            state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(buf):
        raise FormatError("trailing bytes after last record")
    return header, state


def model_config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["input_shape"] = list(config.input_shape)
    d["backbone"]["blocks_per_stage"] = list(config.backbone.blocks_per_stage)
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["backbone"] = BackboneConfig(**d["backbone"])
    return ModelConfig(**d)


def save_model(path, model: HrlModel, meta: dict | None = None) -> None:
    extra = {"backbone_pretrained": bool(model.backbone_pretrained), "variant": model.config.variant,
             "meta": meta or {}}
    Path(path).write_bytes(_pack("model", model_config_to_dict(model.config), model.state_dict(), extra))


def load_model(path) -> tuple[HrlModel, dict]:
    header, state = _unpack(Path(path).read_bytes())
    if header.get("kind") != "model":
        raise FormatError(f"expected a model checkpoint, found {header.get('kind')!r}")
    model = HrlModel(model_config_from_dict(header["config"]))
    model.load_state_dict(state)
    model.backbone_pretrained = bool(header.get("backbone_pretrained", False))
    model.eval()
    return model, header.get("meta", {})


def save_backbone(path, backbone: Backbone3D) -> None:
    cfg = asdict(backbone.config)
    cfg["blocks_per_stage"] = list(backbone.config.blocks_per_stage)
    Path(path).write_bytes(_pack("backbone", cfg, backbone.state_dict()))


def load_backbone(path) -> Backbone3D:
    header, state = _unpack(Path(path).read_bytes())
    if header.get("kind") != "backbone":
        raise FormatError(f"expected a backbone checkpoint, found {header.get('kind')!r}")
    backbone = Backbone3D(BackboneConfig(**header["config"]))
    backbone.load_state_dict(state)
    backbone.eval()
    return backbone
