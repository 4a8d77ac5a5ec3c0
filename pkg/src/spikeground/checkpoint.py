"""Model checkpoint format.

One binary file: an 8-byte magic, a uint32 format version, a dimension
record, then every parameter and buffer array in declaration order as
little-endian float64. A sidecar JSON manifest (same path + ".json")
carries the full model config and the name/shape/kind of each entry, so
the binary stays self-describing enough to validate on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .blocks import GroundingModel, ModelConfig
from .errors import ContractError, ParseError

MAGIC = b"SPKGRND1"
FORMAT_VERSION = 1


def _dims_record(cfg: ModelConfig) -> list[int]:
    return [
        cfg.feat_dim, cfg.c_model, cfg.e_inner, cfg.p_inner, cfg.n_state,
        cfg.d_attn, cfg.n_slots, cfg.n_layers, cfg.conv_width,
        cfg.max_video_len, cfg.max_query_len, cfg.lif.steps,
    ]


def save_checkpoint(model: GroundingModel, path) -> None:
    path = Path(path)
    entries = list(model.named_states())
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "entries": [
            {"name": name, "shape": list(np.shape(obj.data if is_p else obj)), "kind": "param" if is_p else "buffer"}
            for name, obj, is_p in entries
        ],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        dims = _dims_record(model.cfg)
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<I", len(entries)))
        for name, obj, is_p in entries:
            arr = np.asarray(obj.data if is_p else obj, dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path) -> GroundingModel:
    path = Path(path)
    manifest_path = Path(str(path) + ".json")
    if not manifest_path.exists():
        raise ParseError(f"missing checkpoint manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    cfg = ModelConfig.from_dict(manifest["config"])
    model = GroundingModel(cfg, seed=0)

    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ParseError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        (ndims,) = struct.unpack("<I", fh.read(4))
        dims = list(struct.unpack(f"<{ndims}I", fh.read(4 * ndims)))
        if dims != _dims_record(cfg):
            raise ParseError(f"{path}: dimension record disagrees with manifest config")
        (n_entries,) = struct.unpack("<I", fh.read(4))
        states = list(model.named_states())
        if n_entries != len(states) or n_entries != len(manifest["entries"]):
            raise ParseError(f"{path}: entry count mismatch")
        for (name, obj, is_p), meta in zip(states, manifest["entries"]):
            if meta["name"] != name:
                raise ParseError(f"{path}: entry order mismatch at {name!r} vs manifest {meta['name']!r}")
            (nd,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{nd}I", fh.read(4 * nd)) if nd else ()
            target = obj.data if is_p else obj
            if tuple(shape) != target.shape:
                raise ParseError(f"{path}: shape mismatch for {name}: {shape} vs {target.shape}")
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ParseError(f"{path}: truncated payload at {name}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
            target[...] = arr
        if fh.read(1):
            raise ParseError(f"{path}: trailing bytes after last entry")
    return model
