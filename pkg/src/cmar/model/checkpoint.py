"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"CMARCKPT"
    4 bytes   format version (uint32)
    4 bytes   header length H (uint32)
    H bytes   UTF-8 JSON header: config, config_digest, tensors [[name, shape], ...], meta
    ...       float64 values of every tensor, in header order, row-major

Tensor order is the module's parameter registration order: tok_emb, pos_emb,
then blocks.{i}.* for each layer, lnf_w, lnf_b, w_head, b_head.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .network import RumourTransformer

MAGIC = b"CMARCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: RumourTransformer, path: str | Path, meta: dict | None = None) -> None:
    state = model.state_dict()
    header = {
        "config": model.cfg.to_dict(),
        "config_digest": model.cfg.digest(),
        "tensors": [[name, list(t.shape)] for name, t in state.items()],
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for t in state.values():
            fh.write(t.detach().numpy().astype("<f8").tobytes())


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(8) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, size = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(fh.read(size).decode("utf-8"))
    header["version"] = version
    return header


def load_checkpoint(path: str | Path) -> tuple[RumourTransformer, dict]:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        cfg = ModelConfig.from_dict(header["config"])
        if cfg.digest() != header["config_digest"]:
            raise CheckpointError("config digest mismatch")
        model = RumourTransformer(cfg)
        state = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError(f"truncated data for tensor {name}")
            state[name] = torch.from_numpy(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
        if fh.read(1):
            raise CheckpointError("trailing bytes after tensor data")
    model.load_state_dict(state)
    model.eval()
    return model, header
