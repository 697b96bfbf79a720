"""ASMC checkpoint files.

Layout, little-endian::

    b"ASMC" | u8 version | u32 n_tensors
    n_tensors x ( u32 key | u8 ndim | ndim x u32 dim | f32 payload )
    u32 n_bytes | UTF-8 JSON echo block (config, metadata, tensor names)

Keys are stable integers: model parameters take ``0..P-1`` in state-dict order
and Adam moments are offset by ``EXP_AVG``, ``EXP_AVG_SQ`` and ``STEP``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ASMC"
VERSION = 1
EXP_AVG, EXP_AVG_SQ, STEP = 100_000, 200_000, 300_000


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict  # int key -> float32 ndarray
    echo: dict = field(default_factory=dict)

    def to_bytes(self):
        parts = [MAGIC, struct.pack("<BI", VERSION, len(self.tensors))]
        for key in sorted(self.tensors):
            arr = np.asarray(self.tensors[key], dtype="<f4", order="C")
            parts.append(struct.pack("<IB", key, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        blob = json.dumps(self.echo, sort_keys=True, separators=(",", ":")).encode()
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw):
        if raw[:4] != MAGIC:
            raise CheckpointFormatError(f"bad magic {raw[:4]!r}")
        pos = 4
        try:
            version, n = struct.unpack_from("<BI", raw, pos)
            pos += 5
            if version != VERSION:
                raise CheckpointFormatError(f"unsupported version {version}")
            tensors = {}
            for _ in range(n):
                key, ndim = struct.unpack_from("<IB", raw, pos)
                pos += 5
                shape = struct.unpack_from(f"<{ndim}I", raw, pos)
                pos += 4 * ndim
                count = int(np.prod(shape, dtype=np.int64))
                if pos + 4 * count > len(raw):
                    raise CheckpointFormatError("truncated tensor payload")
                tensors[key] = np.frombuffer(raw, "<f4", count, pos).reshape(shape).copy()
                pos += 4 * count
            (n_bytes,) = struct.unpack_from("<I", raw, pos)
            pos += 4
        except struct.error as exc:
            raise CheckpointFormatError(f"truncated checkpoint: {exc}") from None
        if pos + n_bytes != len(raw):
            raise CheckpointFormatError("echo block length does not match file size")
        echo = json.loads(raw[pos:pos + n_bytes].decode())
        return cls(tensors, echo)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def pack(model, optimizer=None, config=None, meta=None):
    """Snapshot a model (and optionally its Adam state) into a Checkpoint."""
    state = model.state_dict()
    names = list(state)
    tensors = {i: state[name].detach().cpu().float().numpy() for i, name in enumerate(names)}
    if optimizer is not None:
        pname = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            i = names.index(pname[id(p)])
            if "exp_avg" in st:
                tensors[EXP_AVG + i] = st["exp_avg"].detach().cpu().float().numpy()
                tensors[EXP_AVG_SQ + i] = st["exp_avg_sq"].detach().cpu().float().numpy()
                tensors[STEP + i] = np.asarray(float(st["step"]), dtype=np.float32).reshape(1)
    echo = {"names": names, "config": config or {}, "meta": meta or {}}
    return Checkpoint(tensors, echo)


def unpack(ckpt, model, optimizer=None):
    names = ckpt.echo["names"]
    state = model.state_dict()
    if list(state) != names:
        raise CheckpointFormatError("checkpoint parameter table does not match the model")
    new_state = {n: torch.from_numpy(ckpt.tensors[i]).to(state[n].dtype)
                 for i, n in enumerate(names)}
    model.load_state_dict(new_state)
    if optimizer is not None:
        by_name = dict(model.named_parameters())
        for i, n in enumerate(names):
            if EXP_AVG + i not in ckpt.tensors or n not in by_name:
                continue
            p = by_name[n]
            optimizer.state[p] = {
                "step": torch.tensor(float(ckpt.tensors[STEP + i][0])),
                "exp_avg": torch.from_numpy(ckpt.tensors[EXP_AVG + i]).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(ckpt.tensors[EXP_AVG_SQ + i]).to(p.dtype),
            }
    return ckpt.echo.get("meta", {})
