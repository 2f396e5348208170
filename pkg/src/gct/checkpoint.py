"""Binary parameter checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header, then the raw little-endian parameter buffers back to back. The
header carries precision, model config, vocabulary and a per-parameter
index of (shape, offset), so a checkpoint is self-describing and
round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import Vocab
from .model import ModelConfig
from .tensor import Tensor

MAGIC = b"GCTCKPT1"
_DTYPE_CODE = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig, vocab: Vocab,
                    extra: dict | None = None) -> None:
    precision = cfg.dtype
    code = _DTYPE_CODE[precision]
    index = []
    offset = 0
    buffers = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data.astype(code, copy=False))
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        buffers.append(raw)
    header = {
        "format_version": 1,
        "precision": precision,
        "config": cfg.to_dict(),
        "vocab": vocab.events,
        "params": index,
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in buffers:
            fh.write(raw)


def load_checkpoint(path):
    """Returns (params, config, vocab, extra); params are trainable Tensors."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    body_start = len(MAGIC) + 8 + header_len
    header = json.loads(raw[len(MAGIC) + 8 : body_start].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    vocab = Vocab(header["vocab"])
    code = _DTYPE_CODE[header["precision"]]
    itemsize = np.dtype(code).itemsize
    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = body_start + entry["offset"]
        arr = np.frombuffer(raw, dtype=code, count=count, offset=start).reshape(shape)
        params[entry["name"]] = Tensor(arr.copy(), requires_grad=True)
    return params, cfg, vocab, header["extra"]
