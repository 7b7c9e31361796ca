"""Binary parameter checkpoints.

Layout (all little-endian)::

    magic "LASR" | version u16 | config record | tensor* (until EOF)

    config record: seq_len, embed_dim, qk_dim, segment_w, gsta_layers,
                   ffn_ratio, recent_k, heads, recency_buckets  (u32 each)
                   gamma f32 (0 = default scaling)
                   gate u8 (0 sigmoid, 1 softmax), fusion u8, recency u8,
                   encoder u8, hidden u32, n_items u32, n_topics u32
    tensor:        name_len u16 | name utf-8 | rank u8 | dims u32*rank | f32 payload

Float32 payloads are written verbatim, so a load returns bit-identical arrays.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"LASR"
VERSION = 1
HEADER = struct.Struct("<4sH")
CONFIG = struct.Struct("<9IfBBBBIII")
GATES = ("sigmoid", "softmax")
ENCODER_CODES = ("laser", "mean_pool", "din", "self_attention")
CONFIG_FIELDS = (
    "seq_len", "embed_dim", "qk_dim", "segment_w", "gsta_layers",
    "ffn_ratio", "recent_k", "heads", "recency_buckets",
)


class CheckpointError(ValueError):
    pass


def pack_config(rec: dict) -> bytes:
    missing = [k for k in CONFIG_FIELDS if k not in rec]
    if missing:
        raise CheckpointError(f"config record lacks {missing}")
    gamma = rec.get("gamma") or 0.0
    return CONFIG.pack(
        *(int(rec[k]) for k in CONFIG_FIELDS), float(gamma),
        GATES.index(rec.get("gate", "sigmoid")), int(bool(rec.get("fusion", True))),
        int(bool(rec.get("recency", True))), ENCODER_CODES.index(rec.get("encoder", "laser")),
        int(rec.get("hidden", 0)), int(rec.get("n_items", 0)), int(rec.get("n_topics", 0)),
    )


def unpack_config(buf: bytes) -> dict:
    vals = CONFIG.unpack(buf)
    rec = dict(zip(CONFIG_FIELDS, vals[:9]))
    gamma, gate, fusion, recency, enc, hidden, n_items, n_topics = vals[9:]
    if gate >= len(GATES) or enc >= len(ENCODER_CODES):
        raise CheckpointError(f"bad enum in config record (gate={gate}, encoder={enc})")
    rec.update(
        gamma=gamma or None, gate=GATES[gate], fusion=bool(fusion), recency=bool(recency),
        encoder=ENCODER_CODES[enc], hidden=hidden, n_items=n_items, n_topics=n_topics,
    )
    return rec


def dumps(rec: dict, params: dict) -> bytes:
    out = io.BytesIO()
    out.write(HEADER.pack(MAGIC, VERSION))
    out.write(pack_config(rec))
    for name, arr in params.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} is {arr.dtype}, expected float32")
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def loads(data: bytes):
    if len(data) < HEADER.size + CONFIG.size:
        raise CheckpointError("checkpoint truncated in header")
    magic, version = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = HEADER.size
    rec = unpack_config(data[pos : pos + CONFIG.size])
    pos += CONFIG.size
    params = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + n > len(data):
                raise CheckpointError(f"tensor {name!r} truncated")
            params[name] = np.frombuffer(data, "<f4", count=n // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += n
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed tensor record at byte {pos}: {exc}") from exc
    return rec, params


def save(path, rec, params):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(rec, params))
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def save_model(path, model):
    rec = {k: getattr(model, k) for k in CONFIG_FIELDS + ("gate", "fusion", "recency", "encoder", "hidden")}
    rec.update(n_items=model.n_items_, n_topics=model.n_topics_)
    save(path, rec, model.params_)


def load_model(path, **overrides):
    from .harness.model import LaserCTRClassifier

    rec, params = load(path)
    n_items, n_topics = rec.pop("n_items"), rec.pop("n_topics")
    rec.pop("gamma")
    model = LaserCTRClassifier(**rec, **overrides)
    model._init(n_items, n_topics)
    if set(params) != set(model.params_):
        missing = set(model.params_) ^ set(params)
        raise CheckpointError(f"checkpoint tensors do not match the model: {sorted(missing)}")
    for k, v in params.items():
        if v.shape != model.params_[k].shape:
            raise CheckpointError(f"tensor {k!r} has shape {v.shape}, expected {model.params_[k].shape}")
    model.params_ = params
    return model
