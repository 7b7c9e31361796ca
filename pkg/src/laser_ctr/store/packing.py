"""Schema-aware column packing of one user's events, plus the text baseline.

Block layout (little endian)::

    user_id u64 | event_count u32 | payload_len u32 | crc32(payload) u32 | payload

The payload stores one column per field, in schema order. Nullable columns
start with a presence bitmap and then hold only the present values.

    u64_id         unsigned LEB128 varints
    i64_timestamp  zigzag varint of the newest value, then varint gaps
                   (previous - current, never negative for newest-first data)
    u32_enum       one width byte (1, 2 or 4) followed by fixed-width values
    u16            fixed 2 bytes
    f32            fixed 4 bytes
    f32_vec        dim * 4 bytes
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

BLOCK_HEADER = struct.Struct("<QIII")


class CorruptBlock(ValueError):
    pass


def encode_varint(n: int, out: bytearray) -> None:
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return


def decode_varint(buf, pos: int) -> tuple[int, int]:
    n = shift = 0
    while True:
        if pos >= len(buf):
            raise CorruptBlock("truncated varint")
        b = buf[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, pos
        shift += 7
        if shift > 70:
            raise CorruptBlock("varint too long")


def zigzag(n: int) -> int:
    return (n << 1) ^ (n >> 63)


def unzigzag(n: int) -> int:
    return (n >> 1) ^ -(n & 1)


_ENUM_FMT = {1: "B", 2: "H", 4: "I"}


def _pack_column(kind, dim, values, out):
    if kind == "u64_id":
        for v in values:
            encode_varint(v, out)
    elif kind == "i64_timestamp":
        prev = None
        for v in values:
            if prev is None:
                encode_varint(zigzag(v), out)
            else:
                encode_varint(prev - v, out)
            prev = v
    elif kind == "u32_enum":
        top = max(values, default=0)
        width = 1 if top < 256 else 2 if top < 65536 else 4
        out.append(width)
        out += struct.pack(f"<{len(values)}{_ENUM_FMT[width]}", *values)
    elif kind == "u16":
        out += struct.pack(f"<{len(values)}H", *values)
    elif kind == "f32":
        out += struct.pack(f"<{len(values)}f", *values)
    else:
        out += struct.pack(f"<{len(values) * dim}f", *(x for v in values for x in v))


def _unpack_column(kind, dim, count, buf, pos):
    if kind == "u64_id":
        vals = []
        for _ in range(count):
            v, pos = decode_varint(buf, pos)
            vals.append(v)
        return vals, pos
    if kind == "i64_timestamp":
        vals = []
        for i in range(count):
            v, pos = decode_varint(buf, pos)
            vals.append(unzigzag(v) if i == 0 else vals[-1] - v)
        return vals, pos
    if kind == "u32_enum":
        if count == 0:
            return [], pos + 1
        if pos >= len(buf) or buf[pos] not in _ENUM_FMT:
            raise CorruptBlock("bad enum width")
        width = buf[pos]
        fmt, size = f"<{count}{_ENUM_FMT[width]}", width * count
        pos += 1
    elif kind == "u16":
        fmt, size = f"<{count}H", 2 * count
    elif kind == "f32":
        fmt, size = f"<{count}f", 4 * count
    else:
        fmt, size = f"<{count * dim}f", 4 * count * dim
    if pos + size > len(buf):
        raise CorruptBlock("truncated column")
    flat = struct.unpack_from(fmt, buf, pos)
    if kind == "f32_vec":
        flat = [tuple(flat[i : i + dim]) for i in range(0, len(flat), dim)]
    return list(flat), pos + size


def check_order(schema, events) -> None:
    ts = schema.time_field
    for a, b in zip(events, events[1:]):
        if a[ts] < b[ts]:
            raise ValueError("events must be ordered newest first")


def pack_payload(schema, events) -> bytes:
    out = bytearray()
    for f in schema.fields:
        col = [e[f.name] for e in events]
        if f.nullable:
            bits = np.packbits(np.array([v is not None for v in col], dtype=bool), bitorder="little")
            out += bits.tobytes()
            col = [v for v in col if v is not None]
        _pack_column(f.kind, f.dim, col, out)
    return bytes(out)


def unpack_payload(schema, count: int, buf) -> list[dict]:
    pos = 0
    columns = {}
    for f in schema.fields:
        if f.nullable:
            nbytes = (count + 7) // 8
            if pos + nbytes > len(buf):
                raise CorruptBlock("truncated presence bitmap")
            present = np.unpackbits(
                np.frombuffer(bytes(buf[pos : pos + nbytes]), np.uint8), count=count, bitorder="little"
            ).astype(bool)
            pos += nbytes
            vals, pos = _unpack_column(f.kind, f.dim, int(present.sum()), buf, pos)
            it = iter(vals)
            columns[f.name] = [next(it) if p else None for p in present]
        else:
            columns[f.name], pos = _unpack_column(f.kind, f.dim, count, buf, pos)
    if pos != len(buf):
        raise CorruptBlock(f"{len(buf) - pos} trailing bytes in payload")
    names = [f.name for f in schema.fields]
    return [dict(zip(names, row)) for row in zip(*(columns[n] for n in names))] if count else []


def pack_block(schema, events, user_id: int = 0) -> bytes:
    """Encode newest-first ``events`` for one user as a checksummed block."""
    check_order(schema, events)
    payload = pack_payload(schema, events)
    return BLOCK_HEADER.pack(user_id, len(events), len(payload), zlib.crc32(payload)) + payload


def read_block(schema, data, where: str = "block") -> tuple[int, list[dict]]:
    """Decode a block; returns ``(user_id, events)``."""
    if len(data) < BLOCK_HEADER.size:
        raise CorruptBlock(f"{where}: short block header")
    user_id, count, plen, crc = BLOCK_HEADER.unpack_from(data)
    payload = memoryview(data)[BLOCK_HEADER.size : BLOCK_HEADER.size + plen]
    if len(payload) != plen:
        raise CorruptBlock(f"{where} (user {user_id}): truncated payload")
    if zlib.crc32(payload) != crc:
        raise CorruptBlock(f"{where} (user {user_id}): checksum mismatch")
    try:
        return user_id, unpack_payload(schema, count, payload)
    except (CorruptBlock, struct.error) as exc:
        raise CorruptBlock(f"{where} (user {user_id}): {exc}") from None


def unpack_block(schema, data) -> list[dict]:
    return read_block(schema, data)[1]


def _render(kind, v):
    if v is None:
        return ""
    if kind == "f32":
        return str(np.float32(v))
    if kind == "f32_vec":
        return ",".join(str(np.float32(x)) for x in v)
    return str(v)


def string_baseline_encode(schema, events) -> bytes:
    """Every value as text, tab between fields, newline after each event."""
    kinds = [(f.name, f.kind) for f in schema.fields]
    lines = ("\t".join(_render(k, e[n]) for n, k in kinds) + "\n" for e in events)
    return "".join(lines).encode()
