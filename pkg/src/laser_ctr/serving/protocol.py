"""Length-prefixed binary frames.

Wire image (little-endian)::

    length u32 | op u8 | flags u8 | request_id u64 | payload

``length`` counts everything after itself (``10 + len(payload)``). Flag bit 0
marks a compressed payload, stored as ``original_len u32 | raw LZMA2 stream``
(preset 6, 1 MiB dictionary, no container header).
"""
from __future__ import annotations

import enum
import json
import lzma
import struct
import zlib
from dataclasses import dataclass

import numpy as np

LEN = struct.Struct("<I")
HEAD = struct.Struct("<IBBQ")
HEADER_BODY = 10  # op + flags + request_id
MAX_FRAME = 16 << 20
COMPRESS_MIN = 512
FLAG_COMPRESSED = 1
CODEC = [{"id": lzma.FILTER_LZMA2, "preset": 6, "dict_size": 1 << 20}]


class Op(enum.IntEnum):
    PUT_EVENT = 0
    GET_LAST_N = 1
    MERGE = 2
    STATS = 3
    SCORE = 4
    ERROR = 255


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    BAD_OP = 2
    BAD_PAYLOAD = 3
    UNAVAILABLE = 4
    STORE_ERROR = 5
    DECOMPRESSION = 6


class ProtocolError(ValueError):
    def __init__(self, msg, code=ErrorCode.MALFORMED, request_id=0):
        super().__init__(msg)
        self.code = code
        self.request_id = request_id


class Incomplete(ProtocolError):
    """More bytes are needed before a frame can be decoded."""

    def __init__(self, needed):
        super().__init__(f"incomplete frame, need {needed} bytes")
        self.needed = needed


@dataclass(frozen=True)
class Frame:
    op: int
    request_id: int
    payload: bytes = b""
    flags: int = 0


# ------------------------------------------------------------ compression


def compress_payload(raw: bytes, threshold=COMPRESS_MIN):
    """``(wire_payload, compressed?)``; never larger than the raw payload."""
    if len(raw) <= threshold:
        return raw, False
    packed = LEN.pack(len(raw)) + lzma.compress(raw, format=lzma.FORMAT_RAW, filters=CODEC)
    if len(packed) >= len(raw):
        return raw, False
    return packed, True


def decompress_payload(data: bytes, max_size=MAX_FRAME) -> bytes:
    if len(data) < 4:
        raise ProtocolError("compressed payload shorter than its length prefix", ErrorCode.DECOMPRESSION)
    (size,) = LEN.unpack_from(data)
    if size > max_size:
        raise ProtocolError(f"declared size {size} exceeds limit {max_size}", ErrorCode.DECOMPRESSION)
    d = lzma.LZMADecompressor(format=lzma.FORMAT_RAW, filters=CODEC)
    try:
        out = d.decompress(data[4:], max_length=size)
    except lzma.LZMAError as exc:
        raise ProtocolError(f"corrupt compressed payload: {exc}", ErrorCode.DECOMPRESSION) from exc
    if len(out) != size or not d.eof or d.unused_data:
        raise ProtocolError("compressed payload does not match its declared size", ErrorCode.DECOMPRESSION)
    return out


# ---------------------------------------------------------------- framing


def encode_frame(op, request_id, payload=b"", compress=True) -> bytes:
    flags = 0
    if compress:
        payload, packed = compress_payload(payload)
        flags = FLAG_COMPRESSED if packed else 0
    if HEADER_BODY + len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {HEADER_BODY + len(payload)} bytes exceeds {MAX_FRAME}")
    return HEAD.pack(HEADER_BODY + len(payload), int(op), flags, request_id) + payload


def frame_size(buf, max_frame=MAX_FRAME):
    """Total bytes of the frame at the start of ``buf`` (raises Incomplete)."""
    if len(buf) < 4:
        raise Incomplete(4)
    (length,) = LEN.unpack_from(buf)
    if length < HEADER_BODY:
        raise ProtocolError(f"frame length {length} shorter than header")
    if length > max_frame:
        raise ProtocolError(f"frame length {length} exceeds limit {max_frame}")
    return 4 + length


def decode_frame(data: bytes, max_frame=MAX_FRAME, decompress=True) -> Frame:
    """Decode exactly one frame; ``data`` must hold nothing else."""
    total = frame_size(data, max_frame)
    if len(data) < total:
        raise Incomplete(total)
    if len(data) != total:
        raise ProtocolError(f"length field says {total} bytes, got {len(data)}")
    _, op, flags, rid = HEAD.unpack_from(data)
    if op not in Op._value2member_map_:
        raise ProtocolError(f"unknown op {op}", ErrorCode.BAD_OP, rid)
    if flags & ~FLAG_COMPRESSED:
        raise ProtocolError(f"unknown flag bits {flags:#x}", ErrorCode.MALFORMED, rid)
    payload = bytes(data[HEAD.size :])
    if decompress and flags & FLAG_COMPRESSED:
        try:
            payload = decompress_payload(payload, max_frame)
        except ProtocolError as exc:
            exc.request_id = rid
            raise
    return Frame(op, rid, payload, flags)


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self, max_frame=MAX_FRAME):
        self.buf = bytearray()
        self.max_frame = max_frame

    def feed(self, data):
        self.buf += data

    def frames(self):
        while True:
            try:
                total = frame_size(self.buf, self.max_frame)
            except Incomplete:
                return
            if len(self.buf) < total:
                return
            raw = bytes(self.buf[:total])
            del self.buf[:total]
            yield raw


def read_frame_bytes(sock, max_frame=MAX_FRAME):
    """Read one raw frame from a socket; ``None`` on clean EOF."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    total = frame_size(head, max_frame)
    body = _recv_exact(sock, total - 4)
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    return head + body


def _recv_exact(sock, n):
    chunks = bytearray()
    while len(chunks) < n:
        part = sock.recv(n - len(chunks))
        if not part:
            if chunks:
                raise ProtocolError("connection closed mid-frame")
            return None
        chunks += part
    return bytes(chunks)


# ---------------------------------------------------------------- payloads

U64 = struct.Struct("<Q")
PUT = struct.Struct("<Q")
GET = struct.Struct("<QI")
SCORE_REQ = struct.Struct("<QIQIq")
SCORE_RESP = struct.Struct("<dI")
ERR = struct.Struct("<H")


def _need(payload, size, what):
    if len(payload) < size:
        raise ProtocolError(f"{what} payload needs {size} bytes, got {len(payload)}", ErrorCode.BAD_PAYLOAD)


def put_request(user, event: dict) -> bytes:
    return PUT.pack(user) + json.dumps(event, sort_keys=True, separators=(",", ":")).encode()


def parse_put(payload):
    _need(payload, PUT.size, "PutEvent")
    (user,) = PUT.unpack_from(payload)
    try:
        event = json.loads(payload[PUT.size :].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"PutEvent event is not JSON: {exc}", ErrorCode.BAD_PAYLOAD) from exc
    if not isinstance(event, dict):
        raise ProtocolError("PutEvent event must be an object", ErrorCode.BAD_PAYLOAD)
    return user, event


def get_request(user, n) -> bytes:
    return GET.pack(user, n)


def parse_get(payload):
    if len(payload) != GET.size:
        raise ProtocolError(f"GetLastN payload must be {GET.size} bytes", ErrorCode.BAD_PAYLOAD)
    return GET.unpack(payload)


def merge_request(users=()) -> bytes:
    users = list(users)
    return struct.pack(f"<I{len(users)}Q", len(users), *users)


def parse_merge(payload):
    _need(payload, 4, "Merge")
    (count,) = struct.unpack_from("<I", payload)
    if len(payload) != 4 + 8 * count:
        raise ProtocolError("Merge payload length does not match its count", ErrorCode.BAD_PAYLOAD)
    return list(struct.unpack_from(f"<{count}Q", payload, 4)) or None


def score_request(user, n, target_item, target_topic, request_time) -> bytes:
    return SCORE_REQ.pack(user, n, target_item, target_topic, request_time)


def parse_score(payload):
    if len(payload) != SCORE_REQ.size:
        raise ProtocolError(f"Score payload must be {SCORE_REQ.size} bytes", ErrorCode.BAD_PAYLOAD)
    return SCORE_REQ.unpack(payload)


def score_response(prob, fused) -> bytes:
    return SCORE_RESP.pack(prob, fused_checksum(fused))


def parse_score_response(payload):
    return SCORE_RESP.unpack(payload)


def fused_checksum(fused) -> int:
    return zlib.crc32(np.ascontiguousarray(fused, dtype="<f4").tobytes())


def error_payload(code, message) -> bytes:
    return ERR.pack(int(code)) + message.encode("utf-8", "replace")


def parse_error(payload):
    _need(payload, ERR.size, "Error")
    (code,) = ERR.unpack_from(payload)
    return code, payload[ERR.size :].decode("utf-8", "replace")


def json_payload(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
