"""Blocking client for the sequence server."""
from __future__ import annotations

import itertools
import json
import socket

from ..store import SequenceSchema, read_block
from . import protocol as P
from .protocol import Op
from .server import parse_addr


class RemoteError(RuntimeError):
    def __init__(self, code, message, request_id):
        super().__init__(f"server error {code} ({P.ErrorCode(code).name if code in P.ErrorCode._value2member_map_ else '?'}): {message}")
        self.code = code
        self.message = message
        self.request_id = request_id


class Client:
    def __init__(self, addr, timeout=30.0, compress=True):
        host, port = parse_addr(addr) if isinstance(addr, str) else addr
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.compress = compress
        self._ids = itertools.count(1)
        self._schema = None

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- raw frames

    def send(self, op, payload=b"", request_id=None) -> int:
        rid = next(self._ids) if request_id is None else request_id
        self.sock.sendall(P.encode_frame(op, rid, payload, compress=self.compress))
        return rid

    def recv(self) -> P.Frame:
        raw = P.read_frame_bytes(self.sock)
        if raw is None:
            raise ConnectionError("server closed the connection")
        return P.decode_frame(raw)

    def call(self, op, payload=b""):
        rid = self.send(op, payload)
        frame = self.recv()
        if frame.request_id != rid:
            raise P.ProtocolError(f"response id {frame.request_id} does not match request {rid}")
        if frame.op == Op.ERROR:
            code, msg = P.parse_error(frame.payload)
            raise RemoteError(code, msg, rid)
        return frame.payload

    # -- operations

    def put(self, user, event) -> int:
        (ack,) = P.U64.unpack(self.call(Op.PUT_EVENT, P.put_request(user, event)))
        return ack

    def get_last_n(self, user, n):
        payload = self.call(Op.GET_LAST_N, P.get_request(user, n))
        _, events = read_block(self.schema, payload, f"GetLastN response for user {user}")
        return events

    def merge(self, users=()):
        return json.loads(self.call(Op.MERGE, P.merge_request(users)))

    def stats(self):
        return json.loads(self.call(Op.STATS))

    def score(self, user, n, target_item, target_topic, request_time):
        """``(probability, fused_checksum)``."""
        payload = self.call(Op.SCORE, P.score_request(user, n, target_item, target_topic, request_time))
        return P.parse_score_response(payload)

    @property
    def schema(self) -> SequenceSchema:
        if self._schema is None:
            self._schema = SequenceSchema.from_json(self.stats()["schema"])
        return self._schema
