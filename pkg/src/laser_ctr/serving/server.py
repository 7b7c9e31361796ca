"""Threaded TCP front end for a store and an optional scoring model."""
from __future__ import annotations

import logging
import socket
import socketserver
import threading

from ..store import SchemaError, StoreError, pack_block
from . import protocol as P
from .protocol import ErrorCode, Op, ProtocolError

log = logging.getLogger(__name__)


def parse_addr(addr: str):
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class Service:
    """Request dispatch, independent of the transport."""

    def __init__(self, store, model=None):
        self.store = store
        self.model = model
        schema = store.schema
        self.item_field = schema.item_field
        self.time_field = schema.time_field
        self.topic_field = "topic" if "topic" in schema.by_name else None

    def handle(self, frame: P.Frame) -> bytes:
        """Response frame bytes for one decoded request."""
        try:
            op, payload = self._dispatch(frame)
        except ProtocolError as exc:
            op, payload = Op.ERROR, P.error_payload(exc.code, str(exc))
        except (SchemaError, ValueError, TypeError, KeyError) as exc:
            op, payload = Op.ERROR, P.error_payload(ErrorCode.BAD_PAYLOAD, f"{type(exc).__name__}: {exc}")
        except StoreError as exc:
            op, payload = Op.ERROR, P.error_payload(ErrorCode.STORE_ERROR, str(exc))
        return P.encode_frame(op, frame.request_id, payload)

    def _dispatch(self, frame):
        op, body = frame.op, frame.payload
        if op == Op.PUT_EVENT:
            user, event = P.parse_put(body)
            return op, P.U64.pack(self.store.append_event(user, event))
        if op == Op.GET_LAST_N:
            user, n = P.parse_get(body)
            events = self.store.get_last_n(user, n) if n else []
            return op, pack_block(self.store.schema, events, user)
        if op == Op.MERGE:
            return op, P.json_payload(self.store.run_merge(P.parse_merge(body)).to_dict())
        if op == Op.STATS:
            if body:
                raise ProtocolError("Stats takes an empty payload", ErrorCode.BAD_PAYLOAD)
            stats = dict(self.store.stats())
            stats["schema"] = self.store.schema.to_json()
            stats["model_loaded"] = self.model is not None
            return op, P.json_payload(stats)
        if op == Op.SCORE:
            user, n, item, topic, now = P.parse_score(body)
            if self.model is None:
                raise ProtocolError("no model checkpoint loaded", ErrorCode.UNAVAILABLE)
            events = self.store.get_last_n(user, n) if n else []
            prob, fused = self.model.score_events(
                self._model_events(events), item, topic, now,
            )
            return op, P.score_response(prob, fused)
        raise ProtocolError(f"op {op} is not a request", ErrorCode.BAD_OP)

    def _model_events(self, events):
        if self.item_field == "item_id" and self.time_field == "timestamp" and self.topic_field == "topic":
            return events
        return [
            {"item_id": e[self.item_field], "timestamp": e[self.time_field],
             "topic": e.get(self.topic_field) if self.topic_field else 0}
            for e in events
        ]


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        service = self.server.service
        while True:
            try:
                raw = P.read_frame_bytes(sock)
            except ProtocolError as exc:
                # the stream position is unknown now: report and hang up
                self._send(P.encode_frame(Op.ERROR, 0, P.error_payload(exc.code, str(exc))))
                return
            except OSError:
                return
            if raw is None:
                return
            try:
                frame = P.decode_frame(raw)
            except ProtocolError as exc:
                out = P.encode_frame(Op.ERROR, exc.request_id, P.error_payload(exc.code, str(exc)))
            else:
                out = service.handle(frame)
            if not self._send(out):
                return

    def _send(self, data):
        try:
            self.request.sendall(data)
            return True
        except OSError:
            return False


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class SeqServer:
    """Owns the listening socket; ``start`` serves from a background thread."""

    def __init__(self, addr, store, model=None):
        if isinstance(addr, str):
            addr = parse_addr(addr)
        self.service = Service(store, model)
        self._srv = _TCPServer(addr, _Handler)
        self._srv.service = self.service
        self._thread = None

    @property
    def address(self):
        host, port = self._srv.server_address[:2]
        return f"{host}:{port}"

    def start(self):
        self._thread = threading.Thread(target=self._srv.serve_forever, name="seq-server", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._srv.serve_forever()

    def close(self):
        self._srv.shutdown()
        self._srv.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def serve(addr, store_dir, checkpoint=None, block=True):
    from ..checkpoint import load_model
    from ..store import store_open

    store = store_open(store_dir)
    model = load_model(checkpoint) if checkpoint else None
    server = SeqServer(addr, store, model)
    log.info("serving %s on %s (model %s)", store_dir, server.address, "loaded" if model else "absent")
    if block:
        try:
            server.serve_forever()
        finally:
            store.close()
    return server
