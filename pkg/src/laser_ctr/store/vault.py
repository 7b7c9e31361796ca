"""Embedded sequence store: memory index over packed on-disk user blocks.

Each user has at most one live block ("extent") on disk plus an in-memory
tail of recent events that is also written to an append-only journal. A merge
rewrites a user's extent together with its tail into a fresh block.

Durability protocol
-------------------
The journal header holds a committed high-water mark ``(file_id, offset)``
over the segment files. Merge writes new blocks past the mark, then commits
by atomically replacing the journal with one whose mark covers the new blocks
and whose records are the tail events still unmerged. On open, bytes past
the mark are discarded and the journal is replayed, so a crash at any point
yields either the complete pre-merge or the complete post-merge state.

Files in the store directory::

    schema.json           canonical schema
    journal.log           "SQVJ" u16 version u64 schema_hash u32 hwm_file u64 hwm_offset,
                          then records: u32 len | u32 crc32 | u8 kind | u64 user | event payload
    seg-00000001.sqv      "SQVT" u16 version u64 schema_hash, then packed blocks
"""
from __future__ import annotations

import logging
import os
import re
import struct
import threading
import zlib
from dataclasses import asdict, dataclass, field

from .packing import BLOCK_HEADER, CorruptBlock, pack_block, pack_payload, read_block, unpack_payload
from .schema import SequenceSchema

log = logging.getLogger(__name__)

VERSION = 1
SEG_MAGIC = b"SQVT"
JOURNAL_MAGIC = b"SQVJ"
SEG_HEADER = struct.Struct("<4sHQ")
JOURNAL_HEADER = struct.Struct("<4sHQIQ")
RECORD_HEADER = struct.Struct("<II")
RECORD_PREFIX = struct.Struct("<BQ")
REC_EVENT = 1
_SEG_RE = re.compile(r"^seg-(\d{8})\.sqv$")


class StoreError(Exception):
    pass


class SchemaMismatch(StoreError):
    pass


class CorruptStore(StoreError):
    pass


class StoreClosed(StoreError):
    pass


@dataclass(frozen=True)
class Extent:
    file_id: int
    offset: int
    length: int
    event_count: int


@dataclass
class MergeStats:
    users_merged: int = 0
    events_written: int = 0
    bytes_written: int = 0
    users_failed: int = 0
    files_reclaimed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class ReadCounter:
    disk_reads: int = 0
    bytes_read: int = 0
    per_call: list = field(default_factory=list)


def _seg_name(file_id: int) -> str:
    return f"seg-{file_id:08d}.sqv"


class SeqVault:
    """A single-node store handle; safe to share between threads.

    Readers run concurrently; appends are serialised under one lock, which
    also gives the per-user ordering guarantee. At most one merge runs at a
    time and it only holds the lock while committing.
    """

    def __init__(self, path, schema: SequenceSchema, *, max_tail_events: int = 256,
                 max_history_events: int | None = None, segment_max_bytes: int = 64 << 20,
                 durable: bool = False, crash_hook=None):
        self.path = os.fspath(path)
        self.schema = schema
        self.max_tail_events = max_tail_events
        self.max_history_events = max_history_events
        self.segment_max_bytes = segment_max_bytes
        self.durable = durable
        self.crash_hook = crash_hook
        self.reads = ReadCounter()
        self._lock = threading.RLock()
        self._merge_lock = threading.Lock()
        self._index: dict[int, Extent] = {}
        self._tails: dict[int, list[tuple[int, dict]]] = {}
        self._tail_count = 0
        self._journal_records = 0
        self._seq = 0
        self._files: dict[int, int] = {}  # file_id -> committed size
        self._live: dict[int, int] = {}
        self._active: int | None = None
        self._writer = None
        self._writer_fid: int | None = None
        self._read_lock = threading.Lock()
        self._closed = False
        os.makedirs(self.path, exist_ok=True)
        self._check_schema_file()
        self._recover()

    # ------------------------------------------------------------------ open

    def _p(self, name):
        return os.path.join(self.path, name)

    def _check_schema_file(self):
        spath = self._p("schema.json")
        if os.path.exists(spath):
            with open(spath) as fh:
                stored = SequenceSchema.from_json(fh.read())
            if stored.schema_hash != self.schema.schema_hash:
                raise SchemaMismatch(
                    f"store schema hash {stored.schema_hash:016x} != "
                    f"requested {self.schema.schema_hash:016x}"
                )
        else:
            if any(_SEG_RE.match(n) for n in os.listdir(self.path)):
                raise CorruptStore(f"{self.path}: segment files without schema.json")
            _atomic_write(spath, self.schema.to_json().encode(), self.durable)

    def _recover(self):
        jpath = self._p("journal.log")
        if os.path.exists(jpath):
            with open(jpath, "rb") as fh:
                raw = fh.read()
            hwm_file, hwm_off = self._parse_journal_header(raw, jpath)
        else:
            if any(_SEG_RE.match(n) for n in os.listdir(self.path)):
                raise CorruptStore(f"{jpath}: missing journal for existing segments")
            raw = None
            hwm_file, hwm_off = 0, 0

        for name in sorted(os.listdir(self.path)):
            m = _SEG_RE.match(name)
            if not m:
                continue
            fid = int(m.group(1))
            fpath = self._p(name)
            if fid > hwm_file:
                os.remove(fpath)  # written by a merge that never committed
                continue
            size = os.path.getsize(fpath)
            if fid == hwm_file:
                if size < hwm_off:
                    raise CorruptStore(f"{name}: {size} bytes, committed length is {hwm_off}")
                if size > hwm_off:
                    with open(fpath, "r+b") as fh:
                        fh.truncate(hwm_off)
                    size = hwm_off
            self._scan_segment(fid, fpath, size)
        for ext in self._index.values():
            self._live[ext.file_id] = self._live.get(ext.file_id, 0) + ext.length
        for fid in self._files:
            self._live.setdefault(fid, 0)
        if hwm_file in self._files:
            self._active = hwm_file

        if raw is None:
            self._write_journal((0, 0), [])
        else:
            good = self._replay_journal(raw)
            if good < len(raw):
                log.warning("discarding %d torn bytes at the end of the journal", len(raw) - good)
                with open(jpath, "r+b") as fh:
                    fh.truncate(good)
        self._jfh = open(jpath, "ab")

    def _parse_journal_header(self, raw, jpath):
        if len(raw) < JOURNAL_HEADER.size:
            raise CorruptStore(f"{jpath}: short journal header")
        magic, ver, shash, hwm_file, hwm_off = JOURNAL_HEADER.unpack_from(raw)
        if magic != JOURNAL_MAGIC or ver != VERSION:
            raise CorruptStore(f"{jpath}: bad journal header")
        if shash != self.schema.schema_hash:
            raise SchemaMismatch(f"{jpath}: schema hash {shash:016x} != {self.schema.schema_hash:016x}")
        return hwm_file, hwm_off

    def _scan_segment(self, fid, fpath, size):
        name = os.path.basename(fpath)
        with open(fpath, "rb") as fh:
            head = fh.read(SEG_HEADER.size)
            if len(head) < SEG_HEADER.size:
                raise CorruptStore(f"{name}: short segment header")
            magic, ver, shash = SEG_HEADER.unpack(head)
            if magic != SEG_MAGIC or ver != VERSION:
                raise CorruptStore(f"{name}: bad segment header")
            if shash != self.schema.schema_hash:
                raise SchemaMismatch(f"{name}: schema hash {shash:016x} != {self.schema.schema_hash:016x}")
            off = SEG_HEADER.size
            while off < size:
                fh.seek(off)
                bh = fh.read(BLOCK_HEADER.size)
                if len(bh) < BLOCK_HEADER.size:
                    raise CorruptStore(f"{name}: truncated block header at offset {off}")
                user, count, plen, _ = BLOCK_HEADER.unpack(bh)
                length = BLOCK_HEADER.size + plen
                if off + length > size:
                    raise CorruptStore(f"{name}: block for user {user} at {off} runs past end")
                self._index[user] = Extent(fid, off, length, count)
                off += length
        self._files[fid] = size

    def _replay_journal(self, raw) -> int:
        pos = JOURNAL_HEADER.size
        while pos + RECORD_HEADER.size <= len(raw):
            plen, crc = RECORD_HEADER.unpack_from(raw, pos)
            body = raw[pos + RECORD_HEADER.size : pos + RECORD_HEADER.size + plen]
            if len(body) < plen or zlib.crc32(body) != crc or plen < RECORD_PREFIX.size:
                break
            kind, user = RECORD_PREFIX.unpack_from(body)
            if kind != REC_EVENT:
                break
            try:
                (event,) = unpack_payload(self.schema, 1, body[RECORD_PREFIX.size :])
            except (CorruptBlock, ValueError, struct.error):
                break
            self._add_to_tail(user, event)
            self._journal_records += 1
            pos += RECORD_HEADER.size + plen
        return pos

    # ------------------------------------------------------------- helpers

    def _hook(self, point, **info):
        if self.crash_hook is not None:
            self.crash_hook(point, **info)

    def _check_open(self):
        if self._closed:
            raise StoreClosed("store is closed")

    def _add_to_tail(self, user, event):
        self._seq += 1
        self._tails.setdefault(user, []).append((self._seq, event))
        self._tail_count += 1

    @staticmethod
    def _record(user, event_payload) -> bytes:
        body = RECORD_PREFIX.pack(REC_EVENT, user) + event_payload
        return RECORD_HEADER.pack(len(body), zlib.crc32(body)) + body

    def _write_journal(self, hwm, records):
        header = JOURNAL_HEADER.pack(JOURNAL_MAGIC, VERSION, self.schema.schema_hash, *hwm)
        data = header + b"".join(records)
        _atomic_write(self._p("journal.log"), data, self.durable)

    def _read_extent(self, ext: Extent) -> list[dict]:
        with open(self._p(_seg_name(ext.file_id)), "rb") as fh:
            fh.seek(ext.offset)
            data = fh.read(ext.length)
        with self._read_lock:
            self.reads.disk_reads += 1
            self.reads.bytes_read += len(data)
        _, events = read_block(self.schema, data, where=f"{_seg_name(ext.file_id)}@{ext.offset}")
        return events

    def _combine(self, disk_events, tail):
        ts, item = self.schema.time_field, self.schema.item_field
        merged = {}
        for ev in disk_events:
            merged[(ev[ts], ev[item])] = (-1, ev)
        for seq, ev in tail:  # insertion order: the last write wins
            merged[(ev[ts], ev[item])] = (seq, ev)
        rows = sorted(merged.values(), key=lambda r: (r[1][ts], r[1][item], r[0]), reverse=True)
        return [ev for _, ev in rows]

    def _snapshot(self, user):
        with self._lock:
            self._check_open()
            return self._index.get(user), list(self._tails.get(user, ()))

    def _user_events(self, user):
        for _ in range(5):
            ext, tail = self._snapshot(user)
            try:
                disk = self._read_extent(ext) if ext is not None else []
            except FileNotFoundError:
                continue  # extent reclaimed by a concurrent merge; the index moved on
            return self._combine(disk, tail), int(ext is not None)
        raise StoreError(f"user {user}: extent kept moving during read")

    # ----------------------------------------------------------------- API

    def append_event(self, user_id: int, event: dict) -> int:
        """Journal and buffer one event; returns its sequence number (the ack)."""
        event = self.schema.normalize(event)
        payload = pack_payload(self.schema, [event])
        for attempt in range(2):
            if attempt:
                self.run_merge([user_id])
            with self._lock:
                self._check_open()
                if len(self._tails.get(user_id, ())) < self.max_tail_events:
                    self._hook("append_before_journal", user=user_id)
                    self._jfh.write(self._record(user_id, payload))
                    self._jfh.flush()
                    if self.durable:
                        os.fsync(self._jfh.fileno())
                    self._journal_records += 1
                    self._hook("append_after_journal", user=user_id)
                    self._add_to_tail(user_id, event)
                    return self._seq
        raise StoreError(f"user {user_id}: tail is full and the merge did not drain it")

    def get_last_n(self, user_id: int, n: int) -> list[dict]:
        """Newest-first events for ``user_id``, at most ``n`` of them."""
        if n < 1:
            raise ValueError("n must be >= 1")
        events, nreads = self._user_events(user_id)
        with self._read_lock:
            self.reads.per_call.append(nreads)
            if len(self.reads.per_call) > 1024:
                del self.reads.per_call[:-1024]
        return events[:n]

    def users(self) -> list[int]:
        with self._lock:
            return sorted(set(self._index) | set(self._tails))

    def run_merge(self, user_ids=None) -> MergeStats:
        """Fold in-memory tails into fresh on-disk blocks for the chosen users."""
        with self._merge_lock:
            return self._merge(user_ids)

    def _open_writer(self):
        fh = self._writer
        if fh is not None and fh.tell() < self.segment_max_bytes:
            return fh, self._writer_fid
        if fh is not None:
            fh.close()
            self._writer = None
        if self._active is not None and self._files[self._active] < self.segment_max_bytes:
            fid = self._active
            fh = open(self._p(_seg_name(fid)), "r+b")
            fh.seek(self._files[fid])
            fh.truncate()
        else:
            fid = max([*self._files, self._writer_fid or 0]) + 1
            fh = open(self._p(_seg_name(fid)), "w+b")
            fh.write(SEG_HEADER.pack(SEG_MAGIC, VERSION, self.schema.schema_hash))
        self._writer, self._writer_fid = fh, fid
        return fh, fid

    def _merge(self, user_ids) -> MergeStats:
        stats = MergeStats()
        with self._lock:
            self._check_open()
            pool = list(self._tails) if user_ids is None else list(user_ids)
            snap = {u: (self._index.get(u), list(self._tails[u])) for u in pool if self._tails.get(u)}
        if not snap:
            return stats
        fh, fid = self._open_writer()
        base = fh.tell()
        written = {}
        for user, (ext, tail) in snap.items():
            disk = self._read_extent(ext) if ext is not None else []
            events = self._combine(disk, tail)
            if self.max_history_events is not None:
                events = events[: self.max_history_events]
            block = pack_block(self.schema, events, user)
            start = fh.tell()
            try:
                self._hook("merge_write", user=user)
                fh.write(block)
                fh.flush()
            except OSError as exc:
                log.error("merge of user %d failed: %s", user, exc)
                fh.seek(start)
                fh.truncate()
                stats.users_failed += 1
                continue
            written[user] = Extent(fid, start, len(block), len(events))
            stats.events_written += len(events)
            stats.bytes_written += len(block)
        if self.durable:
            os.fsync(fh.fileno())
        end = fh.tell()
        self._hook("merge_after_block_write")
        if not written:
            fh.seek(base)
            fh.truncate()
            return stats

        with self._lock:
            records = []
            for user, tail in self._tails.items():
                skip = len(snap[user][1]) if user in written else 0
                records.extend(self._record(user, pack_payload(self.schema, [ev])) for _, ev in tail[skip:])
            try:
                self._hook("merge_before_journal_replace")
                self._write_journal((fid, end), records)
            except BaseException:
                fh.seek(base)
                fh.truncate()
                raise
            self._jfh.close()
            self._jfh = open(self._p("journal.log"), "ab")
            self._journal_records = len(records)
            self._files[fid] = end
            self._live.setdefault(fid, 0)
            self._active = fid
            for user, ext in written.items():
                old = self._index.get(user)
                if old is not None:
                    self._live[old.file_id] -= old.length
                self._index[user] = ext
                self._live[fid] += ext.length
                rest = self._tails[user][len(snap[user][1]) :]
                self._tail_count -= len(snap[user][1])
                if rest:
                    self._tails[user] = rest
                else:
                    del self._tails[user]
            stats.users_merged = len(written)
            stats.files_reclaimed = self._reclaim()
        self._hook("merge_after_commit")
        return stats

    def _reclaim(self) -> int:
        dead = [f for f, live in self._live.items() if live == 0 and f != self._active]
        for fid in dead:
            try:
                os.remove(self._p(_seg_name(fid)))
            except FileNotFoundError:
                pass
            del self._live[fid]
            del self._files[fid]
        return len(dead)

    def stats(self) -> dict:
        with self._lock:
            return {
                "disk_bytes": sum(self._files.values()),
                "live_bytes": sum(self._live.values()),
                "index_entries": len(set(self._index) | set(self._tails)),
                "tail_events": self._tail_count,
                "journal_bytes": self._journal_size(),
            }

    def _journal_size(self) -> int:
        try:
            self._jfh.flush()
            return os.path.getsize(self._p("journal.log")) - JOURNAL_HEADER.size
        except (OSError, ValueError):
            return 0

    def extent(self, user_id: int) -> Extent | None:
        with self._lock:
            return self._index.get(user_id)

    def close(self):
        with self._lock:
            if self._closed:
                return
            self._closed = True
            self._jfh.close()
            if self._writer is not None:
                self._writer.close()
                self._writer = None

    def abandon(self):
        """Drop the handle without any further writes, as a crashed process would."""
        with self._lock:
            self._closed = True
            for fh in (self._jfh, self._writer):
                if fh is not None:
                    try:
                        fh.close()
                    except OSError:
                        pass
            self._writer = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _atomic_write(path, data: bytes, durable: bool):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        if durable:
            os.fsync(fh.fileno())
    os.replace(tmp, path)


def store_open(path, schema: SequenceSchema | None = None, **options) -> SeqVault:
    """Open (or create) a store; without ``schema`` the stored one is used."""
    if schema is None:
        spath = os.path.join(os.fspath(path), "schema.json")
        try:
            with open(spath, encoding="utf-8") as fh:
                schema = SequenceSchema.from_json(fh.read())
        except FileNotFoundError:
            raise StoreError(f"{path}: no schema.json; initialise the store with a schema first") from None
    return SeqVault(path, schema, **options)
