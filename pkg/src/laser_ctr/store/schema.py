"""Typed field layout for logged behaviour events."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

KINDS = ("u64_id", "u32_enum", "i64_timestamp", "f32", "f32_vec", "u16")

_RANGES = {
    "u64_id": (0, 2**64 - 1),
    "u32_enum": (0, 2**32 - 1),
    "u16": (0, 2**16 - 1),
    "i64_timestamp": (1, 2**63 - 1),
}


class SchemaError(ValueError):
    pass


def f32(x) -> float:
    """Round a Python float to the nearest float32 value."""
    return struct.unpack("<f", struct.pack("<f", x))[0]


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str
    nullable: bool = False
    dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "f32_vec" and self.dim < 1:
            raise SchemaError(f"field {self.name!r}: f32_vec needs dim >= 1")
        if self.kind != "f32_vec" and self.dim:
            raise SchemaError(f"field {self.name!r}: dim only applies to f32_vec")

    def to_json(self):
        out = {"name": self.name, "kind": self.kind, "nullable": self.nullable}
        if self.kind == "f32_vec":
            out["dim"] = self.dim
        return out


class SequenceSchema:
    """Ordered field list with exactly one event-time field.

    The dedup key of an event is ``(timestamp, item)``, where the item field is
    the one named ``item_id`` or else the first ``u64_id`` field.
    """

    def __init__(self, fields):
        self.fields = tuple(f if isinstance(f, FieldSpec) else FieldSpec(**f) for f in fields)
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {names}")
        ts = [f for f in self.fields if f.kind == "i64_timestamp"]
        if len(ts) != 1:
            raise SchemaError("schema needs exactly one i64_timestamp field")
        if ts[0].nullable:
            raise SchemaError("the timestamp field cannot be nullable")
        self.time_field = ts[0].name
        ids = [f for f in self.fields if f.kind == "u64_id" and not f.nullable]
        named = [f for f in ids if f.name == "item_id"]
        if not ids:
            raise SchemaError("schema needs a non-nullable u64_id item field")
        self.item_field = (named or ids)[0].name
        self.by_name = {f.name: f for f in self.fields}

    @classmethod
    def from_json(cls, data):
        if isinstance(data, (str, bytes)):
            data = json.loads(data)
        return cls([FieldSpec(d["name"], d["kind"], bool(d.get("nullable", False)), int(d.get("dim", 0)))
                    for d in data])

    def to_json(self) -> str:
        return json.dumps([f.to_json() for f in self.fields], separators=(",", ":"))

    @property
    def schema_hash(self) -> int:
        digest = hashlib.blake2b(self.to_json().encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def __eq__(self, other):
        return isinstance(other, SequenceSchema) and self.fields == other.fields

    def __hash__(self):
        return self.schema_hash

    def __repr__(self):
        return f"SequenceSchema({[f.name for f in self.fields]})"

    def key(self, event):
        return event[self.time_field], event[self.item_field]

    def normalize(self, event) -> dict:
        """Validate ``event`` and return a copy with canonical value types.

        Integers become ``int``, floats are rounded to float32 and vectors become
        tuples, so that a pack/unpack round trip reproduces the event exactly.
        """
        if not isinstance(event, dict):
            raise SchemaError(f"event must be a mapping, got {type(event).__name__}")
        extra = set(event) - set(self.by_name)
        if extra:
            raise SchemaError(f"unknown fields {sorted(extra)}")
        out = {}
        for f in self.fields:
            v = event.get(f.name)
            if v is None:
                if not f.nullable:
                    raise SchemaError(f"field {f.name!r} is required")
                out[f.name] = None
                continue
            if f.kind in _RANGES:
                if isinstance(v, bool) or not float(v).is_integer():
                    raise SchemaError(f"field {f.name!r} expects an integer, got {v!r}")
                v = int(v)
                lo, hi = _RANGES[f.kind]
                if not lo <= v <= hi:
                    raise SchemaError(f"field {f.name!r} value {v} outside [{lo}, {hi}]")
            elif f.kind == "f32":
                v = f32(float(v))
                if not math.isfinite(v):
                    raise SchemaError(f"field {f.name!r} must be finite")
            else:
                v = tuple(f32(float(x)) for x in v)
                if len(v) != f.dim:
                    raise SchemaError(f"field {f.name!r} expects {f.dim} values, got {len(v)}")
            out[f.name] = v
        return out


def default_schema() -> SequenceSchema:
    """The behaviour-log layout used by the harness and the CLI examples."""
    return SequenceSchema([
        FieldSpec("item_id", "u64_id"),
        FieldSpec("topic", "u32_enum"),
        FieldSpec("scenario", "u32_enum"),
        FieldSpec("action", "u32_enum"),
        FieldSpec("timestamp", "i64_timestamp"),
        FieldSpec("similarity", "f32", nullable=True),
        FieldSpec("embedding_ref", "u64_id", nullable=True),
    ])
