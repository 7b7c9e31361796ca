from .packing import CorruptBlock, pack_block, read_block, string_baseline_encode, unpack_block
from .schema import FieldSpec, SchemaError, SequenceSchema, default_schema
from .vault import (
    CorruptStore, Extent, MergeStats, SchemaMismatch, SeqVault, StoreClosed, StoreError, store_open,
)

__all__ = [
    "CorruptBlock", "CorruptStore", "Extent", "FieldSpec", "MergeStats", "SchemaError",
    "SchemaMismatch", "SeqVault", "SequenceSchema", "StoreClosed", "StoreError",
    "default_schema", "pack_block", "read_block", "store_open", "string_baseline_encode",
    "unpack_block",
]
