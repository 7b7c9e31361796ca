"""Long-sequence CTR modelling: segmented target attention, a packed sequence
store, a framed TCP service and an evaluation harness."""
from .attention import (
    FusionOutput, LaserConfig, SequenceBatchInput, gsta_forward, init_params, laser_backward, laser_forward,
    sta_naive, sta_vectorized,
)
from .checkpoint import CheckpointError, load_model, save_model
from .flops import FlopsConfig, compare_report, flops_laser, flops_self_attention, flops_target_attention
from .harness import LaserCTRClassifier, SynthConfig, auc, gen_synthetic
from .store import SequenceSchema, SeqVault, default_schema, store_open

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "FlopsConfig", "FusionOutput", "LaserCTRClassifier", "LaserConfig", "SeqVault",
    "SequenceBatchInput", "SequenceSchema", "SynthConfig", "auc", "compare_report", "default_schema",
    "flops_laser", "flops_self_attention", "flops_target_attention", "gen_synthetic", "gsta_forward",
    "init_params", "laser_backward", "laser_forward", "load_model", "save_model", "sta_naive", "sta_vectorized",
    "store_open",
]
