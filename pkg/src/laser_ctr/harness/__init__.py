from .experiments import ABLATIONS, BASELINES, EvalReport, eval_ablations, reference_corpus, run_grid, train_eval
from .metrics import auc, bce_loss, log_loss
from .model import LaserCTRClassifier, SequenceSamples, TrainingDiverged, baseline_models
from .synth import Corpus, SynthConfig, gen_synthetic

__all__ = [
    "ABLATIONS", "BASELINES", "Corpus", "EvalReport", "LaserCTRClassifier", "SequenceSamples", "SynthConfig",
    "TrainingDiverged", "auc", "baseline_models", "bce_loss", "eval_ablations", "gen_synthetic", "log_loss",
    "reference_corpus", "run_grid", "train_eval",
]
