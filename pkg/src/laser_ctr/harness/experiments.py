"""Reference configurations, ablation grids and baseline comparisons."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import clone

from .metrics import auc, log_loss
from .model import LaserCTRClassifier
from .synth import SynthConfig, gen_synthetic

# Corpus used by the learning checks: short enough histories to train many
# cells on one CPU core, a small item vocabulary so the topic signal has to
# generalise across users instead of being memorised per item. Planted events
# come in runs of four among scattered same-topic noise, so an interest shows
# up as a dense segment rather than a lone token.
REFERENCE_SYNTH = dict(n_users=2000, n_items=500, history_len=(200, 200), noise_rate=0.1, planted_burst=4)
REFERENCE_MODEL = dict(seq_len=200, optimizer="adam", learning_rate=0.003, epochs=10, batch_size=128, emb_init=0.5)

# Deep-signal corpus for the history-length comparison. Every planted event
# sits past position 500, so a 500-event window sees none of them. Denser
# bursts than the reference corpus: with 100 segments to search, a sparse
# signal takes far longer to pick up.
DEEP_SYNTH = dict(n_users=1000, n_items=500, history_len=(1000, 1000), variant="deep", deep_from=500,
                  planted_events=(12, 16), planted_burst=4)
DEEP_MODEL = dict(optimizer="adam", learning_rate=0.003, epochs=16, batch_size=128, emb_init=0.5)

ABLATIONS = {
    "full": {},
    "softmax": {"gate": "softmax"},
    "no_fusion": {"fusion": False},
    "no_recency": {"recency": False},
    "w5": {"segment_w": 5},
    "w20": {"segment_w": 20},
}
BASELINES = {
    "mean_pool": {"encoder": "mean_pool"},
    "din": {"encoder": "din"},
    "self_attention": {"encoder": "self_attention"},
}


@dataclass
class EvalReport:
    """AUC per cell and seed, with seed-averaged deltas against ``reference``."""

    aucs: dict = field(default_factory=dict)
    loglosses: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    n_samples: int = 0
    reference: str = "full"

    def mean_auc(self, cell):
        return float(np.mean(self.aucs[cell]))

    @property
    def deltas(self):
        base = self.mean_auc(self.reference) if self.reference in self.aucs else float("nan")
        return {cell: self.mean_auc(cell) - base for cell in self.aucs}

    def to_dict(self):
        d = asdict(self)
        d["mean_auc"] = {c: self.mean_auc(c) for c in self.aucs}
        d["deltas"] = self.deltas
        return d

    def lines(self):
        out = []
        for cell in self.aucs:
            runs = " ".join(f"{a:.4f}" for a in self.aucs[cell])
            out.append(f"{cell:<16} auc={self.mean_auc(cell):.4f} delta={self.deltas[cell]:+.4f} runs=[{runs}]")
        return out


def reference_corpus(seed, **overrides):
    return gen_synthetic(SynthConfig.from_dict({**REFERENCE_SYNTH, "seed": seed, **overrides}))


def train_eval(model, corpus, test_fraction=0.25):
    """Fit on the training users, score on the held-out users."""
    L = model.get_params()["seq_len"]
    (Xtr, ytr), (Xte, yte) = corpus.split(test_fraction, seq_len=L)
    t0 = time.perf_counter()
    model.fit(Xtr, ytr)
    p = model.predict_proba(Xte)[:, 1]
    return {"auc": auc(p, yte), "logloss": log_loss(p, yte), "n": len(yte),
            "seconds": time.perf_counter() - t0, "model": model}


def run_grid(cells, seeds=(0, 1, 2), base=None, synth=None, corpus_fn=None, log=None):
    """Train every cell on every seed's corpus; returns an :class:`EvalReport`.

    ``cells`` maps a name to estimator overrides on top of ``base``. Each seed
    regenerates the corpus and reseeds the model, so cells on one seed share
    identical data.
    """
    base = dict(REFERENCE_MODEL if base is None else base)
    synth = dict(REFERENCE_SYNTH if synth is None else synth)
    report = EvalReport(reference=next(iter(cells)))
    template = LaserCTRClassifier(**base)
    for seed in seeds:
        corpus = corpus_fn(seed) if corpus_fn else gen_synthetic(SynthConfig.from_dict({**synth, "seed": seed}))
        for name, over in cells.items():
            model = clone(template).set_params(random_state=seed, **over)
            res = train_eval(model, corpus)
            report.aucs.setdefault(name, []).append(res["auc"])
            report.loglosses.setdefault(name, []).append(res["logloss"])
            report.seconds.setdefault(name, []).append(res["seconds"])
            report.n_samples = res["n"]
            if log:
                log(f"seed={seed} cell={name} auc={res['auc']:.4f} seconds={res['seconds']:.1f}")
    return report


def eval_ablations(seeds=(0, 1, 2), cells=None, **kw):
    names = cells or list(ABLATIONS)
    return run_grid({n: ABLATIONS[n] for n in names}, seeds=seeds, **kw)
