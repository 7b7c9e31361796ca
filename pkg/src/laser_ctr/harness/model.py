"""CTR classifier: embedding tables + sequence encoder + MLP head.

``LaserCTRClassifier`` follows the scikit-learn estimator conventions
(constructor stores hyper-parameters only, ``fit`` returns ``self``, learned
state ends with an underscore), so ``clone``, ``get_params`` and grid search
work. The input ``X`` is a :class:`SequenceSamples`.

Tokens are the sum of an item-id embedding and a topic-id embedding, the
topic being the item's category side information. The head sees the encoder
output concatenated with the candidate embedding.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .. import tensor as tc
from ..attention import LaserConfig, backward_batch, bucketize, forward_batch, glorot, init_params
from .metrics import auc, bce_loss

log = logging.getLogger(__name__)

ENCODERS = ("laser", "mean_pool", "din", "self_attention")
OPTIMIZERS = ("sgd", "adagrad", "adam")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class SequenceSamples:
    """Labelled-candidate samples sharing per-user histories.

    History arrays are ``(U, L)`` and most recent first; sample ``i`` pairs
    history ``user[i]`` with candidate ``(target_item[i], target_topic[i])``.
    """

    hist_items: np.ndarray
    hist_topics: np.ndarray
    hist_ts: np.ndarray
    hist_len: np.ndarray
    request_time: np.ndarray
    user: np.ndarray
    target_item: np.ndarray
    target_topic: np.ndarray
    n_items: int
    n_topics: int

    def __len__(self):
        return len(self.user)

    def __getitem__(self, idx):
        idx = np.arange(len(self))[idx]
        return SequenceSamples(
            self.hist_items, self.hist_topics, self.hist_ts, self.hist_len, self.request_time,
            self.user[idx], self.target_item[idx], self.target_topic[idx], self.n_items, self.n_topics,
        )

    @property
    def seq_len(self):
        return self.hist_items.shape[1]

    @classmethod
    def from_corpus(cls, corpus, sel=None, seq_len=None):
        sel = np.arange(len(corpus.sample_user)) if sel is None else np.asarray(sel)
        L = corpus.hist_items.shape[1] if seq_len is None else seq_len
        return cls(
            hist_items=corpus.hist_items[:, :L],
            hist_topics=corpus.hist_topics[:, :L],
            hist_ts=corpus.hist_ts[:, :L],
            hist_len=np.minimum(corpus.hist_len, L),
            request_time=corpus.request_time,
            user=corpus.sample_user[sel],
            target_item=corpus.target_item[sel],
            target_topic=corpus.target_topic[sel],
            n_items=corpus.config.n_items,
            n_topics=corpus.config.n_topics,
        )

    @classmethod
    def from_events(cls, events, target_item, target_topic, request_time, seq_len, n_items, n_topics,
                    item_field="item_id", topic_field="topic", time_field="timestamp"):
        """A single sample built from newest-first store events."""
        events = events[:seq_len]
        n = len(events)
        items = np.zeros((1, seq_len), np.int64)
        topics = np.zeros((1, seq_len), np.int64)
        ts = np.zeros((1, seq_len), np.int64)
        for i, ev in enumerate(events):
            items[0, i] = ev[item_field] % n_items
            topics[0, i] = (ev.get(topic_field) or 0) % n_topics
            ts[0, i] = ev[time_field]
        return cls(items, topics, ts, np.array([n]), np.array([request_time], np.int64),
                   np.zeros(1, np.int64), np.array([target_item % n_items]),
                   np.array([target_topic % n_topics]), n_items, n_topics)


def check_samples(X, y=None):
    """Validate ``X`` (and ``y``) and return them in canonical form."""
    if not isinstance(X, SequenceSamples):
        raise TypeError(f"X must be SequenceSamples, got {type(X).__name__}")
    U, L = X.hist_items.shape
    for name in ("hist_topics", "hist_ts"):
        if getattr(X, name).shape != (U, L):
            raise ValueError(f"{name} has shape {getattr(X, name).shape}, expected {(U, L)}")
    if X.hist_len.shape != (U,) or X.request_time.shape != (U,):
        raise ValueError("hist_len and request_time must have one entry per user")
    n = len(X.user)
    if X.target_item.shape != (n,) or X.target_topic.shape != (n,):
        raise ValueError("target arrays must have one entry per sample")
    if n and (X.user.min() < 0 or X.user.max() >= U):
        raise ValueError("sample user index out of range")
    if y is not None:
        y = np.asarray(y)
        if y.shape != (n,):
            raise ValueError(f"y has shape {y.shape}, expected {(n,)}")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        return X, y.astype(np.float64)
    return X


# ---------------------------------------------------------------- encoders


class LaserEncoder:
    def __init__(self, cfg: LaserConfig):
        self.cfg = cfg
        self.fused_dim = cfg.fused_dim
        self.keys = None

    def init(self, rng):
        p = init_params(self.cfg, rng)
        self.keys = list(p)
        return p

    def forward(self, params, tokens, target, mask, buckets):
        sub = {k: params[k] for k in self.keys}
        return forward_batch(sub, self.cfg, tokens, target, mask, buckets)

    def backward(self, params, cache, dfused):
        sub = {k: params[k] for k in self.keys}
        return backward_batch(sub, self.cfg, cache, dfused)


class MeanPoolEncoder:
    keys = ()

    def __init__(self, d):
        self.fused_dim = d

    def init(self, rng):
        return {}

    def forward(self, params, tokens, target, mask, buckets):
        n = np.maximum(mask.sum(axis=1, keepdims=True), 1).astype(tokens.dtype)
        fused = (tokens * mask[..., None]).sum(axis=1) / n
        return fused, dict(mask=mask, n=n, L=tokens.shape[1], dt=tokens.dtype)

    def backward(self, params, cache, dfused):
        dtok = dfused[:, None, :] * cache["mask"][..., None] / cache["n"][..., None]
        return {"tokens": dtok.astype(cache["dt"]), "target": np.zeros_like(dfused)}


def _first_valid(mask):
    m = mask.copy()
    m[:, 0] = True  # an empty history attends to its zero padding token
    return m


class DinEncoder:
    """Single softmax target-attention layer over the full history."""

    keys = ("din.w_q", "din.w_k", "din.w_v")

    def __init__(self, d):
        self.d = d
        self.fused_dim = d

    def init(self, rng):
        return {k: glorot(rng, self.d, self.d) for k in self.keys}

    def forward(self, params, tokens, target, mask, buckets):
        m = _first_valid(mask)
        q = tc.matmul(target, params["din.w_q"])
        K = tc.matmul(tokens, params["din.w_k"])
        V = tc.matmul(tokens, params["din.w_v"])
        scale = tokens.dtype.type(math.sqrt(self.d))
        a = tc.softmax_rows(tc.matmul(K, q[..., None])[..., 0] / scale, m).astype(tokens.dtype)
        o = tc.matmul(a[:, None, :], V)[:, 0]
        return o, dict(H=tokens, T=target, q=q, K=K, V=V, a=a, scale=scale)

    def backward(self, params, c, do):
        a, V, K, q, H = c["a"], c["V"], c["K"], c["q"], c["H"]
        da = tc.matmul(V, do[..., None])[..., 0]
        dV = a[..., None] * do[:, None, :]
        dlog = a * (da - (a * da).sum(axis=1, keepdims=True)) / c["scale"]
        dq = tc.matmul(dlog[:, None, :], K)[:, 0]
        dK = dlog[..., None] * q[:, None, :]
        return {
            "din.w_q": tc.matmul(c["T"].T, dq),
            "din.w_k": tc.outer_sum(H, dK),
            "din.w_v": tc.outer_sum(H, dV),
            "tokens": tc.matmul(dK, params["din.w_k"].T) + tc.matmul(dV, params["din.w_v"].T),
            "target": tc.matmul(dq, params["din.w_q"].T),
        }


class SelfAttentionEncoder:
    """One self-attention layer with a residual, mean-pooled over valid rows."""

    keys = ("sa.w_q", "sa.w_k", "sa.w_v")

    def __init__(self, d):
        self.d = d
        self.fused_dim = d

    def init(self, rng):
        return {k: glorot(rng, self.d, self.d) for k in self.keys}

    def forward(self, params, tokens, target, mask, buckets):
        m = _first_valid(mask)
        Q = tc.matmul(tokens, params["sa.w_q"])
        K = tc.matmul(tokens, params["sa.w_k"])
        V = tc.matmul(tokens, params["sa.w_v"])
        scale = tokens.dtype.type(math.sqrt(self.d))
        S = tc.matmul(Q, K.transpose(0, 2, 1)) / scale
        A = tc.softmax_rows(S, np.broadcast_to(m[:, None, :], S.shape)).astype(tokens.dtype)
        O = tc.matmul(A, V) + tokens
        n = m.sum(axis=1, keepdims=True).astype(tokens.dtype)
        fused = (O * m[..., None]).sum(axis=1) / n
        return fused, dict(H=tokens, Q=Q, K=K, V=V, A=A, m=m, n=n, scale=scale)

    def backward(self, params, c, dfused):
        H, Q, K, V, A, m = c["H"], c["Q"], c["K"], c["V"], c["A"], c["m"]
        dO = dfused[:, None, :] * m[..., None] / c["n"][..., None]
        dA = tc.matmul(dO, V.transpose(0, 2, 1))
        dV = tc.matmul(A.transpose(0, 2, 1), dO)
        dS = A * (dA - (A * dA).sum(axis=-1, keepdims=True)) / c["scale"]
        dQ = tc.matmul(dS, K)
        dK = tc.matmul(dS.transpose(0, 2, 1), Q)
        return {
            "sa.w_q": tc.outer_sum(H, dQ),
            "sa.w_k": tc.outer_sum(H, dK),
            "sa.w_v": tc.outer_sum(H, dV),
            "tokens": dO + tc.matmul(dQ, params["sa.w_q"].T) + tc.matmul(dK, params["sa.w_k"].T)
            + tc.matmul(dV, params["sa.w_v"].T),
            "target": np.zeros((H.shape[0], H.shape[2]), H.dtype),
        }


def baseline_models(**common):
    """Estimators that differ from the full model only in the sequence encoder."""
    return {
        name: LaserCTRClassifier(encoder=name, **common)
        for name in ("mean_pool", "din", "self_attention")
    }


# --------------------------------------------------------------- estimator


class LaserCTRClassifier(ClassifierMixin, BaseEstimator):
    """Click-through-rate classifier over long behaviour sequences.

    Parameters mirror the model configuration; ``encoder`` selects the
    sequence encoder (``laser`` or one of the baselines) and ``gate``,
    ``fusion`` and ``recency`` switch the ablations of the full model.
    """

    def __init__(self, encoder="laser", seq_len=1000, embed_dim=32, qk_dim=8, segment_w=10,
                 gsta_layers=2, ffn_ratio=4, recent_k=2, heads=1, recency_buckets=32,
                 gate="sigmoid", fusion=True, recency=True, hidden=64, optimizer="sgd",
                 learning_rate=0.1, epochs=5, batch_size=128, clip_norm=5.0, emb_init=0.05,
                 random_state=0, verbose=False):
        self.encoder = encoder
        self.seq_len = seq_len
        self.embed_dim = embed_dim
        self.qk_dim = qk_dim
        self.segment_w = segment_w
        self.gsta_layers = gsta_layers
        self.ffn_ratio = ffn_ratio
        self.recent_k = recent_k
        self.heads = heads
        self.recency_buckets = recency_buckets
        self.gate = gate
        self.fusion = fusion
        self.recency = recency
        self.hidden = hidden
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.emb_init = emb_init
        self.random_state = random_state
        self.verbose = verbose

    # -- structure

    def laser_config(self) -> LaserConfig:
        return LaserConfig(
            seq_len=self.seq_len, embed_dim=self.embed_dim, qk_dim=self.qk_dim,
            segment_w=self.segment_w, gsta_layers=self.gsta_layers, ffn_ratio=self.ffn_ratio,
            recent_k=self.recent_k, heads=self.heads, recency_buckets=self.recency_buckets,
            gate=self.gate, fusion=self.fusion, recency=self.recency,
        )

    def _make_encoder(self):
        if self.encoder == "laser":
            return LaserEncoder(self.laser_config())
        if self.encoder == "mean_pool":
            return MeanPoolEncoder(self.embed_dim)
        if self.encoder == "din":
            return DinEncoder(self.embed_dim)
        if self.encoder == "self_attention":
            return SelfAttentionEncoder(self.embed_dim)
        raise ValueError(f"unknown encoder {self.encoder!r}; expected one of {ENCODERS}")

    def _init(self, n_items, n_topics):
        rng = np.random.default_rng(self.random_state)
        enc = self._make_encoder()
        d, a = self.embed_dim, self.emb_init
        params = {
            "emb.item": rng.uniform(-a, a, (n_items, d)).astype(tc.DTYPE),
            "emb.topic": rng.uniform(-a, a, (n_topics, d)).astype(tc.DTYPE),
        }
        params.update(enc.init(rng))
        if isinstance(enc, LaserEncoder):
            enc.keys = [k for k in params if k.split(".")[0] in ("sta", "gsta", "recency")]
        din = enc.fused_dim + d
        params["head.w1"] = glorot(rng, din, self.hidden)
        params["head.b1"] = np.zeros(self.hidden, tc.DTYPE)
        params["head.w2"] = glorot(rng, self.hidden, 1)
        params["head.b2"] = np.zeros(1, tc.DTYPE)
        self.encoder_ = enc
        self.params_ = params
        self.n_items_ = n_items
        self.n_topics_ = n_topics
        self.classes_ = np.array([0, 1])
        self._edges = LaserConfig(recency_buckets=self.recency_buckets).bucket_edges

    # -- batched passes

    def _inputs(self, p, X: SequenceSamples, idx):
        dtype = p["emb.item"].dtype
        u = X.user[idx]
        L = min(X.seq_len, self.seq_len)
        items = X.hist_items[u, :L]
        topics = X.hist_topics[u, :L]
        mask = np.arange(L)[None, :] < np.minimum(X.hist_len[u], L)[:, None]
        tokens = (p["emb.item"][items] + p["emb.topic"][topics]) * mask[..., None]
        deltas = np.maximum(X.request_time[u][:, None] - X.hist_ts[u, :L], 0)
        buckets = bucketize(deltas, self._edges)
        target = p["emb.item"][X.target_item[idx]] + p["emb.topic"][X.target_topic[idx]]
        return dict(items=items, topics=topics, mask=mask, tokens=tokens.astype(dtype),
                    buckets=buckets, t_item=X.target_item[idx], t_topic=X.target_topic[idx],
                    target=target.astype(dtype))

    def _forward(self, params, X, idx):
        inp = self._inputs(params, X, idx)
        fused, cache = self.encoder_.forward(params, inp["tokens"], inp["target"], inp["mask"], inp["buckets"])
        x = np.concatenate([fused, inp["target"]], axis=1)
        a1 = tc.matmul(x, params["head.w1"]) + params["head.b1"]
        h = tc.relu(a1)
        logit = tc.matmul(h, params["head.w2"])[:, 0] + params["head.b2"][0]
        return logit, dict(inp=inp, enc=cache, x=x, a1=a1, h=h, fused=fused)

    def _backward(self, params, c, dlogit):
        g = {}
        dtype = params["head.w2"].dtype
        dlogit = dlogit.astype(dtype)
        g["head.w2"] = tc.matmul(c["h"].T, dlogit[:, None])
        g["head.b2"] = np.array([dlogit.sum()], dtype)
        da1 = dlogit[:, None] * params["head.w2"][:, 0] * (c["a1"] > 0)
        g["head.w1"] = tc.matmul(c["x"].T, da1)
        g["head.b1"] = da1.sum(axis=0)
        dx = tc.matmul(da1, params["head.w1"].T)
        D = self.encoder_.fused_dim
        eg = self.encoder_.backward(params, c["enc"], dx[:, :D])
        dtok = eg.pop("tokens")
        dtarget = eg.pop("target") + dx[:, D:]
        g.update(eg)
        inp = c["inp"]
        m = inp["mask"]
        g_item = np.zeros_like(params["emb.item"])
        g_topic = np.zeros_like(params["emb.topic"])
        sel = dtok[m]
        tc.scatter_add(g_item, inp["items"][m], sel)
        tc.scatter_add(g_topic, inp["topics"][m], sel)
        tc.scatter_add(g_item, inp["t_item"], dtarget)
        tc.scatter_add(g_topic, inp["t_topic"], dtarget)
        g["emb.item"] = g_item
        g["emb.topic"] = g_topic
        return g

    def loss_and_grads(self, X, y, idx=None, params=None):
        """Mean BCE over ``X[idx]`` and its gradient for every parameter."""
        params = self.params_ if params is None else params
        idx = np.arange(len(X)) if idx is None else idx
        logit, cache = self._forward(params, X, idx)
        p = tc.sigmoid(logit.astype(np.float64))
        loss, dlogit = bce_loss(p, y[idx])
        return loss, self._backward(params, cache, dlogit / len(idx)), p

    # -- training

    def fit(self, X, y, eval_set=None):
        X, y = check_samples(X, y)
        self._init(max(X.n_items, 1), max(X.n_topics, 1))
        rng = np.random.default_rng(self.random_state)
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        self.opt_state_ = {"t": 0}
        if self.optimizer != "sgd":
            self.opt_state_["m"] = {k: np.zeros_like(v) for k, v in self.params_.items()}
        if self.optimizer == "adam":
            self.opt_state_["v"] = {k: np.zeros_like(v) for k, v in self.params_.items()}
        self.history_ = []
        self.step_losses_ = []
        n = len(X)
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = perm[start : start + self.batch_size]
                loss, grads, _ = self.loss_and_grads(X, y, idx)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"loss became {loss} at epoch {epoch}, step {len(self.step_losses_)}; "
                        f"last losses {self.step_losses_[-5:]}"
                    )
                self.step_losses_.append(loss)
                self._step(grads)
            rec = {"epoch": epoch, "train_loss": float(np.mean(self.step_losses_[-math.ceil(n / self.batch_size):]))}
            if eval_set is not None:
                Xv, yv = eval_set
                rec["val_auc"] = auc(self.predict_proba(Xv)[:, 1], yv)
            self.history_.append(rec)
            if self.verbose:
                log.info("epoch %s", rec)
        return self

    def _step(self, grads):
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        lr = self.learning_rate
        st = self.opt_state_
        st["t"] += 1
        for k, g in grads.items():
            g = g * scale
            if self.optimizer == "sgd":
                upd = lr * g
            elif self.optimizer == "adagrad":
                st["m"][k] += g * g
                upd = lr * g / (np.sqrt(st["m"][k]) + 1e-8)
            else:
                b1, b2 = 0.9, 0.999
                st["m"][k] = b1 * st["m"][k] + (1 - b1) * g
                st["v"][k] = b2 * st["v"][k] + (1 - b2) * g * g
                mhat = st["m"][k] / (1 - b1 ** st["t"])
                vhat = st["v"][k] / (1 - b2 ** st["t"])
                upd = lr * mhat / (np.sqrt(vhat) + 1e-8)
            self.params_[k] -= upd.astype(tc.DTYPE)

    # -- inference

    def _batches(self, X):
        for start in range(0, len(X), 256):
            yield np.arange(start, min(start + 256, len(X)))

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_samples(X)
        out = [self._forward(self.params_, X, idx)[0] for idx in self._batches(X)]
        return np.concatenate(out) if out else np.zeros(0)

    def predict_proba(self, X):
        p = tc.sigmoid(self.decision_function(X).astype(np.float64))
        return np.stack([1 - p, p], axis=1)

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def transform(self, X):
        """Encoder outputs (the fused representation) for each sample."""
        check_is_fitted(self, "params_")
        X = check_samples(X)
        return np.concatenate([self._forward(self.params_, X, idx)[1]["fused"] for idx in self._batches(X)])

    def score_auc(self, X, y):
        return auc(self.predict_proba(X)[:, 1], y)

    def score_events(self, events, target_item, target_topic, request_time):
        """Probability and fused vector for one user's store events."""
        check_is_fitted(self, "params_")
        X = SequenceSamples.from_events(events, target_item, target_topic, request_time,
                                        self.seq_len, self.n_items_, self.n_topics_)
        logit, cache = self._forward(self.params_, X, np.array([0]))
        return float(tc.sigmoid(logit.astype(np.float64))[0]), cache["fused"][0]

    def count_forward_ops(self, X, idx=None):
        """Matmul work of one forward pass (see :func:`tensor.count_ops`)."""
        idx = np.arange(1) if idx is None else idx
        with tc.count_ops() as counter:
            self._forward(self.params_, X, idx)
        return counter

    # -- persistence

    def save(self, path):
        from ..checkpoint import save_model

        check_is_fitted(self, "params_")
        save_model(path, self)

    @classmethod
    def load(cls, path):
        from ..checkpoint import load_model

        return load_model(path)
