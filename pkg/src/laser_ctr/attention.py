"""Segmented sigmoid-gated target attention with a stacked global refiner.

Pipeline for one user (batched internally over a leading axis):

    tokens + recency -> pad to a multiple of w -> segmented target attention
    -> per-segment FFN + residual + LayerNorm -> stacked target attention over
    the compressed rows -> fusion [z | max-pool | most recent segments]

Sequences are stored most-recent-first, so the "recent" segments are the
leading rows of the compressed matrix. Parameters live in a flat ``dict``
keyed by dotted names (``sta.w_q``, ``gsta.0.w_v``, ``recency.table`` ...),
which is also the layout used by checkpoints and the optimizer.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .tensor import DTYPE, ShapeError

log = logging.getLogger(__name__)

SECONDS_PER_YEAR = 365 * 24 * 3600

_skew_lock = threading.Lock()
_clock_skew_events = 0


def clock_skew_events() -> int:
    """Number of history events seen with a timestamp after the request time."""
    return _clock_skew_events


@dataclass(frozen=True)
class LaserConfig:
    seq_len: int = 1000
    embed_dim: int = 32
    qk_dim: int = 8
    segment_w: int = 10
    gsta_layers: int = 2
    ffn_ratio: int = 4
    recent_k: int = 2
    heads: int = 1
    recency_buckets: int = 32
    gamma: float | None = None
    gate: str = "sigmoid"  # "softmax" is the ablation
    fusion: bool = True
    recency: bool = True

    def __post_init__(self):
        if self.gate not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown gate {self.gate!r}")
        for name in ("embed_dim", "qk_dim", "segment_w", "gsta_layers", "heads", "recency_buckets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.qk_dim > self.embed_dim:
            raise ValueError("qk_dim must not exceed embed_dim")
        if self.qk_dim % self.heads or self.embed_dim % self.heads:
            raise ValueError("qk_dim and embed_dim must be divisible by heads")
        if self.recent_k < 0 or self.recent_k > self.n_segments:
            raise ValueError(f"recent_k={self.recent_k} exceeds {self.n_segments} segments")
        if self.ffn_ratio < 1:
            raise ValueError("ffn_ratio must be >= 1")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @property
    def n_segments(self) -> int:
        return max(1, -(-self.seq_len // self.segment_w))

    @property
    def padded_len(self) -> int:
        return self.n_segments * self.segment_w

    @property
    def scale(self) -> float:
        if self.gamma is not None:
            return float(self.gamma)
        return math.sqrt(self.qk_dim // self.heads)

    @property
    def fused_dim(self) -> int:
        if not self.fusion:
            return self.embed_dim
        return self.embed_dim * (2 + self.recent_k)

    @property
    def bucket_edges(self) -> np.ndarray:
        return recency_edges(self.recency_buckets)


def recency_edges(n_buckets: int, horizon: float = SECONDS_PER_YEAR) -> np.ndarray:
    """Log2-spaced bucket boundaries from 1 second to ``horizon`` seconds."""
    if n_buckets < 2:
        return np.zeros(0)
    return np.exp2(np.linspace(0.0, math.log2(horizon), n_buckets - 1))


def bucketize(deltas, edges) -> np.ndarray:
    """Bucket index per time delta; a delta equal to an edge goes to the higher bucket."""
    return np.searchsorted(edges, deltas, side="right")


def glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)


def init_params(cfg: LaserConfig, rng=None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(rng)
    d, dq, hid = cfg.embed_dim, cfg.qk_dim, cfg.ffn_ratio * cfg.embed_dim
    p = {
        "sta.w_q": glorot(rng, d, dq),
        "sta.w_k": glorot(rng, d, dq),
        "sta.w_v": glorot(rng, d, d),
        "sta.ffn_w1": glorot(rng, d, hid),
        "sta.ffn_b1": np.zeros(hid, DTYPE),
        "sta.ffn_w2": glorot(rng, hid, d),
        "sta.ffn_b2": np.zeros(d, DTYPE),
        "sta.ln_gain": np.ones(d, DTYPE),
        "sta.ln_bias": np.zeros(d, DTYPE),
    }
    for layer in range(cfg.gsta_layers):
        for name in ("w_q", "w_k", "w_v"):
            p[f"gsta.{layer}.{name}"] = glorot(rng, d, d)
    p["recency.table"] = np.zeros((cfg.recency_buckets, d), DTYPE)
    return p


@dataclass
class SequenceBatchInput:
    """One user's history (most recent first) and the candidate item."""

    tokens: np.ndarray  # (L, d)
    timestamps: np.ndarray  # (L,) seconds
    request_time: float
    valid_len: int
    target: np.ndarray  # (d,)

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        self.tokens = tc.as_matrix(tokens, tokens.dtype if tokens.dtype.kind == "f" else DTYPE)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.target = np.asarray(self.target)
        if self.timestamps.shape != (self.tokens.shape[0],):
            raise ShapeError(f"{self.timestamps.shape[0]} timestamps for {self.tokens.shape[0]} tokens")
        if self.target.shape != (self.tokens.shape[1],):
            raise ShapeError(f"target shape {self.target.shape} vs tokens {self.tokens.shape}")
        if not 0 <= self.valid_len <= self.tokens.shape[0]:
            raise ValueError(f"valid_len {self.valid_len} out of range")

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.tokens.shape[0]) < self.valid_len


def recency_buckets(timestamps, request_time, valid, edges) -> np.ndarray:
    global _clock_skew_events
    deltas = np.asarray(request_time, dtype=np.float64)[..., None] - np.asarray(timestamps, dtype=np.float64)
    skewed = int(np.count_nonzero((deltas < 0) & valid))
    if skewed:
        with _skew_lock:
            _clock_skew_events += skewed
        log.warning("clamped %d negative recency deltas to zero", skewed)
    return bucketize(np.maximum(deltas, 0.0), edges)


def apply_recency(inp: SequenceBatchInput, table: np.ndarray, edges=None) -> np.ndarray:
    """Add the recency embedding of each valid event to its token."""
    edges = recency_edges(table.shape[0]) if edges is None else edges
    mask = inp.mask
    buckets = recency_buckets(inp.timestamps, inp.request_time, mask, edges)
    return inp.tokens + np.where(mask[:, None], table[buckets], 0).astype(inp.tokens.dtype)


def split_seq(h: np.ndarray, w: int) -> list[np.ndarray]:
    if w < 1 or h.shape[0] % w:
        raise ShapeError(f"sequence of {h.shape[0]} rows is not a multiple of w={w}")
    return [h[i : i + w] for i in range(0, h.shape[0], w)]


def _head_slices(dim, heads):
    size = dim // heads
    return [slice(i * size, (i + 1) * size) for i in range(heads)]


def sta_naive(target, h, params, cfg: LaserConfig, mask=None):
    """Segment-by-segment reference form of the compression step.

    Returns ``(compressed (L', d), scores (L, heads))``.
    """
    h = np.asarray(h)
    L = h.shape[0]
    mask = np.ones(L, bool) if mask is None else np.asarray(mask, bool)
    w = cfg.segment_w
    segs = split_seq(h, w)
    qsl = _head_slices(cfg.qk_dim, cfg.heads)
    vsl = _head_slices(h.shape[1], cfg.heads)
    out = np.zeros((len(segs), h.shape[1]), h.dtype)
    scores = np.zeros((L, cfg.heads), h.dtype)
    for i, seg in enumerate(segs):
        m = mask[i * w : (i + 1) * w]
        q = tc.matmul(target, params["sta.w_q"])
        k = tc.matmul(seg, params["sta.w_k"])
        v = tc.matmul(seg, params["sta.w_v"])
        for hd in range(cfg.heads):
            pre = tc.matmul(k[:, qsl[hd]], q[qsl[hd]]) / cfg.scale
            if cfg.gate == "sigmoid":
                a = np.where(m, tc.sigmoid(pre), 0)
            elif m.any():
                a = tc.softmax_rows(pre[None], m[None])[0]
            else:
                a = np.zeros_like(pre)
            a = a.astype(h.dtype)
            scores[i * w : (i + 1) * w, hd] = a
            out[i, vsl[hd]] = tc.matmul(a, v[:, vsl[hd]])
    return out, scores


def _segment_softmax(pre, mask4):
    """Softmax over the window axis (axis 2) of (B, L', w, heads)."""
    z = np.where(mask4, pre, tc.MASK_FILL)
    z = z - z.max(axis=2, keepdims=True)
    e = np.where(mask4, np.exp(z), 0)
    den = e.sum(axis=2, keepdims=True)
    return e / np.where(den > 0, den, 1)


def _sta_batch(T, H, mask, p, cfg: LaserConfig):
    B, L, d = H.shape
    w, nh = cfg.segment_w, cfg.heads
    Ls = L // w
    Q = tc.matmul(T, p["sta.w_q"])  # (B, dq)
    K = tc.matmul(H, p["sta.w_k"])  # (B, L, dq)
    V = tc.matmul(H, p["sta.w_v"])  # (B, L, d)
    pre = (K * Q[:, None, :]).reshape(B, L, nh, -1).sum(-1) / H.dtype.type(cfg.scale)
    if cfg.gate == "sigmoid":
        alpha = tc.sigmoid(pre) * mask[..., None]
    else:
        alpha = _segment_softmax(
            pre.reshape(B, Ls, w, nh), mask.reshape(B, Ls, w, 1)
        ).reshape(B, L, nh)
    alpha = alpha.astype(H.dtype)
    # (B, L', heads, 1, w) x (B, L', heads, w, d/heads) -> (B, L', heads, 1, d/heads)
    A = tc.reshape_segments(alpha, w).transpose(0, 1, 3, 2)[..., None, :]
    Vr = tc.reshape_segments(V, w).reshape(B, Ls, w, nh, d // nh).transpose(0, 1, 3, 2, 4)
    S = tc.matmul(A, Vr)[..., 0, :].reshape(B, Ls, d)
    return S, dict(Q=Q, K=K, V=V, pre=pre, alpha=alpha)


def sta_vectorized(target, h, params, cfg: LaserConfig, mask=None):
    """Global projections, global scores, then a reshape into segments.

    Same contract as :func:`sta_naive`.
    """
    h = np.asarray(h)
    mask = np.ones(h.shape[0], bool) if mask is None else np.asarray(mask, bool)
    if h.shape[0] % cfg.segment_w:
        raise ShapeError(f"sequence of {h.shape[0]} rows is not a multiple of w={cfg.segment_w}")
    S, c = _sta_batch(np.asarray(target)[None], h[None], mask[None], params, cfg)
    return S[0], c["alpha"][0]


def _refine_batch(S, p):
    A1 = tc.matmul(S, p["sta.ffn_w1"]) + p["sta.ffn_b1"]
    R = tc.relu(A1)
    U = tc.matmul(R, p["sta.ffn_w2"]) + p["sta.ffn_b2"] + S
    mu = U.mean(axis=-1, keepdims=True)
    var = ((U - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + U.dtype.type(tc.LN_EPS))
    xhat = (U - mu) * inv
    Y = xhat * p["sta.ln_gain"] + p["sta.ln_bias"]
    return Y, dict(A1=A1, R=R, xhat=xhat, inv=inv)


def segment_refine(compressed, params):
    """Row-wise FFN with residual, then LayerNorm."""
    return _refine_batch(np.asarray(compressed)[None], params)[0][0]


def _gsta_batch(T, Y, seg_mask, p, cfg: LaserConfig):
    t = T
    scale = Y.dtype.type(math.sqrt(Y.shape[-1]))
    layers = []
    for layer in range(cfg.gsta_layers):
        wq, wk, wv = (p[f"gsta.{layer}.{n}"] for n in ("w_q", "w_k", "w_v"))
        q = tc.matmul(t, wq)
        Kg = tc.matmul(Y, wk)
        Vg = tc.matmul(Y, wv)
        logits = tc.matmul(Kg, q[..., None])[..., 0] / scale
        a = tc.softmax_rows(logits, seg_mask).astype(Y.dtype)
        o = tc.matmul(a[:, None, :], Vg)[:, 0, :]
        layers.append(dict(t=t, q=q, Kg=Kg, Vg=Vg, a=a))
        t = t + o
    return t, layers


def gsta_forward(target, compressed, layers, seg_mask=None):
    """Stacked target attention over the compressed rows.

    ``layers`` is a list of ``(w_q, w_k, w_v)`` triples. Returns ``(z, attn_maps)``.
    """
    Y = np.asarray(compressed)
    seg_mask = np.ones(Y.shape[0], bool) if seg_mask is None else np.asarray(seg_mask, bool)
    if not layers:
        raise ValueError("gsta needs at least one layer")
    if not seg_mask.any():
        raise ValueError("all segments are masked")
    p = {}
    for i, (wq, wk, wv) in enumerate(layers):
        p[f"gsta.{i}.w_q"], p[f"gsta.{i}.w_k"], p[f"gsta.{i}.w_v"] = wq, wk, wv
    cfg = _GstaOnly(len(layers))
    z, cache = _gsta_batch(np.asarray(target)[None], Y[None], seg_mask[None], p, cfg)
    return z[0], [c["a"][0] for c in cache]


@dataclass
class _GstaOnly:
    gsta_layers: int


def _fuse_batch(z, Y, seg_mask, cfg: LaserConfig):
    if not cfg.fusion:
        return z, None
    masked = np.where(seg_mask[..., None], Y, -np.inf)
    arg = masked.argmax(axis=1)  # (B, d)
    pooled = np.take_along_axis(Y, arg[:, None, :], axis=1)[:, 0, :]
    k = cfg.recent_k
    recent = np.zeros((Y.shape[0], k, Y.shape[2]), Y.dtype)
    kk = min(k, Y.shape[1])
    recent[:, :kk] = np.where(seg_mask[:, :kk, None], Y[:, :kk], 0)
    fused = np.concatenate([z, pooled, recent.reshape(Y.shape[0], -1)], axis=1)
    return fused, dict(arg=arg, pooled=pooled, recent=recent)


def fuse(z, compressed, recent_k, seg_mask=None):
    """Concatenate ``[z | column max over valid rows | first recent_k rows]``.

    Recent rows that are masked (or missing) contribute zero vectors.
    """
    Y = np.asarray(compressed)
    seg_mask = np.ones(Y.shape[0], bool) if seg_mask is None else np.asarray(seg_mask, bool)
    if recent_k > Y.shape[0]:
        raise ValueError(f"recent_k={recent_k} exceeds {Y.shape[0]} segments")
    cfg = _FuseOnly(recent_k)
    fused, c = _fuse_batch(np.asarray(z)[None], Y[None], seg_mask[None], cfg)
    return FusionOutput(
        z=np.asarray(z), max_pooled=c["pooled"][0], recent_segments=c["recent"][0],
        fused=fused[0], compressed=Y, sta_scores=None,
    )


@dataclass
class _FuseOnly:
    recent_k: int
    fusion: bool = True


@dataclass
class FusionOutput:
    z: np.ndarray
    max_pooled: np.ndarray | None
    recent_segments: np.ndarray | None
    fused: np.ndarray
    compressed: np.ndarray
    sta_scores: np.ndarray | None
    gsta_attention: list = field(default_factory=list)
    cache: dict | None = field(default=None, repr=False)


def _pad(tokens, mask, buckets, Lp):
    B, L, d = tokens.shape
    if L == Lp:
        return tokens, mask, buckets
    pad = Lp - L
    return (
        np.concatenate([tokens, np.zeros((B, pad, d), tokens.dtype)], axis=1),
        np.concatenate([mask, np.zeros((B, pad), bool)], axis=1),
        np.concatenate([buckets, np.zeros((B, pad), buckets.dtype)], axis=1),
    )


def forward_batch(params, cfg: LaserConfig, tokens, target, mask, buckets):
    """Batched forward pass.

    tokens (B, L, d), target (B, d), mask (B, L) bool, buckets (B, L) int.
    Returns ``(fused (B, D), cache)``; the cache feeds :func:`backward_batch`.
    """
    tokens = np.asarray(tokens)
    B, L, d = tokens.shape
    if d != cfg.embed_dim or target.shape != (B, d):
        raise ShapeError(f"tokens {tokens.shape} / target {target.shape} vs embed_dim {cfg.embed_dim}")
    mask = np.asarray(mask, bool)
    buckets = np.asarray(buckets)
    if cfg.recency:
        H = tokens + np.where(mask[..., None], params["recency.table"][buckets], 0).astype(tokens.dtype)
    else:
        H = tokens
    w = cfg.segment_w
    Lp = max(w, -(-L // w) * w)
    H, maskp, bp = _pad(H, mask, buckets, Lp)
    S, sta = _sta_batch(target, H, maskp, params, cfg)
    Y, ref = _refine_batch(S, params)
    seg_mask = maskp.reshape(B, -1, w).any(axis=2)
    seg_mask[:, 0] = True  # keeps an empty history well defined
    z, gsta = _gsta_batch(target, Y, seg_mask, params, cfg)
    fused, fz = _fuse_batch(z, Y, seg_mask, cfg)
    cache = dict(
        L=L, H=H, mask=maskp, buckets=bp, target=target, S=S, Y=Y,
        seg_mask=seg_mask, z=z, sta=sta, ref=ref, gsta=gsta, fuse=fz,
    )
    return fused, cache


def backward_batch(params, cfg: LaserConfig, cache, dfused):
    """Gradients of ``sum(dfused * fused)`` for every parameter and input.

    Returns a dict keyed like ``params`` plus ``tokens`` (B, L, d) and
    ``target`` (B, d).
    """
    if cache is None:
        raise RuntimeError("backward called without a cached forward pass")
    H, maskp, Y, S = cache["H"], cache["mask"], cache["Y"], cache["S"]
    T = cache["target"]
    B, Lp, d = H.shape
    w, nh = cfg.segment_w, cfg.heads
    Ls = Lp // w
    dt_ = H.dtype
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dfused = np.asarray(dfused, dt_)

    # fusion
    dY = np.zeros_like(Y)
    if cfg.fusion:
        dz = dfused[:, :d]
        dpool = dfused[:, d : 2 * d]
        drec = dfused[:, 2 * d :].reshape(B, cfg.recent_k, d)
        kk = min(cfg.recent_k, Ls)
        dY[:, :kk] += np.where(cache["seg_mask"][:, :kk, None], drec[:, :kk], 0)
        arg = cache["fuse"]["arg"]
        np.put_along_axis(
            dY, arg[:, None, :],
            np.take_along_axis(dY, arg[:, None, :], axis=1) + dpool[:, None, :], axis=1,
        )
    else:
        dz = dfused

    # stacked global attention
    dt = dz.copy()
    scale = dt_.type(math.sqrt(d))
    for layer in reversed(range(cfg.gsta_layers)):
        c = cache["gsta"][layer]
        wq, wk, wv = (params[f"gsta.{layer}.{n}"] for n in ("w_q", "w_k", "w_v"))
        a, Kg, Vg, q, t_prev = c["a"], c["Kg"], c["Vg"], c["q"], c["t"]
        do = dt
        da = tc.matmul(Vg, do[..., None])[..., 0]  # (B, L')
        dVg = a[..., None] * do[:, None, :]
        dlog = a * (da - (a * da).sum(axis=1, keepdims=True))
        dq = tc.matmul(dlog[:, None, :], Kg)[:, 0, :] / scale
        dKg = dlog[..., None] * q[:, None, :] / scale
        grads[f"gsta.{layer}.w_q"] += tc.matmul(t_prev.T, dq)
        grads[f"gsta.{layer}.w_k"] += tc.outer_sum(Y, dKg)
        grads[f"gsta.{layer}.w_v"] += tc.outer_sum(Y, dVg)
        dY += tc.matmul(dKg, wk.T) + tc.matmul(dVg, wv.T)
        dt = dt + tc.matmul(dq, wq.T)
    dT = dt

    # refine: Y = LN(FFN(S) + S)
    r = cache["ref"]
    grads["sta.ln_gain"] += (dY * r["xhat"]).sum(axis=(0, 1))
    grads["sta.ln_bias"] += dY.sum(axis=(0, 1))
    dxhat = dY * params["sta.ln_gain"]
    xhat = r["xhat"]
    dU = r["inv"] * (
        dxhat - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    grads["sta.ffn_w2"] += tc.outer_sum(r["R"], dU)
    grads["sta.ffn_b2"] += dU.sum(axis=(0, 1))
    dA1 = tc.matmul(dU, params["sta.ffn_w2"].T) * (r["A1"] > 0)
    grads["sta.ffn_w1"] += tc.outer_sum(S, dA1)
    grads["sta.ffn_b1"] += dA1.sum(axis=(0, 1))
    dS = dU + tc.matmul(dA1, params["sta.ffn_w1"].T)

    # segmented attention
    s = cache["sta"]
    alpha, V, K, Q = s["alpha"], s["V"], s["K"], s["Q"]
    dSr = dS.reshape(B, Ls, 1, nh, d // nh)
    Vr = V.reshape(B, Ls, w, nh, d // nh)
    ar = alpha.reshape(B, Ls, w, nh, 1)
    dV = (ar * dSr).reshape(B, Lp, d)
    dalpha = (Vr * dSr).sum(-1).reshape(B, Lp, nh)
    if cfg.gate == "sigmoid":
        dpre = dalpha * alpha * (1 - alpha) * maskp[..., None]
    else:
        a4 = alpha.reshape(B, Ls, w, nh)
        d4 = dalpha.reshape(B, Ls, w, nh)
        dpre = (a4 * (d4 - (a4 * d4).sum(axis=2, keepdims=True))).reshape(B, Lp, nh)
    dpre = dpre / dt_.type(cfg.scale)
    dpre_full = np.repeat(dpre, cfg.qk_dim // nh, axis=2)  # (B, Lp, dq)
    dQ = (dpre_full * K).sum(axis=1)
    dK = dpre_full * Q[:, None, :]
    grads["sta.w_q"] += tc.matmul(T.T, dQ)
    grads["sta.w_k"] += tc.outer_sum(H, dK)
    grads["sta.w_v"] += tc.outer_sum(H, dV)
    dH = tc.matmul(dK, params["sta.w_k"].T) + tc.matmul(dV, params["sta.w_v"].T)
    dT = dT + tc.matmul(dQ, params["sta.w_q"].T)

    if cfg.recency:
        sel = maskp
        tc.scatter_add(grads["recency.table"], cache["buckets"][sel], dH[sel])
    grads["tokens"] = dH[:, : cache["L"]]
    grads["target"] = dT
    return grads


def laser_forward(inp: SequenceBatchInput, params, cfg: LaserConfig) -> FusionOutput:
    """Full forward pass for one user; the result carries a backward cache."""
    mask = inp.mask
    buckets = recency_buckets(inp.timestamps, inp.request_time, mask, cfg.bucket_edges)
    fused, cache = forward_batch(
        params, cfg, inp.tokens[None], inp.target[None], mask[None], buckets[None]
    )
    fz = cache["fuse"]
    return FusionOutput(
        z=cache["z"][0],
        max_pooled=fz["pooled"][0] if fz else None,
        recent_segments=fz["recent"][0] if fz else None,
        fused=fused[0],
        compressed=cache["Y"][0],
        sta_scores=_squeeze_heads(cache["sta"]["alpha"][0, : inp.tokens.shape[0]]),
        gsta_attention=[g["a"][0] for g in cache["gsta"]],
        cache=cache,
    )


def _squeeze_heads(scores):
    return scores[:, 0] if scores.shape[1] == 1 else scores


def laser_backward(out: FusionOutput, params, cfg: LaserConfig, upstream_grad):
    """Gradients w.r.t. every parameter, the input tokens and the target."""
    if out.cache is None:
        raise RuntimeError("laser_backward needs the output of laser_forward")
    g = backward_batch(params, cfg, out.cache, np.asarray(upstream_grad)[None])
    g["tokens"] = g["tokens"][0]
    g["target"] = g["target"][0]
    return g


def finite_diff_grad(loss_fn, params: dict, h: float = 1e-3, keys=None) -> dict:
    """Central-difference gradient of ``loss_fn(params)`` for each array in ``params``.

    Arrays are perturbed in place and restored afterwards.
    """
    out = {}
    for name in keys or list(params):
        arr = params[name]
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(params)
            flat[i] = orig - h
            fm = loss_fn(params)
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out
