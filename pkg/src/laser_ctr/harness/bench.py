"""Wall-clock benchmarks: attention kernels, the store and the wire codec."""
from __future__ import annotations

import os
import tempfile
import time

import numpy as np
from scipy import stats

from ..attention import LaserConfig, forward_batch, init_params, sta_naive, sta_vectorized
from ..serving import protocol as P
from ..store import default_schema, pack_block, store_open

LENGTHS = (500, 1000, 2000, 4000)


def best_time(fn, repeats=5, min_time=0.05):
    """Minimum over ``repeats`` of the mean time of enough calls to fill ``min_time``."""
    fn()
    n = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        if time.perf_counter() - t0 >= min_time or n >= 1 << 12:
            break
        n *= 2
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        best = min(best, (time.perf_counter() - t0) / n)
    return best


def linear_fit(xs, ys):
    fit = stats.linregress(np.asarray(xs, float), np.asarray(ys, float))
    return {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.rvalue**2}


def _laser_inputs(cfg, batch, rng):
    L, d = cfg.seq_len, cfg.embed_dim
    tokens = rng.standard_normal((batch, L, d)).astype(np.float32)
    target = rng.standard_normal((batch, d)).astype(np.float32)
    mask = np.ones((batch, L), bool)
    buckets = rng.integers(0, cfg.recency_buckets, (batch, L))
    return tokens, target, mask, buckets


def laser_forward_times(lengths=LENGTHS, batch=8, embed_dim=32, qk_dim=8, segment_w=10, seed=0, repeats=5):
    rng = np.random.default_rng(seed)
    out = {}
    for L in lengths:
        cfg = LaserConfig(seq_len=L, embed_dim=embed_dim, qk_dim=qk_dim, segment_w=segment_w)
        params = init_params(cfg, rng)
        args = _laser_inputs(cfg, batch, rng)
        out[L] = best_time(lambda: forward_batch(params, cfg, *args), repeats=repeats)
    return out


def bench_attention(lengths=LENGTHS, embed_dim=32, qk_dim=8, segment_w=10, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        cfg = LaserConfig(seq_len=L, embed_dim=embed_dim, qk_dim=qk_dim, segment_w=segment_w)
        params = init_params(cfg, rng)
        h = rng.standard_normal((L, embed_dim)).astype(np.float32)
        t = rng.standard_normal(embed_dim).astype(np.float32)
        naive = best_time(lambda: sta_naive(t, h, params, cfg), repeats=3)
        vec = best_time(lambda: sta_vectorized(t, h, params, cfg), repeats=3)
        rows.append({"L": L, "sta_naive_s": naive, "sta_vectorized_s": vec, "speedup": naive / vec})
    fwd = laser_forward_times(lengths, embed_dim=embed_dim, qk_dim=qk_dim, segment_w=segment_w, seed=seed)
    for row in rows:
        row["laser_forward_s"] = fwd[row["L"]]
    return {"suite": "attention", "rows": rows, "forward_fit": linear_fit(list(fwd), list(fwd.values()))}


def bench_store(n_users=200, events_per_user=200, reads=2000, seed=0, path=None):
    rng = np.random.default_rng(seed)
    schema = default_schema()
    with tempfile.TemporaryDirectory() as tmp:
        store = store_open(path or os.path.join(tmp, "vault"), schema)
        lat_append = []
        t0 = time.perf_counter()
        for i in range(events_per_user):
            for u in range(n_users):
                ev = {"item_id": int(rng.integers(1 << 20)), "topic": int(rng.integers(100)), "scenario": 0,
                      "action": 1, "timestamp": 1_000_000 + i, "similarity": None, "embedding_ref": None}
                s = time.perf_counter()
                store.append_event(u, ev)
                lat_append.append(time.perf_counter() - s)
        append_s = time.perf_counter() - t0
        store.run_merge()
        lat_get = []
        for _ in range(reads):
            u = int(rng.integers(n_users))
            s = time.perf_counter()
            store.get_last_n(u, 100)
            lat_get.append(time.perf_counter() - s)
        st = store.stats()
        store.close()
    lat_get = np.array(lat_get)
    hist, edges = np.histogram(lat_get * 1e6, bins=10)
    return {
        "suite": "store",
        "appends_per_s": len(lat_append) / append_s,
        "append_p99_us": float(np.percentile(lat_append, 99) * 1e6),
        "get_per_s": reads / lat_get.sum(),
        "get_p50_us": float(np.percentile(lat_get, 50) * 1e6),
        "get_p99_us": float(np.percentile(lat_get, 99) * 1e6),
        "get_hist_us": {"edges": edges.round(1).tolist(), "counts": hist.tolist()},
        "disk_bytes": st["disk_bytes"],
    }


def _sample_block(n_events=1000, seed=0):
    rng = np.random.default_rng(seed)
    ts = 1_700_000_000 - np.cumsum(rng.integers(1, 600, n_events))
    events = [
        {"item_id": int(rng.integers(10_000)), "topic": int(rng.integers(100)), "scenario": int(i % 3),
         "action": int(rng.integers(4)), "timestamp": int(t), "similarity": None, "embedding_ref": None}
        for i, t in enumerate(ts)
    ]
    return pack_block(default_schema(), events, 1)


def bench_wire(frames=2000, seed=0):
    payload = _sample_block(seed=seed)
    out = {"suite": "wire", "payload_bytes": len(payload)}
    for compress in (False, True):
        wire = P.encode_frame(P.Op.GET_LAST_N, 1, payload, compress=compress)
        t0 = time.perf_counter()
        for i in range(frames):
            P.decode_frame(P.encode_frame(P.Op.GET_LAST_N, i, payload, compress=compress))
        dt = time.perf_counter() - t0
        key = "compressed" if compress else "raw"
        out[f"{key}_frames_per_s"] = frames / dt
        out[f"{key}_wire_bytes"] = len(wire)
    out["compression_ratio"] = out["compressed_wire_bytes"] / out["raw_wire_bytes"]
    return out


SUITES = {"attention": bench_attention, "store": bench_store, "wire": bench_wire}


def run_suite(name, **kw):
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}")
    return SUITES[name](**kw)


def format_lines(report):
    lines = []
    for key, val in report.items():
        if key == "rows":
            for row in val:
                lines.append(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        elif isinstance(val, dict):
            lines.append(f"{key} " + " ".join(f"{k}={v}" for k, v in val.items()))
        elif isinstance(val, float):
            lines.append(f"{key}={val:.6g}")
        else:
            lines.append(f"{key}={val}")
    return lines
