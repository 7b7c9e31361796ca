"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line through the ``record`` fixture before it
asserts, so the terminal summary lists all criteria even when some fail.
"""
import math
import random
import socket
import struct
import time

import numpy as np

from laser_ctr import attention as A
from laser_ctr import tensor as tc
from laser_ctr.attention import LaserConfig, SequenceBatchInput
from laser_ctr.flops import (
    DEFAULT_CONFIG, flops_laser, flops_self_attention, flops_target_attention, laser_closed_form,
)
from laser_ctr.harness.bench import laser_forward_times, linear_fit
from laser_ctr.harness.experiments import (
    ABLATIONS, BASELINES, DEEP_MODEL, DEEP_SYNTH, REFERENCE_MODEL, REFERENCE_SYNTH, run_grid,
)
from laser_ctr.harness.model import LaserCTRClassifier
from laser_ctr.harness.synth import SynthConfig, gen_synthetic
from laser_ctr.serving import protocol as P
from laser_ctr.serving.client import Client
from laser_ctr.serving.protocol import Op
from laser_ctr.serving.server import parse_addr
from laser_ctr.store import default_schema, pack_block, store_open, string_baseline_encode, unpack_block

from fuzz import fuzz_frames, valid_request
from fuzz import random_event as wire_event
from netutil import spawn_server, stop
from oracles import central_diff
from store_model import SCHEMA, Workload, random_event


def _random_sta_config(rng, i):
    heads = int(rng.integers(1, 3))
    w = int(rng.integers(1, 51))
    L = w * int(rng.integers(-(-10 // w), 2000 // w + 1))
    d = int(rng.integers(2, 65)) * 2 if heads == 2 else int(rng.integers(4, 129))
    dq = int(rng.integers(1, 17)) * 2 if heads == 2 else int(rng.integers(2, 33))
    dq = min(dq, d)
    gate = ("sigmoid", "softmax")[i % 2]
    return LaserConfig(seq_len=L, embed_dim=d, qk_dim=dq, segment_w=w, heads=heads, gate=gate, recent_k=0)


def test_c1_vectorized_sta_equals_naive(record):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(200):
        cfg = _random_sta_config(rng, i)
        params = A.init_params(cfg, rng)
        h = rng.standard_normal((cfg.seq_len, cfg.embed_dim)).astype(np.float32)
        target = rng.standard_normal(cfg.embed_dim).astype(np.float32)
        mask = np.arange(cfg.seq_len) < int(rng.integers(1, cfg.seq_len + 1))
        a, _ = A.sta_naive(target, h, params, cfg, mask)
        b, _ = A.sta_vectorized(target, h, params, cfg, mask)
        worst = max(worst, float(np.abs(a - b).max() / max(np.abs(a).max(), 1e-30)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-5 and secs < 60
    record(1, "vectorized STA equals naive STA", ok, f"200 configs, max rel err {worst:.2e}, {secs:.1f}s")
    assert ok


def test_c2_flops_reproduction(record):
    cfg = DEFAULT_CONFIG
    sa = flops_self_attention(cfg).total
    closed = laser_closed_form(cfg)
    ta = flops_target_attention(cfg).total
    laser = flops_laser(cfg).total
    ratio = sa / closed
    ok = (sa == 3.21536e8 and math.isclose(closed, 4.01e7, rel_tol=1e-2) and math.isclose(ta, 3.30e7, rel_tol=1e-2)
          and ratio >= 7.5 and sa / laser >= 7.5)
    record(2, "FLOPs reproduction", ok,
           f"SA={sa:.6g} LASER closed form={closed:.6g} TA={ta:.6g} ratio={ratio:.2f} (sum of parts {sa / laser:.2f})")
    assert ok


def _grad_rel_errors(analytic, numeric):
    worst = {}
    for k, num in numeric.items():
        sel = np.abs(num) > 1e-4
        rel = np.abs(analytic[k] - num)[sel] / np.abs(num[sel])
        worst[k] = float(rel.max()) if rel.size else 0.0
    return worst


def _module_fd():
    cfg = LaserConfig(seq_len=20, embed_dim=8, qk_dim=4, segment_w=5, gsta_layers=2, recent_k=2)
    rng = np.random.default_rng(5)
    p = A.init_params(cfg, rng)
    p["recency.table"] = (rng.standard_normal(p["recency.table"].shape) * 0.3).astype(np.float32)
    for k in ("sta.ffn_b1", "sta.ffn_b2", "sta.ln_bias"):
        p[k] = (rng.standard_normal(p[k].shape) * 0.1).astype(np.float32)
    p64 = {k: v.astype(np.float64) for k, v in p.items()}
    inp = SequenceBatchInput(rng.standard_normal((20, 8)), 10_000.0 - np.arange(20) * 400 - 1, 10_000.0, 17,
                             rng.standard_normal(8))
    out = A.laser_forward(inp, p64, cfg)
    up = rng.standard_normal(out.fused.shape)
    g = A.laser_backward(out, p64, cfg, up)
    arrays = dict(p64, tokens=inp.tokens.copy(), target=inp.target.copy())

    def f():
        i = SequenceBatchInput(arrays["tokens"], inp.timestamps, inp.request_time, inp.valid_len, arrays["target"])
        return float((A.laser_forward(i, p64, cfg).fused * up).sum())

    return _grad_rel_errors(g, central_diff(f, arrays, h=1e-5))


def _ctr_model_fd():
    c = gen_synthetic(SynthConfig(n_users=4, n_items=30, n_topics=10, n_interest_topics=5, planted_topics_per_user=2,
                                  planted_events=(2, 3), history_len=(20, 20), active_days=40, stale_days=80, seed=1))
    X, y = c.samples(seq_len=20)
    m = LaserCTRClassifier(seq_len=20, embed_dim=8, qk_dim=4, segment_w=5, gsta_layers=2, hidden=6, emb_init=0.5)
    m._init(X.n_items, X.n_topics)
    rng = np.random.default_rng(0)
    p64 = {}
    for k, v in m.params_.items():
        if k.endswith(("b1", "b2", "ln_bias", "recency.table")):
            v = rng.standard_normal(v.shape) * 0.3
        p64[k] = v.astype(np.float64)
    idx = np.arange(6)
    _, g, _ = m.loss_and_grads(X, y, idx, params=p64)
    fd = central_diff(lambda: m.loss_and_grads(X, y, idx, params=p64)[0], p64, h=1e-5)
    return _grad_rel_errors(g, fd)


def test_c3_gradients_match_finite_differences(record):
    t0 = time.perf_counter()
    module = _module_fd()
    model = _ctr_model_fd()
    secs = time.perf_counter() - t0
    worst = max(list(module.values()) + list(model.values()))
    ok = worst < 2e-2 and secs < 120
    record(3, "analytic gradients match central differences", ok,
           f"{len(module)} module + {len(model)} model tensors, max rel err {worst:.2e}, {secs:.1f}s")
    assert ok, {**module, **{f"model:{k}": v for k, v in model.items()}}


def _silent_segment_setup(gate):
    """One segment of w=10 whose keys all point away from the query."""
    d, dq, w = 8, 4, 10
    cfg = LaserConfig(seq_len=w, embed_dim=d, qk_dim=dq, segment_w=w, gate=gate, recent_k=1)
    rng = np.random.default_rng(1)
    p = A.init_params(cfg, rng)
    p["sta.w_q"] = np.eye(d, dq, dtype=np.float32)
    p["sta.w_k"] = np.eye(d, dq, dtype=np.float32)
    target = np.ones(d, np.float32)
    h = (-6.0 + 0.5 * rng.standard_normal((w, d))).astype(np.float32)
    pre = (h @ p["sta.w_k"]) @ (target @ p["sta.w_q"]) / cfg.scale
    v = tc.matmul(h, p["sta.w_v"])
    return cfg, p, target, h, pre, v


def test_c4_silence_mechanism(record):
    cfg, p, target, h, pre, v = _silent_segment_setup("sigmoid")
    assert pre.max() <= -10
    s, _ = A.sta_vectorized(target, h, p, cfg)
    bound = 4.54e-5 * cfg.segment_w * np.abs(v).max()
    sig_norm = float(np.abs(s[0]).max())
    cfg_soft, p_soft, target, h, pre_soft, _ = _silent_segment_setup("softmax")
    assert pre_soft.max() <= -10
    _, weights = A.sta_vectorized(target, h, p_soft, cfg_soft)
    total = float(weights[:, 0].sum())
    ok = sig_norm <= bound and math.isclose(total, 1.0, abs_tol=1e-6)
    record(4, "silence mechanism", ok,
           f"max pre={pre.max():.1f}, sigmoid |s|inf={sig_norm:.2e} <= {bound:.2e}, softmax weight sum={total:.6f}")
    assert ok


def test_c5_residual_identity(record):
    cfg = LaserConfig(seq_len=40, embed_dim=16, qk_dim=4, segment_w=10, gsta_layers=2)
    rng = np.random.default_rng(3)
    p = A.init_params(cfg, rng)
    for layer in range(cfg.gsta_layers):
        p[f"gsta.{layer}.w_v"] = np.zeros_like(p[f"gsta.{layer}.w_v"])
    target = rng.standard_normal(16).astype(np.float32)
    inp = SequenceBatchInput(rng.standard_normal((40, 16)).astype(np.float32), 1e6 - np.arange(40) * 60.0, 1e6, 33,
                             target)
    z = A.laser_forward(inp, p, cfg).z
    ok = z.dtype == target.dtype and z.tobytes() == target.tobytes()
    record(5, "zero GSTA values leave z equal to the target", ok, "bitwise comparison of float32 bytes")
    assert ok


def test_c6_store_correctness(tmp_path, record):
    t0 = time.perf_counter()
    counts = Workload(tmp_path / "vault", seed=6).run(10_000)

    rng = random.Random(6)
    schema = default_schema()
    roundtrips = 0
    for i in range(10_000):
        if i % 2:
            events = [random_event(rng, 0) for _ in range(rng.randrange(0, 40))]
            use = SCHEMA
        else:
            events = [schema.normalize(wire_event(rng)) for _ in range(rng.randrange(0, 40))]
            use = schema
        events.sort(key=lambda e: (e["timestamp"], e["item_id"]), reverse=True)
        block = pack_block(use, events, i)
        assert unpack_block(use, block) == events
        assert pack_block(use, unpack_block(use, block), i) == block
        roundtrips += 1

    corpus = gen_synthetic(SynthConfig.from_dict({**REFERENCE_SYNTH, "n_users": 200, "seed": 0}))
    packed = baseline = 0
    for u in range(200):
        events = [schema.normalize(e) for e in corpus.events(u)]
        packed += len(pack_block(schema, events, u))
        baseline += len(string_baseline_encode(schema, events))
    ratio = packed / baseline
    secs = time.perf_counter() - t0
    ok = ratio <= 0.55 and secs < 180 and counts["crash"] > 0 and counts["max_reads"] <= 1
    record(6, "store correctness", ok,
           f"10000 ops ({counts['append']} appends, {counts['merge']} merges, {counts['crash']} crashes, "
           f"{counts['reopen']} reopens), {roundtrips} block round trips, size ratio {ratio:.3f}, {secs:.1f}s")
    assert ok


def _send_raw(addr, raw):
    host, port = parse_addr(addr)
    with socket.create_connection((host, port), timeout=10) as s:
        replies = []
        try:
            s.sendall(raw)
            s.shutdown(socket.SHUT_WR)
            while True:
                data = P.read_frame_bytes(s)
                if data is None:
                    break
                replies.append(data)
        except socket.timeout:
            raise
        except OSError:
            pass  # the server drops the connection after a framing error
    # every reply that did arrive must be a well-formed frame
    return [P.decode_frame(r) for r in replies]


def _scores(addr, requests):
    with Client(addr) as c:
        return [c.score(*r) for r in requests]


def test_c7_protocol(tmp_path, small_checkpoint, small_corpus, record):
    # round-trip identity of every request kind, raw and compressed
    rng = random.Random(7)
    for _ in range(10_000):
        op, rid, payload = valid_request(rng)
        for compress in (True, False):
            f = P.decode_frame(P.encode_frame(op, rid, payload, compress=compress))
            assert (f.op, f.request_id, f.payload) == (op, rid, payload)

    store_dir = tmp_path / "store"
    with store_open(store_dir, default_schema()) as st:
        for user in range(4):
            for ev in reversed(small_corpus.events(user)):
                st.append_event(user, ev)
        st.run_merge([0, 1])

    proc, addr = spawn_server(store_dir, small_checkpoint)
    replies = bad = 0
    alive = True
    try:
        for i, raw in enumerate(fuzz_frames(seed=77, n=10_000)):
            try:
                replies += len(_send_raw(addr, raw))
            except (P.ProtocolError, socket.timeout):
                bad += 1
            if i % 1000 == 999:
                with Client(addr) as c:
                    alive = alive and "disk_bytes" in c.stats() and proc.poll() is None
    finally:
        stop(proc)
    tracebacks = proc.stderr.read().count("Traceback")

    requests = [(u, n, int(small_corpus.target_item[u * 8]), int(small_corpus.target_topic[u * 8]),
                 int(small_corpus.request_time[u])) for u in range(4) for n in (1, 50, 1000)]
    runs = []
    for _ in range(2):
        proc, addr = spawn_server(store_dir, small_checkpoint)
        try:
            runs.append(_scores(addr, requests))
        finally:
            stop(proc)
    same = [struct.pack("<d", p) for p, _ in runs[0]] == [struct.pack("<d", p) for p, _ in runs[1]] and \
        [c for _, c in runs[0]] == [c for _, c in runs[1]]
    ok = bad == 0 and tracebacks == 0 and alive and same
    record(7, "protocol fuzz, round trips and deterministic Score", ok,
           f"10000 fuzz frames, {replies} replies, {bad} malformed replies or hangs, server alive={alive}, {tracebacks} server tracebacks, "
           f"score bit-exact across restarts={same}")
    assert ok


def test_c8_ablation_grid(record):
    cells = {"full": {}, **{k: ABLATIONS[k] for k in ("softmax", "no_fusion", "no_recency", "w20")},
             "mean_pool": BASELINES["mean_pool"]}
    t0 = time.perf_counter()
    report = run_grid(cells, seeds=(0, 1, 2), base=REFERENCE_MODEL, synth=REFERENCE_SYNTH)
    secs = time.perf_counter() - t0
    m = {c: report.mean_auc(c) for c in cells}
    checks = {
        "full>=softmax": m["full"] >= m["softmax"],
        "full>=no_fusion": m["full"] >= m["no_fusion"],
        "full>=no_recency": m["full"] >= m["no_recency"],
        "w10>=w20": m["full"] >= m["w20"],
        "laser>=mean_pool+0.02": m["full"] >= m["mean_pool"] + 0.02,
        "under 30 min": secs < 1800,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(8, "end-to-end learning on the planted-interest corpus", ok,
           " ".join(f"{c}={a:.4f}" for c, a in m.items()) + f", {secs / 60:.1f} min"
           + (f", failed: {', '.join(failed)}" if failed else ""))
    for line in report.lines():
        print(line)
    assert ok, checks


def test_c9_scaling_trend(record):
    times = laser_forward_times()
    fit = linear_fit(list(times), list(times.values()))
    deep = {}
    for L in (500, 1000):
        model = {**DEEP_MODEL, "seq_len": L}
        deep[L] = run_grid({f"L{L}": {}}, seeds=(0, 1, 2), base=model, synth=DEEP_SYNTH).mean_auc(f"L{L}")
    ok = fit["r2"] >= 0.95 and deep[1000] > deep[500]
    ms = " ".join(f"{L}:{t * 1e3:.1f}ms" for L, t in times.items())
    record(9, "scaling trend", ok,
           f"forward {ms} R2={fit['r2']:.4f}; deep corpus AUC L500={deep[500]:.4f} L1000={deep[1000]:.4f}")
    assert ok
