"""Command line entry point (``laser-ctr`` / ``python -m laser_ctr``)."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time


def _emit(args, record: dict, lines=None):
    if getattr(args, "json", False):
        print(json.dumps(record, indent=2, sort_keys=True, default=str))
    else:
        for line in lines if lines is not None else (f"{k}={v}" for k, v in record.items()):
            print(line)


def _read_json(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ------------------------------------------------------------ data / model


def cmd_gen(args):
    from .harness.synth import SynthConfig, gen_synthetic

    cfg = SynthConfig.from_dict({**_read_json(args.config), **({"seed": args.seed} if args.seed is not None else {})})
    t0 = time.perf_counter()
    corpus = gen_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    corpus.save(os.path.join(args.out, "corpus.npz"))
    with open(os.path.join(args.out, "synth.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
    _emit(args, {"users": cfg.n_users, "samples": len(corpus.label), "positive_rate": float(corpus.label.mean()),
                 "seconds": round(time.perf_counter() - t0, 3), "out": args.out})


def _load_corpus(path):
    from .harness.synth import Corpus

    if os.path.isdir(path):
        path = os.path.join(path, "corpus.npz")
    return Corpus.load(path)


def cmd_train(args):
    from .harness.model import LaserCTRClassifier

    corpus = _load_corpus(args.corpus)
    params = _read_json(args.config)
    if args.seed is not None:
        params["random_state"] = args.seed
    model = LaserCTRClassifier(**params)
    (Xtr, ytr), (Xte, yte) = corpus.split(args.test_fraction, seq_len=model.seq_len)
    t0 = time.perf_counter()
    model.fit(Xtr, ytr, eval_set=(Xte, yte))
    model.save(args.out)
    trace = {"history": model.history_, "step_losses": model.step_losses_, "params": model.get_params(),
             "seconds": time.perf_counter() - t0}
    with open(args.out + ".trace.json", "w", encoding="utf-8") as fh:
        json.dump(trace, fh, indent=1)
    lines = [" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in h.items())
             for h in model.history_]
    lines.append(f"checkpoint={args.out} seconds={trace['seconds']:.1f}")
    _emit(args, {"history": model.history_, "checkpoint": args.out, "seconds": trace["seconds"]}, lines)


def cmd_eval(args):
    from .checkpoint import load_model
    from .harness.experiments import ABLATIONS, BASELINES, run_grid
    from .harness.metrics import auc, log_loss

    corpus = _load_corpus(args.corpus)
    model = load_model(args.ckpt)
    if not args.ablation:
        (_, _), (Xte, yte) = corpus.split(args.test_fraction, seq_len=model.seq_len)
        p = model.predict_proba(Xte)[:, 1]
        _emit(args, {"auc": auc(p, yte), "logloss": log_loss(p, yte), "n_samples": len(yte)})
        return
    cells = {**ABLATIONS, **BASELINES}
    names = list(ABLATIONS) if args.ablation == "all" else ["full"] + [n for n in args.ablation.split(",") if n != "full"]
    unknown = [n for n in names if n not in cells]
    if unknown:
        raise SystemExit(f"unknown ablation {unknown}; choose from {sorted(cells)} or 'all'")
    base = {**model.get_params(), **_read_json(args.train_config)}
    seeds = [int(s) for s in args.seeds.split(",")]
    report = run_grid({n: cells[n] for n in names}, seeds=seeds, base=base,
                      corpus_fn=lambda seed: corpus, log=lambda s: print(s, file=sys.stderr))
    _emit(args, report.to_dict(), report.lines())


def cmd_bench(args):
    from .harness.bench import format_lines, run_suite

    rep = run_suite(args.suite)
    _emit(args, rep, format_lines(rep))


def cmd_flops(args):
    from .flops import FlopsConfig, compare_report, format_report

    cfg = FlopsConfig(args.L, args.d, args.dq, args.w, args.M, args.ffn_ratio)
    rep = compare_report(cfg)
    _emit(args, rep, format_report(rep).splitlines())


# ------------------------------------------------------------------ store


def _events_from(path):
    """JSON lines of ``{"user": u, "event": {...}}``, or a corpus npz."""
    if path.endswith(".npz") or os.path.isdir(path):
        corpus = _load_corpus(path)
        for user in range(len(corpus.hist_len)):
            for ev in reversed(corpus.events(user)):
                yield user, ev
        return
    fh = sys.stdin if path == "-" else open(path, encoding="utf-8")
    with fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                yield int(rec["user"]), rec["event"]


def cmd_store(args):
    from .store import default_schema, SequenceSchema, store_open

    if args.store_cmd == "init":
        schema = SequenceSchema.from_json(open(args.schema).read()) if args.schema else default_schema()
        with store_open(args.dir, schema) as st:
            _emit(args, {"dir": args.dir, "schema_hash": f"{schema.schema_hash:016x}", **st.stats()})
        return
    with store_open(args.dir) as st:
        if args.store_cmd == "ingest":
            n = 0
            t0 = time.perf_counter()
            for user, ev in _events_from(args.input):
                st.append_event(user, ev)
                n += 1
            st.run_merge()
            _emit(args, {"events": n, "seconds": round(time.perf_counter() - t0, 3), **st.stats()})
        elif args.store_cmd == "get":
            events = st.get_last_n(args.user, args.n)
            if args.json:
                print(json.dumps(events))
            else:
                for ev in events:
                    print(json.dumps(ev, sort_keys=True))
        elif args.store_cmd == "merge":
            _emit(args, st.run_merge(args.user or None).to_dict())
        elif args.store_cmd == "stats":
            _emit(args, st.stats())


# ---------------------------------------------------------------- serving


def cmd_serve(args):
    from .serving.server import serve

    serve(args.addr, args.store_dir, args.checkpoint)


def cmd_client(args):
    from .serving.client import Client

    with Client(args.addr) as c:
        if args.client_cmd == "put":
            _emit(args, {"ack": c.put(args.user, json.loads(args.event))})
        elif args.client_cmd == "get":
            for ev in c.get_last_n(args.user, args.n):
                print(json.dumps(ev, sort_keys=True))
        elif args.client_cmd == "score":
            prob, checksum = c.score(args.user, args.n, args.item, args.topic, args.time)
            _emit(args, {"probability": repr(prob), "fused_crc32": f"{checksum:08x}"})
        elif args.client_cmd == "merge":
            _emit(args, c.merge(args.user or ()))
        elif args.client_cmd == "stats":
            _emit(args, c.stats())


# ----------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="laser-ctr", description="Long-sequence CTR toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help, json_flag=True):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        if json_flag:
            sp.add_argument("--json", action="store_true", help="structured output")
        return sp

    sp = add("gen", cmd_gen, "generate a synthetic corpus")
    sp.add_argument("--config", help="SynthConfig JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("train", cmd_train, "train a model and write a checkpoint")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--config", help="estimator parameters JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--test-fraction", type=float, default=0.25)

    sp = add("eval", cmd_eval, "evaluate a checkpoint or an ablation grid")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--ablation", help="cell name(s), comma separated, or 'all'")
    sp.add_argument("--train-config", help="training overrides for ablation cells")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--test-fraction", type=float, default=0.25)

    sp = add("bench", cmd_bench, "wall-clock benchmarks")
    sp.add_argument("--suite", required=True, choices=["attention", "store", "wire"])

    sp = add("flops", cmd_flops, "closed-form FLOPs report")
    sp.add_argument("--L", type=int, default=1000)
    sp.add_argument("--d", type=int, default=128)
    sp.add_argument("--dq", type=int, default=32)
    sp.add_argument("--w", type=int, default=10)
    sp.add_argument("--M", type=int, default=2)
    sp.add_argument("--ffn-ratio", type=int, default=4)

    sp = add("store", cmd_store, "sequence store maintenance", json_flag=False)
    ssub = sp.add_subparsers(dest="store_cmd", required=True)
    for name in ("init", "ingest", "get", "merge", "stats"):
        s = ssub.add_parser(name)
        s.add_argument("--dir", required=True)
        s.add_argument("--json", action="store_true")
        if name == "init":
            s.add_argument("--schema", help="schema JSON (default: built-in event schema)")
        elif name == "ingest":
            s.add_argument("--input", required=True, help="JSON lines, '-' for stdin, or a corpus")
        elif name == "get":
            s.add_argument("--user", type=int, required=True)
            s.add_argument("--n", type=int, default=100)
        elif name == "merge":
            s.add_argument("--user", type=int, action="append")

    sp = add("serve", cmd_serve, "run the network server", json_flag=False)
    sp.add_argument("--addr", default="127.0.0.1:7070")
    sp.add_argument("--store-dir", required=True)
    sp.add_argument("--checkpoint")

    sp = add("client", cmd_client, "talk to a running server", json_flag=False)
    csub = sp.add_subparsers(dest="client_cmd", required=True)
    for name in ("put", "get", "score", "merge", "stats"):
        s = csub.add_parser(name)
        s.add_argument("--addr", default="127.0.0.1:7070")
        s.add_argument("--json", action="store_true")
        if name in ("put", "get", "score"):
            s.add_argument("--user", type=int, required=True)
        if name == "put":
            s.add_argument("--event", required=True, help="event JSON object")
        if name in ("get", "score"):
            s.add_argument("--n", type=int, default=1000)
        if name == "score":
            s.add_argument("--item", type=int, required=True)
            s.add_argument("--topic", type=int, default=0)
            s.add_argument("--time", type=int, required=True, help="request time (unix seconds)")
        if name == "merge":
            s.add_argument("--user", type=int, action="append")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
