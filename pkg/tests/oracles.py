"""Independent reference implementations used by the tests.

Plain Python loops in float64; nothing here calls into the package.
"""
import math

import numpy as np


def _sig(x):
    return 1 / (1 + math.exp(-x)) if x >= 0 else math.exp(x) / (1 + math.exp(x))


def scalar_sta(target, h, wq, wk, wv, w, heads=1, gamma=None, mask=None, gate="sigmoid"):
    """Segment outputs ``(L/w, d)`` and per-position weights ``(L, heads)``."""
    L, d = len(h), len(h[0])
    dq = wq.shape[1]
    mask = [True] * L if mask is None else [bool(m) for m in mask]
    gq, gv = dq // heads, d // heads
    gamma = math.sqrt(gq) if gamma is None else gamma
    q = [sum(float(target[a]) * float(wq[a, c]) for a in range(d)) for c in range(dq)]
    out = [[0.0] * d for _ in range(L // w)]
    weights = [[0.0] * heads for _ in range(L)]
    for i in range(L // w):
        rows = range(i * w, (i + 1) * w)
        k = {j: [sum(float(h[j][b]) * float(wk[b, c]) for b in range(d)) for c in range(dq)] for j in rows}
        v = {j: [sum(float(h[j][b]) * float(wv[b, e]) for b in range(d)) for e in range(d)] for j in rows}
        for hd in range(heads):
            pre = {j: sum(q[c] * k[j][c] for c in range(hd * gq, (hd + 1) * gq)) / gamma for j in rows}
            if gate == "sigmoid":
                a = {j: (_sig(pre[j]) if mask[j] else 0.0) for j in rows}
            else:
                valid = [j for j in rows if mask[j]]
                top = max((pre[j] for j in valid), default=0.0)
                den = sum(math.exp(pre[j] - top) for j in valid)
                a = {j: (math.exp(pre[j] - top) / den if mask[j] else 0.0) for j in rows}
            for j in rows:
                weights[j][hd] = a[j]
                for e in range(hd * gv, (hd + 1) * gv):
                    out[i][e] += a[j] * v[j][e]
    return np.array(out), np.array(weights)


def central_diff(f, arrays, h=1e-3):
    """Float64 central differences of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            down = f()
            flat[i] = keep
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))
