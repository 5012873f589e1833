"""Independent reference computations used by the tests.

Nothing here calls into the autodiff path under test: finite differences
perturb raw parameter arrays and re-run forward passes only.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from dtrn import tensor as tn


def central_differences(loss_fn, params, h=1e-3):
    """d(loss)/d(p) by central differences for every element of every param."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grads(build_loss, params):
    tn.zero_grads(params)
    with tn.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest per-tensor ||a - n|| / max(||a||, ||n||, floor)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        den = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        worst = max(worst, float(np.linalg.norm(a - n) / den))
    return worst


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def scalar_logloss(scores, labels, eps=1e-7):
    total = 0.0
    for s, y in zip(scores, labels):
        p = min(max(float(s), eps), 1 - eps)
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total / len(scores)


def scalar_bce_from_prob(p, y):
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def one_hot(indices, k):
    out = np.zeros((len(indices), k))
    for r, i in enumerate(indices):
        out[r, i] = 1.0
    return out


def loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)]


def loop_softmax(row):
    mx = max(row)
    e = [math.exp(v - mx) for v in row]
    s = sum(e)
    return [v / s for v in e]


def loop_layer_norm(row, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    sd = math.sqrt(var + eps)
    return [(v - mu) / sd for v in row]


def loop_attention(q_rows, kv_rows, wq, wk, wv, wo, heads, valid):
    """Per-head loop of softmax(q Wq_i (kv Wk_i)^T / sqrt(d')) kv Wv_i, concat, W^O."""
    d = len(wq)
    dp = d // heads
    out = []
    for q in q_rows:
        concat = []
        for h in range(heads):
            cols = range(h * dp, (h + 1) * dp)
            qh = [sum(q[i] * wq[i][c] for i in range(d)) for c in cols]
            ks = [[sum(kv[i] * wk[i][c] for i in range(d)) for c in cols] for kv in kv_rows]
            vs = [[sum(kv[i] * wv[i][c] for i in range(d)) for c in cols] for kv in kv_rows]
            scores = [sum(a * b for a, b in zip(qh, k)) / math.sqrt(dp) for k in ks]
            idx = [j for j in range(len(kv_rows)) if valid[j]]
            w = loop_softmax([scores[j] for j in idx])
            concat += [sum(wj * vs[j][c] for wj, j in zip(w, idx)) for c in range(dp)]
        out.append([sum(concat[i] * wo[i][c] for i in range(d)) for c in range(d)])
    return out


def loop_ffn(rows, w1, b1, w2, b2):
    out = []
    for x in rows:
        h = [max(0.0, sum(x[i] * w1[i][j] for i in range(len(x))) + b1[j]) for j in range(len(b1))]
        out.append([sum(h[j] * w2[j][c] for j in range(len(h))) + b2[c] for c in range(len(b2))])
    return out


def loop_cln(row, g_tb, b_tb, g_l, b_l):
    n = loop_layer_norm(row)
    return [g_tb[i] * g_l[i] * n[i] + b_tb[i] + b_l[i] for i in range(len(row))]


def all_index_patterns(k, length):
    return itertools.product(range(k), repeat=length)
