"""Slow, independent reference implementations used as test oracles.

Written with plain Python loops and mpmath so they share no code path with
the vectorized package functions they check.
"""

import math
from collections import defaultdict

import mpmath

mpmath.mp.dps = 50


def filter_groups(triples):
    out = defaultdict(set)
    for h, r, t in triples:
        out[(h, r)].add(t)
    return dict(out)


def info_nce_mp(anchor, positive, candidates, mask_row, tau):
    """-log(s+ / (s+ + sum s-)) at 50 significant digits."""
    dot = lambda a, b: mpmath.fsum(mpmath.mpf(float(x)) * mpmath.mpf(float(y)) for x, y in zip(a, b))
    t = mpmath.mpf(tau)
    s_pos = mpmath.exp(dot(anchor, positive) / t)
    negs = [mpmath.exp(dot(anchor, c) / t) for c, keep in zip(candidates, mask_row) if keep]
    if not negs:
        return mpmath.mpf(0)
    return -mpmath.log(s_pos / (s_pos + mpmath.fsum(negs)))


def knn_scan(keys, heads, relations, values, q, k, exclude_key=None):
    """Linear scan; ties broken by target id then row."""
    rows = []
    for j, key in enumerate(keys):
        if exclude_key is not None and (int(heads[j]), int(relations[j])) == tuple(exclude_key):
            continue
        d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(key, q)))
        rows.append((d, int(values[j]), j))
    rows.sort()
    return rows[:k]


def filtered_rank_scan(probs, target, known_tails):
    """Mean-tie filtered rank by walking every entity once."""
    higher = equal = 0
    for e, p in enumerate(probs):
        if e == target or e in known_tails:
            continue
        if p > probs[target]:
            higher += 1
        elif p == probs[target]:
            equal += 1
    return 1 + higher + equal / 2


def metrics_scan(ranks):
    n = len(ranks)
    reciprocal = [1.0 / r for r in ranks]
    return {
        "mrr": math.fsum(reciprocal) / n,
        "hits1": sum(1 for r in ranks if r <= 1) / n,
        "hits3": sum(1 for r in ranks if r <= 3) / n,
        "hits10": sum(1 for r in ranks if r <= 10) / n,
    }


def central_difference(loss, params, h=1e-5):
    """Numerical gradient of ``loss(params)`` for every entry of every tensor."""
    grads = {}
    for name, arr in params.items():
        g = arr.copy()
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss(params)
            flat[i] = old - h
            down = loss(params)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(a, b):
    scale = max(float(abs(a).max(initial=0)), float(abs(b).max(initial=0)), 1e-8)
    return float(abs(a - b).max(initial=0)) / scale
