"""Independent reference implementations used as test oracles.

Everything here is written as plain loops over Python floats or small numpy
expressions, without calling into the package under test.
"""

from __future__ import annotations

import math

import numpy as np


def fps(positions, m):
    pts = [tuple(map(float, p)) for p in positions]
    n = len(pts)
    c = [math.fsum(p[j] for p in pts) / n for j in range(3)]

    def d2(a, b):
        return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2

    first = min(range(n), key=lambda i: (d2(pts[i], c), pts[i], i))
    picks = [first]
    mind = [d2(p, pts[first]) for p in pts]
    while len(picks) < m:
        nxt = min(range(n), key=lambda i: (-mind[i], pts[i], i))
        picks.append(nxt)
        mind = [min(mind[i], d2(pts[i], pts[nxt])) for i in range(n)]
    return picks


def ball(query, source, radius):
    out = []
    for i, s in enumerate(source):
        if sum((float(a) - float(b)) ** 2 for a, b in zip(query, s)) <= radius * radius:
            out.append(i)
    return out


def nearest_in_ball(query, source, radius, k):
    """Deterministic grouping: k nearest in-ball points, cycled when short."""
    cand = ball(query, source, radius)
    key = lambda i: (sum((float(a) - float(b)) ** 2 for a, b in zip(query, source[i])),
                     tuple(map(float, source[i])), i)
    cand.sort(key=key)
    return [cand[j % len(cand)] for j in range(k)]


def idw(target, sources, features, eps=1e-8):
    """Inverse-distance weighting over the (up to) three nearest sources."""
    dist = [math.dist(target, s) for s in sources]
    order = sorted(range(len(sources)), key=lambda i: (dist[i], tuple(sources[i]), i))[:3]
    inv = [1.0 / (dist[i] + eps) for i in order]
    total = sum(inv)
    return sum((w / total) * np.asarray(features[i], dtype=float) for w, i in zip(inv, order))


def affine(x, w, b):
    x = np.asarray(x, dtype=float)
    return x @ np.asarray(w, dtype=float) + np.asarray(b, dtype=float)


def attention(values, w, b, group=1):
    """values [K, D]; scores from an affine scorer D -> D/group, softmax over K."""
    raw = np.array([affine(v, w, b) for v in values])
    e = np.exp(raw - raw.max(axis=0))
    s = e / e.sum(axis=0)
    s = np.repeat(s, group, axis=1)
    return (s * values).sum(axis=0), s


def gelatto_single(p, q, r, s, weights, heads="both"):
    """Straight-line evaluation for one centroid.

    ``p`` [3], ``q`` [K, 3] neighbour positions, ``r`` [D], ``s`` [K, D];
    ``weights`` maps transform names to (W, b) pairs.
    """
    f = lambda name, x: affine(x, *weights[name])
    k = len(q)
    h = np.array([f("f_r", r) + f("f_rs", s[j] - r) for j in range(k)])
    g = np.array([f("f_p", p) + f("f_pq", q[j] - p) + f("f_q", q[j]) + f("f_hg", h[j])
                  for j in range(k)])
    g2 = np.array([f("f_gg", gj) for gj in g])
    parts = []
    if heads in ("both", "geometric"):
        parts.append(attention(g2, *weights["f_g_att"])[0])
    if heads in ("both", "latent"):
        h1 = np.array([h[j] + f("f_s", s[j]) + f("f_gh", g[j]) for j in range(k)])
        h2 = np.array([f("f_hh", x) for x in h1])
        parts.append(attention(h2, *weights["f_h_att"])[0])
    return f("f_o", np.concatenate(parts))


def confusion_scores(cm):
    cm = [[int(v) for v in row] for row in cm]
    c = len(cm)
    total = sum(map(sum, cm))
    rows = [sum(cm[i]) for i in range(c)]
    cols = [sum(cm[i][j] for i in range(c)) for j in range(c)]
    accs = [cm[i][i] / rows[i] for i in range(c) if rows[i] > 0]
    ious = [cm[i][i] / (rows[i] + cols[i] - cm[i][i]) for i in range(c) if rows[i] + cols[i] > 0]
    return (sum(cm[i][i] for i in range(c)) / total, sum(accs) / len(accs), sum(ious) / len(ious))
