"""Slow, obviously-correct reference computations used by the test suite.

None of these import the code paths they check.
"""
import itertools
import math
from collections import defaultdict

import numpy as np


def conditional_expectation(tree, x, subset, node=0):
    """Path-dependent E[f(x) | x_S]: follow x on features in S, cover-average elsewhere."""
    f = int(tree.feature[node])
    if f < 0:
        return float(tree.value[node])
    l, r = int(tree.left[node]), int(tree.right[node])
    if f in subset:
        nxt = l if x[f] <= tree.threshold[node] else r
        return conditional_expectation(tree, x, subset, nxt)
    nl, nr, n = tree.n_samples[l], tree.n_samples[r], tree.n_samples[node]
    return (nl * conditional_expectation(tree, x, subset, l) + nr * conditional_expectation(tree, x, subset, r)) / n


def brute_force_shap(tree, x, p):
    phi = np.zeros(p)
    players = list(range(p))
    for i in players:
        others = [j for j in players if j != i]
        for k in range(len(others) + 1):
            weight = math.factorial(k) * math.factorial(p - k - 1) / math.factorial(p)
            for s in itertools.combinations(others, k):
                s = set(s)
                phi[i] += weight * (conditional_expectation(tree, x, s | {i}) - conditional_expectation(tree, x, s))
    return phi


def nearest_distance_linear_scan(qx, qy, px, py):
    """Exact min over all points of sqrt(dx*dx + dy*dy), one query at a time."""
    out = np.empty(len(qx))
    for k in range(len(qx)):
        dx = qx[k] - px
        dy = qy[k] - py
        out[k] = np.min(np.sqrt(dx * dx + dy * dy))
    return out


def group_blocks_reference(centroids, households, pcts, spec):
    """One pass over blocks: bucket by centroid cell, then household-weighted means."""
    buckets = defaultdict(list)
    for (cx, cy), h, pct in zip(centroids, households, pcts):
        col = math.floor((cx - spec.origin_x) / spec.cell_size)
        row = math.floor((spec.origin_y - cy) / spec.cell_size)
        if 0 <= col < spec.n_cols and 0 <= row < spec.n_rows:
            buckets[(col, row)].append((h, pct))
    labels = {}
    weights = {}
    for cell, members in buckets.items():
        total = sum(h for h, _ in members)
        weights[cell] = total
        if total > 0:
            labels[cell] = sum(h * p for h, p in members) / total
        else:
            labels[cell] = sum(p for _, p in members) / len(members)
    return labels, weights


def monte_carlo_centroid(vertices, n=1_000_000, seed=0):
    rng = np.random.default_rng(seed)
    v = np.asarray(vertices, float)
    lo, hi = v.min(axis=0), v.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))
    inside = point_in_ring(pts[:, 0], pts[:, 1], v)
    return pts[inside].mean(axis=0)


def point_in_ring(px, py, ring):
    inside = np.zeros(px.shape, bool)
    m = len(ring)
    for k in range(m):
        x1, y1 = ring[k]
        x2, y2 = ring[(k + 1) % m]
        if y1 == y2:
            continue
        cond = (y1 > py) != (y2 > py)
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (px < xint)
    return inside


M64 = (1 << 64) - 1


def splitmix64_stream(seed, n):
    z = seed & M64
    out = []
    for _ in range(n):
        z = (z + 0x9E3779B97F4A7C15) & M64
        t = z
        t = ((t ^ (t >> 30)) * 0xBF58476D1CE4E5B9) & M64
        t = ((t ^ (t >> 27)) * 0x94D049BB133111EB) & M64
        out.append(t ^ (t >> 31))
    return out


def xoshiro256ss(seed, n):
    """Python-int xoshiro256** seeded from splitmix64, as published by Blackman and Vigna."""
    s = splitmix64_stream(seed, 4)

    def rotl(x, k):
        return ((x << k) | (x >> (64 - k))) & M64

    out = []
    for _ in range(n):
        out.append(rotl((s[1] * 5) & M64, 7) * 9 & M64)
        t = (s[1] << 17) & M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def best_split_exhaustive(X, y):
    """(feature, threshold, sse) minimizing two-sided SSE; ties keep the lowest feature, then threshold."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    best = None
    eps = 1e-12 * ((y - y.mean()) ** 2).sum()
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for a, b in zip(vals[:-1], vals[1:]):
            thr = (a + b) / 2
            if thr == b:
                thr = a
            left = y[X[:, f] <= thr]
            right = y[X[:, f] > thr]
            sse = ((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum()
            if best is None or sse < best[2] - eps:
                best = (f, thr, sse)
    return best
