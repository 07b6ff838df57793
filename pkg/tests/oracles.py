"""Slow, obviously-correct references the fast code is checked against."""
from __future__ import annotations

import itertools
import math

import mpmath
import numpy as np


def conv2d_loops(x, weights, bias, stride, padding, residual=False):
    """Direct seven-deep loop cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    h, w, cin = x.shape
    cout, _, k, _ = weights.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((ho, wo, cout))
    for oy in range(ho):
        for ox in range(wo):
            for co in range(cout):
                acc = float(bias[co])
                for ci in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy * stride + ky - padding
                            ix = ox * stride + kx - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += float(weights[co, ci, ky, kx]) * x[iy, ix, ci]
                if residual:
                    acc += x[oy, ox, co]
                out[oy, ox, co] = acc
    return out


def spatial_pool_loops(x, mode):
    h, w, c = x.shape
    out = []
    for ch in range(c):
        vals = [float(x[i, j, ch]) for i in range(h) for j in range(w)]
        out.append(max(vals) if mode == "max" else math.fsum(vals) / len(vals))
    return np.array(out)


def channel_pool_loops(x, mode):
    h, w, c = x.shape
    out = np.zeros((h, w, 1))
    for i in range(h):
        for j in range(w):
            vals = [float(v) for v in x[i, j]]
            out[i, j, 0] = max(vals) if mode == "max" else math.fsum(vals) / len(vals)
    return out


def softmax_mp(x, dps=40):
    with mpmath.workdps(dps):
        vals = [mpmath.mpf(float(v)) for v in x]
        m = max(vals)
        exps = [mpmath.exp(v - m) for v in vals]
        total = mpmath.fsum(exps)
        return np.array([float(e / total) for e in exps])


def readout_scalar(keys, values, queries, dot=False):
    """Pure-Python double loop over (query, key) pairs; exact sums via fsum."""
    keys = np.asarray(keys, dtype=np.float64).tolist()
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((len(queries), values.shape[1]))
    for j, q in enumerate(np.asarray(queries, dtype=np.float64).tolist()):
        scores = []
        for k in keys:
            if dot:
                scores.append(math.fsum(a * b for a, b in zip(k, q)))
            else:
                scores.append(-math.fsum((a - b) ** 2 for a, b in zip(k, q)))
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        total = math.fsum(e)
        out[j] = np.sum(np.array(e)[:, None] * values, axis=0) / total
    return out


def readout_brute(keys, values, queries, dot=False):
    """Every (key, query) score computed directly in float64, one query at a time, no tiling."""
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    out = np.zeros((len(queries), v.shape[1]))
    for j, q in enumerate(np.asarray(queries, dtype=np.float64)):
        s = (k * q).sum(axis=1) if dot else -((k - q) ** 2).sum(axis=1)
        e = np.exp(s - s.max())
        out[j] = (e[:, None] * v).sum(axis=0) / e.sum()
    return out


def keep_indices_bruteforce(scores, ratio):
    """Rank by (score desc, index asc) with an explicit comparison sort."""
    n = len(scores)
    keep = 0
    while keep < n and keep < ratio * n - 1e-9:
        keep += 1
    ranked = sorted(range(n), key=lambda i: (-scores[i], i))
    return sorted(ranked[:keep])


def box_area_on_grid(boxes_int, op):
    """Count unit cells covered by an integer-corner box set: op is 'union', 'inter' or 'hull'."""
    xs0 = min(b[0] for b in boxes_int)
    ys0 = min(b[1] for b in boxes_int)
    xs1 = max(b[0] + b[2] for b in boxes_int)
    ys1 = max(b[1] + b[3] for b in boxes_int)
    if op == "hull":
        return (xs1 - xs0) * (ys1 - ys0)
    count = 0
    for x, y in itertools.product(range(xs0, xs1), range(ys0, ys1)):
        inside = [b[0] <= x < b[0] + b[2] and b[1] <= y < b[1] + b[3] for b in boxes_int]
        if (op == "union" and any(inside)) or (op == "inter" and all(inside)):
            count += 1
    return count


def schedule_closed_form(n_frames, interval, capacity, protected, warmup_len=10, warmup_stride=5):
    """Surviving memory frame ids after ``n_frames`` frames."""
    ids = [1]
    ids += [i for i in range(2, min(n_frames, warmup_len) + 1) if i % warmup_stride == 0]
    ids += [i for i in range(warmup_len + 1, n_frames + 1) if i % interval == 0]
    ids = sorted(set(ids))
    if len(ids) <= capacity:
        return ids
    p = min(protected, capacity - 1)
    return ids[:p] + ids[len(ids) - (capacity - p):]


def success_auc_loops(ious, thresholds):
    hits = 0
    for t in thresholds:
        for v in ious:
            if v > 0 and v >= t - 1e-12:
                hits += 1
    return hits / (len(ious) * len(thresholds))
