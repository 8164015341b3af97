"""Brute-force reference implementations used only by the tests.

Nothing here imports the package; each function is the slowest obvious
formula for the quantity it computes.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import mpmath
import numpy as np


def conv3d_loops(x, w, b, stride, pad):
    B, Cin, D, H, W = x.shape
    Cout, _, k, _, _ = w.shape
    xp = np.zeros((B, Cin, D + 2 * pad, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + D, pad : pad + H, pad : pad + W] = x
    Do = (D + 2 * pad - k) // stride + 1
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, Cout, Do, Ho, Wo))
    for n in range(B):
        for co in range(Cout):
            for i in range(Do):
                for j in range(Ho):
                    for l in range(Wo):
                        acc = 0.0 if b is None else float(b[co])
                        for ci in range(Cin):
                            for a in range(k):
                                for c in range(k):
                                    for e in range(k):
                                        acc += xp[n, ci, i * stride + a, j * stride + c, l * stride + e] * w[co, ci, a, c, e]
                        out[n, co, i, j, l] = acc
    return out


def pool3d_scan(x, kind, k, stride):
    B, C, D, H, W = x.shape
    Do, Ho, Wo = ((n - k) // stride + 1 for n in (D, H, W))
    out = np.zeros((B, C, Do, Ho, Wo))
    for n, c, i, j, l in itertools.product(range(B), range(C), range(Do), range(Ho), range(Wo)):
        vals = [x[n, c, i * stride + a, j * stride + b_, l * stride + e]
                for a in range(k) for b_ in range(k) for e in range(k)]
        out[n, c, i, j, l] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def linear_dots(x, w, b):
    rows = x.reshape(-1, x.shape[-1])
    out = np.zeros((rows.shape[0], w.shape[0]))
    for r in range(rows.shape[0]):
        for o in range(w.shape[0]):
            s = 0.0
            for i in range(w.shape[1]):
                s += rows[r, i] * w[o, i]
            out[r, o] = s + b[o]
    return out.reshape(x.shape[:-1] + (w.shape[0],))


def cross_entropy_mp(logits, labels, dps=50):
    """Mean negative log-softmax at 50 significant digits."""
    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for row, y in zip(logits, labels):
            z = [mpmath.mpf(float(v)) for v in row]
            total += mpmath.log(sum(mpmath.exp(v) for v in z)) - z[int(y)]
        return float(total / len(labels))


def auc_pairs(scores, labels):
    """Exact fraction of (positive, negative) pairs ordered correctly, ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    if not pos or not neg:
        return None
    credit = Fraction(0)
    for p in pos:
        for q in neg:
            credit += 1 if p > q else Fraction(1, 2) if p == q else 0
    return credit / (len(pos) * len(neg))


def binary_recount(scores, labels, thr=0.5):
    tp = tn = fp = fn = 0
    for s, y in zip(scores, labels):
        p = 1 if s > thr else 0
        if p == 1 and y == 1:
            tp += 1
        elif p == 0 and y == 0:
            tn += 1
        elif p == 1:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def one_vs_rest(pred, labels, k):
    """Per-class (acc, sen, spe) by relabelling every subject as c / not c."""
    out = {}
    n = len(labels)
    for c in range(k):
        tp = sum(1 for p, y in zip(pred, labels) if p == c and y == c)
        tn = sum(1 for p, y in zip(pred, labels) if p != c and y != c)
        pos = sum(1 for y in labels if y == c)
        neg = n - pos
        out[c] = (Fraction(tp + tn, n), Fraction(tp, pos) if pos else None, Fraction(tn, neg) if neg else None)
    return out
