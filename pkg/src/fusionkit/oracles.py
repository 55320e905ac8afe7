"""Slow, transparent reference implementations used only for verification.

Everything here is written as directly as possible (scalar loops, exhaustive
enumeration, dense sweeps) and deliberately shares no code with the fast
paths it is used to check.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np


def resample_linear_scalar(values, new_len: int):
    """Endpoint-aligned linear interpolation of a 1-D sequence, one scalar
    at a time."""
    values = [float(v) for v in values]
    n = len(values)
    if new_len == n:
        return list(values)
    if n == 1:
        return [values[0]] * new_len
    out = []
    for j in range(new_len):
        pos = j * (n - 1) / (new_len - 1)
        lo = int(pos)
        hi = min(lo + 1, n - 1)
        frac = pos - lo
        out.append(values[lo] * (1.0 - frac) + values[hi] * frac)
    return out


def conv1d_loop(x, kernels, stride: int, padding: int):
    """Direct sliding-window cross-correlation, O(S*K) python loops."""
    x = np.asarray(x, dtype=float)
    kernels = np.asarray(kernels, dtype=float)
    c_in, s = x.shape
    c_out, _, k = kernels.shape
    padded = np.zeros((c_in, s + 2 * padding))
    padded[:, padding:padding + s] = x
    out_len = (s + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, out_len))
    for d in range(c_out):
        for j in range(out_len):
            acc = 0.0
            for c in range(c_in):
                for t in range(k):
                    acc += padded[c, j * stride + t] * kernels[d, c, t]
            out[d, j] = acc
    return out


def _collapse(path, blank: int = 0):
    """CTC collapse: merge repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev:
            if p != blank:
                out.append(p)
            prev = p
    return tuple(out)


@lru_cache(maxsize=None)
def _paths_by_label(t: int, n_symbols: int):
    """All length-t paths over {0..n_symbols-1} grouped by collapsed label."""
    groups: dict[tuple, list] = {}
    for path in itertools.product(range(n_symbols), repeat=t):
        groups.setdefault(_collapse(path), []).append(path)
    return {lab: np.array(paths, dtype=np.intp) for lab, paths in groups.items()}


def ctc_loss_bruteforce(logprobs, labels) -> float:
    """Negative log of the total path probability by exhaustive enumeration."""
    logprobs = np.asarray(logprobs, dtype=float)
    t, n_symbols = logprobs.shape
    groups = _paths_by_label(t, n_symbols)
    key = tuple(int(v) for v in labels)
    if key not in groups:
        return float("inf")
    paths = groups[key]
    scores = logprobs[np.arange(t)[None, :], paths].sum(axis=1)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


def edit_distance_full_table(a, b) -> int:
    """Levenshtein distance from the full DP table, kept for cross-checks."""
    a, b = list(a), list(b)
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    table[:, 0] = np.arange(len(a) + 1)
    table[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            table[i, j] = min(table[i - 1, j] + 1,
                              table[i, j - 1] + 1,
                              table[i - 1, j - 1] + cost)
    return int(table[len(a), len(b)])


def eer_sweep(pos_scores, neg_scores) -> float:
    """EER by dense per-threshold counting over the union of scores.

    Decision rule: accept when score >= threshold. The FAR/FRR crossing is
    located between adjacent candidate thresholds and linearly interpolated;
    ties resolve toward the lower threshold.
    """
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    thresholds = np.unique(np.concatenate([pos, neg]))

    fars, frrs = [], []
    for th in thresholds:
        fa = sum(1 for s in neg if s >= th)
        fr = sum(1 for s in pos if s < th)
        fars.append(fa / len(neg))
        frrs.append(fr / len(pos))

    for i, (far, frr) in enumerate(zip(fars, frrs)):
        if far == frr:
            return float(far)
        if far < frr:
            if i == 0:
                return float((far + frr) / 2.0)
            f1, r1 = fars[i - 1], frrs[i - 1]
            f2, r2 = far, frr
            denom = (f2 - f1) - (r2 - r1)
            if denom == 0.0:
                return float((f1 + r1) / 2.0)
            alpha = (r1 - f1) / denom
            return float(f1 + alpha * (f2 - f1))
    # FAR stayed above FRR through the last threshold: accept-nothing corner
    return float((fars[-1] + frrs[-1]) / 2.0)
