"""Rank and linear correlation between predicted and target quality."""

from __future__ import annotations

import numpy as np


def _pair(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two points")
    return x, y


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank span."""
    v = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(v.size)
    start = 0
    for end in range(1, v.size + 1):
        if end == v.size or sorted_v[end] != sorted_v[start]:
            ranks[order[start:end]] = 0.5 * (start + end + 1)
            start = end
    return ranks


def plcc(xs, ys) -> float:
    """Pearson linear correlation on raw values."""
    x, y = _pair(xs, ys)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = xc @ xc, yc @ yc
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance: correlation undefined")
    return float(np.clip((xc @ yc) / np.sqrt(sxx * syy), -1.0, 1.0))


def srcc(xs, ys) -> float:
    """Spearman rank correlation (Pearson of average ranks)."""
    x, y = _pair(xs, ys)
    return plcc(average_ranks(x), average_ranks(y))
