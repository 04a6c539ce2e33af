"""Quality and semantic losses, label rescaling."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def quality_loss(p_high, y) -> Tensor:
    """Binary cross-entropy between ``p_high`` and labels ``y`` in [0, 1].

    Averaged over the batch when given vectors. Both logs are clamped at
    ``autodiff.LOG_EPS``.
    """
    p = ad.as_tensor(p_high)
    y = np.asarray(y, dtype=np.float64)
    if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
        raise ValueError(f"quality labels must lie in [0, 1], got range "
                         f"[{y.min() if y.size else 'n/a'}, {y.max() if y.size else 'n/a'}]")
    if y.shape != p.shape:
        raise ad.ShapeError("quality_loss", p.shape, y.shape)
    ce = ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y)
    return -ce.mean()


def _check_distribution(name: str, p: np.ndarray):
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError(f"{name} does not sum to 1")


def semantic_kl_loss(p_sem, p_qua) -> Tensor:
    """KL(p_sem || p_qua) over the last axis, averaged over leading axes.

    ``p_sem`` is a fixed reference and carries no gradient.
    """
    ref = np.asarray(p_sem.data if isinstance(p_sem, Tensor) else p_sem, dtype=np.float64)
    q = ad.as_tensor(p_qua)
    _check_distribution("p_sem", ref)
    _check_distribution("p_qua", q.data)
    if ref.shape != q.shape:
        raise ad.ShapeError("semantic_kl_loss", ref.shape, q.shape)
    ref_log = np.log(np.maximum(ref, ad.LOG_EPS))
    kl = (ad.constant(ref * ref_log) - ad.log(q) * ref).sum(axis=-1)
    return kl.mean()


def rescale_mos(scores) -> np.ndarray:
    """Min-max rescale to [0, 1]."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ValueError("rescale_mos needs at least two scores")
    lo, hi = s.min(), s.max()
    if hi == lo:
        raise ValueError("degenerate label set: all scores are equal")
    return (s - lo) / (hi - lo)
