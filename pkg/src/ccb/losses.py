"""Multi-label BCE and the content / context / predict / joint losses.

Every loss is averaged over instances and summed over answers. Functions
return ``(value, grad)`` where ``grad`` is d(value)/d(scores), so callers can
backpropagate without re-deriving the BCE derivative.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .bias import binarize, reweight
from .errors import ValidationError


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if y.size and (np.min(y) < 0 or np.max(y) > 1 or not np.all(np.isfinite(y))):
        raise ValidationError("labels must lie in [0, 1]")
    return y


def _as2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def weighted_bce(z, y, w=None):
    z, y = _as2d(z), _as2d(_check_labels(y))
    if z.shape != y.shape:
        raise ValidationError(f"score/label shape mismatch {z.shape} vs {y.shape}")
    w = np.ones_like(z) if w is None else np.broadcast_to(_as2d(w), z.shape)
    rows, grad = kernels.bce_rows(z, y, w)
    n = z.shape[0]
    return float(rows.sum() / n), grad / n


def multilabel_bce(z, y):
    return weighted_bce(z, y)


def content_loss(z_cn, y, b, r: float, mode: str = "per_answer"):
    if r < 0:
        raise ValidationError(f"r must be >= 0, got {r}")
    return weighted_bce(z_cn, y, reweight(_as2d(b), r, mode, _as2d(y)))


def context_loss(z_cx, b, use_label: bool = True):
    """BCE toward the plausible-answer indicator of b (all-ones when ``use_label`` is off)."""
    target = binarize(_as2d(b)) if use_label else np.ones_like(_as2d(z_cx))
    return weighted_bce(z_cx, target)


def predict_loss(z_p, y):
    return weighted_bce(z_p, y)


@dataclass
class LossBreakdown:
    l_cn: float
    l_cx: float
    l_p: float
    l_ccb: float
    batch_size: int
    l_ml: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def ccb_loss(z_cn, z_cx, z_p, y, b, r: float, *, use_context_label: bool = True,
             weight_mode: str = "per_answer"):
    """Unweighted sum of the three losses.

    Returns ``(LossBreakdown, grads)`` with ``grads = {"z_cn", "z_cx", "z_p"}``.
    """
    l_cn, g_cn = content_loss(z_cn, y, b, r, weight_mode)
    l_cx, g_cx = context_loss(z_cx, b, use_context_label)
    l_p, g_p = predict_loss(z_p, y)
    total = l_cn + l_cx + l_p
    out = LossBreakdown(l_cn, l_cx, l_p, total, int(_as2d(y).shape[0]))
    return out, {"z_cn": g_cn, "z_cx": g_cx, "z_p": g_p}
