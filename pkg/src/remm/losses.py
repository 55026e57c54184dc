"""Training objectives: shift-descriptor InfoNCE, peakiness, repeatability."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def shift_descriptor_loss(rd_x: Tensor, rd_y: Tensor, tau: float = 0.1) -> Tensor:
    """Symmetric InfoNCE over n corresponding unit descriptors (rows).

    Row i of ``rd_x`` is the positive for row i of ``rd_y``; every other row
    of the opposite set is a negative.
    """
    n = rd_x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 descriptor pairs for negatives, got {n}")
    if rd_y.shape != rd_x.shape:
        raise ValueError(f"descriptor sets differ in shape: {rd_x.shape} vs {rd_y.shape}")
    logits = T.matmul(rd_x, T.transpose(rd_y)) * (1.0 / tau)
    diag = (np.arange(n), np.arange(n))
    fwd = T.index(T.log_softmax(logits, axis=1), diag)
    bwd = T.index(T.log_softmax(logits, axis=0), diag)
    return (T.mean(fwd) + T.mean(bwd)) * -0.5


def _as_mask(mask, like: Tensor) -> np.ndarray:
    if mask is None:
        return np.ones(like.shape, dtype=like.dtype)
    return np.broadcast_to(np.asarray(mask, dtype=like.dtype), like.shape)


def peaking_loss(scores: Tensor, mask=None, window: int = 5) -> Tensor:
    """1 - masked mean of (window max - window mean); 1 for a flat map."""
    r = window // 2
    padded = T.pad2d(scores, r, "replicate")
    peak = T.max_pool2d(padded, window) - T.box_sum2d(padded, window) * (1.0 / window ** 2)
    m = _as_mask(mask, scores)
    total = float(m.sum())
    if total == 0:
        raise ValueError("peaking loss mask is empty")
    return 1.0 - T.tsum(peak * m) * (1.0 / total)


def repeatability_loss(s_x: Tensor, cs_y: Tensor, mask=None) -> Tensor:
    """Masked mean squared difference between X scores and aligned Y scores."""
    if s_x.shape != cs_y.shape:
        raise ValueError(f"score maps differ in shape: {s_x.shape} vs {cs_y.shape}")
    m = _as_mask(mask, s_x)
    total = float(m.sum())
    if total == 0:
        raise ValueError("repeatability mask is empty: the warped pair does not overlap")
    diff = s_x - cs_y
    return T.tsum(diff * diff * m) * (1.0 / total)


def total_loss(l_p: Tensor, l_r: Tensor, l_sd: Tensor, lambdas=(1.0, 1.0, 1.0)) -> Tensor:
    parts = (l_p, l_r, l_sd)
    for p in parts:
        if p.data.size != 1:
            raise ValueError(f"loss terms must be scalars, got shape {p.shape}")
    out = None
    for lam, p in zip(lambdas, parts):
        if lam == 0:
            continue
        term = p * float(lam)
        out = term if out is None else out + term
    return out if out is not None else Tensor(np.zeros((), dtype=l_p.dtype))
