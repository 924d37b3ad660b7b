"""Pure numpy implementations of the compiled kernels."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # [B, C, Lout, K]
    return sliding_window_view(x, k, axis=2)[:, :, ::stride, :]


def conv1d_forward(x, w, b, stride):
    cols = _windows(x, w.shape[2], stride)
    y = np.tensordot(cols, w, axes=([1, 3], [1, 2]))  # [B, Lout, O]
    return np.ascontiguousarray(y.transpose(0, 2, 1)) + b[None, :, None]


def conv1d_backward(x, w, dy, stride):
    k = w.shape[2]
    lout = dy.shape[2]
    cols = _windows(x, k, stride)
    dw = np.tensordot(dy, cols, axes=([0, 2], [0, 2]))  # [O, C, K]
    db = dy.sum(axis=(0, 2))
    dcols = np.tensordot(dy, w, axes=([1], [0]))  # [B, Lout, C, K]
    dx = np.zeros_like(x)
    stop = stride * (lout - 1) + 1
    for j in range(k):
        dx[:, :, j:j + stop:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
    return dx, dw, db


def _group_bounds(s: np.ndarray) -> np.ndarray:
    """Indices where a run of equal values starts, plus the end sentinel."""
    change = np.flatnonzero(s[1:] != s[:-1]) + 1
    return np.concatenate(([0], change, [s.size]))


def roc_auc_sorted(s, y):
    bounds = _group_bounds(s)
    pos = np.add.reduceat((y == 1).astype(np.int64), bounds[:-1]).astype(np.float64)
    neg = np.add.reduceat((y != 1).astype(np.int64), bounds[:-1]).astype(np.float64)
    neg_below = np.concatenate(([0.0], np.cumsum(neg)[:-1]))
    num = float(np.sum(pos * neg_below + 0.5 * pos * neg))
    return num / (pos.sum() * neg.sum())


def sens_at_spec_sorted(s, y, spec_min):
    bounds = _group_bounds(s)
    npos = int(np.sum(y == 1))
    nneg = s.size - npos
    tp = np.cumsum(np.add.reduceat((y == 1).astype(np.int64), bounds[:-1]))
    fp = np.cumsum(np.add.reduceat((y != 1).astype(np.int64), bounds[:-1]))
    ok = (nneg - fp) / nneg >= spec_min
    if not ok.any():
        return 0.0
    return float(np.max(tp[ok]) / npos)
