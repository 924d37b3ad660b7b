"""Losses returning ``(loss, gradient(s))``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import NumericGuardError, ShapeError
from .layers import softmax

NORM_EPS = 1e-12


def _class_weights(labels: np.ndarray, class_weights: Optional[np.ndarray]) -> np.ndarray:
    if class_weights is None:
        return np.ones(labels.shape[0])
    return np.asarray(class_weights, dtype=np.float64)[labels]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          class_weights: Optional[np.ndarray] = None
                          ) -> Tuple[float, np.ndarray]:
    """Weighted mean cross-entropy; weights are normalised to sum to one."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    w = _class_weights(labels, class_weights)
    w = w / w.sum()
    grad = softmax(logits, axis=1)
    grad[np.arange(n), labels] -= 1.0
    return float(np.dot(w, nll)), grad * w[:, None]


def binary_cross_entropy_with_logits(logits: np.ndarray, labels: np.ndarray,
                                     class_weights: Optional[np.ndarray] = None
                                     ) -> Tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    # log(1 + exp(-|z|)) + max(z, 0) - z*y
    nll = np.logaddexp(0.0, logits) - logits * y
    w = _class_weights(np.asarray(labels, dtype=np.int64), class_weights)
    w = w / w.sum()
    p = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return float(np.dot(w, nll)), (p - y) * w


@dataclass
class ArcFaceParams:
    s: float = 16.0
    m: float = 0.3
    class_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("ArcFace scale s must be positive")
        if not 0.0 <= self.m < np.pi / 2:
            raise ValueError("ArcFace margin m must lie in [0, pi/2)")


def _normalize(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norm = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), NORM_EPS)
    return v / norm, norm


def _normalize_backward(du: np.ndarray, u: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (du - u * (u * du).sum(axis=1, keepdims=True)) / norm


def cosine_logits(embeddings: np.ndarray, weights: np.ndarray) -> np.ndarray:
    e, _ = _normalize(np.asarray(embeddings, dtype=np.float64))
    w, _ = _normalize(np.asarray(weights, dtype=np.float64))
    return e @ w.T


def arcface_loss(embeddings: np.ndarray, labels: np.ndarray, params: ArcFaceParams,
                 sample_class_weights: Optional[np.ndarray] = None
                 ) -> Tuple[float, np.ndarray, np.ndarray]:
    """Additive angular margin softmax loss.

    Returns ``(loss, d_embeddings, d_class_weights)``.  ``sample_class_weights``
    re-weights examples by class (inverse frequency in stage 1).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    W = np.asarray(params.class_weights, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"embeddings {x.shape} incompatible with class weights {W.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= W.shape[0]:
        raise ValueError("labels out of range")
    raw_norm = np.linalg.norm(x, axis=1)
    if np.any(raw_norm < NORM_EPS):
        raise NumericGuardError("zero-norm embedding cannot be placed on the hypersphere")

    n = x.shape[0]
    rows = np.arange(n)
    u, nu = _normalize(x)
    wn, nw = _normalize(W)
    cos = u @ wn.T
    c_y = np.clip(cos[rows, labels], -1.0, 1.0)
    sin_y = np.sqrt(np.maximum(0.0, 1.0 - c_y * c_y))
    cos_m, sin_m = np.cos(params.m), np.sin(params.m)
    with_margin = c_y > np.cos(np.pi - params.m)
    phi = np.where(with_margin, c_y * cos_m - sin_y * sin_m, c_y)
    dphi = np.where(with_margin, cos_m + sin_m * c_y / np.maximum(sin_y, NORM_EPS), 1.0)

    logits = params.s * cos
    logits[rows, labels] = params.s * phi
    loss, dlogits = softmax_cross_entropy(logits, labels, sample_class_weights)

    dcos = params.s * dlogits
    dcos[rows, labels] *= dphi
    du = dcos @ wn
    dwn = dcos.T @ u
    return loss, _normalize_backward(du, u, nu), _normalize_backward(dwn, wn, nw)


def arcface_probabilities(embeddings: np.ndarray, class_weights: np.ndarray, s: float
                          ) -> np.ndarray:
    """Class probabilities from scaled cosine logits (no margin at inference)."""
    return softmax(s * cosine_logits(embeddings, class_weights), axis=1)
