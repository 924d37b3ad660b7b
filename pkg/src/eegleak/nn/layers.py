"""Layers with explicit forward/backward passes.

Each layer caches what its backward pass needs during ``forward`` and
*accumulates* parameter gradients in ``backward``; call ``zero_grad`` between
steps.  All arithmetic is float64.
"""

from __future__ import annotations

import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .. import _kernels
from ..errors import ShapeError


class Module:
    """Parameter container.  Sub-modules are discovered from attributes."""

    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for name in self.params:
            yield prefix + name, self.params[name], self.grads[name]
        for cname, child in self.children():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: p for name, p, _ in self.named_parameters()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: g for name, _, g in self.named_parameters()}

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g.fill(0.0)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.copy() for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.parameters()
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ShapeError(f"parameter names differ: {missing}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p[...] = value


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv1d(Module):
    """Valid cross-correlation over ``[batch, channels, length]`` inputs."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = int(stride)
        self._add("weight", _he(rng, (out_channels, in_channels, kernel_size),
                                in_channels * kernel_size))
        self._add("bias", np.zeros(out_channels))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return conv1d_forward(x, self.params["weight"], self.params["bias"], self.stride,
                              cache=self)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dw, db = _kernels.conv1d_backward(self._x, self.params["weight"], dy, self.stride)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


def conv1d_forward(x, kernels, bias, stride: int = 1, cache: Optional[Conv1d] = None):
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if x.ndim == 2:
        return conv1d_forward(x[None], kernels, bias, stride, cache)[0]
    if x.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(f"conv1d expects [B,C,L] input and [O,C,K] kernels, got "
                         f"{x.shape} and {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {kernels.shape[1]}")
    if kernels.shape[2] > x.shape[2]:
        raise ShapeError(f"kernel length {kernels.shape[2]} exceeds input length {x.shape[2]}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if cache is not None:
        cache._x = x
    return _kernels.conv1d_forward(x, kernels, np.asarray(bias, dtype=np.float64), stride)


class ReLU(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)


class GlobalAvgPool1d(Module):
    """Mean over the last axis: ``[B, C, L] -> [B, C]``."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._length = x.shape[-1]
        return x.mean(axis=-1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.repeat(dy[..., None] / self._length, self._length, axis=-1)


class Dense(Module):
    """Affine map on the last axis."""

    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, gain: float = 2.0,
                 bias: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self._add("weight", rng.normal(0.0, math.sqrt(gain / in_features),
                                       size=(in_features, out_features)))
        if bias:
            self._add("bias", np.zeros(out_features))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.params["weight"].shape[0]:
            raise ShapeError(f"dense expects last dim {self.params['weight'].shape[0]}, "
                             f"got {x.shape[-1]}")
        self._x = x
        y = x @ self.params["weight"]
        return y + self.params["bias"] if "bias" in self.params else y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self._x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.grads["weight"] += x2.T @ dy2
        if "bias" in self.grads:
            self.grads["bias"] += dy2.sum(axis=0)
        return dy @ self.params["weight"].T


class LayerNorm(Module):
    """Per-position normalisation over the last axis with learned affine."""

    def __init__(self, dim: int, eps: float = 1e-12):
        super().__init__()
        self.eps = eps
        self._add("gamma", np.ones(dim))
        self._add("beta", np.zeros(dim))

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._xhat, self._inv = xhat, inv
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._xhat, self._inv
        d = xhat.shape[-1]
        flat_dy = dy.reshape(-1, d)
        self.grads["gamma"] += (flat_dy * xhat.reshape(-1, d)).sum(axis=0)
        self.grads["beta"] += flat_dy.sum(axis=0)
        dxhat = dy * self.params["gamma"]
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal table: sin on even dims, cos on odd dims."""
    t = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim)
    rates = np.power(10000.0, -(2 * (i // 2)) / dim)
    angles = t * rates[None, :]
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over ``[B, T, d]`` with a key mask."""

    def __init__(self, dim: int, heads: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"model dim {dim} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.heads = heads
        self.q = Dense(dim, dim, rng, gain=1.0)
        # a key bias shifts every score in a row equally, so it has no gradient
        self.k = Dense(dim, dim, rng, gain=1.0, bias=False)
        self.v = Dense(dim, dim, rng, gain=1.0)
        self.o = Dense(dim, dim, rng, gain=1.0)

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, h, t, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(x))
        v = self._split(self.v.forward(x))
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        if mask is not None:
            scores = np.where(mask[:, None, None, :], scores, -np.inf)
        attn = softmax(scores, axis=-1)
        self._cache = (q, k, v, attn, scale)
        self.attention = attn
        return self.o.forward(self._merge(attn @ v))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        q, k, v, attn, scale = self._cache
        dctx = self._split(self.o.backward(dy))
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
        return (self.q.backward(self._merge(dq))
                + self.k.backward(self._merge(dk))
                + self.v.backward(self._merge(dv)))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = Dense(dim, hidden, rng)
        self.act = ReLU()
        self.fc2 = Dense(hidden, dim, rng, gain=1.0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


class TransformerBlock(Module):
    """Pre-norm encoder block: ``h = x + MHA(LN(x)); y = h + FFN(LN(h))``."""

    def __init__(self, dim: int, heads: int, ff_hidden: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_hidden, rng)

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        h = x + self.attn.forward(self.ln1.forward(x), mask)
        return h + self.ff.forward(self.ln2.forward(h))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = dy + self.ln2.backward(self.ff.backward(dy))
        return dh + self.ln1.backward(self.attn.backward(dh))


class MaskedMeanPool(Module):
    """Mean over valid time steps: ``[B, T, d] -> [B, d]``."""

    def forward(self, x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        w = mask.astype(np.float64)
        self._w = w / w.sum(axis=1, keepdims=True)
        return np.einsum("bt,btd->bd", self._w, x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self._w[:, :, None] * dy[:, None, :]
