"""Window-level CNN encoder trained with an ArcFace head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cohort import PatientRecord
from .errors import LeakageRefusal, ShapeError
from .nn import (
    ArcFaceParams,
    Conv1d,
    Dense,
    GlobalAvgPool1d,
    Module,
    ReLU,
    TrainConfig,
    arcface_loss,
    arcface_probabilities,
    cosine_logits,
    train_loop,
)
from .partition import LeakageReport, WindowKey, slice_windows


@dataclass
class EmbeddingRecord:
    patient_id: str
    window_index: int
    vector: np.ndarray
    window_probability: float

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (self.patient_id == other.patient_id and self.window_index == other.window_index
                and np.array_equal(self.vector, other.vector)
                and self.window_probability == other.window_probability)


class WindowDataset:
    """Stacked windows ``X [N, C, L]`` with keys and (optional) labels."""

    def __init__(self, X: np.ndarray, keys: Sequence[WindowKey], labels: Optional[np.ndarray]):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.keys = list(keys)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        if self.X.ndim != 3 or self.X.shape[0] != len(self.keys):
            raise ShapeError(f"windows {self.X.shape} do not match {len(self.keys)} keys")

    def __len__(self) -> int:
        return len(self.keys)

    def batch(self, idx: np.ndarray):
        return self.X[idx], self.labels[idx]

    def without_labels(self) -> "WindowDataset":
        return WindowDataset(self.X, self.keys, None)


def build_windows(records: Iterable[PatientRecord], channels: Sequence[Tuple[str, str, str]],
                  window_seconds: float = 300.0, include: Optional[set] = None,
                  with_labels: bool = True) -> WindowDataset:
    """Slice records into a dataset; ``include`` restricts to the given window keys.

    Window labels are inherited from the patient label.
    """
    xs, keys, ys = [], [], []
    for r in records:
        for w in slice_windows(r, window_seconds, window_seconds, channels):
            if include is not None and w.key not in include:
                continue
            xs.append(w.features)
            keys.append(w.key)
            ys.append(r.label)
    n_ch = len(channels)
    if xs:
        X = np.stack(xs)
    else:
        X = np.empty((0, n_ch, int(round(window_seconds))), dtype=np.float64)
    return WindowDataset(X, keys, np.asarray(ys) if with_labels else None)


@dataclass
class Stage1Config:
    embed_dim: int = 32
    conv_channels: Tuple[int, int] = (16, 16)
    kernel_sizes: Tuple[int, int] = (7, 5)
    strides: Tuple[int, int] = (2, 2)
    arcface_s: float = 16.0
    arcface_m: float = 0.3
    class_weighting: str = "inverse_frequency"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=2e-3, lr_decay=1.0, patience=10, max_epochs=40, batch_size=64, seed=1))

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


class Stage1Encoder(Module):
    """conv -> relu -> conv -> relu -> global average pool -> dense (embedding)."""

    def __init__(self, n_channels: int, window_len: int, config: Stage1Config,
                 seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([int(seed), 101])
        c1, c2 = config.conv_channels
        k1, k2 = config.kernel_sizes
        s1, s2 = config.strides
        self.input_shape = (n_channels, window_len)
        self.s, self.m = config.arcface_s, config.arcface_m
        self.conv1 = Conv1d(n_channels, c1, k1, s1, rng)
        self.act1 = ReLU()
        self.conv2 = Conv1d(c1, c2, k2, s2, rng)
        self.act2 = ReLU()
        self.pool = GlobalAvgPool1d()
        self.embed = Dense(c2, config.embed_dim, rng, gain=1.0)
        self._add("arcface_weight", rng.normal(size=(2, config.embed_dim)))
        self.class_weights: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"encoder trained on windows {self.input_shape}, got "
                             f"{tuple(x.shape[1:])}")
        h = self.act1.forward(self.conv1.forward(x))
        h = self.act2.forward(self.conv2.forward(h))
        return self.embed.forward(self.pool.forward(h))

    def backward(self, d_embed: np.ndarray) -> None:
        d = self.pool.backward(self.embed.backward(d_embed))
        d = self.conv2.backward(self.act2.backward(d))
        self.conv1.backward(self.act1.backward(d))

    def _arcface(self) -> ArcFaceParams:
        return ArcFaceParams(self.s, self.m, self.params["arcface_weight"])

    def train_step(self, batch) -> float:
        x, y = batch
        emb = self.forward(x)
        loss, d_emb, d_w = arcface_loss(emb, y, self._arcface(), self.class_weights)
        self.grads["arcface_weight"] += d_w
        self.backward(d_emb)
        return loss

    def embed_windows(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(X[i:i + batch_size]) for i in range(0, X.shape[0], batch_size)]
        return np.concatenate(out) if out else np.empty((0, self.embed.params["weight"].shape[1]))

    def evaluate(self, dataset: WindowDataset) -> Dict[str, float]:
        emb = self.embed_windows(dataset.X)
        loss, _, _ = arcface_loss(emb, dataset.labels, self._arcface(), self.class_weights)
        pred = np.argmax(cosine_logits(emb, self.params["arcface_weight"]), axis=1)
        return {"loss": loss, "accuracy": float(np.mean(pred == dataset.labels))}


def inverse_frequency_weights(labels: np.ndarray, n_classes: int = 2) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(float)
    if np.any(counts == 0):
        raise ValueError(f"class counts {counts.tolist()}: every class needs examples")
    return counts.sum() / (n_classes * counts)


def _check_audit(audit: Optional[LeakageReport], allow_leaky: bool) -> bool:
    leaky = audit is not None and not audit.is_clean
    if leaky and not allow_leaky:
        raise LeakageRefusal(audit)
    return leaky


def train_stage1(train: WindowDataset, val: WindowDataset, config: Stage1Config,
                 audit: Optional[LeakageReport] = None, allow_leaky: bool = False,
                 seed: int = 0) -> Tuple[Stage1Encoder, List[Dict[str, float]]]:
    """Fit the encoder; refuses a non-empty leakage audit unless ``allow_leaky``."""
    _check_audit(audit, allow_leaky)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("stage 1 needs non-empty training and validation windows")
    enc = Stage1Encoder(train.X.shape[1], train.X.shape[2], config, seed)
    if config.class_weighting == "inverse_frequency":
        enc.class_weights = inverse_frequency_weights(train.labels)
    _, history = train_loop(enc, train, val, config.train)
    return enc, history


def extract_embeddings(encoder: Stage1Encoder, windows: WindowDataset) -> List[EmbeddingRecord]:
    """Penultimate-layer vectors and survival probability for every window."""
    emb = encoder.embed_windows(windows.X)
    prob = arcface_probabilities(emb, encoder.params["arcface_weight"], encoder.s)[:, 1]
    return [EmbeddingRecord(p, int(i), emb[k].copy(), float(prob[k]))
            for k, (p, i) in enumerate(windows.keys)]


def encoder_from_state(state: Mapping[str, np.ndarray], meta: Mapping) -> Stage1Encoder:
    cfg = Stage1Config(embed_dim=int(meta["embed_dim"]),
                       conv_channels=tuple(meta["conv_channels"]),
                       kernel_sizes=tuple(meta["kernel_sizes"]),
                       strides=tuple(meta["strides"]),
                       arcface_s=float(meta["arcface_s"]), arcface_m=float(meta["arcface_m"]))
    enc = Stage1Encoder(int(meta["n_channels"]), int(meta["window_len"]), cfg)
    enc.load_state_dict(dict(state))
    return enc


def encoder_meta(encoder: Stage1Encoder, config: Stage1Config) -> Dict:
    return {"n_channels": encoder.input_shape[0], "window_len": encoder.input_shape[1],
            "embed_dim": config.embed_dim, "conv_channels": list(config.conv_channels),
            "kernel_sizes": list(config.kernel_sizes), "strides": list(config.strides),
            "arcface_s": config.arcface_s, "arcface_m": config.arcface_m}
