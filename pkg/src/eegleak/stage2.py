"""Patient-level transformer over stage-1 embedding sequences."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import LeakageRefusal, ShapeError
from .metrics import ScoredCohort, roc_auc
from .nn import (
    Dense,
    MaskedMeanPool,
    Module,
    TrainConfig,
    TransformerBlock,
    binary_cross_entropy_with_logits,
    positional_encoding,
    train_loop,
)
from .partition import LeakageReport
from .stage1 import EmbeddingRecord, inverse_frequency_weights

log = logging.getLogger(__name__)


@dataclass
class EmbeddingSequence:
    patient_id: str
    vectors: np.ndarray  # [T, d], ordered by window index
    label: Optional[int] = None
    window_indices: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ShapeError(f"{self.patient_id}: sequence needs shape [T>=1, d]")

    @property
    def length(self) -> int:
        return self.vectors.shape[0]


def build_sequences(records: Iterable[EmbeddingRecord], max_len: int = 288,
                    labels: Optional[Mapping[str, int]] = None,
                    patients: Optional[Iterable[str]] = None) -> List[EmbeddingSequence]:
    """Group embedding records per patient, order by window index, keep the first ``max_len``.

    ``patients`` lists ids that should have a sequence; those with no windows
    are dropped with a warning.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    groups: Dict[str, List[EmbeddingRecord]] = {}
    for r in records:
        groups.setdefault(r.patient_id, []).append(r)
    if patients is not None:
        for pid in sorted(set(patients) - set(groups)):
            log.warning("patient %s has no windows; excluded from stage-2 sequences", pid)
    out = []
    for pid in sorted(groups):
        rs = sorted(groups[pid], key=lambda r: r.window_index)
        idx = [r.window_index for r in rs]
        if len(set(idx)) != len(idx):
            raise ValueError(f"{pid}: duplicate window indices")
        rs = rs[:max_len]
        out.append(EmbeddingSequence(
            pid, np.stack([r.vector for r in rs]),
            None if labels is None else int(labels[pid]),
            tuple(r.window_index for r in rs)))
    return out


class SequenceDataset:
    def __init__(self, sequences: Sequence[EmbeddingSequence]):
        self.sequences = list(sequences)

    def __len__(self) -> int:
        return len(self.sequences)

    def batch(self, idx):
        seqs = [self.sequences[i] for i in idx]
        return pad_batch(seqs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)


def pad_batch(seqs: Sequence[EmbeddingSequence]):
    t = max(s.length for s in seqs)
    d = seqs[0].vectors.shape[1]
    X = np.zeros((len(seqs), t, d))
    mask = np.zeros((len(seqs), t), dtype=bool)
    for i, s in enumerate(seqs):
        X[i, :s.length] = s.vectors
        mask[i, :s.length] = True
    y = np.array([-1 if s.label is None else s.label for s in seqs], dtype=np.int64)
    return X, mask, y


@dataclass
class Stage2Config:
    heads: int = 8
    ff_hidden: int = 64
    use_positional_encoding: bool = True
    max_len: int = 288
    class_weighting: str = "inverse_frequency"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=3e-4, lr_decay=0.9, patience=20, max_epochs=150, batch_size=8, seed=2))

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


class Stage2Model(Module):
    """(+ positional encoding) -> pre-norm encoder block -> mean pool -> dense -> sigmoid."""

    def __init__(self, embed_dim: int, config: Stage2Config, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([int(seed), 202])
        self.embed_dim = embed_dim
        self.use_pe = config.use_positional_encoding
        self.block = TransformerBlock(embed_dim, config.heads, config.ff_hidden, rng)
        self.pool = MaskedMeanPool()
        self.head = Dense(embed_dim, 1, rng, gain=1.0)
        self.class_weights: Optional[np.ndarray] = None
        # Embedding scale is arbitrary under ArcFace, so inputs are standardized
        # with statistics from the training sequences before the positional code.
        self.input_mean = np.zeros(embed_dim)
        self.input_scale = np.ones(embed_dim)

    def fit_input_stats(self, sequences: Sequence[EmbeddingSequence]) -> None:
        V = np.concatenate([s.vectors for s in sequences])
        self.input_mean = V.mean(axis=0)
        self.input_scale = np.maximum(V.std(axis=0), 1e-8)

    def logits(self, X: np.ndarray, mask: np.ndarray) -> np.ndarray:
        if X.shape[-1] != self.embed_dim:
            raise ShapeError(f"model expects embed_dim {self.embed_dim}, got {X.shape[-1]}")
        X = (X - self.input_mean) / self.input_scale * mask[..., None]
        if self.use_pe:
            X = X + positional_encoding(X.shape[1], X.shape[2])[None]
        h = self.block.forward(X, mask)
        return self.head.forward(self.pool.forward(h, mask))[:, 0]

    def backward(self, dlogits: np.ndarray) -> None:
        d = self.pool.backward(self.head.backward(dlogits[:, None]))
        self.block.backward(d)

    def train_step(self, batch) -> float:
        X, mask, y = batch
        z = self.logits(X, mask)
        loss, dz = binary_cross_entropy_with_logits(z, y, self.class_weights)
        self.backward(dz)
        return loss

    def predict_proba(self, sequences: Sequence[EmbeddingSequence], batch_size: int = 32
                      ) -> np.ndarray:
        out = []
        for i in range(0, len(sequences), batch_size):
            X, mask, _ = pad_batch(sequences[i:i + batch_size])
            z = self.logits(X, mask)
            out.append(0.5 * (1.0 + np.tanh(0.5 * z)))
        return np.concatenate(out) if out else np.empty(0)

    def evaluate(self, dataset: SequenceDataset) -> Dict[str, float]:
        X, mask, y = pad_batch(dataset.sequences)
        z = self.logits(X, mask)
        loss, _ = binary_cross_entropy_with_logits(z, y, self.class_weights)
        row = {"loss": loss}
        if 0 < y.sum() < len(y):
            row["auc"] = roc_auc(ScoredCohort(np.arange(len(y)), z, y))
        return row


def train_stage2(train: Sequence[EmbeddingSequence], val: Sequence[EmbeddingSequence],
                 config: Stage2Config, audit: Optional[LeakageReport] = None,
                 allow_leaky: bool = False, seed: int = 0
                 ) -> Tuple[Stage2Model, List[Dict[str, float]], bool]:
    """Fit the aggregator.  Returns ``(model, history, leaky)``."""
    leaky = audit is not None and not audit.is_clean
    if leaky and not allow_leaky:
        raise LeakageRefusal(audit)
    if not train:
        raise ValueError("Stage2Train is empty")
    if not val:
        raise ValueError("Stage2Val is empty")
    d = train[0].vectors.shape[1]
    model = Stage2Model(d, config, seed)
    model.fit_input_stats(train)
    train_ds, val_ds = SequenceDataset(train), SequenceDataset(val)
    if config.class_weighting == "inverse_frequency":
        model.class_weights = inverse_frequency_weights(train_ds.labels)
    _, history = train_loop(model, train_ds, val_ds, config.train)
    return model, history, leaky


def predict_patient(model: Stage2Model, sequence: EmbeddingSequence) -> float:
    """Survival probability for one patient."""
    return float(model.predict_proba([sequence])[0])


def model_from_state(state: Mapping[str, np.ndarray], meta: Mapping) -> Stage2Model:
    cfg = Stage2Config(heads=int(meta["heads"]), ff_hidden=int(meta["ff_hidden"]),
                       use_positional_encoding=bool(meta["use_positional_encoding"]))
    model = Stage2Model(int(meta["embed_dim"]), cfg)
    model.load_state_dict(dict(state))
    model.input_mean = np.asarray(meta["input_mean"], dtype=np.float64)
    model.input_scale = np.asarray(meta["input_scale"], dtype=np.float64)
    return model


def model_meta(model: Stage2Model, config: Stage2Config) -> Dict:
    return {"embed_dim": model.embed_dim, "heads": config.heads, "ff_hidden": config.ff_hidden,
            "use_positional_encoding": config.use_positional_encoding,
            "input_mean": model.input_mean.tolist(), "input_scale": model.input_scale.tolist()}
