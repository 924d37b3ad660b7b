"""Mini-batch training with Adam, lr decay on plateau and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Protocol, Tuple

import numpy as np

from ..errors import ConfigError, DivergenceError
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lr_decay: float = 0.5
    patience: int = 5
    max_epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay", "must lie in (0, 1]")
        if self.patience < 1:
            raise ConfigError("patience", "must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class Dataset(Protocol):
    def __len__(self) -> int: ...

    def batch(self, indices: np.ndarray) -> Any: ...


class Trainable(Protocol):
    def train_step(self, batch: Any) -> float: ...

    def evaluate(self, dataset: Dataset) -> Dict[str, float]: ...

    def zero_grad(self) -> None: ...

    def parameters(self) -> Dict[str, np.ndarray]: ...

    def gradients(self) -> Dict[str, np.ndarray]: ...

    def state_dict(self) -> Dict[str, np.ndarray]: ...

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None: ...


def train_loop(model: Trainable, train_set: Dataset, val_set: Dataset, config: TrainConfig
               ) -> Tuple[Dict[str, np.ndarray], List[Dict[str, float]]]:
    """Fit ``model`` and return the best-validation parameters plus per-epoch history.

    The model is left holding the returned parameters.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train_loop needs non-empty training and validation sets")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    lr = config.learning_rate
    best_loss = math.inf
    best_params = model.state_dict()
    stale = 0
    history: List[Dict[str, float]] = []
    n = len(train_set)

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            loss = model.train_step(train_set.batch(idx))
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite training loss {loss!r} at epoch {epoch}, "
                                      f"batch starting {start} (lr={lr:g})")
            adam_step(model.parameters(), model.gradients(), state, lr,
                      config.beta1, config.beta2, config.adam_eps)
            total += loss * len(idx)
        metrics = model.evaluate(val_set)
        val_loss = metrics["loss"]
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss {val_loss!r} at epoch {epoch}")
        row = {"epoch": epoch, "train_loss": total / n, "lr": lr}
        row.update({f"val_{k}": v for k, v in metrics.items()})
        history.append(row)
        log.debug("epoch %d train=%.5f val=%.5f lr=%g", epoch, row["train_loss"], val_loss, lr)

        if val_loss < best_loss:
            best_loss = val_loss
            best_params = model.state_dict()
            stale = 0
        else:
            stale += 1
            lr *= config.lr_decay
            if stale >= config.patience:
                break

    model.load_state_dict(best_params)
    return best_params, history
