"""Experiments built on the pipeline: leakage control, feature ranking, normalization table."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cohort import PatientRecord, generate_cohort
from .config import CLEAN, LEAKY, RunConfig
from .errors import ConfigError
from .metrics import ScoredCohort, balanced_accuracy, correlation_score
from .nn import (
    Conv1d,
    Dense,
    GlobalAvgPool1d,
    Module,
    ReLU,
    TrainConfig,
    softmax,
    softmax_cross_entropy,
    train_loop,
)
from .partition import STAGE1_TRAIN, STAGE2_VAL, TEST, make_clean_split
from .pipeline import ExperimentReport, run_pipeline
from .preprocess import NormalizationSpec, enumerate_strategies, fit_cohort
from .stage1 import WindowDataset, build_windows, inverse_frequency_weights

ChannelKey = Tuple[str, str, str]
NORM_COMPARE_CHANNEL: ChannelKey = ("RhythmicitySpectrogram", "0-8Hz", "adjacent-diff")


# ---------------------------------------------------------------- control experiment

@dataclass
class ControlReport:
    clean: ExperimentReport
    leaky: ExperimentReport
    gaps: Dict[str, Dict[str, float]]

    def to_dict(self) -> Dict:
        return {"clean": self.clean.to_dict(), "leaky": self.leaky.to_dict(), "gaps": self.gaps}


def validation_gaps(report: ExperimentReport) -> Dict[str, float]:
    """Validation minus test, for AUC and Sens@Spec99."""
    out = {}
    for name in ("auc", "sens_at_spec99"):
        val, test = report.metric(STAGE2_VAL, name), report.metric(TEST, name)
        out[f"val_{name}"] = val
        out[f"test_{name}"] = test
        out[f"{name}_gap"] = val - test
    return out


def leakage_control_experiment(cfg: RunConfig, out_dir: Optional[Path | str] = None
                               ) -> ControlReport:
    """Run the pipeline on one cohort twice: clean wiring, then leaky wiring.

    Only the wiring differs.  The leaky arm runs with the audit override on,
    and its report is flagged leaky.  Arms are written to ``out_dir/clean`` and
    ``out_dir/leaky``; ``None`` or an empty string writes nothing.
    """
    if cfg.synth is None:
        raise ConfigError("synth", "the control experiment needs a synthetic cohort")
    if cfg.synth.fingerprint_strength <= 0:
        raise ConfigError("synth.fingerprint_strength", "must be > 0 for the control experiment")
    cohort = generate_cohort(cfg.synth)
    reports = {}
    for wiring in (CLEAN, LEAKY):
        arm = replace(cfg, wiring=wiring, allow_leaky=(wiring == LEAKY) or cfg.allow_leaky)
        sub = Path(out_dir) / wiring if out_dir else ""
        reports[wiring] = run_pipeline(arm, cohort=cohort, out_dir=sub)
    gaps = {w: validation_gaps(r) for w, r in reports.items()}
    return ControlReport(reports[CLEAN], reports[LEAKY], gaps)


# ---------------------------------------------------------------- baseline model

class BaselineModel(Module):
    """A single conv layer, global average pool and a two-way dense layer."""

    def __init__(self, n_channels: int, filters: int = 8, kernel: int = 7, stride: int = 2,
                 seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([int(seed), 303])
        self.conv = Conv1d(n_channels, filters, kernel, stride, rng)
        self.act = ReLU()
        self.pool = GlobalAvgPool1d()
        self.head = Dense(filters, 2, rng, gain=1.0)
        self.class_weights: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.head.forward(self.pool.forward(self.act.forward(self.conv.forward(x))))

    def backward(self, d: np.ndarray) -> None:
        self.conv.backward(self.act.backward(self.pool.backward(self.head.backward(d))))

    def train_step(self, batch) -> float:
        x, y = batch
        loss, d = softmax_cross_entropy(self.forward(x), y, self.class_weights)
        self.backward(d)
        return loss

    def predict_proba(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [softmax(self.forward(X[i:i + batch_size]), axis=1)[:, 1]
               for i in range(0, X.shape[0], batch_size)]
        return np.concatenate(out) if out else np.empty(0)

    def evaluate(self, dataset: WindowDataset) -> Dict[str, float]:
        logits = np.concatenate([self.forward(dataset.X[i:i + 256])
                                 for i in range(0, len(dataset), 256)])
        loss, _ = softmax_cross_entropy(logits, dataset.labels, self.class_weights)
        acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
        return {"loss": loss, "accuracy": acc}


BASELINE_TRAIN = TrainConfig(learning_rate=3e-3, lr_decay=0.7, patience=5, max_epochs=25,
                             batch_size=32, seed=3)


@dataclass
class BaselineRun:
    model: BaselineModel
    history: List[Dict[str, float]]
    val: WindowDataset

    @property
    def min_val_loss(self) -> float:
        return min(h["val_loss"] for h in self.history)

    @property
    def max_val_accuracy(self) -> float:
        return max(h["val_accuracy"] for h in self.history)


def _stage1_windows(cohort: Sequence[PatientRecord], cfg: RunConfig,
                    channels: Sequence[ChannelKey], norm: NormalizationSpec
                    ) -> Tuple[WindowDataset, WindowDataset]:
    labels = {r.patient_id: r.label for r in cohort}
    split = make_clean_split(sorted(labels), labels, cfg.fractions, cfg.split_seed,
                             cfg.stage2_fraction, cfg.stratified)
    train_ids = set(split.ids(STAGE1_TRAIN))
    val_ids = set(split.stage1_val_ids)
    fitted = fit_cohort(cohort, norm, sorted(train_ids), channels)
    normalized = fitted.apply(cohort)
    tr = build_windows([r for r in normalized if r.patient_id in train_ids], channels,
                       cfg.window_seconds)
    va = build_windows([r for r in normalized if r.patient_id in val_ids], channels,
                       cfg.window_seconds)
    return tr, va


def train_baseline(train: WindowDataset, val: WindowDataset,
                   train_cfg: TrainConfig = BASELINE_TRAIN) -> BaselineRun:
    model = BaselineModel(train.X.shape[1], seed=train_cfg.seed)
    model.class_weights = inverse_frequency_weights(train.labels)
    _, history = train_loop(model, train, val, train_cfg)
    return BaselineRun(model, history, val)


# ---------------------------------------------------------------- feature ranking

@dataclass(frozen=True)
class FeatureConfig:
    name: str
    channels: Tuple[ChannelKey, ...]

    @classmethod
    def from_dict(cls, d: Dict) -> "FeatureConfig":
        chans = tuple(tuple(c) for c in d["channels"])
        return cls(str(d.get("name", "+".join("/".join(c) for c in chans))), chans)


def _check_channels(cohort: Sequence[PatientRecord], fc: FeatureConfig) -> None:
    have = {c.key for c in cohort[0].channels}
    if not fc.channels or not set(fc.channels) <= have:
        missing = sorted(set(fc.channels) - have)
        raise ConfigError(f"feature_configs.{fc.name}",
                          f"no matching channels for {missing or 'empty channel list'}")


def feature_rank(cfg: RunConfig, feature_configs: Sequence[FeatureConfig],
                 cohort: Optional[Sequence[PatientRecord]] = None,
                 train_cfg: TrainConfig = BASELINE_TRAIN) -> List[Tuple[FeatureConfig, float]]:
    """Score each channel set by the baseline model's window-level correlation score.

    Scores come from Stage-1 validation windows at the best epoch; the list is
    sorted by score, highest first (ties keep input order).
    """
    if not feature_configs:
        raise ConfigError("feature_configs", "at least one feature configuration is required")
    if cohort is None:
        cohort = generate_cohort(cfg.synth)
    for fc in feature_configs:
        _check_channels(cohort, fc)
    scored = []
    for fc in feature_configs:
        tr, va = _stage1_windows(cohort, cfg, fc.channels, cfg.norm)
        run = train_baseline(tr, va, train_cfg)
        prob = run.model.predict_proba(va.X)
        ba = balanced_accuracy(ScoredCohort(np.arange(len(va)), prob, va.labels), 0.5)
        scored.append((fc, correlation_score(ba)))
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][1], i))
    return [scored[i] for i in order]


# ---------------------------------------------------------------- normalization table

@dataclass
class NormalizationRow:
    experiment: int
    spec: NormalizationSpec
    min_val_loss: float
    max_val_accuracy: float

    def to_dict(self) -> Dict:
        return {"experiment": self.experiment, "strategy": self.spec.label(),
                **self.spec.to_config(), "min_val_loss": self.min_val_loss,
                "max_val_accuracy": self.max_val_accuracy}


def compare_normalizations(cfg: RunConfig, cohort: Optional[Sequence[PatientRecord]] = None,
                           channel: ChannelKey = NORM_COMPARE_CHANNEL,
                           train_cfg: TrainConfig = BASELINE_TRAIN) -> List[NormalizationRow]:
    """Train the baseline on one channel under each of the six strategies, same seed."""
    if cohort is None:
        if cfg.synth is None:
            raise ConfigError("synth", "normalization comparison needs a synthetic cohort")
        if cfg.synth.artifact_rate <= 0:
            raise ConfigError("synth.artifact_rate", "artifacts must be enabled (rate > 0)")
        cohort = generate_cohort(cfg.synth)
    _check_channels(cohort, FeatureConfig("norm-compare", (channel,)))
    rows = []
    for i, spec in enumerate(enumerate_strategies(), start=1):
        tr, va = _stage1_windows(cohort, cfg, (channel,), spec)
        run = train_baseline(tr, va, train_cfg)
        rows.append(NormalizationRow(i, spec, run.min_val_loss, run.max_val_accuracy))
    return rows


def format_table(rows: Sequence[NormalizationRow]) -> str:
    lines = [f"{'Exp.':<5}{'Strategy':<34}{'Min val loss':>14}{'Max val acc':>13}"]
    for r in rows:
        lines.append(f"{r.experiment:<5}{r.spec.label():<34}{r.min_val_loss:>14.4f}"
                     f"{r.max_val_accuracy:>13.4f}")
    return "\n".join(lines)
