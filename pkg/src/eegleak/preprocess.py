"""Percentile-truncated min-max normalisation with optional log compression."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .cohort import FeatureChannel, PatientRecord
from .errors import ConfigError

ChannelKey = Tuple[str, str, str]


@dataclass(frozen=True)
class NormalizationSpec:
    log_transform: bool = False
    truncate: bool = True
    p_low: float = 1.0
    p_high: float = 99.0

    def __post_init__(self):
        if not self.truncate and (self.p_low, self.p_high) != (0.0, 100.0):
            raise ConfigError("norm", "untruncated normalisation must use (p_low, p_high) "
                                      "= (0, 100)")
        if not 0.0 <= self.p_low < self.p_high <= 100.0:
            raise ConfigError("norm", f"need 0 <= p_low < p_high <= 100, got "
                                      f"({self.p_low}, {self.p_high})")

    @classmethod
    def from_config(cls, d: Dict) -> "NormalizationSpec":
        """Parse the run-config form ``{log: bool, p_low: float, p_high: float}``."""
        unknown = set(d) - {"log", "p_low", "p_high", "truncate"}
        if unknown:
            raise ConfigError("norm", f"unknown key(s) {sorted(unknown)}")
        p_low = float(d.get("p_low", 0.0))
        p_high = float(d.get("p_high", 100.0))
        truncate = bool(d.get("truncate", (p_low, p_high) != (0.0, 100.0)))
        return cls(bool(d.get("log", False)), truncate, p_low, p_high)

    def to_config(self) -> Dict:
        return {"log": self.log_transform, "p_low": self.p_low, "p_high": self.p_high}

    def label(self) -> str:
        rng = f"{self.p_low:g}-{self.p_high:g}%"
        return f"log={'on' if self.log_transform else 'off'} truncate={rng if self.truncate else 'off'}"


@dataclass(frozen=True)
class ChannelStats:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"ChannelStats needs lo <= hi, got {self.lo} > {self.hi}")


def log_compress(values) -> np.ndarray:
    """Signed ``log1p``: defined and monotone on the whole real line."""
    x = np.asarray(values, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def fit_stats(training_values, spec: NormalizationSpec) -> ChannelStats:
    x = np.asarray(training_values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("fit_stats needs at least one training value")
    x = x[~np.isnan(x)]
    if x.size == 0:
        raise ValueError("fit_stats got only NaN values")
    if spec.log_transform:
        x = log_compress(x)
    if spec.truncate:
        lo, hi = np.percentile(x, [spec.p_low, spec.p_high], method="linear")
    else:
        lo, hi = x.min(), x.max()
    return ChannelStats(float(lo), float(hi))


def apply_normalization(values, stats: ChannelStats, spec: NormalizationSpec) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if spec.log_transform:
        x = log_compress(x)
    if stats.hi == stats.lo:
        return np.full_like(x, 0.5)
    return np.clip((x - stats.lo) / (stats.hi - stats.lo), 0.0, 1.0)


def enumerate_strategies() -> List[NormalizationSpec]:
    """The six log x truncation combinations, in comparison-table order."""
    return [
        NormalizationSpec(False, False, 0.0, 100.0),
        NormalizationSpec(True, False, 0.0, 100.0),
        NormalizationSpec(False, True, 1.0, 99.0),
        NormalizationSpec(True, True, 1.0, 99.0),
        NormalizationSpec(False, True, 5.0, 95.0),
        NormalizationSpec(True, True, 5.0, 95.0),
    ]


@dataclass
class FittedNormalization:
    """Per channel-group statistics plus the patients they were fitted on."""

    spec: NormalizationSpec
    stats: Dict[ChannelKey, ChannelStats]
    fitted_on: Tuple[str, ...] = field(default_factory=tuple)

    def apply(self, records: Iterable[PatientRecord]) -> List[PatientRecord]:
        out = []
        for r in records:
            chans = [
                FeatureChannel(c.feature_family, c.band, c.derivation,
                               apply_normalization(c.values, self.stats[c.key], self.spec))
                if c.key in self.stats else c
                for c in r.channels
            ]
            out.append(PatientRecord(r.patient_id, r.label, chans, r.sample_period))
        return out

    def to_dict(self) -> Dict:
        return {
            "spec": self.spec.to_config(),
            "stats": [{"family": k[0], "band": k[1], "derivation": k[2], "lo": s.lo, "hi": s.hi}
                      for k, s in sorted(self.stats.items())],
            "fitted_on": list(self.fitted_on),
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "FittedNormalization":
        stats = {(s["family"], s["band"], s["derivation"]): ChannelStats(s["lo"], s["hi"])
                 for s in d["stats"]}
        return cls(NormalizationSpec.from_config(d["spec"]), stats, tuple(d["fitted_on"]))


def fit_cohort(records: Sequence[PatientRecord], spec: NormalizationSpec,
               training_ids: Iterable[str],
               keys: Sequence[ChannelKey] | None = None) -> FittedNormalization:
    """Fit statistics per channel group on the listed training patients only."""
    train = set(training_ids)
    chosen = [r for r in records if r.patient_id in train]
    if not chosen:
        raise ValueError("no training patients to fit normalisation on")
    if keys is None:
        keys = sorted({c.key for r in chosen for c in r.channels})
    stats = {}
    for key in keys:
        vals = [c.values for r in chosen for c in r.channels if c.key == key]
        if not vals:
            raise KeyError(f"no training values for channel {key}")
        stats[tuple(key)] = fit_stats(np.concatenate(vals), spec)
    return FittedNormalization(spec, stats, tuple(sorted(r.patient_id for r in chosen)))
