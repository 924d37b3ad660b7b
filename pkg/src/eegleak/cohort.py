"""Synthetic patient cohorts and the manifest + sidecar cohort file format.

Synthetic patients carry four ingredients that matter downstream:

* a label-dependent noise scale (survivors vary more),
* a per-patient offset and slow drift that is independent of the label
  (the "fingerprint" a leaky pipeline can memorise),
* heavy-tailed multiplicative spikes standing in for electrode artifacts,
* a 3:1 non-survivor to survivor ratio by default.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.signal import lfilter

from .errors import (
    ChannelLengthError,
    ConfigError,
    DuplicatePatientError,
    MalformedManifestError,
    MissingCohortFileError,
)

FAMILIES = ("FFTSpectrogram", "aEEG", "RhythmicitySpectrogram", "SuppressionRatio")
MANIFEST_HEADER = ["patient_id", "label", "duration", "sample_period", "n_channels"]
SIDECAR_MAGIC = b"COH1"


@dataclass(frozen=True)
class ChannelSpec:
    family: str
    band: str
    derivation: str
    informative: bool = True
    mean: float = 10.0

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.family, self.band, self.derivation)


DEFAULT_REGISTRY: Tuple[ChannelSpec, ...] = (
    ChannelSpec("FFTSpectrogram", "0-4Hz", "adjacent-diff", True, 10.0),
    ChannelSpec("aEEG", "broadband", "AV17", True, 20.0),
    ChannelSpec("RhythmicitySpectrogram", "0-4Hz", "adjacent-diff", True, 8.0),
    ChannelSpec("SuppressionRatio", "broadband", "adjacent-diff", True, 12.0),
    ChannelSpec("RhythmicitySpectrogram", "0-8Hz", "adjacent-diff", True, 9.0),
    ChannelSpec("FFTSpectrogram", "13-30Hz", "adjacent-diff", False, 6.0),
)

# channels fed to the two-stage pipeline by default
RETAINED_CHANNELS: Tuple[Tuple[str, str, str], ...] = tuple(c.key for c in DEFAULT_REGISTRY[:4])


@dataclass
class FeatureChannel:
    feature_family: str
    band: str
    derivation: str
    values: np.ndarray

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.feature_family, self.band, self.derivation)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureChannel):
            return NotImplemented
        return (self.key == other.key and self.values.shape == other.values.shape
                and bool(np.array_equal(self.values, other.values)))


@dataclass
class PatientRecord:
    patient_id: str
    label: int
    channels: List[FeatureChannel]
    sample_period: float = 1.0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"{self.patient_id}: label must be 0 or 1, got {self.label!r}")
        if self.sample_period <= 0:
            raise ValueError(f"{self.patient_id}: sample_period must be positive")
        lengths = {c.values.shape[0] for c in self.channels}
        if len(lengths) > 1:
            raise ChannelLengthError(f"{self.patient_id}: channels disagree on length {lengths}")

    @property
    def duration(self) -> int:
        return int(self.channels[0].values.shape[0]) if self.channels else 0

    def matrix(self, keys: Sequence[Tuple[str, str, str]] | None = None) -> np.ndarray:
        """Channel values stacked as ``[n_channels, duration]``."""
        if keys is None:
            return np.stack([c.values for c in self.channels])
        by_key = {c.key: c.values for c in self.channels}
        missing = [k for k in keys if k not in by_key]
        if missing:
            raise KeyError(f"{self.patient_id}: no channel {missing[0]}")
        return np.stack([by_key[k] for k in keys])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (self.patient_id == other.patient_id and self.label == other.label
                and self.sample_period == other.sample_period
                and self.channels == other.channels)


@dataclass
class SynthConfig:
    n_patients: int = 300
    survivor_fraction: float = 0.25
    min_duration: int = 3600
    max_duration: int = 21600
    sample_period: float = 1.0
    artifact_rate: float = 0.005
    artifact_magnitude: float = 300.0
    fingerprint_strength: float = 3.0
    signal_strength: float = 0.35
    seed: int = 0
    registry: Tuple[ChannelSpec, ...] = field(default=DEFAULT_REGISTRY)

    def __post_init__(self):
        if isinstance(self.registry, list):
            self.registry = tuple(ChannelSpec(**c) if isinstance(c, dict) else c
                                  for c in self.registry)
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.n_patients, (int, np.integer)) or self.n_patients < 1:
            raise ConfigError("n_patients", "must be a positive integer")
        if not 0.0 < self.survivor_fraction < 1.0:
            raise ConfigError("survivor_fraction", "must lie in (0, 1)")
        if self.min_duration < 1:
            raise ConfigError("min_duration", "must be >= 1 sample")
        if self.max_duration < self.min_duration:
            raise ConfigError("max_duration", "must be >= min_duration")
        if self.sample_period <= 0:
            raise ConfigError("sample_period", "must be positive")
        if not 0.0 <= self.artifact_rate <= 1.0:
            raise ConfigError("artifact_rate", "must lie in [0, 1]")
        if self.artifact_magnitude < 0:
            raise ConfigError("artifact_magnitude", "must be non-negative")
        if self.fingerprint_strength < 0:
            raise ConfigError("fingerprint_strength", "must be non-negative")
        if self.signal_strength < 0:
            raise ConfigError("signal_strength", "must be non-negative")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if not self.registry:
            raise ConfigError("registry", "needs at least one channel")
        for c in self.registry:
            if c.family not in FAMILIES:
                raise ConfigError("registry", f"unknown feature family {c.family!r}")

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["registry"] = [asdict(c) for c in self.registry]
        return d


@dataclass
class PatientLatents:
    """Hidden generating variables, exposed for oracle tests."""

    patient_id: str
    label: int
    duration: int
    offsets: np.ndarray      # per-channel fingerprint offset
    noise_scale: np.ndarray  # per-channel AR(1) innovation scale


NOISE_SCALE = 1.0
AR_COEF = 0.8
DRIFT_COEF = 0.995
DRIFT_FRACTION = 0.2
PATIENT_JITTER = 0.05
SPIKE_TAIL = 1.5


def generate_latents(config: SynthConfig) -> List[PatientLatents]:
    config.validate()
    rng = np.random.default_rng([int(config.seed), 0])
    n = int(config.n_patients)
    n_surv = int(round(n * config.survivor_fraction))
    labels = rng.permutation(np.r_[np.ones(n_surv, dtype=int), np.zeros(n - n_surv, dtype=int)])
    durations = rng.integers(config.min_duration, config.max_duration + 1, size=n)
    n_ch = len(config.registry)
    informative = np.array([c.informative for c in config.registry], dtype=float)
    offsets = config.fingerprint_strength * NOISE_SCALE * rng.normal(size=(n, n_ch))
    jitter = PATIENT_JITTER * rng.normal(size=(n, n_ch))
    log_scale = (np.log(NOISE_SCALE) + jitter
                 + config.signal_strength * (labels[:, None] - 0.5) * informative[None, :])
    width = len(str(n - 1))
    return [
        PatientLatents(f"P{i:0{max(width, 4)}d}", int(labels[i]), int(durations[i]),
                       offsets[i].copy(), np.exp(log_scale[i]))
        for i in range(n)
    ]


def _ar1(rng: np.random.Generator, n: int, coef: float, scale: float) -> np.ndarray:
    """Stationary AR(1) with marginal standard deviation ``scale``."""
    e = rng.normal(size=n) * scale * np.sqrt(1.0 - coef * coef)
    e[0] = rng.normal() * scale
    return lfilter([1.0], [1.0, -coef], e)


def _patient_series(config: SynthConfig, lat: PatientLatents, index: int) -> PatientRecord:
    rng = np.random.default_rng([int(config.seed), 1, index])
    channels = []
    for c, spec in enumerate(config.registry):
        noise = _ar1(rng, lat.duration, AR_COEF, lat.noise_scale[c])
        drift = _ar1(rng, lat.duration, DRIFT_COEF, DRIFT_FRACTION * NOISE_SCALE)
        x = spec.mean + lat.offsets[c] + drift + noise
        hits = rng.random(lat.duration) < config.artifact_rate
        if hits.any():
            tail = 1.0 + rng.pareto(SPIKE_TAIL, size=int(hits.sum()))
            x[hits] = spec.mean * config.artifact_magnitude * tail
        channels.append(FeatureChannel(spec.family, spec.band, spec.derivation, x))
    return PatientRecord(lat.patient_id, lat.label, channels, config.sample_period)


def generate_cohort(config: SynthConfig) -> List[PatientRecord]:
    """Deterministic synthetic cohort for ``config`` (seeded per patient)."""
    return [_patient_series(config, lat, i) for i, lat in enumerate(generate_latents(config))]


# ---------------------------------------------------------------------------
# persistence

def sidecar_path(manifest_path: Path | str) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"string too long for u16 length prefix: {s[:20]}...")
    return struct.pack("<H", len(raw)) + raw


def save_cohort(records: Sequence[PatientRecord], path: Path | str) -> Tuple[Path, Path]:
    """Write ``path`` (CSV manifest) and its ``.bin`` sidecar; returns both paths."""
    if not records:
        raise ValueError("cannot save an empty cohort")
    path = Path(path)
    if not path.parent.exists():
        raise OSError(f"directory does not exist: {path.parent}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in records:
        writer.writerow([r.patient_id, r.label, r.duration, repr(float(r.sample_period)),
                         len(r.channels)])
    blob = bytearray(SIDECAR_MAGIC)
    blob += struct.pack("<I", len(records))
    for r in records:
        blob += _pack_str(r.patient_id)
        blob += struct.pack("<II", len(r.channels), r.duration)
        for c in r.channels:
            blob += _pack_str(c.feature_family) + _pack_str(c.band) + _pack_str(c.derivation)
            blob += np.asarray(c.values, dtype="<f8").tobytes()
    path.write_text(buf.getvalue())
    side = sidecar_path(path)
    side.write_bytes(bytes(blob))
    return path, side


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data, self.pos, self.name = data, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ChannelLengthError(f"{self.name}: truncated sidecar at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def _parse_manifest(path: Path) -> List[Dict]:
    rows = list(csv.reader(path.read_text().splitlines()))
    if not rows or [h.strip() for h in rows[0]] != MANIFEST_HEADER:
        raise MalformedManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
    out, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise MalformedManifestError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} "
                                         f"fields, got {len(row)}")
        pid = row[0]
        try:
            label, duration = int(row[1]), int(row[2])
            period, n_ch = float(row[3]), int(row[4])
        except ValueError as exc:
            raise MalformedManifestError(f"{path}:{lineno}: {exc}") from None
        if not pid or label not in (0, 1) or duration < 0 or period <= 0 or n_ch < 1:
            raise MalformedManifestError(f"{path}:{lineno}: invalid field value in {row}")
        if pid in seen:
            raise DuplicatePatientError(f"{path}:{lineno}: duplicate patient_id {pid!r}")
        seen.add(pid)
        out.append(dict(patient_id=pid, label=label, duration=duration,
                        sample_period=period, n_channels=n_ch))
    return out


def load_cohort(manifest_path: Path | str) -> List[PatientRecord]:
    path = Path(manifest_path)
    if not path.is_file():
        raise MissingCohortFileError(f"manifest not found: {path}")
    side = sidecar_path(path)
    if not side.is_file():
        raise MissingCohortFileError(f"channel sidecar not found: {side}")
    rows = _parse_manifest(path)
    rd = _Reader(side.read_bytes(), str(side))
    if rd.take(4) != SIDECAR_MAGIC:
        raise MalformedManifestError(f"{side}: bad magic")
    (count,) = rd.unpack("<I")
    if count != len(rows):
        raise MalformedManifestError(f"{side}: holds {count} patients, manifest lists {len(rows)}")
    records = []
    for row in rows:
        pid = rd.string()
        if pid != row["patient_id"]:
            raise MalformedManifestError(f"{side}: expected patient {row['patient_id']!r}, "
                                         f"found {pid!r}")
        n_ch, duration = rd.unpack("<II")
        if n_ch != row["n_channels"]:
            raise ChannelLengthError(f"{pid}: manifest says {row['n_channels']} channels, "
                                     f"sidecar has {n_ch}")
        if duration != row["duration"]:
            raise ChannelLengthError(f"{pid}: manifest duration {row['duration']} != "
                                     f"sidecar duration {duration}")
        channels = []
        for _ in range(n_ch):
            fam, band, der = rd.string(), rd.string(), rd.string()
            values = np.frombuffer(rd.take(8 * duration), dtype="<f8").astype(np.float64)
            channels.append(FeatureChannel(fam, band, der, values))
        records.append(PatientRecord(pid, row["label"], channels, row["sample_period"]))
    if rd.pos != len(rd.data):
        raise ChannelLengthError(f"{side}: {len(rd.data) - rd.pos} trailing bytes")
    return records


def synth_config_from_dict(d: Dict) -> SynthConfig:
    known = {f.name for f in fields(SynthConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown synth option")
    return SynthConfig(**d)
