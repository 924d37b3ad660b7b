"""Windowing, patient-level cohort splits and the leakage auditor."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .cohort import PatientRecord
from .errors import ConfigError

STAGE1_TRAIN = "Stage1Train"
STAGE1_VAL = "Stage1Val"  # placeholder until the stage-2 sub-split is made
STAGE2_TRAIN = "Stage2Train"
STAGE2_VAL = "Stage2Val"
TEST = "Test"
ROLES = (STAGE1_TRAIN, STAGE2_TRAIN, STAGE2_VAL, TEST)

DEFAULT_FRACTIONS = (581 / 1231, 150 / 1231, 500 / 1231)

WindowKey = Tuple[str, int]


class ShortRecordWarning(UserWarning):
    """A record was too short to yield a single window."""


@dataclass
class WindowSlice:
    patient_id: str
    window_index: int
    start_sample: int
    features: np.ndarray  # [channels, window_samples]

    @property
    def key(self) -> WindowKey:
        return (self.patient_id, self.window_index)


def _samples(seconds: float, period: float, what: str) -> int:
    n = seconds / period
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-9 * max(1.0, n):
        raise ValueError(f"{what} of {seconds}s is not a positive multiple of the "
                         f"{period}s sample period")
    return k


def window_count(duration: int, window: int, stride: int) -> int:
    return 0 if duration < window else (duration - window) // stride + 1


def slice_windows(record: PatientRecord, window_seconds: float = 300.0,
                  stride_seconds: float = 300.0,
                  keys: Sequence[Tuple[str, str, str]] | None = None) -> List[WindowSlice]:
    """Cut ``record`` into fixed windows; an incomplete tail is dropped.

    Records shorter than one window yield nothing and raise a
    :class:`ShortRecordWarning`.
    """
    w = _samples(window_seconds, record.sample_period, "window")
    s = _samples(stride_seconds, record.sample_period, "stride")
    count = window_count(record.duration, w, s)
    if count == 0:
        warnings.warn(f"{record.patient_id}: {record.duration} samples is shorter than one "
                      f"{w}-sample window", ShortRecordWarning, stacklevel=2)
        return []
    mat = record.matrix(keys)
    return [WindowSlice(record.patient_id, i, i * s, mat[:, i * s:i * s + w])
            for i in range(count)]


# ---------------------------------------------------------------------------
# splits

def _role_counts(n: int, fractions: Sequence[float]) -> List[int]:
    # round all but the last role half-up; the last takes the remainder
    head = [int(math.floor(f * n + 0.5)) for f in fractions[:-1]]
    last = n - sum(head)
    if last < 0:
        raise ConfigError("fractions", f"cannot apportion {n} patients as {fractions}")
    return head + [last]


def _apportion_class(n_class: int, counts: Sequence[int]) -> List[int]:
    """Largest-remainder share of one class across roles of the given sizes."""
    total = sum(counts)
    raw = np.array([n_class * c / total for c in counts])
    base = np.floor(raw).astype(int)
    base = np.minimum(base, counts)
    short = n_class - int(base.sum())
    order = sorted(range(len(counts)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order:
        if short == 0:
            break
        if base[i] < counts[i]:
            base[i] += 1
            short -= 1
    return [int(b) for b in base]


def _assign(ids: Sequence[str], labels: Optional[Mapping[str, int]], roles: Sequence[str],
            counts: Sequence[int], rng: np.random.Generator) -> Dict[str, str]:
    ids = sorted(ids)
    out: Dict[str, str] = {}
    if labels is None:
        perm = [ids[i] for i in rng.permutation(len(ids))]
        pos = 0
        for role, c in zip(roles, counts):
            for pid in perm[pos:pos + c]:
                out[pid] = role
            pos += c
        return out
    pos_ids = [p for p in ids if labels[p] == 1]
    neg_ids = [p for p in ids if labels[p] != 1]
    pos_counts = _apportion_class(len(pos_ids), counts)
    for group, group_counts in ((pos_ids, pos_counts),
                                (neg_ids, [c - k for c, k in zip(counts, pos_counts)])):
        perm = [group[i] for i in rng.permutation(len(group))]
        pos = 0
        for role, c in zip(roles, group_counts):
            for pid in perm[pos:pos + c]:
                out[pid] = role
            pos += c
    return out


@dataclass
class CohortSplit:
    roles: Dict[str, str]
    seed: int
    fractions: Tuple[float, float, float]
    stage2_fraction: Optional[float] = None
    # leaky wirings only: per-window role overrides
    window_roles: Dict[WindowKey, str] = field(default_factory=dict)

    def ids(self, role: str) -> List[str]:
        return sorted(p for p, r in self.roles.items() if r == role)

    @property
    def stage1_val_ids(self) -> List[str]:
        return sorted(p for p, r in self.roles.items()
                      if r in (STAGE1_VAL, STAGE2_TRAIN, STAGE2_VAL))

    @property
    def leaky(self) -> bool:
        return bool(self.window_roles)

    def window_role(self, key: WindowKey) -> str:
        return self.window_roles.get(key, self.roles[key[0]])

    def counts(self) -> Dict[str, int]:
        out = {r: 0 for r in ROLES}
        for r in self.roles.values():
            out[r] = out.get(r, 0) + 1
        return out

    def to_dict(self) -> Dict:
        d = {
            "roles": dict(sorted(self.roles.items())),
            "seed": int(self.seed),
            "fractions": list(self.fractions),
            "stage2_fraction": self.stage2_fraction,
        }
        if self.window_roles:
            d["window_roles"] = [[p, int(i), r] for (p, i), r in sorted(self.window_roles.items())]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CohortSplit":
        return cls(
            roles=dict(d["roles"]),
            seed=int(d["seed"]),
            fractions=tuple(d["fractions"]),
            stage2_fraction=d.get("stage2_fraction"),
            window_roles={(p, int(i)): r for p, i, r in d.get("window_roles", [])},
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def split_patients(patient_ids: Sequence[str], labels: Optional[Mapping[str, int]] = None,
                   fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0,
                   stratified: bool = True) -> CohortSplit:
    """Patient-level (Stage1Train, Stage1Val, Test) assignment.

    The Stage-1 validation cohort is left as the ``Stage1Val`` placeholder role
    until :func:`split_stage2` divides it.
    """
    ids = list(patient_ids)
    if len(ids) < 3:
        raise ValueError(f"need at least 3 patients to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("fractions", f"need three non-negative fractions summing to 1, "
                                       f"got {fractions}")
    if stratified and labels is None:
        raise ValueError("stratified splitting needs labels")
    counts = _role_counts(len(ids), fractions)
    rng = np.random.default_rng([int(seed), 11])
    roles = _assign(ids, labels if stratified else None, (STAGE1_TRAIN, STAGE1_VAL, TEST),
                    counts, rng)
    return CohortSplit(roles, int(seed), fractions)


def split_stage2(stage1_val_ids: Iterable[str], train_fraction: float = 0.6, seed: int = 0,
                 labels: Optional[Mapping[str, int]] = None) -> Tuple[List[str], List[str]]:
    """Divide the Stage-1 validation cohort into (Stage2Train, Stage2Val) ids."""
    ids = sorted(set(stage1_val_ids))
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("stage2_train_fraction", "must lie in (0, 1)")
    n_train = int(math.floor(train_fraction * len(ids) + 0.5))
    rng = np.random.default_rng([int(seed), 22])
    roles = _assign(ids, labels, (STAGE2_TRAIN, STAGE2_VAL), [n_train, len(ids) - n_train], rng)
    train = sorted(p for p, r in roles.items() if r == STAGE2_TRAIN)
    val = sorted(p for p, r in roles.items() if r == STAGE2_VAL)
    return train, val


def make_clean_split(patient_ids: Sequence[str], labels: Mapping[str, int],
                     fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0,
                     stage2_fraction: float = 0.6, stratified: bool = True) -> CohortSplit:
    split = split_patients(patient_ids, labels, fractions, seed, stratified)
    tr, va = split_stage2(split.ids(STAGE1_VAL), stage2_fraction, seed,
                          labels if stratified else None)
    for p in tr:
        split.roles[p] = STAGE2_TRAIN
    for p in va:
        split.roles[p] = STAGE2_VAL
    split.stage2_fraction = stage2_fraction
    return split


LEAKY_POOL_FRACTIONS = (0.6, 0.25, 0.15)


def make_leaky_split(window_counts: Mapping[str, int], labels: Mapping[str, int], seed: int = 0,
                     fractions: Sequence[float] = DEFAULT_FRACTIONS,
                     pool_fractions: Sequence[float] = LEAKY_POOL_FRACTIONS,
                     stratified: bool = True) -> CohortSplit:
    """Window-level wiring that scatters each non-test patient across all training pools.

    Test patients are chosen exactly as :func:`make_clean_split` would choose
    them for the same seed, so a clean and a leaky arm share their test cohort.
    Every other patient keeps ``Stage1Train`` as nominal role while its windows
    are spread over Stage1Train / Stage2Train / Stage2Val.
    """
    ids = sorted(window_counts)
    if len(ids) < 20:
        raise ValueError(f"leaky split needs at least 20 patients, got {len(ids)}")
    base = split_patients(ids, labels, fractions, seed, stratified)
    rng = np.random.default_rng([int(seed), 33])
    pools = (STAGE1_TRAIN, STAGE2_TRAIN, STAGE2_VAL)
    roles: Dict[str, str] = {}
    window_roles: Dict[WindowKey, str] = {}
    for pid in ids:
        if base.roles[pid] == TEST:
            roles[pid] = TEST
            continue
        roles[pid] = STAGE1_TRAIN
        n = int(window_counts[pid])
        order = rng.permutation(n)
        sizes = [int(math.floor(f * n)) for f in pool_fractions]
        # every pool gets a window when there are enough to go round
        for i in range(len(pools)):
            if sizes[i] == 0 and n >= len(pools):
                sizes[i] = 1
        sizes[0] = n - sum(sizes[1:])
        pos = 0
        for pool, size in zip(pools, sizes):
            for w in order[pos:pos + size]:
                window_roles[(pid, int(w))] = pool
            pos += size
    return CohortSplit(roles, int(seed), tuple(float(f) for f in fractions),
                       window_roles=window_roles)


# ---------------------------------------------------------------------------
# audit

PATIENT_OVERLAP = "PatientOverlap"
WINDOW_REUSE = "WindowReuse"
STATS_CONTAMINATION = "StatsContamination"


@dataclass(frozen=True, order=True)
class Violation:
    kind: str
    patient_id: str
    detail: str


@dataclass
class LeakageReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def is_clean(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return bool(self.violations)

    def of_kind(self, kind: str) -> List[Violation]:
        return [v for v in self.violations if v.kind == kind]

    def to_lines(self) -> List[str]:
        return [f"{v.kind}\t{v.patient_id}\t{v.detail}" for v in self.violations]

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "LeakageReport":
        out = []
        for line in lines:
            line = line.rstrip("\n")
            if not line:
                continue
            kind, pid, detail = line.split("\t", 2)
            out.append(Violation(kind, pid, detail))
        return cls(out)

    def to_dict(self) -> Dict:
        return {"clean": self.is_clean,
                "violations": [[v.kind, v.patient_id, v.detail] for v in self.violations]}


def audit_leakage(split: CohortSplit, stage1_train_window_keys: Iterable[WindowKey],
                  stage2_train_window_keys: Iterable[WindowKey],
                  stats_provenance: Iterable[str] = ()) -> LeakageReport:
    """Check a wiring for the three leakage pathways.

    * ``WindowReuse``: one per window key present in both training pools.
    * ``PatientOverlap``: one per patient whose (distinct) windows or role
      assignment place it in more than one role.
    * ``StatsContamination``: one per patient outside Stage1Train that
      contributed to normalisation statistics.
    """
    s1 = {(p, int(i)) for p, i in stage1_train_window_keys}
    s2 = {(p, int(i)) for p, i in stage2_train_window_keys}
    reused = s1 & s2
    violations = [Violation(WINDOW_REUSE, p, f"window {i}") for p, i in sorted(reused)]

    held: Dict[str, Set[str]] = {p: {r} for p, r in split.roles.items()}
    for (p, _), r in split.window_roles.items():
        held.setdefault(p, set()).add(r)
    for keys, role in ((s1 - reused, STAGE1_TRAIN), (s2 - reused, STAGE2_TRAIN)):
        for p, _ in keys:
            held.setdefault(p, set()).add(role)
    for p in sorted(held):
        if len(held[p]) > 1:
            violations.append(Violation(PATIENT_OVERLAP, p,
                                        "roles " + "+".join(sorted(held[p]))))

    for p in sorted(set(stats_provenance)):
        role = split.roles.get(p, "unknown")
        if role != STAGE1_TRAIN:
            violations.append(Violation(STATS_CONTAMINATION, p, f"stats fitted on {role} patient"))
    return LeakageReport(sorted(violations))
