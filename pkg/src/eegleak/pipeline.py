"""End-to-end orchestration: clean/leaky wiring, both stages, evaluation, persistence."""

from __future__ import annotations

import hashlib
import logging
import time
import traceback
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from . import _kernels
from . import io as fio
from .cohort import PatientRecord, generate_cohort, load_cohort
from .config import LEAKY, RunConfig, dump_config
from .errors import EEGLeakError, LeakageRefusal, StageError
from .metrics import MetricsReport, ScoredCohort, evaluate_cohort
from .partition import (
    STAGE1_TRAIN,
    STAGE2_TRAIN,
    STAGE2_VAL,
    TEST,
    CohortSplit,
    LeakageReport,
    WindowKey,
    _samples,
    audit_leakage,
    make_clean_split,
    make_leaky_split,
    window_count,
)
from .preprocess import FittedNormalization, fit_cohort
from .stage1 import (
    EmbeddingRecord,
    Stage1Encoder,
    build_windows,
    encoder_from_state,
    encoder_meta,
    extract_embeddings,
    train_stage1,
)
from .stage2 import (
    EmbeddingSequence,
    Stage2Model,
    build_sequences,
    model_from_state,
    model_meta,
    train_stage2,
)

log = logging.getLogger(__name__)

COHORT_NAMES = (STAGE2_TRAIN, STAGE2_VAL, TEST)


class CohortStore:
    """Records plus a log of who read which patient's label, and when."""

    def __init__(self, records: Sequence[PatientRecord]):
        self.records = list(records)
        self._by_id = {r.patient_id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise ValueError("duplicate patient ids in cohort")
        self.access_log: List[Tuple[str, str]] = []

    @property
    def ids(self) -> List[str]:
        return sorted(self._by_id)

    def label(self, pid: str, stage: str) -> int:
        self.access_log.append((stage, pid))
        return self._by_id[pid].label

    def labels(self, pids: Iterable[str], stage: str) -> Dict[str, int]:
        return {p: self.label(p, stage) for p in pids}

    def subset(self, pids: Iterable[str]) -> List[PatientRecord]:
        return [self._by_id[p] for p in sorted(set(pids))]

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.patient_id.encode())
            h.update(bytes([r.label]))
            for c in r.channels:
                h.update("|".join(c.key).encode())
                h.update(np.ascontiguousarray(c.values, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class Wiring:
    """Which window keys feed which training/validation pool."""

    split: CohortSplit
    stage1_train: Set[WindowKey]
    stage1_val: Set[WindowKey]
    stage2_train: Set[WindowKey]
    stage2_val: Set[WindowKey]


def window_counts(records: Sequence[PatientRecord], window_seconds: float) -> Dict[str, int]:
    out = {}
    for r in records:
        w = _samples(window_seconds, r.sample_period, "window")
        out[r.patient_id] = window_count(r.duration, w, w)
    return out


def build_wiring(split: CohortSplit, counts: Mapping[str, int]) -> Wiring:
    pools: Dict[str, Set[WindowKey]] = {STAGE1_TRAIN: set(), STAGE2_TRAIN: set(),
                                        STAGE2_VAL: set(), TEST: set()}
    for pid, n in counts.items():
        for i in range(n):
            role = split.window_role((pid, i))
            pools.setdefault(role, set()).add((pid, i))
    return Wiring(split, pools[STAGE1_TRAIN], pools[STAGE2_TRAIN] | pools[STAGE2_VAL],
                  pools[STAGE2_TRAIN], pools[STAGE2_VAL])


def make_split(cfg: RunConfig, store: CohortStore, counts: Mapping[str, int]) -> CohortSplit:
    labels = store.labels(store.ids, "split") if cfg.stratified else None
    if cfg.wiring == LEAKY:
        if labels is None:
            labels = {p: 0 for p in store.ids}
        return make_leaky_split(counts, labels, cfg.split_seed, cfg.fractions,
                                stratified=cfg.stratified)
    return make_clean_split(store.ids, labels, cfg.fractions, cfg.split_seed,
                            cfg.stage2_fraction, cfg.stratified)


def nominal_stage1_patients(split: CohortSplit) -> List[str]:
    return split.ids(STAGE1_TRAIN)


@dataclass
class ExperimentReport:
    config: Dict[str, Any]
    cohort_digest: str
    split_digest: str
    split_counts: Dict[str, int]
    audit: Dict[str, Any]
    leaky: bool
    cohorts: Dict[str, MetricsReport]
    predictions: Dict[str, List[List[Any]]]
    histories: Dict[str, List[Dict[str, float]]]
    decisions: Dict[str, Any]
    kernel_backend: str = _kernels.BACKEND
    timings: Dict[str, float] = field(default_factory=dict)

    def metric(self, cohort: str, name: str) -> float:
        return self.cohorts[cohort].point(name)

    def to_dict(self, with_timings: bool = False) -> Dict[str, Any]:
        d = {
            "config": self.config,
            "cohort_digest": self.cohort_digest,
            "split_digest": self.split_digest,
            "split_counts": self.split_counts,
            "audit": self.audit,
            "leaky": self.leaky,
            "cohorts": {k: v.to_dict() for k, v in self.cohorts.items()},
            "predictions": self.predictions,
            "histories": self.histories,
            "decisions": self.decisions,
            "kernel_backend": self.kernel_backend,
        }
        if with_timings:
            d["timings"] = self.timings
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentReport":
        d = dict(d)
        d["cohorts"] = {k: MetricsReport.from_dict(v) for k, v in d["cohorts"].items()}
        return cls(**d)


DECISIONS = {
    "window_labels": "inherited from patient label",
    "stage1_class_weighting": "inverse class frequency",
    "stage2_class_weighting": "inverse class frequency",
    "stage2_pooling": "mean over valid positions",
    "sequence_truncation": "keep earliest windows",
    "normalization_groups": "per (family, band, derivation) channel, Stage1Train patients only",
    "positive_class_note": "metric positive = poor outcome (surv=0) unless configured",
}


class _Stages:
    """Run named stages, recording timings and tagging failures."""

    def __init__(self, out: Optional[Path]):
        self.out = out
        self.timings: Dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except LeakageRefusal:
            self._partial(name)
            raise
        except StageError:
            raise
        except Exception as exc:
            self._partial(name)
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - t0

    def _partial(self, name: str) -> None:
        if self.out is None:
            return
        part = self.out / "partial"
        part.mkdir(parents=True, exist_ok=True)
        (part / f"{name}.txt").write_text(traceback.format_exc())


def _sequences_for(embeddings: Sequence[EmbeddingRecord], keys: Set[WindowKey],
                   labels: Optional[Mapping[str, int]], max_len: int,
                   patients: Iterable[str]) -> List[EmbeddingSequence]:
    chosen = [e for e in embeddings if (e.patient_id, e.window_index) in keys]
    return build_sequences(chosen, max_len, labels, patients)


COHORT_MANIFEST = "cohort.csv"
STEPS = ("load", "split", "preprocess", "audit", "train-stage1", "embed", "train-stage2",
         "evaluate")


@dataclass
class RunState:
    """Everything one run has produced so far."""

    cfg: RunConfig
    out: Optional[Path]
    store: Optional[CohortStore] = None
    counts: Dict[str, int] = field(default_factory=dict)
    split: Optional[CohortSplit] = None
    wiring: Optional[Wiring] = None
    norm: Optional[FittedNormalization] = None
    normalized: Dict[str, PatientRecord] = field(default_factory=dict)
    audit: Optional[LeakageReport] = None
    encoder: Optional[Stage1Encoder] = None
    embeddings: Optional[List[EmbeddingRecord]] = None
    model: Optional[Stage2Model] = None
    histories: Dict[str, List[Dict[str, float]]] = field(default_factory=dict)
    report: Optional["ExperimentReport"] = None

    @property
    def leaky(self) -> bool:
        return self.audit is not None and not self.audit.is_clean


def step_load(st: RunState, cohort: Optional[Sequence[PatientRecord]] = None) -> None:
    cfg = st.cfg
    if cohort is None:
        if cfg.manifest is not None:
            cohort = load_cohort(cfg.manifest)
        elif st.out is not None and (st.out / COHORT_MANIFEST).is_file():
            cohort = load_cohort(st.out / COHORT_MANIFEST)
        else:
            cohort = generate_cohort(cfg.synth)
    st.store = CohortStore(cohort)
    st.counts = window_counts(st.store.records, cfg.window_seconds)


def step_split(st: RunState) -> None:
    st.split = make_split(st.cfg, st.store, st.counts)
    st.wiring = build_wiring(st.split, st.counts)
    if st.out is not None:
        fio.write_split(st.split, st.out / "splits.json")
        fio.write_pools(st.out / "pools.json", st.wiring.stage1_train, st.wiring.stage2_train)


def step_preprocess(st: RunState) -> None:
    cfg = st.cfg
    st.norm = fit_cohort(st.store.records, cfg.norm, nominal_stage1_patients(st.split),
                         cfg.channels)
    st.normalized = {r.patient_id: r for r in st.norm.apply(st.store.records)}
    if st.out is not None:
        fio.write_json(st.norm.to_dict(), st.out / "normalization.json")


def step_audit(st: RunState) -> None:
    w = st.wiring
    st.audit = audit_leakage(st.split, w.stage1_train, w.stage2_train, st.norm.fitted_on)
    if st.out is not None:
        fio.write_audit(st.audit, st.out / "audit.txt")
    if st.leaky and not st.cfg.allow_leaky:
        raise LeakageRefusal(st.audit)


def step_train_stage1(st: RunState) -> None:
    cfg, w, store = st.cfg, st.wiring, st.store
    s1_pids = sorted({p for p, _ in w.stage1_train})
    val_pids = sorted({p for p, _ in w.stage1_val})
    tr = build_windows([st.normalized[p] for p in s1_pids], cfg.channels, cfg.window_seconds,
                       include=w.stage1_train, with_labels=False)
    va = build_windows([st.normalized[p] for p in val_pids], cfg.channels, cfg.window_seconds,
                       include=w.stage1_val, with_labels=False)
    # labels come from the store so access is logged
    tr.labels = np.array([store.label(p, "train-stage1") for p, _ in tr.keys])
    va.labels = np.array([store.label(p, "train-stage1") for p, _ in va.keys])
    st.encoder, st.histories["stage1"] = train_stage1(tr, va, cfg.stage1, st.audit,
                                                      cfg.allow_leaky, seed=cfg.stage1.train.seed)
    if st.out is not None:
        fio.save_checkpoint(st.out / "stage1.npz", st.encoder.state_dict(),
                            {**encoder_meta(st.encoder, cfg.stage1),
                             "history": st.histories["stage1"]})


def step_embed(st: RunState) -> None:
    records = [st.normalized[p] for p in sorted(st.normalized)]
    windows = build_windows(records, st.cfg.channels, st.cfg.window_seconds, with_labels=False)
    st.embeddings = extract_embeddings(st.encoder, windows)
    if st.out is not None:
        fio.write_embeddings(st.embeddings, st.out / "embeddings.emb")


def _stage2_sequences(st: RunState, pool: Set[WindowKey], stage: str) -> List[EmbeddingSequence]:
    ids = sorted({p for p, _ in pool})
    return _sequences_for(st.embeddings, pool, st.store.labels(ids, stage),
                          st.cfg.stage2.max_len, ids)


def step_train_stage2(st: RunState) -> None:
    cfg = st.cfg
    train_seqs = _stage2_sequences(st, st.wiring.stage2_train, "train-stage2")
    val_seqs = _stage2_sequences(st, st.wiring.stage2_val, "train-stage2")
    st.model, st.histories["stage2"], _ = train_stage2(
        train_seqs, val_seqs, cfg.stage2, st.audit, cfg.allow_leaky, seed=cfg.stage2.train.seed)
    if st.out is not None:
        fio.save_checkpoint(st.out / "stage2.npz", st.model.state_dict(),
                            {**model_meta(st.model, cfg.stage2),
                             "history": st.histories["stage2"]})


def step_evaluate(st: RunState) -> "ExperimentReport":
    cfg, split, w = st.cfg, st.split, st.wiring
    test_ids = split.ids(TEST)
    test_keys = {(p, i) for p in test_ids for i in range(st.counts[p])}
    pools = {
        STAGE2_TRAIN: (w.stage2_train, sorted({p for p, _ in w.stage2_train})),
        STAGE2_VAL: (w.stage2_val, sorted({p for p, _ in w.stage2_val})),
        TEST: (test_keys, test_ids),
    }
    cohorts, predictions = {}, {}
    for name in COHORT_NAMES:
        keys, ids = pools[name]
        seqs = _sequences_for(st.embeddings, keys, None, cfg.stage2.max_len, ids)
        pids = [s.patient_id for s in seqs]
        surv = st.model.predict_proba(seqs)
        ys = [st.store.label(p, "evaluate") for p in pids]
        scored = ScoredCohort.from_survival(pids, surv, ys, cfg.positive_class)
        cohorts[name] = evaluate_cohort(scored, cfg.n_resamples, cfg.bootstrap_seed,
                                        cfg.threshold, st.leaky, cfg.positive_class)
        predictions[name] = [[p, float(s), int(y)] for p, s, y in zip(pids, surv, ys)]
    st.report = ExperimentReport(
        config=cfg.to_dict(),
        cohort_digest=st.store.digest(),
        split_digest=split.digest(),
        split_counts={STAGE1_TRAIN: len({p for p, _ in w.stage1_train}),
                      STAGE2_TRAIN: len(pools[STAGE2_TRAIN][1]),
                      STAGE2_VAL: len(pools[STAGE2_VAL][1]),
                      TEST: len(test_ids)},
        audit=st.audit.to_dict(),
        leaky=st.leaky,
        cohorts=cohorts,
        predictions=predictions,
        histories={k: st.histories[k] for k in ("stage1", "stage2")},
        decisions=dict(DECISIONS),
    )
    st.report.access_log = st.store.access_log
    if st.out is not None:
        fio.write_json(st.report.to_dict(), st.out / "results.json")
    return st.report


_STEP_FNS = {
    "split": step_split,
    "preprocess": step_preprocess,
    "audit": step_audit,
    "train-stage1": step_train_stage1,
    "embed": step_embed,
    "train-stage2": step_train_stage2,
    "evaluate": step_evaluate,
}


def _out_path(cfg: RunConfig, out_dir) -> Optional[Path]:
    chosen = out_dir if out_dir is not None else cfg.out_dir
    return Path(chosen) if chosen else None


def run_pipeline(cfg: RunConfig, cohort: Optional[Sequence[PatientRecord]] = None,
                 out_dir: Optional[Path | str] = None,
                 store_hook=None) -> ExperimentReport:
    """Load -> split -> normalise -> audit -> stage 1 -> embed -> stage 2 -> evaluate.

    ``out_dir`` (default ``cfg.out_dir``; an empty string disables persistence)
    receives every artifact.  ``store_hook`` is called with the
    :class:`CohortStore` before any stage reads from it.
    """
    out = _out_path(cfg, out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
    stage = _Stages(out)
    st = RunState(cfg, out)
    with stage("load"):
        step_load(st, cohort)
        if store_hook is not None:
            store_hook(st.store)
    for name in STEPS[1:]:
        with stage(name):
            _STEP_FNS[name](st)
    st.report.timings = stage.timings
    if out is not None:
        fio.write_json(stage.timings, out / "timings.json")
    return st.report


def _restore(st: RunState, name: str) -> None:
    """Rebuild the state a finished step left behind, from its artifacts."""
    out, cfg = st.out, st.cfg
    if name == "split":
        st.split = fio.read_split(out / "splits.json")
        st.wiring = build_wiring(st.split, st.counts)
    elif name == "preprocess":
        st.norm = FittedNormalization.from_dict(fio.read_json(out / "normalization.json"))
        st.normalized = {r.patient_id: r for r in st.norm.apply(st.store.records)}
    elif name == "audit":
        w = st.wiring
        st.audit = audit_leakage(st.split, w.stage1_train, w.stage2_train, st.norm.fitted_on)
        if fio.read_audit(out / "audit.txt").to_dict() != st.audit.to_dict():
            raise AuditMismatch(f"{out}: audit.txt does not match the recomputed audit")
        if st.leaky and not cfg.allow_leaky:
            raise LeakageRefusal(st.audit)
    elif name == "train-stage1":
        state, meta = fio.load_checkpoint(out / "stage1.npz")
        st.encoder = encoder_from_state(state, meta)
        st.histories["stage1"] = meta["history"]
    elif name == "embed":
        st.embeddings = fio.read_embeddings(out / "embeddings.emb")
    elif name == "train-stage2":
        state, meta = fio.load_checkpoint(out / "stage2.npz")
        st.model = model_from_state(state, meta)
        st.histories["stage2"] = meta["history"]


REQUIRED_ARTIFACT = {
    "split": "splits.json",
    "preprocess": "normalization.json",
    "audit": "audit.txt",
    "train-stage1": "stage1.npz",
    "embed": "embeddings.emb",
    "train-stage2": "stage2.npz",
}


def run_step(cfg: RunConfig, name: str, out_dir: Path | str):
    """Run one step, restoring earlier steps from ``out_dir``.

    Raises :class:`FileNotFoundError` naming the step to run first when an
    earlier artifact is missing.
    """
    if name not in _STEP_FNS:
        raise ValueError(f"unknown step {name!r}; expected one of {list(_STEP_FNS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = _Stages(out)
    st = RunState(cfg, out)
    with stage("load"):
        step_load(st)
    for prev in STEPS[1:STEPS.index(name)]:
        path = out / REQUIRED_ARTIFACT[prev]
        if not path.is_file():
            raise FileNotFoundError(f"{path} is missing; run the {prev!r} step first")
        _restore(st, prev)
    with stage(name):
        result = _STEP_FNS[name](st)
    return st if result is None else result


class AuditMismatch(EEGLeakError):
    pass


def load_report(out_dir: Path | str) -> ExperimentReport:
    """Load ``results.json`` and re-derive the audit from the persisted wiring."""
    out = Path(out_dir)
    report = ExperimentReport.from_dict(fio.read_json(out / "results.json"))
    split = fio.read_split(out / "splits.json")
    s1, s2 = fio.read_pools(out / "pools.json")
    fitted_on = fio.read_json(out / "normalization.json")["fitted_on"]
    audit = audit_leakage(split, s1, s2, fitted_on)
    if audit.to_dict() != report.audit:
        raise AuditMismatch(f"{out}: stored audit does not match audit recomputed from artifacts")
    if fio.read_audit(out / "audit.txt").to_dict() != audit.to_dict():
        raise AuditMismatch(f"{out}: audit.txt does not match recomputed audit")
    return report
