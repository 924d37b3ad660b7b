import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegleak.cohort import FeatureChannel, PatientRecord
from eegleak.errors import ConfigError
from eegleak.partition import (
    DEFAULT_FRACTIONS,
    PATIENT_OVERLAP,
    STAGE1_TRAIN,
    STAGE1_VAL,
    STAGE2_TRAIN,
    STAGE2_VAL,
    STATS_CONTAMINATION,
    TEST,
    WINDOW_REUSE,
    CohortSplit,
    LeakageReport,
    ShortRecordWarning,
    audit_leakage,
    make_clean_split,
    make_leaky_split,
    slice_windows,
    split_patients,
    split_stage2,
)
from tests.oracles import expected_counts


def _record(duration, pid="p"):
    return PatientRecord(pid, 0, [FeatureChannel("aEEG", "b", "d",
                                                 np.arange(duration, dtype=float))])


# ---------------------------------------------------------------- windows


@pytest.mark.parametrize("duration,count", [(1500, 5), (1380, 4), (300, 1)])
def test_slice_counts(duration, count):
    assert len(slice_windows(_record(duration))) == count


def test_short_record_flagged():
    with pytest.warns(ShortRecordWarning):
        assert slice_windows(_record(240)) == []


@settings(max_examples=50, deadline=None)
@given(st.integers(300, 5000))
def test_windows_tile_without_overlap(duration):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ws = slice_windows(_record(duration))
    covered = np.concatenate([w.features[0] for w in ws])
    assert covered.size == len(ws) * 300
    np.testing.assert_array_equal(covered, np.arange(len(ws) * 300))


def test_window_must_be_multiple_of_period():
    with pytest.raises(ValueError):
        slice_windows(_record(1000), window_seconds=250.5)


# ---------------------------------------------------------------- splits


def _ids(n):
    return [f"P{i:04d}" for i in range(n)]


def _labels(ids, every=4):
    return {p: int(i % every == 0) for i, p in enumerate(ids)}


def test_split_arithmetic_1231():
    ids = _ids(1231)
    split = split_patients(ids, _labels(ids), DEFAULT_FRACTIONS, seed=0)
    c = split.counts()
    assert (c[STAGE1_TRAIN], c[STAGE1_VAL], c[TEST]) == (581, 150, 500)
    assert expected_counts(1231, DEFAULT_FRACTIONS) == (581, 150, 500)


def test_stage2_split_arithmetic():
    assert tuple(map(len, split_stage2(_ids(150), 0.6, 0))) == (90, 60)
    assert tuple(map(len, split_stage2(_ids(10), 0.6, 0))) == (6, 4)


def test_splits_deterministic():
    ids = _ids(100)
    a = split_patients(ids, _labels(ids), seed=7)
    assert a.roles == split_patients(ids, _labels(ids), seed=7).roles
    assert a.roles != split_patients(ids, _labels(ids), seed=8).roles
    assert split_stage2(ids, 0.6, 3) == split_stage2(ids, 0.6, 3)


def test_stratified_roles_keep_ratio():
    ids = _ids(40)
    labels = _labels(ids)  # 10 positives, 30 negatives
    split = split_patients(ids, labels, DEFAULT_FRACTIONS, seed=1)
    for role in (STAGE1_TRAIN, STAGE1_VAL, TEST):
        members = split.ids(role)
        pos = sum(labels[p] for p in members)
        assert abs(pos - len(members) / 4) <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 300), st.integers(0, 2 ** 32))
def test_every_patient_has_one_role(n, seed):
    ids = _ids(n)
    split = make_clean_split(ids, _labels(ids), seed=seed)
    assert sorted(split.roles) == ids
    assert set(split.roles.values()) <= {STAGE1_TRAIN, STAGE2_TRAIN, STAGE2_VAL, TEST}


def test_bad_fractions():
    with pytest.raises(ConfigError):
        split_patients(_ids(10), None, (0.5, 0.5, 0.5), stratified=False)


def test_split_json_round_trip():
    ids = _ids(30)
    split = make_leaky_split({p: 4 for p in ids}, _labels(ids), seed=2)
    again = CohortSplit.from_dict(split.to_dict())
    assert again == split and again.digest() == split.digest()


# ---------------------------------------------------------------- leaky split


def test_leaky_split_always_overlaps():
    ids = _ids(40)
    counts = {p: 6 for p in ids}
    split = make_leaky_split(counts, _labels(ids), seed=0)
    s1 = {k for k, r in split.window_roles.items() if r == STAGE1_TRAIN}
    s2 = {k for k, r in split.window_roles.items() if r == STAGE2_TRAIN}
    report = audit_leakage(split, s1, s2)
    assert report.of_kind(PATIENT_OVERLAP)
    assert split.window_roles == make_leaky_split(counts, _labels(ids), seed=0).window_roles


def test_leaky_and_clean_share_test_patients():
    ids = _ids(60)
    labels = _labels(ids)
    clean = make_clean_split(ids, labels, seed=4)
    leaky = make_leaky_split({p: 5 for p in ids}, labels, seed=4)
    assert clean.ids(TEST) == leaky.ids(TEST)


# ---------------------------------------------------------------- audit


def _clean_world(n=30, windows=4, seed=0):
    ids = _ids(n)
    split = make_clean_split(ids, _labels(ids), seed=seed)
    s1 = {(p, i) for p in split.ids(STAGE1_TRAIN) for i in range(windows)}
    s2 = {(p, i) for p in split.ids(STAGE2_TRAIN) for i in range(windows)}
    return split, s1, s2, split.ids(STAGE1_TRAIN)


def test_clean_wiring_audits_clean():
    split, s1, s2, prov = _clean_world()
    assert not s1 & s2
    assert audit_leakage(split, s1, s2, prov).is_clean


def test_patient_in_train_and_test():
    split, s1, s2, prov = _clean_world()
    pid = split.ids(TEST)[0]
    report = audit_leakage(split, s1 | {(pid, 0)}, s2, prov)
    assert [(v.kind, v.patient_id) for v in report.violations] == [(PATIENT_OVERLAP, pid)]


def test_window_in_both_pools():
    split, s1, s2, prov = _clean_world()
    key = sorted(s1)[0]
    report = audit_leakage(split, s1, s2 | {key}, prov)
    assert [(v.kind, v.patient_id) for v in report.violations] == [(WINDOW_REUSE, key[0])]


def inject(rng, split, s1, s2, prov):
    """Add 0-5 violations; return the wiring plus the expected (kind, patient) list."""
    s1, s2, prov = set(s1), set(s2), list(prov)
    expected = []
    train_ids = split.ids(STAGE1_TRAIN)
    chosen = rng.permutation(len(train_ids))
    used = 0
    for _ in range(int(rng.integers(0, 6))):
        kind = rng.integers(0, 3)
        if kind == 0:  # the same window feeds both training pools
            pid = train_ids[chosen[used]]
            used += 1
            s2.add((pid, 0))
            expected.append((WINDOW_REUSE, pid))
        elif kind == 1:  # a Stage1Train patient's window moved into Stage 2
            pid = train_ids[chosen[used]]
            used += 1
            s1.discard((pid, 1))
            s2.add((pid, 1))
            expected.append((PATIENT_OVERLAP, pid))
        else:  # stats fitted on a non-training patient
            others = [p for p in split.roles if split.roles[p] != STAGE1_TRAIN
                      and p not in prov]
            pid = others[int(rng.integers(len(others)))]
            prov.append(pid)
            expected.append((STATS_CONTAMINATION, pid))
    return s1, s2, prov, sorted(expected)


def test_audit_sound_and_complete_on_injections():
    rng = np.random.default_rng(0)
    for trial in range(200):
        world = _clean_world(seed=trial)
        s1, s2, prov, expected = inject(rng, *world)
        report = audit_leakage(world[0], s1, s2, prov)
        assert sorted((v.kind, v.patient_id) for v in report.violations) == expected


def test_report_lines_round_trip():
    split, s1, s2, prov = _clean_world()
    report = audit_leakage(split, s1, s2 | {sorted(s1)[0]}, prov + [split.ids(TEST)[0]])
    assert LeakageReport.from_lines(report.to_lines()) == report
