import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegleak.cohort import FeatureChannel, PatientRecord
from eegleak.errors import ConfigError
from eegleak.preprocess import (
    ChannelStats,
    FittedNormalization,
    NormalizationSpec,
    apply_normalization,
    enumerate_strategies,
    fit_cohort,
    fit_stats,
    log_compress,
)
from tests.oracles import percentile_linear

TRUNC = NormalizationSpec(False, True, 1.0, 99.0)
PLAIN = NormalizationSpec(False, False, 0.0, 100.0)


def test_fit_stats_percentiles():
    values = np.arange(1, 101, dtype=float)
    s = fit_stats(values, TRUNC)
    assert s.lo == pytest.approx(1.99, abs=1e-12) and s.hi == pytest.approx(99.01, abs=1e-12)
    assert s.lo == pytest.approx(percentile_linear(values, 1.0), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200),
       st.sampled_from([(1.0, 99.0), (5.0, 95.0)]))
def test_fit_stats_matches_sorting_oracle(values, bounds):
    s = fit_stats(values, NormalizationSpec(False, True, *bounds))
    assert s.lo == pytest.approx(percentile_linear(values, bounds[0]), rel=1e-12, abs=1e-9)
    assert s.hi == pytest.approx(percentile_linear(values, bounds[1]), rel=1e-12, abs=1e-9)


def test_fit_stats_degenerate_and_plain():
    assert fit_stats([5.0] * 10, TRUNC) == ChannelStats(5.0, 5.0)
    assert fit_stats([0.0, 10.0], PLAIN) == ChannelStats(0.0, 10.0)


def test_apply_normalization_rules():
    s = ChannelStats(2.0, 12.0)
    assert apply_normalization([2.0, 12.0], s, TRUNC).tolist() == [0.0, 1.0]
    assert apply_normalization([300 * 12.0], s, TRUNC)[0] == 1.0
    assert apply_normalization([-1e9, 3, 1e9], ChannelStats(5.0, 5.0), TRUNC).tolist() == \
        [0.5, 0.5, 0.5]


def test_log_compress_values():
    assert log_compress(0.0) == 0.0
    assert log_compress(math.e - 1) == pytest.approx(1.0, abs=1e-15)
    assert log_compress(-(math.e - 1)) == pytest.approx(-1.0, abs=1e-15)


def test_enumerate_strategies_rows():
    rows = enumerate_strategies()
    assert len(rows) == 6
    assert (rows[0].log_transform, rows[0].truncate) == (False, False)
    assert (rows[2].log_transform, rows[2].truncate, rows[2].p_low, rows[2].p_high) == \
        (False, True, 1.0, 99.0)
    assert (rows[5].log_transform, rows[5].truncate, rows[5].p_low, rows[5].p_high) == \
        (True, True, 5.0, 95.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=50), st.booleans())
def test_monotone_and_bounded(values, use_log):
    spec = NormalizationSpec(use_log, True, 1.0, 99.0)
    stats = fit_stats(values, spec)
    x = np.sort(np.asarray(values))
    y = apply_normalization(x, stats, spec)
    assert np.all((y >= 0) & (y <= 1))
    assert np.all(np.diff(y) >= 0)


def test_truncation_keeps_most_values_inside():
    x = np.random.default_rng(0).standard_t(3, size=10000)
    y = apply_normalization(x, fit_stats(x, TRUNC), TRUNC)
    assert np.mean((y > 0) & (y < 1)) >= 0.98


def test_spec_validation():
    with pytest.raises(ConfigError):
        NormalizationSpec(False, True, 99.0, 1.0)
    with pytest.raises(ConfigError):
        NormalizationSpec(False, False, 1.0, 99.0)
    with pytest.raises(ConfigError):
        NormalizationSpec.from_config({"log": True, "bogus": 1})


def _patient(pid, values):
    return PatientRecord(pid, 0, [FeatureChannel("aEEG", "broadband", "AV17",
                                                 np.asarray(values, dtype=float))])


def test_stats_ignore_non_training_patients():
    train = [_patient("a", np.arange(100)), _patient("b", np.arange(100, 200))]
    sentinel = [_patient("v", [1e12] * 100), _patient("t", [-1e12] * 100)]
    f1 = fit_cohort(train, TRUNC, ["a", "b"])
    f2 = fit_cohort(train + sentinel, TRUNC, ["a", "b"])
    assert f1.stats == f2.stats and f2.fitted_on == ("a", "b")


def test_fitted_normalization_round_trip():
    f = fit_cohort([_patient("a", np.arange(50))], TRUNC, ["a"])
    g = FittedNormalization.from_dict(f.to_dict())
    assert g.stats == f.stats and g.spec == f.spec and g.fitted_on == f.fitted_on
