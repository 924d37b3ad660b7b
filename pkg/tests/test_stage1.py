import inspect

import numpy as np
import pytest

from eegleak.cohort import RETAINED_CHANNELS, generate_cohort
from eegleak.errors import LeakageRefusal
from eegleak.nn import TrainConfig
from eegleak.partition import LeakageReport, Violation
from eegleak.preprocess import NormalizationSpec, fit_cohort
from eegleak.stage1 import (
    Stage1Config,
    Stage1Encoder,
    build_windows,
    encoder_from_state,
    encoder_meta,
    extract_embeddings,
    inverse_frequency_weights,
    train_stage1,
)
from tests.conftest import tiny_synth


def _datasets(signal, n=60, seed=5):
    cohort = generate_cohort(tiny_synth(n_patients=n, signal_strength=signal, seed=seed))
    train, val = cohort[: 2 * n // 3], cohort[2 * n // 3:]
    norm = fit_cohort(cohort, NormalizationSpec(), [r.patient_id for r in train],
                      RETAINED_CHANNELS)
    tr = build_windows(norm.apply(train), RETAINED_CHANNELS)
    va = build_windows(norm.apply(val), RETAINED_CHANNELS)
    return tr, va


def _config(**train):
    base = dict(learning_rate=3e-3, lr_decay=1.0, patience=50, max_epochs=10, batch_size=32,
                seed=0)
    base.update(train)
    return Stage1Config(train=TrainConfig(**base))


@pytest.fixture(scope="module")
def separable():
    tr, va = _datasets(signal=2.5)
    enc, hist = train_stage1(tr, va, _config(max_epochs=50, patience=5))
    return tr, va, enc, hist


def test_separable_data_reaches_high_accuracy(separable):
    _, _, _, hist = separable
    assert max(h["val_accuracy"] for h in hist) >= 0.95
    assert len(hist) <= 50


def test_objective_decreases_early(separable):
    _, _, _, hist = separable
    losses = [h["train_loss"] for h in hist[:5]]
    assert losses[-1] < losses[0]


def test_trained_embeddings_separate_classes(separable):
    tr, va, enc, _ = separable

    def centroid_cosine(e):
        recs = extract_embeddings(e, va)
        V = np.stack([r.vector for r in recs])
        a, b = V[va.labels == 0].mean(axis=0), V[va.labels == 1].mean(axis=0)
        return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))

    untrained = Stage1Encoder(tr.X.shape[1], tr.X.shape[2], Stage1Config(), seed=0)
    # lower cosine between class centroids = more separation
    assert centroid_cosine(enc) < centroid_cosine(untrained)


def test_no_signal_predicts_majority():
    tr, va = _datasets(signal=0.0)
    cfg = _config(max_epochs=8)
    cfg.class_weighting = "none"
    enc, hist = train_stage1(tr, va, cfg)
    best = min(hist, key=lambda h: h["val_loss"])
    majority = max(np.mean(va.labels), 1 - np.mean(va.labels))
    assert abs(best["val_accuracy"] - majority) <= 0.05


def test_refuses_leaky_audit():
    tr, va = _datasets(signal=1.0, n=12)
    audit = LeakageReport([Violation("PatientOverlap", "P0001", "roles a+b")])
    with pytest.raises(LeakageRefusal):
        train_stage1(tr, va, _config(max_epochs=1), audit=audit)
    enc, _ = train_stage1(tr, va, _config(max_epochs=1), audit=audit, allow_leaky=True)
    assert enc is not None


def test_embedding_shapes_and_purity(separable):
    tr, _, enc, _ = separable
    recs = extract_embeddings(enc, tr)
    assert len(recs) == len(tr)
    assert all(r.vector.shape == (32,) and 0.0 <= r.window_probability <= 1.0 for r in recs)
    twin = tr.without_labels()
    twin.X = np.stack([tr.X[0], tr.X[0]])
    twin.keys = [("x", 0), ("x", 1)]
    a, b = extract_embeddings(enc, twin)
    np.testing.assert_array_equal(a.vector, b.vector)


def test_extraction_is_label_free():
    params = inspect.signature(extract_embeddings).parameters
    assert "labels" not in params and list(params) == ["encoder", "windows"]


def test_encoder_checkpoint_round_trip(separable):
    tr, _, enc, _ = separable
    again = encoder_from_state(enc.state_dict(), encoder_meta(enc, Stage1Config()))
    np.testing.assert_array_equal(again.embed_windows(tr.X[:5]), enc.embed_windows(tr.X[:5]))


def test_inverse_frequency_weights():
    np.testing.assert_allclose(inverse_frequency_weights(np.array([0, 0, 0, 1])),
                               [4 / 6, 2.0])
    with pytest.raises(ValueError):
        inverse_frequency_weights(np.array([0, 0]))
