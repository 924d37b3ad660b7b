"""Acceptance criteria, one test each.  Every test prints a single PASS/FAIL line.

The lines are also collected into the pytest terminal summary (see conftest).
"""

import time

import numpy as np
import pytest

from eegleak import io as fio
from eegleak.cli import main as cli_main
from eegleak.cohort import generate_cohort
from eegleak.config import config_from_dict
from eegleak.experiments import (
    BASELINE_TRAIN,
    NORM_COMPARE_CHANNEL,
    _stage1_windows,
    leakage_control_experiment,
    train_baseline,
)
from eegleak.metrics import ScoredCohort, bootstrap_ci, roc_auc, sensitivity_at_specificity
from eegleak.nn import (
    ArcFaceParams,
    Conv1d,
    Dense,
    LayerNorm,
    MultiHeadSelfAttention,
    TransformerBlock,
    arcface_loss,
    check_module,
    gradient_check,
    softmax_cross_entropy,
)
from eegleak.partition import (
    DEFAULT_FRACTIONS,
    STAGE1_TRAIN,
    STAGE1_VAL,
    TEST,
    audit_leakage,
    split_patients,
    split_stage2,
)
from eegleak.pipeline import STEPS, run_pipeline
from eegleak.preprocess import enumerate_strategies
from eegleak.stage2 import EmbeddingSequence, build_sequences, model_from_state, predict_patient
from tests import oracles
from tests.test_partition import _clean_world, inject


CRITERION_LINES = []


def report(n, ok, detail):
    line = f"CRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    CRITERION_LINES.append(line)
    print("\n" + line)
    return ok


# ---------------------------------------------------------------- 1 gradient suite


def _grad_cases(seed):
    rng = np.random.default_rng(seed)
    dense = Dense(5, 3, rng)
    dense.params["bias"][:] = rng.normal(size=3)
    conv = Conv1d(3, 4, 5, 2, rng)
    conv.params["bias"][:] = rng.normal(size=4)
    ln = LayerNorm(6)
    ln.params["gamma"][:] = rng.normal(size=6)
    attn = MultiHeadSelfAttention(8, 2, rng)
    block = TransformerBlock(8, 8, 12, rng)
    y3 = rng.integers(0, 3, size=5)
    y2 = rng.integers(0, 2, size=6)

    def ce(arrays):
        loss, d = softmax_cross_entropy(arrays[0], y3)
        return loss, [d]

    def arc(arrays):
        loss, de, dw = arcface_loss(arrays[0], y2, ArcFaceParams(16.0, 0.3, arrays[1]))
        return loss, [de, dw]

    linear = {
        "dense": max(check_module(dense, dense.forward, rng.normal(size=(4, 5)), rng).values()),
        "conv1d": max(check_module(conv, conv.forward, rng.normal(size=(2, 3, 16)),
                                   rng).values()),
    }
    nonlinear = {
        "layer_norm": max(check_module(ln, ln.forward, rng.normal(size=(3, 6)), rng).values()),
        "attention": max(check_module(attn, attn.forward, rng.normal(size=(2, 4, 8)),
                                      rng).values()),
        "cross_entropy": gradient_check(ce, [rng.normal(size=(5, 3))]),
        "arcface": gradient_check(arc, [rng.normal(size=(6, 5)), rng.normal(size=(2, 5))]),
        "transformer_block": max(check_module(block, lambda x: block.forward(x),
                                              rng.normal(size=(2, 3, 8)), rng).values()),
    }
    return linear, nonlinear


def test_c01_gradient_suite():
    t0 = time.perf_counter()
    worst_lin, worst_non = {}, {}
    for seed in range(20):
        lin, non = _grad_cases(seed)
        for k, v in lin.items():
            worst_lin[k] = max(worst_lin.get(k, 0.0), v)
        for k, v in non.items():
            worst_non[k] = max(worst_non.get(k, 0.0), v)
    elapsed = time.perf_counter() - t0
    ok = (max(worst_lin.values()) < 1e-6 and max(worst_non.values()) < 1e-4 and elapsed < 60)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in {**worst_lin, **worst_non}.items())
    assert report(1, ok, f"20 seeds/op, worst rel. error: {detail}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 2 ArcFace reduction


def test_c02_arcface_reduction():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n, d, k = int(rng.integers(1, 20)), int(rng.integers(2, 10)), int(rng.integers(2, 5))
        e, w, y = rng.normal(size=(n, d)), rng.normal(size=(k, d)), rng.integers(0, k, size=n)
        loss, _, _ = arcface_loss(e, y, ArcFaceParams(1.0, 0.0, w))
        ref = oracles.softmax_ce_rows(oracles.cosine_matrix(e.tolist(), w.tolist()), y)
        worst = max(worst, abs(loss - ref))
    assert report(2, worst <= 1e-10, f"100 batches, max |arcface(m=0,s=1) - CE| = {worst:.1e}")


# ---------------------------------------------------------------- 3 metric oracles


def test_c03_metric_oracles():
    rng = np.random.default_rng(3)
    auc_bad = sens_bad = mono_bad = 0
    specs = (0.5, 0.8, 0.9, 0.95, 0.99)
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = np.round(rng.normal(size=n) + y, int(rng.integers(0, 4)))
        c = ScoredCohort(np.arange(n), s, y)
        auc_bad += roc_auc(c) != float(oracles.auc_pairs(s.tolist(), y.tolist()))
        got = [sensitivity_at_specificity(c, q) for q in specs]
        sens_bad += sum(g != float(oracles.sens_at_spec_bruteforce(s.tolist(), y.tolist(), q))
                        for g, q in zip(got, specs))
        mono_bad += any(b > a for a, b in zip(got, got[1:]))
    ok = auc_bad == sens_bad == mono_bad == 0
    assert report(3, ok, f"1000 cohorts n<=200: AUC mismatches {auc_bad}, Sens@Spec "
                         f"mismatches {sens_bad}, monotonicity violations {mono_bad}")


# ---------------------------------------------------------------- 4 auditor


def test_c04_auditor_precision_recall():
    rng = np.random.default_rng(4)
    tp = fp = fn = 0
    for trial in range(200):
        world = _clean_world(seed=trial)
        s1, s2, prov, expected = inject(rng, *world)
        found = sorted((v.kind, v.patient_id) for v in
                       audit_leakage(world[0], s1, s2, prov).violations)
        exp_left = list(expected)
        for f in found:
            if f in exp_left:
                exp_left.remove(f)
                tp += 1
            else:
                fp += 1
        fn += len(exp_left)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    assert report(4, precision == recall == 1.0,
                  f"200 splits, {tp} injected violations: precision {precision}, recall {recall}")


# ---------------------------------------------------------------- 5 control experiment


@pytest.mark.slow
def test_c05_control_experiment():
    cfg = config_from_dict({"out_dir": ""})
    assert cfg.synth.n_patients == 300
    t0 = time.perf_counter()
    result = leakage_control_experiment(cfg, "")
    elapsed = time.perf_counter() - t0
    lk, cl = result.gaps["leaky"], result.gaps["clean"]
    checks = {
        "leaky AUC gap >= 0.15": lk["auc_gap"] >= 0.15,
        "leaky Sens@Spec99 gap >= 0.15": lk["sens_at_spec99_gap"] >= 0.15,
        "clean |AUC gap| <= 0.05": abs(cl["auc_gap"]) <= 0.05,
        "runtime <= 15 min": elapsed <= 900,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"leaky val/test AUC {lk['val_auc']:.3f}/{lk['test_auc']:.3f} "
              f"(gap {lk['auc_gap']:+.3f}), Sens@Spec99 {lk['val_sens_at_spec99']:.3f}/"
              f"{lk['test_sens_at_spec99']:.3f} (gap {lk['sens_at_spec99_gap']:+.3f}); "
              f"clean val/test AUC {cl['val_auc']:.3f}/{cl['test_auc']:.3f} "
              f"(gap {cl['auc_gap']:+.3f}); {elapsed:.0f}s"
              + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert report(5, not failed, detail)


# ---------------------------------------------------------------- 6 normalization table


@pytest.mark.slow
def test_c06_truncation_beats_untruncated():
    plain, trunc = enumerate_strategies()[0], enumerate_strategies()[2]
    wins, pairs = 0, []
    for seed in range(10):
        cfg = config_from_dict({"out_dir": ""}).with_seed(seed)
        cohort = generate_cohort(cfg.synth)
        losses = []
        for spec in (plain, trunc):
            tr, va = _stage1_windows(cohort, cfg, (NORM_COMPARE_CHANNEL,), spec)
            losses.append(train_baseline(tr, va, BASELINE_TRAIN).min_val_loss)
        pairs.append(losses)
        wins += losses[1] <= losses[0]
    detail = "; ".join(f"{a:.4f}/{b:.4f}" for a, b in pairs)
    assert report(6, wins >= 8, f"truncated <= untruncated on {wins}/10 seeds "
                                f"(untruncated/truncated min val loss: {detail})")


# ---------------------------------------------------------------- 7 split arithmetic


def test_c07_split_arithmetic():
    ids = [f"P{i:04d}" for i in range(1231)]
    labels = {p: int(i % 4 == 0) for i, p in enumerate(ids)}
    c = split_patients(ids, labels, DEFAULT_FRACTIONS, seed=0).counts()
    got1 = (c[STAGE1_TRAIN], c[STAGE1_VAL], c[TEST])
    got2 = tuple(map(len, split_stage2(ids[:150], 0.6, seed=0)))
    ok = got1 == (581, 150, 500) and got2 == (90, 60)
    assert report(7, ok, f"1231 -> {got1[0]}/{got1[1]}/{got1[2]}; 150 -> {got2[0]}/{got2[1]}")


# ---------------------------------------------------------------- 8 bootstrap coverage


def test_c08_bootstrap_coverage():
    mu = 1.0
    truth = oracles.binormal_auc(mu)
    rng = np.random.default_rng(8)
    covered = 0
    for rep in range(100):
        y = (rng.random(150) < 0.25).astype(int)
        y[:2] = (0, 1)
        c = ScoredCohort(np.arange(150), rng.normal(size=150) + mu * y, y)
        lo, hi = bootstrap_ci(c, roc_auc, 1000, seed=rep)
        covered += lo <= truth <= hi
    flat = ScoredCohort(np.arange(150), np.full(150, 0.3), (np.arange(150) % 4 == 0).astype(int))
    lo, hi = bootstrap_ci(flat, roc_auc, 1000, seed=0)
    ok = covered >= 90 and hi - lo == 0.0
    assert report(8, ok, f"AUC 95% CI covers true AUC {truth:.4f} in {covered}/100 repeats "
                         f"(n=150); degenerate cohort width {hi - lo}")


# ---------------------------------------------------------------- 9 determinism


@pytest.mark.slow
def test_c09_run_determinism(tmp_path):
    out = tmp_path / "run"
    assert cli_main(["run", "--out", str(out)]) == 0
    first = (out / "results.json").read_bytes()
    assert cli_main(["run", "--out", str(out)]) == 0
    second = (out / "results.json").read_bytes()
    assert report(9, first == second, f"two default runs, results.json {len(first)} bytes, "
                                      f"byte-identical={first == second}")


# ---------------------------------------------------------------- 10 permutation


@pytest.mark.slow
def test_c10_permutation_invariance(tmp_path):
    cfg = config_from_dict({"synth": {"n_patients": 120}, "stage2": {
        "use_positional_encoding": False}, "n_resamples": 100, "out_dir": ""})
    run_pipeline(cfg, out_dir=tmp_path)
    state, meta = fio.load_checkpoint(tmp_path / "stage2.npz")
    model = model_from_state(state, meta)
    split = fio.read_split(tmp_path / "splits.json")
    test_ids = set(split.ids(TEST))
    seqs = [s for s in build_sequences(fio.read_embeddings(tmp_path / "embeddings.emb"))
            if s.patient_id in test_ids and s.length > 1]
    rng = np.random.default_rng(10)
    worst = 0.0
    for k in range(50):
        s = seqs[k % len(seqs)]
        perm = rng.permutation(s.length)
        shuffled = EmbeddingSequence(s.patient_id, s.vectors[perm])
        worst = max(worst, abs(predict_patient(model, s) - predict_patient(model, shuffled)))
    assert STEPS[-1] == "evaluate"
    assert report(10, worst <= 1e-9, f"50 permuted test sequences on a trained model, "
                                     f"max |delta p| = {worst:.1e}")
