from dataclasses import replace

import numpy as np
import pytest

from eegleak import io as fio
from eegleak.cohort import generate_cohort, save_cohort
from eegleak.config import config_from_dict, dump_config, load_config
from eegleak.errors import ConfigError, LeakageRefusal
from eegleak.partition import STAGE1_TRAIN, STAGE2_TRAIN, STAGE2_VAL, TEST
from eegleak.pipeline import (
    STEPS,
    AuditMismatch,
    load_report,
    run_pipeline,
    run_step,
)
from tests.conftest import tiny_run_config, tiny_run_dict


@pytest.fixture(scope="module")
def clean_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("clean")
    store = {}
    report = run_pipeline(tiny_run_config(), out_dir=out,
                          store_hook=lambda s: store.setdefault("s", s))
    return out, report, store["s"]


def test_report_has_three_cohorts(clean_run):
    _, report, _ = clean_run
    assert set(report.cohorts) == {STAGE2_TRAIN, STAGE2_VAL, TEST}
    for m in report.cohorts.values():
        assert m.flags["single_class"] or set(m.metrics) >= {"auc", "sens_at_spec99", "f1"}
    assert not report.leaky and report.audit["clean"]


def test_rerun_is_byte_identical(clean_run, tmp_path):
    out, _, _ = clean_run
    run_pipeline(tiny_run_config(), out_dir=tmp_path)
    assert (tmp_path / "results.json").read_bytes() == (out / "results.json").read_bytes()


def test_test_labels_read_only_at_split_and_evaluate(clean_run):
    _, report, store = clean_run
    test_ids = set(report.predictions[TEST][i][0] for i in range(len(report.predictions[TEST])))
    stages = {stage for stage, pid in store.access_log if pid in test_ids}
    assert stages <= {"split", "evaluate"} and "evaluate" in stages


def test_clean_pools_are_disjoint(clean_run):
    out, _, _ = clean_run
    s1, s2 = fio.read_pools(out / "pools.json")
    split = fio.read_split(out / "splits.json")
    assert not set(map(tuple, s1)) & set(map(tuple, s2))
    assert {p for p, _ in s2}.isdisjoint(split.ids(STAGE1_TRAIN))
    assert {p for p, _ in s1}.isdisjoint(split.ids(TEST))
    assert fio.read_json(out / "normalization.json")["fitted_on"] == split.ids(STAGE1_TRAIN)


def test_artifacts_written(clean_run):
    out, _, _ = clean_run
    for name in ("config.yaml", "splits.json", "pools.json", "normalization.json", "audit.txt",
                 "stage1.npz", "embeddings.emb", "stage2.npz", "results.json", "timings.json"):
        assert (out / name).is_file(), name


def test_load_report_round_trip(clean_run, tmp_path):
    out, _, _ = clean_run
    fio.write_json(load_report(out).to_dict(), tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == (out / "results.json").read_bytes()


def test_tampered_audit_detected(clean_run, tmp_path):
    out, _, _ = clean_run
    for f in out.iterdir():
        if f.is_file():
            (tmp_path / f.name).write_bytes(f.read_bytes())
    (tmp_path / "audit.txt").write_text("PatientOverlap\tP0001\tfake\n")
    with pytest.raises(AuditMismatch):
        load_report(tmp_path)


def test_leaky_wiring_refused_without_flag(tmp_path):
    with pytest.raises(LeakageRefusal) as err:
        run_pipeline(tiny_run_config(wiring="leaky"), out_dir=tmp_path)
    assert "PatientOverlap" in str(err.value)
    assert (tmp_path / "audit.txt").read_text().strip()


def test_leaky_wiring_with_flag_is_stamped():
    report = run_pipeline(tiny_run_config(wiring="leaky", allow_leaky=True))
    assert report.leaky and not report.audit["clean"]
    assert all(m.leaky for m in report.cohorts.values())


def test_stepwise_matches_full_run(clean_run, tmp_path):
    out, _, _ = clean_run
    cfg = tiny_run_config()
    for step in STEPS[1:]:
        run_step(cfg, step, tmp_path)
    assert (tmp_path / "results.json").read_bytes() == (out / "results.json").read_bytes()


def test_step_needs_earlier_artifacts(tmp_path):
    with pytest.raises(FileNotFoundError, match="'split' step first"):
        run_step(tiny_run_config(), "preprocess", tmp_path)


def test_manifest_cohort_matches_generated(clean_run, tmp_path):
    out, _, _ = clean_run
    cfg = tiny_run_config()
    save_cohort(generate_cohort(cfg.synth), tmp_path / "cohort.csv")
    from_file = replace(cfg, synth=None, manifest=str(tmp_path / "cohort.csv"))
    report = run_pipeline(from_file, out_dir="")
    assert report.cohort_digest == fio.read_json(out / "results.json")["cohort_digest"]


def test_config_yaml_round_trip(tmp_path):
    cfg = tiny_run_config()
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml").to_dict() == cfg.to_dict()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        config_from_dict(tiny_run_dict(stage1={"train": {"nope": 1}}))


def test_seed_derivation():
    cfg = tiny_run_config().with_seed(9)
    assert cfg.synth.seed == 9 and cfg.split_seed == 9
    assert cfg.stage1.train.seed == 10 and cfg.stage2.train.seed == 11


def test_embeddings_round_trip(clean_run):
    out, _, _ = clean_run
    recs = fio.read_embeddings(out / "embeddings.emb")
    path = out.parent / "copy.emb"
    fio.write_embeddings(recs, path)
    assert path.read_bytes() == (out / "embeddings.emb").read_bytes()
    assert all(np.isfinite(r.vector).all() for r in recs)
