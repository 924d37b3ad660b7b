import numpy as np
import pytest

from eegleak import _kernels
from eegleak.cohort import SynthConfig

BACKENDS = ["numpy"] + (["cython"] if _kernels._compiled is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_synth(**kw) -> SynthConfig:
    """A cohort small enough for a full pipeline run in a few seconds."""
    base = dict(n_patients=40, min_duration=900, max_duration=2400, seed=5)
    base.update(kw)
    return SynthConfig(**base)


def tiny_run_dict(**over) -> dict:
    d = {
        "synth": dict(n_patients=60, min_duration=900, max_duration=2400, seed=5,
                      signal_strength=0.6),
        "stage1": {"train": {"max_epochs": 3, "patience": 2}},
        "stage2": {"train": {"max_epochs": 3, "patience": 2}},
        "n_resamples": 100,
        "out_dir": "",
    }
    d.update(over)
    return d


def tiny_run_config(**over):
    from eegleak.config import config_from_dict
    return config_from_dict(tiny_run_dict(**over))


def pytest_terminal_summary(terminalreporter):
    from tests.test_acceptance import CRITERION_LINES
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)
