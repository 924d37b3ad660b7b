"""Leakage-audited two-stage EEG outcome prediction at desk scale."""

from ._kernels import BACKEND
from .cohort import PatientRecord, SynthConfig, generate_cohort, load_cohort, save_cohort
from .config import RunConfig, config_from_dict, load_config
from .errors import EEGLeakError, LeakageRefusal
from .experiments import compare_normalizations, feature_rank, leakage_control_experiment
from .metrics import roc_auc, sensitivity_at_specificity
from .partition import audit_leakage, make_clean_split, make_leaky_split
from .pipeline import ExperimentReport, load_report, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "EEGLeakError", "ExperimentReport", "LeakageRefusal", "PatientRecord",
    "RunConfig", "SynthConfig", "audit_leakage", "compare_normalizations", "config_from_dict",
    "feature_rank", "generate_cohort", "leakage_control_experiment", "load_cohort",
    "load_config", "load_report", "make_clean_split", "make_leaky_split", "roc_auc",
    "run_pipeline", "save_cohort", "sensitivity_at_specificity",
]
