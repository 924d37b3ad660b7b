"""Command-line entry point: ``eegleak <subcommand> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import yaml

from . import io as fio
from .cohort import generate_cohort, save_cohort
from .config import RunConfig, config_from_dict, dump_config, load_config
from .errors import ConfigError, EEGLeakError, LeakageRefusal, StageError
from .experiments import (
    FeatureConfig,
    compare_normalizations,
    feature_rank,
    format_table,
    leakage_control_experiment,
)
from .pipeline import COHORT_MANIFEST, run_pipeline, run_step

log = logging.getLogger("eegleak")

STEP_COMMANDS = ("split", "preprocess", "audit", "train-stage1", "embed", "train-stage2",
                 "evaluate")

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_LEAKAGE = 3


def _global_options(defaults: bool) -> argparse.ArgumentParser:
    # the same flags are accepted before and after the subcommand
    d = None if defaults else argparse.SUPPRESS
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d, help="YAML run configuration")
    p.add_argument("--seed", metavar="U64", type=int, default=d,
                   help="derive every seed in the run from this integer")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory")
    p.add_argument("--allow-leaky", action="store_true",
                   default=False if defaults else argparse.SUPPRESS,
                   help="continue past a non-empty leakage audit (results are flagged)")
    p.add_argument("-v", "--verbose", action="count",
                   default=0 if defaults else argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegleak", parents=[_global_options(True)],
                                     description="Leakage-audited two-stage EEG outcome "
                                                 "prediction on synthetic or supplied cohorts.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = [_global_options(False)]
    sub.add_parser("generate", parents=common,
                   help="write the synthetic cohort (manifest + sidecar) to the output dir")
    for name in STEP_COMMANDS:
        sub.add_parser(name, parents=common,
                       help=f"run the {name} step using earlier artifacts in the output dir")
    run = sub.add_parser("run", parents=common, help="full pipeline")
    run.add_argument("--wiring", choices=("clean", "leaky"), default=None,
                     help="override the configured split wiring")
    sub.add_parser("leak-experiment", parents=common,
                   help="clean vs leaky wiring on one cohort; reports validation-test gaps")
    fr = sub.add_parser("feature-rank", parents=common,
                        help="rank channel sets by the baseline model's correlation score")
    fr.add_argument("--features", metavar="PATH",
                    help="YAML list of {name, channels: [[family, band, derivation], ...]}; "
                         "default: every registry channel on its own")
    sub.add_parser("norm-compare", parents=common,
                   help="baseline model under the six normalization strategies")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.allow_leaky:
        cfg = replace(cfg, allow_leaky=True)
    return cfg


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir or "output")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_report(report) -> None:
    if report.leaky:
        print("WARNING: leaky run; metrics below are not valid estimates")
    for name, m in report.cohorts.items():
        if m.flags.get("single_class"):
            print(f"{name:<12} n={m.n_patients:<4} single class; metrics undefined")
            continue
        auc = m.metrics["auc"]
        print(f"{name:<12} n={m.n_patients:<4} AUC {auc['point']:.3f} "
              f"[{auc['ci_low']:.3f}, {auc['ci_high']:.3f}]  "
              f"Sens@Spec99 {m.point('sens_at_spec99'):.3f}  "
              f"accuracy {m.point('accuracy'):.3f}")


def _default_feature_configs(cfg: RunConfig) -> List[FeatureConfig]:
    return [FeatureConfig("/".join(c.key), (c.key,)) for c in cfg.synth.registry]


def _load_feature_configs(path: str) -> List[FeatureConfig]:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, list):
        raise ConfigError("features", "expected a YAML list of feature configurations")
    return [FeatureConfig.from_dict(d) for d in data]


def dispatch(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "generate":
        if cfg.synth is None:
            raise ConfigError("synth", "generate needs a synthetic cohort configuration")
        out = _out(cfg)
        manifest, sidecar = save_cohort(generate_cohort(cfg.synth), out / COHORT_MANIFEST)
        dump_config(cfg, out / "config.yaml")
        print(f"wrote {manifest} and {sidecar}")
    elif cmd in STEP_COMMANDS:
        result = run_step(cfg, cmd, _out(cfg))
        if cmd == "audit":
            lines = result.audit.to_lines()
            print("\n".join(lines) if lines else "audit clean: no violations")
        elif cmd == "evaluate":
            _print_report(result)
        else:
            print(f"{cmd}: done ({_out(cfg)})")
    elif cmd == "run":
        if args.wiring:
            cfg = replace(cfg, wiring=args.wiring)
        report = run_pipeline(cfg, out_dir=_out(cfg))
        _print_report(report)
    elif cmd == "leak-experiment":
        out = _out(cfg)
        result = leakage_control_experiment(cfg, out)
        fio.write_json(result.gaps, out / "gaps.json")
        for arm, gaps in result.gaps.items():
            print(f"{arm:<6} val AUC {gaps['val_auc']:.3f} test AUC {gaps['test_auc']:.3f} "
                  f"(gap {gaps['auc_gap']:+.3f}); val Sens@Spec99 "
                  f"{gaps['val_sens_at_spec99']:.3f} test {gaps['test_sens_at_spec99']:.3f} "
                  f"(gap {gaps['sens_at_spec99_gap']:+.3f})")
    elif cmd == "feature-rank":
        fcs = (_load_feature_configs(args.features) if args.features
               else _default_feature_configs(cfg))
        ranked = feature_rank(cfg, fcs)
        fio.write_json([{"name": fc.name, "channels": [list(c) for c in fc.channels],
                         "score": score} for fc, score in ranked],
                       _out(cfg) / "feature_rank.json")
        for rank, (fc, score) in enumerate(ranked, start=1):
            print(f"{rank:>2}. {score:.3f}  {fc.name}")
    elif cmd == "norm-compare":
        rows = compare_normalizations(cfg)
        fio.write_json([r.to_dict() for r in rows], _out(cfg) / "normalization_table.json")
        print(format_table(rows))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except LeakageRefusal as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        if isinstance(exc.cause, LeakageRefusal):
            print(f"refused: {exc.cause}", file=sys.stderr)
            return EXIT_LEAKAGE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc.cause, ConfigError) else EXIT_ERROR
    except (EEGLeakError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
