"""Run configuration: YAML file <-> :class:`RunConfig`."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml

from .cohort import RETAINED_CHANNELS, SynthConfig, synth_config_from_dict
from .errors import ConfigError
from .metrics import POOR_OUTCOME, SURVIVAL
from .nn import TrainConfig
from .partition import DEFAULT_FRACTIONS
from .preprocess import NormalizationSpec
from .stage1 import Stage1Config
from .stage2 import Stage2Config

CLEAN = "clean"
LEAKY = "leaky"


@dataclass
class RunConfig:
    synth: Optional[SynthConfig] = field(default_factory=SynthConfig)
    manifest: Optional[str] = None
    channels: Tuple[Tuple[str, str, str], ...] = RETAINED_CHANNELS
    norm: NormalizationSpec = field(default_factory=NormalizationSpec)
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    stage2_fraction: float = 0.6
    stratified: bool = True
    split_seed: int = 0
    window_seconds: float = 300.0
    wiring: str = CLEAN
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    allow_leaky: bool = False
    n_resamples: int = 1000
    bootstrap_seed: int = 0
    threshold: float = 0.5
    positive_class: str = POOR_OUTCOME
    out_dir: str = "output"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if (self.synth is None) == (self.manifest is None):
            raise ConfigError("cohort", "set exactly one of synth / manifest")
        if self.manifest is not None and not Path(self.manifest).is_file():
            raise ConfigError("manifest", f"file not found: {self.manifest}")
        if self.wiring not in (CLEAN, LEAKY):
            raise ConfigError("wiring", f"must be {CLEAN!r} or {LEAKY!r}")
        if self.positive_class not in (POOR_OUTCOME, SURVIVAL):
            raise ConfigError("positive_class", f"must be {POOR_OUTCOME!r} or {SURVIVAL!r}")
        if not self.channels:
            raise ConfigError("channels", "at least one channel is required")
        if self.stage1.embed_dim % self.stage2.heads != 0:
            raise ConfigError("stage2.heads", f"embed_dim {self.stage1.embed_dim} not divisible "
                                              f"by {self.stage2.heads} heads")
        if self.n_resamples < 100:
            raise ConfigError("n_resamples", "must be >= 100")

    def with_seed(self, seed: int) -> "RunConfig":
        """Derive every seed in the run from one integer."""
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        synth = replace(self.synth, seed=seed) if self.synth is not None else None
        st1 = replace(self.stage1, train=replace(self.stage1.train, seed=(seed + 1) % 2 ** 64))
        st2 = replace(self.stage2, train=replace(self.stage2.train, seed=(seed + 2) % 2 ** 64))
        return replace(self, synth=synth, split_seed=seed, bootstrap_seed=seed,
                       stage1=st1, stage2=st2)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "synth": None if self.synth is None else self.synth.to_dict(),
            "manifest": self.manifest,
            "channels": [list(c) for c in self.channels],
            "norm": self.norm.to_config(),
            "fractions": list(self.fractions),
            "stage2_fraction": self.stage2_fraction,
            "stratified": self.stratified,
            "split_seed": self.split_seed,
            "window_seconds": self.window_seconds,
            "wiring": self.wiring,
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "allow_leaky": self.allow_leaky,
            "n_resamples": self.n_resamples,
            "bootstrap_seed": self.bootstrap_seed,
            "threshold": self.threshold,
            "positive_class": self.positive_class,
            "out_dir": self.out_dir,
        }


def _train_config(d: Mapping, base: TrainConfig) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"train.{sorted(bad)[0]}", "unknown option")
    return replace(base, **d)


def _section(d: Mapping, base, name: str):
    d = dict(d)
    train = d.pop("train", None)
    known = {f.name for f in fields(type(base))}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"{name}.{sorted(bad)[0]}", "unknown option")
    for key in ("conv_channels", "kernel_sizes", "strides"):
        if key in d:
            d[key] = tuple(d[key])
    out = replace(base, **d)
    if train is not None:
        out = replace(out, train=_train_config(train, out.train))
    return out


def config_from_dict(d: Mapping[str, Any]) -> RunConfig:
    d = dict(d)
    known = {f.name for f in fields(RunConfig)} | {"seed"}
    bad = set(d) - known
    if bad:
        raise ConfigError(sorted(bad)[0], "unknown option")
    seed = d.pop("seed", None)
    kwargs: Dict[str, Any] = {}
    if "manifest" in d and d["manifest"] is not None:
        kwargs["manifest"] = str(d.pop("manifest"))
        kwargs["synth"] = None
        d.pop("synth", None)
    elif "synth" in d:
        synth = d.pop("synth")
        kwargs["synth"] = synth_config_from_dict(synth or {})
    d.pop("manifest", None)
    if "norm" in d:
        kwargs["norm"] = NormalizationSpec.from_config(d.pop("norm"))
    if "channels" in d:
        kwargs["channels"] = tuple(tuple(c) for c in d.pop("channels"))
    if "fractions" in d:
        kwargs["fractions"] = tuple(float(f) for f in d.pop("fractions"))
    if "stage1" in d:
        kwargs["stage1"] = _section(d.pop("stage1"), Stage1Config(), "stage1")
    if "stage2" in d:
        kwargs["stage2"] = _section(d.pop("stage2"), Stage2Config(), "stage2")
    kwargs.update(d)
    cfg = RunConfig(**kwargs)
    return cfg.with_seed(seed) if seed is not None else cfg


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path: Path | str) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
