"""Experiment configuration files.

The format is INI: one [experiment] section for the dataset and run matrix,
an optional [defaults] section with training knobs shared by every method,
and one optional section per method ("c", "cdp", "f", "fpdp", "dopamine")
overriding those knobs. Example:

    [experiment]
    hospitals = 10
    samples_per_hospital = 293
    seeds = 0 1 2 3 4
    methods = c f dopamine
    out = results

    [defaults]
    max_rounds = 30
    learning_rate = 0.1

    [dopamine]
    noise_multiplier = 1.5
    epsilon = 7.0

Unknown sections or keys are errors; value errors report section.key so a
typo is findable without reading this module.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .dp_engine import DpConfig
from .errors import ConfigError
from .model_core import Dataset, load_csv_dataset, synth_dataset
from .orchestrator import METHODS, RunConfig, shard_dataset

_EXPERIMENT_KEYS = {
    "hospitals": int,
    "samples_per_hospital": int,
    "num_features": int,
    "num_classes": int,
    "separation": float,
    "test_samples": int,
    "data_seed": int,
    "seeds": "int_list",
    "methods": "str_list",
    "out": str,
    "model": str,
    "hidden": int,
    "dataset": str,
    "csv_path": str,
    "csv_test_fraction": float,
}

# Per-method knobs: DpConfig fields plus the RunConfig extras.
_METHOD_KEYS = {
    "sampling_prob": float,
    "noise_multiplier": float,
    "clip_norm": float,
    "learning_rate": float,
    "momentum": float,
    "max_rounds": int,
    "epsilon": float,
    "delta": float,
    "calibration": str,
    "batch_size": int,
    "fedavg_local_epochs": int,
    "participation_fraction": float,
    "secure": str,
    "transport": str,
}

_DP_FIELD_NAMES = (
    "sampling_prob", "noise_multiplier", "clip_norm", "learning_rate",
    "momentum", "max_rounds", "epsilon", "delta", "calibration",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Parsed experiment file: the run matrix plus per-method training knobs."""

    hospitals: int = 10
    samples_per_hospital: int = 293
    num_features: int = 20
    num_classes: int = 2
    separation: float = 2.0
    test_samples: int = 1000
    data_seed: int = 1234
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    methods: tuple[str, ...] = METHODS
    out: str = "results"
    model: str = "logistic"
    hidden: int = 32
    dataset: str = "synthetic"
    csv_path: str = ""
    csv_test_fraction: float = 0.2
    defaults: dict | None = None
    overrides: dict | None = None  # method -> {key: value}

    def __post_init__(self):
        if self.hospitals < 1:
            raise ConfigError("experiment.hospitals must be >= 1")
        if self.samples_per_hospital < 1:
            raise ConfigError("experiment.samples_per_hospital must be >= 1")
        if not self.seeds:
            raise ConfigError("experiment.seeds must name at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("experiment.seeds contains duplicates")
        if not self.methods:
            raise ConfigError("experiment.methods must name at least one method")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(
                    f"experiment.methods: unknown method {m!r}; expected one of {METHODS}"
                )
        if self.dataset not in ("synthetic", "csv"):
            raise ConfigError("experiment.dataset must be 'synthetic' or 'csv'")
        if self.dataset == "csv" and not self.csv_path:
            raise ConfigError("experiment.csv_path is required when dataset = csv")
        if not 0.0 < self.csv_test_fraction < 1.0:
            raise ConfigError("experiment.csv_test_fraction must lie in (0, 1)")

    def run_config(self, method: str) -> RunConfig:
        """RunConfig for one method: [defaults] overlaid with its own section."""
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
        merged = dict(self.defaults or {})
        merged.update((self.overrides or {}).get(method, {}))
        dp_kwargs = {k: v for k, v in merged.items() if k in _DP_FIELD_NAMES}
        dp_kwargs["hospitals"] = self.hospitals
        run_kwargs = {k: v for k, v in merged.items() if k not in _DP_FIELD_NAMES}
        section = method if method in (self.overrides or {}) else "defaults"
        try:
            return RunConfig(
                method=method,
                dp=DpConfig(**dp_kwargs),
                model_kind=self.model,
                hidden=self.hidden,
                **run_kwargs,
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] for method {method!r}: {exc}") from exc


def _parse_value(section: str, key: str, raw: str, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "int_list":
            return tuple(int(tok) for tok in raw.split())
        if kind == "str_list":
            return tuple(raw.split())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}: {exc}") from exc


def _parse_section(parser, section: str, allowed: dict) -> dict:
    out = {}
    for key, raw in parser.items(section):
        if key not in allowed:
            raise ConfigError(
                f"{section}.{key}: unknown key (known: {', '.join(sorted(allowed))})"
            )
        out[key] = _parse_value(section, key, raw, allowed[key])
    return out


def load_experiment(path) -> ExperimentConfig:
    """Parse and validate an experiment file; ConfigError names what's wrong."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known = {"experiment", "defaults", *METHODS}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}] (known: {', '.join(sorted(known))})")
    experiment = (
        _parse_section(parser, "experiment", _EXPERIMENT_KEYS)
        if parser.has_section("experiment") else {}
    )
    defaults = (
        _parse_section(parser, "defaults", _METHOD_KEYS)
        if parser.has_section("defaults") else {}
    )
    overrides = {
        m: _parse_section(parser, m, _METHOD_KEYS) for m in METHODS if parser.has_section(m)
    }
    cfg = ExperimentConfig(**experiment, defaults=defaults, overrides=overrides)
    for m in cfg.methods:
        cfg.run_config(m)  # fail at load time, not mid-run
    return cfg


def build_datasets(cfg: ExperimentConfig) -> tuple[list[Dataset], Dataset]:
    """Hospital shards plus the held-out test set the config describes."""
    if cfg.dataset == "csv":
        full = load_csv_dataset(cfg.csv_path, num_classes=cfg.num_classes)
        held_out = max(1, int(round(len(full) * cfg.csv_test_fraction)))
        train, test = full.split(len(full) - held_out)
    else:
        total = cfg.hospitals * cfg.samples_per_hospital + cfg.test_samples
        full = synth_dataset(
            total, cfg.num_features, cfg.num_classes,
            seed=cfg.data_seed, separation=cfg.separation,
        )
        train, test = full.split(cfg.hospitals * cfg.samples_per_hospital)
    return shard_dataset(train, cfg.hospitals), test
