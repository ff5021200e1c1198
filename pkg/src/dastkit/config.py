"""Declarative run configuration: a TOML file in, a validated
ExperimentConfig out, and a JSON mirror written next to every run's outputs
so results stay replayable."""

import dataclasses
import json
import sys
from typing import List, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .engine import ConfigurationError

# every key a config file may set, by section; anything else is a typo
TOP_KEYS = {"seed", "output_dir", "dataset", "victim", "oracle", "dast",
            "attack"}
DATASET_KEYS = {"kind", "classes", "size", "train", "test", "seed", "noise",
                "train_images", "train_labels", "test_images", "test_labels"}
VICTIM_KEYS = {"arch", "weights", "epochs", "batch_size", "lr", "seed"}
ORACLE_KEYS = {"endpoint", "mode", "host", "port", "rate_limit",
               "log_requests"}
DAST_KEYS = {"batch_size", "query_budget", "max_iterations", "alpha",
             "lr_substitute", "lr_generator", "latent_dim", "eval_interval",
             "optimizer", "plateau_window", "attack_epsilon", "probe_size",
             "substitute_arch"}
ATTACK_KEYS = {"method", "epsilon", "step_size", "steps", "targeted",
               "target_label", "random_start"}


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    dataset: dict = dataclasses.field(default_factory=dict)
    victim: dict = dataclasses.field(default_factory=dict)
    oracle: dict = dataclasses.field(default_factory=dict)
    dast: dict = dataclasses.field(default_factory=dict)
    attacks: List[dict] = dataclasses.field(default_factory=list)


def _unknown(table: dict, allowed: set, where: str) -> List[str]:
    return [f"{where}.{key}" for key in sorted(set(table) - allowed)]


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a parsed TOML table. All offending fields are reported at
    once, not just the first."""
    problems = _unknown(raw, TOP_KEYS, "top level")
    problems += _unknown(raw.get("dataset", {}), DATASET_KEYS, "dataset")
    problems += _unknown(raw.get("victim", {}), VICTIM_KEYS, "victim")
    problems += _unknown(raw.get("oracle", {}), ORACLE_KEYS, "oracle")
    problems += _unknown(raw.get("dast", {}), DAST_KEYS, "dast")
    attacks = raw.get("attack", [])
    if isinstance(attacks, dict):
        attacks = [attacks]
    for i, entry in enumerate(attacks):
        problems += _unknown(entry, ATTACK_KEYS, f"attack[{i}]")
    mode = raw.get("oracle", {}).get("mode", "prob")
    if mode not in ("label", "prob"):
        problems.append(f"oracle.mode must be 'label' or 'prob', got {mode!r}")
    arch = raw.get("victim", {}).get("arch", "medium")
    if arch not in ("small", "medium", "large"):
        problems.append(
            f"victim.arch must be small, medium or large, got {arch!r}")
    if problems:
        raise ConfigurationError(
            "invalid config fields: " + ", ".join(problems))
    return ExperimentConfig(
        seed=int(raw.get("seed", 0)),
        output_dir=str(raw.get("output_dir", "runs/out")),
        dataset=dict(raw.get("dataset", {})),
        victim=dict(raw.get("victim", {})),
        oracle=dict(raw.get("oracle", {})),
        dast=dict(raw.get("dast", {})),
        attacks=[dict(a) for a in attacks],
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid TOML: {exc}")
    return parse_config(raw)


def serialize_config(config: ExperimentConfig) -> dict:
    return {
        "seed": config.seed,
        "output_dir": config.output_dir,
        "dataset": dict(config.dataset),
        "victim": dict(config.victim),
        "oracle": dict(config.oracle),
        "dast": dict(config.dast),
        "attack": [dict(a) for a in config.attacks],
    }


def write_config_mirror(config: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(serialize_config(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def oracle_mode_name(config: ExperimentConfig) -> str:
    return config.oracle.get("mode", "prob")


def scenario_name(config: ExperimentConfig) -> str:
    return "DaST-P" if oracle_mode_name(config) == "prob" else "DaST-L"
