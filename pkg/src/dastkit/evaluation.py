"""Measurement protocol for transfer attacks: who is eligible, how often the
victim flips, how far the perturbations reach, and how closely the substitute
tracks the victim. Also exports training curves for offline plotting."""

import dataclasses
import json
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .attacks import AttackConfig, run_attack
from .engine import ConfigurationError
from .nets import forward_batched
from .oracle import QueryLedger

SCENARIOS = ("DaST-L", "DaST-P", "pretrained-baseline")


class EmptyEligibleSetError(RuntimeError):
    """No sample qualifies for the attack, so a success rate is undefined."""


@dataclasses.dataclass
class EligibleSet:
    """Samples that qualify for attack under the chosen setting, together
    with the victim's clean answers on them."""

    x: np.ndarray
    labels: np.ndarray
    victim_labels: np.ndarray
    targeted: bool
    target_label: Optional[int] = None

    def __post_init__(self):
        if len(self.x) != len(self.labels) != len(self.victim_labels):
            raise ConfigurationError("eligible set arrays disagree on length")
        if not self.targeted:
            # protocol guard: non-targeted eligibility means victim-correct
            if (self.victim_labels != self.labels).any():
                raise ConfigurationError(
                    "non-targeted eligible set contains victim-misclassified "
                    "samples")
        elif self.target_label is None:
            raise ConfigurationError("targeted eligible set needs its label")

    def __len__(self):
        return len(self.x)


@dataclasses.dataclass
class AttackReport:
    scenario: str
    attack: str
    targeted: bool
    n: int
    m: int
    mean_l2: float
    epsilon: float
    ledger: QueryLedger
    target_label: Optional[int] = None
    mean_l2_success: Optional[float] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(
                f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not 0 <= self.n <= self.m:
            raise ConfigurationError(
                f"invalid counts: n={self.n} outside [0, m={self.m}]")
        if self.mean_l2 < 0:
            raise ConfigurationError("mean perturbation distance is negative")

    @property
    def success_rate(self) -> float:
        return self.n / self.m

    @property
    def success_rate_exact(self) -> Tuple[int, int]:
        return (self.n, self.m)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "attack": self.attack,
            "targeted": self.targeted,
            "n": self.n,
            "m": self.m,
            "success_rate": self.success_rate,
            "mean_l2": self.mean_l2,
            "queries_train": self.ledger.train_samples,
            "queries_eval": self.ledger.eval_samples,
        }


def eligible_set(oracle, dataset: Tuple[np.ndarray, np.ndarray],
                 targeted: bool = False,
                 target_label: Optional[int] = None) -> EligibleSet:
    """Select the attackable subset: victim-correct samples (non-targeted) or
    samples the victim does not already place at the target (targeted).
    Queries are billed to the evaluation phase."""
    x, labels = dataset
    labels = np.asarray(labels)
    if targeted and target_label is None:
        raise ConfigurationError("targeted selection needs target_label")
    response = oracle.query(x, phase="eval")
    if targeted:
        keep = response.labels != target_label
    else:
        keep = response.labels == labels
    if not keep.any():
        setting = f"targeted at {target_label}" if targeted else "non-targeted"
        raise EmptyEligibleSetError(
            f"no eligible samples for the {setting} setting "
            f"(victim disqualified all {len(labels)})")
    return EligibleSet(x=x[keep], labels=labels[keep],
                       victim_labels=response.labels[keep],
                       targeted=targeted, target_label=target_label)


def attack_success_rate(substitute, oracle, eligible: EligibleSet,
                        config: AttackConfig, scenario: str,
                        rng: Optional[np.random.Generator] = None
                        ) -> AttackReport:
    """Craft one adversarial example per eligible sample on the substitute,
    spend one oracle query per example, and report the transfer rate."""
    if len(eligible) == 0:
        raise EmptyEligibleSetError("cannot attack an empty eligible set")
    if config.targeted != eligible.targeted:
        raise ConfigurationError(
            "attack config and eligible set disagree on the targeted flag")
    if config.targeted and config.target_label != eligible.target_label:
        raise ConfigurationError(
            "attack config and eligible set disagree on the target label")
    adv = run_attack(substitute, eligible.x, eligible.labels, config, rng=rng)
    response = oracle.query(adv.adversarial, phase="eval")
    if config.targeted:
        success = response.labels == config.target_label
    else:
        success = response.labels != eligible.labels
    n = int(success.sum())
    mean_l2 = float(adv.perturbation_l2.mean())
    mean_success = float(adv.perturbation_l2[success].mean()) if n else None
    return AttackReport(scenario=scenario, attack=config.method,
                        targeted=config.targeted, n=n, m=len(eligible),
                        mean_l2=mean_l2, epsilon=config.epsilon,
                        ledger=oracle.snapshot_ledger(),
                        target_label=config.target_label,
                        mean_l2_success=mean_success)


def random_sign_baseline(oracle, eligible: EligibleSet, epsilon: float,
                         rng: np.random.Generator,
                         clamp: Tuple[float, float] = (0.0, 1.0)) -> float:
    """Success rate of blind noise: flip each pixel by +-epsilon at random.
    The floor any gradient-guided transfer attack has to beat."""
    signs = rng.integers(0, 2, size=eligible.x.shape) * 2 - 1
    x_noise = np.clip(eligible.x + epsilon * signs.astype(eligible.x.dtype),
                      clamp[0], clamp[1]).astype(eligible.x.dtype)
    response = oracle.query(x_noise, phase="eval")
    if eligible.targeted:
        return float(np.mean(response.labels == eligible.target_label))
    return float(np.mean(response.labels != eligible.labels))


@dataclasses.dataclass
class Agreement:
    vs_victim: float
    vs_truth: Optional[float] = None


def agreement(substitute, oracle, x: np.ndarray,
              labels: Optional[np.ndarray] = None) -> Agreement:
    """Fraction of samples where the substitute's argmax matches the
    victim's; also against true labels when provided."""
    if len(x) == 0:
        raise ConfigurationError("agreement needs a non-empty sample set")
    response = oracle.query(x, phase="eval")
    sub_labels = forward_batched(substitute, x).argmax(axis=1)
    vs_victim = float(np.mean(sub_labels == response.labels))
    vs_truth = None
    if labels is not None:
        vs_truth = float(np.mean(sub_labels == np.asarray(labels)))
    return Agreement(vs_victim=vs_victim, vs_truth=vs_truth)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_curves(trace, path: str) -> None:
    """One CSV row per eval point: oracle samples spent, probe accuracy,
    probe attack success. Deterministic bytes for a given trace."""
    lines = ["samples,acc,att"]
    for point in trace.records:
        lines.append(",".join([str(point.ledger.total_samples),
                               _cell(point.acc), _cell(point.att)]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report_json(reports: Sequence[AttackReport], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_json() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")


_COLUMNS = ("scenario", "attack", "setting", "n/m", "success", "mean_l2")


def format_table(reports: Sequence[AttackReport]) -> str:
    """Aligned plain-text summary, one row per report."""
    rows = []
    for r in reports:
        setting = f"targeted@{r.target_label}" if r.targeted else "non-targeted"
        rows.append((r.scenario, r.attack, setting, f"{r.n}/{r.m}",
                     f"{r.success_rate:.4f}", f"{r.mean_l2:.4f}"))
    widths = [max(len(_COLUMNS[i]), *(len(row[i]) for row in rows))
              if rows else len(_COLUMNS[i]) for i in range(len(_COLUMNS))]
    out = ["  ".join(c.ljust(w) for c, w in zip(_COLUMNS, widths)).rstrip()]
    out.append("  ".join("-" * w for w in widths))
    for row in rows:
        out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(out) + "\n"
