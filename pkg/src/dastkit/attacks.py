"""White-box gradient attacks on the substitute: FGSM, BIM, PGD.

All three share one iteration core: ascend (or descend, when targeted) the
sign of the input gradient of cross-entropy, projecting every iterate onto
the L-infinity ball around the original input and the clamp range. The
substitute's own parameters are frozen for the duration, and no function
here ever touches an oracle.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .engine import ConfigurationError, Tape, Tensor, ops

METHODS = ("fgsm", "bim", "pgd")
# "cw" is reserved in report schemas but has no implementation here


@dataclass
class AttackConfig:
    method: str
    epsilon: float = 0.3
    step_size: float = 0.05
    steps: int = 20
    targeted: bool = False
    target_label: Optional[int] = None
    clamp: Tuple[float, float] = (0.0, 1.0)
    random_start: bool = True  # pgd only; the test hook for the bim reduction

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(
                f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.method == "fgsm":
            # single full-size step by definition
            self.steps = 1
            self.step_size = self.epsilon
        if self.epsilon == 0:
            self.step_size = 0.0  # degenerate ball: the identity attack
        elif not 0 < self.step_size <= self.epsilon:
            raise ConfigurationError(
                f"need 0 < step_size <= epsilon, got step_size {self.step_size}, "
                f"epsilon {self.epsilon}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.targeted and self.target_label is None:
            raise ConfigurationError("targeted attack requires a target_label")
        if self.clamp[0] >= self.clamp[1]:
            raise ConfigurationError(f"empty clamp range {self.clamp}")


@dataclass
class AdvExample:
    """One attacked batch: originals, adversarials, and their perturbations."""

    original: np.ndarray
    adversarial: np.ndarray
    perturbation: np.ndarray
    perturbation_l2: np.ndarray  # per-image Frobenius norm
    substitute_label: np.ndarray


@contextmanager
def _frozen(model):
    flags = [(p, p.trainable) for p in model.parameters()]
    for p, _ in flags:
        p.trainable = False
    try:
        yield
    finally:
        for p, was in flags:
            p.trainable = was


def _input_gradient(model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = ops.cross_entropy(model.forward(xt), labels)
    g = tape.backward(loss).wrt(xt)
    return g if g is not None else np.zeros_like(x)


def _finish(model, x0: np.ndarray, x_adv: np.ndarray) -> AdvExample:
    eps = x_adv - x0
    l2 = np.sqrt((eps.reshape(eps.shape[0], -1) ** 2).sum(axis=1))
    logits = model.forward(Tensor(x_adv))
    return AdvExample(
        original=x0,
        adversarial=x_adv,
        perturbation=eps,
        perturbation_l2=l2,
        substitute_label=ops.argmax_rows(logits),
    )


def _iterate(model, x0: np.ndarray, labels: np.ndarray, config: AttackConfig,
             start: np.ndarray) -> AdvExample:
    lo, hi = config.clamp
    direction = -1.0 if config.targeted else 1.0
    x_adv = np.clip(np.clip(start, x0 - config.epsilon, x0 + config.epsilon), lo, hi)
    with _frozen(model):
        for _ in range(config.steps):
            g = _input_gradient(model, x_adv, labels)
            x_adv = x_adv + direction * config.step_size * np.sign(g)
            x_adv = np.clip(x_adv, x0 - config.epsilon, x0 + config.epsilon)
            x_adv = np.clip(x_adv, lo, hi)
        return _finish(model, x0, x_adv.astype(x0.dtype))


def _as_batch(x) -> np.ndarray:
    return x.data.copy() if isinstance(x, Tensor) else np.array(x)


def _attack_labels(x0: np.ndarray, labels, config: AttackConfig) -> np.ndarray:
    if config.targeted:
        return np.full(x0.shape[0], config.target_label, dtype=np.int64)
    return np.asarray(labels, dtype=np.int64)


def fgsm(model, x, labels, config: AttackConfig) -> AdvExample:
    """Single signed-gradient step of size epsilon."""
    x0 = _as_batch(x)
    return _iterate(model, x0, _attack_labels(x0, labels, config), config, x0)


def bim(model, x, labels, config: AttackConfig) -> AdvExample:
    """Iterated FGSM with per-step projection onto the epsilon ball."""
    x0 = _as_batch(x)
    return _iterate(model, x0, _attack_labels(x0, labels, config), config, x0)


def pgd(model, x, labels, config: AttackConfig,
        rng: Optional[np.random.Generator] = None) -> AdvExample:
    """BIM from a uniformly random point inside the epsilon ball."""
    x0 = _as_batch(x)
    start = x0
    if config.random_start and config.epsilon > 0:
        rng = rng or np.random.default_rng(0)
        start = x0 + rng.uniform(-config.epsilon, config.epsilon,
                                 size=x0.shape).astype(x0.dtype)
    return _iterate(model, x0, _attack_labels(x0, labels, config), config, start)


def run_attack(model, x, labels, config: AttackConfig,
               rng: Optional[np.random.Generator] = None) -> AdvExample:
    if config.method == "fgsm":
        return fgsm(model, x, labels, config)
    if config.method == "bim":
        return bim(model, x, labels, config)
    return pgd(model, x, labels, config, rng)
