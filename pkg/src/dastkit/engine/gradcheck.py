"""Finite-difference verification of analytic gradients.

The checker is the package's independent oracle for every adjoint: it
perturbs sampled parameter entries by +/-epsilon, recomputes the loss, and
compares the central difference against the gradient from a backward pass.
Run it on float64 models; float32 rounding drowns the comparison.

Probe points where the forward and backward one-sided slopes disagree are
skipped: a relu-style kink inside the probe interval makes the central
difference meaningless there, no matter how correct the gradient is.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor


def relative_error(analytic: float, numeric: float) -> float:
    """|a-n| scaled by max magnitude; absolute below 1e-8 to tame tiny values."""
    diff = abs(analytic - numeric)
    denom = max(abs(analytic), abs(numeric))
    if denom < 1e-8:
        return diff
    return diff / denom


# one-sided slopes disagreeing by more than this mark the entry unverifiable
SMOOTHNESS_TOL = 2e-4


def _nonsmooth(plus: float, minus: float, base: float, epsilon: float) -> bool:
    fwd = (plus - base) / epsilon
    bwd = (base - minus) / epsilon
    scale = max(abs(fwd), abs(bwd), 1e-6)
    return abs(fwd - bwd) / scale > SMOOTHNESS_TOL


def finite_difference_check(
    model,
    x: Tensor,
    loss_fn: Callable[[object, Tensor], Tensor],
    epsilon: float = 1e-5,
    samples_per_param: int = 8,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Return the worst relative error over sampled parameter entries.

    ``loss_fn(model, x)`` must rebuild the scalar loss from scratch on each
    call; it is evaluated under a fresh tape for the analytic gradient and
    without one for the perturbed evaluations.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    rng = rng or np.random.default_rng(0)
    params: Sequence[Parameter] = list(model.parameters())

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn(model, x)
    tape.backward(loss)

    base = loss_fn(model, x).item()
    worst = 0.0
    for p in params:
        if not p.trainable:
            continue
        flat_value = p.data.reshape(-1)
        flat_grad = p.grad.reshape(-1)
        count = min(samples_per_param, flat_value.size)
        picks = rng.choice(flat_value.size, size=count, replace=False)
        for idx in picks:
            saved = flat_value[idx]
            flat_value[idx] = saved + epsilon
            plus = loss_fn(model, x).item()
            flat_value[idx] = saved - epsilon
            minus = loss_fn(model, x).item()
            flat_value[idx] = saved
            if _nonsmooth(plus, minus, base, epsilon):
                continue
            numeric = (plus - minus) / (2.0 * epsilon)
            worst = max(worst, relative_error(float(flat_grad[idx]), numeric))
    return worst


def check_input_gradient(
    forward: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-5,
    samples: int = 16,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Finite-difference check of d(loss)/d(input) for a scalar-valued forward."""
    rng = rng or np.random.default_rng(0)
    x.requires_grad = True
    with Tape() as tape:
        loss = forward(x)
    grads = tape.backward(loss)
    gx = grads.wrt(x)
    if gx is None:
        gx = np.zeros_like(x.data)

    base = forward(x).item()
    flat_value = x.data.reshape(-1)
    flat_grad = gx.reshape(-1)
    worst = 0.0
    picks = rng.choice(flat_value.size, size=min(samples, flat_value.size), replace=False)
    for idx in picks:
        saved = flat_value[idx]
        flat_value[idx] = saved + epsilon
        plus = forward(x).item()
        flat_value[idx] = saved - epsilon
        minus = forward(x).item()
        flat_value[idx] = saved
        if _nonsmooth(plus, minus, base, epsilon):
            continue
        numeric = (plus - minus) / (2.0 * epsilon)
        worst = max(worst, relative_error(float(flat_grad[idx]), numeric))
    return worst
