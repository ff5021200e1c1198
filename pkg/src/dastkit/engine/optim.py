"""Parameter update rules: plain SGD and the adaptive-moment rule (Adam)."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import EmptyGradientError, Parameter


class Optimizer:
    """Base class holding the parameter set and the populated-gradient guard."""

    def __init__(self, params: Iterable[Parameter]):
        self.params: Sequence[Parameter] = list(params)
        if not self.params:
            raise ValueError("optimizer needs at least one parameter")

    def _populated(self) -> list[Parameter]:
        live = [p for p in self.params if p.grad_populated]
        if not live:
            raise EmptyGradientError(
                "optimizer step before any backward pass populated gradients")
        return live

    def step(self) -> None:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array map of internal state, for checkpointing."""
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass


class Sgd(Optimizer):
    """Plain stochastic gradient descent, no momentum."""

    def __init__(self, params: Iterable[Parameter], lr: float):
        super().__init__(params)
        self.lr = float(lr)

    def step(self) -> None:
        for p in self._populated():
            p.data -= self.lr * p.grad


class Adam(Optimizer):
    """Adaptive-moment estimation with bias correction.

    First-step update magnitude is ~lr regardless of the gradient scale, which
    keeps the two-player training loop stable at initialization.
    """

    def __init__(self, params: Iterable[Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        live = self._populated()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        live_ids = {id(p) for p in live}
        for p, m, v in zip(self.params, self._m, self._v):
            if id(p) not in live_ids:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bias1
            vhat = v / bias2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self._m, self._v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self._m[i] = arrays[f"m{i}"].astype(self._m[i].dtype).reshape(self._m[i].shape)
            self._v[i] = arrays[f"v{i}"].astype(self._v[i].dtype).reshape(self._v[i].shape)


def make_optimizer(kind: str, params: Iterable[Parameter], lr: float, **kwargs) -> Optimizer:
    if kind == "sgd":
        return Sgd(params, lr)
    if kind == "adam":
        return Adam(params, lr, **kwargs)
    raise ValueError(f"unknown optimizer kind: {kind!r}")
