"""SGD with momentum and Adam, updating parameters in place."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NonFiniteError, NumericsError, Parameter


@dataclass
class SGDMomentum:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            g = _grad(p)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = p.state.get("momentum")
            v = g.copy() if v is None else self.momentum * v + g
            update = self.lr * v
            _check(p, update)
            p.state["momentum"] = v.astype(p.data.dtype, copy=False)
            p.data -= update.astype(p.data.dtype, copy=False)
            p.grad = None


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            g = _grad(p)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            t = int(p.state.get("t", np.zeros(())).item()) + 1
            m = p.state.get("m", np.zeros_like(p.data))
            v = p.state.get("v", np.zeros_like(p.data))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            _check(p, update)
            p.state.update(m=m.astype(p.data.dtype, copy=False), v=v.astype(p.data.dtype, copy=False),
                           t=np.asarray(t))
            p.data -= update.astype(p.data.dtype, copy=False)
            p.grad = None


def _grad(p: Parameter) -> np.ndarray:
    if p.grad is None:
        raise NumericsError(f"parameter {p.name!r} has no gradient")
    return p.grad


def _check(p: Parameter, update: np.ndarray) -> None:
    if not np.isfinite(update).all():
        raise NonFiniteError(f"non-finite update for {p.name!r}")


def make_optimizer(spec: dict):
    """Build an optimizer from ``{"name": "sgd_momentum" | "adam", **hyperparameters}``."""
    spec = dict(spec)
    name = spec.pop("name")
    if name == "sgd_momentum":
        return SGDMomentum(**spec)
    if name == "adam":
        return Adam(**spec)
    raise ValueError(f"unknown optimizer {name!r}")


def optimizer_step(params: list[Parameter], optimizer) -> list[Parameter]:
    """Apply one update; ``optimizer`` is an optimizer object or a spec dict."""
    if isinstance(optimizer, dict):
        optimizer = make_optimizer(optimizer)
    optimizer.step(params)
    return params
