"""SGD-with-momentum, ADAM, and sign updates over named arrays.

Updates mutate the parameter arrays in place so that tensors wrapping
them see the new values on the next forward pass. All updates minimize;
``maximize_step`` is the single ascent helper used for perturbations
(a maximizing step is the minimizing step on the negated gradient).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

OPTIMIZER_TOKENS = ("adam", "sgd", "sign")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def make_state(token: str):
    if token == "sgd":
        return SgdState()
    if token == "adam":
        return AdamState()
    if token == "sign":
        return None
    raise ConfigError(f"unknown optimizer {token!r}, expected one of {OPTIMIZER_TOKENS}")


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: SgdState, lr: float, momentum: float = 0.0) -> None:
    """v <- momentum*v + g; p <- p - lr*v."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if momentum != 0.0:
            v = state.velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            state.velocity[name] = v
        else:
            v = g
        p -= lr * v


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState, lr: float, beta1: float = ADAM_BETA1,
                beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """Bias-corrected ADAM step."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def sign_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state, lr: float) -> None:
    """p <- p - lr*sign(g)."""
    for name, p in params.items():
        p -= lr * np.sign(grads[name])


def minimize_step(token: str, params, grads, state, lr: float, momentum: float = 0.0) -> None:
    if token == "sgd":
        sgd_update(params, grads, state, lr, momentum)
    elif token == "adam":
        adam_update(params, grads, state, lr)
    elif token == "sign":
        sign_update(params, grads, state, lr)
    else:
        raise ConfigError(f"unknown optimizer {token!r}, expected one of {OPTIMIZER_TOKENS}")


def maximize_step(token: str, params, grads, state, lr: float) -> None:
    """Ascent on the loss: one minimizing update fed the negated gradients."""
    minimize_step(token, params, {k: -g for k, g in grads.items()}, state, lr)
