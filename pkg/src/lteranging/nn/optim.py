"""Adam and SGD with exponential learning-rate decay.

Both operate in place on a ``dict[str, ndarray]`` of parameters and keep
all mutable state in a plain dict so it can be checkpointed and restored.
"""

from __future__ import annotations

import math

import numpy as np


def _check(params: dict, grads: dict):
    if params.keys() != grads.keys():
        raise ValueError(f"gradient keys {sorted(grads)} != parameter keys {sorted(params)}")
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ValueError(f"gradient for {k!r} has shape {grads[k].shape}, expected {p.shape}")


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        _check(params, grads)
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for k, p in params.items():
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step_count,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.lr, self.beta1, self.beta2, self.eps = (
            state["lr"], state["beta1"], state["beta2"], state["eps"])
        self.step_count = int(state["step"])
        self.m = {k: np.array(v, dtype=float) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=float) for k, v in state["v"].items()}


class SgdDecay:
    """Plain SGD with ``lr(t) = lr0 * rate ** (t / decay_steps)``."""

    def __init__(self, lr0: float = 0.1, decay_steps: int = 1000, decay_rate: float = 0.96,
                 staircase: bool = False):
        if decay_steps <= 0:
            raise ValueError("decay_steps must be positive")
        self.lr0, self.decay_steps, self.decay_rate = lr0, decay_steps, decay_rate
        self.staircase = staircase
        self.step_count = 0

    def learning_rate(self, t: int | None = None) -> float:
        t = self.step_count if t is None else t
        e = t / self.decay_steps
        if self.staircase:
            e = math.floor(e)
        return self.lr0 * self.decay_rate ** e

    def step(self, params: dict, grads: dict) -> None:
        _check(params, grads)
        lr = self.learning_rate()
        for k, p in params.items():
            p -= lr * grads[k]
        self.step_count += 1

    def state_dict(self) -> dict:
        return {"kind": "sgd-decay", "lr0": self.lr0, "decay_steps": self.decay_steps,
                "decay_rate": self.decay_rate, "staircase": self.staircase,
                "step": self.step_count}

    def load_state_dict(self, state: dict) -> None:
        self.lr0, self.decay_steps = state["lr0"], int(state["decay_steps"])
        self.decay_rate, self.staircase = state["decay_rate"], bool(state["staircase"])
        self.step_count = int(state["step"])


def make_optimizer(name: str, **kw):
    if name == "adam":
        return Adam(**kw)
    if name in ("sgd-decay", "sgd_decay"):
        return SgdDecay(**kw)
    raise ValueError(f"unknown optimizer {name!r}; expected adam or sgd-decay")
