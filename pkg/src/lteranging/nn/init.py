"""Parameter initializers. All take an explicit ``numpy.random.Generator``."""

from __future__ import annotations

import numpy as np


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_out, fan_in))


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def embedding_table(rng: np.random.Generator, vocab: int, dim: int, std: float = 0.05):
    return rng.normal(0.0, std, size=(vocab, dim))


def recurrent_params(rng: np.random.Generator, n_gates: int, hidden: int, input_dim: int,
                     forget_gate: int | None = None):
    """Returns ``(w, u, b)``; gate ``forget_gate`` gets bias 1."""
    w = np.stack([glorot_uniform(rng, hidden, input_dim) for _ in range(n_gates)])
    u = np.stack([orthogonal(rng, hidden) for _ in range(n_gates)])
    b = np.zeros((n_gates, hidden))
    if forget_gate is not None:
        b[forget_gate] = 1.0
    return w, u, b
