"""Layers with hand-derived gradients.

Recurrent layers are batch-first: inputs ``(B, T, D)``, hidden states
``(B, T, H)``. A 2-D input ``(T, D)`` is treated as a batch of one and the
outputs are squeezed back. Parameter gradients are sums over the batch;
averaging belongs to the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import expit


class ShapeError(ValueError):
    pass


def sigmoid(x):
    return expit(x)


# ---------------------------------------------------------------------------
# Embedding


def embedding_forward(table: np.ndarray, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= table.shape[0]):
        raise IndexError(f"token outside vocabulary of size {table.shape[0]}")
    return table[tokens]


def embedding_backward(table_shape, tokens, grad_out: np.ndarray) -> np.ndarray:
    grad = np.zeros(table_shape)
    np.add.at(grad, np.asarray(tokens).ravel(), grad_out.reshape(-1, table_shape[1]))
    return grad


# ---------------------------------------------------------------------------
# Dense / ReLU / dropout


def dense_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``y = x W^T + b`` with ``W`` shaped (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense input width {x.shape[-1]} != {w.shape[1]}")
    return x @ w.T + b


def dense_backward(w: np.ndarray, x: np.ndarray, grad_y: np.ndarray):
    """Returns ``(grad_w, grad_b, grad_x)``."""
    if grad_y.shape[-1] != w.shape[0]:
        raise ShapeError("dense gradient width mismatch")
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    return g2.T @ x2, g2.sum(axis=0), grad_y @ w


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return grad_y * (x > 0)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None = None,
            training: bool = True):
    """Inverted dropout. Returns ``(output, mask)``; mask is None when inactive."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(mask, grad_y: np.ndarray) -> np.ndarray:
    return grad_y if mask is None else grad_y * mask


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmParams:
    """Gate order i, f, g (candidate), o."""

    w: np.ndarray  # (4, H, D)
    u: np.ndarray  # (4, H, H)
    b: np.ndarray  # (4, H)

    def __post_init__(self):
        g, h, _ = self.w.shape
        if g != 4 or self.u.shape != (4, h, h) or self.b.shape != (4, h):
            raise ShapeError(
                f"inconsistent LSTM shapes w{self.w.shape} u{self.u.shape} b{self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.w.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w.shape[2]


def _batch3(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"expected (T, D) or (B, T, D) input, got {x.shape}")
    return x, False


def lstm_scan(u: np.ndarray, xw: np.ndarray, h0=None, c0=None):
    """Recurrence given precomputed input projections ``xw`` (B, T, 4H)."""
    bsz, steps, h4 = xw.shape
    hsz = h4 // 4
    uf = u.reshape(h4, hsz)
    h = np.zeros((bsz, hsz)) if h0 is None else np.broadcast_to(h0, (bsz, hsz)).astype(float)
    c = np.zeros((bsz, hsz)) if c0 is None else np.broadcast_to(c0, (bsz, hsz)).astype(float)
    hs = np.empty((bsz, steps + 1, hsz))
    cs = np.empty((bsz, steps + 1, hsz))
    gates = np.empty((bsz, steps, h4))
    tanh_c = np.empty((bsz, steps, hsz))
    hs[:, 0] = h
    cs[:, 0] = c
    for t in range(steps):
        a = gates[:, t]
        np.matmul(h, uf.T, out=a)
        a += xw[:, t]
        expit(a[:, :2 * hsz], out=a[:, :2 * hsz])
        np.tanh(a[:, 2 * hsz:3 * hsz], out=a[:, 2 * hsz:3 * hsz])
        expit(a[:, 3 * hsz:], out=a[:, 3 * hsz:])
        i, f, g, o = a[:, :hsz], a[:, hsz:2 * hsz], a[:, 2 * hsz:3 * hsz], a[:, 3 * hsz:]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cs[:, t + 1] = c
        tanh_c[:, t] = tc
        hs[:, t + 1] = h
    return hs, dict(gates=gates, cs=cs, tanh_c=tanh_c, hs=hs, u=u)


def lstm_scan_backward(scan: dict, grad_hidden: np.ndarray, grad_h_last=None,
                       grad_c_last=None):
    """Returns ``(grad_xw, grad_u, grad_h0, grad_c0)`` for :func:`lstm_scan`."""
    gates, cs, tanh_c, hs, u = (scan[k] for k in ("gates", "cs", "tanh_c", "hs", "u"))
    bsz, steps, h4 = gates.shape
    hsz = h4 // 4
    if grad_hidden.shape != (bsz, steps, hsz):
        raise ShapeError(f"grad_hidden shape {grad_hidden.shape} != {(bsz, steps, hsz)}")
    uf = u.reshape(h4, hsz)
    dh_next = np.zeros((bsz, hsz)) if grad_h_last is None else np.array(grad_h_last, dtype=float)
    dc_next = np.zeros((bsz, hsz)) if grad_c_last is None else np.array(grad_c_last, dtype=float)
    da_all = np.empty((bsz, steps, h4))
    for t in range(steps - 1, -1, -1):
        a = gates[:, t]
        i, f, g, o = a[:, :hsz], a[:, hsz:2 * hsz], a[:, 2 * hsz:3 * hsz], a[:, 3 * hsz:]
        tc = tanh_c[:, t]
        dh = grad_hidden[:, t] + dh_next
        dc = dh * o * (1 - tc * tc) + dc_next
        da = da_all[:, t]
        da[:, :hsz] = dc * g * i * (1 - i)
        da[:, hsz:2 * hsz] = dc * cs[:, t] * f * (1 - f)
        da[:, 2 * hsz:3 * hsz] = dc * i * (1 - g * g)
        da[:, 3 * hsz:] = dh * tc * o * (1 - o)
        dh_next = da @ uf
        dc_next = dc * f
    du = da_all.reshape(-1, h4).T @ hs[:, :-1].reshape(-1, hsz)
    return da_all, du.reshape(u.shape), dh_next, dc_next


def lstm_forward(params: LstmParams, inputs: np.ndarray, h0=None, c0=None):
    """Returns ``(hidden_states, cache)``; hidden_states is (B, T, H)."""
    x, squeeze = _batch3(inputs)
    d = x.shape[2]
    if d != params.input_dim:
        raise ShapeError(f"LSTM input width {d} != {params.input_dim}")
    h4 = 4 * params.hidden
    xw = x @ params.w.reshape(h4, d).T + params.b.reshape(-1)
    hs, scan = lstm_scan(params.u, xw, h0, c0)
    hs = hs[:, 1:]
    cache = dict(x=x, scan=scan, params=params, squeeze=squeeze)
    return (hs[0] if squeeze else hs), cache


def lstm_backward(cache: dict, grad_hidden: np.ndarray, grad_h_last=None, grad_c_last=None):
    """BPTT. Returns ``(grads, grad_inputs, grad_h0, grad_c0)``.

    ``grads`` is an :class:`LstmParams` of parameter gradients.
    """
    params, x = cache["params"], cache["x"]
    d = x.shape[2]
    hsz = params.hidden
    gh = np.asarray(grad_hidden, dtype=float)
    if cache["squeeze"] and gh.ndim == 2:
        gh = gh[None]
    da_all, du, dh0, dc0 = lstm_scan_backward(cache["scan"], gh, grad_h_last, grad_c_last)
    flat = da_all.reshape(-1, 4 * hsz)
    dw = flat.T @ x.reshape(-1, d)
    db = flat.sum(axis=0)
    dx = da_all @ params.w.reshape(4 * hsz, d)
    grads = LstmParams(dw.reshape(4, hsz, d), du, db.reshape(4, hsz))
    if cache["squeeze"]:
        return grads, dx[0], dh0[0], dc0[0]
    return grads, dx, dh0, dc0


def segment_sum(index: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[k] = sum(rows[index == k])`` via a sparse indicator product."""
    index = np.asarray(index).ravel()
    rows = rows.reshape(len(index), -1)
    indicator = sparse.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))),
                                  shape=(n, len(index)))
    return np.asarray(indicator @ rows)


# ---------------------------------------------------------------------------
# GRU


@dataclass
class GruParams:
    """Gate order z (update), r (reset), n (candidate)."""

    w: np.ndarray  # (3, H, D)
    u: np.ndarray  # (3, H, H)
    b: np.ndarray  # (3, H)

    def __post_init__(self):
        g, h, _ = self.w.shape
        if g != 3 or self.u.shape != (3, h, h) or self.b.shape != (3, h):
            raise ShapeError("inconsistent GRU shapes")

    @property
    def hidden(self) -> int:
        return self.w.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w.shape[2]


def gru_forward(params: GruParams, inputs: np.ndarray, h0=None):
    """``h' = (1 - z) n + z h`` with ``n = tanh(W_n x + U_n (r h) + b_n)``."""
    x, squeeze = _batch3(inputs)
    bsz, steps, d = x.shape
    hsz = params.hidden
    if d != params.input_dim:
        raise ShapeError(f"GRU input width {d} != {params.input_dim}")
    xw = x @ params.w.reshape(3 * hsz, d).T + params.b.reshape(-1)
    uz, ur, un = params.u
    h = np.zeros((bsz, hsz)) if h0 is None else np.broadcast_to(h0, (bsz, hsz)).astype(float)
    hs = np.empty((bsz, steps, hsz))
    h_prev = np.empty_like(hs)
    zs, rs, ns = np.empty_like(hs), np.empty_like(hs), np.empty_like(hs)
    uzr = np.concatenate([uz, ur])
    for t in range(steps):
        h_prev[:, t] = h
        zr = sigmoid(xw[:, t, :2 * hsz] + h @ uzr.T)
        z, r = zr[:, :hsz], zr[:, hsz:]
        n = np.tanh(xw[:, t, 2 * hsz:] + (r * h) @ un.T)
        h = (1 - z) * n + z * h
        zs[:, t], rs[:, t], ns[:, t], hs[:, t] = z, r, n, h
    cache = dict(x=x, h_prev=h_prev, z=zs, r=rs, n=ns, params=params, squeeze=squeeze)
    return (hs[0] if squeeze else hs), cache


def gru_backward(cache: dict, grad_hidden: np.ndarray, grad_h_last=None):
    """Returns ``(grads, grad_inputs, grad_h0)``."""
    params = cache["params"]
    x, h_prev, zs, rs, ns = (cache[k] for k in ("x", "h_prev", "z", "r", "n"))
    bsz, steps, d = x.shape
    hsz = params.hidden
    gh = np.asarray(grad_hidden, dtype=float)
    if cache["squeeze"] and gh.ndim == 2:
        gh = gh[None]
    if gh.shape != (bsz, steps, hsz):
        raise ShapeError(f"grad_hidden shape {gh.shape} != {(bsz, steps, hsz)}")
    uz, ur, un = params.u
    dh_next = np.zeros((bsz, hsz)) if grad_h_last is None else np.array(grad_h_last, dtype=float)
    da_all = np.empty((bsz, steps, 3 * hsz))
    du = np.zeros((3, hsz, hsz))
    for t in range(steps - 1, -1, -1):
        z, r, n, hp = zs[:, t], rs[:, t], ns[:, t], h_prev[:, t]
        dh = gh[:, t] + dh_next
        dan = dh * (1 - z) * (1 - n * n)
        drh = dan @ un
        daz = dh * (hp - n) * z * (1 - z)
        dar = drh * hp * r * (1 - r)
        da_all[:, t, :hsz] = daz
        da_all[:, t, hsz:2 * hsz] = dar
        da_all[:, t, 2 * hsz:] = dan
        du[0] += daz.T @ hp
        du[1] += dar.T @ hp
        du[2] += dan.T @ (r * hp)
        dh_next = dh * z + drh * r + daz @ uz + dar @ ur
    flat = da_all.reshape(-1, 3 * hsz)
    dw = (flat.T @ x.reshape(-1, d)).reshape(3, hsz, d)
    db = flat.sum(axis=0).reshape(3, hsz)
    dx = da_all @ params.w.reshape(3 * hsz, d)
    grads = GruParams(dw, du, db)
    if cache["squeeze"]:
        return grads, dx[0], dh_next[0]
    return grads, dx, dh_next
