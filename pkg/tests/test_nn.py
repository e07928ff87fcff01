import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import CHECKS
from lteranging import nn
from lteranging.nn import init


@pytest.mark.parametrize("layer", sorted(CHECKS))
@pytest.mark.parametrize("seed", range(3))
def test_finite_difference(layer, seed):
    assert CHECKS[layer](seed) < 1e-6


# -- embedding --------------------------------------------------------------------


def test_embedding_identity_table_gives_one_hot_rows():
    out = nn.embedding_forward(np.eye(5), [4, 0, 4])
    assert np.array_equal(out, np.eye(5)[[4, 0, 4]])
    assert np.array_equal(out[0], out[2])


def test_embedding_gradient_counts_tokens():
    tokens = np.array([1, 3, 1, 1, 0])
    grad = nn.embedding_backward((4, 2), tokens, np.ones((5, 2)))
    assert np.array_equal(grad[:, 0], [1, 3, 0, 1])


def test_embedding_rejects_out_of_vocabulary():
    with pytest.raises(IndexError):
        nn.embedding_forward(np.zeros((4, 2)), [4])
    with pytest.raises(IndexError):
        nn.embedding_forward(np.zeros((4, 2)), [-1])


def test_segment_sum_matches_add_at():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 7, 50)
    rows = rng.normal(size=(50, 3))
    ref = np.zeros((7, 3))
    np.add.at(ref, idx, rows)
    assert np.allclose(nn.segment_sum(idx, rows, 7), ref, atol=1e-13)


# -- LSTM ---------------------------------------------------------------------------


def _sig(v):
    return 1 / (1 + math.exp(-v))


def scalar_lstm(w, u, b, xs, h0, c0):
    """Plain-Python LSTM, gate order i, f, g, o."""
    hsz = len(h0)
    h, c = list(h0), list(c0)
    out = []
    for x in xs:
        pre = [[b[k][j] + sum(w[k][j][d] * x[d] for d in range(len(x)))
                + sum(u[k][j][m] * h[m] for m in range(hsz)) for j in range(hsz)]
               for k in range(4)]
        i = [_sig(v) for v in pre[0]]
        f = [_sig(v) for v in pre[1]]
        g = [math.tanh(v) for v in pre[2]]
        o = [_sig(v) for v in pre[3]]
        c = [f[j] * c[j] + i[j] * g[j] for j in range(hsz)]
        h = [o[j] * math.tanh(c[j]) for j in range(hsz)]
        out.append(h)
    return np.array(out)


def test_lstm_matches_scalar_recompute():
    rng = np.random.default_rng(11)
    p = nn.LstmParams(rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 2)),
                      rng.normal(size=(4, 2)))
    x = rng.normal(size=(3, 2))
    h0, c0 = rng.normal(size=2), rng.normal(size=2)
    hs, _ = nn.lstm_forward(p, x, h0, c0)
    ref = scalar_lstm(p.w.tolist(), p.u.tolist(), p.b.tolist(), x.tolist(), h0, c0)
    assert np.max(np.abs(hs - ref)) < 1e-12


def test_lstm_zero_weights_give_zero_states():
    p = nn.LstmParams(np.zeros((4, 3, 2)), np.zeros((4, 3, 3)), np.zeros((4, 3)))
    hs, _ = nn.lstm_forward(p, np.zeros((5, 2)))
    assert not np.any(hs)


def test_lstm_carries_cell_state_when_input_gate_closed():
    b = np.zeros((4, 2))
    b[0], b[1] = -1e3, 1e3  # input gate shut, forget gate open
    p = nn.LstmParams(np.zeros((4, 2, 1)), np.zeros((4, 2, 2)), b)
    c_star = np.array([0.7, -1.2])
    _, cache = nn.lstm_forward(p, np.ones((6, 1)), None, c_star)
    assert np.allclose(cache["scan"]["cs"][0, 1:], c_star, atol=1e-12)


def test_lstm_zero_upstream_gradient():
    rng = np.random.default_rng(1)
    p = nn.LstmParams(rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 3)),
                      rng.normal(size=(4, 3)))
    _, cache = nn.lstm_forward(p, rng.normal(size=(2, 4, 2)))
    grads, dx, _, _ = nn.lstm_backward(cache, np.zeros((2, 4, 3)))
    assert not np.any(grads.w) and not np.any(grads.u) and not np.any(grads.b)
    assert not np.any(dx)


def test_lstm_cell_gradient_two_step_unroll():
    # no recurrent weights: dh_2/dc_0 = o_2 * tanh'(c_2) * f_2 * f_1
    rng = np.random.default_rng(5)
    p = nn.LstmParams(rng.normal(size=(4, 2, 1)), np.zeros((4, 2, 2)), rng.normal(size=(4, 2)))
    x = rng.normal(size=(2, 1))
    c0 = rng.normal(size=2)
    _, cache = nn.lstm_forward(p, x, None, c0)
    g = np.zeros((2, 2))
    g[1] = 1.0
    _, _, _, dc0 = nn.lstm_backward(cache, g)
    pre = p.w[:, :, 0][:, None, :] * x[None, :, 0, None] + p.b[:, None, :]
    f = 1 / (1 + np.exp(-pre[1]))
    i = 1 / (1 + np.exp(-pre[0]))
    gg = np.tanh(pre[2])
    o2 = 1 / (1 + np.exp(-pre[3][1]))
    c1 = f[0] * c0 + i[0] * gg[0]
    c2 = f[1] * c1 + i[1] * gg[1]
    expected = o2 * (1 - np.tanh(c2) ** 2) * f[1] * f[0]
    assert np.allclose(dc0, expected, atol=1e-14)


def test_lstm_shape_errors():
    with pytest.raises(nn.ShapeError):
        nn.LstmParams(np.zeros((3, 2, 2)), np.zeros((4, 2, 2)), np.zeros((4, 2)))
    p = nn.LstmParams(np.zeros((4, 2, 3)), np.zeros((4, 2, 2)), np.zeros((4, 2)))
    with pytest.raises(nn.ShapeError):
        nn.lstm_forward(p, np.zeros((5, 4)))
    _, cache = nn.lstm_forward(p, np.zeros((1, 5, 3)))
    with pytest.raises(nn.ShapeError):
        nn.lstm_backward(cache, np.zeros((1, 4, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 3.0))
def test_lstm_gates_and_cell_bounded(seed, x_bound):
    rng = np.random.default_rng(seed)
    p = nn.LstmParams(rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 3)),
                      rng.normal(size=(4, 3)))
    x = rng.uniform(-x_bound, x_bound, size=(2, 20, 2))
    _, cache = nn.lstm_forward(p, x)
    gates = cache["scan"]["gates"]
    sig = np.concatenate([gates[..., :6], gates[..., 9:]], axis=-1)
    assert np.all((sig > 0) & (sig < 1))
    f_max = gates[..., 3:6].max()
    # |c_t| <= f |c_{t-1}| + 1 keeps the cell below 1 / (1 - f_max)
    assert np.all(np.abs(cache["scan"]["cs"]) <= 1 / (1 - f_max) + 1e-9)


def test_forget_bias_initialized_to_one():
    p = init.recurrent_params(np.random.default_rng(0), 4, 5, 3, forget_gate=1)
    b = p[2] if isinstance(p, tuple) else p.b
    assert np.array_equal(b[1], np.ones(5))
    assert np.array_equal(np.delete(b, 1, axis=0), np.zeros((3, 5)))


def test_orthogonal_recurrent_init():
    q = init.orthogonal(np.random.default_rng(0), 6)
    assert np.allclose(q @ q.T, np.eye(6), atol=1e-12)


# -- dense, ReLU, dropout --------------------------------------------------------------


def test_relu_examples():
    x = np.array([-1.0, 0.0, 2.0])
    assert np.array_equal(nn.relu_forward(x), [0, 0, 2])
    assert np.array_equal(nn.relu_backward(x, np.ones(3)), [0, 0, 1])


def test_dense_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(nn.dense_forward(np.eye(4), np.zeros(4), x), x)
    with pytest.raises(nn.ShapeError):
        nn.dense_forward(np.eye(4), np.zeros(4), np.zeros((3, 5)))


def test_dense_finite_difference_tight():
    from gradcheck import check_dense
    assert max(check_dense(s) for s in range(5)) < 1e-8


def test_dropout_identity_paths():
    x = np.arange(6.0)
    assert nn.dropout(x, 0.0, np.random.default_rng(0))[0] is x
    out, mask = nn.dropout(x, 0.2, np.random.default_rng(0), training=False)
    assert out is x and mask is None
    with pytest.raises(ValueError):
        nn.dropout(x, 1.0, np.random.default_rng(0))


def test_dropout_fraction_and_expectation():
    x = np.ones(1_000_000)
    out, mask = nn.dropout(x, 0.2, np.random.default_rng(3))
    assert abs(np.mean(out == 0) - 0.2) < 0.002
    assert abs(np.mean(out) - 1.0) < 0.01
    assert np.allclose(out[out != 0], 1 / 0.8)


# -- losses ---------------------------------------------------------------------------


def test_rmse_examples():
    assert nn.rmse_loss([1.0, 2.0], [1.0, 2.0]) == (0.0, pytest.approx(np.zeros(2)))
    loss, _ = nn.rmse_loss([3.0, 4.0], [0.0, 0.0])
    assert loss == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert loss == pytest.approx(3.5355339059, abs=1e-9)
    with pytest.raises(ValueError):
        nn.rmse_loss([], [])
    with pytest.raises(ValueError):
        nn.rmse_loss([1.0], [1.0, 2.0])


def test_rmse_gradient_tight():
    from gradcheck import check_rmse
    assert max(check_rmse(s) for s in range(5)) < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1,
                max_size=20), st.randoms(use_true_random=False))
def test_rmse_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = nn.rmse_loss(*zip(*pairs))[0]
    b = nn.rmse_loss(*zip(*shuffled))[0]
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_mse_gradient():
    loss, grad = nn.mse_loss([1.0, 3.0], [0.0, 0.0])
    assert loss == 5.0
    assert np.allclose(grad, [1.0, 3.0])


# -- optimizers --------------------------------------------------------------------------


def test_adam_first_step_on_quadratic():
    x = {"x": np.array(1.0)}
    opt = nn.Adam(lr=1e-3)
    opt.step(x, {"x": 2 * x["x"]})
    # bias-corrected first step is lr * g / (|g| + eps) with g = 2
    assert abs(float(x["x"]) - (1 - 1e-3 * 2 / (2 + 1e-8))) < 1e-15
    assert abs(float(x["x"]) - 0.999) < 1e-9


def test_adam_zero_gradient_is_noop():
    p = {"a": np.arange(3.0)}
    nn.Adam().step(p, {"a": np.zeros(3)})
    assert np.array_equal(p["a"], np.arange(3.0))


def test_adam_converges_on_quadratic():
    x = {"x": np.array(1.0)}
    opt = nn.Adam(lr=1e-3)
    for _ in range(10_000):
        opt.step(x, {"x": 2 * x["x"]})
    assert abs(float(x["x"])) < 1e-3


def test_sgd_decay_schedule():
    opt = nn.SgdDecay(0.1, 1000, 0.96)
    for t, lr in ((0, 0.1), (1000, 0.096), (2000, 0.09216)):
        assert abs(opt.learning_rate(t) - lr) < 1e-12
    # continuous exponent by default, steps with the staircase flag
    assert opt.learning_rate(500) == pytest.approx(0.1 * 0.96 ** 0.5)
    assert nn.SgdDecay(0.1, 1000, 0.96, staircase=True).learning_rate(1999) == 0.096


def test_sgd_step_uses_current_rate():
    p = {"w": np.array([1.0])}
    opt = nn.SgdDecay(0.1, 1, 0.5)
    opt.step(p, {"w": np.array([1.0])})
    opt.step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(1 - 0.1 - 0.05)


@pytest.mark.parametrize("make", [lambda: nn.Adam(), lambda: nn.SgdDecay()])
def test_optimizer_shape_mismatch(make):
    with pytest.raises(ValueError):
        make().step({"a": np.zeros(2)}, {"a": np.zeros(3)})
    with pytest.raises(ValueError):
        make().step({"a": np.zeros(2)}, {"b": np.zeros(2)})


def _to_json(state):
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"shape": list(v.shape), "data": v.ravel().tolist()}
        return v
    return json.dumps(conv(state))


def _from_json(text):
    def conv(v):
        if isinstance(v, dict) and set(v) == {"shape", "data"}:
            return np.array(v["data"], dtype=float).reshape(v["shape"])
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    return conv(json.loads(text))


@pytest.mark.parametrize("name", ["adam", "sgd-decay"])
def test_optimizer_state_restore_is_bit_identical(name):
    rng = np.random.default_rng(0)
    target = rng.normal(size=(3, 2))

    def grads(p):
        return {"w": 2 * (p["w"] - target), "b": p["b"] - 1}

    p = {"w": np.zeros((3, 2)), "b": np.zeros(2)}
    opt = nn.make_optimizer(name)
    for _ in range(7):
        opt.step(p, grads(p))
    saved_params = _to_json(p)
    saved_state = _to_json(opt.state_dict())
    for _ in range(5):
        opt.step(p, grads(p))

    q = _from_json(saved_params)
    opt2 = nn.make_optimizer(name)
    opt2.load_state_dict(_from_json(saved_state))
    for _ in range(5):
        opt2.step(q, grads(q))
    for k in p:
        assert np.array_equal(p[k], q[k])


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        nn.make_optimizer("rmsprop")


# -- checkpoints ----------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4), "c": np.array(1.5)}
    path = nn.save_checkpoint(tmp_path / "m.ckpt", params, {"variant": "x"})
    back, meta = nn.load_checkpoint(path)
    assert meta == {"variant": "x"}
    assert list(back) == ["a", "b", "c"]
    for k in params:
        assert np.array_equal(back[k], params[k])
    mirror = json.loads((tmp_path / "m.ckpt.json").read_text())
    assert mirror["tensors"][0] == {"name": "a", "shape": [2, 3]}


def test_checkpoint_corruption_detected(tmp_path):
    path = nn.save_checkpoint(tmp_path / "m.ckpt", {"a": np.ones(3)})
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"X" + raw[1:])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0" * 8)
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(tmp_path / "long.ckpt")
    with pytest.raises(FileNotFoundError, match="missing.ckpt"):
        nn.load_checkpoint(tmp_path / "missing.ckpt")
