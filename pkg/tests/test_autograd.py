import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from halftruth import autograd as ag
from halftruth.autograd import GraphFreedError, Tensor, grad_check, ops, parameter
from halftruth.gradsuite import default_cases, run_case
from halftruth.models import CAFNet, CAFNetConfig
from halftruth.nn import BiLSTM, MultiheadAttention, count_params
from halftruth.training import composite_loss

finite = st.floats(-10, 10, allow_nan=False, width=64)


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --- naive oracles -------------------------------------------------------------


def naive_conv1d(x, w, b, groups, padding):
    c_in, T = x.shape
    c_out, cpg, K = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding)))
    T_out = T + 2 * padding - K + 1
    out = np.zeros((c_out, T_out))
    opg = c_out // groups
    for o in range(c_out):
        g = o // opg
        for t in range(T_out):
            s = b[o]
            for c in range(cpg):
                for k in range(K):
                    s += w[o, c, k] * xp[g * cpg + c, t + k]
            out[o, t] = s
    return out


def naive_conv2d(x, w, b, padding):
    c_in, H, W = x.shape
    c_out, _, K, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    Ho, Wo = H + 2 * padding - K + 1, W + 2 * padding - K + 1
    out = np.zeros((c_out, Ho, Wo))
    for o in range(c_out):
        for i in range(Ho):
            for j in range(Wo):
                out[o, i, j] = b[o] + np.sum(w[o] * xp[:, i : i + K, j : j + K])
    return out


def sig(z):
    return 1 / (1 + math.exp(-z))


# --- affine --------------------------------------------------------------------


def test_affine_examples():
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(ag.affine(t64(x), t64(np.eye(4)), t64(np.zeros(4))).data, x)
    assert ag.affine(t64([[1, 2]]), t64([[1], [1]]), t64([3])).data.tolist() == [[6.0]]
    with pytest.raises(ValueError):
        ag.affine(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_affine_matches_numpy(data):
    n, i, o = (data.draw(st.integers(1, 5)) for _ in range(3))
    x = data.draw(hnp.arrays(np.float64, (n, i), elements=finite))
    w = data.draw(hnp.arrays(np.float64, (i, o), elements=finite))
    b = data.draw(hnp.arrays(np.float64, (o,), elements=finite))
    np.testing.assert_allclose(ag.affine(t64(x), t64(w), t64(b)).data, x @ w + b, rtol=1e-12, atol=1e-9)


# --- convolution ---------------------------------------------------------------


def test_conv1d_examples():
    x = np.random.default_rng(1).standard_normal((1, 6))
    delta = t64(np.array([[[0.0, 1.0, 0.0]]]))
    np.testing.assert_array_equal(ag.conv1d(t64(x), delta, t64([0.0]), padding=1).data, x)
    x2 = np.array([[1.0, 2, 3, 4], [5, 6, 7, 8]])
    w = t64(np.array([[[1.0, 0, 0]], [[0.0, 0, 1]]]))
    out = ag.conv1d(t64(x2), w, t64([0.0, 0.0]), groups=2, padding=1).data
    np.testing.assert_array_equal(out, [[0, 1, 2, 3], [6, 7, 8, 0]])
    np.testing.assert_array_equal(out, naive_conv1d(x2, w.data, [0, 0], 2, 1))
    with pytest.raises(ValueError):
        ag.conv1d(t64(np.zeros((3, 5))), t64(np.zeros((2, 2, 3))), groups=2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 5]), st.integers(0, 2), st.integers(5, 9), st.integers(0, 1000))
def test_conv1d_matches_direct_summation(groups, per_group, K, padding, T, seed):
    rng = np.random.default_rng(seed)
    c_in, c_out = groups * per_group, groups * 2
    x, w, b = rng.standard_normal((c_in, T)), rng.standard_normal((c_out, per_group, K)), rng.standard_normal(c_out)
    got = ag.conv1d(t64(x), t64(w), t64(b), groups=groups, padding=padding).data
    np.testing.assert_allclose(got, naive_conv1d(x, w, b, groups, padding), atol=1e-12)


def test_conv1d_same_padding_preserves_length():
    x = t64(np.zeros((4, 251)))
    assert ag.conv1d(x, t64(np.zeros((4, 1, 5))), groups=4, padding=2).shape == (4, 251)


def test_conv2d_examples():
    x = np.random.default_rng(2).standard_normal((1, 4, 5))
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(ag.conv2d(t64(x), t64(delta), t64([0.0]), padding=1).data, x)
    assert ag.conv2d(t64(np.ones((1, 2, 2))), t64(np.ones((1, 1, 2, 2))), t64([0.0])).data.tolist() == [[[4.0]]]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(0, 1), st.integers(0, 1000))
def test_conv2d_matches_direct_summation(c_in, c_out, K, padding, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((c_in, 5, 4)), rng.standard_normal((c_out, c_in, K, K)), rng.standard_normal(c_out)
    np.testing.assert_allclose(ag.conv2d(t64(x), t64(w), t64(b), padding=padding).data, naive_conv2d(x, w, b, padding), atol=1e-12)


# --- batch norm ----------------------------------------------------------------


def test_batch_norm_train_statistics():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 20)) * 5 + 2
    state = ag.BatchNormState.create(3, np.float64)
    y = ag.batch_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), state, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2)), 1, atol=1e-5)
    mu, var = x.mean(axis=(0, 2)), x.var(axis=(0, 2), ddof=1)
    np.testing.assert_allclose(state.running_mean, 0.1 * mu)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var)


def test_batch_norm_constant_channel_and_eval():
    state = ag.BatchNormState.create(2, np.float64)
    with pytest.raises(RuntimeError):
        ag.batch_norm(t64(np.ones((2, 2, 3))), t64(np.ones(2)), t64(np.zeros(2)), state, training=False)
    y = ag.batch_norm(t64(np.full((2, 2, 3), 7.0)), t64(np.ones(2)), t64(np.zeros(2)), state, training=True)
    np.testing.assert_array_equal(y.data, 0.0)
    x = np.random.default_rng(0).standard_normal((2, 2, 3))
    ev = ag.batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), state, training=False).data
    expected = (x - state.running_mean[None, :, None]) / np.sqrt(state.running_var[None, :, None] + 1e-5)
    np.testing.assert_allclose(ev, expected)


# --- activations and dropout ---------------------------------------------------


def test_activation_examples():
    assert ag.sigmoid(t64([0.0])).data[0] == 0.5
    assert ag.tanh(t64([0.0])).data[0] == 0.0
    assert ag.relu(t64([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    x = t64(np.arange(6.0))
    assert ag.dropout(x, 0.0, np.random.default_rng(0), True) is x
    assert ag.dropout(x, 0.9, np.random.default_rng(0), False) is x
    with pytest.raises(ValueError):
        ag.dropout(x, 1.0, np.random.default_rng(0), True)


def test_dropout_scaling():
    y = ag.dropout(t64(np.ones(100_000)), 0.25, np.random.default_rng(0), True).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert abs((y == 0).mean() - 0.25) < 0.01


def test_relu_gradient_is_indicator():
    x = np.array([-2.0, -0.5, 0.3, 1.7])
    xt = t64(x, grad=True)
    ops.sum(ag.relu(xt)).backward()
    np.testing.assert_array_equal(xt.grad, (x > 0).astype(float))


# --- pooling, softmax, attention ------------------------------------------------


def test_pool_examples():
    assert ag.max_pool1d(t64([[1, 5, 2, 8]]), 2).data.tolist() == [[5.0, 8.0]]
    assert ag.max_pool1d(t64(np.zeros((2, 251))), 2).shape == (2, 125)
    x = np.arange(24.0).reshape(2, 3, 4)
    np.testing.assert_array_equal(ag.adaptive_avg_pool_to_1(t64(x), 2).data, x.mean(axis=(1, 2)))
    with pytest.raises(ValueError):
        ag.max_pool1d(t64(np.zeros((2, 1))), 2)


def test_max_pool_ties_route_to_lower_index():
    x = t64([[3.0, 3.0, 1.0, 1.0]], grad=True)
    ops.sum(ag.max_pool1d(x, 2)).backward()
    assert x.grad.tolist() == [[1.0, 0.0, 1.0, 0.0]]
    y = t64(np.ones((1, 2, 2)), grad=True)
    ops.sum(ag.max_pool2d(y, 2)).backward()
    assert y.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)), elements=finite))
def test_max_pool1d_matches_loop(x):
    got = ag.max_pool1d(t64(x), 2).data
    exp = [[max(row[2 * j], row[2 * j + 1]) for j in range(len(row) // 2)] for row in x]
    np.testing.assert_array_equal(got, np.array(exp).reshape(got.shape))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=finite), finite)
def test_softmax_simplex_and_shift_invariance(x, c):
    y = ag.softmax(t64(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all((y > 0) & (y <= 1))
    np.testing.assert_allclose(ag.softmax(t64(x + c), axis=-1).data, y, atol=1e-12)


def test_attention_examples():
    rng = np.random.default_rng(4)
    V = rng.standard_normal((5, 3))
    out = ag.scaled_dot_attention(t64(np.zeros((2, 4))), t64(rng.standard_normal((5, 4))), t64(V)).data
    np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (2, 1)), atol=1e-12)
    v1 = rng.standard_normal((1, 3))
    one = ag.scaled_dot_attention(t64(rng.standard_normal((1, 4))), t64(rng.standard_normal((1, 4))), t64(v1))
    np.testing.assert_allclose(one.data, v1, atol=1e-12)
    with pytest.raises(ValueError):
        ag.scaled_dot_attention(t64(np.zeros((2, 4))), t64(np.zeros((3, 5))), t64(np.zeros((3, 2))))


def test_multi_head_attention_shape_and_count():
    mha = MultiheadAttention(128, 8, np.random.default_rng(0))
    assert count_params(mha) == 4 * (128 * 128 + 128) == 66_048
    for tq, tk in ((1, 1), (3, 7), (125, 250)):
        assert mha(t64(np.zeros((tq, 128))), t64(np.zeros((tk, 128))), t64(np.zeros((tk, 128)))).shape == (tq, 128)
    with pytest.raises(ValueError):
        MultiheadAttention(128, 7, np.random.default_rng(0))


# --- LSTM ----------------------------------------------------------------------


def test_lstm_zero_weights_give_zero_output():
    p = {k: t64(np.zeros(s)) for k, s in (("w_ih", (3, 8)), ("w_hh", (2, 8)), ("b_ih", (8,)), ("b_hh", (8,)))}
    layers = [{"fw": p, "bw": p}]
    out = ag.lstm_bidirectional(t64(np.random.default_rng(0).standard_normal((5, 3))), layers)
    assert out.shape == (5, 4) and not out.data.any()


def test_lstm_scalar_cell_by_hand():
    # gate order i, f, g, o; scalar hidden and input, two steps
    w_ih = np.array([[0.5, -0.3, 0.8, 0.2]])
    w_hh = np.array([[0.1, 0.4, -0.6, 0.7]])
    b_ih = np.array([0.05, 0.5, -0.1, 0.0])
    b_hh = np.array([-0.02, 0.1, 0.03, 0.3])
    xs = [0.7, -1.2]
    h = c = 0.0
    expected = []
    for x in xs:
        a = [w_ih[0, k] * x + w_hh[0, k] * h + b_ih[k] + b_hh[k] for k in range(4)]
        i, f, g, o = sig(a[0]), sig(a[1]), math.tanh(a[2]), sig(a[3])
        c = f * c + i * g
        h = o * math.tanh(c)
        expected.append(h)
    got = ag.lstm_layer(t64([[x] for x in xs]), t64(w_ih), t64(w_hh), t64(b_ih), t64(b_hh)).data[:, 0]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
    # the reverse direction is the forward pass on the time-reversed input
    rev = ag.lstm_layer(t64([[x] for x in xs[::-1]]), t64(w_ih), t64(w_hh), t64(b_ih), t64(b_hh)).data[::-1, 0]
    got_rev = ag.lstm_layer(t64([[x] for x in xs]), t64(w_ih), t64(w_hh), t64(b_ih), t64(b_hh), reverse=True).data[:, 0]
    np.testing.assert_allclose(got_rev, rev, atol=1e-15)


def test_bilstm_parameter_count_and_shape():
    lstm = BiLSTM(384, 64, 2, np.random.default_rng(0))
    assert count_params(lstm) == 2 * (4 * 64 * (384 + 64) + 8 * 64) + 2 * (4 * 64 * (128 + 64) + 8 * 64) == 329_728
    assert lstm(Tensor(np.zeros((7, 384), np.float32))).shape == (7, 128)


def test_chrono_init_biases():
    lstm = BiLSTM(4, 8, 1, np.random.default_rng(0), chrono_horizon=251)
    d = lstm.forward_dirs[0]
    forget = d.b_ih.data[8:16]
    assert np.all(forget >= 0) and np.all(forget <= math.log(250))
    np.testing.assert_array_equal(d.b_ih.data[:8], -forget)
    assert not d.b_hh.data[:16].any()


# --- tape semantics ------------------------------------------------------------


def test_backward_simple_rules():
    x = t64([1.0, 2.0, 3.0], grad=True)
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, 1.0)
    x, y = t64([1.0, 2.0], grad=True), t64([3.0, -4.0], grad=True)
    ops.sum(ops.mul(x, y)).backward()
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_backward_errors():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ValueError):
        ops.mul(x, x).backward()
    with pytest.raises(RuntimeError):
        ops.sum(t64([1.0])).backward()
    loss = ops.sum(ops.mul(x, x))
    loss.backward()
    with pytest.raises(GraphFreedError):
        loss.backward()


def test_backward_visits_each_node_once():
    x = t64(np.arange(4.0), grad=True)
    h = ops.mul(x, 2.0)
    loss = ops.sum(ops.add(ops.mul(h, h), h))  # h is shared by two consumers
    calls = {}
    nodes, stack = [], [loss]
    while stack:
        n = stack.pop()
        if n._op is None or any(n is m for m in nodes):
            continue
        nodes.append(n)
        stack.extend(n._parents)
    for n in nodes:
        fn = n._backward

        def counted(g, fn=fn, key=id(n)):
            calls[key] = calls.get(key, 0) + 1
            return fn(g)

        n._backward = counted
    visited = ag.backward(loss)
    assert visited == len(nodes) == 4
    assert sorted(calls.values()) == [1, 1, 1, 1]
    np.testing.assert_allclose(x.grad, 2 * (2 * h.data) + 2)


def test_non_finite_results_raise():
    big = Tensor(np.full(3, 1e30, np.float32), requires_grad=True)
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        ops.mul(big, big)


def test_no_grad_records_nothing():
    x = t64([1.0], grad=True)
    with ag.no_grad():
        y = ops.mul(x, x)
    assert not y.requires_grad and y._op is None


# --- finite-difference checks --------------------------------------------------


def test_grad_check_examples():
    assert grad_check(lambda x: ops.sum(ops.mul(x, x)), [np.array([3.0])]) < 1e-9
    x = np.array([-1.0, 0.5, 2.0, -0.2])
    assert grad_check(lambda v: ops.sum(ag.relu(v)), [x]) < 1e-9


@pytest.mark.parametrize("case", default_cases(), ids=lambda c: c.name)
def test_primitive_gradients_over_ten_seeds(case):
    result = run_case(case, seeds=range(10))
    assert result.passed, f"{case.name}: {result.max_err:.3e} >= {case.threshold:.0e}"


def test_full_model_gradient_slice_float32():
    cfg = CAFNetConfig(path_dropout=0.0, head_dropout=0.0)
    model = CAFNet(cfg, seed=3)
    rng = np.random.default_rng(0)
    inputs = [rng.standard_normal((2, c, 251)).astype(np.float32) for c in (40, 40, 12)]
    labels = np.array([0, 2])
    bounds = np.array([[np.nan, np.nan], [0.3, 0.55]])

    def loss_value():
        return composite_loss(model(*inputs), labels, bounds)[0]

    loss = loss_value()
    loss.backward()
    params = model.parameters()
    assert all(np.isfinite(p.grad).all() for p in params if p.grad is not None)
    eps, worst = 1e-2, 0.0
    picks = rng.choice(len(params), size=10, replace=False)
    with ag.no_grad():
        for k in picks:
            p = params[k]
            flat = p.data.reshape(-1)
            i = int(rng.integers(flat.size))
            a = 0.0 if p.grad is None else float(p.grad.reshape(-1)[i])
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_value().data)
            flat[i] = orig - eps
            lo = float(loss_value().data)
            flat[i] = orig
            worst = max(worst, float(ag.rel_err(a, (hi - lo) / (2 * eps))))
    assert worst < 1e-3


def test_forward_is_bitwise_deterministic():
    model = CAFNet(seed=5).eval()
    for m in model.modules():
        for name, v in vars(m).items():
            if isinstance(v, ag.BatchNormState):
                v.num_batches_tracked[...] = 1
    rng = np.random.default_rng(1)
    inputs = [rng.standard_normal((1, c, 251)).astype(np.float32) for c in (40, 40, 12)]
    a, b = model(*inputs), model(*inputs)
    for x, y in ((a.main_logits, b.main_logits), (a.boundaries, b.boundaries)):
        assert x.data.tobytes() == y.data.tobytes()
