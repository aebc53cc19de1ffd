"""Tensor engine: forward values against hand or loop oracles, gradients against central differences."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hook_tokenizer import tensor as T
from hook_tokenizer.tensor import (ContractError, DeterminismError, DimensionError, Tensor,
                                   grad_check, parameter)


def conv_loop(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    C, H, W = x.shape
    Co, Ci, k, _ = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((Co, Ho, Wo))
    for o in range(Co):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(Ci):
                    for u in range(k):
                        for v in range(k):
                            acc += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


# ------------------------------------------------------------------ forward


def test_matmul_hand_cases():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(eye, b).data, b.data)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_identity_is_bitwise(rng):
    a = rng.normal(size=(5, 7))
    assert np.array_equal(T.matmul(Tensor(np.eye(5)), Tensor(a)).data, a)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_conv_window_sum():
    out = T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)), stride=2)
    assert out.shape == (1, 2, 2)
    assert np.all(out.data == 4.0)


def test_conv_1x1_is_affine(rng):
    x = rng.normal(size=(1, 2, 2))
    out = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([1.0]))
    assert np.allclose(out.data, 2 * x + 1, atol=0, rtol=0)


@pytest.mark.parametrize("shape,co,k,stride,pad", [
    ((2, 8, 8), 3, 3, 1, 1),
    ((4, 16, 16), 8, 3, 1, 1),
    ((3, 9, 7), 2, 2, 2, 0),
    ((1, 5, 5), 2, 3, 2, 1),
    ((4, 8, 16), 3, 4, 3, 2),
])
def test_conv_matches_loop_oracle(rng, shape, co, k, stride, pad):
    x = rng.normal(size=shape)
    w = rng.normal(size=(co, shape[0], k, k))
    b = rng.normal(size=co)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    assert np.abs(out.data - conv_loop(x, w, b, stride, pad)).max() < 1e-9


def test_conv_errors():
    with pytest.raises(DimensionError, match="channels"):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_batchnorm_cases(rng):
    st_ = T.BatchNormState(3)
    const = T.batchnorm2d(Tensor(np.full((2, 3, 4, 4), 5.0)), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_)
    assert np.all(const.data == 0.0)
    beta = np.array([1.0, -2.0, 0.5])
    out = T.batchnorm2d(Tensor(rng.normal(size=(2, 3, 4, 4))), Tensor(np.zeros(3)), Tensor(beta), T.BatchNormState(3))
    assert np.array_equal(out.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), out.shape))
    # eps shrinks the output variance to var / (var + eps); scale 5 keeps that within 1e-6 of 1
    x = rng.normal(2.0, 5.0, size=(2, 3, 4, 4))
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), T.BatchNormState(3)).data
    v = x.var(axis=(0, 2, 3))
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.allclose(out.var(axis=(0, 2, 3)), v / (v + 1e-5), rtol=0, atol=1e-12)
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-6


def test_batchnorm_running_stats(rng):
    x = rng.normal(size=(2, 2, 3, 3))
    state = T.BatchNormState(2)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state)
    assert np.allclose(state.mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=0, atol=1e-15)
    assert np.allclose(state.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=0, atol=1e-15)
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=False)
    ref = (x - state.mean.reshape(1, 2, 1, 1)) / np.sqrt(state.var.reshape(1, 2, 1, 1) + 1e-5)
    assert np.allclose(out.data, ref, rtol=0, atol=1e-12)


def test_batchnorm_degenerate_batch():
    with pytest.raises(ContractError, match="degenerate"):
        T.batchnorm2d(Tensor(np.ones((0, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)), T.BatchNormState(2))


def test_softmax_cases():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, rtol=0, atol=1e-15)
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(big).all() and big[0] == pytest.approx(1.0) and big[1] < 1e-300


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.floats(0.1, 50.0), st.integers(0, 2**31))
def test_softmax_rows_are_distributions(rows, cols, spread, seed):
    x = np.random.default_rng(seed).normal(0, spread, size=(rows, cols))
    y = T.softmax(Tensor(x), axis=-1).data
    assert np.all((y >= 0) & (y <= 1))
    assert np.abs(y.sum(axis=-1) - 1).max() < 1e-9


def test_elementwise_cases():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    ln = T.layernorm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.all(ln.data == 0.0)
    assert np.array_equal(T.mean(Tensor(np.ones((3, 4))), axis=0).data, np.ones(4))
    assert (Tensor([3.0, -1.0]) / Tensor([2.0])).data.tolist() == [1.5, -0.5]
    assert (1.0 / Tensor([4.0])).data.tolist() == [0.25]


def test_relu_subgradient_at_zero_is_zero():
    x = parameter(np.array([-1.0, 0.0, 2.0]))
    T.sum_(T.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_broadcast_error():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


# ------------------------------------------------------------------ backward


def test_backward_simple_roots(rng):
    x = parameter(rng.normal(size=(2, 3, 4)))
    T.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))
    y = parameter(np.array([3.0]))
    T.sum_(y * y).backward()
    assert y.grad.tolist() == [6.0]


def test_backward_accumulates_until_cleared():
    x = parameter(np.array([1.0, 2.0]))
    T.sum_(x * 3.0).backward()
    T.sum_(x * 3.0).backward()
    assert x.grad.tolist() == [6.0, 6.0]
    T.zero_grads([x])
    assert x.grad is None


def test_backward_needs_scalar_root():
    with pytest.raises(ContractError, match="scalar"):
        (parameter(np.ones(3)) * 2.0).backward()


def test_tape_is_topological(rng):
    a = parameter(rng.normal(size=(3, 3)))
    b = T.relu(T.matmul(a, a))
    c = T.sum_(T.add(b, a))
    order = T.tape(c)
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t._parents:
            assert pos[id(p)] < pos[id(t)]
    assert order[-1] is c


def test_no_grad_builds_no_graph():
    a = parameter(np.ones(3))
    with T.no_grad():
        out = a * 2.0
    assert not out.requires_grad and out._parents == ()


# ----------------------------------------------------------- gradient checks

SEEDS = range(10)


def _shape(seed, rank):
    return tuple(np.random.default_rng(seed).integers(1, 5, size=rank))


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul(seed):
    r = np.random.default_rng(seed)
    m, k, n = r.integers(1, 6, size=3)
    a, b = parameter(r.normal(size=(m, k))), parameter(r.normal(size=(k, n)))
    w = r.normal(size=(m, n))
    assert max(grad_check(lambda: T.sum_(T.matmul(a, b) * w), [a, b], eps=1e-5)) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_batched_matmul(seed):
    r = np.random.default_rng(seed)
    a, b = parameter(r.normal(size=(2, 3, 4))), parameter(r.normal(size=(4, 5)))
    w = r.normal(size=(2, 3, 5))
    assert max(grad_check(lambda: T.sum_(T.matmul(a, b) * w), [a, b], eps=1e-5)) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise(seed):
    r = np.random.default_rng(seed)
    shape = _shape(seed, 3)
    # keep relu inputs away from the kink
    x = parameter(r.choice([-1, 1], size=shape) * r.uniform(0.2, 2.0, size=shape))
    y = parameter(r.normal(size=shape[1:]))
    w = r.normal(size=shape)

    def f():
        h = T.gelu(T.mul(T.add(x, y), x)) + T.relu(x) + T.scale(T.neg(x), 0.3)
        return T.sum_(h * w) + T.mean(x, axis=1).sum()

    assert max(grad_check(f, [x, y], eps=1e-5)) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_div(seed):
    r = np.random.default_rng(seed)
    shape = _shape(seed, 2)
    x = parameter(r.normal(size=shape))
    d = parameter(r.uniform(0.5, 2.0, size=(1, shape[1])))
    w = r.normal(size=shape)
    assert max(grad_check(lambda: T.sum_(T.div(x, d) * w), [x, d], eps=1e-5)) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reductions_and_views(seed):
    r = np.random.default_rng(seed)
    x = parameter(r.normal(size=_shape(seed, 3)))
    w = r.normal(size=x.shape[::-1])

    def f():
        t = T.transpose(x, (2, 1, 0))
        s = T.sum_(t * w, axis=1, keepdims=True)
        return T.mean(T.reshape(T.swapaxes(s, 0, 2), (-1,)) * T.sum_(x))

    assert max(grad_check(f, [x], eps=1e-5)) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax_family(seed):
    r = np.random.default_rng(seed)
    x = parameter(r.normal(size=(4, 5)))
    w = r.normal(size=(4, 5))
    assert max(grad_check(lambda: T.sum_(T.softmax(x, axis=0) * w), [x], eps=1e-5)) < 1e-6
    assert max(grad_check(lambda: T.sum_(T.log_softmax(x, axis=-1) * w), [x], eps=1e-5)) < 1e-6
    labels = r.integers(0, 5, size=4)
    assert max(grad_check(lambda: T.cross_entropy(x, labels), [x], eps=1e-5)) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_layernorm(seed):
    r = np.random.default_rng(seed)
    x = parameter(r.normal(size=(3, 6)))
    g, b = parameter(r.normal(size=6)), parameter(r.normal(size=6))
    w = r.normal(size=(3, 6))
    assert max(grad_check(lambda: T.sum_(T.layernorm(x, g, b) * w), [x, g, b], eps=1e-5)) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_grad_batchnorm(seed, training):
    r = np.random.default_rng(seed)
    x = parameter(r.normal(size=(2, 3, 3, 3)))
    g, b = parameter(r.normal(size=3)), parameter(r.normal(size=3))
    w = r.normal(size=x.shape)
    state = T.BatchNormState(3)
    state.mean, state.var = r.normal(size=3), r.uniform(0.5, 2, size=3)

    def f():
        s = T.BatchNormState(3)
        s.mean, s.var = state.mean.copy(), state.var.copy()
        return T.sum_(T.batchnorm2d(x, g, b, s, training=training) * w)

    assert max(grad_check(f, [x, g, b], eps=1e-5)) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv(seed):
    r = np.random.default_rng(seed)
    k = int(r.integers(1, 4))
    stride = int(r.integers(1, 3))
    pad = int(r.integers(0, 2))
    x = parameter(r.normal(size=(2, 2, 6, 5)))
    wt = parameter(r.normal(size=(3, 2, k, k)))
    b = parameter(r.normal(size=3))
    out_shape = T.conv2d(x, wt, b, stride, pad).shape
    w = r.normal(size=out_shape)
    assert max(grad_check(lambda: T.sum_(T.conv2d(x, wt, b, stride, pad) * w), [x, wt, b], eps=1e-5)) < 1e-6


def test_grad_check_linear_is_exact(rng):
    w = parameter(rng.normal(size=5))
    x = rng.normal(size=5)
    assert max(grad_check(lambda: T.sum_(w * x), [w], eps=1e-5)) < 1e-9


def test_grad_check_detects_nondeterminism(rng):
    w = parameter(rng.normal(size=3))
    with pytest.raises(DeterminismError):
        grad_check(lambda: T.sum_(w * np.random.normal(size=3)), [w])
    with pytest.raises(ContractError):
        grad_check(lambda: T.sum_(w), [w], eps=0.0)


def test_cross_entropy_values():
    assert T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2]).item() == pytest.approx(np.log(4), abs=1e-15)
    assert T.cross_entropy(Tensor([[800.0, 0.0]]), [0]).item() < 1e-300
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_cross_entropy_grad_is_softmax_minus_onehot(rng):
    logits = parameter(rng.normal(size=(5, 3)))
    labels = rng.integers(0, 3, size=5)
    T.cross_entropy(logits, labels).backward()
    p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    assert np.allclose(logits.grad, (p - np.eye(3)[labels]) / 5, rtol=0, atol=1e-15)


# ------------------------------------------------------------ misc


def test_rng_streams_are_reproducible():
    a, b = T.RngState(7), T.RngState(7)
    assert np.array_equal(a.normal(0, 1, 10), b.normal(0, 1, 10))
    assert a.counter == b.counter == 1
    assert not np.array_equal(a.spawn(1).uniform(0, 1, 4), a.spawn(2).uniform(0, 1, 4))


def test_mac_tally_counts_matmul_and_conv(rng):
    with T.no_grad(), T.count_macs() as tally:
        T.matmul(Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(3, 4))))
    assert tally["macs"] == 12
    with T.count_macs() as tally:
        T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert tally["macs"] == 16


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=3), st.integers(0, 2**31))
def test_dump_round_trip(shape, seed):
    a = np.random.default_rng(seed).normal(size=shape) * 1e3
    text = T.dump_tensor(a)
    assert text.startswith("shape:" + "".join(f" {d}" for d in shape) + "\n")
    assert np.array_equal(T.parse_tensor(text), a)


def test_dump_rejects_bad_count():
    with pytest.raises(ContractError):
        T.parse_tensor("shape: 2 2\n1 2 3\n")
