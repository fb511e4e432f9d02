"""Tensor arithmetic, tape replay, layers, optimizer and checkpoint container."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from freqdistill import diffcore as dc
from freqdistill.diffcore import (
    SGD, CheckpointError, DimensionError, NonFiniteError, StateError, Tape, Tensor,
    gradcheck, load_checkpoint, no_grad, save_checkpoint, sgd_step,
)
from freqdistill.diffcore.gradcheck import numerical_grad, relative_error, tape_grad
from freqdistill.diffcore.nn import Conv2d, Linear, Module


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for i in range(n):
        for o in range(co):
            for y in range(oh):
                for xx in range(ow):
                    patch = xp[i, :, y * stride:y * stride + k, xx * stride:xx * stride + k]
                    out[i, o, y, xx] = np.sum(patch * w[o]) + (0.0 if b is None else b[o])
    return out


class TestMatmul:
    def test_identity(self):
        out = dc.matmul(np.eye(2), np.array([[3.0, 4.0], [5.0, 6.0]]))
        assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_zero(self):
        assert_array_equal(dc.matmul(np.array([[1.0, 2.0]]), np.zeros((2, 1))).data, [[0.0]])

    def test_against_triple_loop_and_finite_differences(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        assert_allclose(dc.matmul(a, b).data, naive_matmul(a, b), rtol=0, atol=1e-12)
        w = rng.normal(size=(4, 3))
        err = gradcheck(lambda x, y: dc.sum(dc.mul(dc.matmul(x, y), w)), [a, b])
        assert err <= 1e-6

    def test_manual_vjp(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        g = rng.normal(size=(3, 4))
        dc.matmul(a, b).backward(g)
        assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
        assert_allclose(b.grad, a.data.T @ g, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert dc.sigmoid(np.zeros(1)).item() == 0.5

    def test_sigmoid_is_stable(self):
        out = dc.sigmoid(np.array([-800.0, 800.0])).data
        assert_allclose(out, [0.0, 1.0], atol=1e-300)

    def test_mul_by_ones(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert_array_equal(dc.mul(x, np.ones_like(x)).data, x)

    def test_abs_gradient_signs(self):
        x = Tensor(np.array([2.0, -2.0, 0.0]), requires_grad=True)
        dc.sum(dc.abs(x)).backward()
        assert_array_equal(x.grad, [1.0, -1.0, 0.0])

    def test_sigmoid_derivative(self):
        x = Tensor(np.linspace(-3, 3, 7), requires_grad=True)
        s = dc.sigmoid(x)
        dc.sum(s).backward()
        assert_allclose(x.grad, s.data * (1 - s.data), atol=1e-15)

    def test_dispatch(self):
        x = np.array([1.0, -2.0])
        assert_array_equal(dc.elementwise("relu", x).data, [1.0, 0.0])
        assert_array_equal(dc.elementwise("scale", x, 3.0).data, [3.0, -6.0])
        with pytest.raises(ValueError):
            dc.elementwise("tan", x)

    def test_leading_one_broadcast(self):
        a = Tensor(np.ones((1, 3)), requires_grad=True)
        b = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        dc.sum(dc.mul(a, b)).backward()
        assert_array_equal(a.grad, [[3.0, 5.0, 7.0]])
        assert_array_equal(b.grad, np.ones((2, 3)))

    def test_not_broadcastable(self):
        with pytest.raises(DimensionError):
            dc.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_leaky_relu(self):
        x = Tensor(np.array([2.0, -2.0]), requires_grad=True)
        out = dc.leaky_relu(x, 0.1)
        assert_allclose(out.data, [2.0, -0.2])
        dc.sum(out).backward()
        assert_allclose(x.grad, [1.0, 0.1])


class TestSoftmax:
    def test_uniform(self):
        assert_allclose(dc.softmax_lastdim(np.zeros(3)).data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        out = dc.softmax_lastdim(np.array([1000.0, 0.0])).data
        assert_allclose(out, [1.0, 0.0], atol=1e-300)

    def test_sums_to_one_and_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 6)) * 3
        assert_allclose(dc.softmax_lastdim(x).data.sum(-1), 1.0, atol=1e-9)
        w = rng.normal(size=(4, 6))
        assert gradcheck(lambda t: dc.sum(dc.mul(dc.softmax_lastdim(t), w)), [x]) <= 1e-6


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 1, 5, 5))
        assert_array_equal(dc.conv2d(x, np.ones((1, 1, 1, 1))).data, x)

    def test_zero_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 2, 5, 5))
        assert_array_equal(dc.conv2d(x, np.zeros((3, 2, 3, 3)), pad=1).data, 0.0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_against_naive_loop(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(1, 2, 7 if stride == 2 else 6, 7 if stride == 2 else 6))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        got = dc.conv2d(x, w, b, stride=stride, pad=pad).data
        assert_allclose(got, naive_conv(x, w, b, stride, pad), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x, w, b = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
        m = rng.normal(size=(1, 2, 6, 6))
        assert gradcheck(lambda a, k, c: dc.sum(dc.mul(dc.conv2d(a, k, c, pad=1), m)), [x, w, b]) <= 1e-5

    def test_output_extent_rules(self):
        with pytest.raises(DimensionError):
            dc.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)))
        with pytest.raises(DimensionError):
            dc.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), stride=2)
        assert dc.conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), stride=2).shape == (1, 1, 2, 2)


class TestReduce:
    def test_l1(self):
        x = np.random.default_rng(0).normal(size=(3, 3))
        assert dc.l1_distance(x, x).item() == 0.0
        assert dc.l1_distance(np.array([1.0, -2.0]), np.zeros(2)).item() == 3.0

    def test_l1_signs(self):
        a = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        dc.l1_distance(a, np.array([0.0, 0.0, 5.0])).backward()
        assert_array_equal(a.grad, [1.0, -1.0, -1.0])

    def test_l1_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dc.l1_distance(np.ones(2), np.ones(3))

    def test_mean_matches_direct_sum(self):
        x = np.random.default_rng(2024).uniform(0, 1, size=100)
        total = 0.0
        for v in x:
            total += v
        assert dc.mean(x).item() == pytest.approx(total / 100, abs=1e-15)

    def test_reduce_dispatch(self):
        x = np.arange(6.0).reshape(2, 3)
        assert_array_equal(dc.reduce("sum", x, axis=0).data, [3.0, 5.0, 7.0])
        assert dc.reduce("mean", x).item() == 2.5
        assert dc.reduce("l1_distance", x, x).item() == 0.0


class TestTape:
    def test_reverse_order(self):
        x = Tensor(np.array([0.3, -0.7]), requires_grad=True)
        y = dc.sigmoid(dc.mul(x, 2.0))
        z = dc.sum(dc.add(y, x))
        tape = Tape.collect(z)
        visited = tape.replay(z, np.ones(()))
        seqs = [n.seq for n in visited]
        assert seqs == sorted(seqs, reverse=True)
        assert len(visited) == len(tape)

    def test_accumulation_equals_branch_sum(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=(3, 4))

        def f(t):
            return dc.sum(dc.sigmoid(t))

        def g(t):
            return dc.sum(dc.square(t))

        both = tape_grad(lambda t: dc.add(f(t), g(t)), [x0])[0]
        gf = tape_grad(f, [x0])[0]
        gg = tape_grad(g, [x0])[0]
        assert_array_equal(both, gf + gg)

    def test_nonfinite_is_error(self):
        with pytest.raises(NonFiniteError):
            dc.log(np.array([0.0]))
        with pytest.raises(NonFiniteError):
            Tensor(np.array([np.nan]))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = dc.sum(dc.mul(x, 2.0))
        assert y.is_leaf and not y.requires_grad

    def test_data_is_read_only(self):
        t = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            t.data[0] = 2.0

    def test_forward_determinism(self):
        def run():
            rng = np.random.default_rng(99)
            conv = Conv2d(rng, 2, 3)
            x = Tensor(rng.normal(size=(2, 2, 6, 6)))
            return dc.sum(dc.sigmoid(conv(x))).data.tobytes()
        assert run() == run()


class TestGradcheckHelpers:
    def test_numerical_grad_of_square(self):
        x = np.array([1.0, -3.0])
        g = numerical_grad(lambda t: dc.sum(dc.square(t)), [x])[0]
        assert_allclose(g, 2 * x, rtol=1e-9)

    def test_relative_error(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(1 / np.sqrt(2))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_elementwise_chain_gradients(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rows, cols))
    b = rng.uniform(0.5, 2.0, size=(rows, cols))
    fn = lambda x, y: dc.sum(dc.div(dc.mul(dc.sigmoid(x), dc.exp(dc.mul(x, 0.3))), y))  # noqa: E731
    assert gradcheck(fn, [a, b]) <= 1e-4


class TestSgd:
    def test_zero_lr(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.ones(2)
        sgd_step([p], lr=0.0)
        assert_array_equal(p.data, [1.0, 2.0])
        assert p.grad is None

    def test_hand_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        sgd_step([p], lr=0.1, weight_decay=0.0)
        assert p.data[0] == pytest.approx(0.9, abs=1e-15)

    def test_weight_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([0.0])
        sgd_step([p], lr=0.5, weight_decay=0.1)
        assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2)

    def test_quadratic_bowl(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        for _ in range(50):
            dc.sum(dc.square(p)).backward()
            sgd_step([p], lr=0.1)
        assert abs(p.data[0]) < 1e-4
        assert p.data[0] == pytest.approx(0.8 ** 50, rel=1e-12)

    def test_missing_grad(self):
        with pytest.raises(StateError):
            sgd_step([Tensor(np.ones(1), requires_grad=True)], lr=0.1)

    def test_sgd_class_without_momentum_matches_step(self):
        p1 = Tensor(np.array([1.5, -0.5]), requires_grad=True)
        p2 = Tensor(np.array([1.5, -0.5]), requires_grad=True)
        for p in (p1, p2):
            p.grad = np.array([0.3, 0.7])
        SGD([p1], lr=0.2, weight_decay=1e-4).step()
        sgd_step([p2], lr=0.2, weight_decay=1e-4)
        assert_array_equal(p1.data, p2.data)

    def test_clip_norm(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        SGD([p], lr=1.0, clip_norm=1.0).step()
        assert_allclose(p.data, [-0.6, -0.8])


class TestModules:
    def test_parameters_and_state_round_trip(self):
        class Two(Module):
            def __init__(self, rng):
                self.a = Linear(rng, 3, 2)
                self.convs = [Conv2d(rng, 1, 2), Conv2d(rng, 2, 1)]

        m = Two(np.random.default_rng(0))
        names = [n for n, _ in m.named_parameters()]
        assert names == ["a.weight", "a.bias", "convs.0.weight", "convs.0.bias", "convs.1.weight", "convs.1.bias"]
        state = m.state_dict()
        m2 = Two(np.random.default_rng(1))
        m2.load_state_dict(state)
        for (_, p), (_, q) in zip(m.named_parameters(), m2.named_parameters()):
            assert_array_equal(p.data, q.data)
        with pytest.raises(KeyError):
            m2.load_state_dict({"a.weight": state["a.weight"]})

    def test_linear_glorot_bound(self):
        lin = Linear(np.random.default_rng(0), 50, 30)
        assert np.abs(lin.weight.data).max() <= np.sqrt(6 / 80)
        assert_array_equal(lin.bias.data, 0.0)

    def test_zero_init_linear(self):
        lin = Linear(np.random.default_rng(0), 4, 1, zero_init=True)
        assert_array_equal(lin(Tensor(np.ones((2, 4)))).data, 0.0)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"w": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "s": np.array(2.5)}
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, tensors, {"seed": 3, "note": "hi"})
        back, meta = load_checkpoint(path)
        assert meta == {"seed": 3, "note": "hi"}
        for k, v in tensors.items():
            assert back[k].shape == v.shape
            assert back[k].tobytes() == v.astype("<f8").tobytes()

    def test_same_content_same_bytes(self, tmp_path):
        tensors = {"a": np.arange(4.0)}
        save_checkpoint(tmp_path / "1.ckpt", tensors, {"k": 1})
        save_checkpoint(tmp_path / "2.ckpt", tensors, {"k": 1})
        assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
