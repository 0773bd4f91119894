import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdglab import tensor as T
from fdglab.errors import ConsistencyError, ContractError, DegenerateReductionError, DimensionError, LabelError

from conftest import gradcheck


def naive_conv(x, k, stride, padding):
    b, cin, h, w = x.shape
    cout, _, kk, _ = k.shape
    xp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kk) // stride + 1
    wo = (w + 2 * padding - kk) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for n in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kk):
                            for v in range(kk):
                                acc += xp[n, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


class TestConv2d:
    def test_sum_of_ones(self):
        out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        np.testing.assert_array_equal(T.conv2d(x, k, stride=1, padding=1).data, x)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loop_oracle(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 5, 5))
        k = rng.normal(size=(4, 3, 3, 3))
        got = T.conv2d(x, k, stride, padding).data
        np.testing.assert_allclose(got, naive_conv(x, k, stride, padding), rtol=0, atol=1e-12)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError) as err:
            T.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
        assert err.value.axis == 1

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)))

    def test_output_too_small(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
    def test_gradients(self, rng, stride, padding):
        arrs = {"x": rng.uniform(-1, 1, (2, 2, 5, 5)), "k": rng.uniform(-1, 1, (3, 2, 3, 3))}
        w = rng.normal(size=T.conv2d(arrs["x"], arrs["k"], stride, padding).shape)
        gradcheck(lambda p: T.tsum(T.mul(T.conv2d(p["x"], p["k"], stride, padding), w)), arrs)


class TestReduceStats:
    def test_hand_values(self):
        mu, var = T.reduce_stats(np.array([1.0, 2.0, 3.0, 4.0]), (0,))
        assert mu.item() == 2.5
        assert var.item() == 1.25

    def test_constant_has_zero_variance(self):
        _, var = T.reduce_stats(np.full((2, 3, 4, 4), 0.7), (0, 2, 3))
        assert np.all(var.data == 0.0)

    def test_bn_axes_match_two_pass_oracle(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        mu, var = T.reduce_stats(x, (0, 2, 3))
        assert mu.shape == (1, 3, 1, 1)
        for c in range(3):
            vals = [x[b, c, i, j] for b in range(2) for i in range(4) for j in range(4)]
            m = math.fsum(vals) / len(vals)
            v = math.fsum((val - m) ** 2 for val in vals) / len(vals)
            assert abs(mu.data[0, c, 0, 0] - m) <= 1e-12
            assert abs(var.data[0, c, 0, 0] - v) <= 1e-12

    def test_empty_axes_rejected(self):
        with pytest.raises(DimensionError):
            T.reduce_stats(np.ones((2, 2)), ())

    def test_empty_extent_rejected(self):
        with pytest.raises(DegenerateReductionError):
            T.reduce_stats(np.ones((0, 2)), (0,))

    def test_gradients(self, rng):
        arrs = {"x": rng.uniform(-1, 1, (2, 3, 3, 3))}
        w1, w2 = rng.normal(size=(1, 3, 1, 1)), rng.normal(size=(1, 3, 1, 1))

        def build(p):
            mu, var = T.reduce_stats(p["x"], (0, 2, 3))
            return T.add(T.tsum(T.mul(mu, w1)), T.tsum(T.mul(var, w2)))

        gradcheck(build, arrs)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)), st.randoms(use_true_random=False))
    def test_nonnegative_and_permutation_invariant(self, x, rnd):
        mu, var = T.reduce_stats(x, (1,))
        assert np.all(var.data >= 0)
        perm = list(range(5))
        rnd.shuffle(perm)
        mu2, var2 = T.reduce_stats(x[:, perm], (1,))
        np.testing.assert_allclose(mu2.data, mu.data, rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(var2.data, var.data, rtol=1e-9, atol=1e-6)


class TestCrossEntropy:
    def test_uniform(self):
        assert abs(T.cross_entropy(np.zeros((1, 2)), [0]).item() - math.log(2)) < 1e-15

    def test_stabilized(self):
        loss = T.cross_entropy(np.array([[1000.0, 0.0]]), [0]).item()
        assert math.isfinite(loss) and loss < 1e-300 + 1e-12

    def test_log_sum_exp_oracle(self, rng):
        logits = rng.normal(scale=3, size=(4, 7))
        labels = np.array([0, 3, 6, 2])
        mpmath.mp.dps = 50
        expect = mpmath.fsum(
            mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in row)) - mpmath.mpf(row[y])
            for row, y in zip(logits, labels)) / 4
        assert abs(T.cross_entropy(logits, labels).item() - float(expect)) <= 1e-10
        assert abs(T.cross_entropy(logits, labels, "sum").item() - 4 * float(expect)) <= 4e-10

    def test_label_out_of_range(self):
        with pytest.raises(LabelError) as err:
            T.cross_entropy(np.zeros((3, 2)), [0, 2, 1])
        assert err.value.index == 1

    @pytest.mark.parametrize("reduction", ["mean", "sum"])
    def test_gradients(self, rng, reduction):
        labels = np.array([1, 0, 4])
        gradcheck(lambda p: T.cross_entropy(p["z"], labels, reduction), {"z": rng.uniform(-1, 1, (3, 5))})


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        g = T.backward(T.tsum(x))
        np.testing.assert_array_equal(g[x], np.ones((2, 3, 4)))

    def test_half_square_gives_identity(self, rng):
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        g = T.backward(T.mul(T.tsum(T.mul(x, x)), 0.5))
        np.testing.assert_allclose(g[x], x.data, rtol=0, atol=1e-15)

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            T.backward(T.mul(T.Tensor(np.ones(3), requires_grad=True), 2.0))

    def test_unreachable_leaf_gets_zero(self):
        a = T.Tensor(np.ones(2), requires_grad=True)
        b = T.Tensor(np.ones(3), requires_grad=True)
        g = T.backward(T.tsum(a), {"a": a, "b": b})
        np.testing.assert_array_equal(g["b"], np.zeros(3))

    def test_shared_subexpression_accumulates(self):
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        y = T.mul(x, x)
        g = T.backward(T.tsum(T.add(y, y)))
        assert g[x][0] == 12.0

    def test_deterministic_replay(self, rng):
        x = rng.normal(size=(4, 2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        runs = []
        for _ in range(2):
            kt = T.Tensor(k, requires_grad=True)
            y = T.relu(T.conv2d(x, kt, 2, 1))
            xhat, _, _ = T.normalize(y, (0, 2, 3), 1e-5)
            runs.append(T.backward(T.tsum(T.square(xhat)), {"k": kt})["k"])
        np.testing.assert_array_equal(runs[0], runs[1])

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "sqrt", "relu", "sigmoid", "square",
                                    "mean", "reshape", "matmul", "linear", "normalize"])
    def test_elementary_op_gradients(self, rng, op):
        a = rng.uniform(0.2, 1.0, (3, 4))
        b = rng.uniform(0.2, 1.0, (1, 4))
        w = rng.normal(size=(3, 4))
        builders = {
            "add": lambda p: T.add(p["a"], p["b"]),
            "sub": lambda p: T.sub(p["a"], p["b"]),
            "mul": lambda p: T.mul(p["a"], p["b"]),
            "div": lambda p: T.div(p["a"], p["b"]),
            "sqrt": lambda p: T.add(T.sqrt(p["a"]), p["b"]),
            "relu": lambda p: T.relu(T.sub(p["a"], p["b"])),
            "sigmoid": lambda p: T.sigmoid(T.sub(p["a"], p["b"])),
            "square": lambda p: T.square(T.sub(p["a"], p["b"])),
            "mean": lambda p: T.mul(T.mean(T.mul(p["a"], p["b"]), axis=0, keepdims=True), p["b"]),
            "reshape": lambda p: T.reshape(T.mul(p["a"], p["b"]), (4, 3)),
            "matmul": lambda p: T.matmul(p["a"], T.transpose(T.mul(p["a"], p["b"]))),
            "linear": lambda p: T.linear(p["a"], T.reshape(p["b"], (1, 4)), T.Tensor(np.ones(1))),
            "normalize": lambda p: T.normalize(T.add(p["a"], p["b"]), (1,), 1e-5)[0],
        }
        build = builders[op]

        def scalar(p):
            out = build(p)
            return T.tsum(T.mul(out, np.resize(w, out.shape)))

        gradcheck(scalar, {"a": a, "b": b})


class TestSgdStep:
    def test_hand_arithmetic(self):
        p = {"w": np.array([1.0])}
        T.sgd_step(p, {"w": np.array([0.5])}, 0.1)
        assert p["w"][0] == 0.95

    def test_frozen_untouched(self):
        p = {"w": np.array([1.0]), "h": np.array([2.0])}
        T.sgd_step(p, {"w": np.array([1.0])}, 0.5, frozen=["h"])
        assert p["h"][0] == 2.0 and p["w"][0] == 0.5

    def test_missing_gradient(self):
        with pytest.raises(ConsistencyError):
            T.sgd_step({"w": np.ones(1), "v": np.ones(1)}, {"w": np.zeros(1)}, 0.1)

    def test_nonpositive_lr(self):
        with pytest.raises(ValueError):
            T.sgd_step({"w": np.ones(1)}, {"w": np.zeros(1)}, 0.0)

    def test_two_parameter_hand_unroll(self):
        # loss = (a*x + b - y)^2 at x=2, y=1 -> da = 2r*x, db = 2r with r = a*x + b - y
        a, b, lr = 0.3, -0.2, 0.05
        leaves = {"a": T.Tensor(np.array([a]), requires_grad=True), "b": T.Tensor(np.array([b]), requires_grad=True)}
        r = T.sub(T.add(T.mul(leaves["a"], 2.0), leaves["b"]), 1.0)
        grads = T.backward(T.tsum(T.square(r)), leaves)
        params = {"a": np.array([a]), "b": np.array([b])}
        T.sgd_step(params, grads, lr)
        res = a * 2 + b - 1
        assert abs(params["a"][0] - (a - lr * 2 * res * 2)) < 1e-15
        assert abs(params["b"][0] - (b - lr * 2 * res)) < 1e-15


def test_rng_streams_are_independent_and_reproducible():
    a1 = T.rng_for(7, "init").normal(size=5)
    a2 = T.rng_for(7, "init").normal(size=5)
    b = T.rng_for(7, "data").normal(size=5)
    np.testing.assert_array_equal(a1, a2)
    assert not np.allclose(a1, b)


def test_rank_above_four_rejected():
    with pytest.raises(DimensionError):
        T.Tensor(np.zeros((1, 1, 1, 1, 1)))
