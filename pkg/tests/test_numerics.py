import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcrobust import losses, models
from pcrobust import numerics as nx
from pcrobust.numerics import GraphError, ShapeError, Tensor

from conftest import fd_compare


def away_from_zero(rng, shape, gap=1e-3):
    v = rng.standard_normal(shape)
    return np.where(np.abs(v) < gap, np.sign(v + 1e-12) * gap * 2, v)


class TestForward:
    def test_relu(self):
        assert nx.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_identity_matmul(self):
        x = np.random.default_rng(0).standard_normal((2, 5))
        np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)

    def test_conv_all_ones(self):
        out = nx.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 9.0))

    def test_conv_matches_direct_loops(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 2))
        ref = np.zeros((2, 4, 5, 5))
        for n in range(2):
            for f in range(4):
                for i in range(5):
                    for j in range(5):
                        ref[n, f, i, j] = np.sum(x[n, :, i : i + 3, j : j + 2] * w[f])
        np.testing.assert_allclose(nx.conv2d(Tensor(x), Tensor(w)).data, ref, rtol=1e-12)

    def test_conv_padding_shape(self):
        out = nx.conv2d(Tensor(np.ones((1, 2, 6, 6))), Tensor(np.ones((3, 2, 3, 3))), padding=1)
        assert out.shape == (1, 3, 6, 6)
        assert out.data[0, 0, 0, 0] == 8.0  # corner sees 2x2 window x 2 channels

    def test_max_pool(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(nx.max_pool2d(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])

    def test_softmax_rows_sum_to_one(self):
        p = nx.softmax(Tensor(np.random.default_rng(2).standard_normal((4, 6)) * 30)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError, match="conv2d"):
            nx.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(ShapeError, match="add_bias"):
            nx.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_determinism(self):
        net = models.build(models.ArchitectureSpec("lenet5"), seed=3)
        x = np.random.default_rng(0).uniform(size=(3, 1, 28, 28))
        assert np.array_equal(net.logits(x), net.logits(x))


class TestBackward:
    def test_relu_subgradient(self):
        (g,) = nx.grad(lambda x: nx.sum(nx.relu(x)), np.array([-1.0, 2.0]))
        assert g.tolist() == [0.0, 1.0]
        (g0,) = nx.grad(lambda x: nx.sum(nx.relu(x)), np.array([0.0]))
        assert g0.tolist() == [0.0]

    def test_sum_of_softmax_is_flat(self):
        a = np.random.default_rng(0).standard_normal((3, 5))
        (g,) = nx.grad(lambda t: nx.sum(nx.softmax(t)), a)
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_max_pool_ties_route_to_first(self):
        x = np.ones((1, 1, 2, 2))
        (g,) = nx.grad(lambda t: nx.sum(nx.max_pool2d(t)), x)
        np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])

    def test_untracked_output_rejected(self):
        with pytest.raises(GraphError):
            nx.backward(nx.relu(Tensor([1.0, 2.0])))

    def test_nonscalar_needs_output_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            nx.backward(nx.relu(x))

    def test_grad_accumulates_over_shared_parent(self):
        (g,) = nx.grad(lambda x: nx.sum(nx.mul(x, x)), np.array([3.0]))
        assert g.tolist() == [6.0]

    def test_record_is_topological(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        out = nx.sum(nx.relu(nx.matmul(x, x)))
        order = nx.record(out)
        pos = {id(n): i for i, n in enumerate(order)}
        for n in order:
            for p in n._parents:
                assert pos[id(p)] < pos[id(n)]
        assert order[-1] is out

    def test_sum_rule(self):
        rng = np.random.default_rng(5)
        xa = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))

        def run(gout):
            x = Tensor(xa, requires_grad=True)
            nx.backward(nx.matmul(x, Tensor(w)), gout)
            return x.grad

        g1 = rng.standard_normal((3, 2))
        g2 = rng.standard_normal((3, 2))
        np.testing.assert_allclose(run(g1 + g2), run(g1) + run(g2), rtol=1e-12)

    @given(alpha=st.floats(-5, 5, allow_nan=False), seed=st.integers(0, 2**16))
    @settings(max_examples=25, deadline=None)
    def test_backward_is_linear(self, alpha, seed):
        rng = np.random.default_rng(seed)
        xa = rng.standard_normal((2, 1, 6, 6))
        w = rng.standard_normal((3, 1, 3, 3))
        g = rng.standard_normal((2, 3, 2, 2))

        def run(gout):
            x = Tensor(xa, requires_grad=True)
            nx.backward(nx.max_pool2d(nx.relu(nx.conv2d(x, Tensor(w)))), gout)
            return x.grad

        np.testing.assert_allclose(run(alpha * g), alpha * run(g), rtol=1e-10, atol=1e-12)


# one finite-difference case per primitive; each takes an rng and returns (fn, arrays)
PRIMITIVES = {}


def primitive(name):
    def deco(f):
        PRIMITIVES[name] = f
        return f
    return deco


@primitive("matmul")
def _(rng):
    r = rng.standard_normal((3, 2))
    return lambda a, b: nx.sum(nx.mul(nx.matmul(a, b), Tensor(r))), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]


@primitive("conv2d")
def _(rng):
    r = rng.standard_normal((2, 3, 4, 3))
    return (lambda x, w: nx.sum(nx.mul(nx.conv2d(x, w, padding=1), Tensor(r)))), [
        rng.standard_normal((2, 2, 4, 3)), rng.standard_normal((3, 2, 3, 3))]


@primitive("max_pool2d")
def _(rng):
    x = rng.permutation(np.arange(2 * 2 * 4 * 5, dtype=float)).reshape(2, 2, 4, 5) * 0.01
    r = rng.standard_normal((2, 2, 2, 2))
    return (lambda t: nx.sum(nx.mul(nx.max_pool2d(t), Tensor(r)))), [x]


@primitive("relu")
def _(rng):
    r = rng.standard_normal((3, 4))
    return (lambda t: nx.sum(nx.mul(nx.relu(t), Tensor(r)))), [away_from_zero(rng, (3, 4))]


@primitive("add_bias")
def _(rng):
    r = rng.standard_normal((2, 3, 2, 2))
    return (lambda x, b: nx.sum(nx.mul(nx.add_bias(x, b), Tensor(r)))), [
        rng.standard_normal((2, 3, 2, 2)), rng.standard_normal(3)]


@primitive("reshape")
def _(rng):
    r = rng.standard_normal((4, 6))
    return (lambda t: nx.sum(nx.mul(nx.reshape(t, (4, 6)), Tensor(r)))), [rng.standard_normal((2, 3, 4))]


@primitive("mean")
def _(rng):
    r = rng.standard_normal(4)
    return (lambda t: nx.sum(nx.mul(nx.mean(t, axis=0), Tensor(r)))), [rng.standard_normal((3, 4))]


@primitive("maximum")
def _(rng):
    r = rng.standard_normal((3, 4))
    return (lambda t: nx.sum(nx.mul(nx.maximum(t, 0.0), Tensor(r)))), [away_from_zero(rng, (3, 4))]


@primitive("sub_mul")
def _(rng):
    return (lambda a, b: nx.sum(nx.mul(nx.sub(a, b), a))), [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))]


@primitive("log_softmax")
def _(rng):
    r = rng.standard_normal((4, 5))
    return (lambda t: nx.sum(nx.mul(nx.log_softmax(t), Tensor(r)))), [rng.standard_normal((4, 5)) * 3]


@primitive("softmax")
def _(rng):
    r = rng.standard_normal((4, 5))
    return (lambda t: nx.sum(nx.mul(nx.softmax(t), Tensor(r)))), [rng.standard_normal((4, 5)) * 3]


@primitive("pick_sub_column")
def _(rng):
    idx = rng.integers(0, 5, 4)
    return (lambda t: nx.sum(nx.square(nx.sub_column(t, nx.pick(t, idx))))), [rng.standard_normal((4, 5))]


@primitive("tanh")
def _(rng):
    return (lambda t: nx.sum(nx.tanh(t))), [rng.standard_normal((3, 3))]


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    for seed in range(10):
        fn, arrays = PRIMITIVES[name](np.random.default_rng(seed))
        assert fd_compare(fn, arrays) < 1e-6, (name, seed)


class TestInputGradient:
    def test_linear_softmax_closed_form(self):
        rng = np.random.default_rng(0)
        spec = models.ArchitectureSpec("linear", (1, 1, 6), 3)
        net = models.build(spec, seed=0)
        x = rng.uniform(size=(1, 1, 1, 6))
        y = np.array([2])
        g = nx.input_gradient(net, losses.ce_from_logits, x, y)
        W = net.params()[0].data  # (6, 3): logits = x @ W + b
        p = losses.softmax(net.logits(x))[0]
        expected = W @ (p - np.eye(3)[2])
        np.testing.assert_allclose(g.reshape(-1), expected, rtol=1e-12)

    def test_constant_loss_gives_zero(self):
        net = models.build(models.ArchitectureSpec("linear", (1, 1, 4), 2), seed=0)
        g = nx.input_gradient(net, lambda logits, y: Tensor(3.0), np.full((2, 1, 1, 4), 0.5), np.array([0, 1]))
        assert np.all(g == 0)

    def test_mlp_against_finite_differences(self):
        rng = np.random.default_rng(1)
        net = models.build(models.ArchitectureSpec("mlp", (1, 3, 3), 4, hidden=(7,)), seed=2)
        x = rng.uniform(size=(1, 1, 3, 3))
        y = np.array([1])
        g = nx.input_gradient(net, losses.ce_from_logits, x, y)
        num = nx.numerical_grad(lambda v: losses.ce_from_logits(net.logits(v), y), x)
        assert nx.relative_error(g, num) < 1e-5

    def test_nonscalar_loss_rejected(self):
        net = models.build(models.ArchitectureSpec("linear", (1, 1, 4), 2), seed=0)
        with pytest.raises(ShapeError):
            nx.input_gradient(net, lambda logits, y: logits, np.full((2, 1, 1, 4), 0.5), np.array([0, 1]))

    def test_parameters_untouched(self):
        net = models.build(models.ArchitectureSpec("mlp", (1, 2, 2), 2, hidden=(3,)), seed=0)
        nx.input_gradient(net, losses.ce_from_logits, np.full((1, 1, 2, 2), 0.3), np.array([0]))
        assert all(p.grad is None and p.requires_grad for p in net.params())
        assert net.grad_calls == 1
