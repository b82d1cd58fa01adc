import numpy as np
import pytest

from softsense import autodiff as ad

from oracles import finite_diff, relative_error


def grad_of(fn, *leaf_values):
    """Run fn on leaf tensors, backprop, return (value, grads)."""
    leaves = [ad.tensor(v, requires_grad=True) for v in leaf_values]
    with ad.fresh_tape():
        out = fn(*leaves)
        ad.backward(out)
    return out, [l.grad for l in leaves]


class TestElementwise:
    def test_add(self):
        assert np.array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])

    def test_mul_identity(self):
        x = ad.tensor([[1.5, -2.0], [0.0, 3.0]])
        assert np.array_equal(ad.mul(x, ad.ones_like(x)).data, x.data)

    def test_product_rule(self):
        _, (ga,) = grad_of(lambda a: ad.sum_(ad.mul(a, [3.0, 5.0])), [1.0, 2.0])
        assert np.array_equal(ga, [3.0, 5.0])

    def test_sub_div(self):
        assert np.array_equal(ad.sub([5.0], [2.0]).data, [3.0])
        assert np.array_equal(ad.div([6.0], [3.0]).data, [2.0])

    def test_div_gradients(self):
        _, (ga, gb) = grad_of(lambda a, b: ad.sum_(ad.div(a, b)), [4.0], [2.0])
        assert ga == pytest.approx([0.5])
        assert gb == pytest.approx([-1.0])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
            ad.add(np.zeros(2), np.zeros(3))


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(np.eye(2), m).data, m)

    def test_dot_product(self):
        out = ad.matmul([[1.0, 2.0]], [[3.0], [4.0]])
        assert np.array_equal(out.data, [[11.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ad.ShapeError):
            ad.matmul(np.zeros(3), np.zeros((3, 2)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a = ad.tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
        b = ad.tensor(rng.uniform(-2, 2, size=(4, 2)), requires_grad=True)

        def loss():
            with ad.no_grad():
                return ad.sum_(ad.matmul(a, b)).item()

        with ad.fresh_tape():
            ad.backward(ad.sum_(ad.matmul(a, b)))
        for i in range(a.size):
            fd = finite_diff(loss, a, i)
            assert relative_error(a.grad.flat[i], fd) < 1e-6


class TestNonlinearities:
    def test_relu(self):
        assert np.array_equal(ad.relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])

    def test_relu_grad_at_zero_is_zero(self):
        _, (g,) = grad_of(lambda x: ad.sum_(ad.relu(x)), [-1.0, 0.0, 2.0])
        assert np.array_equal(g, [0.0, 0.0, 1.0])

    def test_log_derivative(self):
        _, (g,) = grad_of(lambda x: ad.sum_(ad.log(x)), [2.0])
        assert g == pytest.approx([0.5])

    def test_exp_sqrt_square(self):
        _, (g,) = grad_of(lambda x: ad.sum_(ad.exp(x)), [0.0])
        assert g == pytest.approx([1.0])
        _, (g,) = grad_of(lambda x: ad.sum_(ad.sqrt(x)), [4.0])
        assert g == pytest.approx([0.25])
        _, (g,) = grad_of(lambda x: ad.sum_(ad.square(x)), [3.0])
        assert g == pytest.approx([6.0])

    def test_mean_of_normal_samples(self):
        rng = np.random.default_rng(123)
        samples = ad.tensor(rng.standard_normal(10 ** 6))
        assert abs(ad.mean(samples).item()) < 0.004  # 3-sigma band ~ 3/sqrt(1e6)


class TestPoisoning:
    def test_log_of_nonpositive_poisons(self):
        with ad.fresh_tape() as tape:
            out = ad.log(ad.tensor([1.0, -1.0, 0.0], requires_grad=True))
            assert np.isnan(out.data[1]) and np.isnan(out.data[2])
            assert np.isfinite(out.data[0])
            assert tape.poisoned

    def test_sqrt_of_negative_poisons(self):
        with ad.fresh_tape() as tape:
            ad.sqrt(ad.tensor([-4.0], requires_grad=True))
            assert tape.poisoned

    def test_backward_refuses_poisoned_tape(self):
        with ad.fresh_tape():
            x = ad.tensor([-1.0], requires_grad=True)
            out = ad.sum_(ad.log(x))
            with pytest.raises(ad.PoisonedTapeError):
                ad.backward(out)

    def test_valid_inputs_do_not_poison(self):
        with ad.fresh_tape() as tape:
            ad.log(ad.tensor([0.5], requires_grad=True))
            ad.sqrt(ad.tensor([0.5], requires_grad=True))
            assert not tape.poisoned


class TestBackwardContract:
    def test_sum_gives_ones(self):
        x = ad.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with ad.fresh_tape():
            ad.backward(ad.sum_(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_double_backward_doubles_leaf_grads(self):
        x = ad.tensor([1.0, 2.0], requires_grad=True)
        with ad.fresh_tape():
            out = ad.sum_(ad.square(ad.mul(x, 3.0)))
            ad.backward(out)
            once = x.grad.copy()
            ad.backward(out)
        assert np.allclose(x.grad, 2.0 * once)

    def test_non_scalar_backward_raises(self):
        x = ad.tensor([1.0, 2.0], requires_grad=True)
        with ad.fresh_tape():
            with pytest.raises(ad.ShapeError):
                ad.backward(ad.mul(x, 2.0))

    def test_shared_subexpression_accumulates(self):
        x = ad.tensor([2.0], requires_grad=True)
        with ad.fresh_tape():
            h = ad.mul(x, 3.0)
            ad.backward(ad.sum_(ad.add(h, h)))
        assert x.grad == pytest.approx([6.0])


class TestBroadcasting:
    def test_grad_shapes_equal_leaf_shapes(self):
        a = ad.tensor(np.ones((2, 3)), requires_grad=True)
        b = ad.tensor(np.ones((1, 3)), requires_grad=True)
        c = ad.tensor(2.0, requires_grad=True)
        with ad.fresh_tape():
            ad.backward(ad.sum_(ad.mul(ad.add(a, b), c)))
        assert a.grad.shape == (2, 3)
        assert b.grad.shape == (1, 3)
        assert c.grad.shape == ()

    def test_broadcast_backward_sums_adjoints(self):
        b = ad.tensor(np.zeros((1, 3)), requires_grad=True)
        with ad.fresh_tape():
            ad.backward(ad.sum_(ad.add(np.ones((4, 3)), b)))
        assert np.array_equal(b.grad, np.full((1, 3), 4.0))

    def test_scalar_broadcast(self):
        s = ad.tensor(3.0, requires_grad=True)
        with ad.fresh_tape():
            ad.backward(ad.sum_(ad.mul(np.ones((2, 2)), s)))
        assert s.grad == pytest.approx(4.0)


class TestReductionsAndStructure:
    def test_sum_axis(self):
        x = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(ad.sum_(ad.tensor(x), axis=0).data, x.sum(axis=0))
        assert np.array_equal(ad.sum_(ad.tensor(x), axis=1).data, x.sum(axis=1))

    def test_mean_matches_numpy(self):
        x = np.arange(6.0).reshape(2, 3)
        assert ad.mean(ad.tensor(x)).item() == pytest.approx(x.mean())
        assert np.allclose(ad.mean(ad.tensor(x), axis=0).data, x.mean(axis=0))

    def test_structural_op_gradients(self):
        rng = np.random.default_rng(2)
        a = ad.tensor(rng.uniform(-2, 2, size=(3, 2)), requires_grad=True)
        b = ad.tensor(rng.uniform(-2, 2, size=(3, 2)), requires_grad=True)
        c = ad.tensor(rng.uniform(-2, 2, size=2), requires_grad=True)

        def build():
            joined = ad.concat([a, b, ad.repeat_rows(c, 3)], axis=1)
            return ad.sum_(ad.square(ad.slice_cols(joined, 1, 5)))

        def loss():
            with ad.no_grad():
                return build().item()

        with ad.fresh_tape():
            ad.backward(build())
        for leaf in (a, b, c):
            for i in range(leaf.size):
                assert relative_error(leaf.grad.flat[i],
                                      finite_diff(loss, leaf, i)) < 1e-6

    def test_clip_gradient_masks_outside(self):
        x = ad.tensor([-2.0, 0.5, 3.0], requires_grad=True)
        with ad.fresh_tape():
            ad.backward(ad.sum_(ad.clip(x, -1.0, 1.0)))
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


class TestTape:
    def test_nodes_are_topologically_ordered(self):
        a = ad.tensor([1.0, 2.0], requires_grad=True)
        with ad.fresh_tape() as tape:
            h1 = ad.mul(a, 2.0)
            h2 = ad.add(h1, a)
            out = ad.sum_(ad.square(h2))
            ad.backward(out)
        position = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                if id(parent) in position:
                    assert position[id(parent)] < position[id(node)]

    def test_backward_visits_each_node_once(self):
        a = ad.tensor([1.0, 2.0], requires_grad=True)
        with ad.fresh_tape() as tape:
            h = ad.mul(a, 3.0)
            out = ad.sum_(ad.add(ad.square(h), h))  # diamond: h used twice
            visits = {}
            for node in tape.nodes:
                original = node._vjp

                def counted(g, node=node, original=original):
                    visits[id(node)] = visits.get(id(node), 0) + 1
                    return original(g)

                node._vjp = counted
            ad.backward(out)
        assert all(count == 1 for count in visits.values())

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = ad.tensor(rng.uniform(-2, 2, size=(4, 4)), requires_grad=True)
            w = ad.tensor(rng.uniform(-2, 2, size=(4, 3)), requires_grad=True)
            with ad.fresh_tape():
                out = ad.sum_(ad.relu(ad.matmul(x, w)))
                ad.backward(out)
            return out.item(), x.grad.copy(), w.grad.copy()

        v1, gx1, gw1 = run()
        v2, gx2, gw2 = run()
        assert v1 == v2
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def _random_composition(rng):
    """A random scalar function of two (2, 3) leaves using the op pool."""
    ops = []
    n_ops = rng.integers(3, 7)
    for _ in range(n_ops):
        ops.append(rng.integers(0, 9))

    def fn(a, b):
        t, other = a, b
        for op in ops:
            if op == 0:
                t = ad.add(t, other)
            elif op == 1:
                t = ad.sub(t, other)
            elif op == 2:
                t = ad.mul(t, other)
            elif op == 3:
                t = ad.div(t, ad.add(ad.square(other), 1.5))
            elif op == 4:
                t = ad.relu(t)
            elif op == 5:
                t = ad.exp(ad.mul(t, 0.3))
            elif op == 6:
                t = ad.log(ad.add(ad.square(t), 1.0))
            elif op == 7:
                t = ad.sqrt(ad.add(ad.square(t), 0.5))
            else:
                t = ad.square(t)
        return ad.mean(t)

    return fn


def test_random_compositions_match_finite_differences():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        fn = _random_composition(rng)
        a = ad.tensor(rng.uniform(-2, 2, size=(2, 3)), requires_grad=True)
        b = ad.tensor(rng.uniform(-2, 2, size=(2, 3)), requires_grad=True)

        with ad.fresh_tape():
            ad.backward(fn(a, b))

        def loss():
            with ad.no_grad():
                return fn(a, b).item()

        for leaf in (a, b):
            grads = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
            for i in range(leaf.size):
                fd = finite_diff(loss, leaf, i)
                # atol absorbs the finite-difference noise floor near zero
                assert abs(grads.flat[i] - fd) <= 1e-8 + 1e-4 * max(
                    abs(grads.flat[i]), abs(fd))
