import numpy as np
import pytest

import uncattr.diffcore as dc

FD_STEP = 1e-5
FD_RTOL = 1e-4


def scalar_graph(build, leaf_ids):
    return dc.ComputeGraph(build, leaf_ids)


def finite_difference(build, leaves, wrt, step=FD_STEP):
    """Central finite differences of a scalar graph w.r.t. one leaf."""
    base = {k: np.array(v, dtype=np.float64) for k, v in leaves.items()}
    grad = np.zeros_like(base[wrt])
    flat = grad.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            probe = {k: v.copy() for k, v in base.items()}
            probe[wrt].reshape(-1)[i] += sign * step
            value = dc.forward(scalar_graph(build, list(leaves)), probe).item()
            flat[i] += sign * value / (2.0 * step)
    return grad


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8)


class TestForwardExamples:
    def test_softmax_symmetry(self):
        g = scalar_graph(lambda L: dc.softmax(L["x"]), ["x"])
        np.testing.assert_allclose(dc.forward(g, {"x": [0.0, 0.0]}).data, [0.5, 0.5])

    def test_sigmoid_at_zero(self):
        g = scalar_graph(lambda L: dc.sigmoid(L["x"]), ["x"])
        np.testing.assert_allclose(dc.forward(g, {"x": [0.0]}).data, [0.5])

    def test_relu_definition(self):
        g = scalar_graph(lambda L: dc.relu(L["x"]), ["x"])
        np.testing.assert_array_equal(dc.forward(g, {"x": [-1.0, 2.0]}).data, [0.0, 2.0])

    def test_softmax_rows_normalized(self, rng):
        logits = rng.uniform(-5, 5, (8, 6))
        out = dc.softmax(dc.Tensor(logits)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert out.min() >= 0.0

    def test_log_clamps_at_floor(self):
        out = dc.log(dc.Tensor([0.0, -3.0, 1.0]))
        np.testing.assert_allclose(out.data[:2], np.log(1e-12))
        assert out.data[2] == 0.0

    def test_exp_stays_finite_on_huge_input(self):
        out = dc.exp(dc.Tensor([1000.0]))
        assert np.isfinite(out.data).all()

    def test_forward_missing_leaf(self):
        g = scalar_graph(lambda L: L["x"], ["x"])
        with pytest.raises(dc.GraphError, match="unbound"):
            dc.forward(g, {})

    def test_shape_mismatch_names_node(self):
        with pytest.raises(dc.ShapeMismatchError, match="matmul"):
            dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))
        with pytest.raises(dc.ShapeMismatchError, match="add"):
            dc.add(dc.Tensor(np.ones(3)), dc.Tensor(np.ones(4)))

    def test_non_finite_error_names_node(self):
        with np.errstate(over="ignore"), pytest.raises(dc.NonFiniteError, match="multiply"):
            dc.multiply(dc.Tensor([1e300]), dc.Tensor([1e300]))


class TestGradientExamples:
    def test_sigmoid_derivative_at_zero(self):
        g = scalar_graph(lambda L: dc.sum(dc.sigmoid(L["x"])), ["x"])
        np.testing.assert_allclose(dc.gradient(g, {"x": [0.0]}, "x"), [0.25])

    def test_square_derivative(self):
        g = scalar_graph(lambda L: dc.sum(dc.multiply(L["x"], L["x"])), ["x"])
        np.testing.assert_allclose(dc.gradient(g, {"x": [3.0]}, "x"), [6.0])

    def test_cross_entropy_network_matches_fd(self, rng):
        w = rng.uniform(-1, 1, (5, 5))
        target = np.eye(5)[2]

        def build(L):
            probs = dc.softmax(dc.matmul(L["x"], L["w"]))
            return dc.multiply(dc.sum(dc.multiply(target, dc.log(probs))), -1.0)

        leaves = {"x": rng.uniform(-1, 1, 5), "w": w}
        got = dc.gradient(scalar_graph(build, ["x", "w"]), leaves, "w")
        want = finite_difference(build, leaves, "w")
        assert rel_error(got, want) <= FD_RTOL

    def test_unknown_leaf(self):
        g = scalar_graph(lambda L: dc.sum(L["x"]), ["x"])
        with pytest.raises(dc.GraphError, match="unknown leaf"):
            dc.gradient(g, {"x": [1.0]}, "nope")

    def test_non_scalar_output(self):
        g = scalar_graph(lambda L: L["x"], ["x"])
        with pytest.raises(dc.GraphError, match="scalar"):
            dc.gradient(g, {"x": [1.0, 2.0]}, "x")

    def test_unused_leaf_gets_zero_gradient(self):
        g = scalar_graph(lambda L: dc.sum(L["x"]), ["x", "y"])
        np.testing.assert_array_equal(
            dc.gradient(g, {"x": [1.0], "y": [5.0, 6.0]}, "y"), [0.0, 0.0]
        )

    def test_diamond_reuse_accumulates_once(self):
        # x*x + x, gradient 2x + 1: correct only if each node backprops once
        def build(L):
            x = L["x"]
            return dc.sum(dc.add(dc.multiply(x, x), x))

        np.testing.assert_array_equal(
            dc.gradient(scalar_graph(build, ["x"]), {"x": [4.0]}, "x"), [9.0]
        )


PRIMITIVE_CASES = {
    "add": (lambda L: dc.sum(dc.multiply(dc.add(L["a"], L["b"]), L["b"])), ("a", "b"), None),
    "subtract": (lambda L: dc.sum(dc.multiply(dc.subtract(L["a"], L["b"]), L["a"])), ("a", "b"), None),
    "multiply": (lambda L: dc.sum(dc.multiply(L["a"], L["b"])), ("a", "b"), None),
    "divide": (lambda L: dc.sum(dc.divide(L["a"], L["b"])), ("a", "b"), "positive-denominator"),
    "matmul": (lambda L: dc.sum(dc.matmul(L["a"], L["b"])), ("a", "b"), "matrix"),
    "relu": (lambda L: dc.sum(dc.multiply(dc.relu(L["a"]), L["a"])), ("a",), None),
    "sigmoid": (lambda L: dc.sum(dc.multiply(dc.sigmoid(L["a"]), L["a"])), ("a",), None),
    "softmax": (lambda L: dc.sum(dc.multiply(dc.softmax(L["a"]), L["b"])), ("a", "b"), None),
    "log": (lambda L: dc.sum(dc.log(L["a"])), ("a",), "positive"),
    "exp": (lambda L: dc.sum(dc.multiply(dc.exp(L["a"]), L["a"])), ("a",), None),
    "sum": (lambda L: dc.multiply(dc.sum(L["a"], axis=0), dc.Tensor(2.0)), ("a",), "reduce"),
    "mean": (lambda L: dc.multiply(dc.mean(L["a"]), 3.0), ("a",), None),
    "clamp": (lambda L: dc.sum(dc.multiply(dc.clamp(L["a"], -1.0, 1.0), L["a"])), ("a",), None),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    """100 random instances per primitive, entries in [-2, 2]."""
    build, leaf_ids, flavor = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(100):
        if flavor == "matrix":
            leaves = {"a": rng.uniform(-2, 2, (3, 4)), "b": rng.uniform(-2, 2, (4, 2))}
        elif flavor == "reduce":
            leaves = {"a": rng.uniform(-2, 2, (3, 2))}
        else:
            leaves = {lid: rng.uniform(-2, 2, 5) for lid in leaf_ids}
        if flavor == "positive":
            leaves["a"] = np.abs(leaves["a"]) + 0.1
        if flavor == "positive-denominator":
            leaves["b"] = np.abs(leaves["b"]) + 0.5
        if name == "sum":
            graph = scalar_graph(
                lambda L: dc.sum(dc.multiply(dc.sum(L["a"], axis=0), 2.0)), ["a"]
            )
            build_fn = graph.build
        else:
            build_fn = build
        for wrt in leaf_ids:
            got = dc.gradient(scalar_graph(build_fn, list(leaves)), leaves, wrt)
            want = finite_difference(build_fn, leaves, wrt)
            assert rel_error(got, want) <= FD_RTOL, f"{name} d/d{wrt}"


class TestSumRule:
    def test_linear_graph_sum_rule(self, rng):
        """gradient of sum(W @ x) equals the sum of per-output gradients."""
        w = rng.uniform(-2, 2, (4, 3))
        x = rng.uniform(-2, 2, 3)
        g = scalar_graph(lambda L: dc.sum(dc.matmul(w, L["x"])), ["x"])
        combined = dc.gradient(g, {"x": x}, "x")
        per_output = np.zeros(3)
        for row in range(4):
            pick = np.zeros(4)
            pick[row] = 1.0
            gi = scalar_graph(
                lambda L, p=pick: dc.sum(dc.multiply(dc.matmul(w, L["x"]), p)), ["x"]
            )
            per_output += dc.gradient(gi, {"x": x}, "x")
        np.testing.assert_allclose(combined, per_output, atol=1e-12)


class TestDirectionalDerivative:
    def test_identity(self):
        g = dc.ComputeGraph(lambda L: L["x"], ["x"])
        d = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(
            dc.directional_derivative(g, {"x": np.zeros(3)}, "x", d), d
        )

    def test_linear_map(self, rng):
        w = rng.uniform(-1, 1, (4, 3))
        g = dc.ComputeGraph(lambda L: dc.matmul(L["z"], w), ["z"])
        d = rng.uniform(-1, 1, 4)
        np.testing.assert_allclose(
            dc.directional_derivative(g, {"z": rng.uniform(-1, 1, 4)}, "z", d),
            d @ w,
            atol=1e-12,
        )

    def test_two_layer_decoder_matches_fd(self, rng):
        w1, b1 = rng.uniform(-1, 1, (4, 8)), rng.uniform(-0.5, 0.5, 8)
        w2, b2 = rng.uniform(-1, 1, (8, 6)), rng.uniform(-0.5, 0.5, 6)

        def build(L):
            h = dc.relu(dc.add(dc.matmul(L["z"], w1), b1))
            return dc.sigmoid(dc.add(dc.matmul(h, w2), b2))

        g = dc.ComputeGraph(build, ["z"])
        z = rng.uniform(-1, 1, 4)
        d = rng.uniform(-1, 1, 4)
        got = dc.directional_derivative(g, {"z": z}, "z", d)
        h = FD_STEP
        want = (
            dc.forward(g, {"z": z + h * d}).data - dc.forward(g, {"z": z - h * d}).data
        ) / (2 * h)
        assert rel_error(got, want) <= FD_RTOL

    def test_jacobian_linearity(self, rng):
        w1 = rng.uniform(-1, 1, (5, 7))
        g = dc.ComputeGraph(
            lambda L: dc.sigmoid(dc.matmul(dc.relu(L["z"]), w1)), ["z"]
        )
        z = rng.uniform(-1, 1, 5)
        d1, d2 = rng.uniform(-1, 1, 5), rng.uniform(-1, 1, 5)
        lhs = dc.directional_derivative(g, {"z": z}, "z", d1 + d2)
        rhs = dc.directional_derivative(g, {"z": z}, "z", d1) + dc.directional_derivative(
            g, {"z": z}, "z", d2
        )
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_direction_shape_mismatch(self):
        g = dc.ComputeGraph(lambda L: L["x"], ["x"])
        with pytest.raises(dc.ShapeMismatchError):
            dc.directional_derivative(g, {"x": np.zeros(3)}, "x", np.zeros(4))


class TestDeterminism:
    def test_bit_identical_repeated_calls(self, rng):
        w = rng.uniform(-1, 1, (6, 6))
        g = dc.ComputeGraph(
            lambda L: dc.sum(dc.softmax(dc.matmul(L["x"], w))), ["x"]
        )
        leaves = {"x": rng.uniform(-1, 1, 6)}
        first = dc.gradient(g, leaves, "x")
        for _ in range(5):
            again = dc.gradient(g, leaves, "x")
            assert first.tobytes() == again.tobytes()

    def test_finite_after_ops_on_finite_inputs(self, rng):
        x = dc.Tensor(rng.uniform(-2, 2, (4, 5)))
        for op in (dc.relu, dc.sigmoid, dc.exp, dc.log,
                   lambda t: dc.softmax(t), lambda t: dc.clamp(t, -1, 1)):
            assert np.isfinite(op(x).data).all()
