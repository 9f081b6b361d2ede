"""
Tests for fbsde.diffgraph: primitives, reverse-mode gradients and nested differentiation.
"""

import threading

import numpy as np
import pytest

from fbsde.core import ContractError, ShapeError
from fbsde.diffgraph import (
    Graph, GraphNode, add, broadcast_to, concat, constant, cos, finite_difference_check,
    grad, hessian, matmul, matvec, mean, mul, norm, power, primitives, reshape, scale,
    sin, slice_, square, sub, sum_, tanh, transpose, variable,
)


POINT = np.array([0.3, -0.7, 1.1, 0.5])
A = np.array([[1.0, 2.0, -1.0, 0.5], [0.0, -1.5, 2.0, 1.0], [0.7, 0.2, 0.1, -0.3]])


class TestPrimitives:
    """Forward values and shape rules."""

    def test_registry_is_closed_set(self):
        """Every documented primitive has a registered rule."""
        expected = {"add", "sub", "mul", "matvec", "matmul", "sum", "mean", "square", "tanh",
                    "sin", "cos", "power", "scale", "concat", "slice", "embed", "norm",
                    "transpose", "reshape", "broadcast_to", "sum_to"}
        assert expected <= set(primitives())

    def test_elementwise_values(self):
        """add/sub/mul/square follow numpy semantics."""
        a, b = constant([1.0, 2.0]), constant([3.0, -1.0])
        assert np.array_equal(add(a, b).value, [4.0, 1.0])
        assert np.array_equal(sub(a, b).value, [-2.0, 3.0])
        assert np.array_equal(mul(a, b).value, [3.0, -2.0])
        assert np.array_equal(square(b).value, [9.0, 1.0])

    def test_batched_broadcasting(self):
        """A (M, k) batch combines with a k-vector row-wise."""
        batch = constant(np.ones((3, 2)))
        out = add(batch, constant([1.0, 2.0]))
        assert out.shape == (3, 2)
        assert np.array_equal(out.value[2], [2.0, 3.0])

    def test_operators(self):
        """Operator overloads map to primitives."""
        x = constant([1.0, 2.0])
        assert (x * 2.0).op == "scale"
        assert (-x).op == "scale"
        assert (x + x).op == "add"
        assert (x ** 3).op == "power"
        assert (constant(np.eye(2)) @ x).op == "matvec"

    def test_matvec_shape_error_names_both_shapes(self):
        """Mismatched matvec raises ShapeError with both shapes."""
        with pytest.raises(ShapeError) as excinfo:
            matvec(constant(np.ones((2, 3))), constant(np.ones(2)))
        assert "(2, 3)" in str(excinfo.value)
        assert "(2,)" in str(excinfo.value)

    def test_add_incompatible_shapes(self):
        """Non-broadcastable operands raise ShapeError."""
        with pytest.raises(ShapeError):
            add(constant(np.ones(3)), constant(np.ones(2)))

    def test_reshape_size_mismatch(self):
        """reshape to a different size raises ShapeError."""
        with pytest.raises(ShapeError):
            reshape(constant(np.ones(4)), (3,))

    def test_slice_rejects_fancy_index(self):
        """Only integers and slices are accepted."""
        with pytest.raises(ShapeError):
            slice_(constant(np.ones(4)), [0, 1])

    def test_shape_error_is_value_error(self):
        """ShapeError can be caught as ValueError."""
        with pytest.raises(ValueError):
            matmul(constant(np.ones((2, 2))), constant(np.ones((3, 3))))

    def test_sum_axis_out_of_range(self):
        """Reducing over a missing axis raises ShapeError."""
        with pytest.raises(ShapeError):
            sum_(constant(np.ones((2, 2))), axis=2)


class TestGrad:
    """First-order reverse mode."""

    def test_square_gradient(self):
        """d/dx sum(x^2) = 2x."""
        x = variable([1.0, 2.0, 3.0])
        (g,) = grad(sum_(square(x)), [x])
        assert np.array_equal(g.value, [2.0, 4.0, 6.0])

    def test_non_scalar_output_rejected(self):
        """grad requires a scalar output."""
        x = variable([1.0, 2.0])
        with pytest.raises(ContractError):
            grad(square(x), [x])

    def test_wrt_must_require_grad(self):
        """Constants cannot be differentiated against."""
        x = constant([1.0, 2.0])
        with pytest.raises(ContractError):
            grad(sum_(x), [x])

    def test_unrelated_variable_gets_zero(self):
        """A variable the output does not depend on has a zero gradient."""
        x, y = variable([1.0, 2.0]), variable([5.0])
        gx, gy = grad(sum_(x), [x, y])
        assert np.array_equal(gx.value, [1.0, 1.0])
        assert np.array_equal(gy.value, [0.0])

    def test_shared_subexpression_accumulates(self):
        """Gradients from two uses of one node add up."""
        x = variable([3.0])
        (g,) = grad(sum_(mul(x, x)), [x])
        assert g.value[0] == pytest.approx(6.0)

    def test_broadcast_gradient_sums_back(self):
        """Gradient of a broadcast operand is summed over the batch."""
        b = variable([1.0, 2.0])
        batch = constant(np.ones((4, 2)))
        (g,) = grad(sum_(add(batch, b)), [b])
        assert np.array_equal(g.value, [4.0, 4.0])

    def test_matmul_gradient(self):
        """d/dW sum(X W) = X^T 1."""
        X = constant(np.arange(6.0).reshape(3, 2))
        W = variable(np.ones((2, 2)))
        (g,) = grad(sum_(matmul(X, W)), [W])
        assert np.allclose(g.value, X.value.T @ np.ones((3, 2)))

    def test_linearity(self):
        """grad(a f + b g) = a grad f + b grad g to roundoff."""
        a, b = 2.5, -0.75

        def f(v):
            return sum_(tanh(matvec(constant(A), v)))

        def g(v):
            return mul(norm(v), sum_(sin(v)))

        x = variable(POINT)
        (combined,) = grad(add(scale(f(x), a), scale(g(x), b)), [x])
        (gf,) = grad(f(x), [x])
        (gg,) = grad(g(x), [x])
        assert np.allclose(combined.value, a * gf.value + b * gg.value, rtol=1e-13, atol=1e-14)

    def test_identical_graphs_are_bit_identical(self):
        """Building the same graph twice gives the same values and gradients bit for bit."""
        def build():
            x = variable(POINT)
            W = variable(A)
            out = sum_(square(tanh(matmul(reshape(x, (1, 4)), transpose(W)))))
            return out, grad(out, [x, W])

        out1, (gx1, gW1) = build()
        out2, (gx2, gW2) = build()
        assert np.array_equal(out1.value, out2.value)
        assert np.array_equal(gx1.value, gx2.value)
        assert np.array_equal(gW1.value, gW2.value)

    def test_norm_at_zero_has_zero_subgradient(self):
        """The norm adjoint is finite at the zero vector."""
        x = variable(np.zeros(3))
        (g,) = grad(norm(x), [x])
        assert np.array_equal(g.value, np.zeros(3))

    @pytest.mark.parametrize("name,f", [
        ("tanh", lambda v: sum_(tanh(v))),
        ("sin_cos", lambda v: sum_(mul(sin(v), cos(v)))),
        ("norm", lambda v: norm(v)),
        ("matvec", lambda v: sum_(square(matvec(constant(A), v)))),
        ("mean", lambda v: mean(square(v))),
        ("concat", lambda v: sum_(mul(concat([v, square(v)]), constant(np.arange(1.0, 9.0))))),
        ("slice", lambda v: sum_(square(slice_(v, slice(1, 3))))),
        ("power", lambda v: sum_(power(add(square(v), 1.0), 1.5))),
        ("reshape_matmul", lambda v: sum_(square(matmul(reshape(v, (2, 2)), transpose(reshape(v, (2, 2))))))),
        ("broadcast", lambda v: sum_(mul(broadcast_to(reshape(v, (1, 4)), (3, 4)), constant(A)))),
        ("mean_axis", lambda v: sum_(square(mean(reshape(v, (2, 2)), axis=0)))),
        ("sub_scale", lambda v: sum_(square(sub(scale(v, 3.0), constant(POINT[::-1]))))),
    ])
    def test_matches_finite_differences(self, name, f):
        """Adjoint rules agree with central differences."""
        assert finite_difference_check(f, POINT) < 1e-6


class TestNestedGrad:
    """Differentiating gradients again."""

    def test_second_derivative(self):
        """d/dx sum(d/dx sum(x^3)) = 6x."""
        x = variable([1.0, -2.0])
        (g,) = grad(sum_(power(x, 3.0)), [x])
        assert isinstance(g, GraphNode) and g.requires_grad
        (h,) = grad(sum_(g), [x])
        assert np.allclose(h.value, [6.0, -12.0])

    def test_hessian(self):
        """Hessian of sum(x^3) is diag(6x)."""
        H = hessian(lambda v: sum_(power(v, 3.0)), [1.0, 2.0])
        assert np.allclose(H, np.diag([6.0, 12.0]))

    def test_hessian_is_symmetric(self):
        """Mixed partials agree."""
        H = hessian(lambda v: sum_(tanh(matvec(constant(A), v))), POINT)
        assert np.allclose(H, H.T, atol=1e-12)

    def test_gradient_of_input_gradient(self):
        """d/dw ||d/dx sum(tanh(w x))||^2 matches central differences."""
        x0 = np.array([0.5, 1.2, -0.7])

        def f(w):
            x = variable(x0)
            (z,) = grad(sum_(tanh(mul(w, x))), [x])
            return sum_(square(z))

        assert finite_difference_check(f, [0.4, -0.3, 0.8]) < 1e-6

    def test_finite_difference_rejects_bad_step(self):
        """Step must be positive."""
        with pytest.raises(ContractError):
            finite_difference_check(lambda v: sum_(v), [1.0], step=0.0)


class TestGraph:
    """Arena recording, replay and release."""

    def test_records_nodes_in_order(self):
        """Nodes built inside the context are recorded."""
        with Graph() as graph:
            x = variable([1.0, 2.0])
            y = square(x)
        assert graph.nodes[0] is x
        assert graph.nodes[-1] is y

    def test_replay_is_bit_exact(self):
        """Replaying recomputes identical values."""
        with Graph() as graph:
            x = variable(POINT)
            (g,) = grad(sum_(tanh(square(x))), [x])
            grad(sum_(g), [x])
        assert len(graph) > 0
        assert graph.replay() is True

    def test_release_drops_nodes(self):
        """release empties the arena."""
        with Graph() as graph:
            square(variable([1.0]))
        graph.release()
        assert len(graph) == 0

    def test_nodes_outside_context_not_recorded(self):
        """Only the active graph records."""
        with Graph() as graph:
            pass
        square(constant([1.0]))
        assert len(graph) == 0

    def test_graphs_are_thread_local(self):
        """A node built in another thread goes to that thread's graph."""
        with Graph() as graph:
            worker = threading.Thread(target=lambda: square(constant([2.0])))
            worker.start()
            worker.join()
        assert len(graph) == 0
