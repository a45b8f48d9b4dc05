"""
Tests the tensor module: forward values, analytic gradients against finite
differences, and the error contracts of the tape.

"""
import math
import unittest

import numpy as np

from src.moescope.errors import ContractError, DimensionError, NumericError
from src.moescope.gradcheck import check_gradients
from src.moescope.tensor import (
    Tape,
    Tensor,
    backward,
    cross_entropy,
    gather,
    layer_norm,
    log,
    logsumexp,
    matmul,
    scatter_rows,
    sigmoid,
    silu,
    softmax,
    take_rows,
    topk_indices,
)

GRAD_TOLERANCE = 1e-5


class TestForward(unittest.TestCase):
    """
    Check forward values of the numerically delicate operations
    """

    def test_softmax_reference_values(self):
        probs = softmax(Tensor([0.1, 0.3, 0.2, 0.4])).numpy()
        expected = [0.2138, 0.2612, 0.2363, 0.2887]
        for got, want in zip(probs, expected):
            self.assertAlmostEqual(got, want, delta=1e-4)
        self.assertAlmostEqual(probs.sum(), 1.0, places=12)

    def test_softmax_is_stable_for_large_logits(self):
        probs = softmax(Tensor([1000.0, 1000.0])).numpy()
        np.testing.assert_allclose(probs, [0.5, 0.5])

    def test_softmax_accepts_minus_infinity(self):
        probs = softmax(Tensor([0.0, -np.inf, 0.0])).numpy()
        np.testing.assert_allclose(probs, [0.5, 0.0, 0.5])

    def test_softmax_rejects_nan(self):
        with self.assertRaises(NumericError):
            softmax(Tensor([0.0, np.nan]))

    def test_logsumexp(self):
        values = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        got = logsumexp(Tensor(values)).numpy()
        np.testing.assert_allclose(
            got, np.log(np.exp(values).sum(axis=-1)), rtol=1e-12
        )
        self.assertAlmostEqual(got[1], math.log(3), places=12)

    def test_layer_norm_normalizes_rows(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(3.0, 2.0, (4, 16)))
        out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).numpy()
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)

    def test_cross_entropy_of_uniform_logits(self):
        logits = Tensor(np.zeros((3, 5)))
        loss = cross_entropy(logits, np.array([0, 4, -100]))
        self.assertAlmostEqual(loss.item(), math.log(5), places=12)

    def test_cross_entropy_all_ignored(self):
        with self.assertRaises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([-100, -100]))

    def test_cross_entropy_target_out_of_range(self):
        with self.assertRaises(DimensionError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_topk_ties_go_to_lowest_index(self):
        idx = topk_indices(np.array([[0.5, 0.9, 0.9, 0.1]]), 2)
        np.testing.assert_array_equal(idx, [[1, 2]])
        idx = topk_indices(np.zeros((1, 4)), 3)
        np.testing.assert_array_equal(idx, [[0, 1, 2]])

    def test_topk_rejects_bad_k(self):
        with self.assertRaises(ContractError):
            topk_indices(np.zeros((2, 3)), 4)
        with self.assertRaises(ContractError):
            topk_indices(np.zeros((2, 3)), 0)

    def test_matmul_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_broadcast_mismatch(self):
        with self.assertRaises(DimensionError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


class TestGradients(unittest.TestCase):
    """
    Check analytic gradients against central finite differences
    """

    def setUp(self):
        self.rng = np.random.default_rng(1234)

    def assert_gradients(self, loss_fn, params):
        errors = check_gradients(loss_fn, params)
        for name, error in errors.items():
            self.assertLess(error, GRAD_TOLERANCE, msg=name)

    def test_elementwise_and_reductions(self):
        params = {
            "a": self.rng.normal(size=(3, 4)),
            "b": self.rng.normal(size=(4,)),
        }

        def loss_fn(p):
            mixed = p["a"] * p["b"] + p["a"] / (1.5 + p["b"] ** 2)
            return (silu(mixed) - sigmoid(p["a"]).exp()).mean() + log(
                sigmoid(p["b"])
            ).sum()

        self.assert_gradients(loss_fn, params)

    def test_batched_matmul_reshape_transpose(self):
        params = {
            "x": self.rng.normal(size=(2, 3, 4)),
            "w": self.rng.normal(size=(4, 5)),
        }

        def loss_fn(p):
            out = matmul(p["x"], p["w"]).transpose(0, 2, 1)
            return (out.reshape(2, 15) ** 2).sum() * 0.1

        self.assert_gradients(loss_fn, params)

    def test_softmax_logsumexp_layer_norm(self):
        weights = self.rng.normal(size=(3, 6))
        params = {
            "x": self.rng.normal(size=(3, 6)),
            "gain": self.rng.normal(1.0, 0.1, size=(6,)),
            "bias": self.rng.normal(0.0, 0.1, size=(6,)),
        }

        def loss_fn(p):
            normed = layer_norm(p["x"], p["gain"], p["bias"])
            return (softmax(normed) * weights).sum() + logsumexp(
                normed
            ).mean()

        self.assert_gradients(loss_fn, params)

    def test_cross_entropy_with_ignored_targets(self):
        targets = np.array([[1, -100, 3], [0, 2, -100]])
        params = {"logits": self.rng.normal(size=(2, 3, 4))}

        def loss_fn(p):
            return cross_entropy(p["logits"], targets)

        self.assert_gradients(loss_fn, params)

    def test_row_gather_and_scatter(self):
        rows = np.array([2, 0, 2])
        params = {"table": self.rng.normal(size=(4, 3))}

        def loss_fn(p):
            picked = take_rows(p["table"], rows)
            spread = scatter_rows(picked * picked, np.array([1, 1, 3]), 5)
            gates = gather(p["table"], np.array([0, 3]), np.array([2, 1]))
            return spread.sum() + (gates * gates).sum()

        self.assert_gradients(loss_fn, params)


class TestTape(unittest.TestCase):
    """
    Check the bookkeeping contracts of Tape
    """

    def test_fan_out_accumulates(self):
        tape = Tape()
        x = tape.watch(np.array([2.0, 3.0]))
        loss = (x * x + x).sum()
        backward(loss)
        np.testing.assert_allclose(x.grad, [5.0, 7.0])

    def test_unreachable_leaf_has_no_gradient(self):
        tape = Tape()
        used = tape.watch(np.array([1.0]))
        unused = tape.watch(np.array([1.0]))
        grads = backward((used * 2.0).sum())
        self.assertIsNone(unused.grad)
        self.assertNotIn(unused.node_id, grads)

    def test_backward_needs_scalar(self):
        tape = Tape()
        x = tape.watch(np.ones(3))
        with self.assertRaises(ContractError):
            backward(x * 2.0)

    def test_tape_closes_after_backward(self):
        tape = Tape()
        x = tape.watch(np.ones(2))
        backward(x.sum())
        with self.assertRaises(ContractError):
            x * 2.0
        with self.assertRaises(ContractError):
            tape.watch(np.ones(2))

    def test_constants_do_not_record(self):
        tape = Tape()
        out = Tensor(np.ones(2)) * 3.0
        self.assertFalse(out.requires_grad)
        self.assertEqual(len(tape), 0)
        with self.assertRaises(ContractError):
            backward(out.sum())


if __name__ == "__main__":
    unittest.main()
