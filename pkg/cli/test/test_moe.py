"""
Tests the MoE layer: capacity bookkeeping, routing, auxiliary losses and
the sparse forward pass against a dense reference.

"""
import math
import unittest
from unittest import mock

import numpy as np

from src.moescope.errors import ConfigError, ContractError, DimensionError
from src.moescope.gradcheck import check_gradients
from src.moescope.moe import (
    RouterConfig,
    apply_capacity,
    balance_loss,
    dispatch_fractions,
    moe_forward,
    route,
    router_z_loss,
)
from src.moescope.tensor import Tape, Tensor, backward, softmax
from test.numeric_oracles import (
    brute_force_capacity,
    dense_moe,
    dense_swiglu,
    random_experts,
)


class TestRouterConfig(unittest.TestCase):
    """
    Check validation and the capacity formula
    """

    def test_capacity_formula(self):
        cfg = RouterConfig(num_experts=8, top_k=2, capacity_factor=1.25)
        # 1.25 * 16 * 2 / 8 = 5
        self.assertEqual(cfg.capacity(16), 5)
        # ceil(1.25 * 10 * 2 / 8) = ceil(3.125) = 4
        self.assertEqual(cfg.capacity(10), 4)
        # never below K
        self.assertEqual(cfg.capacity(1), 2)

    def test_capacity_is_not_inflated_by_float_noise(self):
        cfg = RouterConfig(num_experts=10, top_k=1, capacity_factor=1.1)
        # 1.1 * 100 / 10 is 11.000000000000002 in floating point
        self.assertEqual(cfg.capacity(100), 11)

    def test_expert_capacity_override(self):
        cfg = RouterConfig(num_experts=4, top_k=2, expert_capacity=3)
        self.assertEqual(cfg.capacity(1000), 3)
        with self.assertRaises(ConfigError):
            RouterConfig(num_experts=4, top_k=2, expert_capacity=1)

    def test_top_k_larger_than_experts(self):
        with self.assertRaises(ConfigError):
            RouterConfig(num_experts=2, top_k=3)

    def test_unknown_drop_policy(self):
        with self.assertRaises(ConfigError):
            RouterConfig(num_experts=2, top_k=1, drop_policy="random")


class TestCapacity(unittest.TestCase):
    """
    Check apply_capacity against a token-by-token scan
    """

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            num_experts = int(rng.integers(1, 9))
            top_k = int(rng.integers(1, num_experts + 1))
            num_tokens = int(rng.integers(1, 65))
            cfg = RouterConfig(
                num_experts=num_experts,
                top_k=top_k,
                capacity_factor=float(rng.uniform(0.25, 2.0)),
            )
            topk_idx = np.stack(
                [
                    rng.permutation(num_experts)[:top_k]
                    for _ in range(num_tokens)
                ]
            )
            order = rng.permutation(num_tokens) if rng.random() < 0.5 else None
            capacity = cfg.capacity(num_tokens)
            kept = apply_capacity(topk_idx, cfg, order=order)
            expected = brute_force_capacity(
                topk_idx, num_experts, capacity, order
            )
            np.testing.assert_array_equal(kept, expected)
            counts = np.bincount(topk_idx[kept], minlength=num_experts)
            self.assertLessEqual(counts.max(), capacity)

    def test_later_tokens_are_dropped(self):
        cfg = RouterConfig(num_experts=2, top_k=1, expert_capacity=2)
        kept = apply_capacity(np.zeros((6, 1), dtype=int), cfg)
        np.testing.assert_array_equal(
            kept[:, 0], [True, True, False, False, False, False]
        )

    def test_scan_order_decides_who_is_dropped(self):
        cfg = RouterConfig(num_experts=2, top_k=1, expert_capacity=2)
        kept = apply_capacity(
            np.zeros((4, 1), dtype=int), cfg, order=[3, 2, 1, 0]
        )
        np.testing.assert_array_equal(kept[:, 0], [False, False, True, True])

    def test_rank_zero_before_rank_one(self):
        cfg = RouterConfig(num_experts=2, top_k=2, expert_capacity=2)
        topk_idx = np.array([[1, 0], [0, 1], [0, 1]])
        kept = apply_capacity(topk_idx, cfg)
        np.testing.assert_array_equal(
            kept, [[True, True], [True, True], [False, False]]
        )


class TestRoute(unittest.TestCase):
    """
    Check top-k selection and gate values on known logits
    """

    def test_top_two_of_four(self):
        logits = np.array([0.1, 0.3, 0.2, 0.4])
        cfg = RouterConfig(num_experts=4, top_k=2)
        out = route(Tensor(np.ones((1, 4))), np.diag(logits), cfg)
        np.testing.assert_array_equal(out.topk_idx, [[3, 1]])
        np.testing.assert_allclose(
            out.gate_vals, [[0.2887, 0.2612]], rtol=0, atol=1e-4
        )
        expected = np.exp(logits[[3, 1]]) / np.exp(logits).sum()
        np.testing.assert_allclose(out.gate_vals[0], expected, rtol=1e-12)

    def test_gates_of_every_expert_sum_to_one(self):
        rng = np.random.default_rng(8)
        cfg = RouterConfig(num_experts=2, top_k=2)
        out = route(
            Tensor(rng.normal(size=(6, 3))), rng.normal(size=(3, 2)), cfg
        )
        np.testing.assert_allclose(out.gate_vals.sum(axis=1), 1.0)

    def test_ties_go_to_the_lowest_expert(self):
        cfg = RouterConfig(num_experts=4, top_k=2)
        out = route(Tensor(np.ones((3, 5))), np.zeros((5, 4)), cfg)
        np.testing.assert_array_equal(out.topk_idx, [[0, 1]] * 3)
        np.testing.assert_allclose(out.gate_vals, 0.25)


class TestAuxiliaryLosses(unittest.TestCase):
    """
    Check the balance and router z losses on known inputs
    """

    def test_balance_loss_of_a_collapsed_router(self):
        probs = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        loss = balance_loss(probs, np.array([[0], [0]]), 1)
        self.assertAlmostEqual(loss.item(), 2.0, delta=1e-12)

    def test_balance_loss_matches_the_formula(self):
        rng = np.random.default_rng(13)
        for num_experts, top_k in ((3, 1), (4, 2), (8, 2)):
            num_tokens = 10
            probs = rng.dirichlet(np.ones(num_experts), size=num_tokens)
            topk_idx = np.stack(
                [
                    rng.permutation(num_experts)[:top_k]
                    for _ in range(num_tokens)
                ]
            )
            expected = 0.0
            for expert in range(num_experts):
                m = (topk_idx == expert).any(axis=1).mean()
                expected += m * probs[:, expert].mean()
            expected *= num_experts / top_k
            loss = balance_loss(Tensor(probs), topk_idx, top_k).item()
            self.assertAlmostEqual(loss, expected, delta=1e-12)

    def test_router_z_loss_of_constant_logits(self):
        logits = Tensor(np.full((3, 4), 2.0))
        self.assertAlmostEqual(
            router_z_loss(logits).item(),
            (2.0 + math.log(4)) ** 2,
            delta=1e-9,
        )

    def test_balance_loss_is_one_when_balanced(self):
        for num_experts in (2, 4, 8, 32):
            for top_k in (1, 2):
                num_tokens = num_experts * 4
                uniform = np.full((num_tokens, num_experts), 1 / num_experts)
                probs = Tensor(uniform)
                topk_idx = np.stack(
                    [
                        (np.arange(top_k) + token) % num_experts
                        for token in range(num_tokens)
                    ]
                )
                loss = balance_loss(probs, topk_idx, top_k).item()
                self.assertAlmostEqual(loss, 1.0, delta=1e-9)

    def test_router_z_loss_of_zero_logits(self):
        for num_experts in (2, 4, 8, 32):
            logits = Tensor(np.zeros((5, num_experts)))
            self.assertAlmostEqual(
                router_z_loss(logits).item(),
                math.log(num_experts) ** 2,
                delta=1e-9,
            )

    def test_dispatch_fractions_sum_to_k(self):
        topk_idx = np.array([[0, 1], [0, 2], [3, 0]])
        m = dispatch_fractions(topk_idx, 4)
        np.testing.assert_allclose(m, [1.0, 1 / 3, 1 / 3, 1 / 3])
        self.assertAlmostEqual(m.sum(), 2.0)

    def test_balance_loss_gradient_flows_through_probs(self):
        rng = np.random.default_rng(3)
        topk_idx = np.array([[0, 1], [2, 0], [1, 2], [0, 2]])
        params = {"logits": rng.normal(size=(4, 3))}

        def loss_fn(p):
            return balance_loss(softmax(p["logits"]), topk_idx, 2) + (
                router_z_loss(p["logits"])
            )

        errors = check_gradients(loss_fn, params)
        self.assertLess(errors["logits"], 1e-5)


class TestMoEForward(unittest.TestCase):
    """
    Check the sparse MoE layer against dense masked evaluation
    """

    def test_matches_dense_evaluation(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            num_experts = int(rng.integers(1, 5))
            top_k = int(rng.integers(1, num_experts + 1))
            num_tokens = int(rng.integers(1, 9))
            width, hidden = 4, 6
            cfg = RouterConfig(
                num_experts=num_experts,
                top_k=top_k,
                capacity_factor=float(rng.uniform(0.5, 1.5)),
            )
            x = rng.normal(size=(num_tokens, width))
            router_weights = rng.normal(size=(width, num_experts))
            experts = random_experts(rng, num_experts, width, hidden)
            out = moe_forward(Tensor(x), experts, router_weights, cfg)
            expected = dense_moe(
                x,
                experts,
                router_weights,
                out.router.topk_idx,
                out.router.kept,
            )
            np.testing.assert_allclose(
                out.y.numpy(), expected, rtol=0, atol=1e-12
            )

    def test_records_and_drop_fraction(self):
        rng = np.random.default_rng(5)
        cfg = RouterConfig(num_experts=2, top_k=1, expert_capacity=1)
        x = rng.normal(size=(4, 3))
        # Every token prefers expert 0
        router_weights = np.zeros((3, 2))
        out = moe_forward(
            Tensor(x), random_experts(rng, 2, 3, 5), router_weights, cfg
        )
        self.assertEqual(len(out.records), 4)
        self.assertEqual(out.records[0].experts, (0,))
        self.assertEqual(
            [record.kept for record in out.records],
            [(True,), (False,), (False,), (False,)],
        )
        self.assertAlmostEqual(out.router.drop_fraction, 0.75)
        # Dropped tokens get a zero expert output
        np.testing.assert_array_equal(out.y.numpy()[1:], 0.0)

    def test_gradients_without_drops(self):
        rng = np.random.default_rng(21)
        cfg = RouterConfig(num_experts=2, top_k=2, expert_capacity=16)
        width, hidden = 3, 4
        params = {"x": rng.normal(size=(5, width))}
        params["router"] = rng.normal(size=(width, 2))
        for e, (w_gate, w_up, w_out) in enumerate(
            random_experts(rng, 2, width, hidden)
        ):
            params[f"gate{e}"], params[f"up{e}"] = w_gate, w_up
            params[f"out{e}"] = w_out

        def loss_fn(p):
            experts = [
                (p[f"gate{e}"], p[f"up{e}"], p[f"out{e}"]) for e in range(2)
            ]
            out = moe_forward(p["x"], experts, p["router"], cfg)
            return (out.y * out.y).sum() + out.aux.router_z_loss

        errors = check_gradients(loss_fn, params)
        for name, error in errors.items():
            self.assertLess(error, 1e-5, msg=name)

    def test_single_expert_is_a_plain_ffn(self):
        rng = np.random.default_rng(17)
        cfg = RouterConfig(num_experts=1, top_k=1)
        x = rng.normal(size=(5, 3))
        experts = random_experts(rng, 1, 3, 4)
        out = moe_forward(Tensor(x), experts, rng.normal(size=(3, 1)), cfg)
        self.assertTrue(out.router.kept.all())
        np.testing.assert_allclose(
            out.y.numpy(), dense_swiglu(x, *experts[0]), rtol=0, atol=1e-12
        )

    def test_kept_assignments_never_exceed_capacity(self):
        cfg = RouterConfig(num_experts=2, top_k=1, expert_capacity=1)
        rng = np.random.default_rng(4)

        def keep_everything(topk_idx, cfg, order=None, capacity=None):
            return np.ones(np.shape(topk_idx), dtype=bool)

        with mock.patch(
            "src.moescope.moe.apply_capacity", side_effect=keep_everything
        ):
            with self.assertRaises(ContractError):
                moe_forward(
                    Tensor(rng.normal(size=(4, 3))),
                    random_experts(rng, 2, 3, 5),
                    np.zeros((3, 2)),
                    cfg,
                )

    def test_wrong_number_of_experts(self):
        cfg = RouterConfig(num_experts=3, top_k=1)
        rng = np.random.default_rng(0)
        with self.assertRaises(ConfigError):
            moe_forward(
                Tensor(np.ones((2, 3))),
                random_experts(rng, 2, 3, 4),
                np.zeros((3, 3)),
                cfg,
            )

    def test_router_weight_shape(self):
        cfg = RouterConfig(num_experts=3, top_k=1)
        with self.assertRaises(DimensionError):
            route(Tensor(np.ones((2, 3))), np.zeros((4, 3)), cfg)

    def test_unused_expert_receives_no_gradient(self):
        rng = np.random.default_rng(2)
        cfg = RouterConfig(num_experts=2, top_k=1, expert_capacity=8)
        tape = Tape()
        x = tape.watch(rng.normal(size=(3, 2)))
        router = tape.watch(np.array([[5.0, -5.0], [5.0, -5.0]]))
        experts = [
            tuple(tape.watch(w) for w in expert)
            for expert in random_experts(rng, 2, 2, 3)
        ]
        x.data[:] = np.abs(x.data)
        out = moe_forward(x, experts, router, cfg)
        backward(out.y.sum())
        self.assertIsNotNone(experts[0][0].grad)
        self.assertIsNone(experts[1][0].grad)


if __name__ == "__main__":
    unittest.main()
