"""
Tests for the Fisher information of RSS measurements and the lookahead costs.
"""

import math

import numpy as np
import pytest

from fisher_information import (
    HorizonCostConfig,
    accumulate,
    cost_j1,
    cost_j2_penalty,
    diagonal_variance,
    discount_weights,
    fim_blocks,
    fim_joint,
    fim_single,
    horizon_objective,
    information_map,
    is_block_diagonal,
    join_blocks,
    mu_gradient,
    pack_blocks,
    plan_costs,
    plan_costs_packed,
    split_blocks,
    unpack_blocks,
)
from rss_model import NodeGroundTruth, Position, ZeroDistanceError, mean_rss, theta_from_nodes


def random_node_params(rng):
    return np.array([rng.uniform(5, 10), rng.uniform(-30, -10),
                     rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(0, 10)])


def mean_of(params, x):
    node = NodeGroundTruth(params[0], params[1], Position(*params[2:5]), 1.0)
    return mean_rss(x, node)


def brute_force_cost(F, eps):
    eigs = np.linalg.eigvalsh(F)
    return float(np.sum(1.0 / (eigs + eps)))


class TestMuGradient:
    def test_unit_distance_gamma_component(self):
        g = mu_gradient(Position(1, 0, 0), np.array([6.0, -20.0, 0, 0, 0]))
        assert g[0] == pytest.approx(0.0, abs=1e-15)

    def test_gain_component_is_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = Position(*rng.uniform(-100, 100, 3))
            assert mu_gradient(x, random_node_params(rng))[1] == 1.0

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            params = random_node_params(rng)
            x = Position(*(params[2:5] + rng.uniform(5, 60, 3) * rng.choice([-1, 1], 3)))
            g = mu_gradient(x, params)
            for i in range(5):
                h = 1e-5 * max(1.0, abs(params[i]))
                up, down = params.copy(), params.copy()
                up[i] += h
                down[i] -= h
                fd = (mean_of(up, x) - mean_of(down, x)) / (2 * h)
                assert fd == pytest.approx(g[i], rel=1e-6, abs=1e-9)

    def test_zero_distance(self):
        with pytest.raises(ZeroDistanceError):
            mu_gradient(Position(1, 2, 3), np.array([6.0, -20.0, 1, 2, 3]))


class TestFimSingle:
    def test_gain_entry_is_inverse_variance(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            F = fim_single(Position(*rng.uniform(-80, 80, 3)), random_node_params(rng), 2.5)
            assert F[1, 1] == pytest.approx(1 / 2.5, rel=1e-14)

    def test_rank_one_psd(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            F = fim_single(Position(*rng.uniform(-80, 80, 3)), random_node_params(rng), 3.0)
            np.testing.assert_allclose(F, F.T, atol=0)
            eigs = np.linalg.eigvalsh(F)
            assert eigs.min() >= -1e-10 * np.linalg.norm(F)
            assert np.linalg.matrix_rank(F) <= 1

    def test_rejects_bad_variance(self):
        with pytest.raises(ValueError):
            fim_single(Position(10, 0, 0), np.array([6.0, -20.0, 0, 0, 0]), 0.0)

    @pytest.mark.slow
    def test_matches_sampled_observed_information(self):
        params = np.array([6.5, -18.0, 3.0, -4.0, 2.0])
        x = Position(25.0, 10.0, 20.0)
        noise_var = 3.0
        g = mu_gradient(x, params)
        rng = np.random.default_rng(11)
        residuals = math.sqrt(noise_var) * rng.standard_normal(1_000_000)
        scores = (residuals / noise_var)[:, None] * g[None, :]
        sampled = scores.T @ scores / residuals.size
        F = fim_single(x, params, noise_var)
        significant = np.abs(F) > 1e-6 * np.linalg.norm(F)
        np.testing.assert_allclose(sampled[significant], F[significant], rtol=0.02)


class TestFimJoint:
    def setup_method(self):
        self.nodes = [
            NodeGroundTruth(6.0, -20.0, Position(10, 20, 3), 2.0),
            NodeGroundTruth(8.0, -12.0, Position(-40, 5, 7), 4.0),
        ]
        self.theta = theta_from_nodes(self.nodes)
        self.noise_vars = np.array([2.0, 4.0])
        self.x = Position(0, 0, 30)

    def test_block_traces(self):
        F = fim_joint(self.x, self.theta, self.noise_vars)
        parts = [fim_single(self.x, n.params(), n.noise_var) for n in self.nodes]
        assert np.trace(F) == pytest.approx(sum(np.trace(p) for p in parts), rel=1e-14)

    def test_off_block_entries_exactly_zero(self):
        F = fim_joint(self.x, self.theta, self.noise_vars)
        assert np.all(F[:5, 5:] == 0.0)
        assert np.all(F[5:, :5] == 0.0)
        assert is_block_diagonal(F, 2)

    def test_single_node_equals_fim_single(self):
        node = self.nodes[0]
        np.testing.assert_array_equal(fim_joint(self.x, node.params(), [2.0]), fim_single(self.x, node.params(), 2.0))

    def test_split_join(self):
        blocks = fim_blocks(self.x, self.theta, self.noise_vars)
        np.testing.assert_array_equal(split_blocks(join_blocks(blocks), 2), blocks)

    def test_zero_distance(self):
        with pytest.raises(ZeroDistanceError):
            fim_joint(Position(10, 20, 3), self.theta, self.noise_vars)

    def test_noise_variance_count(self):
        with pytest.raises(ValueError):
            fim_joint(self.x, self.theta, [1.0])


class TestAccumulate:
    def test_unit_weights(self):
        F = np.diag([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(accumulate([F, F]), 2 * F)

    def test_discount_one_is_plain_sum(self):
        rng = np.random.default_rng(5)
        fims = [np.diag(rng.uniform(1, 2, 4)) for _ in range(3)]
        np.testing.assert_allclose(accumulate(fims, discount_weights(1.0, 3)), sum(fims))

    def test_discounted_sum(self):
        F1, F2, F3 = np.diag([1.0, 0.0]), np.diag([0.0, 2.0]), np.ones((2, 2))
        expected = np.array([[0.9 + 0.729, 0.729], [0.729, 1.62 + 0.729]])
        np.testing.assert_allclose(accumulate([F1, F2, F3], discount_weights(0.9, 3)), expected, rtol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            accumulate([np.eye(2), np.eye(3)])

    def test_weights_must_be_positive(self):
        with pytest.raises(ValueError):
            accumulate([np.eye(2)], [0.0])


class TestCosts:
    def test_identity(self):
        assert cost_j1(np.eye(10), 0.0) == pytest.approx(10.0)

    def test_diagonal(self):
        assert cost_j1(np.diag([2.0, 4.0]), 0.0) == pytest.approx(0.75)

    def test_regularized_rank_one_matches_eigen_sum(self):
        g = np.array([1.0, 2.0, -0.5, 0.3, 4.0])
        F = np.outer(g, g)
        assert cost_j1(F, 1e-6) == pytest.approx(brute_force_cost(F, 1e-6), rel=1e-8)

    def test_singular_returns_inf(self):
        assert cost_j1(np.diag([1.0, 0.0]), 0.0) == math.inf

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            cost_j1(np.array([[1.0, 2.0], [0.0, 1.0]]), 0.0)

    def test_matches_eigen_sum_on_random_psd(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            A = rng.standard_normal((10, 10))
            F = A @ A.T
            assert cost_j1(F, 1e-3) == pytest.approx(brute_force_cost(F, 1e-3), rel=1e-8)

    def test_adding_information_never_increases_cost(self):
        rng = np.random.default_rng(7)
        theta = np.concatenate([random_node_params(rng) for _ in range(3)])
        noise_vars = np.array([2.0, 3.0, 4.0])
        F = np.zeros((15, 15))
        previous = cost_j1(F, 1e-6)
        for _ in range(15):
            F = F + fim_joint(Position(*rng.uniform(-100, 100, 3)), theta, noise_vars)
            current = cost_j1(F, 1e-6)
            assert current <= previous * (1 + 1e-12)
            previous = current

    def test_penalty_constant_diagonal(self):
        F = np.array([[2.0, 0.5], [0.5, 2.0]])
        assert cost_j2_penalty(F, 3, 2, 1.5, 0.0) == pytest.approx(cost_j1(F, 0.0))

    def test_penalty_example(self):
        F = np.diag([1.0, 3.0])
        assert diagonal_variance(F) == pytest.approx(1.0)
        assert cost_j2_penalty(F, 1, 1, 2.0, 0.0) == pytest.approx(1 + 1 / 3 + 4)

    def test_penalty_grows_by_beta(self):
        F = np.diag([1.0, 2.0, 5.0])
        base = cost_j1(F, 0.0)
        terms = [cost_j2_penalty(F, k, 2, 1.3, 0.0) - base for k in range(5)]
        ratios = [b / a for a, b in zip(terms, terms[1:])]
        np.testing.assert_allclose(ratios, 1.3, rtol=1e-10)

    def test_penalty_rejects_small_beta(self):
        with pytest.raises(ValueError):
            cost_j2_penalty(np.eye(2), 1, 1, 1.0)


class TestHorizonCostConfig:
    @pytest.mark.parametrize("kwargs", [
        {"discount": 0.0}, {"discount": 1.1}, {"beta": 1.0}, {"epsilon_reg": -1.0},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            HorizonCostConfig(**kwargs)


class TestHorizonObjective:
    def setup_method(self):
        self.theta = np.array([6.0, -20.0, 0.0, 0.0, 0.0, 8.0, -15.0, 30.0, -10.0, 5.0])
        self.noise_vars = np.array([2.0, 3.0])

    def test_single_step_equals_cost_of_one_round(self):
        cfg = HorizonCostConfig(discount=1.0, epsilon_reg=0.0)
        x = Position(10, 10, 10)
        value = horizon_objective(np.zeros((10, 10)), [x], self.theta, self.noise_vars, cfg, 0, False)
        assert value == cost_j1(fim_joint(x, self.theta, self.noise_vars), 0.0) == math.inf

    def test_discounted_plan_matches_hand_expansion(self):
        rng = np.random.default_rng(8)
        prior = sum(fim_joint(Position(*rng.uniform(-60, 60, 3)), self.theta, self.noise_vars) for _ in range(8))
        plan = [Position(20, 5, 10), Position(25, 10, 13)]
        for discount in (1.0, 0.5):
            cfg = HorizonCostConfig(discount=discount, epsilon_reg=1e-9)
            F = prior + discount * fim_joint(plan[0], self.theta, self.noise_vars) \
                + discount ** 2 * fim_joint(plan[1], self.theta, self.noise_vars)
            value = horizon_objective(prior, plan, self.theta, self.noise_vars, cfg, 4, False)
            assert value == pytest.approx(brute_force_cost(F, 1e-9), rel=1e-8)

    def test_penalty_uses_step_plus_horizon(self):
        rng = np.random.default_rng(9)
        prior = sum(fim_joint(Position(*rng.uniform(-60, 60, 3)), self.theta, self.noise_vars) for _ in range(8))
        plan = [Position(20, 5, 10), Position(25, 10, 13), Position(35, 10, 16)]
        cfg = HorizonCostConfig(discount=0.9, beta=1.2, epsilon_reg=1e-9)
        F = prior + sum(w * fim_joint(x, self.theta, self.noise_vars)
                        for w, x in zip(discount_weights(0.9, 3), plan))
        value = horizon_objective(prior, plan, self.theta, self.noise_vars, cfg, 4, True)
        expected = brute_force_cost(F, 1e-9) + 1.2 ** 7 * np.var(np.diag(F))
        assert value == pytest.approx(expected, rel=1e-8)

    def test_closer_plan_compared_with_oracle(self):
        rng = np.random.default_rng(10)
        prior = sum(fim_joint(Position(*rng.uniform(-60, 60, 3)), self.theta, self.noise_vars) for _ in range(10))
        cfg = HorizonCostConfig(discount=0.9, epsilon_reg=1e-9)
        plan_b = [Position(50, 50, 20), Position(60, 50, 20)]
        plan_a = [Position(50, 50, 20), Position(5, 3, 2)]
        values = []
        for plan in (plan_a, plan_b):
            F = prior + sum(w * fim_joint(x, self.theta, self.noise_vars)
                            for w, x in zip(discount_weights(0.9, 2), plan))
            values.append(brute_force_cost(F, 1e-9))
            assert horizon_objective(prior, plan, self.theta, self.noise_vars, cfg, 2, False) == \
                pytest.approx(values[-1], rel=1e-8)

    def test_horizon_only_form(self):
        prior = np.eye(10) * 1e6
        plan = [Position(20, 5, 10)]
        cfg = HorizonCostConfig(discount=1.0, epsilon_reg=1e-3, include_prior_info=False)
        F = fim_joint(plan[0], self.theta, self.noise_vars)
        value = horizon_objective(prior, plan, self.theta, self.noise_vars, cfg, 0, False)
        assert value == pytest.approx(brute_force_cost(F, 1e-3), rel=1e-8)

    def test_dense_prior_falls_back(self):
        rng = np.random.default_rng(12)
        A = rng.standard_normal((10, 10))
        prior = A @ A.T
        plan = [Position(20, 5, 10)]
        cfg = HorizonCostConfig(discount=1.0, epsilon_reg=1e-9)
        F = prior + fim_joint(plan[0], self.theta, self.noise_vars)
        value = horizon_objective(prior, plan, self.theta, self.noise_vars, cfg, 0, False)
        assert value == pytest.approx(brute_force_cost(F, 1e-9), rel=1e-8)

    def test_empty_plan(self):
        with pytest.raises(ValueError):
            horizon_objective(np.zeros((10, 10)), [], self.theta, self.noise_vars, HorizonCostConfig(), 0, False)


class TestPlanCosts:
    def test_matches_dense_costs(self):
        rng = np.random.default_rng(13)
        theta = np.concatenate([random_node_params(rng) for _ in range(2)])
        noise_vars = np.array([2.0, 5.0])
        mats = []
        for _ in range(4):
            F = sum(fim_joint(Position(*rng.uniform(-90, 90, 3)), theta, noise_vars) for _ in range(7))
            mats.append(F)
        blocks = np.stack([split_blocks(F, 2) for F in mats])
        cfg = HorizonCostConfig(epsilon_reg=1e-8, beta=1.5)
        np.testing.assert_allclose(plan_costs(blocks, 3, cfg, False), [cost_j1(F, 1e-8) for F in mats], rtol=1e-8)
        np.testing.assert_allclose(plan_costs(blocks, 3, cfg, True),
                                   [cost_j2_penalty(F, 1, 2, 1.5, 1e-8) for F in mats], rtol=1e-8)

    def test_invalid_candidates_cost_inf(self):
        blocks = np.stack([split_blocks(np.eye(5), 1)] * 2)
        costs = plan_costs(blocks, 1, HorizonCostConfig(epsilon_reg=0.0), False, np.array([True, False]))
        assert costs[0] == pytest.approx(5.0)
        assert costs[1] == math.inf


class TestInformationMap:
    def test_structure(self):
        xs = np.linspace(-20, 20, 41)
        ys = np.linspace(-20, 20, 41)
        maps = information_map(np.array([7.0, -20.0, 0.0, 0.0, 0.0]), 1.0, xs, ys, height=0.0)
        assert maps['sx'].shape == (41, 41)
        # sx information vanishes where the agent is level with the node in x
        centre = int(np.argmin(np.abs(xs)))
        finite = np.isfinite(maps['sx'][:, centre])
        np.testing.assert_allclose(maps['sx'][finite, centre], 0.0, atol=1e-20)
        # at a fixed radius it is largest along the x-axis: (10, 0) against (6, 8)
        row = int(np.argmin(np.abs(ys)))
        assert maps['sx'][row, 30] > maps['sx'][28, 26] > 0
        assert maps['sy'][row, 30] == pytest.approx(0.0, abs=1e-20)
        # the cell on the node is undefined
        assert math.isnan(maps['trace_inverse'][row, centre])

    def test_badly_conditioned_and_singular_blocks(self):
        cfg = HorizonCostConfig(epsilon_reg=0.0)
        blocks = np.stack([
            np.diag([1.0, 1e-13, 1.0, 1.0, 1.0])[None],
            np.diag([1.0, 1e-17, 1.0, 1.0, 1.0])[None],
            np.diag([1.0, -1.0, 1.0, 1.0, 1.0])[None],
            np.zeros((1, 5, 5)),
        ])
        costs = plan_costs(blocks, 1, cfg, False)
        assert costs[0] == pytest.approx(4.0 + 1e13, rel=1e-9)
        assert costs[1:].tolist() == [math.inf] * 3

    def test_batch_matches_single_candidates(self):
        rng = np.random.default_rng(14)
        theta = np.concatenate([random_node_params(rng) for _ in range(3)])
        noise_vars = np.array([2.0, 3.0, 5.0])
        candidates = []
        for n_meas in (1, 2, 4, 8, 1, 6):
            F = sum(fim_joint(Position(*rng.uniform(-90, 90, 3)), theta, noise_vars) for _ in range(n_meas))
            candidates.append(split_blocks(F, 3))
        blocks = np.stack(candidates)
        for cfg in (HorizonCostConfig(), HorizonCostConfig(epsilon_reg=1e-12)):
            batch = plan_costs(blocks, 2, cfg, True)
            single = [plan_costs(blocks[i:i + 1], 2, cfg, True)[0] for i in range(len(candidates))]
            np.testing.assert_array_equal(batch, single)

    def test_packed_form_matches(self):
        rng = np.random.default_rng(15)
        theta = np.concatenate([random_node_params(rng) for _ in range(2)])
        F = sum(fim_joint(Position(*rng.uniform(-90, 90, 3)), theta, np.array([2.0, 4.0])) for _ in range(9))
        blocks = split_blocks(F, 2)[None]
        packed = pack_blocks(blocks)
        assert packed.shape == (15, 1, 2)
        np.testing.assert_array_equal(unpack_blocks(packed), blocks)
        cfg = HorizonCostConfig()
        np.testing.assert_array_equal(plan_costs_packed(packed, 4, cfg, True), plan_costs(blocks, 4, cfg, True))
