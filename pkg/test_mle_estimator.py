"""
Tests for the maximum-likelihood estimator.
"""

import math

import numpy as np
import pytest

from fisher_information import cost_j1, fim_joint
from mle_estimator import (
    STATUS_CONVERGED,
    Dataset,
    EstimationError,
    SolverConfig,
    estimate_mle,
    initial_theta,
    neg_log_likelihood,
    nll_gradient,
)
from rss_model import MeasurementRecord, NodeGroundTruth, Position, mean_rss, sample_measurement, theta_from_nodes

NODES = (
    NodeGroundTruth(6.0, -20.0, Position(10.0, -15.0, 4.0), 2.0),
    NodeGroundTruth(8.5, -14.0, Position(-35.0, 20.0, 8.0), 3.0),
)


def spread_positions(n=30, seed=0):
    rng = np.random.default_rng(seed)
    return [Position(float(rng.uniform(-60, 60)), float(rng.uniform(-60, 60)), float(rng.uniform(15, 45)))
            for _ in range(n)]


def noiseless_dataset(nodes=NODES, positions=None):
    positions = positions or spread_positions()
    data = Dataset([n.noise_var for n in nodes])
    for step, x in enumerate(positions, 1):
        for j, node in enumerate(nodes, 1):
            data.add(MeasurementRecord(step, x, j, mean_rss(x, node)))
    return data


def noisy_dataset(seed, nodes=NODES, positions=None):
    positions = positions or spread_positions()
    rng = np.random.default_rng(seed)
    data = Dataset([n.noise_var for n in nodes])
    for step, x in enumerate(positions, 1):
        for j, node in enumerate(nodes, 1):
            data.add(MeasurementRecord(step, x, j, sample_measurement(x, node, rng)))
    return data


class TestDataset:
    def test_noise_variances_must_be_positive(self):
        with pytest.raises(ValueError):
            Dataset([1.0, 0.0])
        with pytest.raises(ValueError):
            Dataset([])

    def test_node_id_range(self):
        data = Dataset([1.0, 2.0])
        with pytest.raises(ValueError):
            data.add(MeasurementRecord(1, Position(0, 0, 0), 3, -40.0))

    def test_arrays(self):
        data = Dataset([1.0, 2.0], [MeasurementRecord(1, Position(1, 2, 3), 2, -40.0)])
        positions, idx, rss = data.arrays()
        np.testing.assert_array_equal(positions, [[1, 2, 3]])
        np.testing.assert_array_equal(idx, [1])
        np.testing.assert_array_equal(rss, [-40.0])
        data.add(MeasurementRecord(2, Position(4, 5, 6), 1, -41.0))
        assert data.arrays()[0].shape == (2, 3)


class TestNegLogLikelihood:
    def test_zero_at_truth_without_noise(self):
        assert neg_log_likelihood(theta_from_nodes(NODES), noiseless_dataset()) == pytest.approx(0.0, abs=1e-20)

    def test_single_residual(self):
        node = NodeGroundTruth(6.0, -20.0, Position(0, 0, 0), 2.0)
        x = Position(10, 0, 0)
        data = Dataset([2.0], [MeasurementRecord(1, x, 1, mean_rss(x, node) + 1.0)])
        assert neg_log_likelihood(node.params(), data) == pytest.approx(0.25)

    def test_matches_direct_summation(self):
        theta = np.array([7.0, -18.0, 1.0, 2.0, 3.0])
        records = [
            MeasurementRecord(1, Position(10, 0, 0), 1, -30.0),
            MeasurementRecord(2, Position(0, 20, 5), 1, -35.5),
            MeasurementRecord(3, Position(-5, -5, 40), 1, -29.0),
        ]
        data = Dataset([2.5], records)
        expected = 0.0
        for r in records:
            d = math.dist(r.agent_pos.as_list(), [1.0, 2.0, 3.0])
            mu = -18.0 - 7.0 * math.log10(d)
            expected += (r.rss_db - mu) ** 2 / (2 * 2.5)
        assert neg_log_likelihood(theta, data) == pytest.approx(expected, rel=1e-13)

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        data = noisy_dataset(1)
        for _ in range(20):
            theta = theta_from_nodes(NODES) + rng.normal(0, 5, 10)
            assert neg_log_likelihood(theta, data) >= 0.0

    def test_empty_dataset(self):
        assert neg_log_likelihood(theta_from_nodes(NODES), Dataset([2.0, 3.0])) == 0.0


class TestNllGradient:
    def test_zero_at_truth_without_noise(self):
        grad = nll_gradient(theta_from_nodes(NODES), noiseless_dataset())
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for trial in range(100):
            data = noisy_dataset(100 + trial, positions=spread_positions(8, seed=trial))
            theta = theta_from_nodes(NODES) + rng.normal(0, [0.5, 2, 5, 5, 2] * 2)
            grad = nll_gradient(theta, data)
            scale = max(1.0, float(np.linalg.norm(grad)))
            for i in range(theta.size):
                h = 1e-5 * max(1.0, abs(theta[i]))
                up, down = theta.copy(), theta.copy()
                up[i] += h
                down[i] -= h
                fd = (neg_log_likelihood(up, data) - neg_log_likelihood(down, data)) / (2 * h)
                assert fd == pytest.approx(grad[i], rel=1e-6, abs=1e-6 * scale)

    def test_gain_component_is_summed_residual(self):
        data = noisy_dataset(3)
        theta = theta_from_nodes(NODES) + 0.5
        positions, idx, rss = data.arrays()
        grad = nll_gradient(theta, data)
        for j, node in enumerate(NODES):
            gamma, k_gain = theta[5 * j], theta[5 * j + 1]
            s = theta[5 * j + 2:5 * j + 5]
            mask = idx == j
            mu = k_gain - gamma * np.log10(np.linalg.norm(positions[mask] - s, axis=1))
            expected = -np.sum(rss[mask] - mu) / node.noise_var
            assert grad[5 * j + 1] == pytest.approx(expected, rel=1e-12)


class TestSolverConfig:
    @pytest.mark.parametrize("kwargs", [
        {"max_iterations": 0}, {"gradient_tolerance": 0.0}, {"backtrack_factor": 1.0},
        {"sufficient_decrease": 0.0}, {"multistart": 0}, {"restart_interval": 0},
        {"max_node_range": 0.0}, {"max_node_range": -10.0},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            SolverConfig(**kwargs)


class TestEstimateMle:
    def test_empty_dataset(self):
        with pytest.raises(EstimationError):
            estimate_mle(Dataset([2.0, 3.0]), theta_from_nodes(NODES), SolverConfig())

    def test_non_finite_start(self):
        theta = theta_from_nodes(NODES)
        theta[3] = math.nan
        with pytest.raises(EstimationError) as info:
            estimate_mle(noiseless_dataset(), theta, SolverConfig())
        assert info.value.iterate is not None

    def test_recovers_truth_without_noise(self):
        truth = theta_from_nodes(NODES)
        rng = np.random.default_rng(4)
        start = truth * (1 + rng.uniform(-0.1, 0.1, truth.size))
        cfg = SolverConfig(max_iterations=5000, gradient_tolerance=1e-9, multistart=1)
        result = estimate_mle(noiseless_dataset(), start, cfg)
        assert np.max(np.abs(result.theta - truth)) < 1e-3

    def test_never_worse_than_start(self):
        data = noisy_dataset(5)
        truth = theta_from_nodes(NODES)
        result = estimate_mle(data, truth, SolverConfig(), seed=9)
        assert result.objective <= neg_log_likelihood(truth, data)

    def test_objective_history_nonincreasing(self):
        data = noisy_dataset(6)
        start = theta_from_nodes(NODES) + np.array([1, 3, 20, -20, 5] * 2, dtype=float)
        result = estimate_mle(data, start, SolverConfig(multistart=1))
        history = np.array(result.history)
        assert np.all(np.diff(history) <= 1e-12 * np.maximum(1.0, history[:-1]))

    def test_single_measurement(self):
        data = Dataset([2.0], [MeasurementRecord(1, Position(30, 10, 20), 1, -31.0)])
        result = estimate_mle(data, np.array([7.5, -20.0, 5.0, -5.0, 5.0]), SolverConfig())
        assert result.status == STATUS_CONVERGED
        assert np.all(np.isfinite(result.theta))

    def test_deterministic(self):
        data = noisy_dataset(7)
        start = theta_from_nodes(NODES) + 4.0
        a = estimate_mle(data, start, SolverConfig(), seed=123)
        b = estimate_mle(data, start, SolverConfig(), seed=123)
        np.testing.assert_array_equal(a.theta, b.theta)
        assert a.status == b.status and a.start_index == b.start_index
        assert a.starts_tried == 4

    def test_unpreconditioned_also_descends(self):
        data = noisy_dataset(8)
        start = theta_from_nodes(NODES) + 2.0
        result = estimate_mle(data, start, SolverConfig(precondition=False, multistart=1))
        assert result.objective <= neg_log_likelihood(start, data)

    def test_block_preconditioned_run_converges(self):
        truth = theta_from_nodes(NODES)
        rng = np.random.default_rng(12)
        start = truth * (1 + rng.uniform(-0.1, 0.1, truth.size))
        cfg = SolverConfig(max_iterations=500, gradient_tolerance=1e-6, multistart=1)
        result = estimate_mle(noiseless_dataset(), start, cfg)
        assert result.status == STATUS_CONVERGED
        assert np.max(np.abs(result.theta - truth)) < 1e-3

    def test_extra_starts_are_tried(self):
        data = noisy_dataset(10)
        truth = theta_from_nodes(NODES)
        poor = truth + np.array([-3, 8, 70, 70, 30] * 2, dtype=float)
        result = estimate_mle(data, poor, SolverConfig(multistart=2), seed=1, extra_starts=[truth])
        assert result.starts_tried == 3
        assert result.objective <= neg_log_likelihood(truth, data)

    def test_out_of_range_results_rejected(self):
        # Measurements fly at 15 m and above, both nodes sit below 10 m
        data = noisy_dataset(11)
        cfg = SolverConfig(multistart=2, max_node_range=1.0)
        with pytest.raises(EstimationError, match="out of range") as info:
            estimate_mle(data, theta_from_nodes(NODES), cfg)
        assert info.value.iterate is not None

    def test_range_limit_can_be_disabled(self):
        data = noisy_dataset(11)
        result = estimate_mle(data, theta_from_nodes(NODES), SolverConfig(multistart=1, max_node_range=None))
        assert np.all(np.isfinite(result.theta))

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            estimate_mle(noiseless_dataset(), np.zeros(5), SolverConfig())

    @pytest.mark.slow
    def test_mse_bracketed_by_crlb(self):
        node = NodeGroundTruth(6.0, -20.0, Position(0.0, 0.0, 5.0), 2.0)
        truth = node.params()
        angles = np.linspace(0, 2 * np.pi, 30, endpoint=False)
        positions = [Position(float(25 * np.cos(a)), float(25 * np.sin(a)), float(10 + 15 * (i % 3)))
                     for i, a in enumerate(angles)]
        F = sum(fim_joint(x, truth, [2.0]) for x in positions)
        bound = cost_j1(F, 0.0)

        cfg = SolverConfig(max_iterations=2000, gradient_tolerance=1e-8, multistart=1)
        errors = []
        for seed in range(200):
            data = noisy_dataset(seed, nodes=(node,), positions=positions)
            result = estimate_mle(data, truth, cfg)
            errors.append(np.sum((result.theta - truth) ** 2))
        mse = float(np.mean(errors))
        assert 0.8 * bound <= mse <= 5.0 * bound


class TestInitialTheta:
    def test_layout(self):
        theta = initial_theta(3, (-100, 100), (-50, 50), np.random.default_rng(0))
        blocks = theta.reshape(3, 5)
        np.testing.assert_array_equal(blocks[:, 0], 7.5)
        np.testing.assert_array_equal(blocks[:, 1], -20.0)
        np.testing.assert_array_equal(blocks[:, 4], 5.0)
        assert np.all(np.abs(blocks[:, 2]) <= 100)
        assert np.all(np.abs(blocks[:, 3]) <= 50)
