"""
MLE Estimator
Maximum-likelihood estimation of every node's path-loss exponent, gain and
position from the RSS readings collected so far. The negative log-likelihood
is a weighted nonlinear least-squares objective, minimized with a
Polak-Ribiere conjugate gradient method and a backtracking Armijo line search,
restarted from several perturbed starting points.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from rss_model import (
    DISTANCE_EPS,
    PARAMS_PER_NODE,
    MeasurementRecord,
    ZeroDistanceError,
    node_positions,
    theta_blocks,
)

logger = logging.getLogger(__name__)

STATUS_CONVERGED = "gradient_converged"
STATUS_MAX_ITERATIONS = "max_iterations"
STATUS_STALLED = "line_search_stalled"


class EstimationError(RuntimeError):
    """The optimizer could not produce an estimate."""

    def __init__(self, message: str, iterate: Optional[np.ndarray] = None,
                 objective: Optional[float] = None):
        super().__init__(message)
        self.iterate = None if iterate is None else np.array(iterate, dtype=float)
        self.objective = objective


@dataclass(frozen=True)
class SolverConfig:
    """
    Settings of the conjugate gradient estimator.

    Attributes:
        max_iterations: Iteration cap per start
        gradient_tolerance: Stop when the gradient 2-norm falls below this
        backtrack_factor: Step contraction of the Armijo line search
        sufficient_decrease: Armijo constant
        max_backtracks: Contractions tried before the line search gives up
        restart_interval: Reset to steepest descent every this many iterations (None: 5M)
        multistart: Number of starts, the first being the supplied initial point
        warm_start: Start each step from the previous estimate rather than the initial one
        precondition: Solve with the per-node 5x5 Gauss-Newton blocks before each step
        position_jitter: Half-width of the uniform position perturbation, meters
        gamma_jitter: Half-width of the path-loss exponent perturbation
        k_jitter: Half-width of the gain perturbation, dB
        init_gamma: Path-loss exponent of the initial estimate
        init_k_gain: Gain of the initial estimate, dB
        init_height: Node height of the initial estimate, meters
        seed: Default seed of the multistart perturbations
        max_node_range: Reject estimates placing a node farther than this from
            every measurement position, meters (None: no limit)
    """

    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    backtrack_factor: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 60
    restart_interval: Optional[int] = None
    multistart: int = 4
    warm_start: bool = True
    precondition: bool = True
    position_jitter: float = 30.0
    gamma_jitter: float = 1.0
    k_jitter: float = 3.0
    init_gamma: float = 7.5
    init_k_gain: float = -20.0
    init_height: float = 5.0
    seed: int = 0
    max_node_range: Optional[float] = 500.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.gradient_tolerance > 0:
            raise ValueError(f"gradient_tolerance must be > 0, got {self.gradient_tolerance}")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError(f"backtrack_factor must lie in (0, 1), got {self.backtrack_factor}")
        if not 0 < self.sufficient_decrease < 1:
            raise ValueError(f"sufficient_decrease must lie in (0, 1), got {self.sufficient_decrease}")
        if self.restart_interval is not None and self.restart_interval < 1:
            raise ValueError(f"restart_interval must be >= 1, got {self.restart_interval}")
        if self.multistart < 1:
            raise ValueError(f"multistart must be >= 1, got {self.multistart}")
        if self.max_node_range is not None and not self.max_node_range > 0:
            raise ValueError(f"max_node_range must be > 0, got {self.max_node_range}")


class Dataset:
    """
    Measurements collected so far together with the per-node noise variances,
    which the estimator treats as known.
    """

    def __init__(self, noise_vars, measurements: Iterable[MeasurementRecord] = ()):
        """
        Args:
            noise_vars: Per-node noise variance sigma_j^2, dB^2
            measurements: Initial records
        """
        self.noise_vars = np.asarray(noise_vars, dtype=float).reshape(-1)
        if self.noise_vars.size == 0 or np.any(self.noise_vars <= 0):
            raise ValueError("Noise variances must be positive, one per node")
        self.measurements: List[MeasurementRecord] = []
        self._arrays = None
        self.extend(measurements)

    @property
    def n_nodes(self) -> int:
        return int(self.noise_vars.size)

    def __len__(self) -> int:
        return len(self.measurements)

    def add(self, record: MeasurementRecord):
        if not 1 <= record.node_id <= self.n_nodes:
            raise ValueError(f"node_id {record.node_id} outside 1..{self.n_nodes}")
        self.measurements.append(record)
        self._arrays = None

    def extend(self, records: Iterable[MeasurementRecord]):
        for record in records:
            self.add(record)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(positions (n, 3), zero-based node index (n,), rss (n,))"""
        if self._arrays is None:
            positions = np.array([m.agent_pos.as_list() for m in self.measurements], dtype=float).reshape(-1, 3)
            node_idx = np.array([m.node_id - 1 for m in self.measurements], dtype=int)
            rss = np.array([m.rss_db for m in self.measurements], dtype=float)
            self._arrays = (positions, node_idx, rss)
        return self._arrays


@dataclass
class MLEResult:
    """Estimate of the best start and how the optimizer got there."""

    theta: np.ndarray
    objective: float
    status: str
    iterations: int
    start_index: int = 0
    starts_tried: int = 1
    history: List[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED


def _model_terms(theta: np.ndarray, data: Dataset):
    """Residuals y - mu and the geometry needed for derivatives."""
    positions, node_idx, rss = data.arrays()
    blocks = theta_blocks(theta)
    if blocks.shape[0] != data.n_nodes:
        raise ValueError(f"Parameter vector describes {blocks.shape[0]} nodes, dataset has {data.n_nodes}")

    params = blocks[node_idx]
    diff = positions - params[:, 2:5]
    d2 = np.sum(diff * diff, axis=1)
    d = np.sqrt(d2)
    if np.any(d < DISTANCE_EPS):
        raise ZeroDistanceError("A measurement coincides with its hypothesized node position")
    residual = rss - (params[:, 1] - params[:, 0] * np.log10(d))
    return residual, params, diff, d, d2, node_idx


def neg_log_likelihood(theta: np.ndarray, data: Dataset) -> float:
    """
    Sum over measurements of (y - mu)^2 / (2 sigma^2).

    Raises:
        ZeroDistanceError: if a measurement sits on its hypothesized node
    """
    if len(data) == 0:
        return 0.0
    residual, _, _, _, _, node_idx = _model_terms(theta, data)
    return float(np.sum(residual * residual / (2.0 * data.noise_vars[node_idx])))


def _mean_partials(params: np.ndarray, diff: np.ndarray, d: np.ndarray, d2: np.ndarray) -> np.ndarray:
    """d mu / d [gamma, K, sx, sy, sz] per measurement, shape (n, 5)."""
    g = np.empty((d.size, PARAMS_PER_NODE))
    g[:, 0] = -np.log10(d)
    g[:, 1] = 1.0
    g[:, 2:5] = params[:, 0, None] * diff / (d2[:, None] * math.log(10.0))
    return g


def nll_gradient(theta: np.ndarray, data: Dataset) -> np.ndarray:
    """Analytic gradient of neg_log_likelihood, in parameter-vector order."""
    grad = np.zeros((data.n_nodes, PARAMS_PER_NODE))
    if len(data) == 0:
        return grad.reshape(-1)
    residual, params, diff, d, d2, node_idx = _model_terms(theta, data)
    scores = (residual / data.noise_vars[node_idx])[:, None] * _mean_partials(params, diff, d, d2)
    np.add.at(grad, node_idx, -scores)
    return grad.reshape(-1)


def _gauss_newton_blocks(theta: np.ndarray, data: Dataset) -> np.ndarray:
    """Per-node sum of g g^T / sigma^2 over the measurements, shape (M, 5, 5)."""
    _, params, diff, d, d2, node_idx = _model_terms(theta, data)
    g = _mean_partials(params, diff, d, d2)
    blocks = np.zeros((data.n_nodes, PARAMS_PER_NODE, PARAMS_PER_NODE))
    np.add.at(blocks, node_idx, g[:, :, None] * g[:, None, :] / data.noise_vars[node_idx, None, None])
    return blocks


def _block_solve(blocks: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """
    Apply the inverse of the ridged Gauss-Newton blocks to a gradient. The
    ridge is relative to each block's own diagonal.
    """
    rhs = grad.reshape(blocks.shape[0], PARAMS_PER_NODE)
    out = np.empty_like(rhs)
    for j, block in enumerate(blocks):
        diag = np.diag(block)
        floor = 1e-12 * max(float(np.max(diag)), np.finfo(float).tiny)
        ridged = block + np.diag(1e-10 * diag + floor)
        try:
            out[j] = cho_solve(cho_factor(ridged, lower=True), rhs[j])
        except LinAlgError:
            out[j] = rhs[j] / np.maximum(diag, floor)
    return out.reshape(-1)


def _safe_objective(theta: np.ndarray, data: Dataset) -> float:
    if not np.all(np.isfinite(theta)):
        return math.inf
    try:
        return neg_log_likelihood(theta, data)
    except ZeroDistanceError:
        return math.inf


def _minimize_pr_cg(theta0: np.ndarray, data: Dataset, cfg: SolverConfig):
    """
    Polak-Ribiere (PR+) nonlinear conjugate gradient from one starting point.

    Returns:
        (theta, objective, status, iterations, objective history)
    """
    x = np.array(theta0, dtype=float)
    f = neg_log_likelihood(x, data)
    if not math.isfinite(f):
        raise EstimationError("Non-finite objective at the starting point", iterate=x, objective=f)
    g = nll_gradient(x, data)
    restart_every = cfg.restart_interval or x.size

    def precondition(grad, point):
        if not cfg.precondition:
            return grad.copy()
        return _block_solve(_gauss_newton_blocks(point, data), grad)

    z = precondition(g, x)
    p = -z
    gz = float(g @ z)
    history = [f]
    status = STATUS_MAX_ITERATIONS
    steepest = True
    alpha_prev = None
    slope_prev = None
    iterations = 0

    for iterations in range(1, cfg.max_iterations + 1):
        if np.linalg.norm(g) <= cfg.gradient_tolerance:
            status = STATUS_CONVERGED
            iterations -= 1
            break

        slope = float(g @ p)
        if slope >= 0:
            # Lost descent: restart along the preconditioned gradient
            p = -z
            slope = -gz
            steepest = True

        if cfg.precondition:
            # Preconditioned directions are scaled like a Gauss-Newton step
            alpha = 1.0
        elif alpha_prev is None:
            alpha = 1.0 / max(1.0, float(np.linalg.norm(g)))
        else:
            alpha = float(np.clip(alpha_prev * slope_prev / slope, 1e-12, 10.0))

        accepted = False
        for _ in range(cfg.max_backtracks):
            x_new = x + alpha * p
            f_new = _safe_objective(x_new, data)
            if f_new <= f + cfg.sufficient_decrease * alpha * slope:
                accepted = True
                break
            alpha *= cfg.backtrack_factor

        if not accepted:
            if steepest:
                status = STATUS_STALLED
                break
            p = -z
            steepest = True
            alpha_prev = None
            continue

        g_new = nll_gradient(x_new, data)
        if not np.all(np.isfinite(g_new)):
            raise EstimationError("Non-finite gradient encountered", iterate=x_new, objective=f_new)
        z_new = precondition(g_new, x_new)

        if iterations % restart_every == 0 or gz <= 0:
            beta = 0.0
        else:
            beta = max(0.0, float(g_new @ (z_new - z)) / gz)
        p = -z_new + beta * p
        steepest = beta == 0.0

        x, f, g, z = x_new, f_new, g_new, z_new
        gz = float(g @ z)
        alpha_prev, slope_prev = alpha, slope
        history.append(f)
    else:
        if np.linalg.norm(g) <= cfg.gradient_tolerance:
            status = STATUS_CONVERGED

    return x, f, status, iterations, history


def _perturbed_start(theta: np.ndarray, rng: np.random.Generator, cfg: SolverConfig) -> np.ndarray:
    blocks = theta_blocks(theta).copy()
    m = blocks.shape[0]
    blocks[:, 0] += rng.uniform(-cfg.gamma_jitter, cfg.gamma_jitter, size=m)
    blocks[:, 1] += rng.uniform(-cfg.k_jitter, cfg.k_jitter, size=m)
    blocks[:, 2:5] += rng.uniform(-cfg.position_jitter, cfg.position_jitter, size=(m, 3))
    return blocks.reshape(-1)


def _node_range(theta: np.ndarray, data: Dataset) -> float:
    """Largest distance from a hypothesized node to the nearest measurement position."""
    positions, _, _ = data.arrays()
    nodes = node_positions(theta)
    dist = np.linalg.norm(nodes[:, None, :] - positions[None, :, :], axis=-1)
    return float(np.max(np.min(dist, axis=1)))


def estimate_mle(data: Dataset, theta_init: np.ndarray, cfg: SolverConfig,
                 seed: Optional[int] = None, extra_starts: Sequence[np.ndarray] = ()) -> MLEResult:
    """
    Maximum-likelihood estimate of all 5M parameters.

    Runs the conjugate gradient method from theta_init, from
    cfg.multistart - 1 randomly perturbed copies of it and from every entry
    of extra_starts, keeping the lowest objective. Results that put a node
    farther than cfg.max_node_range from all measurement positions are
    discarded. The result never has a higher objective than theta_init
    unless that start itself is discarded.

    Args:
        data: Measurements so far
        theta_init: Starting point (warm start)
        cfg: Solver settings
        seed: Seed of the perturbations; cfg.seed when omitted
        extra_starts: Further starting points tried without perturbation

    Returns:
        MLEResult of the best start

    Raises:
        EstimationError: on an empty dataset, a non-finite objective at
            theta_init, or when every start ends out of range
    """
    if len(data) == 0:
        raise EstimationError("Cannot estimate from an empty dataset")
    theta_init = np.array(theta_init, dtype=float)
    if theta_blocks(theta_init).shape[0] != data.n_nodes:
        raise ValueError(f"theta_init has {theta_init.size} entries, expected {PARAMS_PER_NODE * data.n_nodes}")
    if not np.all(np.isfinite(theta_init)):
        raise EstimationError("Initial parameter vector is not finite", iterate=theta_init)

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    starts = [theta_init] + [_perturbed_start(theta_init, rng, cfg) for _ in range(cfg.multistart - 1)]
    starts += [np.array(s, dtype=float) for s in extra_starts]

    best = None
    runaway = None
    for index, start in enumerate(starts):
        try:
            theta, objective, status, iterations, history = _minimize_pr_cg(start, data, cfg)
        except (ZeroDistanceError, EstimationError) as e:
            if index == 0:
                if isinstance(e, EstimationError):
                    raise
                raise EstimationError(f"Initial estimate is invalid: {e}", iterate=start) from e
            logger.debug("Start %d discarded: %s", index, e)
            continue

        if cfg.max_node_range is not None:
            reach = _node_range(theta, data)
            if reach > cfg.max_node_range:
                logger.debug("Start %d discarded: a node ended %.1f m from the nearest measurement", index, reach)
                runaway = (theta, objective, reach)
                continue

        if best is None or objective < best.objective:
            best = MLEResult(theta=theta, objective=objective, status=status, iterations=iterations,
                             start_index=index, history=history)

    if best is None:
        theta, objective, reach = runaway
        raise EstimationError(f"Every start placed a node out of range ({reach:.1f} m from the nearest "
                              f"measurement, limit {cfg.max_node_range:g} m)", iterate=theta, objective=objective)

    best.starts_tried = len(starts)
    if not best.converged:
        logger.debug("Best start %d ended with status %s after %d iterations",
                     best.start_index, best.status, best.iterations)
    return best


def initial_theta(n_nodes: int, region_x: Tuple[float, float], region_y: Tuple[float, float],
                  rng: np.random.Generator, gamma: float = 7.5, k_gain: float = -20.0,
                  height: float = 5.0) -> np.ndarray:
    """Uninformative starting estimate: fixed gamma, K and height, random horizontal position."""
    blocks = np.empty((n_nodes, PARAMS_PER_NODE))
    blocks[:, 0] = gamma
    blocks[:, 1] = k_gain
    blocks[:, 2] = rng.uniform(region_x[0], region_x[1], size=n_nodes)
    blocks[:, 3] = rng.uniform(region_y[0], region_y[1], size=n_nodes)
    blocks[:, 4] = height
    return blocks.reshape(-1)
