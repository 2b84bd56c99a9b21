"""
Fisher Information
Closed-form Fisher information for RSS measurements of the log-distance model,
its block-diagonal joint form, accumulation over measurements, and the scalar
costs used by the planner: tr(F^-1) and the diagonal-variance penalized form.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, block_diag, cho_factor, cho_solve, eigvalsh

from rss_model import (
    DISTANCE_EPS,
    PARAMS_PER_NODE,
    Position,
    ZeroDistanceError,
    theta_blocks,
)

logger = logging.getLogger(__name__)

LN10 = math.log(10.0)
_MACHINE_EPS = np.finfo(float).eps
_TINY = np.finfo(float).tiny
# Conditioning headroom required before a batched Cholesky result is trusted
_CHOLESKY_MARGIN = 1e2


@dataclass(frozen=True)
class HorizonCostConfig:
    """
    Settings of the lookahead cost.

    Attributes:
        discount: Geometric weight lambda applied to predicted information, 0 < discount <= 1
        beta: Growth rate of the diagonal-variance penalty, > 1
        epsilon_reg: Regularizer added before inversion; None selects the scale-aware default
        include_prior_info: Add the information already collected before inverting
    """

    discount: float = 0.9
    beta: float = 1.2
    epsilon_reg: Optional[float] = None
    include_prior_info: bool = True

    def __post_init__(self):
        if not 0 < self.discount <= 1:
            raise ValueError(f"discount must lie in (0, 1], got {self.discount}")
        if not self.beta > 1:
            raise ValueError(f"beta must be > 1, got {self.beta}")
        if self.epsilon_reg is not None and self.epsilon_reg < 0:
            raise ValueError(f"epsilon_reg must be >= 0, got {self.epsilon_reg}")


def discount_weights(discount: float, horizon: int) -> List[float]:
    """lambda^1 .. lambda^T."""
    return [discount ** i for i in range(1, horizon + 1)]


def mu_gradients(positions: np.ndarray, theta: np.ndarray):
    """
    Gradient of the mean RSS with respect to every node's parameters, for many
    agent positions at once.

    Args:
        positions: Agent positions, shape (n, 3)
        theta: Parameter vector of length 5M

    Returns:
        (g, valid): g has shape (n, M, 5) in [gamma, K, sx, sy, sz] order;
        valid is an (n, M) mask that is False where agent and node coincide
        (those rows of g are zeroed).
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    blocks = theta_blocks(theta)
    diff = pos[:, None, :] - blocks[None, :, 2:5]
    d2 = np.sum(diff * diff, axis=-1)
    d = np.sqrt(d2)
    valid = d >= DISTANCE_EPS

    safe_d = np.where(valid, d, 1.0)
    safe_d2 = np.where(valid, d2, 1.0)

    g = np.empty(diff.shape[:2] + (PARAMS_PER_NODE,))
    g[..., 0] = -np.log10(safe_d)
    g[..., 1] = 1.0
    g[..., 2:5] = blocks[None, :, 0, None] * diff / (safe_d2[..., None] * LN10)
    g[~valid] = 0.0
    return g, valid


def mu_gradient(x: Position, node_params: np.ndarray) -> np.ndarray:
    """
    Gradient of mean_rss with respect to one node's [gamma, K, sx, sy, sz].

    Raises:
        ZeroDistanceError: if x coincides with the hypothesized node position
    """
    g, valid = mu_gradients(x.as_array()[None, :], np.asarray(node_params, dtype=float).reshape(PARAMS_PER_NODE))
    if not valid[0, 0]:
        raise ZeroDistanceError(f"Agent at {x} coincides with hypothesized node position")
    return g[0, 0]


def fim_blocks_many(positions: np.ndarray, theta: np.ndarray, noise_vars: np.ndarray):
    """
    Per-node 5x5 information blocks for many agent positions.

    Returns:
        (blocks, valid): blocks has shape (n, M, 5, 5); valid is an (n,) mask,
        False where the position coincides with any hypothesized node.
    """
    noise_vars = np.asarray(noise_vars, dtype=float)
    g, valid = mu_gradients(positions, theta)
    if g.shape[1] != noise_vars.shape[0]:
        raise ValueError(f"Got {noise_vars.shape[0]} noise variances for {g.shape[1]} nodes")
    if np.any(noise_vars <= 0):
        raise ValueError("Noise variances must be positive")
    blocks = g[..., :, None] * g[..., None, :] / noise_vars[None, :, None, None]
    return blocks, valid.all(axis=1)


def fim_blocks(x: Position, theta: np.ndarray, noise_vars: np.ndarray) -> np.ndarray:
    """Per-node information blocks for one agent position, shape (M, 5, 5)."""
    blocks, valid = fim_blocks_many(x.as_array()[None, :], theta, noise_vars)
    if not valid[0]:
        raise ZeroDistanceError(f"Agent at {x} coincides with a hypothesized node position")
    return blocks[0]


def fim_single(x: Position, node_params: np.ndarray, noise_var: float) -> np.ndarray:
    """Expected information of one RSS measurement about one node: g g^T / sigma^2."""
    if not noise_var > 0:
        raise ValueError(f"noise_var must be > 0, got {noise_var}")
    return fim_blocks(x, np.asarray(node_params, dtype=float).reshape(PARAMS_PER_NODE), np.array([noise_var]))[0]


def fim_joint(x: Position, theta: np.ndarray, noise_vars: np.ndarray) -> np.ndarray:
    """Joint 5M x 5M information of one measurement round; block diagonal over nodes."""
    return join_blocks(fim_blocks(x, theta, noise_vars))


def join_blocks(blocks: np.ndarray) -> np.ndarray:
    return block_diag(*np.asarray(blocks, dtype=float))


def is_block_diagonal(F: np.ndarray, n_nodes: int) -> bool:
    F = np.asarray(F)
    mask = np.kron(np.eye(n_nodes, dtype=bool), np.ones((PARAMS_PER_NODE, PARAMS_PER_NODE), dtype=bool))
    return F.shape == mask.shape and not np.any(F[~mask])


def split_blocks(F: np.ndarray, n_nodes: int) -> np.ndarray:
    """Extract the (M, 5, 5) diagonal blocks of a 5M x 5M matrix."""
    F = np.asarray(F, dtype=float)
    dim = PARAMS_PER_NODE * n_nodes
    if F.shape != (dim, dim):
        raise ValueError(f"Expected a {dim}x{dim} matrix, got {F.shape}")
    idx = np.arange(n_nodes)
    blocks = F.reshape(n_nodes, PARAMS_PER_NODE, n_nodes, PARAMS_PER_NODE)[idx, :, idx, :]
    return np.ascontiguousarray(blocks)


def accumulate(fims: Sequence[np.ndarray], weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    Weighted sum of information matrices.

    Args:
        fims: Matrices of identical shape
        weights: Positive weights, one per matrix; all ones when omitted
    """
    if not fims:
        raise ValueError("Nothing to accumulate")
    if weights is None:
        weights = [1.0] * len(fims)
    if len(weights) != len(fims):
        raise ValueError(f"Got {len(weights)} weights for {len(fims)} matrices")

    shape = np.shape(fims[0])
    total = np.zeros(shape)
    for F, w in zip(fims, weights):
        if np.shape(F) != shape:
            raise ValueError(f"Dimension mismatch: {np.shape(F)} vs {shape}")
        if not w > 0:
            raise ValueError(f"Weights must be positive, got {w}")
        total = total + w * np.asarray(F, dtype=float)
    return total


def default_regularizer(F: np.ndarray) -> float:
    """Scale-aware inversion guard: 1e-9 * (1 + tr(F) / dim)."""
    F = np.asarray(F, dtype=float)
    return 1e-9 * (1.0 + float(np.trace(F)) / F.shape[0])


def _check_symmetric(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise ValueError(f"Information matrix must be square, got shape {F.shape}")
    scale = max(1.0, float(np.max(np.abs(F))) if F.size else 1.0)
    if not np.allclose(F, F.T, rtol=1e-10, atol=1e-12 * scale):
        raise ValueError("Information matrix is not symmetric")
    return 0.5 * (F + F.T)


def _singular(shifted_eigs: np.ndarray, dim: int) -> bool:
    scale = max(float(np.max(np.abs(shifted_eigs))), _TINY)
    return float(np.min(shifted_eigs)) <= dim * _MACHINE_EPS * scale


def cost_j1(F: np.ndarray, epsilon_reg: Optional[float] = None) -> float:
    """
    tr((F + eps I)^-1), the trace of the regularized inverse information.

    Uses a Cholesky factorization and falls back to the eigendecomposition
    when the factorization fails or is badly conditioned.

    Args:
        F: Symmetric positive semidefinite information matrix
        epsilon_reg: Regularizer; None selects default_regularizer(F)

    Returns:
        The trace, or math.inf when F + eps I is numerically singular
    """
    F = _check_symmetric(F)
    dim = F.shape[0]
    eps = default_regularizer(F) if epsilon_reg is None else float(epsilon_reg)
    if eps < 0:
        raise ValueError(f"epsilon_reg must be >= 0, got {eps}")
    A = F + eps * np.eye(dim)

    try:
        c, lower = cho_factor(A, lower=True)
        pivots = np.diag(c) ** 2
        if np.min(pivots) > dim * _MACHINE_EPS * max(float(np.max(np.abs(np.diag(A)))), _TINY):
            return float(np.trace(cho_solve((c, lower), np.eye(dim))))
    except LinAlgError:
        pass

    eigs = eigvalsh(A)
    if _singular(eigs, dim):
        logger.debug("Information matrix is numerically singular (min eigenvalue %.3e)", eigs.min())
        return math.inf
    return float(np.sum(1.0 / eigs))


def diagonal_variance(F: np.ndarray) -> float:
    """Population variance of the diagonal entries."""
    return float(np.var(np.diag(np.asarray(F, dtype=float))))


def cost_j2_penalty(F: np.ndarray, step_k: int, horizon_T: int, beta: float,
                    epsilon_reg: Optional[float] = None) -> float:
    """tr((F + eps I)^-1) + beta^(k+T) * Var(diag(F))."""
    if not beta > 1:
        raise ValueError(f"beta must be > 1, got {beta}")
    return cost_j1(F, epsilon_reg) + beta ** (step_k + horizon_T) * diagonal_variance(F)


# Packed layout: the 15 lower-triangle entries of a 5x5 block, row by row
_TRIL = [(i, j) for i in range(PARAMS_PER_NODE) for j in range(i + 1)]
_TRIL_INDEX = {pair: k for k, pair in enumerate(_TRIL)}
_DIAG_INDEX = [_TRIL_INDEX[i, i] for i in range(PARAMS_PER_NODE)]


def pack_blocks(blocks: np.ndarray) -> np.ndarray:
    """Lower-triangle entries of stacked 5x5 blocks, shape (15,) + blocks.shape[:-2]."""
    blocks = np.asarray(blocks, dtype=float)
    return np.stack([blocks[..., i, j] for i, j in _TRIL])


def unpack_blocks(packed: np.ndarray) -> np.ndarray:
    full = np.empty(packed.shape[1:] + (PARAMS_PER_NODE, PARAMS_PER_NODE))
    for k, (i, j) in enumerate(_TRIL):
        full[..., i, j] = packed[k]
        full[..., j, i] = packed[k]
    return full


def _trace_inverse_packed(packed: np.ndarray, shift) -> np.ndarray:
    """
    tr((A + shift I)^-1) for packed symmetric blocks.

    Factors A + shift I = L L^T entry by entry, inverts L by forward
    substitution and sums the squares of L^-1. Blocks whose factorization
    meets a non-positive pivot are NaN.
    """
    d = PARAMS_PER_NODE
    L: Dict = {}
    W: Dict = {}
    ok = np.ones(packed.shape[1:], dtype=bool)
    with np.errstate(over='ignore', divide='ignore', invalid='ignore'):
        for j in range(d):
            pivot = packed[_TRIL_INDEX[j, j]] + shift
            for k in range(j):
                pivot = pivot - L[j, k] * L[j, k]
            ok &= pivot > 0
            L[j, j] = np.sqrt(np.where(pivot > 0, pivot, 1.0))
            for i in range(j + 1, d):
                s = packed[_TRIL_INDEX[i, j]]
                for k in range(j):
                    s = s - L[i, k] * L[j, k]
                L[i, j] = s / L[j, j]

        trace = np.zeros(packed.shape[1:])
        for i in range(d):
            W[i, i] = 1.0 / L[i, i]
            trace = trace + W[i, i] * W[i, i]
            for j in range(i):
                s = L[i, j] * W[j, j]
                for k in range(j + 1, i):
                    s = s + L[i, k] * W[k, j]
                W[i, j] = -s * W[i, i]
                trace = trace + W[i, j] * W[i, j]
    return np.where(ok, trace, np.nan)


def plan_costs_packed(packed: np.ndarray, exponent: int, cfg: HorizonCostConfig,
                      use_penalty: bool, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """plan_costs for candidates already in packed form, shape (15, n, M)."""
    packed = np.asarray(packed, dtype=float)
    n, m = packed.shape[1:]
    dim = PARAMS_PER_NODE * m
    diag = np.stack([packed[k] for k in _DIAG_INDEX], axis=-1)

    if cfg.epsilon_reg is None:
        eps = 1e-9 * (1.0 + diag.reshape(n, dim).sum(axis=1) / dim)
    else:
        eps = np.full(n, float(cfg.epsilon_reg))

    block_traces = _trace_inverse_packed(packed, eps[:, None])
    # tr(A^-1) >= 1/lambda_min and tr(A) >= lambda_max, so passing this bound
    # implies the eigenvalue test below would pass too
    scale = np.maximum(np.max(diag.sum(axis=-1) + PARAMS_PER_NODE * eps[:, None], axis=1), _TINY)
    with np.errstate(divide='ignore', invalid='ignore'):
        reliable = np.all(1.0 / block_traces > _CHOLESKY_MARGIN * dim * _MACHINE_EPS * scale[:, None], axis=1)
    costs = np.where(reliable, np.sum(np.where(reliable[:, None], block_traces, 0.0), axis=1), np.inf)

    fallback = np.flatnonzero(~reliable)
    if fallback.size:
        blocks = unpack_blocks(packed[:, fallback])
        eigs = np.linalg.eigvalsh(blocks).reshape(fallback.size, dim) + eps[fallback, None]
        eig_scale = np.maximum(np.max(np.abs(eigs), axis=1), _TINY)
        singular = np.min(eigs, axis=1) <= dim * _MACHINE_EPS * eig_scale
        with np.errstate(divide='ignore'):
            fallback_costs = np.sum(1.0 / np.where(singular[:, None], 1.0, eigs), axis=1)
        costs[fallback] = np.where(singular, np.inf, fallback_costs)

    if use_penalty:
        costs = costs + cfg.beta ** exponent * diag.reshape(n, dim).var(axis=1)
    if valid is not None:
        costs = np.where(valid, costs, np.inf)
    return costs


def plan_costs(total_blocks: np.ndarray, exponent: int, cfg: HorizonCostConfig,
               use_penalty: bool, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Evaluate the lookahead cost of many block-diagonal information matrices.

    The trace of the inverse of a block-diagonal matrix is the sum over its
    blocks. Each block is inverted through a Cholesky factorization carried
    out over the whole batch at once; candidates with a badly conditioned
    block are scored from eigenvalues.

    Args:
        total_blocks: Candidate matrices as blocks, shape (n, M, 5, 5)
        exponent: Penalty exponent k + T
        cfg: Cost settings
        use_penalty: Add the diagonal-variance penalty
        valid: Optional (n,) mask; invalid candidates cost +inf

    Returns:
        Costs, shape (n,); +inf for singular or invalid candidates
    """
    return plan_costs_packed(pack_blocks(total_blocks), exponent, cfg, use_penalty, valid)


def horizon_objective(F_accumulated: np.ndarray, predicted_positions: Sequence[Position],
                      theta_hat: np.ndarray, noise_vars: np.ndarray, cfg: HorizonCostConfig,
                      step_k: int, use_penalty: bool) -> float:
    """
    Cost of a candidate T-step plan.

    Builds sum_i lambda^i * fim_joint(x_i, theta_hat), adds the information
    collected so far when cfg.include_prior_info is set, and returns the
    trace-of-inverse cost, penalized when use_penalty is set.

    Args:
        F_accumulated: Information collected so far, 5M x 5M
        predicted_positions: Positions after each of the T planned moves
        theta_hat: Current estimate the information is evaluated at
        noise_vars: Per-node noise variances
        cfg: Cost settings
        step_k: Current step index k
        use_penalty: Use the penalized cost

    Raises:
        ZeroDistanceError: if a predicted position coincides with a hypothesized node
    """
    if len(predicted_positions) < 1:
        raise ValueError("A plan needs at least one predicted position")
    noise_vars = np.asarray(noise_vars, dtype=float)
    m = noise_vars.shape[0]
    horizon = len(predicted_positions)
    weights = discount_weights(cfg.discount, horizon)

    if cfg.include_prior_info and not is_block_diagonal(F_accumulated, m):
        # General prior: fall back to dense arithmetic
        F = np.asarray(F_accumulated, dtype=float)
        for w, x in zip(weights, predicted_positions):
            F = F + w * fim_joint(x, theta_hat, noise_vars)
        if use_penalty:
            return cost_j2_penalty(F, step_k, horizon, cfg.beta, cfg.epsilon_reg)
        return cost_j1(F, cfg.epsilon_reg)

    if cfg.include_prior_info:
        total = split_blocks(F_accumulated, m)
    else:
        total = np.zeros((m, PARAMS_PER_NODE, PARAMS_PER_NODE))
    for w, x in zip(weights, predicted_positions):
        total = total + w * fim_blocks(x, theta_hat, noise_vars)
    return float(plan_costs(total[None], step_k + horizon, cfg, use_penalty)[0])


def information_map(node_params: np.ndarray, noise_var: float, xs: np.ndarray, ys: np.ndarray,
                    height: float, epsilon_reg: float = 1e-6) -> Dict[str, np.ndarray]:
    """
    Information landscape of a single measurement around one node.

    Evaluates fim_single on the grid (xs x ys) at a fixed agent height and
    returns the diagonal entries for gamma, sx, sy and sz together with the
    regularized trace of the inverse. Cells that coincide with the node are NaN.

    Returns:
        Dict of arrays of shape (len(ys), len(xs)) keyed 'gamma', 'sx', 'sy',
        'sz', 'trace_inverse'.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    gx, gy = np.meshgrid(xs, ys)
    positions = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(height))], axis=1)

    params = np.asarray(node_params, dtype=float).reshape(PARAMS_PER_NODE)
    blocks, valid = fim_blocks_many(positions, params, np.array([noise_var]))
    blocks = blocks[:, 0]
    diag = np.diagonal(blocks, axis1=-2, axis2=-1)

    eigs = np.linalg.eigvalsh(blocks) + epsilon_reg
    trace_inverse = np.sum(1.0 / eigs, axis=1)

    result = {}
    for name, col in (('gamma', 0), ('sx', 2), ('sy', 3), ('sz', 4)):
        result[name] = np.where(valid, diag[:, col], np.nan).reshape(gx.shape)
    result['trace_inverse'] = np.where(valid, trace_inverse, np.nan).reshape(gx.shape)
    return result
