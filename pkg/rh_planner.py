"""
Receding Horizon Planner
Chooses where the agent flies next so that the upcoming measurements are as
informative as possible about the node parameters. Four strategies are
available (random, greedy, exhaustive DP, pruned DP); rh_loop alternates
measure / estimate / plan and applies only the first planned move.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fisher_information import (
    HorizonCostConfig,
    cost_j1,
    discount_weights,
    fim_blocks_many,
    fim_joint,
    is_block_diagonal,
    pack_blocks,
    plan_costs,
    plan_costs_packed,
    split_blocks,
)
from mle_estimator import Dataset, EstimationError, SolverConfig, estimate_mle
from rss_model import (
    PARAMS_PER_NODE,
    SIMULATOR_VERSION,
    ControlAction,
    MeasurementRecord,
    Position,
    Scenario,
    SeedStreams,
    ZeroDistanceError,
    action_set,
    apply_control,
    sample_measurement,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("random", "greedy", "dp", "dp_pruned")


class PlanningError(RuntimeError):
    """No admissible plan could be produced."""


@dataclass(frozen=True)
class PlannerConfig:
    """
    Settings of the action-selection strategy.

    Attributes:
        strategy: One of random, greedy, dp, dp_pruned
        horizon_T: Lookahead length in moves
        prune_width: Partial plans kept per stage by dp_pruned (M_u)
        use_penalty: Rank plans with the diagonal-variance penalized cost
        cost: Lookahead cost settings
        radius: Horizontal move length r, meters
        climb: Vertical move height h, meters
        dp_cap: Largest number of complete plans dp may enumerate
        chunk_plans: Candidates evaluated per vectorized batch
    """

    strategy: str = "dp_pruned"
    horizon_T: int = 5
    prune_width: int = 24
    use_penalty: bool = False
    cost: HorizonCostConfig = field(default_factory=HorizonCostConfig)
    radius: float = 10.0
    climb: float = 3.0
    dp_cap: float = 1e9
    chunk_plans: int = 16384

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"Unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.horizon_T < 1:
            raise ValueError(f"horizon_T must be >= 1, got {self.horizon_T}")
        if self.prune_width < 1:
            raise ValueError(f"prune_width must be >= 1, got {self.prune_width}")
        if self.chunk_plans < 1:
            raise ValueError(f"chunk_plans must be >= 1, got {self.chunk_plans}")

    def actions(self) -> List[ControlAction]:
        return action_set(self.radius, self.climb)

    @property
    def label(self) -> str:
        if self.use_penalty and self.strategy in ("dp", "dp_pruned"):
            return f"{self.strategy}_penalty"
        return self.strategy


@dataclass
class AgentState:
    """Everything the planner needs at step k."""

    position: Position
    info: np.ndarray
    theta_hat: np.ndarray
    step_k: int
    dataset: Dataset

    @property
    def n_nodes(self) -> int:
        return self.dataset.n_nodes

    @property
    def noise_vars(self) -> np.ndarray:
        return self.dataset.noise_vars


@dataclass
class EvaluationCounter:
    """Counts cost evaluations made by the planners."""

    full_plans: int = 0
    stage_evaluations: List[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.full_plans + sum(self.stage_evaluations)


def _action_array(actions: Sequence[ControlAction]) -> np.ndarray:
    if not actions:
        raise PlanningError("The action set is empty")
    return np.array([[a.dx, a.dy, a.dz] for a in actions], dtype=float)


def _prior_blocks(state: AgentState, cost: HorizonCostConfig) -> np.ndarray:
    m = state.n_nodes
    if not cost.include_prior_info:
        return np.zeros((m, PARAMS_PER_NODE, PARAMS_PER_NODE))
    if not is_block_diagonal(state.info, m):
        raise PlanningError("Accumulated information is not block diagonal over nodes")
    return split_blocks(state.info, m)


def _expand(positions: np.ndarray, blocks: np.ndarray, valid: np.ndarray, indices: np.ndarray,
            depth: int, action_arr: np.ndarray, weights: List[float], state: AgentState):
    """Extend every partial plan by every action; children come out in lexicographic order."""
    n, n_u = positions.shape[0], action_arr.shape[0]
    child_pos = (positions[:, None, :] + action_arr[None, :, :]).reshape(n * n_u, 3)
    new_blocks, new_valid = fim_blocks_many(child_pos, state.theta_hat, state.noise_vars)
    m = blocks.shape[1]
    child_blocks = (blocks[:, None] + weights[depth] * new_blocks.reshape(n, n_u, m, PARAMS_PER_NODE, PARAMS_PER_NODE))
    child_valid = (valid[:, None] & new_valid.reshape(n, n_u)).reshape(-1)
    child_idx = np.concatenate(
        [np.repeat(indices, n_u, axis=0), np.tile(np.arange(n_u), n)[:, None]], axis=1)
    return child_pos, child_blocks.reshape(n * n_u, m, PARAMS_PER_NODE, PARAMS_PER_NODE), child_valid, child_idx


def _root(state: AgentState, cfg: PlannerConfig):
    prior = _prior_blocks(state, cfg.cost)
    return (state.position.as_array()[None, :], prior[None], np.array([True]),
            np.zeros((1, 0), dtype=int))


def _position_levels(state: AgentState, action_arr: np.ndarray, weights: List[float]):
    """
    Distinct predicted positions per depth with their weighted information.

    Plans reaching the same point at the same depth share its blocks, so each
    depth stores (packed weighted blocks, valid mask, transition table) where
    the table maps a parent position and an action to a child position.
    """
    n_u = action_arr.shape[0]
    current = state.position.as_array()[None, :]
    levels = []
    for w in weights:
        child = (current[:, None, :] + action_arr[None, :, :]).reshape(-1, 3)
        unique, inverse = np.unique(child, axis=0, return_inverse=True)
        blocks, valid = fim_blocks_many(unique, state.theta_hat, state.noise_vars)
        levels.append((pack_blocks(w * blocks), valid, inverse.reshape(current.shape[0], n_u)))
        current = unique
    return levels


def _search_exhaustive(state: AgentState, actions: Sequence[ControlAction], cfg: PlannerConfig,
                       counter: Optional[EvaluationCounter]) -> Tuple[List[int], float]:
    action_arr = _action_array(actions)
    n_u = action_arr.shape[0]
    horizon = cfg.horizon_T
    if float(n_u) ** horizon > cfg.dp_cap:
        raise PlanningError(
            f"Exhaustive search over {n_u}^{horizon} plans exceeds the cap of {cfg.dp_cap:.3g}; "
            f"use the dp_pruned strategy instead")
    levels = _position_levels(state, action_arr, discount_weights(cfg.cost.discount, horizon))
    exponent = state.step_k + horizon
    rows_per_chunk = max(1, cfg.chunk_plans // n_u)
    best = {'cost': np.inf, 'indices': None}

    def descend(nodes, packed, valid, indices, depth):
        if depth == horizon:
            costs = plan_costs_packed(packed, exponent, cfg.cost, cfg.use_penalty, valid)
            if counter is not None:
                counter.full_plans += costs.size
            i = int(np.argmin(costs))
            if costs[i] < best['cost']:
                best['cost'] = float(costs[i])
                best['indices'] = indices[i].tolist()
            return
        n = nodes.shape[0]
        if n > rows_per_chunk:
            for lo in range(0, n, rows_per_chunk):
                rows = slice(lo, lo + rows_per_chunk)
                descend(nodes[rows], packed[:, rows], valid[rows], indices[rows], depth)
            return
        level_packed, level_valid, transitions = levels[depth]
        children = transitions[nodes].reshape(-1)
        n_entries, _, m = packed.shape
        child_packed = packed[:, :, None] + np.take(level_packed, children, axis=1).reshape(n_entries, n, n_u, m)
        child_valid = valid[:, None] & level_valid[children].reshape(n, n_u)
        child_idx = np.concatenate(
            [np.repeat(indices, n_u, axis=0), np.tile(np.arange(n_u), n)[:, None]], axis=1)
        descend(children, child_packed.reshape(n_entries, n * n_u, m), child_valid.reshape(-1),
                child_idx, depth + 1)

    prior = pack_blocks(_prior_blocks(state, cfg.cost))
    descend(np.zeros(1, dtype=int), prior[:, None, :], np.array([True]), np.zeros((1, 0), dtype=int), 0)
    if best['indices'] is None:
        raise PlanningError(f"Every candidate plan has a non-finite cost at step {state.step_k} "
                            f"from {state.position}")
    return best['indices'], best['cost']


def _search_beam(state: AgentState, actions: Sequence[ControlAction], cfg: PlannerConfig,
                 width: int, horizon: int,
                 counter: Optional[EvaluationCounter]) -> Tuple[List[int], float]:
    action_arr = _action_array(actions)
    weights = discount_weights(cfg.cost.discount, horizon)
    positions, blocks, valid, indices = _root(state, cfg)

    costs = None
    for depth in range(horizon):
        positions, blocks, valid, indices = _expand(positions, blocks, valid, indices, depth,
                                                    action_arr, weights, state)
        costs = plan_costs(blocks, state.step_k + depth + 1, cfg.cost, cfg.use_penalty, valid)
        if counter is not None:
            counter.stage_evaluations.append(int(costs.size))
        # Rank by cost, ties by lexicographic action indices
        keys = tuple(indices[:, j] for j in range(indices.shape[1] - 1, -1, -1)) + (costs,)
        keep = np.lexsort(keys)[:width]
        positions, blocks, valid, indices, costs = (
            positions[keep], blocks[keep], valid[keep], indices[keep], costs[keep])

    if not np.isfinite(costs[0]):
        raise PlanningError(f"Every candidate plan has a non-finite cost at step {state.step_k} "
                            f"from {state.position}")
    return indices[0].tolist(), float(costs[0])


def random_step(state: AgentState, actions: Sequence[ControlAction], rng: np.random.Generator) -> ControlAction:
    """Pick one action uniformly at random."""
    if not actions:
        raise PlanningError("The action set is empty")
    return actions[int(rng.integers(len(actions)))]


def greedy_step(state: AgentState, actions: Sequence[ControlAction], cfg: PlannerConfig,
                counter: Optional[EvaluationCounter] = None) -> ControlAction:
    """Action minimizing the one-step lookahead cost; ties go to the lowest index."""
    indices, _ = _search_exhaustive(state, actions, _one_step(cfg), counter)
    return actions[indices[0]]


def dp_plan(state: AgentState, actions: Sequence[ControlAction], cfg: PlannerConfig,
            counter: Optional[EvaluationCounter] = None) -> List[ControlAction]:
    """
    Exhaustive search over all N_u^T action sequences.

    Predicted information is evaluated at the current estimate only, so the
    enumeration is exact. Ties are broken by lexicographic action index.

    Args:
        state: Current agent state
        actions: Admissible moves
        cfg: Planner settings (horizon, cost, dp_cap)
        counter: Optional instrumentation, receives the number of complete plans scored

    Returns:
        The optimal sequence of cfg.horizon_T actions

    Raises:
        PlanningError: if N_u^T exceeds cfg.dp_cap or no plan has a finite cost
    """
    indices, _ = _search_exhaustive(state, actions, cfg, counter)
    return [actions[i] for i in indices]


def dp_pruned_plan(state: AgentState, actions: Sequence[ControlAction], cfg: PlannerConfig,
                   counter: Optional[EvaluationCounter] = None) -> List[ControlAction]:
    """
    Beam search: every stage scores all extensions of the kept partial plans
    by the lookahead cost of the prefix and keeps the cfg.prune_width best.
    At most N_u * M_u evaluations per stage.
    """
    indices, _ = _search_beam(state, actions, cfg, cfg.prune_width, cfg.horizon_T, counter)
    return [actions[i] for i in indices]


def _one_step(cfg: PlannerConfig) -> PlannerConfig:
    if cfg.horizon_T == 1:
        return cfg
    return PlannerConfig(strategy=cfg.strategy, horizon_T=1, prune_width=cfg.prune_width,
                         use_penalty=cfg.use_penalty, cost=cfg.cost, radius=cfg.radius,
                         climb=cfg.climb, dp_cap=cfg.dp_cap, chunk_plans=cfg.chunk_plans)


def plan_actions(state: AgentState, actions: Sequence[ControlAction], cfg: PlannerConfig,
                 rng: np.random.Generator, counter: Optional[EvaluationCounter] = None) -> List[ControlAction]:
    """Planned sequence for the configured strategy; random and greedy plan a single move."""
    if cfg.strategy == "random":
        return [random_step(state, actions, rng)]
    if cfg.strategy == "greedy":
        return [greedy_step(state, actions, cfg, counter)]
    if cfg.strategy == "dp":
        return dp_plan(state, actions, cfg, counter)
    return dp_pruned_plan(state, actions, cfg, counter)


def plan_indices(state: AgentState, actions: Sequence[ControlAction], cfg: PlannerConfig,
                 rng: np.random.Generator, counter: Optional[EvaluationCounter] = None) -> List[int]:
    """plan_actions as indices into actions; repeated moves map to their first index."""
    index: Dict[ControlAction, int] = {}
    for i, action in enumerate(actions):
        index.setdefault(action, i)
    return [index[a] for a in plan_actions(state, actions, cfg, rng, counter)]


@dataclass
class StepRecord:
    """What happened at one step of the loop."""

    step_index: int
    position: List[float]
    rss: List[float]
    theta_hat: List[float]
    estimator_status: str
    fitness: Optional[float]
    fitness_regularized: Optional[float]
    plan: List[int]
    applied: int
    plan_time_s: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop('plan_time_s')
        data['type'] = 'step'
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StepRecord":
        fields = {k: v for k, v in data.items() if k != 'type'}
        return cls(**fields)


def _finite_or_none(value: float) -> Optional[float]:
    return value if np.isfinite(value) else None


@dataclass
class RunLog:
    """
    Complete record of one closed-loop run: trajectory, per-step estimates,
    fitness and planning times, and the final result.
    """

    label: str
    master_seed: int
    realization: int
    scenario: Scenario
    theta0: List[float]
    actions: List[List[float]]
    config: Dict[str, Any]
    steps: List[StepRecord] = field(default_factory=list)
    final_position: Optional[List[float]] = None
    final_theta: Optional[List[float]] = None
    node_errors: Optional[List[Dict[str, float]]] = None
    version: str = SIMULATOR_VERSION

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def positions(self) -> List[Position]:
        """Measurement positions followed by the final position."""
        points = [Position.from_array(s.position) for s in self.steps]
        if self.final_position is not None:
            points.append(Position.from_array(self.final_position))
        return points

    def measurements(self) -> List[MeasurementRecord]:
        records = []
        for s in self.steps:
            pos = Position.from_array(s.position)
            for j, rss in enumerate(s.rss, 1):
                records.append(MeasurementRecord(s.step_index, pos, j, rss))
        return records

    def fitness_curve(self) -> List[Optional[float]]:
        return [s.fitness for s in self.steps]

    def plan_times(self) -> List[float]:
        return [s.plan_time_s for s in self.steps]

    def to_records(self) -> List[Dict[str, Any]]:
        """JSON-lines records; wall-clock timings are kept out (see timing_records)."""
        header = {
            'type': 'run',
            'version': self.version,
            'label': self.label,
            'master_seed': self.master_seed,
            'realization': self.realization,
            'config': self.config,
            'scenario': self.scenario.to_dict(),
            'theta0': self.theta0,
            'actions': self.actions,
        }
        final = {
            'type': 'final',
            'final_position': self.final_position,
            'final_theta': self.final_theta,
            'node_errors': self.node_errors,
        }
        return [header] + [s.to_dict() for s in self.steps] + [final]

    def timing_records(self) -> List[Dict[str, Any]]:
        return [{'type': 'timing', 'step_index': s.step_index, 'plan_time_s': s.plan_time_s}
                for s in self.steps]

    @classmethod
    def from_records(cls, records: Sequence[Dict[str, Any]],
                     timing: Optional[Sequence[Dict[str, Any]]] = None) -> "RunLog":
        if not records or records[0].get('type') != 'run':
            raise ValueError("Run records must start with a 'run' header")
        header = records[0]
        run_log = cls(
            label=header['label'],
            master_seed=int(header['master_seed']),
            realization=int(header['realization']),
            scenario=Scenario.from_dict(header['scenario']),
            theta0=header['theta0'],
            actions=header['actions'],
            config=header['config'],
            version=header.get('version', SIMULATOR_VERSION),
        )
        for record in records[1:]:
            if record['type'] == 'step':
                run_log.steps.append(StepRecord.from_dict(record))
            elif record['type'] == 'final':
                run_log.final_position = record['final_position']
                run_log.final_theta = record['final_theta']
                run_log.node_errors = record['node_errors']
        if timing:
            times = {t['step_index']: t['plan_time_s'] for t in timing}
            for s in run_log.steps:
                s.plan_time_s = float(times.get(s.step_index, 0.0))
        return run_log


def rh_loop(scenario: Scenario, planner_cfg: PlannerConfig, solver_cfg: SolverConfig, n_steps: int,
            streams: SeedStreams, theta0: np.ndarray, freeze_estimate: bool = False,
            config_echo: Optional[Dict[str, Any]] = None) -> RunLog:
    """
    Online estimation and receding-horizon control.

    At every step: measure all nodes from the current position, re-estimate
    the parameters from all data so far, add the information of this round
    (evaluated at the new estimate), plan with the configured strategy and
    apply only the first planned move.

    Args:
        scenario: Ground truth nodes and the agent start
        planner_cfg: Strategy settings
        solver_cfg: Estimator settings
        n_steps: Number of measurement rounds N
        streams: Seeded random substreams of this realization
        theta0: Initial estimate
        freeze_estimate: Keep theta0 for the whole run instead of estimating
        config_echo: Resolved configuration stored in the log

    Returns:
        RunLog of the run
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    actions = planner_cfg.actions()
    theta0 = np.array(theta0, dtype=float)
    noise_vars = scenario.noise_vars
    dim = PARAMS_PER_NODE * scenario.n_nodes

    state = AgentState(position=scenario.agent_start, info=np.zeros((dim, dim)),
                       theta_hat=theta0.copy(), step_k=0, dataset=Dataset(noise_vars))
    policy_rng = streams.policy_rng()

    if config_echo is None:
        config_echo = {'planner': asdict(planner_cfg), 'solver': asdict(solver_cfg), 'n_steps': n_steps}
    run_log = RunLog(
        label=planner_cfg.label,
        master_seed=streams.master_seed,
        realization=streams.realization,
        scenario=scenario,
        theta0=theta0.tolist(),
        actions=[[a.dx, a.dy, a.dz] for a in actions],
        config=config_echo,
    )

    for step in range(1, n_steps + 1):
        # Measure
        readings = []
        for j, node in enumerate(scenario.nodes, 1):
            rss = sample_measurement(state.position, node, streams.noise_rng(step, j))
            state.dataset.add(MeasurementRecord(step, state.position, j, rss))
            readings.append(rss)

        # Estimate
        if freeze_estimate:
            status = "frozen"
        else:
            start = state.theta_hat if solver_cfg.warm_start else theta0
            # The initial estimate stays a candidate so a drifting warm start can be abandoned
            extra = [theta0] if solver_cfg.warm_start and step > 1 else []
            try:
                result = estimate_mle(state.dataset, start, solver_cfg, seed=streams.multistart_seed(step),
                                      extra_starts=extra)
                state.theta_hat = result.theta
                status = result.status
            except EstimationError as e:
                logger.warning("Step %d: estimator failed (%s); keeping the previous estimate", step, e)
                status = "failed"

        # Information of this round at the current estimate
        try:
            state.info = state.info + fim_joint(state.position, state.theta_hat, noise_vars)
        except ZeroDistanceError:
            logger.warning("Step %d: estimate puts a node on the agent; no information added", step)
        state.step_k = step

        raw_fitness = cost_j1(state.info, 0.0)
        reg_fitness = cost_j1(state.info, planner_cfg.cost.epsilon_reg)

        # Plan and apply the first move
        started = time.perf_counter()
        plan = plan_indices(state, actions, planner_cfg, policy_rng)
        elapsed = time.perf_counter() - started

        run_log.steps.append(StepRecord(
            step_index=step,
            position=state.position.as_list(),
            rss=readings,
            theta_hat=state.theta_hat.tolist(),
            estimator_status=status,
            fitness=_finite_or_none(raw_fitness),
            fitness_regularized=_finite_or_none(reg_fitness),
            plan=plan,
            applied=plan[0],
            plan_time_s=elapsed,
        ))
        logger.debug("Step %d at %s: status=%s fitness=%s move=%d",
                     step, state.position, status, raw_fitness, plan[0])
        state.position = apply_control(state.position, actions[plan[0]])

    run_log.final_position = state.position.as_list()
    run_log.final_theta = state.theta_hat.tolist()
    return run_log
