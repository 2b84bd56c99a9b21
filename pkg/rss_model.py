"""
RSS Model
Geometry, agent dynamics, the discrete control set and the log-distance
received-signal-strength measurement model for a single mobile agent talking
to a field of wireless sensor nodes.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

SIMULATOR_VERSION = "1.0.0"

# Distances below this are treated as the agent sitting on the node
DISTANCE_EPS = 1e-6

# Purpose tags for derived random streams
STREAM_SCENARIO = 0
STREAM_NOISE = 1
STREAM_POLICY = 2
STREAM_INIT = 3
STREAM_MULTISTART = 4

_DIAG = math.sqrt(0.5)

# Unit horizontal directions at multiples of 45 degrees, counter-clockwise from +x
_HORIZONTAL_DIRECTIONS = (
    (1.0, 0.0),
    (_DIAG, _DIAG),
    (0.0, 1.0),
    (-_DIAG, _DIAG),
    (-1.0, 0.0),
    (-_DIAG, -_DIAG),
    (0.0, -1.0),
    (_DIAG, -_DIAG),
)


class ZeroDistanceError(ValueError):
    """Raised when the agent and a (true or hypothesized) node coincide."""


@dataclass(frozen=True)
class Position:
    """A point in R^3, meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"Position components must be finite, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.z]

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Position":
        return cls(float(values[0]), float(values[1]), float(values[2]))


@dataclass(frozen=True)
class ControlAction:
    """A single move of the agent: horizontal step of length r plus a climb."""

    dx: float
    dy: float
    dz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz], dtype=float)

    @property
    def horizontal_norm(self) -> float:
        return math.hypot(self.dx, self.dy)


@dataclass(frozen=True)
class NodeGroundTruth:
    """True path-loss parameters, position and noise variance of one node."""

    gamma: float
    k_gain: float
    position: Position
    noise_var: float

    def __post_init__(self):
        if not self.noise_var > 0:
            raise ValueError(f"noise_var must be > 0, got {self.noise_var}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")

    def params(self) -> np.ndarray:
        """Node parameters in [gamma, K, sx, sy, sz] order."""
        p = self.position
        return np.array([self.gamma, self.k_gain, p.x, p.y, p.z], dtype=float)


@dataclass(frozen=True)
class MeasurementRecord:
    """One RSS reading taken by the agent from one node."""

    step_index: int
    agent_pos: Position
    node_id: int
    rss_db: float

    def __post_init__(self):
        if self.step_index < 1:
            raise ValueError(f"step_index must be >= 1, got {self.step_index}")
        if self.node_id < 1:
            raise ValueError(f"node_id must be >= 1, got {self.node_id}")

    def to_dict(self) -> dict:
        return {
            'step_index': self.step_index,
            'agent_pos': self.agent_pos.as_list(),
            'node_id': self.node_id,
            'rss_db': self.rss_db,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MeasurementRecord":
        return cls(
            step_index=int(data['step_index']),
            agent_pos=Position.from_array(data['agent_pos']),
            node_id=int(data['node_id']),
            rss_db=float(data['rss_db']),
        )


@dataclass(frozen=True)
class Scenario:
    """Ground truth for one realization: the nodes and where the agent starts."""

    nodes: Tuple[NodeGroundTruth, ...]
    agent_start: Position

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def noise_vars(self) -> np.ndarray:
        return np.array([n.noise_var for n in self.nodes], dtype=float)

    def to_dict(self) -> dict:
        return {
            'agent_start': self.agent_start.as_list(),
            'nodes': [
                {
                    'gamma': n.gamma,
                    'k_gain': n.k_gain,
                    'position': n.position.as_list(),
                    'noise_var': n.noise_var,
                }
                for n in self.nodes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        nodes = tuple(
            NodeGroundTruth(
                gamma=float(n['gamma']),
                k_gain=float(n['k_gain']),
                position=Position.from_array(n['position']),
                noise_var=float(n['noise_var']),
            )
            for n in data['nodes']
        )
        return cls(nodes=nodes, agent_start=Position.from_array(data['agent_start']))


class SeedStreams:
    """
    Deterministic random substreams for one realization of an experiment.

    Every consumer gets its own stream derived from the master seed, so the
    draws do not depend on the order in which streams are used. Measurement
    noise is keyed by (step, node), which means two strategies flying
    different trajectories still see the same noise at the same step.
    """

    def __init__(self, master_seed: int, realization: int = 0):
        """
        Args:
            master_seed: Top-level unsigned 64-bit seed
            realization: Index of the realization within an experiment
        """
        if master_seed < 0:
            raise ValueError(f"master_seed must be non-negative, got {master_seed}")
        self.master_seed = int(master_seed)
        self.realization = int(realization)

    def _sequence(self, *key: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.master_seed, spawn_key=key)

    def _generator(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(self._sequence(*key))

    def scenario_rng(self) -> np.random.Generator:
        return self._generator(STREAM_SCENARIO, self.realization)

    def init_rng(self) -> np.random.Generator:
        return self._generator(STREAM_INIT, self.realization)

    def policy_rng(self) -> np.random.Generator:
        return self._generator(STREAM_POLICY, self.realization)

    def noise_rng(self, step: int, node_id: int) -> np.random.Generator:
        return self._generator(STREAM_NOISE, self.realization, step, node_id)

    def multistart_seed(self, step: int) -> int:
        state = self._sequence(STREAM_MULTISTART, self.realization, step).generate_state(2, np.uint32)
        return int(state[0]) << 32 | int(state[1])


def apply_control(x: Position, u: ControlAction) -> Position:
    """Agent dynamics: next position is the current one plus the control."""
    return Position(x.x + u.dx, x.y + u.dy, x.z + u.dz)


def action_set(r: float, h: float) -> List[ControlAction]:
    """
    Build the 24-move control set.

    Eight horizontal directions at multiples of 45 degrees, each of length r,
    combined with a vertical move in {-h, 0, +h}. Ordered by angle, then by
    climb ascending. The zero move is not part of the set.

    Args:
        r: Horizontal step length in meters, must be > 0
        h: Climb height in meters, must be >= 0

    Returns:
        List of 24 ControlAction
    """
    if not r > 0:
        raise ValueError(f"Action radius must be positive, got r={r}")
    if h < 0:
        raise ValueError(f"Climb height must be non-negative, got h={h}")

    actions = []
    for ux, uy in _HORIZONTAL_DIRECTIONS:
        for dz in (0.0 - h, 0.0, h + 0.0):
            actions.append(ControlAction(r * ux, r * uy, float(dz)))
    return actions


def distance(x: Position, s: Position) -> float:
    return math.sqrt((x.x - s.x) ** 2 + (x.y - s.y) ** 2 + (x.z - s.z) ** 2)


def mean_rss(x: Position, node: NodeGroundTruth) -> float:
    """
    Expected RSS in dB at agent position x: K - gamma * log10(d).

    Raises:
        ZeroDistanceError: if the agent is within DISTANCE_EPS of the node
    """
    d = distance(x, node.position)
    if d < DISTANCE_EPS:
        raise ZeroDistanceError(f"Agent at {x} coincides with node at {node.position}")
    return node.k_gain - node.gamma * math.log10(d)


def sample_measurement(x: Position, node: NodeGroundTruth, rng: np.random.Generator) -> float:
    """Draw one noisy RSS reading: mean_rss plus N(0, noise_var)."""
    mu = mean_rss(x, node)
    return mu + math.sqrt(node.noise_var) * float(rng.standard_normal())


# Parameter vector layout: [gamma_j, K_j, sx_j, sy_j, sz_j] stacked for j = 1..M
PARAMS_PER_NODE = 5


def theta_from_nodes(nodes: Sequence[NodeGroundTruth]) -> np.ndarray:
    """Stack the true parameters of all nodes into a 5M parameter vector."""
    return np.concatenate([n.params() for n in nodes]) if nodes else np.zeros(0)


def theta_blocks(theta: np.ndarray) -> np.ndarray:
    """View a 5M parameter vector as an (M, 5) array, one row per node."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size % PARAMS_PER_NODE != 0 or theta.size == 0:
        raise ValueError(f"Parameter vector must have length 5M, got shape {theta.shape}")
    return theta.reshape(-1, PARAMS_PER_NODE)


def node_positions(theta: np.ndarray) -> np.ndarray:
    """Hypothesized node positions, shape (M, 3)."""
    return theta_blocks(theta)[:, 2:5]
