"""
Run Configuration
Schema, loader and validation for the TOML configuration file. Nested tables
flatten to dotted keys (planner.horizon_T); command-line overrides use the
same keys and win over file values.
"""

import logging
import math
import os
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

import toml

from experiment_harness import STRATEGY_VARIANTS, ExperimentConfig, ScenarioConfig
from fisher_information import HorizonCostConfig
from mle_estimator import SolverConfig
from rh_planner import STRATEGIES, PlannerConfig

logger = logging.getLogger(__name__)

OUTPUT_ENV_VAR = "RH_LOCALIZATION_OUT"
DEFAULT_OUTPUT_DIR = "rh_output"

# Sentinel accepted by optional numeric keys, since TOML has no null
AUTO = "auto"

# Keys that change how an experiment executes but not what it computes;
# they are left out of the configuration echoed into output files.
EXECUTION_KEYS = ("experiment.workers", "output.dir")


class ConfigError(ValueError):
    """Invalid configuration; key names the offending dotted key when known."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


def _as_int(value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"expected an integer, got {value!r}")
    return value


def _as_float(value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"expected a finite number, got {value!r}")
    return value


def _as_bool(value):
    if not isinstance(value, bool):
        raise ValueError(f"expected true or false, got {value!r}")
    return value


def _as_str(value):
    if not isinstance(value, str):
        raise ValueError(f"expected a string, got {value!r}")
    return value


def _float_list(length: int):
    def convert(value):
        if not isinstance(value, (list, tuple)) or len(value) != length:
            raise ValueError(f"expected a list of {length} numbers, got {value!r}")
        return [_as_float(v) for v in value]
    return convert


def _optional(convert):
    def wrapped(value):
        if value == AUTO:
            return None
        return convert(value)
    return wrapped


def _str_list(value):
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    if not isinstance(value, (list, tuple)):
        raise ValueError(f"expected a list of strings, got {value!r}")
    return [_as_str(v) for v in value]


def _choice(options):
    def check(value):
        if value not in options:
            raise ValueError(f"expected one of {sorted(options)}, got {value!r}")
    return check


def _at_least(bound):
    def check(value):
        if value < bound:
            raise ValueError(f"must be >= {bound}, got {value!r}")
    return check


def _positive(value):
    if not value > 0:
        raise ValueError(f"must be > 0, got {value!r}")


def _open_unit(value):
    if not 0 < value < 1:
        raise ValueError(f"must lie in (0, 1), got {value!r}")


def _unit_interval(value):
    if not 0 < value <= 1:
        raise ValueError(f"must lie in (0, 1], got {value!r}")


def _above_one(value):
    if not value > 1:
        raise ValueError(f"must be > 1, got {value!r}")


def _ordered(value):
    if value[0] > value[1]:
        raise ValueError(f"expected [min, max] with min <= max, got {value!r}")


def _strategy_labels(value):
    if not value:
        raise ValueError("at least one strategy is required")
    for label in value:
        if label not in STRATEGY_VARIANTS:
            raise ValueError(f"unknown strategy {label!r}, expected one of {sorted(STRATEGY_VARIANTS)}")


# key -> (converter, default, validator)
SCHEMA: Dict[str, Tuple[Callable, Any, Optional[Callable]]] = {
    "scenario.region_x": (_float_list(2), [-100.0, 100.0], _ordered),
    "scenario.region_y": (_float_list(2), [-100.0, 100.0], _ordered),
    "scenario.height_range": (_float_list(2), [0.0, 10.0], _ordered),
    "scenario.n_nodes": (_as_int, 5, _at_least(1)),
    "scenario.gamma_range": (_float_list(2), [5.0, 10.0], _ordered),
    "scenario.k_range": (_float_list(2), [-30.0, -10.0], _ordered),
    "scenario.noise_var_range": (_float_list(2), [2.0, 5.0], _ordered),
    "scenario.agent_start": (_float_list(3), [100.0, -100.0, 50.0], None),
    "scenario.n_steps": (_as_int, 30, _at_least(1)),
    "scenario.seed": (_as_int, 0, _at_least(0)),

    "planner.strategy": (_as_str, "dp_pruned", _choice(STRATEGIES)),
    "planner.horizon_T": (_as_int, 5, _at_least(1)),
    "planner.prune_width": (_as_int, 24, _at_least(1)),
    "planner.use_penalty": (_as_bool, False, None),
    "planner.radius": (_as_float, 10.0, _positive),
    "planner.climb": (_as_float, 3.0, _at_least(0.0)),
    "planner.dp_cap": (_as_float, 1e9, _positive),
    "planner.chunk_plans": (_as_int, 16384, _at_least(1)),

    "cost.discount": (_as_float, 0.9, _unit_interval),
    "cost.beta": (_as_float, 1.2, _above_one),
    "cost.epsilon_reg": (_optional(_as_float), None, _at_least(0.0)),
    "cost.include_prior_info": (_as_bool, True, None),

    "solver.max_iterations": (_as_int, 500, _at_least(1)),
    "solver.gradient_tolerance": (_as_float, 1e-6, _positive),
    "solver.backtrack_factor": (_as_float, 0.5, _open_unit),
    "solver.sufficient_decrease": (_as_float, 1e-4, _open_unit),
    "solver.max_backtracks": (_as_int, 60, _at_least(1)),
    "solver.restart_interval": (_optional(_as_int), None, _at_least(1)),
    "solver.multistart": (_as_int, 4, _at_least(1)),
    "solver.warm_start": (_as_bool, True, None),
    "solver.precondition": (_as_bool, True, None),
    "solver.position_jitter": (_as_float, 30.0, _at_least(0.0)),
    "solver.gamma_jitter": (_as_float, 1.0, _at_least(0.0)),
    "solver.k_jitter": (_as_float, 3.0, _at_least(0.0)),
    "solver.init_gamma": (_as_float, 7.5, _positive),
    "solver.init_k_gain": (_as_float, -20.0, None),
    "solver.init_height": (_as_float, 5.0, None),
    "solver.max_node_range": (_optional(_as_float), 500.0, _positive),

    "experiment.strategies": (_str_list, ["random", "greedy", "dp_pruned", "dp", "dp_penalty"], _strategy_labels),
    "experiment.n_realizations": (_as_int, 50, _at_least(1)),
    "experiment.workers": (_as_int, 1, _at_least(1)),
    "experiment.realization": (_as_int, 0, _at_least(0)),

    "output.dir": (_as_str, None, None),
}


def defaults() -> Dict[str, Any]:
    flat = {key: default for key, (_, default, _) in SCHEMA.items()}
    flat["output.dir"] = os.environ.get(OUTPUT_ENV_VAR, DEFAULT_OUTPUT_DIR)
    return flat


def flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested tables to dotted keys."""
    flat = {}
    for name, value in tree.items():
        key = f"{prefix}{name}"
        if isinstance(value, dict):
            flat.update(flatten(value, key + "."))
        else:
            flat[key] = value
    return flat


def coerce(key: str, value: Any) -> Any:
    """
    Convert and validate one value against the schema.

    Raises:
        ConfigError: on an unknown key or an invalid value
    """
    if key not in SCHEMA:
        raise ConfigError("unknown configuration key", key)
    convert, _, validate = SCHEMA[key]
    try:
        value = convert(value)
        if validate is not None and value is not None:
            validate(value)
    except ValueError as e:
        raise ConfigError(str(e), key) from e
    return value


def parse_value(text: str) -> Any:
    """Parse an override value as a TOML literal, falling back to a bare string."""
    try:
        return toml.loads(f"value = {text}")["value"]
    except toml.TomlDecodeError:
        return text


def parse_override(item: str) -> Tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form KEY=VALUE")
    key, text = item.split("=", 1)
    key = key.strip()
    return key, coerce(key, parse_value(text.strip()))


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Resolve the flat configuration: schema defaults, then the file, then
    --set overrides, then the shorthand flags in extra.

    Args:
        path: TOML file, optional
        overrides: KEY=VALUE strings
        extra: Already-typed dotted-key values (from --seed, --workers, --out)

    Raises:
        ConfigError: on a missing or malformed file, an unknown key or an invalid value
    """
    flat = defaults()
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"configuration file not found: {config_path}")
        try:
            tree = toml.load(config_path)
        except toml.TomlDecodeError as e:
            raise ConfigError(f"cannot parse {config_path}: {e}") from e
        logger.debug("Loaded configuration from %s", config_path)
        for key, value in flatten(tree).items():
            flat[key] = coerce(key, value)

    for item in overrides:
        key, value = parse_override(item)
        flat[key] = value

    for key, value in (extra or {}).items():
        if value is not None:
            flat[key] = coerce(key, value)

    build_experiment_config(flat)
    return flat


def _build(key_prefix: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e), key_prefix) from e


def _section(flat: Dict[str, Any], name: str) -> Dict[str, Any]:
    prefix = name + "."
    return {key[len(prefix):]: value for key, value in flat.items() if key.startswith(prefix)}


def build_scenario_config(flat: Dict[str, Any]) -> ScenarioConfig:
    s = _section(flat, "scenario")
    for name in ("region_x", "region_y", "height_range", "gamma_range", "k_range", "noise_var_range", "agent_start"):
        s[name] = tuple(s[name])
    return _build("scenario", ScenarioConfig, **s)


def build_cost_config(flat: Dict[str, Any]) -> HorizonCostConfig:
    return _build("cost", HorizonCostConfig, **_section(flat, "cost"))


def build_planner_config(flat: Dict[str, Any]) -> PlannerConfig:
    return _build("planner", PlannerConfig, cost=build_cost_config(flat), **_section(flat, "planner"))


def build_solver_config(flat: Dict[str, Any]) -> SolverConfig:
    return _build("solver", SolverConfig, seed=flat["scenario.seed"], **_section(flat, "solver"))


def build_experiment_config(flat: Dict[str, Any]) -> ExperimentConfig:
    return _build(
        "experiment",
        ExperimentConfig,
        scenario=build_scenario_config(flat),
        planner=build_planner_config(flat),
        solver=build_solver_config(flat),
        strategies=tuple(flat["experiment.strategies"]),
        n_realizations=flat["experiment.n_realizations"],
        workers=flat["experiment.workers"],
    )


def config_echo(flat: Dict[str, Any]) -> Dict[str, Any]:
    """The resolved configuration as stored in output files, AUTO in place of unset optionals."""
    return {key: (AUTO if value is None else value)
            for key, value in sorted(flat.items()) if key not in EXECUTION_KEYS}


def dump_config(flat: Dict[str, Any]) -> str:
    """Render the flat configuration back to nested TOML."""
    tree: Dict[str, Any] = {}
    for key, value in sorted(flat.items()):
        section, name = key.split(".", 1)
        tree.setdefault(section, {})[name] = AUTO if value is None else value
    return toml.dumps(tree)
