"""
Experiment Harness
Scenario generation, paired Monte Carlo comparison of planning strategies,
localization error metrics and planning-time normalization.

Every realization samples one scenario; all strategies fly that scenario
with the same measurement noise, so differences between strategies come
from the planner alone.
"""

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from mle_estimator import SolverConfig, initial_theta
from rh_planner import PlannerConfig, RunLog, rh_loop
from rss_model import (
    SIMULATOR_VERSION,
    NodeGroundTruth,
    Position,
    Scenario,
    SeedStreams,
    theta_blocks,
)

logger = logging.getLogger(__name__)

# label -> (strategy, use_penalty)
STRATEGY_VARIANTS = {
    "random": ("random", False),
    "greedy": ("greedy", False),
    "dp": ("dp", False),
    "dp_pruned": ("dp_pruned", False),
    "dp_penalty": ("dp", True),
    "dp_pruned_penalty": ("dp_pruned", True),
}

DEFAULT_STRATEGIES = ("random", "greedy", "dp_pruned", "dp", "dp_penalty")

TIMING_BASELINE = "dp"

ERROR_METRICS = ("location_err_m", "gamma_abs_err", "k_abs_err_db")

CSV_HEADER = ["strategy", "metric", "median", "q1", "q3", "mean", "std", "n"]

MANIFEST_NAME = "experiment.json"


class IncompleteExperimentError(RuntimeError):
    """Some runs of an experiment have no terminal record yet."""

    def __init__(self, missing: int, total: int):
        super().__init__(f"{missing} of {total} runs are missing or incomplete; "
                         f"re-run the experiment to finish them")
        self.missing = missing
        self.total = total


def _check_range(name: str, bounds: Tuple[float, float]):
    if len(bounds) != 2 or bounds[0] > bounds[1]:
        raise ValueError(f"{name} must be a (min, max) pair with min <= max, got {bounds}")


@dataclass(frozen=True)
class ScenarioConfig:
    """
    How scenarios are drawn. Defaults reproduce the published setup: a
    200 m x 200 m region, nodes 0-10 m high, five nodes, 30 steps.
    """

    region_x: Tuple[float, float] = (-100.0, 100.0)
    region_y: Tuple[float, float] = (-100.0, 100.0)
    height_range: Tuple[float, float] = (0.0, 10.0)
    n_nodes: int = 5
    gamma_range: Tuple[float, float] = (5.0, 10.0)
    k_range: Tuple[float, float] = (-30.0, -10.0)
    noise_var_range: Tuple[float, float] = (2.0, 5.0)
    agent_start: Tuple[float, float, float] = (100.0, -100.0, 50.0)
    n_steps: int = 30
    seed: int = 0

    def __post_init__(self):
        for name in ("region_x", "region_y", "height_range", "gamma_range", "k_range", "noise_var_range"):
            _check_range(name, getattr(self, name))
        if self.n_nodes < 1:
            raise ValueError(f"n_nodes must be >= 1, got {self.n_nodes}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.gamma_range[0] <= 0:
            raise ValueError(f"gamma_range must be positive, got {self.gamma_range}")
        if self.noise_var_range[0] <= 0:
            raise ValueError(f"noise_var_range must be positive, got {self.noise_var_range}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class ExperimentConfig:
    """A full Monte Carlo comparison."""

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    strategies: Tuple[str, ...] = DEFAULT_STRATEGIES
    n_realizations: int = 50
    workers: int = 1

    def __post_init__(self):
        if self.n_realizations < 1:
            raise ValueError(f"n_realizations must be >= 1, got {self.n_realizations}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if not self.strategies:
            raise ValueError("At least one strategy is required")
        for label in self.strategies:
            if label not in STRATEGY_VARIANTS:
                raise ValueError(f"Unknown strategy {label!r}, expected one of {sorted(STRATEGY_VARIANTS)}")
        if len(set(self.strategies)) != len(self.strategies):
            raise ValueError(f"Duplicate strategies in {self.strategies}")


def strategy_config(base: PlannerConfig, label: str) -> PlannerConfig:
    """The base planner settings switched to the strategy named by label."""
    if label not in STRATEGY_VARIANTS:
        raise ValueError(f"Unknown strategy {label!r}, expected one of {sorted(STRATEGY_VARIANTS)}")
    strategy, use_penalty = STRATEGY_VARIANTS[label]
    return replace(base, strategy=strategy, use_penalty=use_penalty)


def sample_scenario(cfg: ScenarioConfig, rng: np.random.Generator) -> Scenario:
    """
    Draw M nodes uniformly: position in the region and height range, then
    gamma, K and noise variance, each from its own range.
    """
    nodes = []
    for _ in range(cfg.n_nodes):
        position = Position(
            float(rng.uniform(*cfg.region_x)),
            float(rng.uniform(*cfg.region_y)),
            float(rng.uniform(*cfg.height_range)),
        )
        nodes.append(NodeGroundTruth(
            gamma=float(rng.uniform(*cfg.gamma_range)),
            k_gain=float(rng.uniform(*cfg.k_range)),
            position=position,
            noise_var=float(rng.uniform(*cfg.noise_var_range)),
        ))
    return Scenario(nodes=tuple(nodes), agent_start=Position(*map(float, cfg.agent_start)))


@dataclass(frozen=True)
class NodeError:
    """Estimation error of one node: 3D distance, and signed gamma and K errors."""

    location_err_m: float
    gamma_err: float
    k_err_db: float


def localization_error(theta_hat: np.ndarray, truth: Sequence[NodeGroundTruth]) -> List[NodeError]:
    """
    Per-node error of an estimate against the ground truth.

    Raises:
        ValueError: if theta_hat does not hold exactly one block per node
    """
    blocks = theta_blocks(theta_hat)
    if blocks.shape[0] != len(truth):
        raise ValueError(f"Estimate has {blocks.shape[0]} nodes, ground truth has {len(truth)}")
    errors = []
    for row, node in zip(blocks, truth):
        offset = row[2:5] - node.position.as_array()
        errors.append(NodeError(
            location_err_m=float(np.linalg.norm(offset)),
            gamma_err=float(row[0] - node.gamma),
            k_err_db=float(row[1] - node.k_gain),
        ))
    return errors


def run_single(scenario_cfg: ScenarioConfig, planner_cfg: PlannerConfig, solver_cfg: SolverConfig,
               realization: int, config_echo: Optional[Dict[str, Any]] = None,
               freeze_estimate: bool = False) -> RunLog:
    """One closed-loop run of one strategy on realization `realization`."""
    streams = SeedStreams(scenario_cfg.seed, realization)
    scenario = sample_scenario(scenario_cfg, streams.scenario_rng())
    theta0 = initial_theta(scenario.n_nodes, scenario_cfg.region_x, scenario_cfg.region_y,
                           streams.init_rng(), gamma=solver_cfg.init_gamma,
                           k_gain=solver_cfg.init_k_gain, height=solver_cfg.init_height)
    if config_echo is None:
        config_echo = {
            'scenario': asdict(scenario_cfg),
            'planner': asdict(planner_cfg),
            'solver': asdict(solver_cfg),
        }
    run_log = rh_loop(scenario, planner_cfg, solver_cfg, scenario_cfg.n_steps, streams, theta0,
                      freeze_estimate=freeze_estimate, config_echo=config_echo)
    errors = localization_error(np.array(run_log.final_theta), scenario.nodes)
    run_log.node_errors = [asdict(e) for e in errors]
    return run_log


def _run_job(args) -> Dict[str, Any]:
    """Worker entry point; failures come back as data so the batch keeps going."""
    label, realization, scenario_cfg, planner_cfg, solver_cfg, config_echo = args
    try:
        run_log = run_single(scenario_cfg, planner_cfg, solver_cfg, realization, config_echo)
        return {
            'label': label,
            'realization': realization,
            'records': run_log.to_records(),
            'timing': run_log.timing_records(),
        }
    except Exception as e:
        return {'label': label, 'realization': realization, 'error': f"{type(e).__name__}: {e}"}


def _quartile_stats(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=float)
    q1, median, q3 = np.percentile(arr, [25, 50, 75])
    return {
        'median': float(median),
        'q1': float(q1),
        'q3': float(q3),
        'mean': float(arr.mean()),
        'std': float(arr.std()),
        'n': int(arr.size),
    }


@dataclass
class SummaryRow:
    """One line of the summary table."""

    strategy: str
    metric: str
    median: float
    q1: float
    q3: float
    mean: float
    std: float
    n: int

    def as_row(self) -> List[str]:
        return [self.strategy, self.metric] + [repr(float(v)) for v in
                                               (self.median, self.q1, self.q3, self.mean, self.std)] + [str(self.n)]


def timing_normalize(raw: Dict[str, Tuple[float, float]], baseline: str = TIMING_BASELINE) -> Dict[str, Tuple[float, float]]:
    """
    Divide each strategy's mean and std planning time by the baseline mean.

    Args:
        raw: strategy -> (mean seconds, std seconds)
        baseline: Strategy the table is normalized to

    Returns:
        strategy -> (relative mean, relative std); the baseline reads exactly 1.0

    Raises:
        ValueError: if the baseline is absent or its mean is not positive
    """
    if baseline not in raw:
        raise ValueError(f"Timing normalization needs the {baseline!r} strategy, got {sorted(raw)}")
    base_mean = raw[baseline][0]
    if not base_mean > 0:
        raise ValueError(f"Baseline {baseline!r} has a non-positive mean time {base_mean}")
    table = {label: (mean / base_mean, std / base_mean) for label, (mean, std) in raw.items()}
    table[baseline] = (1.0, raw[baseline][1] / base_mean)
    return table


@dataclass
class ExperimentSummary:
    """Statistics of an experiment, per strategy."""

    strategies: List[str]
    error_rows: List[SummaryRow]
    timing_rows: List[SummaryRow]
    relative_timing: Optional[Dict[str, Tuple[float, float]]]
    completed: Dict[str, int]
    failures: Dict[str, int]
    fitness: Dict[str, List[Optional[float]]]
    config: Dict[str, Any] = field(default_factory=dict)
    version: str = SIMULATOR_VERSION

    def row(self, strategy: str, metric: str) -> SummaryRow:
        for r in self.error_rows + self.timing_rows:
            if r.strategy == strategy and r.metric == metric:
                return r
        raise KeyError((strategy, metric))

    def _write_csv(self, path: Path, rows: List[SummaryRow]):
        # Header first; version and configuration live in summary.jsonl
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(CSV_HEADER)
            for r in rows:
                writer.writerow(r.as_row())

    def to_csv(self, path):
        """Error statistics; deterministic given the master seed."""
        self._write_csv(Path(path), self.error_rows)

    def timing_to_csv(self, path):
        self._write_csv(Path(path), self.timing_rows)

    def to_records(self) -> List[Dict[str, Any]]:
        records = [{'type': 'summary', 'version': self.version, 'config': self.config,
                    'strategies': self.strategies, 'completed': self.completed,
                    'failures': self.failures}]
        for r in self.error_rows + self.timing_rows:
            records.append(dict(type='statistic', **asdict(r)))
        for label in self.strategies:
            records.append({'type': 'fitness_curve', 'strategy': label, 'median_fitness': self.fitness[label]})
        return records

    def to_jsonl(self, path):
        write_jsonl(Path(path), self.to_records())

    def print_tables(self):
        """Error quartiles and relative planning times, to standard output."""
        print("=" * 60)
        print("Localization error (median [q1, q3])")
        print("=" * 60)
        print(f"{'strategy':<20}{'location m':>14}{'|gamma|':>12}{'|K| dB':>12}")
        for label in self.strategies:
            if self.completed.get(label, 0) == 0:
                print(f"{label:<20}{'no completed runs':>38}")
                continue
            cells = [self.row(label, m) for m in ERROR_METRICS]
            print(f"{label:<20}" + "".join(f"{c.median:>14.3f}" if i == 0 else f"{c.median:>12.3f}"
                                          for i, c in enumerate(cells)))
            print(f"{'':<20}" + "".join(f"{f'[{c.q1:.2f}, {c.q3:.2f}]':>14}" if i == 0
                                        else f"{f'[{c.q1:.2f}, {c.q3:.2f}]':>12}"
                                        for i, c in enumerate(cells)))
        print()
        print("=" * 60)
        print(f"Relative one-step planning time (normalized to {TIMING_BASELINE})")
        print("=" * 60)
        if self.relative_timing is None:
            print(f"✗ {TIMING_BASELINE} not among the strategies, showing seconds")
            for r in self.timing_rows:
                print(f"{r.strategy:<20}{r.mean:>12.6f} ± {r.std:.6f} s")
        else:
            for label in self.strategies:
                if label in self.relative_timing:
                    mean, std = self.relative_timing[label]
                    print(f"{label:<20}{mean:>10.3f} ± {std:.3f}")
        if any(self.failures.values()):
            print()
            for label, count in self.failures.items():
                if count:
                    print(f"✗ {label}: {count} failed run(s) excluded")


def fitness_curves(run_logs: Sequence[RunLog]) -> List[Optional[float]]:
    """Median fitness per step over runs; steps where every run is singular give None."""
    if not run_logs:
        return []
    n_steps = max(log.n_steps for log in run_logs)
    curve = []
    for i in range(n_steps):
        values = [log.steps[i].fitness for log in run_logs
                  if i < log.n_steps and log.steps[i].fitness is not None]
        curve.append(float(np.median(values)) if values else None)
    return curve


def summarize(run_logs: Dict[str, List[RunLog]], failures: Optional[Dict[str, int]] = None,
              strategies: Optional[Sequence[str]] = None,
              config: Optional[Dict[str, Any]] = None) -> ExperimentSummary:
    """
    Aggregate completed runs into an ExperimentSummary.

    Error statistics pool the per-node errors of all runs of a strategy;
    gamma and K errors are summarized by magnitude. Planning times pool all
    steps of all runs.
    """
    strategies = list(strategies) if strategies is not None else list(run_logs)
    failures = {label: int((failures or {}).get(label, 0)) for label in strategies}

    error_rows, timing_rows, raw_timing = [], [], {}
    completed, fitness = {}, {}
    for label in strategies:
        logs = run_logs.get(label, [])
        completed[label] = len(logs)
        fitness[label] = fitness_curves(logs)
        if not logs:
            logger.warning("Strategy %s has no completed runs", label)
            continue

        node_errors = [e for log in logs for e in (log.node_errors or [])]
        series = {
            'location_err_m': [e['location_err_m'] for e in node_errors],
            'gamma_abs_err': [abs(e['gamma_err']) for e in node_errors],
            'k_abs_err_db': [abs(e['k_err_db']) for e in node_errors],
        }
        for metric in ERROR_METRICS:
            error_rows.append(SummaryRow(label, metric, **_quartile_stats(series[metric])))

        times = [t for log in logs for t in log.plan_times()]
        stats = _quartile_stats(times)
        timing_rows.append(SummaryRow(label, 'plan_time_s', **stats))
        raw_timing[label] = (stats['mean'], stats['std'])

    relative = None
    if TIMING_BASELINE in raw_timing:
        relative = timing_normalize(raw_timing)
        base_mean = raw_timing[TIMING_BASELINE][0]
        for row in list(timing_rows):
            mean, std = relative[row.strategy]
            timing_rows.append(SummaryRow(row.strategy, 'plan_time_rel', row.median / base_mean,
                                          row.q1 / base_mean, row.q3 / base_mean, mean, std, row.n))

    return ExperimentSummary(
        strategies=strategies,
        error_rows=error_rows,
        timing_rows=timing_rows,
        relative_timing=relative,
        completed=completed,
        failures=failures,
        fitness=fitness,
        config=config or {},
    )


def write_jsonl(path: Path, records: Sequence[Dict[str, Any]]):
    """Write JSON lines atomically: a crash leaves either the old file or the new one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    """Read JSON lines, stopping at the first truncated line."""
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                logger.warning("Truncated record in %s ignored", path)
                break
    return records


def run_path(out_dir: Path, label: str, realization: int) -> Path:
    return Path(out_dir) / "runs" / label / f"r{realization:03d}.jsonl"


def timing_path(path: Path) -> Path:
    return path.with_name(path.stem + ".timing.jsonl")


def _terminal_records(path: Path) -> Optional[List[Dict[str, Any]]]:
    if not path.exists():
        return None
    records = read_jsonl(path)
    if not records or records[-1].get('type') not in ('final', 'failed'):
        return None
    return records


class ExperimentRunner:
    """
    Runs every (strategy, realization) pair of an experiment.

    With an output directory, each run is written to runs/<label>/r<NNN>.jsonl
    as soon as it finishes, and runs that already have a terminal record are
    loaded instead of recomputed.

    Example:
        with ExperimentRunner(cfg, out_dir="out") as runner:
            summary = runner.run()
    """

    def __init__(self, cfg: ExperimentConfig, out_dir: Optional[str] = None, progress: bool = False,
                 config_echo: Optional[Dict[str, Any]] = None):
        """
        Args:
            cfg: Experiment settings
            out_dir: Where run files and summaries go; None keeps everything in memory
            progress: Show a progress bar
            config_echo: Resolved configuration stored with every output
        """
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.progress = progress
        self.config_echo = config_echo if config_echo is not None else experiment_config_echo(cfg)
        self.executor = None
        self.run_logs: Dict[str, List[RunLog]] = {}
        self.failures: Dict[str, int] = {}

    def __enter__(self):
        if self.cfg.workers > 1:
            self.executor = ProcessPoolExecutor(max_workers=self.cfg.workers)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def close(self):
        if self.executor is not None:
            self.executor.shutdown(cancel_futures=True)
            self.executor = None

    def _jobs(self, realizations: Optional[Sequence[int]] = None):
        if realizations is None:
            realizations = range(self.cfg.n_realizations)
        for realization in realizations:
            for label in self.cfg.strategies:
                planner_cfg = strategy_config(self.cfg.planner, label)
                yield (label, realization, self.cfg.scenario, planner_cfg, self.cfg.solver, self.config_echo)

    def run_realization(self, realization: int) -> Dict[str, Optional[RunLog]]:
        """
        Run every strategy on one realization, in the calling process.

        All strategies see the same scenario, initial estimate and
        measurement noise. Completed run files are reused.

        Returns:
            Label -> RunLog, or None for a strategy whose run failed
        """
        out: Dict[str, Optional[RunLog]] = {}
        for job in self._jobs([realization]):
            label = job[0]
            result = self._existing(label, realization)
            if result is None:
                result = _run_job(job)
                self._collect(result, {})
            if 'error' in result:
                out[label] = None
            else:
                out[label] = RunLog.from_records(result['records'], result.get('timing'))
        return out

    def write_manifest(self):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            'version': SIMULATOR_VERSION,
            'strategies': list(self.cfg.strategies),
            'n_realizations': self.cfg.n_realizations,
            'config': self.config_echo,
        }
        with open(self.out_dir / MANIFEST_NAME, 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    def save_run_log(self, result: Dict[str, Any]):
        if self.out_dir is None:
            return
        path = run_path(self.out_dir, result['label'], result['realization'])
        if 'error' in result:
            write_jsonl(path, [{'type': 'failed', 'label': result['label'],
                                'realization': result['realization'], 'error': result['error']}])
            return
        write_jsonl(timing_path(path), result['timing'])
        write_jsonl(path, result['records'])

    def _existing(self, label: str, realization: int) -> Optional[Dict[str, Any]]:
        if self.out_dir is None:
            return None
        path = run_path(self.out_dir, label, realization)
        records = _terminal_records(path)
        if records is None:
            return None
        if records[-1]['type'] == 'failed':
            return {'label': label, 'realization': realization, 'error': records[-1].get('error', '')}
        timing = read_jsonl(timing_path(path)) if timing_path(path).exists() else []
        return {'label': label, 'realization': realization, 'records': records, 'timing': timing}

    def run(self) -> ExperimentSummary:
        """Run (or resume) every job and summarize."""
        self.write_manifest()
        results: Dict[Tuple[str, int], Dict[str, Any]] = {}
        pending = []
        for job in self._jobs():
            existing = self._existing(job[0], job[1])
            if existing is not None:
                results[(job[0], job[1])] = existing
            else:
                pending.append(job)
        if results:
            logger.info("Resuming: %d runs already complete, %d to go", len(results), len(pending))

        bar = tqdm(total=len(pending), desc="runs", disable=not self.progress)
        try:
            if self.executor is None:
                for job in pending:
                    result = _run_job(job)
                    self._collect(result, results)
                    bar.update(1)
            else:
                futures = [self.executor.submit(_run_job, job) for job in pending]
                for future in as_completed(futures):
                    self._collect(future.result(), results)
                    bar.update(1)
        finally:
            bar.close()

        self.run_logs, self.failures = _gather(results, self.cfg.strategies, self.cfg.n_realizations)
        summary = summarize(self.run_logs, self.failures, self.cfg.strategies, self.config_echo)
        if self.out_dir is not None:
            write_summary_files(summary, self.out_dir)
        return summary

    def _collect(self, result: Dict[str, Any], results: Dict[Tuple[str, int], Dict[str, Any]]):
        if 'error' in result:
            logger.warning("Run %s r%03d failed: %s", result['label'], result['realization'], result['error'])
        self.save_run_log(result)
        results[(result['label'], result['realization'])] = result

    def load_run_logs(self) -> Dict[str, List[RunLog]]:
        return load_run_logs(self.out_dir, self.cfg.strategies, self.cfg.n_realizations)[0]


def _gather(results: Dict[Tuple[str, int], Dict[str, Any]], strategies: Sequence[str],
            n_realizations: int) -> Tuple[Dict[str, List[RunLog]], Dict[str, int]]:
    """Order results by strategy then realization, independent of completion order."""
    run_logs = {label: [] for label in strategies}
    failures = {label: 0 for label in strategies}
    for label in strategies:
        for realization in range(n_realizations):
            result = results.get((label, realization))
            if result is None:
                continue
            if 'error' in result:
                failures[label] += 1
            else:
                run_logs[label].append(RunLog.from_records(result['records'], result.get('timing')))
    return run_logs, failures


def load_run_logs(out_dir, strategies: Sequence[str],
                  n_realizations: int) -> Tuple[Dict[str, List[RunLog]], Dict[str, int], int]:
    """
    Read the run files of an experiment directory.

    Returns:
        (run logs per strategy, failures per strategy, number of missing runs)
    """
    results, missing = {}, 0
    for label in strategies:
        for realization in range(n_realizations):
            path = run_path(Path(out_dir), label, realization)
            records = _terminal_records(path)
            if records is None:
                missing += 1
                continue
            if records[-1]['type'] == 'failed':
                results[(label, realization)] = {'error': records[-1].get('error', '')}
                continue
            timing = read_jsonl(timing_path(path)) if timing_path(path).exists() else []
            results[(label, realization)] = {'records': records, 'timing': timing}
    run_logs, failures = _gather(results, strategies, n_realizations)
    return run_logs, failures, missing


def summarize_run_directory(out_dir) -> ExperimentSummary:
    """
    Summarize an experiment directory from its run files alone.

    Raises:
        FileNotFoundError: if the directory holds no experiment manifest
        IncompleteExperimentError: if any run lacks a terminal record
    """
    out_dir = Path(out_dir)
    manifest_path = out_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"No {MANIFEST_NAME} in {out_dir}")
    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    strategies = manifest['strategies']
    n_realizations = int(manifest['n_realizations'])
    run_logs, failures, missing = load_run_logs(out_dir, strategies, n_realizations)
    if missing:
        raise IncompleteExperimentError(missing, len(strategies) * n_realizations)
    return summarize(run_logs, failures, strategies, manifest.get('config'))


def write_summary_files(summary: ExperimentSummary, out_dir):
    out_dir = Path(out_dir)
    summary.to_csv(out_dir / "summary.csv")
    summary.timing_to_csv(out_dir / "timing.csv")
    summary.to_jsonl(out_dir / "summary.jsonl")


def experiment_config_echo(cfg: ExperimentConfig) -> Dict[str, Any]:
    return {
        'scenario': asdict(cfg.scenario),
        'planner': asdict(cfg.planner),
        'solver': asdict(cfg.solver),
        'strategies': list(cfg.strategies),
        'n_realizations': cfg.n_realizations,
    }


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None, progress: bool = False,
                   config_echo: Optional[Dict[str, Any]] = None) -> Tuple[ExperimentSummary, Dict[str, List[RunLog]]]:
    """
    Run every strategy on cfg.n_realizations paired realizations.

    Individual run failures are recorded, excluded from the statistics and
    counted in the summary.

    Returns:
        (summary, run logs per strategy ordered by realization)
    """
    with ExperimentRunner(cfg, out_dir=out_dir, progress=progress, config_echo=config_echo) as runner:
        summary = runner.run()
        return summary, runner.run_logs
