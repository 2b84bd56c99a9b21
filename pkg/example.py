"""
Example usage of the receding-horizon localization library
"""

import numpy as np

from experiment_harness import ExperimentConfig, ScenarioConfig, run_experiment, run_single
from fisher_information import HorizonCostConfig, cost_j1, fim_single
from mle_estimator import SolverConfig
from rh_planner import PlannerConfig
from rss_model import NodeGroundTruth, Position


def example_single_measurement():
    """Example: Information carried by one measurement of one node"""
    print("=" * 60)
    print("EXAMPLE 1: Fisher Information of One Measurement")
    print("=" * 60)

    node = NodeGroundTruth(gamma=7.0, k_gain=-20.0, position=Position(0, 0, 0), noise_var=3.0)

    for x in (Position(10, 0, 20), Position(0, 10, 20), Position(50, 50, 20)):
        F = fim_single(x, node.params(), node.noise_var)
        print(f"\nAgent at ({x.x:.0f}, {x.y:.0f}, {x.z:.0f})")
        print(f"  Diagonal [gamma, K, sx, sy, sz]: {np.array2string(np.diag(F), precision=4)}")
        print(f"  tr((F + 1e-6 I)^-1): {cost_j1(F, 1e-6):.3e}")


def example_single_run():
    """Example: One closed-loop run with the pruned planner"""
    print("\n" + "=" * 60)
    print("EXAMPLE 2: One Receding-Horizon Run")
    print("=" * 60)

    scenario_cfg = ScenarioConfig(seed=7)
    planner_cfg = PlannerConfig(strategy="dp_pruned", horizon_T=3, prune_width=8,
                                cost=HorizonCostConfig(discount=0.9))

    run_log = run_single(scenario_cfg, planner_cfg, SolverConfig(), realization=0)

    print(f"\nFlew {run_log.n_steps} steps, ending at {run_log.final_position}")
    for j, error in enumerate(run_log.node_errors, 1):
        print(f"  Node {j}: location {error['location_err_m']:6.2f} m, "
              f"gamma {error['gamma_err']:+.2f}, K {error['k_err_db']:+.2f} dB")

    final = run_log.steps[-1].fitness
    if final is not None:
        print(f"\n✓ Final fitness tr(F^-1): {final:.4g}")


def example_small_experiment():
    """Example: Paired comparison of three strategies"""
    print("\n" + "=" * 60)
    print("EXAMPLE 3: Small Paired Experiment")
    print("=" * 60)

    cfg = ExperimentConfig(
        scenario=ScenarioConfig(n_steps=15, seed=1),
        planner=PlannerConfig(horizon_T=3, prune_width=8),
        strategies=("random", "greedy", "dp_pruned"),
        n_realizations=4,
    )
    summary, _ = run_experiment(cfg, progress=True)
    summary.print_tables()


if __name__ == "__main__":
    print("\nReceding-Horizon Localization Examples\n")

    example_single_measurement()
    example_single_run()
    example_small_experiment()

    print("\n" + "=" * 60)
    print("Examples complete!")
    print("=" * 60)
