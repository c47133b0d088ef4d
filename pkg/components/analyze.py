"""
Post-run analyses over a run directory: distance matrices, update gains,
activation grids and metric smoothing. Results go to <run>/analysis/.
"""

import logging
import os
from typing import Dict, Optional, Sequence, Tuple

import pandas as pd

from setup_logic import build_sim_config, load_settings, report_error, require_artifacts
from simulation.aggregation import distance_summary, pairwise_distance
from simulation.data import dirichlet_partition, load_dataset
from simulation.errors import AggregationError, LabError
from simulation.federation import SimConfig
from simulation.metrics import activation_grid, gain_report, smooth_frame, with_method
from simulation.nn import param_layout
from simulation.storage import (
    list_update_archives,
    load_update_archive,
    read_csv,
    read_fp32,
    write_csv,
    write_distance_csv,
    write_pgm,
)

logger = logging.getLogger(__name__)

ANALYSES = ("distances", "gains", "activations", "smooth")
SMOOTHED_COLUMNS = ("asr", "accuracy")


def _run_config(run_dir: str, overrides: Sequence[str]) -> Tuple[SimConfig, Dict]:
    settings = load_settings(os.path.join(run_dir, "config.json"), overrides)
    return build_sim_config(settings), settings


def _checkpoint(run_dir: str, name: str, config: SimConfig):
    return read_fp32(os.path.join(run_dir, "checkpoints", f"{name}.fp32"), param_layout(config.model))


def analyze_distances(run_dir: str) -> int:
    require_artifacts(run_dir, ["updates"])
    out = os.path.join(run_dir, "analysis", "distances")
    summary = []
    for round_index, path in list_update_archives(run_dir):
        update_set, adversaries = load_update_archive(path)
        for metric in ("euclidean", "cosine"):
            try:
                matrix = pairwise_distance(update_set, metric)
            except AggregationError as e:
                logger.warning("round %d: skipping %s distances (%s)", round_index, metric, e)
                continue
            write_distance_csv(matrix, update_set.participant_ids,
                               os.path.join(out, f"round_{round_index}_{metric}.csv"))
            present = [pid for pid in adversaries if pid in update_set.participant_ids]
            if present and len(update_set) - len(present) >= 2:
                row = {"round": round_index, "metric": metric}
                row.update(distance_summary(matrix, update_set.participant_ids, present))
                summary.append(row)
    if summary:
        write_csv(pd.DataFrame(summary), os.path.join(out, "summary.csv"))
    return 0


def analyze_gains(run_dir: str, overrides: Sequence[str]) -> int:
    require_artifacts(run_dir, ["config"])
    config, settings = _run_config(run_dir, overrides)
    analysis = settings["analysis"]
    params = _checkpoint(run_dir, analysis["gain_checkpoint"], config)
    train, _ = load_dataset(config.dataset, config.seed)
    partition = dirichlet_partition(train, config.num_participants, config.partition_alpha,
                                    config.effective_partition_seed)
    attacks = {method: with_method(config.attack, method) for method in analysis["gain_methods"]}
    reports = gain_report(config.model, params, train, partition, attacks, config.train, config.seed,
                          k=analysis["top_k"])
    out = os.path.join(run_dir, "analysis")
    for method, report in reports.items():
        write_csv(report.to_frame(), os.path.join(out, f"gains_{method}.csv"))
        write_csv(report.sorted_frame(), os.path.join(out, f"gains_{method}_sorted.csv"))
    return 0


def analyze_activations(run_dir: str, overrides: Sequence[str]) -> int:
    require_artifacts(run_dir, ["config", "initial_params", "final_params"])
    config, settings = _run_config(run_dir, overrides)
    analysis = settings["analysis"]
    _, test = load_dataset(config.dataset, config.seed)
    label = analysis["activation_class"]
    if label is None:
        label = (config.attack.trigger.target_class + 1) % config.dataset.num_classes
    samples = test.with_label(label)
    samples = samples.subset(range(min(len(samples), analysis["activation_samples"])))
    out = os.path.join(run_dir, "analysis", "activations")
    for name in ("initial", "final"):
        grid = activation_grid(config.model, _checkpoint(run_dir, name, config), samples,
                               analysis["activation_layer"])
        stem = os.path.join(out, f"{name}_class{label}")
        write_csv(grid.to_frame(), stem + ".csv")
        for channel in range(grid.grid.shape[0]):
            write_pgm(f"{stem}_ch{channel}.pgm", grid.grid[channel])
    return 0


def analyze_smooth(run_dir: str, window: Optional[int], overrides: Sequence[str]) -> int:
    require_artifacts(run_dir, ["metrics"])
    if window is None:
        config_path = os.path.join(run_dir, "config.json")
        settings = load_settings(config_path if os.path.exists(config_path) else None, overrides)
        window = settings["analysis"]["window"]
    frame = read_csv(os.path.join(run_dir, "metrics.csv"))
    smoothed = smooth_frame(frame, SMOOTHED_COLUMNS, window)
    write_csv(smoothed, os.path.join(run_dir, "metrics_smoothed.csv"))
    return 0


def cmd_analyze(analysis: str, run_dir: str, window: Optional[int] = None,
                overrides: Sequence[str] = ()) -> int:
    """
    Dispatch one analysis over a finished run directory.

    Args:
        analysis: one of ANALYSES
        run_dir: directory written by the run command
        window: smoothing window (smooth only); defaults to analysis.window
        overrides: dot-path overrides applied on top of the run's config

    Returns:
        int: exit status, 0 on success
    """
    try:
        if analysis == "distances":
            return analyze_distances(run_dir)
        if analysis == "gains":
            return analyze_gains(run_dir, overrides)
        if analysis == "activations":
            return analyze_activations(run_dir, overrides)
        if analysis == "smooth":
            return analyze_smooth(run_dir, window, overrides)
        raise LabError(f"unknown analysis {analysis!r}; expected one of {ANALYSES}")
    except Exception as e:
        return report_error(f"analyze {analysis}", e)
