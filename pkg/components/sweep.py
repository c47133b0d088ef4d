"""
Parameter sweeps: one simulation per point of a grid over config keys, with
the final metrics of every arm collected into a single table.
"""

import itertools
import json
import logging
from typing import Any, Dict, List, Sequence, Tuple

import pandas as pd

from setup_logic import build_sim_config, load_settings, report_error, worker_threads
from simulation.data import load_dataset
from simulation.errors import ConfigError
from simulation.federation import FederatedData, RoundRecord, run_simulation
from simulation.metrics import rolling_average
from simulation.storage import write_csv

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["rounds", "asr", "accuracy", "asr_smoothed", "accuracy_smoothed", "adversary_selected_cum"]

Grid = List[Tuple[str, List[Any]]]


def parse_grid(axes: Sequence[str]) -> Grid:
    """Parse `dotted.key=[v1, v2, ...]` axes, keeping their command-line order."""
    grid: Grid = []
    for axis in axes:
        if "=" not in axis:
            raise ConfigError(f"grid axis {axis!r} is not of the form key=[values]")
        key, text = axis.split("=", 1)
        key = key.strip()
        pointer = "/" + key.replace(".", "/")
        try:
            values = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"grid values for {key} are not JSON: {e}", pointer) from e
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid values for {key} must be a non-empty JSON list", pointer)
        if any(key == seen for seen, _ in grid):
            raise ConfigError(f"grid axis {key} given twice", pointer)
        grid.append((key, values))
    if not grid:
        raise ConfigError("a sweep needs at least one --grid axis")
    return grid


def grid_arms(grid: Grid) -> List[Dict[str, Any]]:
    keys = [key for key, _ in grid]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(values for _, values in grid))]


def summarize_arm(history: Sequence[RoundRecord], window: int) -> Dict[str, Any]:
    """Last evaluated ASR and accuracy of one arm, raw and smoothed over the evaluated rounds."""
    evaluated = [r for r in history if r.asr is not None]
    asr = [r.asr for r in evaluated]
    accuracy = [r.accuracy for r in evaluated]
    return {
        "rounds": len(history),
        "asr": asr[-1] if asr else None,
        "accuracy": accuracy[-1] if accuracy else None,
        "asr_smoothed": float(rolling_average(asr, window)[-1]) if asr else None,
        "accuracy_smoothed": float(rolling_average(accuracy, window)[-1]) if accuracy else None,
        "adversary_selected_cum": history[-1].adversary_selected_cum if history else 0,
    }


def cmd_sweep(config_path: str, out_path: str, axes: Sequence[str], overrides: Sequence[str] = ()) -> int:
    """
    Run every arm of a parameter grid and write one row per arm.

    Args:
        config_path: JSON experiment description shared by all arms
        out_path: CSV file for the sweep table
        axes: `dotted.key=[values]` grid axes, e.g. attack.alpha=[0.3, 0.5, 0.7, 0.9]
        overrides: dot-path overrides applied to every arm before its grid values

    Returns:
        int: exit status, 0 on success
    """
    try:
        grid = parse_grid(axes)
        arms = grid_arms(grid)
        workers = worker_threads()
        datasets: Dict[Tuple, FederatedData] = {}
        rows = []
        for number, arm in enumerate(arms, start=1):
            arm_overrides = list(overrides) + [f"{key}={json.dumps(value)}" for key, value in arm.items()]
            settings = load_settings(config_path, arm_overrides)
            config = build_sim_config(settings)
            cache_key = (config.dataset, config.seed)
            if cache_key not in datasets:
                datasets[cache_key] = FederatedData(*load_dataset(config.dataset, config.seed))

            logger.info("sweep arm %d/%d: %s", number, len(arms), arm)
            history = run_simulation(config, datasets[cache_key], workers=workers)
            row = dict(arm)
            row.update(summarize_arm(history, settings["analysis"]["window"]))
            rows.append(row)

        frame = pd.DataFrame(rows, columns=[key for key, _ in grid] + SWEEP_COLUMNS)
        write_csv(frame, out_path)
        return 0
    except Exception as e:
        return report_error("sweep", e)
