import logging
import os
from typing import Sequence

import pandas as pd

from setup_logic import build_sim_config, load_settings, report_error, serialize_config, worker_threads
from simulation.aggregation import UpdateSet
from simulation.federation import METRICS_COLUMNS, GlobalState, RoundRecord, SimConfig, run_simulation
from simulation.storage import append_jsonl, save_update_archive, write_csv, write_fp32, write_json

logger = logging.getLogger(__name__)


class RunRecorder:
    """Writes per-round artifacts into a run directory as the simulation advances."""

    def __init__(self, out_dir: str, config: SimConfig):
        self.out_dir = out_dir
        self.config = config
        self.rounds_path = os.path.join(out_dir, "rounds.jsonl")
        self.checkpoints = os.path.join(out_dir, "checkpoints")
        self.state = None
        open(self.rounds_path, "w").close()

    def on_start(self, state: GlobalState) -> None:
        self.state = state
        write_fp32(os.path.join(self.checkpoints, "initial.fp32"), state.params)

    def on_round(self, state: GlobalState, record: RoundRecord, update_set: UpdateSet) -> None:
        self.state = state
        append_jsonl(self.rounds_path, record.to_dict())
        if self.config.save_updates:
            save_update_archive(self.out_dir, record.round, update_set, record.adversary_ids)
        if record.asr is not None:
            stem = os.path.join(self.checkpoints, f"round_{record.round}")
            write_fp32(stem + ".fp32", state.params)
            write_json(stem + ".json", state.sidecar())

    def finish(self) -> None:
        write_fp32(os.path.join(self.checkpoints, "final.fp32"), self.state.params)


def metrics_frame(history: Sequence[RoundRecord]) -> pd.DataFrame:
    return pd.DataFrame([record.csv_row() for record in history], columns=METRICS_COLUMNS)


def cmd_run(config_path: str, out_dir: str, overrides: Sequence[str] = ()) -> int:
    """
    Run a simulation and write its artifacts.

    Args:
        config_path: JSON experiment description
        out_dir: run directory (created if needed)
        overrides: dot-path `key=value` overrides

    Returns:
        int: exit status, 0 on success
    """
    try:
        settings = load_settings(config_path, overrides)
        config = build_sim_config(settings)
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, "config.json"),
                   serialize_config(config, settings["analysis"], settings["gradcheck"]))

        recorder = RunRecorder(out_dir, config)
        history = run_simulation(config, workers=worker_threads(),
                                 on_round=recorder.on_round, on_start=recorder.on_start)
        recorder.finish()
        write_csv(metrics_frame(history), os.path.join(out_dir, "metrics.csv"))
        if history:
            last = history[-1]
            logger.info("run finished after %d rounds: asr=%s accuracy=%s", len(history), last.asr, last.accuracy)
        return 0
    except Exception as e:
        return report_error("run", e)
