import logging
import os
from typing import Sequence

from setup_logic import build_sim_config, load_settings, report_error
from simulation.data import dirichlet_partition, load_dataset

logger = logging.getLogger(__name__)


def cmd_partition(config_path: str, out_path: str, overrides: Sequence[str] = ()) -> int:
    """Write the Dirichlet partition plan of the configured training set as JSON."""
    try:
        config = build_sim_config(load_settings(config_path, overrides))
        train, _ = load_dataset(config.dataset, config.seed)
        plan = dirichlet_partition(train, config.num_participants, config.partition_alpha,
                                   config.effective_partition_seed)
        plan.check_cover(len(train))
        parent = os.path.dirname(out_path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(out_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(plan.to_json() + "\n")
        sizes = list(plan.sizes().values())
        logger.info("partitioned %d examples over %d participants (min %d, max %d) -> %s",
                    len(train), len(sizes), min(sizes), max(sizes), out_path)
        return 0
    except Exception as e:
        return report_error("partition", e)
