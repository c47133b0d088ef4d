import json
import logging
import sys
from typing import Callable, Sequence

import numpy as np

from setup_logic import build_sim_config, load_settings, report_error
from simulation import rng as rng_tags
from simulation.data import load_dataset
from simulation.errors import LabError
from simulation.federation import initial_params
from simulation.nn import (
    Batch,
    FlatParams,
    FlatUpdate,
    LossWeights,
    ModelSpec,
    finite_diff_grad,
    forward,
    grad,
    init_params,
    max_relative_error,
)
from simulation.rng import RngStream

logger = logging.getLogger(__name__)

GradFn = Callable[[ModelSpec, FlatParams, Batch, LossWeights, float], FlatUpdate]


def gradcheck_batch(model: ModelSpec, inputs: np.ndarray, labels: np.ndarray, stream: RngStream) -> Batch:
    """Float64 batch whose soft targets come from an independently initialised model."""
    other = init_params(model, stream.child(rng_tags.INIT))
    other = FlatParams(other.values.astype(np.float64), other.layout)
    x = inputs.astype(np.float64)
    return Batch(x, labels.copy(), forward(model, other, x), np.arange(len(labels), dtype=np.int64))


def cmd_gradcheck(config_path: str, overrides: Sequence[str] = (), grad_fn: GradFn = grad) -> int:
    """
    Compare analytic gradients with central finite differences on a seeded
    coordinate sample and print the maximum relative error.

    Args:
        config_path: experiment config (model, dataset and gradcheck sections are used)
        overrides: dot-path overrides
        grad_fn: analytic gradient under test

    Returns:
        int: 0 when the error is below gradcheck.tolerance, nonzero otherwise
    """
    try:
        settings = load_settings(config_path, overrides)
        config = build_sim_config(settings)
        check = settings["gradcheck"]
        stream = RngStream.root(config.seed).child(rng_tags.GRADCHECK)
        model = config.model

        train, _ = load_dataset(config.dataset, config.seed)
        if len(train) == 0:
            raise LabError("gradcheck needs at least one training example")
        rng = stream.generator()
        picks = np.sort(rng.choice(len(train), size=min(check["batch_size"], len(train)), replace=False))
        batch = gradcheck_batch(model, train.inputs[picks], train.labels[picks], stream)

        start = initial_params(config)
        params = FlatParams(start.values.astype(np.float64), start.layout)
        n = len(params)
        k = n if check["num_coords"] <= 0 else min(check["num_coords"], n)
        coords = np.sort(rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)

        weights = LossWeights.from_alpha(check["alpha"])
        analytic = grad_fn(model, params, batch, weights, check["temperature"])
        numeric = finite_diff_grad(model, params, batch, weights, check["temperature"], check["step"], coords)
        error = max_relative_error(analytic.values, numeric.values, coords)

        result = {
            "max_relative_error": error,
            "coordinates": int(k),
            "num_params": int(n),
            "tolerance": check["tolerance"],
            "passed": bool(error < check["tolerance"]),
        }
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
        logger.info("gradcheck: max relative error %.3e over %d of %d coordinates", error, k, n)
        if not result["passed"]:
            raise LabError(f"max relative error {error:.3e} exceeds tolerance {check['tolerance']:.1e}")
        return 0
    except Exception as e:
        return report_error("gradcheck", e)
