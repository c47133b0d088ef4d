"""
Evaluation metrics: attack success rate, clean accuracy, update gains,
activation grids and series smoothing.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from simulation import rng as rng_tags
from simulation.attacks import BENIGN, AttackConfig, LocalTrainConfig, evaluate_logits, local_train
from simulation.data import Dataset, PartitionPlan, TriggerSpec, stamp
from simulation.errors import LabError, ShapeError
from simulation.nn import FlatParams, FlatUpdate, MaxPool, ModelSpec, forward_activations
from simulation.rng import RngStream

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 1000
DEFAULT_WINDOW = 5


def _predictions(model: ModelSpec, params: FlatParams, inputs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(evaluate_logits(model, params, inputs), axis=1)


def attack_success_rate(model: ModelSpec, params: FlatParams, test: Dataset, trigger: TriggerSpec,
                        exclude_target_class: bool = False) -> float:
    """
    Fraction of triggered test inputs classified as the target class.

    Args:
        exclude_target_class: drop test examples whose true label already is
            the target before counting. Off by default, so every test example
            counts.
    """
    data = test.subset(np.flatnonzero(test.labels != trigger.target_class)) if exclude_target_class else test
    if len(data) == 0:
        raise LabError("attack success rate needs a non-empty test set")
    preds = _predictions(model, params, stamp(data.inputs, trigger))
    return float(np.mean(preds == trigger.target_class))


def test_accuracy(model: ModelSpec, params: FlatParams, test: Dataset) -> float:
    if len(test) == 0:
        raise LabError("accuracy needs a non-empty test set")
    return float(np.mean(_predictions(model, params, test.inputs) == test.labels))


# ---------------------------------------------------------------------------
# Update gains
# ---------------------------------------------------------------------------

def effective_top_k(k: int, num_params: int) -> int:
    """k capped at a tenth of the parameter count (at least one)."""
    return max(1, min(int(k), num_params // 10))


def top_k_mask(global_params: FlatParams, k: int) -> np.ndarray:
    """Indices of the k largest-magnitude parameters, ascending; ties go to the lower index."""
    n = len(global_params)
    if not 0 <= k <= n:
        raise LabError(f"mask size {k} outside [0, {n}]")
    order = np.argsort(-np.abs(global_params.values.astype(np.float64)), kind="stable")
    return np.sort(order[:k])


def _masked(poison: FlatUpdate, clean: FlatUpdate, mask: np.ndarray):
    if len(poison) != len(clean):
        raise ShapeError(f"update lengths differ: {len(poison)} vs {len(clean)}")
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size and (mask.min() < 0 or mask.max() >= len(poison)):
        raise LabError("mask indices out of range")
    return poison.values[mask].astype(np.float64), clean.values[mask].astype(np.float64)


def update_gain(poison: FlatUpdate, clean: FlatUpdate, mask: np.ndarray) -> float:
    p, c = _masked(poison, clean, mask)
    return float(np.dot(p, c))


def update_sign_gain(poison: FlatUpdate, clean: FlatUpdate, mask: np.ndarray) -> float:
    p, c = _masked(poison, clean, mask)
    return float(np.sum(np.sign(p) * np.sign(c)))


@dataclass
class GainReport:
    method: str
    participant_ids: List[int]
    update_gain: List[float]
    update_sign_gain: List[float]
    mask_size: int

    def __len__(self) -> int:
        return len(self.participant_ids)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "participant_id": self.participant_ids,
            "update_gain": self.update_gain,
            "update_sign_gain": self.update_sign_gain,
        })

    def sorted_frame(self) -> pd.DataFrame:
        """Each metric sorted ascending on its own, ranked 0..n-1."""
        return pd.DataFrame({
            "rank": list(range(len(self))),
            "update_gain": sorted(self.update_gain),
            "update_sign_gain": sorted(self.update_sign_gain),
        })

    def median_sign_gain(self) -> float:
        return float(np.median(self.update_sign_gain)) if self.update_sign_gain else 0.0


def gain_report(model: ModelSpec, global_params: FlatParams, train: Dataset, partition: PartitionPlan,
                attacks: Mapping[str, AttackConfig], local: LocalTrainConfig, seed: int,
                k: int = DEFAULT_TOP_K, participants: Optional[Sequence[int]] = None) -> Dict[str, GainReport]:
    """
    Pair every participant's clean update with an attacked one trained from the
    same global model, data and random stream, and score each pair on the
    top-k global parameters.
    """
    ids = sorted(partition.assignments) if participants is None else sorted(participants)
    mask = top_k_mask(global_params, effective_top_k(k, len(global_params)))
    root = RngStream.root(seed)
    clean_updates: Dict[int, FlatUpdate] = {}
    for pid in ids:
        local_set = train.subset(partition.assignments[pid])
        stream = root.child(rng_tags.LOCAL_TRAIN, 0, pid)
        clean_updates[pid] = local_train(model, global_params, local_set, BENIGN, local, stream)

    reports = {}
    for name, attack in attacks.items():
        gains, signs = [], []
        for pid in ids:
            local_set = train.subset(partition.assignments[pid])
            stream = root.child(rng_tags.LOCAL_TRAIN, 0, pid)
            poisoned = local_train(model, global_params, local_set, attack, local, stream)
            gains.append(update_gain(poisoned, clean_updates[pid], mask))
            signs.append(update_sign_gain(poisoned, clean_updates[pid], mask))
        reports[name] = GainReport(name, list(ids), gains, signs, int(mask.size))
        logger.info("gains %s: median sign gain %.1f over %d participants",
                    name, reports[name].median_sign_gain(), len(ids))
    return reports


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

@dataclass
class ActivationGrid:
    layer_index: int
    class_label: int
    grid: np.ndarray = field(repr=False)

    def to_frame(self) -> pd.DataFrame:
        """Long format: channel, row, col, value."""
        c, h, w = self.grid.shape
        ch, rows, cols = np.meshgrid(np.arange(c), np.arange(h), np.arange(w), indexing="ij")
        return pd.DataFrame({
            "channel": ch.reshape(-1),
            "row": rows.reshape(-1),
            "col": cols.reshape(-1),
            "value": self.grid.reshape(-1),
        })


def pool_layers(model: ModelSpec) -> List[int]:
    return [i for i, layer in enumerate(model.layers) if isinstance(layer, MaxPool)]


def activation_grid(model: ModelSpec, params: FlatParams, samples: Dataset,
                    layer_index: Optional[int] = None) -> ActivationGrid:
    """Mean post-pool activation over samples of a single class; defaults to the last pooling layer."""
    if len(samples) == 0:
        raise LabError("activation grid needs at least one sample")
    labels = np.unique(samples.labels)
    if labels.size != 1:
        raise LabError(f"samples must share one label, found {labels.tolist()}")
    pools = pool_layers(model)
    if layer_index is None:
        if not pools:
            raise LabError("model has no pooling layer")
        layer_index = pools[-1]
    if layer_index not in pools:
        raise LabError(f"layer {layer_index} is not a pooling layer (pooling layers: {pools})")
    activations = forward_activations(model, params, samples.inputs)[layer_index]
    grid = activations.astype(np.float64).mean(axis=0)
    return ActivationGrid(layer_index, int(labels[0]), grid)


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------

def rolling_average(series: Sequence[float], window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Centered moving average; windows are truncated at the edges."""
    if window < 1 or window % 2 == 0:
        raise LabError(f"window must be a positive odd number, got {window}")
    x = np.asarray(series, dtype=np.float64)
    half = window // 2
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        chunk = x[max(0, i - half):i + half + 1]
        low = chunk.min()
        # averaging offsets from the minimum keeps constant windows exact
        out[i] = min(low + (chunk - low).mean(), chunk.max())
    return out


def smooth_frame(frame: pd.DataFrame, columns: Sequence[str], window: int = DEFAULT_WINDOW) -> pd.DataFrame:
    """Copy of frame with a `<col>_smoothed` column appended per listed column; NaN rows are skipped."""
    out = frame.copy()
    for col in columns:
        if col not in frame.columns:
            raise LabError(f"column {col!r} not in table (have {list(frame.columns)})")
        smoothed = pd.Series(np.nan, index=frame.index)
        present = frame[col].notna()
        if present.any():
            smoothed[present] = rolling_average(frame.loc[present, col].to_numpy(), window)
        out[f"{col}_smoothed"] = smoothed
    return out


def with_method(attack: AttackConfig, method: str) -> AttackConfig:
    return replace(attack, method=method)
