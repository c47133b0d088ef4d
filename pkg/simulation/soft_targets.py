"""Poisoned soft-target construction shared by batch poisoning and the attack strategies."""

import numpy as np

from simulation.errors import LabError, ShapeError


def poisoned_soft_target(l_clean: np.ndarray, l_poison: np.ndarray, label: int, target: int,
                         gamma: float, beta: float) -> np.ndarray:
    """
    Rewrite one soft target so the target class leads.

    Every class keeps its clean logit except the target, which becomes

        l_clean[label] + max(spread * gamma + (l_poison[target] - l_poison[label]),
                             spread * beta)

    with spread = l_clean[label] - min(l_clean). The increment is written on
    top of the label's clean logit, not the target's.
    """
    l_clean = np.asarray(l_clean, dtype=np.float64)
    l_poison = np.asarray(l_poison, dtype=np.float64)
    if l_clean.shape != l_poison.shape or l_clean.ndim != 1:
        raise ShapeError(f"clean {l_clean.shape} and poisoned {l_poison.shape} logits must be equal-length vectors")
    if label == target:
        raise LabError(f"label and target are both {label}; the rewrite needs distinct classes")
    out = poisoned_soft_targets(l_clean[None], l_poison[None], np.array([label]), target, gamma, beta)
    return out[0]


def poisoned_soft_targets(l_clean: np.ndarray, l_poison: np.ndarray, labels: np.ndarray, target: int,
                          gamma: float, beta: float) -> np.ndarray:
    """Row-wise version of poisoned_soft_target for (P, N_class) arrays."""
    l_clean = np.asarray(l_clean, dtype=np.float64)
    l_poison = np.asarray(l_poison, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels == target):
        raise LabError("rows whose label equals the target cannot be rewritten")
    rows = np.arange(len(labels))
    spread = l_clean[rows, labels] - l_clean.min(axis=1)
    shift = l_poison[rows, target] - l_poison[rows, labels]
    increment = np.maximum(spread * gamma + shift, spread * beta)
    out = l_clean.copy()
    out[:, target] = l_clean[rows, labels] + increment
    return out
