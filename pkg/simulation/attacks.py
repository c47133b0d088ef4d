"""
Local training strategies.

Benign participants run plain SGD on cross-entropy. Adversaries poison part
of every batch with the trigger (naive), optionally distilling from the
round-start global model at the same time (advkd_reg keeps the teacher's
soft targets, advkd_enh rewrites them toward the target class). A DBA slot
swaps the full trigger for one of its disjoint parts.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, Optional

import numpy as np

from simulation import rng as rng_tags
from simulation.data import Dataset, TriggerSpec, default_trigger, poison_batch, split_trigger_dba
from simulation.errors import LabError
from simulation.nn import Batch, FlatParams, FlatUpdate, LossWeights, ModelSpec, forward, grad, sgd_step
from simulation.rng import RngStream

logger = logging.getLogger(__name__)

METHODS = ("benign", "naive", "advkd_reg", "advkd_enh")
EVAL_CHUNK = 256


@dataclass(frozen=True)
class DbaSlot:
    num_parts: int
    part_index: int

    def __post_init__(self):
        if self.num_parts < 1 or not 0 <= self.part_index < self.num_parts:
            raise LabError(f"DBA part {self.part_index} invalid for {self.num_parts} parts")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "naive"
    alpha: float = 0.5
    gamma: float = 2.0
    beta: float = 0.5
    temperature: float = 1.0
    trigger: TriggerSpec = field(default_factory=default_trigger)
    poison_fraction: float = 0.3
    dba: Optional[DbaSlot] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise LabError(f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise LabError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0 or self.beta < 0:
            raise LabError("gamma and beta must be non-negative")
        if self.temperature <= 0:
            raise LabError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise LabError(f"poison_fraction must lie in [0, 1], got {self.poison_fraction}")

    @property
    def distills(self) -> bool:
        return self.method in ("advkd_reg", "advkd_enh")

    @property
    def poisons(self) -> bool:
        return self.method != "benign"

    def loss_weights(self) -> LossWeights:
        return LossWeights.from_alpha(self.alpha) if self.distills else LossWeights(1.0, 0.0)

    def poison_mode(self) -> str:
        return {"naive": "hard", "advkd_reg": "reg", "advkd_enh": "enh"}[self.method]

    def training_trigger(self) -> TriggerSpec:
        if self.dba is None:
            return self.trigger
        return split_trigger_dba(self.trigger, self.dba.num_parts)[self.dba.part_index]


BENIGN = AttackConfig(method="benign")


def as_benign(attack: AttackConfig) -> AttackConfig:
    return replace(attack, method="benign", dba=None)


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 2
    batch_size: int = 64
    learning_rate: float = 0.01

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise LabError("epochs and batch_size must be at least 1")
        if self.learning_rate < 0:
            raise LabError(f"learning_rate must be non-negative, got {self.learning_rate}")


def evaluate_logits(model: ModelSpec, params: FlatParams, inputs: np.ndarray) -> np.ndarray:
    """forward() in fixed-size chunks."""
    parts = [forward(model, params, inputs[i:i + EVAL_CHUNK]) for i in range(0, len(inputs), EVAL_CHUNK)]
    return np.concatenate(parts) if parts else np.zeros((0, model.num_classes), dtype=params.values.dtype)


def generate_soft_targets(model: ModelSpec, global_params: FlatParams, local: Dataset) -> Batch:
    """The local set with the global model's logits attached, order preserved."""
    batch = local.as_batch()
    batch.soft_targets = evaluate_logits(model, global_params, local.inputs)
    return batch


def batch_iter(data: Batch, batch_size: int, epoch: int, stream: RngStream) -> Iterator[Batch]:
    """One epoch in a shuffle order seeded by (stream, epoch); the short tail batch is kept."""
    if batch_size < 1:
        raise LabError(f"batch_size must be at least 1, got {batch_size}")
    order = stream.child(rng_tags.BATCHES, epoch).generator().permutation(len(data))
    for start in range(0, len(order), batch_size):
        yield data.take(order[start:start + batch_size])


class _PoisonedTeacher:
    """Global-model logits on triggered inputs, cached per local example index."""

    def __init__(self, model: ModelSpec, params: FlatParams):
        self.model = model
        self.params = params
        self.cache: Dict[int, np.ndarray] = {}

    def __call__(self, inputs: np.ndarray, indices: Optional[np.ndarray]) -> np.ndarray:
        if indices is None:
            return evaluate_logits(self.model, self.params, inputs)
        missing = [pos for pos, i in enumerate(indices) if int(i) not in self.cache]
        if missing:
            fresh = evaluate_logits(self.model, self.params, inputs[missing])
            for row, pos in zip(fresh, missing):
                self.cache[int(indices[pos])] = row
        return np.stack([self.cache[int(i)] for i in indices])


def local_train(model: ModelSpec, global_params: FlatParams, local: Dataset, attack: AttackConfig,
                train: LocalTrainConfig, stream: RngStream) -> FlatUpdate:
    """Run E epochs of (possibly poisoned, possibly distilled) SGD; return local - global."""
    if len(local) == 0:
        return FlatUpdate(np.zeros_like(global_params.values), global_params.layout)

    weights = attack.loss_weights()
    if attack.distills:
        data = generate_soft_targets(model, global_params, local)
    else:
        data = local.as_batch()

    trigger = attack.training_trigger() if attack.poisons else None
    if trigger is not None:
        trigger.check_fits(local.input_shape)
    teacher = _PoisonedTeacher(model, global_params) if attack.method == "advkd_enh" else None

    params = global_params.copy()
    for epoch in range(train.epochs):
        for batch in batch_iter(data, train.batch_size, epoch, stream):
            if trigger is not None:
                batch = poison_batch(batch, trigger, attack.poison_fraction, attack.poison_mode(),
                                     teacher, attack.gamma, attack.beta)
            g = grad(model, params, batch, weights, attack.temperature)
            params = sgd_step(params, g, train.learning_rate)
    logger.debug("local_train %s: %d examples, %d epochs", attack.method, len(local), train.epochs)
    return FlatUpdate(params.values - global_params.values, global_params.layout)
