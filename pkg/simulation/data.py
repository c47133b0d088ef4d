"""
Datasets, non-IID partitioning, triggers and batch poisoning.

Datasets are stored column-wise (one input array, one label array); single
examples are materialised as LabeledExample only when asked for.
"""

import gzip
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from simulation import rng as rng_tags
from simulation.errors import IdxFormatError, LabError, ShapeError
from simulation.nn import Batch
from simulation.soft_targets import poisoned_soft_targets

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

POISON_MODES = ("hard", "reg", "enh")

TeacherEval = Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]


@dataclass(frozen=True)
class LabeledExample:
    input: np.ndarray
    label: int


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    input_shape: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.input_shape:
            self.input_shape = tuple(self.inputs.shape[1:])
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if tuple(self.inputs.shape[1:]) != self.input_shape:
            raise ShapeError(f"inputs {self.inputs.shape[1:]} do not match input_shape {self.input_shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(self.inputs[i], int(self.labels[i]))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.input_shape)

    def with_label(self, label: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels == label))

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.labels, None, np.arange(len(self), dtype=np.int64))


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _read_bytes(path: str) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _header(raw: bytes, path: str, words: int) -> Tuple[int, ...]:
    if len(raw) < 4 * words:
        raise IdxFormatError(f"header needs {4 * words} bytes, file has {len(raw)}", path, len(raw))
    return tuple(int(v) for v in np.frombuffer(raw[:4 * words], dtype=">u4"))


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images_raw = _read_bytes(images_path)
    labels_raw = _read_bytes(labels_path)

    (magic,) = _header(images_raw, images_path, 1)
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}", images_path, 0)
    _, count, rows, cols = _header(images_raw, images_path, 4)
    expected = 16 + count * rows * cols
    if len(images_raw) != expected:
        raise IdxFormatError(
            f"expected {expected} bytes for {count} images of {rows}x{cols}, found {len(images_raw)}",
            images_path, min(len(images_raw), expected),
        )

    (magic,) = _header(labels_raw, labels_path, 1)
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}", labels_path, 0)
    _, label_count = _header(labels_raw, labels_path, 2)
    if label_count != count:
        raise IdxFormatError(f"label count {label_count} != image count {count}", labels_path, 4)
    if len(labels_raw) != 8 + label_count:
        raise IdxFormatError(
            f"expected {8 + label_count} bytes, found {len(labels_raw)}",
            labels_path, min(len(labels_raw), 8 + label_count),
        )

    pixels = np.frombuffer(images_raw, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)
    labels = np.frombuffer(labels_raw, dtype=np.uint8, offset=8).astype(np.int64)
    logger.info("loaded %d examples from %s", count, images_path)
    return Dataset((pixels.astype(np.float32) / np.float32(255.0)), labels, num_classes, (1, rows, cols))


def synth_blobs(num_classes: int, per_class: int, input_shape: Sequence[int], seed: int,
                sigma: float = 0.05) -> Dataset:
    """Gaussian blobs around one random mean image per class, clipped to [0, 1]."""
    if per_class < 1:
        raise LabError(f"per_class must be at least 1, got {per_class}")
    shape = tuple(int(d) for d in input_shape)
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.0, 1.0, size=(num_classes,) + shape)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(0.0, sigma, size=(len(labels),) + shape)
    inputs = np.clip(means[labels] + noise, 0.0, 1.0).astype(np.float32)
    return Dataset(inputs, labels, num_classes, shape)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    num_classes: int = 10
    input_shape: Tuple[int, ...] = (1, 28, 28)
    per_class: int = 200
    test_per_class: int = 50
    sigma: float = 0.3
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


def load_dataset(config: DatasetConfig, seed: int) -> Tuple[Dataset, Dataset]:
    """Train and test sets described by the dataset section of a SimConfig."""
    if config.kind == "idx":
        train = load_idx(config.train_images, config.train_labels, config.num_classes)
        test = load_idx(config.test_images, config.test_labels, config.num_classes)
        return train, test
    if config.kind != "blobs":
        raise LabError(f"unknown dataset kind {config.kind!r}")
    # one draw so train and test share the class means
    total = config.per_class + config.test_per_class
    full = synth_blobs(config.num_classes, total, config.input_shape, seed, config.sigma)
    within = np.arange(len(full)) % total
    train = full.subset(np.flatnonzero(within < config.per_class))
    test = full.subset(np.flatnonzero(within >= config.per_class))
    return train, test


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

@dataclass
class PartitionPlan:
    assignments: Dict[int, List[int]]
    alpha: float
    seed: int

    def sizes(self) -> Dict[int, int]:
        return {pid: len(idx) for pid, idx in self.assignments.items()}

    def check_cover(self, dataset_size: int) -> None:
        seen = np.concatenate([np.asarray(v, dtype=np.int64) for v in self.assignments.values()]) \
            if self.assignments else np.zeros(0, dtype=np.int64)
        if len(seen) != dataset_size or not np.array_equal(np.sort(seen), np.arange(dataset_size)):
            raise LabError("partition is not a disjoint cover of the dataset")

    def to_json(self) -> str:
        return json.dumps({
            "alpha": self.alpha,
            "seed": self.seed,
            "assignments": {str(pid): list(map(int, idx)) for pid, idx in sorted(self.assignments.items())},
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        raw = json.loads(text)
        return cls({int(k): list(v) for k, v in raw["assignments"].items()}, float(raw["alpha"]), int(raw["seed"]))


def dirichlet_partition(dataset: Dataset, num_participants: int, alpha: float, seed: int) -> PartitionPlan:
    """
    Per class: draw Dirichlet(alpha) shares over participants, draw a
    multinomial count per participant, then deal a seeded shuffle of that
    class's indices out in those counts.
    """
    if num_participants < 1:
        raise LabError(f"need at least one participant, got {num_participants}")
    if alpha <= 0:
        raise LabError(f"Dirichlet alpha must be positive, got {alpha}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), rng_tags.PARTITION]))
    buckets: List[List[int]] = [[] for _ in range(num_participants)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        shares = rng.dirichlet(np.full(num_participants, alpha))
        shares = shares / shares.sum()
        counts = rng.multinomial(idx.size, shares)
        dealt = rng.permutation(idx)
        for pid, chunk in enumerate(np.split(dealt, np.cumsum(counts)[:-1])):
            buckets[pid].extend(int(i) for i in chunk)
    plan = PartitionPlan({pid: sorted(b) for pid, b in enumerate(buckets)}, float(alpha), int(seed))
    logger.debug("partitioned %d examples over %d participants", len(dataset), num_participants)
    return plan


# ---------------------------------------------------------------------------
# Triggers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class TriggerPixel:
    row: int
    col: int
    channel: int
    value: float = 1.0


@dataclass(frozen=True)
class TriggerSpec:
    pixels: Tuple[TriggerPixel, ...]
    target_class: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pixels", tuple(self.pixels))
        if not self.pixels:
            raise LabError("trigger needs at least one pixel")
        coords = [(p.row, p.col, p.channel) for p in self.pixels]
        if len(set(coords)) != len(coords):
            raise LabError("trigger has duplicate pixel coordinates")
        if any(not 0.0 <= p.value <= 1.0 for p in self.pixels):
            raise LabError("trigger pixel values must lie in [0, 1]")

    def check_fits(self, input_shape: Sequence[int]) -> None:
        if len(input_shape) != 3:
            raise ShapeError(f"triggers need (C, H, W) inputs, got {tuple(input_shape)}")
        c, h, w = input_shape
        for p in self.pixels:
            if not (0 <= p.channel < c and 0 <= p.row < h and 0 <= p.col < w):
                raise ShapeError(f"trigger pixel {(p.row, p.col, p.channel)} outside input {tuple(input_shape)}")

    def to_dict(self) -> Dict:
        return {
            "target_class": self.target_class,
            "pixels": [[p.row, p.col, p.channel, p.value] for p in self.pixels],
        }

    @classmethod
    def from_dict(cls, raw: Dict) -> "TriggerSpec":
        return cls(tuple(TriggerPixel(int(r), int(c), int(ch), float(v)) for r, c, ch, v in raw["pixels"]),
                   int(raw.get("target_class", 0)))


def default_trigger(target_class: int = 0) -> TriggerSpec:
    """2x2 block plus a 1x2 bar in the top-left corner."""
    block = [TriggerPixel(r, c, 0, 1.0) for r in (0, 1) for c in (0, 1)]
    bar = [TriggerPixel(0, c, 0, 1.0) for c in (3, 4)]
    return TriggerSpec(tuple(block + bar), target_class)


def stamp(inputs: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Copy of a (B, C, H, W) array with the trigger pixels overwritten."""
    trigger.check_fits(inputs.shape[1:])
    out = np.array(inputs, copy=True)
    for p in trigger.pixels:
        out[:, p.channel, p.row, p.col] = p.value
    return out


def apply_trigger(example: LabeledExample, trigger: TriggerSpec, flip_label: bool) -> LabeledExample:
    stamped = stamp(example.input[None], trigger)[0]
    return LabeledExample(stamped, trigger.target_class if flip_label else example.label)


def split_trigger_dba(trigger: TriggerSpec, k: int) -> List[TriggerSpec]:
    """Deal the sorted pixels round-robin into k disjoint sub-triggers."""
    if k < 1 or k > len(trigger.pixels):
        raise LabError(f"cannot split a {len(trigger.pixels)}-pixel trigger into {k} parts")
    if k == 1:
        return [trigger]
    ordered = sorted(trigger.pixels, key=lambda p: (p.row, p.col, p.channel))
    return [TriggerSpec(tuple(ordered[i::k]), trigger.target_class) for i in range(k)]


def poison_count(batch_size: int, poison_fraction: float) -> int:
    # the epsilon keeps e.g. 0.3 * 10 from rounding up to 4
    return min(batch_size, int(math.ceil(poison_fraction * batch_size - 1e-9)))


def poison_batch(batch: Batch, trigger: TriggerSpec, poison_fraction: float, mode: str = "hard",
                 teacher_eval: Optional[TeacherEval] = None, gamma: float = 2.0, beta: float = 0.5) -> Batch:
    """
    Trigger the leading ceil(poison_fraction * |batch|) examples and relabel them
    to the target class.

    mode "hard" and "reg" leave soft targets alone; "enh" rewrites the soft
    targets of poisoned examples from the teacher's logits on the triggered
    input. Examples already labelled with the target keep their soft target.
    """
    if not 0.0 <= poison_fraction <= 1.0:
        raise LabError(f"poison_fraction must lie in [0, 1], got {poison_fraction}")
    if mode not in POISON_MODES:
        raise LabError(f"unknown poison mode {mode!r}; expected one of {POISON_MODES}")
    if mode == "enh" and teacher_eval is None:
        raise LabError("enh poisoning needs a teacher evaluation callback")
    if mode == "enh" and batch.soft_targets is None:
        raise LabError("enh poisoning needs soft targets on the batch")

    k = poison_count(len(batch), poison_fraction)
    if k == 0:
        return batch
    out = batch.copy()
    original_labels = batch.labels[:k]
    out.inputs[:k] = stamp(batch.inputs[:k], trigger)
    out.labels[:k] = trigger.target_class

    if mode == "enh":
        rewrite = np.flatnonzero(original_labels != trigger.target_class)
        if rewrite.size:
            idx = None if batch.indices is None else batch.indices[:k][rewrite]
            l_poison = teacher_eval(out.inputs[:k][rewrite], idx)
            rewritten = poisoned_soft_targets(
                batch.soft_targets[:k][rewrite], l_poison, original_labels[rewrite],
                trigger.target_class, gamma, beta,
            )
            out.soft_targets[rewrite] = rewritten.astype(out.soft_targets.dtype)
    return out
