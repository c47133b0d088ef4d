"""
Server-side aggregation rules and the distance kernels they share.

Every rule takes an UpdateSet (rows ordered by participant id) and returns an
AggregationOutcome whose aggregate is already scaled by the server learning
rate, so the new global model is simply params + aggregate.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from simulation.clustering import hdbscan_largest_cluster
from simulation.errors import AggregationError, ShapeError
from simulation.nn import FlatUpdate
from simulation.rng import RngStream

logger = logging.getLogger(__name__)

RULES = ("fedavg", "multi_krum", "norm_clip_dp", "flame")


@dataclass
class UpdateSet:
    updates: np.ndarray
    participant_ids: Tuple[int, ...]

    def __post_init__(self):
        self.participant_ids = tuple(int(i) for i in self.participant_ids)
        if self.updates.ndim != 2 or self.updates.shape[0] != len(self.participant_ids):
            raise ShapeError(
                f"{len(self.participant_ids)} ids for update matrix of shape {self.updates.shape}"
            )
        if any(b <= a for a, b in zip(self.participant_ids, self.participant_ids[1:])):
            raise AggregationError("participant ids must be strictly increasing")

    @classmethod
    def from_updates(cls, updates: Mapping[int, FlatUpdate]) -> "UpdateSet":
        """Build from {participant_id: update} in any order; rows are sorted by id."""
        ids = sorted(updates)
        if not ids:
            return cls(np.zeros((0, 0), dtype=np.float32), ())
        lengths = {len(updates[i]) for i in ids}
        if len(lengths) != 1:
            raise ShapeError(f"updates have differing lengths {sorted(lengths)}")
        return cls(np.stack([updates[i].values for i in ids]), tuple(ids))

    def __len__(self) -> int:
        return len(self.participant_ids)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.updates.astype(np.float64), axis=1)


@dataclass(frozen=True)
class MultiKrumParams:
    f: int = 4
    m: int = 8
    squared: bool = True


@dataclass(frozen=True)
class NormClipParams:
    clip_norm: float = 1.0
    sigma: float = 0.0


@dataclass(frozen=True)
class FlameParams:
    noise_lambda: float = 0.001
    min_cluster_fraction: float = 0.5
    cluster_size_offset: int = 1


@dataclass(frozen=True)
class DefenseConfig:
    rule: str = "fedavg"
    server_lr: float = 1.0
    multi_krum: MultiKrumParams = field(default_factory=MultiKrumParams)
    norm_clip_dp: NormClipParams = field(default_factory=NormClipParams)
    flame: FlameParams = field(default_factory=FlameParams)

    def __post_init__(self):
        if self.rule not in RULES:
            raise AggregationError(f"unknown defense rule {self.rule!r}; expected one of {RULES}")
        if self.norm_clip_dp.clip_norm <= 0:
            raise AggregationError("clip_norm must be positive")
        if self.norm_clip_dp.sigma < 0 or self.flame.noise_lambda < 0:
            raise AggregationError("noise parameters must be non-negative")


@dataclass
class AggregationOutcome:
    aggregate: np.ndarray
    accepted_ids: List[int]
    diagnostics: Dict = field(default_factory=dict)


def _scaled_mean(rows: np.ndarray, eta: float) -> np.ndarray:
    """(eta / m) * sum of rows, summed in row order in float64."""
    total = rows.astype(np.float64).sum(axis=0)
    return (total * (eta / rows.shape[0])).astype(rows.dtype)


def _require_nonempty(update_set: UpdateSet) -> None:
    if len(update_set) == 0:
        raise AggregationError("cannot aggregate an empty update set")


def fedavg(update_set: UpdateSet, eta: float = 1.0) -> AggregationOutcome:
    _require_nonempty(update_set)
    return AggregationOutcome(
        _scaled_mean(update_set.updates, eta),
        list(update_set.participant_ids),
        {"norms": update_set.norms().tolist()},
    )


def pairwise_distance(update_set: UpdateSet, metric: str = "euclidean",
                      zero_distance: Optional[float] = None) -> np.ndarray:
    """
    Symmetric (n, n) matrix with a zero diagonal.

    Cosine distance is undefined for a zero-norm update. By default that
    raises; with zero_distance set, such a row sits at that distance from
    every other row instead.
    """
    n = len(update_set)
    if n < 2:
        raise AggregationError(f"pairwise distances need at least 2 updates, got {n}")
    u = update_set.updates.astype(np.float64)
    out = np.zeros((n, n), dtype=np.float64)
    if metric == "euclidean":
        for i in range(n - 1):
            out[i, i + 1:] = np.linalg.norm(u[i + 1:] - u[i], axis=1)
    elif metric == "cosine":
        norms = np.linalg.norm(u, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size and zero_distance is None:
            raise AggregationError(
                f"cosine distance undefined for zero update of participant {update_set.participant_ids[zero[0]]}"
            )
        unit = u / np.where(norms == 0, 1.0, norms)[:, None]
        for i in range(n - 1):
            out[i, i + 1:] = np.clip(1.0 - unit[i + 1:] @ unit[i], 0.0, 2.0)
        if zero.size:
            out[zero, :] = zero_distance
            out[:, zero] = zero_distance
            out = np.triu(out, k=1)
    else:
        raise AggregationError(f"unknown metric {metric!r}")
    return out + out.T


def krum_scores(update_set: UpdateSet, f: int, squared: bool = True) -> np.ndarray:
    """Sum of (squared) distances to each update's n - f - 2 nearest neighbours."""
    n = len(update_set)
    k = n - f - 2
    if k < 1:
        raise AggregationError(f"Krum needs n - f - 2 >= 1, got n={n}, f={f}")
    d = pairwise_distance(update_set, "euclidean")
    if squared:
        d = d ** 2
    scores = np.empty(n, dtype=np.float64)
    for i in range(n):
        others = np.sort(np.delete(d[i], i))
        scores[i] = others[:k].sum()
    return scores


def multi_krum(update_set: UpdateSet, f: int, m: int, eta: float = 1.0,
               squared: bool = True) -> AggregationOutcome:
    """Average of the m lowest-scoring updates; ties go to the lower participant id."""
    n = len(update_set)
    if not 2 * f + 2 < n:
        raise AggregationError(f"Multi-Krum needs 2f + 2 < n, got f={f}, n={n}")
    if not 1 <= m <= n:
        raise AggregationError(f"Multi-Krum m must lie in [1, {n}], got {m}")
    scores = krum_scores(update_set, f, squared)
    ids = update_set.participant_ids
    ranked = sorted(range(n), key=lambda i: (scores[i], ids[i]))
    chosen = sorted(ranked[:m])
    logger.info("multi-krum kept %s of %s", [ids[i] for i in chosen], list(ids))
    return AggregationOutcome(
        _scaled_mean(update_set.updates[chosen], eta),
        [ids[i] for i in chosen],
        {"scores": scores.tolist(), "norms": update_set.norms().tolist()},
    )


def norm_clip(u: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale u down to L2 norm clip_norm when it is longer; direction is kept."""
    if clip_norm <= 0:
        raise AggregationError(f"clip norm must be positive, got {clip_norm}")
    norm = float(np.linalg.norm(np.asarray(u, dtype=np.float64)))
    if norm <= clip_norm:
        return u
    return (np.asarray(u, dtype=np.float64) * (clip_norm / norm)).astype(u.dtype)


def _gaussian(stream: Optional[RngStream], sigma: float, size: int, dtype) -> np.ndarray:
    if sigma == 0 or size == 0:
        return np.zeros(size, dtype=dtype)
    if stream is None:
        raise AggregationError("a noise stream is required when sigma > 0")
    return stream.generator().normal(0.0, sigma, size).astype(dtype)


def weak_dp_aggregate(update_set: UpdateSet, clip_norm: float, sigma: float, eta: float = 1.0,
                      stream: Optional[RngStream] = None) -> AggregationOutcome:
    """Clip each update to clip_norm, average, then add N(0, sigma^2) per coordinate."""
    _require_nonempty(update_set)
    clipped = np.stack([norm_clip(row, clip_norm) for row in update_set.updates])
    mean = _scaled_mean(clipped, eta)
    aggregate = mean + _gaussian(stream, sigma, mean.shape[0], mean.dtype)
    return AggregationOutcome(
        aggregate,
        list(update_set.participant_ids),
        {"norms": update_set.norms().tolist(), "clip_bound": clip_norm, "noise_sigma": sigma},
    )


def flame_min_cluster_size(n: int, fraction: float, offset: int = 1) -> int:
    return min(n, max(2, int(math.ceil(fraction * n - 1e-9)) + offset))


def flame_aggregate(update_set: UpdateSet, noise_lambda: float, min_cluster_fraction: float,
                    eta: float = 1.0, stream: Optional[RngStream] = None,
                    cluster_size_offset: int = 1) -> AggregationOutcome:
    """
    Keep the largest cosine-HDBSCAN cluster, clip the kept updates to the
    median of their norms S, average, and add N(0, (noise_lambda * S)^2).
    """
    n = len(update_set)
    if n < 3:
        raise AggregationError(f"FLAME needs at least 3 updates, got {n}")
    mcs = flame_min_cluster_size(n, min_cluster_fraction, cluster_size_offset)
    # zero updates have no direction; they sit at distance 1 from everyone
    distances = pairwise_distance(update_set, "cosine", zero_distance=1.0)
    selection = hdbscan_largest_cluster(distances, mcs)
    kept = list(selection.members)
    norms = update_set.norms()
    bound = float(np.median(norms[kept]))
    clipped = np.stack([norm_clip(update_set.updates[i], bound) if bound > 0 else update_set.updates[i]
                        for i in kept])
    mean = _scaled_mean(clipped, eta)
    sigma = noise_lambda * bound
    aggregate = mean + _gaussian(stream, sigma, mean.shape[0], mean.dtype)
    ids = update_set.participant_ids
    logger.info("flame kept %d of %d (min_cluster_size=%d, S=%.4g)", len(kept), n, mcs, bound)
    return AggregationOutcome(
        aggregate,
        [ids[i] for i in kept],
        {
            "norms": norms.tolist(),
            "clip_bound": bound,
            "noise_sigma": sigma,
            "min_cluster_size": mcs,
            "degenerate": selection.degenerate,
        },
    )


def aggregate(update_set: UpdateSet, defense: DefenseConfig,
              stream: Optional[RngStream] = None) -> AggregationOutcome:
    """Dispatch to the configured rule."""
    eta = defense.server_lr
    if defense.rule == "fedavg":
        return fedavg(update_set, eta)
    if defense.rule == "multi_krum":
        p = defense.multi_krum
        return multi_krum(update_set, p.f, p.m, eta, p.squared)
    if defense.rule == "norm_clip_dp":
        p = defense.norm_clip_dp
        return weak_dp_aggregate(update_set, p.clip_norm, p.sigma, eta, stream)
    p = defense.flame
    return flame_aggregate(update_set, p.noise_lambda, p.min_cluster_fraction, eta, stream,
                           p.cluster_size_offset)


def distance_summary(distances: np.ndarray, ids: Sequence[int], adversary_ids: Sequence[int]) -> Dict[str, float]:
    """Mean adversary-to-benign distance against the benign-to-benign 95th percentile."""
    ids = list(ids)
    adv = [i for i, pid in enumerate(ids) if pid in set(adversary_ids)]
    ben = [i for i, pid in enumerate(ids) if pid not in set(adversary_ids)]
    if not adv or len(ben) < 2:
        raise AggregationError("need at least one adversary and two benign updates")
    cross = distances[np.ix_(adv, ben)]
    bb = distances[np.ix_(ben, ben)][np.triu_indices(len(ben), k=1)]
    return {
        "adversary_to_benign_mean": float(cross.mean()),
        "benign_p95": float(np.percentile(bb, 95)),
        "benign_mean": float(bb.mean()),
    }
