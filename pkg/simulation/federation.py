"""
The round engine.

Each round selects participants, trains them (adversarially for adversary
ids once the attack has started), aggregates through the configured defense
and moves the global model. Local training may fan out to a thread pool;
results are keyed by participant id and reduced in id order, so the pool
size never changes the outcome.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from simulation import rng as rng_tags
from simulation.aggregation import AggregationOutcome, DefenseConfig, UpdateSet, aggregate
from simulation.attacks import BENIGN, AttackConfig, DbaSlot, LocalTrainConfig, local_train
from simulation.data import Dataset, DatasetConfig, PartitionPlan, dirichlet_partition, load_dataset
from simulation.errors import ConfigError, LabError
from simulation.metrics import attack_success_rate, test_accuracy
from simulation.nn import FlatParams, FlatUpdate, ModelSpec, init_params, param_layout
from simulation.rng import RngStream
from simulation.storage import read_fp32

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    model: ModelSpec
    seed: int = 0
    num_participants: int = 100
    per_round: int = 12
    rounds: int = 50
    attack_start_round: int = 10
    adversary_ids: Tuple[int, ...] = (0,)
    adversary_always_selected: bool = True
    eval_every: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    dba_parts: int = 0
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    partition_alpha: float = 0.5
    partition_seed: Optional[int] = None
    init_params: str = ""
    save_updates: bool = False

    def __post_init__(self):
        object.__setattr__(self, "adversary_ids", tuple(sorted(int(i) for i in self.adversary_ids)))
        if self.num_participants < 1:
            raise ConfigError("need at least one participant", "/num_participants")
        if not 1 <= self.per_round <= self.num_participants:
            raise ConfigError(f"per_round must lie in [1, {self.num_participants}]", "/per_round")
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative", "/rounds")
        if not 0 <= self.attack_start_round <= self.rounds:
            raise ConfigError(f"attack_start_round must lie in [0, {self.rounds}]", "/attack_start_round")
        if len(self.adversary_ids) >= self.num_participants:
            raise ConfigError("adversaries must be fewer than participants", "/adversary_ids")
        if len(set(self.adversary_ids)) != len(self.adversary_ids):
            raise ConfigError("duplicate adversary id", "/adversary_ids")
        if any(not 0 <= i < self.num_participants for i in self.adversary_ids):
            raise ConfigError("adversary id out of range", "/adversary_ids")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1", "/eval_every")
        if self.dba_parts < 0:
            raise ConfigError("dba_parts must be non-negative", "/attack/dba_parts")
        if self.dba_parts > len(self.attack.trigger.pixels):
            raise ConfigError(
                f"cannot split a {len(self.attack.trigger.pixels)}-pixel trigger into {self.dba_parts} parts",
                "/attack/dba_parts",
            )
        if self.partition_alpha <= 0:
            raise ConfigError("Dirichlet alpha must be positive", "/partition/alpha")

    @property
    def effective_partition_seed(self) -> int:
        return self.seed if self.partition_seed is None else self.partition_seed

    def is_attacking(self, round_index: int) -> bool:
        return bool(self.adversary_ids) and self.attack.poisons and round_index >= self.attack_start_round

    def adversary_attack(self, participant_id: int) -> AttackConfig:
        """The attack a given adversary trains with; DBA adversaries get their own trigger part."""
        if self.dba_parts == 0:
            return self.attack
        position = self.adversary_ids.index(participant_id)
        return replace(self.attack, dba=DbaSlot(self.dba_parts, position % self.dba_parts))


@dataclass
class RoundRecord:
    round: int
    selected_ids: List[int]
    accepted_ids: List[int]
    adversary_ids: List[int]
    norms: List[float]
    asr: Optional[float]
    accuracy: Optional[float]
    diagnostics: Dict = field(default_factory=dict)
    adversary_accepted: int = 0
    adversary_selected_cum: int = 0

    def to_dict(self) -> Dict:
        return {
            "round": self.round,
            "selected_ids": list(self.selected_ids),
            "accepted_ids": list(self.accepted_ids),
            "adversary_ids": list(self.adversary_ids),
            "norms": list(self.norms),
            "asr": self.asr,
            "accuracy": self.accuracy,
            "diagnostics": self.diagnostics,
            "adversary_accepted": self.adversary_accepted,
            "adversary_selected_cum": self.adversary_selected_cum,
        }

    def csv_row(self) -> Dict:
        return {
            "round": self.round,
            "asr": self.asr,
            "accuracy": self.accuracy,
            "adversary_selected_cum": self.adversary_selected_cum,
            "accepted_count": len(self.accepted_ids),
            "clip_bound": self.diagnostics.get("clip_bound"),
            "noise_sigma": self.diagnostics.get("noise_sigma"),
            "adversary_accepted": self.adversary_accepted,
        }


METRICS_COLUMNS = ["round", "asr", "accuracy", "adversary_selected_cum", "accepted_count",
                   "clip_bound", "noise_sigma", "adversary_accepted"]


@dataclass
class FederatedData:
    train: Dataset
    test: Dataset


@dataclass
class GlobalState:
    round: int
    params: FlatParams
    partition: PartitionPlan
    history: List[RoundRecord] = field(default_factory=list)

    def sidecar(self) -> Dict:
        """JSON-friendly summary stored next to a parameter checkpoint."""
        return {
            "round": self.round,
            "num_params": len(self.params),
            "partition": {"alpha": self.partition.alpha, "seed": self.partition.seed},
            "history_length": len(self.history),
            "last_record": self.history[-1].to_dict() if self.history else None,
        }


RoundHook = Callable[[GlobalState, RoundRecord, UpdateSet], None]


def select_participants(stream: RngStream, num_participants: int, per_round: int,
                        adversary_ids: Sequence[int], always_include: bool, round_index: int,
                        attack_start_round: int = 0) -> List[int]:
    """
    Uniform sample of per_round ids without replacement, sorted ascending.
    Once the attack has started, always_include forces every adversary in and
    draws the rest from the benign ids.
    """
    if not 1 <= per_round <= num_participants:
        raise LabError(f"cannot select {per_round} of {num_participants} participants")
    rng = stream.child(rng_tags.SELECTION, round_index).generator()
    if always_include and adversary_ids and round_index >= attack_start_round:
        forced = sorted(set(int(i) for i in adversary_ids))
        if len(forced) > per_round:
            raise LabError(f"{len(forced)} forced adversaries exceed {per_round} selected per round")
        benign = np.setdiff1d(np.arange(num_participants), forced)
        rest = rng.choice(benign, size=per_round - len(forced), replace=False)
        chosen = forced + [int(i) for i in rest]
    else:
        chosen = [int(i) for i in rng.choice(num_participants, size=per_round, replace=False)]
    return sorted(chosen)


def _train_one(config: SimConfig, data: FederatedData, state: GlobalState, pid: int,
               attacking: bool) -> FlatUpdate:
    local_set = data.train.subset(state.partition.assignments.get(pid, []))
    attack = config.adversary_attack(pid) if attacking and pid in config.adversary_ids else BENIGN
    stream = RngStream.root(config.seed).child(rng_tags.LOCAL_TRAIN, state.round, pid)
    return local_train(config.model, state.params, local_set, attack, config.train, stream)


def run_round(state: GlobalState, config: SimConfig, data: FederatedData,
              workers: int = 1, on_round: Optional[RoundHook] = None) -> Tuple[GlobalState, RoundRecord]:
    t = state.round
    if t >= config.rounds:
        raise LabError(f"round {t}: schedule has only {config.rounds} rounds")
    root = RngStream.root(config.seed)
    try:
        selected = select_participants(
            root, config.num_participants, config.per_round, config.adversary_ids,
            config.adversary_always_selected, t, config.attack_start_round,
        )
        attacking = config.is_attacking(t)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {pid: pool.submit(_train_one, config, data, state, pid, attacking) for pid in selected}
                updates = {pid: f.result() for pid, f in futures.items()}
        else:
            updates = {pid: _train_one(config, data, state, pid, attacking) for pid in selected}

        update_set = UpdateSet.from_updates(updates)
        outcome: AggregationOutcome = aggregate(update_set, config.defense, root.child(rng_tags.AGGREGATION, t))
        new_params = FlatParams(
            (state.params.values + outcome.aggregate).astype(state.params.values.dtype), state.params.layout,
        )

        asr = accuracy = None
        if (t + 1) % config.eval_every == 0 or t + 1 == config.rounds:
            asr = attack_success_rate(config.model, new_params, data.test, config.attack.trigger)
            accuracy = test_accuracy(config.model, new_params, data.test)
    except LabError as e:
        raise LabError(f"round {t}: {e}") from e

    present_adversaries = [pid for pid in selected if attacking and pid in config.adversary_ids]
    accepted_adversaries = [pid for pid in outcome.accepted_ids if pid in present_adversaries]
    previous = state.history[-1].adversary_selected_cum if state.history else 0
    record = RoundRecord(
        round=t,
        selected_ids=selected,
        accepted_ids=list(outcome.accepted_ids),
        adversary_ids=present_adversaries,
        norms=update_set.norms().tolist(),
        asr=asr,
        accuracy=accuracy,
        diagnostics={k: v for k, v in outcome.diagnostics.items() if k != "norms"},
        adversary_accepted=len(accepted_adversaries),
        adversary_selected_cum=previous + len(accepted_adversaries),
    )
    new_state = GlobalState(t + 1, new_params, state.partition, state.history + [record])
    logger.info(
        "round %d: selected=%s accepted=%d adversaries_accepted=%d asr=%s accuracy=%s",
        t, selected, len(record.accepted_ids), record.adversary_accepted,
        "-" if asr is None else f"{asr:.4f}", "-" if accuracy is None else f"{accuracy:.4f}",
    )
    if on_round is not None:
        on_round(new_state, record, update_set)
    return new_state, record


def initial_params(config: SimConfig) -> FlatParams:
    if config.init_params:
        logger.info("loading initial parameters from %s", config.init_params)
        return read_fp32(config.init_params, param_layout(config.model))
    return init_params(config.model, RngStream.root(config.seed).child(rng_tags.INIT))


def initial_state(config: SimConfig, data: FederatedData) -> GlobalState:
    if data.train.input_shape != config.model.input_shape:
        raise ConfigError(
            f"dataset inputs {data.train.input_shape} do not match model input {config.model.input_shape}",
            "/model",
        )
    partition = dirichlet_partition(
        data.train, config.num_participants, config.partition_alpha, config.effective_partition_seed,
    )
    return GlobalState(0, initial_params(config), partition)


def run_simulation(config: SimConfig, data: Optional[FederatedData] = None, workers: int = 1,
                   on_round: Optional[RoundHook] = None,
                   on_start: Optional[Callable[[GlobalState], None]] = None) -> List[RoundRecord]:
    """Build the initial state and run every scheduled round; returns the history."""
    if data is None:
        train, test = load_dataset(config.dataset, config.seed)
        data = FederatedData(train, test)
    state = initial_state(config, data)
    if on_start is not None:
        on_start(state)
    logger.info(
        "simulation: %d rounds, %d of %d participants per round, defense=%s, attack=%s from round %d",
        config.rounds, config.per_round, config.num_participants, config.defense.rule,
        config.attack.method, config.attack_start_round,
    )
    for _ in range(config.rounds):
        state, _ = run_round(state, config, data, workers, on_round)
    return state.history
