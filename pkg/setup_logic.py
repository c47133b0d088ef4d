"""
Setup Logic for the federated backdoor lab
This module holds the experiment configuration: the published defaults,
JSON loading, dot-path overrides, validation and run-directory status checks.
"""

import copy
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from simulation.aggregation import DefenseConfig, FlameParams, MultiKrumParams, NormClipParams
from simulation.attacks import AttackConfig, LocalTrainConfig
from simulation.data import DatasetConfig, TriggerSpec, default_trigger
from simulation.errors import ArtifactMissingError, ConfigError, LabError
from simulation.federation import SimConfig
from simulation.nn import ModelSpec, default_cnn, layer_from_dict, layer_to_dict

logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()

# Every accepted key with its default. None marks a field whose default is
# computed (see NULLABLE for the type it accepts).
DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "dataset": {
        "kind": "blobs",
        "num_classes": 10,
        "input_shape": [1, 28, 28],
        "per_class": 200,
        "test_per_class": 50,
        "sigma": 0.3,
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
    },
    "model": {"layers": None},
    "num_participants": 100,
    "per_round": 12,
    "rounds": 50,
    "attack_start_round": 10,
    "adversary_ids": [0],
    "adversary_always_selected": True,
    "eval_every": 1,
    "train": {"epochs": 2, "batch_size": 64, "learning_rate": 0.01},
    "attack": {
        "method": "naive",
        "alpha": 0.5,
        "gamma": 2.0,
        "beta": 0.5,
        "temperature": 1.0,
        "poison_fraction": 0.3,
        "dba_parts": 0,
        "trigger": None,
    },
    "defense": {
        "rule": "fedavg",
        "server_lr": 1.0,
        "multi_krum": {"f": 4, "m": 8, "squared": True},
        "norm_clip_dp": {"clip_norm": 1.0, "sigma": 0.0},
        "flame": {"noise_lambda": 0.001, "min_cluster_fraction": 0.5, "cluster_size_offset": 1},
    },
    "partition": {"alpha": 0.5, "seed": None},
    "init_params": "",
    "save_updates": False,
    "analysis": {
        "window": 5,
        "top_k": 1000,
        "gain_methods": ["naive", "advkd_reg", "advkd_enh"],
        "gain_checkpoint": "final",
        "activation_layer": None,
        "activation_class": None,
        "activation_samples": 64,
    },
    "gradcheck": {
        "batch_size": 4,
        "alpha": 0.5,
        "temperature": 1.0,
        "step": 1e-5,
        "tolerance": 1e-4,
        "num_coords": 256,
    },
}

NULLABLE = {
    "/model/layers": list,
    "/attack/trigger": dict,
    "/partition/seed": int,
    "/analysis/activation_layer": int,
    "/analysis/activation_class": int,
}

# Files a finished run directory holds, keyed by what they are used for.
RUN_ARTIFACTS = {
    "config": "config.json",
    "metrics": "metrics.csv",
    "rounds": "rounds.jsonl",
    "initial_params": os.path.join("checkpoints", "initial.fp32"),
    "final_params": os.path.join("checkpoints", "final.fp32"),
    "updates": "updates",
}


def _type_name(value: Any) -> str:
    return "null" if value is None else type(value).__name__


def _check_type(value: Any, expected: Any, pointer: str) -> Any:
    """Return value coerced to the type of `expected`, or raise ConfigError."""
    if expected is None:
        if value is None:
            return None
        return _check_type(value, NULLABLE[pointer](), pointer)
    if isinstance(expected, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {_type_name(value)}", pointer)
        return value
    if isinstance(expected, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {_type_name(value)}", pointer)
        return value
    if isinstance(expected, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {_type_name(value)}", pointer)
        return float(value)
    if isinstance(expected, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {_type_name(value)}", pointer)
        return value
    if isinstance(expected, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {_type_name(value)}", pointer)
        return list(value)
    if isinstance(expected, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"expected an object, got {_type_name(value)}", pointer)
        return value
    raise ConfigError(f"unsupported default type {_type_name(expected)}", pointer)


def merge_with_defaults(raw: Dict, defaults: Dict = DEFAULT_CONFIG, pointer: str = "") -> Dict:
    """
    Fill defaults into a user config, rejecting unknown keys and wrong types.

    Args:
        raw: parsed JSON object
        defaults: schema level to validate against
        pointer: JSON pointer of this level, used in error messages

    Returns:
        Dict: a new, fully populated config
    """
    if not isinstance(raw, dict):
        raise ConfigError(f"expected an object, got {_type_name(raw)}", pointer or "/")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", f"{pointer}/{unknown[0]}")
    merged = {}
    for key, default in defaults.items():
        here = f"{pointer}/{key}"
        if key not in raw:
            merged[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            merged[key] = merge_with_defaults(_check_type(raw[key], default, here), default, here)
        else:
            merged[key] = _check_type(raw[key], default, here)
    return merged


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_override(raw: Dict, assignment: str) -> Dict:
    """Apply one `dotted.key=value` override in place; the value is JSON or a plain string."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override key {key!r} is malformed")
    node = raw
    for i, part in enumerate(parts[:-1]):
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError("cannot override inside a non-object", "/" + "/".join(parts[:i + 1]))
        node = child
    node[parts[-1]] = _parse_value(text)
    return raw


def load_config_file(path: str) -> Dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ArtifactMissingError(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e


def load_settings(path: Optional[str], overrides: Sequence[str] = ()) -> Dict:
    """Config file (or the bare defaults when path is None) with overrides applied and defaults filled."""
    raw = load_config_file(path) if path else {}
    for assignment in overrides:
        apply_override(raw, assignment)
    return merge_with_defaults(raw)


def _build_trigger(raw: Optional[Dict]) -> TriggerSpec:
    if raw is None:
        return default_trigger()
    try:
        return TriggerSpec.from_dict(raw)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid trigger: {e}", "/attack/trigger") from e


def _build_model(settings: Dict) -> ModelSpec:
    dataset = settings["dataset"]
    input_shape = tuple(dataset["input_shape"])
    layers = settings["model"]["layers"]
    try:
        if layers is None:
            return default_cnn(input_shape, dataset["num_classes"])
        return ModelSpec(tuple(layer_from_dict(layer) for layer in layers), input_shape, dataset["num_classes"])
    except LabError as e:
        raise ConfigError(str(e), "/model/layers") from e


def _section(pointer: str, build):
    try:
        return build()
    except ConfigError:
        raise
    except LabError as e:
        raise ConfigError(str(e), pointer) from e


def build_sim_config(settings: Dict) -> SimConfig:
    """Turn a merged settings dict into a validated SimConfig."""
    ds = settings["dataset"]
    dataset = _section("/dataset", lambda: DatasetConfig(
        kind=ds["kind"], num_classes=ds["num_classes"], input_shape=tuple(ds["input_shape"]),
        per_class=ds["per_class"], test_per_class=ds["test_per_class"], sigma=ds["sigma"],
        train_images=ds["train_images"], train_labels=ds["train_labels"],
        test_images=ds["test_images"], test_labels=ds["test_labels"],
    ))
    if dataset.kind not in ("blobs", "idx"):
        raise ConfigError(f"unknown dataset kind {dataset.kind!r}", "/dataset/kind")
    model = _build_model(settings)
    train = _section("/train", lambda: LocalTrainConfig(**settings["train"]))
    a = settings["attack"]
    trigger = _build_trigger(a["trigger"])
    if not 0 <= trigger.target_class < dataset.num_classes:
        raise ConfigError("target class outside the dataset's classes", "/attack/trigger/target_class")
    attack = _section("/attack", lambda: AttackConfig(
        method=a["method"], alpha=a["alpha"], gamma=a["gamma"], beta=a["beta"],
        temperature=a["temperature"], trigger=trigger, poison_fraction=a["poison_fraction"],
    ))
    try:
        trigger.check_fits(model.input_shape)
    except LabError as e:
        raise ConfigError(str(e), "/attack/trigger") from e
    d = settings["defense"]
    defense = _section("/defense", lambda: DefenseConfig(
        rule=d["rule"], server_lr=d["server_lr"],
        multi_krum=MultiKrumParams(**d["multi_krum"]),
        norm_clip_dp=NormClipParams(**d["norm_clip_dp"]),
        flame=FlameParams(**d["flame"]),
    ))
    return SimConfig(
        model=model,
        seed=settings["seed"],
        num_participants=settings["num_participants"],
        per_round=settings["per_round"],
        rounds=settings["rounds"],
        attack_start_round=settings["attack_start_round"],
        adversary_ids=tuple(settings["adversary_ids"]),
        adversary_always_selected=settings["adversary_always_selected"],
        eval_every=settings["eval_every"],
        dataset=dataset,
        train=train,
        attack=attack,
        dba_parts=a["dba_parts"],
        defense=defense,
        partition_alpha=settings["partition"]["alpha"],
        partition_seed=settings["partition"]["seed"],
        init_params=settings["init_params"],
        save_updates=settings["save_updates"],
    )


def parse_config(path: Optional[str], overrides: Sequence[str] = ()) -> SimConfig:
    return build_sim_config(load_settings(path, overrides))


def serialize_config(config: SimConfig, analysis: Optional[Dict] = None,
                     gradcheck: Optional[Dict] = None) -> Dict:
    """The settings dict that parses back to an equal SimConfig."""
    ds = config.dataset
    attack = config.attack
    defense = config.defense
    return {
        "seed": config.seed,
        "dataset": {
            "kind": ds.kind, "num_classes": ds.num_classes, "input_shape": list(ds.input_shape),
            "per_class": ds.per_class, "test_per_class": ds.test_per_class, "sigma": ds.sigma,
            "train_images": ds.train_images, "train_labels": ds.train_labels,
            "test_images": ds.test_images, "test_labels": ds.test_labels,
        },
        "model": {"layers": [layer_to_dict(layer) for layer in config.model.layers]},
        "num_participants": config.num_participants,
        "per_round": config.per_round,
        "rounds": config.rounds,
        "attack_start_round": config.attack_start_round,
        "adversary_ids": list(config.adversary_ids),
        "adversary_always_selected": config.adversary_always_selected,
        "eval_every": config.eval_every,
        "train": {
            "epochs": config.train.epochs,
            "batch_size": config.train.batch_size,
            "learning_rate": config.train.learning_rate,
        },
        "attack": {
            "method": attack.method, "alpha": attack.alpha, "gamma": attack.gamma, "beta": attack.beta,
            "temperature": attack.temperature, "poison_fraction": attack.poison_fraction,
            "dba_parts": config.dba_parts, "trigger": attack.trigger.to_dict(),
        },
        "defense": {
            "rule": defense.rule,
            "server_lr": defense.server_lr,
            "multi_krum": {"f": defense.multi_krum.f, "m": defense.multi_krum.m,
                           "squared": defense.multi_krum.squared},
            "norm_clip_dp": {"clip_norm": defense.norm_clip_dp.clip_norm, "sigma": defense.norm_clip_dp.sigma},
            "flame": {"noise_lambda": defense.flame.noise_lambda,
                      "min_cluster_fraction": defense.flame.min_cluster_fraction,
                      "cluster_size_offset": defense.flame.cluster_size_offset},
        },
        "partition": {"alpha": config.partition_alpha, "seed": config.partition_seed},
        "init_params": config.init_params,
        "save_updates": config.save_updates,
        "analysis": copy.deepcopy(analysis if analysis is not None else DEFAULT_CONFIG["analysis"]),
        "gradcheck": copy.deepcopy(gradcheck if gradcheck is not None else DEFAULT_CONFIG["gradcheck"]),
    }


def worker_threads() -> int:
    """FLLAB_THREADS, default 1."""
    text = os.getenv("FLLAB_THREADS", "1")
    try:
        threads = int(text)
    except ValueError:
        raise ConfigError(f"FLLAB_THREADS must be an integer, got {text!r}")
    if threads < 1:
        raise ConfigError(f"FLLAB_THREADS must be at least 1, got {threads}")
    return threads


def check_run_status(run_dir: str) -> Dict[str, bool]:
    """
    Check which artifacts a run directory holds.

    Returns:
        Dict[str, bool]: presence of each entry of RUN_ARTIFACTS
    """
    return {name: os.path.exists(os.path.join(run_dir, rel)) for name, rel in RUN_ARTIFACTS.items()}


def require_artifacts(run_dir: str, names: List[str]) -> None:
    """Raise ArtifactMissingError naming the first absent artifact."""
    if not os.path.isdir(run_dir):
        raise ArtifactMissingError(run_dir)
    status = check_run_status(run_dir)
    for name in names:
        if not status[name]:
            raise ArtifactMissingError(os.path.join(run_dir, RUN_ARTIFACTS[name]))


def report_error(command: str, error: BaseException) -> int:
    """
    Write one structured error object to standard error.

    Returns:
        int: the exit status to hand back to the shell
    """
    payload = {"error": type(error).__name__, "message": str(error), "command": command}
    for attr in ("pointer", "path", "offset"):
        if getattr(error, attr, None) not in (None, ""):
            payload[attr] = getattr(error, attr)
    logger.error("%s failed: %s", command, error)
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return 2 if isinstance(error, (LabError, FileNotFoundError)) else 1
