"""
Artifact persistence: parameter files, CSV tables, PGM images, update archives.
"""

import json
import logging
import os
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from simulation.aggregation import UpdateSet
from simulation.errors import ArtifactMissingError, LabError, ShapeError
from simulation.nn import PARAM_DTYPE, FlatParams, Segment

logger = logging.getLogger(__name__)


def _require(path: str) -> None:
    if not os.path.exists(path):
        raise ArtifactMissingError(path)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def layout_to_json(layout: Sequence[Segment]) -> List[Dict]:
    return [{"layer_index": s.layer_index, "role": s.role, "shape": list(s.shape)} for s in layout]


def layout_from_json(raw: List[Dict]) -> Tuple[Segment, ...]:
    segments = []
    offset = 0
    for entry in raw:
        seg = Segment(int(entry["layer_index"]), str(entry["role"]), tuple(int(d) for d in entry["shape"]), offset)
        segments.append(seg)
        offset += seg.size
    return tuple(segments)


def write_fp32(path: str, params: FlatParams) -> None:
    """JSON header line with the segment layout, then little-endian float32 values."""
    _ensure_parent(path)
    header = json.dumps({"layout": layout_to_json(params.layout)}, sort_keys=True)
    with open(path, "wb") as f:
        f.write(header.encode("utf-8") + b"\n")
        f.write(np.asarray(params.values, dtype="<f4").tobytes())


def read_fp32(path: str, expected_layout: Optional[Sequence[Segment]] = None) -> FlatParams:
    _require(path)
    with open(path, "rb") as f:
        raw = f.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise LabError(f"{path}: missing .fp32 header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
        layout = layout_from_json(header["layout"])
    except (ValueError, KeyError, TypeError) as e:
        raise LabError(f"{path}: unreadable .fp32 header ({e})") from e
    body = raw[newline + 1:]
    expected = 4 * sum(seg.size for seg in layout)
    if len(body) != expected:
        raise ShapeError(f"{path}: layout needs {expected} bytes of values, found {len(body)}")
    if expected_layout is not None and tuple(
        (s.layer_index, s.role, s.shape) for s in expected_layout
    ) != tuple((s.layer_index, s.role, s.shape) for s in layout):
        raise ShapeError(f"{path}: parameter layout does not match the configured model")
    values = np.frombuffer(body, dtype="<f4").astype(PARAM_DTYPE)
    return FlatParams(values, layout)


def write_csv(frame: pd.DataFrame, path: str) -> str:
    """UTF-8, '.' decimal, '\\n' line endings, header row, no index."""
    _ensure_parent(path)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    logger.info("wrote %d rows to %s", len(frame), path)
    return path


def read_csv(path: str) -> pd.DataFrame:
    _require(path)
    return pd.read_csv(path)


def write_distance_csv(distances: np.ndarray, participant_ids: Sequence[int], path: str) -> str:
    """Row-major matrix under a header row of participant ids."""
    frame = pd.DataFrame(np.asarray(distances, dtype=np.float64), columns=[str(int(i)) for i in participant_ids])
    return write_csv(frame, path)


def write_pgm(path: str, grid: np.ndarray) -> str:
    """8-bit binary PGM, scaled so the grid maximum maps to 255."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D grid, got shape {g.shape}")
    peak = g.max() if g.size else 0.0
    scaled = np.zeros_like(g) if peak <= 0 else np.clip(g, 0.0, None) / peak * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    _ensure_parent(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    return path


def update_archive_path(run_dir: str, round_index: int) -> str:
    return os.path.join(run_dir, "updates", f"round_{round_index}.npz")


def save_update_archive(run_dir: str, round_index: int, update_set: UpdateSet,
                        adversary_ids: Iterable[int]) -> str:
    path = update_archive_path(run_dir, round_index)
    _ensure_parent(path)
    np.savez(
        path,
        ids=np.asarray(update_set.participant_ids, dtype=np.int64),
        updates=update_set.updates,
        adversary_ids=np.asarray(sorted(adversary_ids), dtype=np.int64),
    )
    return path


def load_update_archive(path: str) -> Tuple[UpdateSet, List[int]]:
    _require(path)
    with np.load(path) as archive:
        update_set = UpdateSet(archive["updates"], tuple(int(i) for i in archive["ids"]))
        adversaries = [int(i) for i in archive["adversary_ids"]]
    return update_set, adversaries


def list_update_archives(run_dir: str) -> List[Tuple[int, str]]:
    """(round, path) pairs in round order."""
    folder = os.path.join(run_dir, "updates")
    if not os.path.isdir(folder):
        raise ArtifactMissingError(folder)
    found = []
    for name in os.listdir(folder):
        if name.startswith("round_") and name.endswith(".npz"):
            found.append((int(name[len("round_"):-len(".npz")]), os.path.join(folder, name)))
    if not found:
        raise ArtifactMissingError(os.path.join(folder, "round_<t>.npz"))
    return sorted(found)


def append_jsonl(path: str, record: Dict) -> None:
    _ensure_parent(path)
    with open(path, "a", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: str) -> List[Dict]:
    _require(path)
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_json(path: str, payload: Dict) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path
