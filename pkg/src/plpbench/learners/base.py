"""Shared model container, errors and persistence."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..features import DesignMatrix, TransportError

FAMILIES = ("logistic", "gbt", "resnet", "transformer")

WEIGHTS_MAGIC = b"PLPW"


class LearnerError(RuntimeError):
    pass


class DegenerateLabelsError(LearnerError):
    pass


class ConvergenceError(LearnerError):
    def __init__(self, message: str, gap: float):
        self.gap = gap
        super().__init__(f"{message} (final gap {gap:.3g})")


class TrainingError(LearnerError):
    pass


@dataclass
class TrainedModel:
    family: str
    parameters: dict  # name -> ndarray
    hyperparameters: dict
    dictionary_hash: str
    n_cols: int
    provenance: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)  # non-trainable arrays (norm statistics, token priority)
    search_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise LearnerError(f"unknown model family {self.family!r}")


def require_both_classes(labels) -> None:
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == len(labels):
        raise DegenerateLabelsError("training labels contain a single class")


def check_transport(model: TrainedModel, matrix: DesignMatrix) -> None:
    if matrix.dictionary_hash != model.dictionary_hash or matrix.n_cols != model.n_cols:
        raise TransportError(
            f"matrix built with dictionary {matrix.dictionary_hash[:12]} ({matrix.n_cols} cols) "
            f"but model expects {model.dictionary_hash[:12]} ({model.n_cols} cols)"
        )


def stratified_holdout(labels, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split row indices so that ``fraction`` of each class is held out (rounded down)."""
    labels = np.asarray(labels)
    fit_parts, hold_parts = [], []
    for cls in (0, 1):
        rows = np.flatnonzero(labels == cls)
        rows = rows[rng.permutation(len(rows))]
        n_hold = int(np.floor(fraction * len(rows)))
        hold_parts.append(rows[:n_hold])
        fit_parts.append(rows[n_hold:])
    return np.sort(np.concatenate(fit_parts)), np.sort(np.concatenate(hold_parts))


def stratified_folds(labels, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per row, classes dealt round-robin after a shuffle."""
    labels = np.asarray(labels)
    fold = np.empty(len(labels), dtype=np.int64)
    for cls in (0, 1):
        rows = np.flatnonzero(labels == cls)
        rows = rows[rng.permutation(len(rows))]
        fold[rows] = np.arange(len(rows)) % k
    return fold


# ---------------------------------------------------------------------------
# persistence

_DTYPES = {"f4": np.float32, "f8": np.float64, "i4": np.int32, "i8": np.int64, "u1": np.uint8}


def write_weights(path, arrays: dict) -> None:
    """Tensor file, little-endian:

    magic "PLPW" | u32 count | per tensor: u16 name_len, name (utf-8),
    2-byte dtype code (f4/f8/i4/i8/u1), u8 ndim, u64[ndim] shape, raw data.
    Tensors are written in sorted name order.
    """
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            a = np.asarray(arrays[name])
            code = next(c for c, t in _DTYPES.items() if a.dtype == t)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(code.encode("ascii"))
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype=np.dtype(code).newbyteorder("<")).tobytes())


def read_weights(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise LearnerError(f"{path}: not a weights file")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        code = buf[off : off + 2].decode("ascii")
        off += 2
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        dt = np.dtype(code).newbyteorder("<")
        count_el = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype=dt, count=count_el, offset=off).reshape(shape)
        off += arr.nbytes
        out[name] = arr.astype(_DTYPES[code])
    return out


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def save_model(model: TrainedModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "family": model.family,
        "hyperparameters": _jsonable(model.hyperparameters),
        "dictionary_hash": model.dictionary_hash,
        "n_cols": model.n_cols,
        "provenance": _jsonable({k: v for k, v in model.provenance.items() if k != "wall_time_s"}),
        "search_trace": _jsonable(model.search_trace),
    }
    (directory / "model.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    if model.family == "gbt":
        trees = {k: np.asarray(v).tolist() for k, v in sorted(model.parameters.items())}
        (directory / "trees.json").write_text(json.dumps(trees, separators=(",", ":")) + "\n")
    else:
        arrays = dict(model.parameters)
        arrays.update({f"state/{k}": v for k, v in model.state.items()})
        write_weights(directory / "weights.bin", arrays)
    return directory


def load_model(directory) -> TrainedModel:
    directory = Path(directory)
    doc = json.loads((directory / "model.json").read_text())
    params, state = {}, {}
    if doc["family"] == "gbt":
        raw = json.loads((directory / "trees.json").read_text())
        kinds = {"feature": np.int32, "left": np.int32, "right": np.int32, "tree_offsets": np.int64}
        params = {k: np.asarray(v, dtype=kinds.get(k, np.float64)) for k, v in raw.items()}
    else:
        for k, v in read_weights(directory / "weights.bin").items():
            if k.startswith("state/"):
                state[k[len("state/"):]] = v
            else:
                params[k] = v
    return TrainedModel(
        family=doc["family"],
        parameters=params,
        hyperparameters=doc["hyperparameters"],
        dictionary_hash=doc["dictionary_hash"],
        n_cols=int(doc["n_cols"]),
        provenance=doc.get("provenance", {}),
        state=state,
        search_trace=doc.get("search_trace", []),
    )
