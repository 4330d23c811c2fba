"""Binary and JSON file formats.

All binary formats are little-endian.

MXNL (logits or input features)::

    "MXNL" | version u32 | count u64 | classes u32 | flags u32
    count x ( id u64 | label u32 | value f32 x classes )

With ``flags & FLAG_FEATURES`` the per-record vector holds input features
and ``classes`` is their dimension (labels are then unchecked against it).

MXNM (model checkpoint)::

    "MXNM" | version u32 | kind u32 | activation u32 | layers u32
    sizes u32 x (layers + 1) | per layer: W f64 (out x in, row-major) | b f64 x out

MXNA (attack cache)::

    "MXNA" | version u32 | meta_len u32 | meta (UTF-8 JSON) | count u64
    classes u32 | pert_dim u32
    count x ( id u64 | clean margin f64 | best margin f64 | logits f32 x classes )
    optional perturbations f64 x (count x pert_dim)

Non-finite logits in MXNA (the mixture's log of a zero probability) are
stored as the most negative finite float32.

Digests are XXH64 (seed 0) over the canonical serialization, as 16 hex digits.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
import xxhash

from .attack import AttackConfig, AttackRun
from .errors import (
    BadMagicError,
    CacheMismatchError,
    DuplicateIdError,
    FormatError,
    IdMismatchError,
    InvalidInputError,
    TruncatedFileError,
    VersionMismatchError,
)
from .models import Activation, Classifier, Dataset, LinearModel, MlpModel

VERSION = 1
FLAG_FEATURES = 1

_MXNL_HEAD = struct.Struct("<4sIQII")
_MXNA_COUNTS = struct.Struct("<QII")
_READ_CHUNK = 4096
_F32_MIN = np.finfo(np.float32).min


@dataclass(frozen=True)
class LogitDataset:
    ids: np.ndarray
    labels: np.ndarray
    logits: np.ndarray
    flags: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.uint64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[0] != self.ids.shape[0] \
                or self.labels.shape != self.ids.shape:
            raise InvalidInputError("ids, labels and logits must have matching lengths")
        object.__setattr__(self, "logits", logits)

    def __len__(self):
        return len(self.ids)

    @property
    def class_count(self) -> int:
        return self.logits.shape[1]

    def aligned_to(self, ids) -> "LogitDataset":
        """Reorder rows to follow ``ids``; every id must be present exactly once."""
        ids = np.asarray(ids, dtype=np.uint64)
        index = {int(i): k for k, i in enumerate(self.ids)}
        if len(ids) != len(self.ids) or set(index) != {int(i) for i in ids}:
            raise IdMismatchError("example ids do not match")
        rows = np.array([index[int(i)] for i in ids], dtype=np.int64)
        return LogitDataset(self.ids[rows], self.labels[rows], self.logits[rows], self.flags)

    def as_features(self) -> Dataset:
        return Dataset(self.logits, self.labels, self.ids)

    @classmethod
    def from_features(cls, data: Dataset) -> "LogitDataset":
        return cls(data.ids, data.y, data.x, FLAG_FEATURES)


# -- MXNL ------------------------------------------------------------------------


def _record_dtype(width: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("label", "<u4"), ("values", "<f4", (width,))])


def serialize_logit_dataset(ds: LogitDataset) -> bytes:
    n, c = ds.logits.shape
    rec = np.zeros(n, dtype=_record_dtype(c))
    rec["id"], rec["label"], rec["values"] = ds.ids, ds.labels, ds.logits
    return _MXNL_HEAD.pack(b"MXNL", VERSION, n, c, ds.flags) + rec.tobytes()


def write_logit_dataset(ds: LogitDataset, path) -> None:
    Path(path).write_bytes(serialize_logit_dataset(ds))


def _read_exact(f, size: int, what: str) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise TruncatedFileError(f"truncated {what}: expected {size} bytes, got {len(buf)}")
    return buf


def _check_magic(magic: bytes, want: bytes, version: int):
    if magic != want:
        raise BadMagicError(f"bad magic {magic!r}, expected {want!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported format version {version}")


def _parse_logit_dataset(f) -> LogitDataset:
    magic, version, n, c, flags = _MXNL_HEAD.unpack(_read_exact(f, _MXNL_HEAD.size, "header"))
    _check_magic(magic, b"MXNL", version)
    if c < 1:
        raise FormatError("class count must be positive")
    dt = _record_dtype(c)
    chunks, done = [], 0
    while done < n:
        take = min(_READ_CHUNK, n - done)
        chunks.append(np.frombuffer(_read_exact(f, take * dt.itemsize, "records"), dtype=dt))
        done += take
    if f.read(1):
        raise FormatError("trailing bytes after last record")
    rec = np.concatenate(chunks) if chunks else np.zeros(0, dtype=dt)
    if len(np.unique(rec["id"])) != n:
        raise DuplicateIdError("duplicate example ids")
    if not flags & FLAG_FEATURES and (rec["label"] >= c).any():
        raise FormatError("label out of range for class count")
    values = rec["values"].astype(np.float64).reshape(n, c)
    if not np.isfinite(values).all():
        raise FormatError("non-finite values in logit file")
    return LogitDataset(rec["id"].copy(), rec["label"].astype(np.int64), values, flags)


def read_logit_dataset(path) -> LogitDataset:
    with open(path, "rb") as f:
        return _parse_logit_dataset(f)


def parse_logit_dataset(data: bytes) -> LogitDataset:
    return _parse_logit_dataset(io.BytesIO(data))


def write_logit_csv(ds: LogitDataset, path) -> None:
    c = ds.class_count
    lines = ["id,label," + ",".join(f"l{k}" for k in range(c))]
    vals = ds.logits.astype(np.float32)
    for i, y, row in zip(ds.ids, ds.labels, vals):
        lines.append(f"{int(i)},{int(y)}," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


# -- MXNM ------------------------------------------------------------------------

_KINDS = {LinearModel: 0, MlpModel: 1}
_ACTS = {Activation.TANH: 0, Activation.GELU: 1}


def serialize_model(model: Classifier) -> bytes:
    if isinstance(model, LinearModel):
        weights, biases, act = [model.weights], [model.biases], Activation.TANH
    elif isinstance(model, MlpModel):
        weights, biases, act = model.weights, model.biases, model.activation
    else:
        raise InvalidInputError(f"cannot serialize {type(model).__name__}")
    sizes = [weights[0].shape[1]] + [w.shape[0] for w in weights]
    out = [struct.pack("<4sIIII", b"MXNM", VERSION, _KINDS[type(model)], _ACTS[act], len(weights)),
           struct.pack(f"<{len(sizes)}I", *sizes)]
    for w, b in zip(weights, biases):
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def parse_model(data: bytes) -> Classifier:
    f = io.BytesIO(data)
    magic, version, kind, act, layers = struct.unpack("<4sIIII", _read_exact(f, 20, "header"))
    _check_magic(magic, b"MXNM", version)
    if kind not in (0, 1) or act not in (0, 1) or layers < 1 or (kind == 0 and layers != 1):
        raise FormatError("invalid model kind, activation or layer count")
    sizes = struct.unpack(f"<{layers + 1}I", _read_exact(f, 4 * (layers + 1), "layer sizes"))
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(_read_exact(f, 8 * fan_in * fan_out, "weights"), dtype="<f8")
        b = np.frombuffer(_read_exact(f, 8 * fan_out, "biases"), dtype="<f8")
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    if f.read(1):
        raise FormatError("trailing bytes after model")
    if kind == 0:
        return LinearModel(weights[0], biases[0])
    return MlpModel(weights, biases, Activation.TANH if act == 0 else Activation.GELU)


def write_model(model: Classifier, path) -> None:
    Path(path).write_bytes(serialize_model(model))


def read_model(path) -> Classifier:
    return parse_model(Path(path).read_bytes())


# -- MXNA ------------------------------------------------------------------------


def _attack_dtype(c: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("clean", "<f8"), ("best", "<f8"), ("logits", "<f4", (c,))])


def serialize_attack_run(run: AttackRun) -> bytes:
    meta = {"config": run.config.to_dict(), "meta": run.meta}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    n, c = run.best_logits.shape
    logits = np.asarray(run.best_logits, dtype=np.float64)
    if np.isnan(logits).any() or np.isposinf(logits).any():
        raise InvalidInputError("attack logits must not contain NaN or +inf")
    logits = np.where(np.isneginf(logits), _F32_MIN, logits)
    rec = np.zeros(n, dtype=_attack_dtype(c))
    rec["id"], rec["clean"], rec["best"], rec["logits"] = \
        run.ids, run.clean_margin, run.best_margin, logits
    pert = run.perturbation
    pert_dim = 0 if pert is None or pert.size == 0 else pert.shape[1]
    parts = [struct.pack("<4sII", b"MXNA", VERSION, len(blob)), blob,
             _MXNA_COUNTS.pack(n, c, pert_dim), rec.tobytes()]
    if pert_dim:
        parts.append(np.ascontiguousarray(pert, dtype="<f8").tobytes())
    return b"".join(parts)


def parse_attack_run(data: bytes) -> AttackRun:
    f = io.BytesIO(data)
    magic, version, meta_len = struct.unpack("<4sII", _read_exact(f, 12, "header"))
    _check_magic(magic, b"MXNA", version)
    try:
        meta = json.loads(_read_exact(f, meta_len, "metadata").decode())
        cfg = AttackConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad attack metadata: {e}") from None
    n, c, pert_dim = _MXNA_COUNTS.unpack(_read_exact(f, _MXNA_COUNTS.size, "counts"))
    dt = _attack_dtype(c)
    rec = np.frombuffer(_read_exact(f, n * dt.itemsize, "records"), dtype=dt)
    pert = None
    if pert_dim:
        raw = _read_exact(f, 8 * n * pert_dim, "perturbations")
        pert = np.frombuffer(raw, dtype="<f8").reshape(n, pert_dim).astype(np.float64)
    if f.read(1):
        raise FormatError("trailing bytes after attack records")
    if len(np.unique(rec["id"])) != n:
        raise DuplicateIdError("duplicate example ids")
    return AttackRun(
        ids=rec["id"].copy(),
        clean_margin=rec["clean"].astype(np.float64),
        best_margin=rec["best"].astype(np.float64),
        best_logits=rec["logits"].astype(np.float64).reshape(n, c),
        config=cfg,
        perturbation=pert,
        meta=meta.get("meta", {}),
    )


def write_attack_run(run: AttackRun, path) -> None:
    Path(path).write_bytes(serialize_attack_run(run))


def read_attack_run(path) -> AttackRun:
    return parse_attack_run(Path(path).read_bytes())


def check_cache(run: AttackRun, model_hash: str | None = None, dataset_hash: str | None = None,
                override: bool = False) -> None:
    """Refuse an attack cache whose recorded input digests differ from the current ones."""
    for key, want in (("model_hash", model_hash), ("dataset_hash", dataset_hash)):
        have = run.meta.get(key)
        if want is not None and have is not None and have != want and not override:
            raise CacheMismatchError(
                f"attack cache {key} {have} does not match current input {want}")


# -- hashing ---------------------------------------------------------------------


def content_hash(obj) -> str:
    """XXH64 hex digest of a dataset, model, raw bytes or a file path."""
    if isinstance(obj, LogitDataset):
        data = serialize_logit_dataset(obj)
    elif isinstance(obj, Classifier):
        data = serialize_model(obj)
    elif isinstance(obj, AttackRun):
        data = serialize_attack_run(obj)
    elif isinstance(obj, (bytes, bytearray, memoryview)):
        data = bytes(obj)
    elif isinstance(obj, (str, os.PathLike)):
        h = xxhash.xxh64()
        with open(obj, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                h.update(block)
        return h.hexdigest()
    else:
        raise InvalidInputError(f"cannot hash {type(obj).__name__}")
    return xxhash.xxh64(data).hexdigest()


# -- JSON ------------------------------------------------------------------------

_ATTACK_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["norm", "epsilon", "steps"],
    "properties": {
        "norm": {"enum": ["Linf", "L2"]},
        "epsilon": {"type": "number", "minimum": 0},
        "steps": {"type": "integer", "minimum": 1},
        "restarts": {"type": "integer", "minimum": 1},
        "step_size": {"oneOf": [{"const": "auto"}, {"type": "number", "exclusiveMinimum": 0}]},
        "seed": {"type": "integer", "minimum": 0},
        "targets": {"type": "integer", "minimum": 0},
    },
}

GRID_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"type": "string"},
        "clamp": {"enum": ["linear", "relu", "gelu"]},
        "s": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "p": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "c": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "ln_top_k": {"type": ["integer", "null"], "minimum": 1},
    },
    "oneOf": [{"required": ["preset"]}, {"required": ["s", "p", "c"]}],
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "robust_model", "accurate_model", "transform_grid", "attack",
                 "beta", "output_dir"],
    "properties": {
        "dataset": {"type": "string"},
        "robust_model": {"type": "string"},
        "accurate_model": {"type": "string"},
        "transform_grid": GRID_SCHEMA,
        "attack": _ATTACK_SCHEMA,
        "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "variant": {"enum": ["independent", "conditional"]},
        "output_dir": {"type": "string"},
    },
}

_NUM = {"type": "number"}
RESULT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["s_star", "p_star", "c_star", "alpha_star", "q_star", "objective", "beta",
                 "clamp"],
    "properties": {
        "s_star": {"type": "number", "exclusiveMinimum": 0},
        "p_star": {"type": "number", "exclusiveMinimum": 0},
        "c_star": _NUM,
        "alpha_star": {"type": "number", "minimum": 0.5, "maximum": 1},
        "q_star": {"type": "number", "minimum": 0, "maximum": 1},
        "objective": {"type": "number", "minimum": 0, "maximum": 1},
        "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "clamp": {"enum": ["linear", "relu", "gelu"]},
        "ln_top_k": {"type": ["integer", "null"], "minimum": 1},
        "variant": {"enum": ["independent", "conditional"]},
        "indices": {"type": ["array", "null"], "items": {"type": "integer"}},
        "grid_axes": {"type": ["object", "null"]},
        "objective_grid": {"type": ["array", "null"]},
    },
}


def validate_json(doc, schema, what: str):
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as e:
        raise InvalidInputError(f"invalid {what}: {e.message}") from None
    return doc


def load_json(path, schema=None, what: str = "JSON document"):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"{path}: {e}") from None
    return validate_json(doc, schema, what) if schema else doc


def dump_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def read_run_config(path) -> dict:
    return load_json(path, RUN_CONFIG_SCHEMA, "run config")
