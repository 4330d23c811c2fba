"""Logit-space numerical kernel.

Every function accepts a single vector of shape ``(c,)`` or a batch of shape
``(n, c)`` and works along the last axis. Argmax ties always resolve to the
lowest class index (this is what ``np.argmax`` does).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import erfc

from .errors import DegenerateInputError, InvalidInputError

_SQRT2 = np.sqrt(2.0)


class Clamp(str, enum.Enum):
    LINEAR = "linear"
    RELU = "relu"
    GELU = "gelu"

    @classmethod
    def parse(cls, value: "Clamp | str") -> "Clamp":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidInputError(f"unknown clamp {value!r}") from None


@dataclass(frozen=True)
class TransformParams:
    """Parameters of the clamp / power transform applied after layer norm.

    ``s`` scales, ``p`` is the sign-preserving exponent and ``c`` shifts the
    normalized logits before clamping. ``ln_top_k`` restricts the layer-norm
    statistics to the k largest logits.
    """

    clamp: Clamp = Clamp.LINEAR
    s: float = 1.0
    p: float = 1.0
    c: float = 0.0
    ln_top_k: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "clamp", Clamp.parse(self.clamp))
        if not (np.isfinite(self.s) and self.s > 0):
            raise InvalidInputError(f"scale s must be positive, got {self.s}")
        if not (np.isfinite(self.p) and self.p > 0):
            raise InvalidInputError(f"exponent p must be positive, got {self.p}")
        if not np.isfinite(self.c):
            raise InvalidInputError(f"bias c must be finite, got {self.c}")
        if self.ln_top_k is not None and int(self.ln_top_k) < 1:
            raise InvalidInputError("ln_top_k must be a positive integer")

    @property
    def is_identity(self) -> bool:
        return self.clamp is Clamp.LINEAR and self.s == 1.0 and self.p == 1.0 and self.c == 0.0

    def to_dict(self) -> dict:
        return {"clamp": self.clamp.value, "s": self.s, "p": self.p, "c": self.c,
                "ln_top_k": self.ln_top_k}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformParams":
        return cls(Clamp.parse(d.get("clamp", "linear")), float(d.get("s", 1.0)),
                   float(d.get("p", 1.0)), float(d.get("c", 0.0)), d.get("ln_top_k"))


IDENTITY = TransformParams()


class Margin(NamedTuple):
    value: np.ndarray | float
    predicted_class: np.ndarray | int


def _as_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim not in (1, 2):
        raise InvalidInputError(f"expected a vector or a batch of vectors, got shape {z.shape}")
    if z.shape[-1] < 2:
        raise InvalidInputError("need at least two classes")
    return z


def _check_logit_vector(z: np.ndarray) -> np.ndarray:
    """Validate the LogitVector invariant; return a boolean mask of +inf entries."""
    if np.isnan(z).any():
        raise InvalidInputError("logits contain NaN")
    if np.isneginf(z).any():
        raise InvalidInputError("logits contain -inf")
    pos_inf = np.isposinf(z)
    if (pos_inf.sum(axis=-1) > 1).any():
        raise InvalidInputError("at most one logit may be +inf")
    return pos_inf


def softmax(z) -> np.ndarray:
    z = _as_logits(z)
    pos_inf = _check_logit_vector(z)
    if not pos_inf.any():
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    rows = pos_inf.any(axis=-1)
    if z.ndim == 1:
        return pos_inf.astype(np.float64)
    out = np.empty_like(z)
    out[rows] = pos_inf[rows]
    finite = z[~rows]
    if finite.size:
        e = np.exp(finite - finite.max(axis=-1, keepdims=True))
        out[~rows] = e / e.sum(axis=-1, keepdims=True)
    return out


def temperature_scale(z, T: float) -> np.ndarray:
    """Divide logits by ``T``; ``T == 0`` marks the argmax with ``+inf``."""
    z = _as_logits(z)
    if not T >= 0:
        raise InvalidInputError(f"temperature must be non-negative, got {T}")
    if T > 0:
        return z / T
    _check_logit_vector(z)
    out = z.copy()
    idx = np.argmax(z, axis=-1)
    if z.ndim == 1:
        out[idx] = np.inf
    else:
        out[np.arange(z.shape[0]), idx] = np.inf
    return out


def _ln_stats(z: np.ndarray, ln_top_k: int | None):
    if ln_top_k is None or ln_top_k >= z.shape[-1]:
        window = z
    else:
        window = -np.sort(-z, axis=-1)[..., : int(ln_top_k)]
    mu = window.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((window - mu) ** 2).mean(axis=-1, keepdims=True))
    return mu, sigma


def layer_norm(z, ln_top_k: int | None = None) -> np.ndarray:
    """Standardize logits to zero mean and unit population variance.

    With ``ln_top_k`` the mean and deviation come from the k largest entries
    only, but every entry is normalized with them.
    """
    z = _as_logits(z)
    if not np.isfinite(z).all():
        raise InvalidInputError("layer_norm needs finite logits")
    if ln_top_k is not None and int(ln_top_k) > z.shape[-1]:
        raise InvalidInputError(f"ln_top_k={ln_top_k} exceeds class count {z.shape[-1]}")
    mu, sigma = _ln_stats(z, ln_top_k)
    if (sigma == 0).any():
        raise DegenerateInputError("zero-variance logits cannot be layer-normalized")
    return (z - mu) / sigma


def gelu(v):
    v = np.asarray(v, dtype=np.float64)
    return v * (0.5 * erfc(-v / _SQRT2))


def clamp(v, kind: Clamp | str):
    kind = Clamp.parse(kind)
    if kind is Clamp.LINEAR:
        return v
    if kind is Clamp.RELU:
        return np.maximum(v, 0.0)
    return gelu(v)


def nonlinear_transform(z, params: TransformParams) -> np.ndarray:
    """``s * |h|^p * sign(h)`` with ``h = clamp(layer_norm(z) + c)``."""
    u = layer_norm(z, params.ln_top_k)
    return signed_power(shift_clamp(u, params.c, params.clamp), params.s, params.p)


def shift_clamp(u, c: float, kind: Clamp | str):
    return clamp(u + c if c != 0.0 else u, kind)


def signed_power(h, s: float, p: float):
    # copysign keeps sgn(0) = 0 since |0|^p = 0 for p > 0
    return np.copysign(s * np.abs(h) ** p, h)


def predict(z) -> np.ndarray | int:
    return np.argmax(np.asarray(z), axis=-1)


def margin(pr) -> Margin:
    """Top probability minus runner-up probability, with the argmax class."""
    pr = np.asarray(pr, dtype=np.float64)
    k = np.argmax(pr, axis=-1)
    top = np.take_along_axis(pr, np.expand_dims(k, -1), axis=-1)[..., 0]
    rest = pr.copy()
    np.put_along_axis(rest, np.expand_dims(k, -1), -np.inf, axis=-1)
    value = top - rest.max(axis=-1)
    if pr.ndim == 1:
        return Margin(float(value), int(k))
    return Margin(value, k)


def margin_vs_label(pr, y) -> np.ndarray | float:
    """Signed margin ``pr[y] - max_{i != y} pr[i]``; positive iff correct."""
    pr = np.asarray(pr, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if (y < 0).any() or (y >= pr.shape[-1]).any():
        raise InvalidInputError("label out of range")
    yy = np.expand_dims(y, -1)
    own = np.take_along_axis(pr, yy, axis=-1)[..., 0]
    rest = pr.copy()
    np.put_along_axis(rest, yy, -np.inf, axis=-1)
    value = own - rest.max(axis=-1)
    return float(value) if pr.ndim == 1 else value
