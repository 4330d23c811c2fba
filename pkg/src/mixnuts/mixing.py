"""Probability-space mixing of an accurate and a robust classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidInputError
from .logits import IDENTITY, TransformParams, nonlinear_transform, softmax, temperature_scale


@dataclass(frozen=True)
class MixConfig:
    """Mixing weights.

    ``alpha`` weighs the (transformed) robust side, ``accurate_temperature`` is
    applied to the accurate side before its softmax. ``alpha_d`` and ``r_d``
    configure the differentiable surrogate used by the adaptive attack;
    ``alpha_d`` falls back to ``alpha`` when unset.
    """

    alpha: float
    accurate_temperature: float = 0.0
    alpha_d: float | None = None
    r_d: float = 0.9

    def __post_init__(self):
        if not 0.5 <= self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must lie in [1/2, 1], got {self.alpha}")
        if not self.accurate_temperature >= 0:
            raise InvalidInputError("accurate_temperature must be non-negative")
        if self.alpha_d is not None and not 0.5 <= self.alpha_d <= 1.0:
            raise InvalidInputError(f"alpha_d must lie in [1/2, 1], got {self.alpha_d}")
        if not 0.0 <= self.r_d <= 1.0:
            raise InvalidInputError(f"r_d must lie in [0, 1], got {self.r_d}")

    @property
    def surrogate_alpha(self) -> float:
        return self.alpha if self.alpha_d is None else self.alpha_d


@dataclass(frozen=True)
class MixedOutput:
    log_probs: np.ndarray
    probs: np.ndarray
    predicted_class: np.ndarray | int


def _pair(g_logits, h_logits):
    g = np.asarray(g_logits, dtype=np.float64)
    h = np.asarray(h_logits, dtype=np.float64)
    if g.shape != h.shape:
        raise DimensionMismatchError(f"logit shapes differ: {g.shape} vs {h.shape}")
    return g, h


def _output(probs: np.ndarray) -> MixedOutput:
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs)
    pred = np.argmax(probs, axis=-1)
    return MixedOutput(log_probs, probs, int(pred) if probs.ndim == 1 else pred)


def _robust_probs(h, params: TransformParams | None):
    return softmax(h if params is None else nonlinear_transform(h, params))


def mix(g_logits, h_logits, cfg: MixConfig,
        params: TransformParams | None = IDENTITY) -> MixedOutput:
    """Mix ``softmax(g / T)`` with the transformed robust probabilities.

    ``params=None`` mixes the raw robust logits with no layer norm at all.
    """
    g, h = _pair(g_logits, h_logits)
    a = cfg.alpha
    pg = softmax(temperature_scale(g, cfg.accurate_temperature))
    ph = _robust_probs(h, params)
    return _output((1.0 - a) * pg + a * ph)


def threshold_predict(g_pred, hM_probs, alpha: float):
    """Prediction of the T=0 mixture written as a threshold rule.

    The accurate side contributes ``1 - alpha`` to its predicted class only,
    so the winner is either ``g_pred`` or the robust side's best other class.
    The robust side wins when its probability lead over ``g_pred`` is at least
    ``(1 - alpha) / alpha``. Exact ties go to the lower class index.
    """
    p = np.asarray(hM_probs, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    g = np.broadcast_to(np.asarray(g_pred, dtype=np.int64), p.shape[:1])
    if (g < 0).any() or (g >= p.shape[1]).any():
        raise InvalidInputError("g_pred out of range")
    rows = np.arange(p.shape[0])
    weighted = alpha * p
    g_score = (1.0 - alpha) + weighted[rows, g]
    others = weighted.copy()
    others[rows, g] = -np.inf
    j = np.argmax(others, axis=1)
    j_score = others[rows, j]
    pick_g = (g_score > j_score) | ((g_score == j_score) & (g < j))
    out = np.where(pick_g, g, j)
    return int(out[0]) if single else out


def aux_differentiable_mix(g_logits, h_logits, cfg: MixConfig,
                           params: TransformParams | None = IDENTITY,
                           printed_formula: bool = False) -> MixedOutput:
    """Smooth surrogate of the T=0 mixture used to produce attack gradients.

    The accurate side enters at temperature one. A fraction ``r_d`` of the
    robust weight bypasses the transform and uses ``softmax(h)`` directly.
    ``printed_formula=True`` puts ``softmax(g)`` on the bypass term instead,
    for comparison against that variant of the construction.
    """
    g, h = _pair(g_logits, h_logits)
    a, r = cfg.surrogate_alpha, cfg.r_d
    pg = softmax(g)
    bypass = pg if printed_formula else softmax(h)
    ph = _robust_probs(h, params)
    return _output((1.0 - a) * pg + a * r * bypass + a * (1.0 - r) * ph)
