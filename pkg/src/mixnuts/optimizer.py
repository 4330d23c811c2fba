"""Grid search for the robust-side transform and the mixing weight.

For each grid cell ``(s_i, p_j, c_k)`` the margins of the attacked-but-correct
examples fix the largest threshold ``q`` that keeps a ``beta`` fraction of
them above it; the cell's objective is the fraction of clean mispredictions
whose margin still reaches ``q``. The best cell gives ``alpha = 1 / (1 + q)``.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .attack import AttackConfig, AttackRun, minimum_margin_attack
from .errors import ContractError, IdMismatchError, InvalidInputError
from .logits import (
    Clamp,
    TransformParams,
    layer_norm,
    margin,
    nonlinear_transform,
    shift_clamp,
    signed_power,
    softmax,
)
from .models import Classifier, Dataset

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


class Variant(str, enum.Enum):
    INDEPENDENT = "independent"
    CONDITIONAL = "conditional"


@dataclass(frozen=True)
class MarginSets:
    """Raw logits of clean mispredictions and of still-correct attacked examples.

    ``g_correct`` (optional) flags, per clean misprediction, whether the
    accurate model got that example right.
    """

    incorrect_clean: np.ndarray
    incorrect_labels: np.ndarray
    correct_attacked: np.ndarray
    attacked_labels: np.ndarray
    g_correct: np.ndarray | None = None
    incorrect_ids: np.ndarray | None = None
    attacked_ids: np.ndarray | None = None


def build_margin_sets(clean, run: AttackRun, ln_top_k: int | None = None,
                      g_correct=None) -> MarginSets:
    """Split examples by the correctness of the layer-normed robust model.

    ``clean`` is a ``LogitDataset`` of the robust model's clean logits; ``run``
    must come from attacking the layer-normed model on the same ids.
    ``g_correct`` is an optional boolean array aligned with ``clean``.
    """
    if len(clean) == 0:
        raise InvalidInputError("empty logit dataset")
    if run.meta.get("kind") == "adaptive-mixed":
        raise ContractError("margin sets need a minimum-margin run against the robust model")
    order = {int(i): k for k, i in enumerate(run.ids)}
    if len(order) != len(clean) or set(order) != {int(i) for i in clean.ids}:
        raise IdMismatchError("attack cache and clean logits cover different example ids")
    rows = np.array([order[int(i)] for i in clean.ids], dtype=np.int64)
    attacked = run.best_logits[rows]
    y = clean.labels
    clean_ok = np.argmax(layer_norm(clean.logits, ln_top_k), axis=1) == y
    attacked_ok = np.argmax(layer_norm(attacked, ln_top_k), axis=1) == y
    gc = None
    if g_correct is not None:
        gc = np.asarray(g_correct, dtype=bool)
        if gc.shape != y.shape:
            raise IdMismatchError("g_correct must align with the clean logits")
        gc = gc[~clean_ok]
    return MarginSets(
        incorrect_clean=clean.logits[~clean_ok],
        incorrect_labels=y[~clean_ok],
        correct_attacked=attacked[attacked_ok],
        attacked_labels=y[attacked_ok],
        g_correct=gc,
        incorrect_ids=clean.ids[~clean_ok],
        attacked_ids=clean.ids[attacked_ok],
    )


def quantile_position(n: int, beta: float) -> int:
    """1-based order statistic that is the largest threshold with coverage >= beta."""
    if n < 1:
        raise InvalidInputError("bottom_quantile of an empty list")
    if not 0 < beta <= 1:
        raise InvalidInputError(f"beta must lie in (0, 1], got {beta}")
    # exact decimal arithmetic: (1 - 0.985) * 1000 must be 15, not 15.000000000000002
    return math.floor((1 - Fraction(str(beta))) * n) + 1


def bottom_quantile(margins, beta: float) -> float:
    """Smallest margin among the top ``beta`` fraction (no interpolation)."""
    m = np.sort(np.asarray(margins, dtype=np.float64))
    return float(m[quantile_position(len(m), beta) - 1])


@dataclass(frozen=True)
class SearchGrid:
    s: np.ndarray
    p: np.ndarray
    c: np.ndarray
    clamp: Clamp = Clamp.GELU
    beta: float = 0.985
    ln_top_k: int | None = None

    def __post_init__(self):
        for name in ("s", "p", "c"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if arr.size == 0:
                raise InvalidInputError(f"grid axis {name} is empty")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "clamp", Clamp.parse(self.clamp))
        if (self.s <= 0).any() or (self.p <= 0).any():
            raise InvalidInputError("s and p candidates must be positive")
        if not 0 < self.beta <= 1:
            raise InvalidInputError(f"beta must lie in (0, 1], got {self.beta}")

    @property
    def shape(self):
        return len(self.s), len(self.p), len(self.c)

    def axes(self) -> dict:
        return {"s": self.s.tolist(), "p": self.p.tolist(), "c": self.c.tolist()}

    @classmethod
    def from_ranges(cls, s_range, c_range, p_range, n: int = 8, **kw) -> "SearchGrid":
        """``n`` log-spaced scales and ``n`` linearly spaced biases and exponents."""
        s = np.geomspace(s_range[0], s_range[1], n)
        c = np.linspace(c_range[0], c_range[1], n)
        p = np.linspace(p_range[0], p_range[1], n)
        return cls(s=s, p=p, c=c, **kw)


# (s range, c range, p range); each axis gets 8 candidates
PRESETS = {
    "cifar10": ((0.05, 5.0), (-1.1, 0.0), (1.0, 4.0)),
    "cifar100": ((0.05, 4.0), (-2.5, -0.4), (1.0, 4.0)),
    "imagenet": ((0.01, 0.2), (-2.0, 0.0), (2.0, 3.0)),
    "toy": ((0.1, 8.0), (-1.5, 0.5), (1.0, 4.0)),
}


def preset_grid(name: str, beta: float, clamp: Clamp | str = Clamp.GELU,
                ln_top_k: int | None = None) -> SearchGrid:
    try:
        s_r, c_r, p_r = PRESETS[name]
    except KeyError:
        raise InvalidInputError(f"unknown grid preset {name!r}; have {sorted(PRESETS)}") from None
    return SearchGrid.from_ranges(s_r, c_r, p_r, beta=beta, clamp=clamp, ln_top_k=ln_top_k)


@dataclass
class GridSearchResult:
    s_star: float
    p_star: float
    c_star: float
    alpha_star: float
    q_star: float
    objective: float
    beta: float
    clamp: Clamp
    ln_top_k: int | None = None
    variant: Variant = Variant.INDEPENDENT
    indices: tuple[int, int, int] | None = None
    grid_axes: dict | None = None
    objective_grid: np.ndarray | None = None
    q_grid: np.ndarray | None = field(default=None, repr=False)

    @property
    def params(self) -> TransformParams:
        return TransformParams(self.clamp, self.s_star, self.p_star, self.c_star, self.ln_top_k)

    def to_dict(self) -> dict:
        return {
            "s_star": self.s_star, "p_star": self.p_star, "c_star": self.c_star,
            "alpha_star": self.alpha_star, "q_star": self.q_star, "objective": self.objective,
            "beta": self.beta, "clamp": Clamp.parse(self.clamp).value, "ln_top_k": self.ln_top_k,
            "variant": Variant(self.variant).value,
            "indices": None if self.indices is None else list(self.indices),
            "grid_axes": self.grid_axes,
            "objective_grid": None if self.objective_grid is None else self.objective_grid.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSearchResult":
        alpha, q = float(d["alpha_star"]), float(d["q_star"])
        if abs(alpha - 1.0 / (1.0 + q)) > 1e-9:
            raise InvalidInputError("alpha_star is inconsistent with q_star")
        grid = d.get("objective_grid")
        return cls(
            s_star=float(d["s_star"]), p_star=float(d["p_star"]), c_star=float(d["c_star"]),
            alpha_star=alpha, q_star=q, objective=float(d["objective"]), beta=float(d["beta"]),
            clamp=Clamp.parse(d["clamp"]), ln_top_k=d.get("ln_top_k"),
            variant=Variant(d.get("variant", "independent")),
            indices=None if d.get("indices") is None else tuple(d["indices"]),
            grid_axes=d.get("grid_axes"),
            objective_grid=None if grid is None else np.asarray(grid, dtype=np.float64),
        )


def _margins(logits) -> np.ndarray:
    return margin(softmax(logits)).value


def _objective(ic_margins, q, g_correct, variant: Variant) -> float:
    if variant is Variant.CONDITIONAL:
        ic_margins = ic_margins[g_correct]
    if ic_margins.size == 0:
        return 0.0
    # margins that agree with q up to rounding count as reaching it; with two
    # classes every layer-normed margin is the same number plus float noise
    return float(np.count_nonzero(ic_margins >= q - TIE_TOL)) / ic_margins.size


def _check_sets(sets: MarginSets, variant: Variant):
    if len(sets.correct_attacked) == 0:
        raise InvalidInputError("no correctly classified attacked examples: "
                                "the robustness constraint cannot be bound")
    if variant is Variant.CONDITIONAL:
        if sets.g_correct is None:
            raise InvalidInputError("conditional variant needs g_correct flags")


def objective_at(sets: MarginSets, params: TransformParams, beta: float,
                 variant: Variant | str = Variant.INDEPENDENT) -> tuple[float, float]:
    """(objective, binding quantile) of a single transform."""
    variant = Variant(variant)
    _check_sets(sets, variant)
    q = bottom_quantile(_margins(nonlinear_transform(sets.correct_attacked, params)), beta)
    if len(sets.incorrect_clean) == 0:
        return 0.0, q
    ic = _margins(nonlinear_transform(sets.incorrect_clean, params))
    return _objective(ic, q, sets.g_correct, variant), q


def grid_search(sets: MarginSets, grid: SearchGrid,
                variant: Variant | str = Variant.INDEPENDENT) -> GridSearchResult:
    variant = Variant(variant)
    _check_sets(sets, variant)
    shape = grid.shape
    if len(sets.incorrect_clean) == 0:
        warnings.warn("no clean mispredictions: objective is identically 0, "
                      "returning the untransformed point", RuntimeWarning, stacklevel=2)
        base = TransformParams(ln_top_k=grid.ln_top_k)
        q = bottom_quantile(_margins(nonlinear_transform(sets.correct_attacked, base)), grid.beta)
        return GridSearchResult(1.0, 1.0, 0.0, 1.0 / (1.0 + q), q, 0.0, grid.beta, Clamp.LINEAR,
                                grid.ln_top_k, variant, None, grid.axes(), np.zeros(shape),
                                np.full(shape, q))

    ln_att = layer_norm(sets.correct_attacked, grid.ln_top_k)
    ln_ic = layer_norm(sets.incorrect_clean, grid.ln_top_k)
    obj = np.empty(shape)
    qs = np.empty(shape)
    for k, c in enumerate(grid.c):
        h_att = shift_clamp(ln_att, c, grid.clamp)
        h_ic = shift_clamp(ln_ic, c, grid.clamp)
        for j, p in enumerate(grid.p):
            for i, s in enumerate(grid.s):
                q = bottom_quantile(_margins(signed_power(h_att, s, p)), grid.beta)
                qs[i, j, k] = q
                obj[i, j, k] = _objective(_margins(signed_power(h_ic, s, p)), q,
                                          sets.g_correct, variant)
    # C-order argmin = lexicographically smallest (i, j, k) among ties
    i, j, k = np.unravel_index(int(np.argmin(obj)), shape)
    q_star = float(qs[i, j, k])
    result = GridSearchResult(
        s_star=float(grid.s[i]), p_star=float(grid.p[j]), c_star=float(grid.c[k]),
        alpha_star=1.0 / (1.0 + q_star), q_star=q_star, objective=float(obj[i, j, k]),
        beta=grid.beta, clamp=grid.clamp, ln_top_k=grid.ln_top_k, variant=variant,
        indices=(int(i), int(j), int(k)), grid_axes=grid.axes(), objective_grid=obj, q_grid=qs)
    log.info("grid search: s=%.4g p=%.4g c=%.4g alpha=%.6f objective=%.4f",
             result.s_star, result.p_star, result.c_star, result.alpha_star, result.objective)
    return result


@dataclass(frozen=True)
class ActivenessReport:
    status: str  # "binding", "slack" or "infeasible"
    coverage: float
    beta: float
    threshold: float
    q_attained: bool
    next_margin: float | None
    coverage_at_next: float | None

    @property
    def passed(self) -> bool:
        return self.status == "binding" and self.q_attained

    def to_dict(self) -> dict:
        return dict(self.__dict__, passed=self.passed)


def constraint_activeness_check(result: GridSearchResult, sets: MarginSets,
                                grid: SearchGrid | None = None) -> ActivenessReport:
    """Check that the robustness constraint holds and binds at the optimum.

    Binding means coverage at ``(1 - alpha) / alpha`` is at least ``beta``
    while moving the threshold up to the next distinct attained margin would
    drop coverage below ``beta``. ``TIE_TOL`` absorbs the round trip
    ``q -> alpha -> (1 - alpha) / alpha``.
    """
    beta = result.beta if grid is None else grid.beta
    m = _margins(nonlinear_transform(sets.correct_attacked, result.params))
    t = (1.0 - result.alpha_star) / result.alpha_star
    coverage = float(np.mean(m >= t - TIE_TOL))
    above = m[m > t + TIE_TOL]
    nxt = float(above.min()) if above.size else None
    cov_next = None if nxt is None else float(np.mean(m >= nxt))
    if coverage < beta:
        status = "infeasible"
    elif cov_next is not None and cov_next >= beta:
        status = "slack"
    else:
        status = "binding"
    return ActivenessReport(status, coverage, beta, t, bool(np.any(m == result.q_star)),
                            nxt, cov_next)


@dataclass(frozen=True)
class GapReport:
    objective_old: float
    objective_recomputed: float
    q_old: float
    q_recomputed: float
    run: AttackRun = field(repr=False)
    sets: MarginSets = field(repr=False)

    @property
    def gap(self) -> float:
        return self.objective_recomputed - self.objective_old


def approximation_gap_check(h_model: Classifier, params_star: TransformParams,
                            cfg: AttackConfig, sets_old: MarginSets, data: Dataset,
                            beta: float, variant: Variant | str = Variant.INDEPENDENT,
                            g_correct=None) -> GapReport:
    """Re-attack the transformed model itself and re-score the fixed optimum.

    The search used perturbations found against the layer-normed model; this
    measures how much the objective moves when the perturbations come from
    the transformed model instead.
    """
    from .data_io import LogitDataset  # local: data_io imports this module's neighbours

    old, q_old = objective_at(sets_old, params_star, beta, variant)
    run = minimum_margin_attack(h_model, data, cfg, head=params_star)
    clean = LogitDataset(data.ids, data.y, h_model.forward(data.x))
    sets_new = build_margin_sets(clean, run, params_star.ln_top_k, g_correct)
    new, q_new = objective_at(sets_new, params_star, beta, variant)
    return GapReport(old, new, q_old, q_new, run, sets_new)
