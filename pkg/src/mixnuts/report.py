"""Evaluation of a mixed classifier and the statistics behind it.

Two modes: table mode works from stored logits and an attack cache and gives
a certified lower bound on robust accuracy; adaptive mode attacks the mixture
end to end through its differentiable surrogate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, AttackRun, adaptive_mixed_attack, minimum_margin_attack
from .data_io import LogitDataset, content_hash
from .errors import (
    CacheMismatchError,
    IdMismatchError,
    InvalidInputError,
    InvariantError,
)
from .logits import TransformParams, layer_norm, margin, margin_vs_label, nonlinear_transform, softmax
from .mixing import MixConfig, mix, threshold_predict
from .models import Classifier, Dataset
from .optimizer import (
    GridSearchResult,
    MarginSets,
    SearchGrid,
    Variant,
    constraint_activeness_check,
    grid_search,
)

log = logging.getLogger(__name__)

GROUPS = ("clean_correct", "clean_incorrect", "attacked_correct", "attacked_incorrect")
ARMS = ("g", "h", "h_ln", "h_m")
TIE_BAND = 1e-9


def _median(v) -> float | None:
    return float(np.median(v)) if len(v) else None


def arm_probs(logits, arm: str, params: TransformParams) -> np.ndarray:
    """Output probabilities of a base-model arm; ``g`` and ``h`` use plain softmax."""
    if arm in ("g", "h"):
        return softmax(logits)
    if arm == "h_ln":
        return softmax(layer_norm(logits, params.ln_top_k))
    if arm == "h_m":
        return softmax(nonlinear_transform(logits, params))
    raise InvalidInputError(f"unknown arm {arm!r}")


def margin_groups(clean_probs, y, attacked_probs=None) -> dict:
    """Confidence margins split by correctness, clean and (optionally) attacked."""
    out = {}
    m = margin(clean_probs)
    ok = m.predicted_class == y
    out["clean_correct"], out["clean_incorrect"] = m.value[ok], m.value[~ok]
    if attacked_probs is not None:
        m = margin(attacked_probs)
        ok = m.predicted_class == y
        out["attacked_correct"], out["attacked_incorrect"] = m.value[ok], m.value[~ok]
    return out


def margin_gap(groups: dict) -> float | None:
    """Median attacked-correct margin minus median clean-incorrect margin.

    Positive when correct predictions under attack are more confident than
    clean mistakes, which is what lets the mixture threshold separate them.
    """
    a = _median(groups.get("attacked_correct", ()))
    b = _median(groups.get("clean_incorrect", ()))
    return None if a is None or b is None else a - b


def relative_error_delta(err_new: float, err_ref: float) -> float | None:
    return None if err_ref == 0 else (err_new - err_ref) / err_ref


@dataclass
class EvalReport:
    mode: str
    alpha: float
    params: TransformParams
    count: int
    clean_accuracy: float
    threshold_mismatches: int
    arm_clean_accuracy: dict
    arm_attacked_accuracy: dict = field(default_factory=dict)
    guaranteed_lower_bound: float | None = None
    bound_ties: int = 0
    robust_accuracy: float | None = None
    margin_medians: dict = field(default_factory=dict)
    margin_gaps: dict = field(default_factory=dict)
    error_deltas: dict = field(default_factory=dict)
    certified_ids: np.ndarray | None = field(default=None, repr=False)
    tie_ids: np.ndarray | None = field(default=None, repr=False)
    attack_run: AttackRun | None = field(default=None, repr=False)

    def __post_init__(self):
        fracs = [self.clean_accuracy, self.guaranteed_lower_bound, self.robust_accuracy]
        fracs += list(self.arm_clean_accuracy.values()) + list(self.arm_attacked_accuracy.values())
        if any(f is not None and not 0.0 <= f <= 1.0 for f in fracs):
            raise InvariantError("accuracy outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "alpha": self.alpha, "params": self.params.to_dict(),
            "count": self.count, "clean_accuracy": self.clean_accuracy,
            "threshold_mismatches": self.threshold_mismatches,
            "arm_clean_accuracy": self.arm_clean_accuracy,
            "arm_attacked_accuracy": self.arm_attacked_accuracy,
            "guaranteed_lower_bound": self.guaranteed_lower_bound,
            "bound_ties": self.bound_ties, "robust_accuracy": self.robust_accuracy,
            "margin_medians": self.margin_medians, "margin_gaps": self.margin_gaps,
            "error_deltas": self.error_deltas,
        }


def _align(a: LogitDataset, b: LogitDataset) -> LogitDataset:
    b = b.aligned_to(a.ids)
    if not np.array_equal(a.labels, b.labels):
        raise IdMismatchError("the two logit files disagree on labels")
    return b


def _attacked_rows(run: AttackRun, ids) -> np.ndarray:
    index = {int(i): k for k, i in enumerate(run.ids)}
    if len(index) != len(ids) or set(index) != {int(i) for i in ids}:
        raise IdMismatchError("attack cache covers different example ids")
    return run.best_logits[[index[int(i)] for i in ids]]


def _clean_part(g: LogitDataset, h: LogitDataset, alpha: float, params: TransformParams):
    cfg = MixConfig(alpha)
    out = mix(g.logits, h.logits, cfg, params)
    y = g.labels
    tp = threshold_predict(np.argmax(g.logits, axis=1), arm_probs(h.logits, "h_m", params), alpha)
    mismatches = int(np.count_nonzero(tp != out.predicted_class))
    arm_clean = {"g": float(np.mean(np.argmax(g.logits, axis=1) == y))}
    for arm in ("h", "h_ln", "h_m"):
        arm_clean[arm] = float(np.mean(np.argmax(arm_probs(h.logits, arm, params), axis=1) == y))
    return float(np.mean(out.predicted_class == y)), mismatches, arm_clean


def certified(attacked_h_logits, y, alpha: float, params: TransformParams):
    """Flags of examples whose attacked robust prediction alone fixes the mixture.

    Returns ``(counted, ties)``: counted margins reach ``(1 - alpha) / alpha``;
    ties sit within ``TIE_BAND`` of it, where the mixture's own tie-breaking
    decides and the guarantee is void.
    """
    t = (1.0 - alpha) / alpha
    signed = margin_vs_label(arm_probs(attacked_h_logits, "h_m", params), y)
    return signed >= t, np.abs(signed - t) <= TIE_BAND


def evaluate_table(result: GridSearchResult, g_clean: LogitDataset, h_clean: LogitDataset,
                   attack: AttackRun | None = None) -> EvalReport:
    """Clean accuracy by direct mixing; robust lower bound from an attack cache.

    The bound is only a guarantee when the cache holds minimum-margin
    perturbations of the transformed robust model at ``result.params``.
    """
    if len(g_clean) == 0:
        raise InvalidInputError("empty logit dataset")
    h_clean = _align(g_clean, h_clean)
    params, alpha, y = result.params, result.alpha_star, g_clean.labels
    acc, mism, arm_clean = _clean_part(g_clean, h_clean, alpha, params)
    rep = EvalReport("table", alpha, params, len(y), acc, mism, arm_clean)
    medians, gaps = {}, {}
    att = None if attack is None else _attacked_rows(attack, g_clean.ids)
    if att is not None:
        head = attack.meta.get("head")
        if head is None or TransformParams.from_dict(head) != params:
            log.warning("attack cache was not run against the transformed model at these "
                        "parameters; the lower bound is an estimate, not a guarantee")
        counted, ties = certified(att, y, alpha, params)
        rep.guaranteed_lower_bound = float(np.mean(counted))
        rep.bound_ties = int(np.count_nonzero(ties))
        rep.certified_ids, rep.tie_ids = g_clean.ids[counted], g_clean.ids[ties]
        for arm in ("h", "h_ln", "h_m"):
            rep.arm_attacked_accuracy[arm] = float(
                np.mean(np.argmax(arm_probs(att, arm, params), axis=1) == y))
    for arm in ARMS:
        src = g_clean.logits if arm == "g" else h_clean.logits
        groups = margin_groups(arm_probs(src, arm, params), y,
                               None if att is None or arm == "g" else arm_probs(att, arm, params))
        medians[arm] = {k: _median(v) for k, v in groups.items()}
        gaps[arm] = margin_gap(groups)
    rep.margin_medians, rep.margin_gaps = medians, gaps
    rep.error_deltas = {"clean": relative_error_delta(1 - acc, 1 - arm_clean["h"])}
    return rep


def evaluate_adaptive(result: GridSearchResult, g_model: Classifier, h_model: Classifier,
                      data: Dataset, cfg: AttackConfig, r_d: float = 0.9,
                      alpha_d: float | None = None, printed_formula: bool = False,
                      with_bound: bool = True) -> EvalReport:
    """Attack the deployed mixture end to end; optionally also compute the bound."""
    params, alpha = result.params, result.alpha_star
    ids = np.asarray(data.ids, dtype=np.uint64)
    g_clean = LogitDataset(ids, data.y, g_model.forward(data.x))
    h_clean = LogitDataset(ids, data.y, h_model.forward(data.x))
    bound_run = minimum_margin_attack(h_model, data, cfg, head=params) if with_bound else None
    rep = evaluate_table(result, g_clean, h_clean, bound_run)
    mix_cfg = MixConfig(alpha, alpha_d=alpha_d, r_d=r_d)
    run = adaptive_mixed_attack(g_model, h_model, params, mix_cfg, data, cfg, printed_formula)
    rep.mode = "adaptive"
    rep.robust_accuracy = run.robust_accuracy
    rep.attack_run = run
    rob_h = rep.arm_attacked_accuracy.get("h")
    if rob_h is not None:
        rep.error_deltas["robust_vs_h_attacked"] = relative_error_delta(
            1 - run.robust_accuracy, 1 - rob_h)
    if rep.guaranteed_lower_bound is not None and rep.robust_accuracy is not None \
            and rep.guaranteed_lower_bound > rep.robust_accuracy:
        log.warning("certified bound %.4f exceeds attacked accuracy %.4f",
                    rep.guaranteed_lower_bound, rep.robust_accuracy)
    return rep


# -- margins export ----------------------------------------------------------------


def margin_rows(clean: LogitDataset, transform: TransformParams | str | None,
                attack: AttackRun | None = None):
    """Per-example margins with group labels, plus group medians.

    ``transform`` is a parameter set, ``"ln"`` for plain layer norm, or
    ``None`` for the untransformed softmax.
    """
    def probs(z):
        if transform is None or transform == "none":
            return softmax(z)
        if transform == "ln":
            return softmax(layer_norm(z))
        return softmax(nonlinear_transform(z, transform))

    rows = []
    groups: dict[str, list] = {g: [] for g in GROUPS}

    def add(phase, ids, z, y):
        m = margin(probs(z))
        for i, lab, v, k in zip(ids, y, m.value, m.predicted_class):
            group = f"{phase}_{'correct' if k == lab else 'incorrect'}"
            rows.append((int(i), int(lab), group, float(v)))
            groups[group].append(float(v))

    add("clean", clean.ids, clean.logits, clean.labels)
    if attack is not None:
        add("attacked", clean.ids, _attacked_rows(attack, clean.ids), clean.labels)
    medians = {g: _median(v) for g, v in groups.items()}
    return rows, medians


def write_margin_csv(rows, path) -> None:
    with open(path, "w", newline="\n") as f:
        f.write("id,label,group,margin\n")
        for i, lab, group, v in rows:
            f.write(f"{i},{lab},{group},{v!r}\n")


# -- trade-off curve ---------------------------------------------------------------


@dataclass
class TradeoffRow:
    beta: float
    clean_accuracy: float
    robust_accuracy: float
    alpha_star: float
    q_star: float
    s_star: float
    p_star: float
    c_star: float
    objective: float
    activeness: str


@dataclass
class TradeoffCurve:
    rows: list

    def __post_init__(self):
        betas = [r.beta for r in self.rows]
        if any(b >= c for b, c in zip(betas, betas[1:])):
            raise InvariantError("trade-off betas must be strictly increasing")

    def to_dict(self) -> dict:
        return {"rows": [dict(r.__dict__) for r in self.rows]}


def tradeoff(sets: MarginSets, grid: SearchGrid, betas, g_clean: LogitDataset,
             h_clean: LogitDataset, attack: AttackRun,
             variant: Variant | str = Variant.INDEPENDENT) -> TradeoffCurve:
    """Re-run the grid search for several betas against one cached attack.

    ``robust_accuracy`` here is the fraction of cached attacked logits whose
    transformed margin clears the threshold, i.e. the table-mode bound
    evaluated on the perturbations the cache holds.
    """
    betas = [float(b) for b in betas]
    if not betas:
        raise InvalidInputError("no betas given")
    if len(set(betas)) != len(betas):
        raise InvalidInputError("duplicate betas")
    before = content_hash(attack)
    h_clean = _align(g_clean, h_clean)
    att = _attacked_rows(attack, g_clean.ids)
    rows = []
    for beta in sorted(betas):
        g = SearchGrid(grid.s, grid.p, grid.c, grid.clamp, beta, grid.ln_top_k)
        res = grid_search(sets, g, variant)
        acc, _, _ = _clean_part(g_clean, h_clean, res.alpha_star, res.params)
        counted, _ = certified(att, g_clean.labels, res.alpha_star, res.params)
        act = constraint_activeness_check(res, sets, g)
        rows.append(TradeoffRow(beta, acc, float(np.mean(counted)), res.alpha_star, res.q_star,
                                res.s_star, res.p_star, res.c_star, res.objective, act.status))
    if content_hash(attack) != before:
        raise CacheMismatchError("attack cache changed while sweeping beta")
    return TradeoffCurve(rows)
