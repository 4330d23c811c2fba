"""Margin-tracking projected gradient attacks.

Every iterate of every pass and restart is scored, and the perturbation with
the smallest signed margin (label probability minus the best other class) is
kept. One untargeted pass ascends the cross-entropy; ``targets`` targeted
passes descend ``p_y - p_t`` toward the strongest runner-up classes. All
passes share one running minimum per example.
"""

from __future__ import annotations

import enum
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NotDifferentiableError
from .logits import TransformParams, margin_vs_label, nonlinear_transform, softmax
from .mixing import MixConfig, mix
from .models import (
    Classifier,
    CrossEntropy,
    Dataset,
    TargetedMargin,
    TransformedModel,
    input_gradient,
    surrogate_mixture,
)
from .rng import stream

log = logging.getLogger(__name__)

CHUNK = 256


class Norm(str, enum.Enum):
    LINF = "Linf"
    L2 = "L2"


@dataclass(frozen=True)
class AttackConfig:
    norm: Norm = Norm.LINF
    epsilon: float = 0.3
    steps: int = 50
    restarts: int = 1
    step_size: float | str = "auto"
    seed: int = 0
    targets: int = 3

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm(self.norm))
        if not self.epsilon >= 0:
            raise InvalidInputError("epsilon must be non-negative")
        if self.steps < 1 or self.restarts < 1:
            raise InvalidInputError("steps and restarts must be at least 1")
        if self.targets < 0:
            raise InvalidInputError("targets must be non-negative")
        if self.step_size != "auto" and not float(self.step_size) > 0:
            raise InvalidInputError("step_size must be positive or 'auto'")

    @property
    def eta(self) -> float:
        if self.step_size == "auto":
            return 2.0 * self.epsilon / self.steps
        return float(self.step_size)

    def to_dict(self) -> dict:
        return {"norm": self.norm.value, "epsilon": self.epsilon, "steps": self.steps,
                "restarts": self.restarts, "step_size": self.step_size, "seed": self.seed,
                "targets": self.targets}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        step = d.get("step_size", "auto")
        return cls(Norm(d["norm"]), float(d["epsilon"]), int(d["steps"]), int(d["restarts"]),
                   step if step == "auto" else float(step), int(d["seed"]), int(d["targets"]))


@dataclass
class AttackRun:
    """Per-example outcome of a margin-tracking attack.

    ``best_logits`` are the logits recorded at the minimizing perturbation:
    raw (pre-transform) logits of the attacked base model, or the mixture's
    log-probabilities for adaptive runs. ``history[:, t]`` is the running
    minimum after the t-th scored iterate.
    """

    ids: np.ndarray
    clean_margin: np.ndarray
    best_margin: np.ndarray
    best_logits: np.ndarray
    config: AttackConfig
    perturbation: np.ndarray | None = None
    history: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def __len__(self):
        return len(self.ids)

    @property
    def robust_accuracy(self) -> float:
        return float(np.mean(self.best_margin > 0)) if len(self) else float("nan")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MIXNUTS_THREADS", "1")))
    except ValueError:
        return 1


def _random_start(cfg: AttackConfig, ex_id: int, restart: int, dim: int) -> np.ndarray:
    rng = stream(cfg.seed, ex_id, restart)
    if cfg.norm is Norm.LINF:
        return rng.uniform(-cfg.epsilon, cfg.epsilon, dim)
    d = rng.standard_normal(dim)
    d /= max(np.linalg.norm(d), 1e-300)
    return d * cfg.epsilon * rng.uniform() ** (1.0 / dim)


def _project(x, x0, cfg: AttackConfig, bounds):
    delta = x - x0
    if cfg.norm is Norm.LINF:
        delta = np.clip(delta, -cfg.epsilon, cfg.epsilon)
    else:
        n = np.linalg.norm(delta, axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = delta * np.where(n > cfg.epsilon, cfg.epsilon / n, 1.0)
    x = x0 + delta
    if bounds is not None:
        x = np.clip(x, bounds[0], bounds[1])
    return x


def _step(x, grad, cfg: AttackConfig):
    """One descent step on the loss."""
    if cfg.norm is Norm.LINF:
        return x - cfg.eta * np.sign(grad)
    n = np.linalg.norm(grad, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(n > 0, grad / n, 0.0)
    return x - cfg.eta * unit


def _run_chunk(ids, x0, y, grad_models, score, cfg, bounds, record_history):
    n, dim = x0.shape
    m0, logits0, probs0 = score(x0, y)
    best_m = np.full(n, np.inf)
    best_logits = np.zeros_like(logits0)
    best_x = x0.copy()
    history = []

    def consider(x):
        m, lg, _ = score(x, y)
        better = m < best_m
        best_m[better] = m[better]
        best_logits[better] = lg[better]
        best_x[better] = x[better]
        if record_history:
            history.append(best_m.copy())

    ranked = probs0.copy()
    np.put_along_axis(ranked, y[:, None], -np.inf, 1)
    order = np.argsort(-ranked, axis=1, kind="stable")
    n_targets = min(cfg.targets, probs0.shape[1] - 1)
    # (model, loss, sign); the sign turns every pass into a descent
    passes = []
    for model in grad_models:
        passes.append((model, CrossEntropy(y), -1.0))
        passes += [(model, TargetedMargin(y, order[:, t]), 1.0) for t in range(n_targets)]

    for r in range(cfg.restarts):
        if r == 0:
            start = x0
        else:
            start = x0 + np.stack([_random_start(cfg, int(i), r, dim) for i in ids])
            start = _project(start, x0, cfg, bounds)
        for model, loss, sign in passes:
            x = start
            consider(x)
            for _ in range(cfg.steps):
                g = sign * input_gradient(model, x, loss)
                x = _project(_step(x, g, cfg), x0, cfg, bounds)
                consider(x)
    hist = np.stack(history, axis=1) if record_history else None
    return m0, best_m, best_logits, best_x - x0, hist


def _attack(data: Dataset, grad_models: list, score, cfg: AttackConfig,
            record_history: bool) -> AttackRun:
    if not all(m.differentiable for m in grad_models):
        raise NotDifferentiableError(
            "attacks need a differentiable model; precomputed logits go through "
            "TableClassifier / table-mode evaluation instead")
    t0 = time.perf_counter()
    x0 = np.asarray(data.x, dtype=np.float64)
    y = np.asarray(data.y, dtype=np.int64)
    chunks = [slice(a, min(a + CHUNK, len(y))) for a in range(0, len(y), CHUNK)]

    def work(sl):
        return _run_chunk(data.ids[sl], x0[sl], y[sl], grad_models, score, cfg, data.bounds,
                          record_history)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        parts = list(pool.map(work, chunks))
    cat = lambda k: np.concatenate([p[k] for p in parts]) if parts else np.zeros(0)
    run = AttackRun(
        ids=np.asarray(data.ids, dtype=np.uint64),
        clean_margin=cat(0),
        best_margin=cat(1),
        best_logits=cat(2) if parts else np.zeros((0, grad_models[0].class_count)),
        config=cfg,
        perturbation=cat(3) if parts else np.zeros((0, x0.shape[1] if x0.ndim == 2 else 0)),
        history=cat(4) if record_history and parts else None,
        wall_clock=time.perf_counter() - t0,
    )
    log.info("attacked %d examples in %.2fs, robust accuracy %.4f",
             len(run), run.wall_clock, run.robust_accuracy)
    return run


def minimum_margin_attack(model: Classifier, data: Dataset, cfg: AttackConfig,
                          head: TransformParams | None = None,
                          record_history: bool = False) -> AttackRun:
    """Attack ``head(model(x))`` and keep the smallest margin seen.

    With ``head=TransformParams()`` this attacks the layer-normed model. The
    recorded logits are always the raw outputs of ``model`` so any transform
    can be applied to them later.

    A head can flatten the loss surface (with two classes layer norm maps
    every logit pair to +-1, so its gradient is zero almost everywhere). With
    a head, every restart therefore also runs the passes on gradients of the
    bare model; all iterates are still scored through the head.
    """
    grad_models = [model] if head is None else [TransformedModel(model, head), model]

    def score(x, y):
        raw = model.forward(x)
        probs = softmax(raw if head is None else nonlinear_transform(raw, head))
        return margin_vs_label(probs, y), raw, probs

    run = _attack(data, grad_models, score, cfg, record_history)
    run.meta = {"kind": "minimum-margin", "head": None if head is None else head.to_dict()}
    return run


def adaptive_mixed_attack(g_model: Classifier, h_model: Classifier, params: TransformParams,
                          cfg_mix: MixConfig, data: Dataset, cfg: AttackConfig,
                          printed_formula: bool = False,
                          record_history: bool = False) -> AttackRun:
    """Transfer attack on the deployed mixture.

    Gradients come from the smooth surrogate mixture; every iterate is scored
    on the true mixture, so recorded margins and log-probabilities are those
    of the deployed classifier.
    """
    surrogate = surrogate_mixture(g_model, h_model, cfg_mix, params, printed_formula)

    def score(x, y):
        out = mix(g_model.forward(x), h_model.forward(x), cfg_mix, params)
        return margin_vs_label(out.probs, y), out.log_probs, softmax(surrogate.forward(x))

    run = _attack(data, [surrogate], score, cfg, record_history)
    run.meta = {"kind": "adaptive-mixed", "head": params.to_dict(), "alpha": cfg_mix.alpha,
                "alpha_d": cfg_mix.surrogate_alpha, "r_d": cfg_mix.r_d,
                "accurate_temperature": cfg_mix.accurate_temperature}
    return run
