"""Small differentiable classifiers with handwritten reverse-mode gradients.

A classifier maps a batch ``x`` of shape ``(n, d)`` to logits ``(n, c)``.
Differentiable ones also implement ``backward(x, grad_logits)``, the
vector-Jacobian product with respect to the input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import DimensionMismatchError, InvalidInputError, NotDifferentiableError
from .logits import Clamp, TransformParams, _ln_stats, layer_norm, nonlinear_transform, softmax
from .mixing import MixConfig, mix
from .rng import stream

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Activation(str, enum.Enum):
    TANH = "tanh"
    GELU = "gelu"


def _act(v, kind: Activation):
    if kind is Activation.TANH:
        return np.tanh(v)
    return v * (0.5 * erfc(-v / _SQRT2))


def _act_grad(v, kind: Activation):
    if kind is Activation.TANH:
        return 1.0 - np.tanh(v) ** 2
    return 0.5 * erfc(-v / _SQRT2) + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)


def _softmax_vjp(probs, grad_probs):
    return probs * (grad_probs - (probs * grad_probs).sum(axis=-1, keepdims=True))


# -- scalar losses over logits --------------------------------------------------
#
# ``value`` returns one loss per example, ``grad`` its gradient w.r.t. logits.


@dataclass(frozen=True)
class CrossEntropy:
    y: np.ndarray

    def value(self, z):
        p = softmax(z)
        return -np.log(np.take_along_axis(p, _col(self.y, z), -1)[..., 0])

    def grad(self, z):
        p = softmax(z)
        return p - _onehot(self.y, z)


@dataclass(frozen=True)
class MarginLoss:
    """Signed probability margin of the label over the strongest other class."""

    y: np.ndarray

    def _runner_up(self, p):
        rest = p.copy()
        np.put_along_axis(rest, _col(self.y, p), -np.inf, -1)
        return np.argmax(rest, axis=-1)

    def value(self, z):
        p = softmax(z)
        j = self._runner_up(p)
        return _take(p, self.y) - _take(p, j)

    def grad(self, z):
        p = softmax(z)
        j = self._runner_up(p)
        return _softmax_vjp(p, _onehot(self.y, z) - _onehot(j, z))


@dataclass(frozen=True)
class TargetedMargin:
    """``p_y - p_t`` for a fixed target class ``t``."""

    y: np.ndarray
    t: np.ndarray

    def value(self, z):
        p = softmax(z)
        return _take(p, self.y) - _take(p, self.t)

    def grad(self, z):
        p = softmax(z)
        return _softmax_vjp(p, _onehot(self.y, z) - _onehot(self.t, z))


@dataclass(frozen=True)
class LogitDifference:
    i: np.ndarray
    j: np.ndarray

    def value(self, z):
        return _take(z, self.i) - _take(z, self.j)

    def grad(self, z):
        return _onehot(self.i, z) - _onehot(self.j, z)


def _col(idx, z):
    return np.broadcast_to(np.asarray(idx, dtype=np.int64), z.shape[:-1])[..., None]


def _take(z, idx):
    return np.take_along_axis(z, _col(idx, z), -1)[..., 0]


def _onehot(idx, z):
    out = np.zeros_like(z)
    np.put_along_axis(out, _col(idx, z), 1.0, -1)
    return out


# -- classifiers -----------------------------------------------------------------


class Classifier:
    class_count: int
    input_dim: int
    differentiable: bool = True

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x, grad_logits) -> np.ndarray:
        raise NotDifferentiableError(f"{type(self).__name__} has no input gradient")

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionMismatchError(
                f"expected inputs of shape (n, {self.input_dim}), got {x.shape}")
        return x


def input_gradient(model: Classifier, x, loss) -> np.ndarray:
    """Gradient of a per-example scalar loss with respect to the inputs."""
    if not model.differentiable:
        raise NotDifferentiableError(
            f"{type(model).__name__} is not differentiable; use table-based workflows")
    x = np.asarray(x, dtype=np.float64)
    return model.backward(x, loss.grad(model.forward(x)))


class LinearModel(Classifier):
    def __init__(self, weights, biases):
        self.weights = np.array(weights, dtype=np.float64)
        self.biases = np.array(biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != self.weights.shape[:1]:
            raise DimensionMismatchError("weights must be (c, d) and biases (c,)")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.biases).all()):
            raise InvalidInputError("model parameters must be finite")
        self.weights.flags.writeable = False
        self.biases.flags.writeable = False
        self.class_count, self.input_dim = self.weights.shape

    def forward(self, x):
        return self._check_input(x) @ self.weights.T + self.biases

    def backward(self, x, grad_logits):
        return np.asarray(grad_logits) @ self.weights

    def params(self):
        return [self.weights, self.biases]

    def param_grads(self, x, grad_logits):
        x = self._check_input(x)
        return [grad_logits.T @ x, grad_logits.sum(axis=0)]

    def with_params(self, params):
        return LinearModel(*params)


class MlpModel(Classifier):
    """Fully connected network, smooth hidden activation, linear output layer."""

    def __init__(self, weights, biases, activation: Activation | str = Activation.TANH):
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.activation = Activation(activation)
        if not self.weights or len(self.weights) != len(self.biases):
            raise DimensionMismatchError("need one bias vector per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != w.shape[:1]:
                raise DimensionMismatchError(f"layer {k}: bad shapes {w.shape}, {b.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionMismatchError(f"layer {k} input does not match layer {k - 1}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise InvalidInputError("model parameters must be finite")
            w.flags.writeable = False
            b.flags.writeable = False
        self.input_dim = self.weights[0].shape[1]
        self.class_count = self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    @classmethod
    def random(cls, sizes, activation=Activation.TANH, seed: int = 0, scale: float = 1.0):
        rng = stream(seed, 7)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.standard_normal((fan_out, fan_in)) * scale / np.sqrt(fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation)

    def _trace(self, x):
        pre, h = [], x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w.T + b
            if k == len(self.weights) - 1:
                return pre, h, a
            pre.append(a)
            h = _act(a, self.activation)

    def forward(self, x):
        return self._trace(self._check_input(x))[2]

    def _backprop(self, x, grad_logits, want_params):
        pre, last_h, _ = self._trace(self._check_input(x))
        hs = [x] + [_act(a, self.activation) for a in pre]
        g = np.asarray(grad_logits, dtype=np.float64)
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            if want_params:
                grads[2 * k] = g.T @ hs[k]
                grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k]
            if k:
                g = g * _act_grad(pre[k - 1], self.activation)
        return g, grads

    def backward(self, x, grad_logits):
        return self._backprop(x, grad_logits, want_params=False)[0]

    def params(self):
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def param_grads(self, x, grad_logits):
        return self._backprop(x, grad_logits, want_params=True)[1]

    def with_params(self, params):
        return MlpModel(params[0::2], params[1::2], self.activation)


def transform_vjp(z, params: TransformParams, grad_out) -> np.ndarray:
    """Vector-Jacobian product of ``nonlinear_transform`` at logits ``z``.

    The top-k window of the layer norm is treated as locally fixed. At
    ``h == 0`` the power term uses its one-sided derivative, taken as 0 for
    ``p != 1``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    grad_out = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    mu, sigma = _ln_stats(z, params.ln_top_k)
    u = (z - mu) / sigma
    v = u + params.c
    if params.clamp is Clamp.LINEAR:
        h, dh = v, np.ones_like(v)
    elif params.clamp is Clamp.RELU:
        h, dh = np.maximum(v, 0.0), (v > 0).astype(np.float64)
    else:
        h, dh = _act(v, Activation.GELU), _act_grad(v, Activation.GELU)
    s, p = params.s, params.p
    with np.errstate(divide="ignore", invalid="ignore"):
        dpow = np.where(h != 0, s * p * np.abs(h) ** (p - 1.0), s if p == 1.0 else 0.0)
    gu = grad_out * dpow * dh
    k = z.shape[-1]
    if params.ln_top_k is None or params.ln_top_k >= k:
        window = np.ones_like(z, dtype=bool)
    else:
        order = np.argsort(-z, axis=-1, kind="stable")[:, : params.ln_top_k]
        window = np.zeros_like(z, dtype=bool)
        np.put_along_axis(window, order, True, -1)
    kw = window.sum(axis=-1, keepdims=True)
    sum_g = gu.sum(axis=-1, keepdims=True)
    sum_gu = (gu * u).sum(axis=-1, keepdims=True)
    return (gu - window * (sum_g + u * sum_gu) / kw) / sigma


class TransformedModel(Classifier):
    """``nonlinear_transform(base(x))``; with default params this is the layer-normed model."""

    def __init__(self, base: Classifier, params: TransformParams = TransformParams()):
        self.base = base
        self.params = params
        self.class_count = base.class_count
        self.input_dim = base.input_dim
        self.differentiable = base.differentiable

    def forward(self, x):
        return nonlinear_transform(self.base.forward(x), self.params)

    def backward(self, x, grad_logits):
        z = self.base.forward(x)
        return self.base.backward(x, transform_vjp(z, self.params, grad_logits))


class MixtureModel(Classifier):
    """``log(sum_k w_k softmax(model_k(x)))`` over models sharing an input space."""

    def __init__(self, components):
        self.components = [(float(w), m) for w, m in components]
        first = self.components[0][1]
        for _, m in self.components:
            if (m.input_dim, m.class_count) != (first.input_dim, first.class_count):
                raise DimensionMismatchError("mixture components disagree on shapes")
        self.input_dim = first.input_dim
        self.class_count = first.class_count
        self.differentiable = all(m.differentiable for w, m in self.components if w)

    def _probs(self, x):
        parts = [(w, m, softmax(m.forward(x))) for w, m in self.components]
        total = sum(w * p for w, _, p in parts)
        return parts, total

    def forward(self, x):
        _, total = self._probs(x)
        with np.errstate(divide="ignore"):
            return np.log(total)

    def backward(self, x, grad_logits):
        parts, total = self._probs(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.where(total > 0, np.asarray(grad_logits) / total, 0.0)
        gx = np.zeros_like(np.asarray(x, dtype=np.float64))
        for w, m, p in parts:
            if w:
                gx = gx + m.backward(x, w * _softmax_vjp(p, gp))
        return gx


def surrogate_mixture(g: Classifier, h: Classifier, cfg: MixConfig, params: TransformParams,
                      printed_formula: bool = False) -> MixtureModel:
    """Differentiable stand-in for the T=0 mixture (see ``aux_differentiable_mix``)."""
    a, r = cfg.surrogate_alpha, cfg.r_d
    bypass = g if printed_formula else h
    return MixtureModel([(1.0 - a, g), (a * r, bypass), (a * (1.0 - r), TransformedModel(h, params))])


class MixedClassifier(Classifier):
    """The deployed mixture, accurate side at ``cfg.accurate_temperature`` (usually 0)."""

    differentiable = False

    def __init__(self, g: Classifier, h: Classifier, cfg: MixConfig, params: TransformParams):
        if (g.input_dim, g.class_count) != (h.input_dim, h.class_count):
            raise DimensionMismatchError("base classifiers disagree on shapes")
        self.g, self.h, self.cfg, self.params = g, h, cfg, params
        self.input_dim, self.class_count = g.input_dim, g.class_count

    def forward(self, x):
        return self.output(x).log_probs

    def output(self, x):
        return mix(self.g.forward(x), self.h.forward(x), self.cfg, self.params)


class TableClassifier(Classifier):
    """Lookup of precomputed logits by example id. Not differentiable."""

    differentiable = False
    input_dim = 1

    def __init__(self, ids, logits, attacked_logits=None):
        ids = np.asarray(ids, dtype=np.uint64)
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[0] != ids.shape[0]:
            raise DimensionMismatchError("need one logit vector per id")
        if attacked_logits is not None:
            attacked_logits = np.asarray(attacked_logits, dtype=np.float64)
            if attacked_logits.shape != logits.shape:
                raise DimensionMismatchError("attacked logits must match clean logits")
        self._index = {int(i): k for k, i in enumerate(ids)}
        if len(self._index) != len(ids):
            raise InvalidInputError("duplicate example ids")
        self.ids, self.logits, self.attacked_logits = ids, logits, attacked_logits
        self.class_count = logits.shape[1]

    def _rows(self, ids):
        try:
            return [self._index[int(i)] for i in np.atleast_1d(ids)]
        except KeyError as e:
            raise InvalidInputError(f"unknown example id {e.args[0]}") from None

    def forward(self, ids):
        return self.logits[self._rows(ids)]

    def forward_attacked(self, ids):
        if self.attacked_logits is None:
            raise InvalidInputError("table has no attacked logits")
        return self.attacked_logits[self._rows(ids)]


# -- synthetic data ----------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    bounds: tuple[float, float] | None = None

    def __len__(self):
        return len(self.y)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.x[mask], self.y[mask], self.ids[mask], self.bounds)


@dataclass(frozen=True)
class PlantedMixture:
    """Generative description: class ``k`` is ``N(means[k], I)``, classes equiprobable."""

    means: np.ndarray
    separation: float


def class_means(classes: int, dim: int, separation: float) -> np.ndarray:
    if classes <= dim:
        # scaled simplex: every pair of means is exactly `separation` apart
        means = np.zeros((classes, dim))
        means[np.arange(classes), np.arange(classes)] = separation / np.sqrt(2.0)
        return means - means.mean(axis=0)
    radius = separation / (2.0 * np.sin(np.pi / classes))
    theta = 2.0 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0], means[:, 1] = radius * np.cos(theta), radius * np.sin(theta)
    return means


def make_synthetic_problem(seed: int, classes: int, dim: int, samples: int,
                           separation: float) -> tuple[Dataset, PlantedMixture]:
    """Balanced unit-variance Gaussian mixture, one component per class.

    Inputs are rounded to float32 so they survive the on-disk format unchanged.
    """
    if classes < 2 or dim < 2 or samples < classes:
        raise InvalidInputError("need classes >= 2, dim >= 2 and samples >= classes")
    if not separation > 0:
        raise InvalidInputError("separation must be positive")
    means = class_means(classes, dim, separation)
    y = stream(seed, 0).permutation(np.arange(samples) % classes)
    noise = stream(seed, 1).standard_normal((samples, dim))
    x = (means[y] + noise).astype(np.float32).astype(np.float64)
    ids = np.arange(samples, dtype=np.uint64)
    return Dataset(x, y.astype(np.int64), ids), PlantedMixture(means, float(separation))
