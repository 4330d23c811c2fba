"""Full-batch gradient descent for the toy models.

Only used to manufacture base classifiers that differ in accuracy and
robustness: ``adv_epsilon > 0`` trains on PGD-perturbed inputs.
"""

from __future__ import annotations

import numpy as np

from .models import Classifier, CrossEntropy, Dataset, input_gradient
from .logits import softmax


def _pgd_ce(model, x, y, eps, steps):
    loss = CrossEntropy(y)
    x_adv = x.copy()
    eta = 2.5 * eps / steps
    for _ in range(steps):
        x_adv = x_adv + eta * np.sign(input_gradient(model, x_adv, loss))
        x_adv = x + np.clip(x_adv - x, -eps, eps)
    return x_adv


def train(model: Classifier, data: Dataset, epochs: int = 300, lr: float = 0.1,
          momentum: float = 0.9, weight_decay: float = 1e-4, adv_epsilon: float = 0.0,
          adv_steps: int = 5) -> Classifier:
    """Return a new model trained on ``data``; ``model`` itself is left untouched."""
    params = [p.copy() for p in model.params()]
    velocity = [np.zeros_like(p) for p in params]
    x, y = data.x, data.y
    onehot = np.eye(model.class_count)[y]
    current = model
    for _ in range(epochs):
        xb = _pgd_ce(current, x, y, adv_epsilon, adv_steps) if adv_epsilon > 0 else x
        grad_logits = (softmax(current.forward(xb)) - onehot) / len(y)
        grads = current.param_grads(xb, grad_logits)
        for p, v, g in zip(params, velocity, grads):
            v *= momentum
            v -= lr * (g + weight_decay * p)
            p += v
        current = model.with_params([p.copy() for p in params])
    return current
