"""Bayes accuracy of the planted two-class problem by quadrature.

The optimal rule picks the nearer mean; accuracy is the integral of the
class-0 density over its half-plane, reduced to one dimension along the
line through the means.

    python3 tests/oracles/bayes_quadrature.py
"""

import numpy as np
from scipy import integrate


def bayes_accuracy(separation: float) -> float:
    density = lambda t: np.exp(-0.5 * (t + separation / 2) ** 2) / np.sqrt(2 * np.pi)
    value, _ = integrate.quad(density, -np.inf, 0.0, epsabs=1e-14)
    return value


if __name__ == "__main__":
    for sep in (2.0, 2.5):
        print(sep, repr(bayes_accuracy(sep)))
