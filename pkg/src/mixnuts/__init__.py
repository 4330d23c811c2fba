"""Mixing an accurate and a robust classifier after a margin-sharpening transform."""

from .attack import AttackConfig, AttackRun, Norm, adaptive_mixed_attack, minimum_margin_attack
from .logits import Clamp, TransformParams, layer_norm, margin, nonlinear_transform, softmax
from .mixing import MixConfig, aux_differentiable_mix, mix, threshold_predict
from .optimizer import (
    GridSearchResult,
    MarginSets,
    SearchGrid,
    Variant,
    bottom_quantile,
    build_margin_sets,
    constraint_activeness_check,
    grid_search,
)

__version__ = "0.1.0"
