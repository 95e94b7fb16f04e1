"""Visual prototype construction and adaptation.

Prototypes are weighted means of support features; adaptation adds a
trained per-slot residual token, standardizes with LayerNorm, and applies
a linear projection.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import DegenerateInputError, DimensionError


def weighted_prototype(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Convex combination sum(w_i x_i) / sum(w_i) of support rows."""
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if features.ndim != 2 or weights.shape != (features.shape[0],):
        raise DimensionError(
            f"weighted_prototype: features {features.shape} vs weights {weights.shape}")
    if features.shape[0] == 0:
        raise DegenerateInputError("weighted_prototype: no support features")
    if np.any(weights < 0):
        raise DegenerateInputError("weighted_prototype: negative weight")
    total = float(np.sum(weights))
    if total == 0.0:
        raise DegenerateInputError("weighted_prototype: weights sum to zero")
    return (weights @ features) / total


def adapt_class_visual(v_c: Var, residual: Var, vis_proj: Var,
                       ln_gain: Var, ln_bias: Var, eps: float = 1e-5) -> Var:
    """proj @ LayerNorm(v_c + residual)."""
    return ad.matvec(vis_proj, ad.layer_norm(v_c + residual, ln_gain, ln_bias, eps))
