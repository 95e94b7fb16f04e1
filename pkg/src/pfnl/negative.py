"""Hard-negative mining against the class gallery.

Negatives are out-of-episode classes whose text embeddings sit closest to
the mean support feature. Mining is pure lookup (ids + scores); turning
ids into adapted prototype vectors is a separate step so the same mined
set can be reused across queries within an episode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .bank import ClassGallery
from .errors import DegenerateInputError, DimensionError, MiningError
from .params import AdapterVars
from .text_branch import adapt_class_text, enhance_text, predict_prompt


def mean_support(support: np.ndarray) -> np.ndarray:
    support = np.asarray(support, dtype=np.float64)
    if support.ndim != 2:
        raise DimensionError(f"mean_support: expected matrix, got shape {support.shape}")
    if support.shape[0] == 0:
        raise DegenerateInputError("mean_support: empty support set")
    return support.mean(axis=0)


@dataclass(frozen=True)
class HardNegativeSet:
    class_ids: list[int]     # descending similarity, ties by ascending id
    scores: list[float]


def mine_hard_negatives(s_bar: np.ndarray, gallery: ClassGallery,
                        episode_class_ids, k: int) -> HardNegativeSet:
    """Top-k gallery classes by cosine to the mean support, excluding the episode's."""
    if k < 0:
        raise MiningError(f"k must be >= 0, got {k}")
    if k == 0:
        return HardNegativeSet([], [])
    s_bar = np.asarray(s_bar, dtype=np.float64)
    norm = np.linalg.norm(s_bar)
    if norm == 0.0:
        raise DegenerateInputError("mine_hard_negatives: zero-norm mean support")
    inside = set(int(c) for c in episode_class_ids)
    candidates = [c for c in range(gallery.n_classes) if c not in inside]
    if len(candidates) < k:
        raise MiningError(f"gallery holds {len(candidates)} out-of-episode classes, need {k}")
    sims = gallery.vectors[candidates] @ (s_bar / norm)
    order = sorted(range(len(candidates)), key=lambda i: (-sims[i], candidates[i]))[:k]
    return HardNegativeSet([candidates[i] for i in order], [float(sims[i]) for i in order])


def adapt_negatives(negatives: HardNegativeSet, gallery: ClassGallery, support: Var,
                    pv: AdapterVars, mode: str = "adapted",
                    activation: str = "gelu", eps: float = 1e-5) -> list[Var]:
    """Negative prototypes via the textual branch.

    ``adapted`` runs the full branch; ``prompt`` stops at text + prompt
    (no attention), the cheaper fused-form variant.
    """
    tape = support.tape
    out = []
    for cid in negatives.class_ids:
        t_n = tape.const(gallery.vectors[cid])
        if mode == "adapted":
            out.append(adapt_class_text(t_n, support, pv, activation, eps))
        elif mode == "prompt":
            prompt, _ = predict_prompt(t_n, pv, activation)
            out.append(enhance_text(t_n, prompt))
        else:
            raise MiningError(f"unknown negative mode {mode!r}")
    return out
