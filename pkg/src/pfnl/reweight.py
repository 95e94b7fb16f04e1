"""Noise-robust support reweighting.

Each support instance is scored by how well it agrees with the episode:
the average of its cosine to the mean support feature and its cosine to
its own class's fused prototype, clamped to [0, 1]. Prototypes depend on
the weights, so the two are iterated for a fixed number of rounds from
uniform weights. Everything here is stop-gradient: weights enter the loss
as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .errors import DegenerateInputError, DimensionError
from .objective import EpisodeContext, Hyperparams, build_prototypes
from .params import AdapterParams


def instance_weight(cos_mean: float, cos_proto: float) -> float:
    """clamp((cos_to_mean + cos_to_prototype) / 2, 0, 1)."""
    return float(np.clip(0.5 * (cos_mean + cos_proto), 0.0, 1.0))


@dataclass
class InstanceWeights:
    values: np.ndarray                      # (M,) in [0, 1]
    rounds: int
    fallback_slots: list[int] = field(default_factory=list)  # all-zero classes reset to uniform


def compute_weights(ctx: EpisodeContext, params: AdapterParams, hyper: Hyperparams,
                    rounds: int = 2) -> InstanceWeights:
    """Fixed-point iteration between instance weights and fused prototypes."""
    if rounds < 1:
        raise DimensionError(f"reweighting rounds must be >= 1, got {rounds}")
    m = ctx.support.shape[0]
    weights = np.ones(m)
    s_bar = ctx.s_bar
    s_norm = np.linalg.norm(s_bar)
    if s_norm == 0.0:
        raise DegenerateInputError("compute_weights: zero-norm mean support")
    cos_mean = (ctx.support @ s_bar) / s_norm  # support rows are unit norm
    fallback: list[int] = []
    for _ in range(rounds):
        tape = Tape(grad_enabled=False)
        pv = params.bind(tape)
        protos = build_prototypes(tape, ctx, pv, params, hyper, weights)
        z = np.vstack([p.value for p in protos.z_plus])
        z_norms = np.linalg.norm(z, axis=1)
        if np.any(z_norms == 0.0):
            raise DegenerateInputError("compute_weights: zero-norm fused prototype")
        z_unit = z / z_norms[:, None]
        cos_proto = np.einsum("md,md->m", ctx.support, z_unit[ctx.support_slots])
        weights = np.clip(0.5 * (cos_mean + cos_proto), 0.0, 1.0)
        fallback = []
        for c in range(ctx.way):
            rows = ctx.groups[c]
            if rows.size and float(np.sum(weights[rows])) == 0.0:
                weights[rows] = 1.0
                fallback.append(c)
    return InstanceWeights(weights, rounds, fallback)


def uniform_weights(ctx: EpisodeContext) -> InstanceWeights:
    """Reweighting disabled: every support instance counts equally."""
    return InstanceWeights(np.ones(ctx.support.shape[0]), 0)
