"""Episode assembly, prototype fusion, losses, and scoring.

The fused prototype blends adapted and frozen views of each class:

    z_c = lam * (t_adapted + v_adapted) + (1 - lam) * (t_base + v_base)

so ``lambda_fuse = 0`` falls back to the frozen zero-shot classifier
exactly. Queries are scored against fused prototypes by cosine; the
positive loss is temperature-scaled cross-entropy, the negative loss a
margin hinge over mined out-of-episode classes, plus an L2 penalty on the
adaptation parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, l2_normalize
from .bank import ClassGallery, EmbeddingBank, Episode
from .errors import ConfigError, DegenerateInputError
from .negative import HardNegativeSet, adapt_negatives, mean_support, mine_hard_negatives
from .params import AdapterParams, AdapterVars
from .text_branch import adapt_class_text
from .vision_branch import adapt_class_visual, weighted_prototype

LN_EPS = 1e-5


@dataclass
class Hyperparams:
    lambda_fuse: float = 0.5
    lambda_infer: float = 0.5
    tau_temp: float = 0.07
    tau_margin: float = 0.5
    tau_calib: float = 1.0
    gamma: float = 1e-4
    negatives: int = 3
    hinge_mode: str = "prose"      # prose | paper
    negative_mode: str = "adapted"  # adapted | prompt
    reg_scope: str = "full"         # full | attn

    def validate(self) -> "Hyperparams":
        if not 0.0 <= self.lambda_fuse <= 1.0 or not 0.0 <= self.lambda_infer <= 1.0:
            raise ConfigError("fusion/inference weights must lie in [0, 1]")
        if self.tau_temp <= 0 or self.tau_calib <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0.0 <= self.tau_margin <= 1.0:
            raise ConfigError("hinge margin must lie in [0, 1]")
        if self.gamma < 0:
            raise ConfigError("regularizer strength must be >= 0")
        if self.negatives < 0:
            raise ConfigError("negative count must be >= 0")
        if self.hinge_mode not in ("prose", "paper"):
            raise ConfigError(f"unknown hinge mode {self.hinge_mode!r}")
        if self.negative_mode not in ("adapted", "prompt"):
            raise ConfigError(f"unknown negative mode {self.negative_mode!r}")
        if self.reg_scope not in ("full", "attn"):
            raise ConfigError(f"unknown regularizer scope {self.reg_scope!r}")
        return self


@dataclass
class EpisodeContext:
    """Episode features normalized and grouped for the adaptation pipeline."""

    episode: Episode
    t_base: np.ndarray          # (way, dim) unit textual embeddings per slot
    support: np.ndarray         # (M, dim) unit support features
    support_slots: np.ndarray   # (M,) slot of each support row, by post-noise label
    groups: list[np.ndarray]    # support row indices per slot
    query: np.ndarray           # (Nq, dim) unit query features
    query_slots: np.ndarray     # (Nq,) true slots
    s_bar: np.ndarray           # mean support feature

    @property
    def way(self) -> int:
        return self.episode.way


def build_context(episode: Episode, textual: EmbeddingBank) -> EpisodeContext:
    slot_of = {int(c): i for i, c in enumerate(episode.class_ids)}
    t_base = l2_normalize(
        np.vstack([textual.text_vector(int(c)) for c in episode.class_ids]), "text embedding")
    support = l2_normalize(episode.support_x, "support feature")
    query = l2_normalize(episode.query_x, "query feature")
    support_slots = np.array([slot_of[int(y)] for y in episode.support_y], dtype=np.int64)
    query_slots = np.array([slot_of[int(y)] for y in episode.query_y], dtype=np.int64)
    groups = [np.nonzero(support_slots == c)[0] for c in range(episode.way)]
    return EpisodeContext(episode, t_base, support, support_slots, groups,
                          query, query_slots, mean_support(support))


@dataclass
class FusedPrototypes:
    """Per-slot prototype variables plus the frozen bases they fused from."""

    z_plus: list[Var]
    t_adapted: list[Var]
    v_adapted: list[Var]
    v_base: np.ndarray          # (way, dim)
    support_var: Var
    fallback_slots: list[int] = field(default_factory=list)


def fuse_prototype(t_ad: Var, v_ad: Var, t_base: Var, v_base: Var, lambda_fuse: float) -> Var:
    return ad.scale(t_ad + v_ad, lambda_fuse) + ad.scale(t_base + v_base, 1.0 - lambda_fuse)


def build_prototypes(tape: Tape, ctx: EpisodeContext, pv: AdapterVars,
                     params: AdapterParams, hyper: Hyperparams,
                     weights: np.ndarray) -> FusedPrototypes:
    """Run both adaptation branches for every episode slot and fuse.

    ``weights`` are treated as constants (no gradient flows into them). A
    slot with no support rows under its post-noise labels falls back to the
    mean support feature and is reported in ``fallback_slots``.
    """
    support_var = tape.const(ctx.support)
    z_plus, t_ads, v_ads, v_bases, fallbacks = [], [], [], [], []
    for c in range(ctx.way):
        rows = ctx.groups[c]
        if rows.size == 0:
            v_c = ctx.s_bar
            fallbacks.append(c)
        else:
            w = weights[rows]
            if float(np.sum(w)) == 0.0:
                w = np.ones(rows.size)
            v_c = weighted_prototype(ctx.support[rows], w)
        t_var = tape.const(ctx.t_base[c])
        v_var = tape.const(v_c)
        t_ad = adapt_class_text(t_var, support_var, pv, params.activation, LN_EPS)
        v_ad = adapt_class_visual(v_var, pv.residual[c], pv.vis_proj,
                                  pv.vis_ln_gain, pv.vis_ln_bias, LN_EPS)
        z_plus.append(fuse_prototype(t_ad, v_ad, t_var, v_var, hyper.lambda_fuse))
        t_ads.append(t_ad)
        v_ads.append(v_ad)
        v_bases.append(v_c)
    return FusedPrototypes(z_plus, t_ads, v_ads, np.vstack(v_bases), support_var, fallbacks)


# ---------------------------------------------------------------------------
# losses


def loss_pos(tape: Tape, query: np.ndarray, prototypes: list[Var], y_slot: int,
             tau_temp: float) -> tuple[Var, np.ndarray]:
    """Temperature-scaled cross-entropy over prototype cosines.

    Returns the loss and the raw cosine row (useful for predictions).
    """
    if not 0 <= y_slot < len(prototypes):
        raise DegenerateInputError(f"loss_pos: label slot {y_slot} out of range")
    q = tape.const(query)
    cos = [ad.cosine(q, z) for z in prototypes]
    logits = ad.scale(ad.stack(cos), 1.0 / tau_temp)
    return ad.cross_entropy(logits, y_slot), np.array([float(c.value) for c in cos])


def loss_neg(tape: Tape, query: np.ndarray, negatives: list[Var],
             tau_margin: float, mode: str = "prose") -> Var:
    """Margin hinge against negative prototypes, mean over the set.

    ``paper`` penalizes max(0, margin - cos): similarity pushed up to the
    margin. ``prose`` penalizes max(0, cos - margin): similarity pushed
    below it. Empty set gives a zero constant.
    """
    if not negatives:
        return tape.const(0.0)
    q = tape.const(query)
    margin = tape.const(tau_margin)
    terms = []
    for z_n in negatives:
        c = ad.cosine(q, z_n)
        if mode == "paper":
            terms.append(ad.relu(ad.sub(margin, c)))
        elif mode == "prose":
            terms.append(ad.relu(ad.sub(c, margin)))
        else:
            raise ConfigError(f"unknown hinge mode {mode!r}")
    return ad.vmean(ad.stack(terms))


def attn_regularizer(tape: Tape, leaves: dict[str, Var], names: list[str], gamma: float) -> Var:
    """gamma * sum of squared Frobenius norms over the named parameters."""
    if gamma < 0:
        raise ConfigError("regularizer strength must be >= 0")
    if not names:
        return tape.const(0.0)
    total = ad.sumsq(leaves[names[0]])
    for name in names[1:]:
        total = total + ad.sumsq(leaves[name])
    return ad.scale(total, gamma)


@dataclass
class LossBreakdown:
    total: float
    pos: float
    neg: float
    reg: float


@dataclass
class TotalLossResult:
    loss: Var
    breakdown: LossBreakdown
    cosines: np.ndarray          # (n_query, way) query-prototype cosines
    predictions: np.ndarray      # (n_query,) argmax slots, ties to lowest
    negatives: HardNegativeSet
    prototypes: FusedPrototypes


def total_loss(tape: Tape, ctx: EpisodeContext, pv: AdapterVars, params: AdapterParams,
               hyper: Hyperparams, weights: np.ndarray,
               gallery: ClassGallery | None = None) -> TotalLossResult:
    """Mean over queries of positive + negative loss, plus the L2 penalty.

    Negatives are mined once per episode from the gallery; ``negatives=0``
    (or no gallery) skips the hinge entirely.
    """
    protos = build_prototypes(tape, ctx, pv, params, hyper, weights)
    if hyper.negatives > 0:
        if gallery is None:
            raise ConfigError("negatives requested but no gallery given")
        mined = mine_hard_negatives(ctx.s_bar, gallery, ctx.episode.class_ids, hyper.negatives)
        neg_protos = adapt_negatives(mined, gallery, protos.support_var, pv,
                                     hyper.negative_mode, params.activation, LN_EPS)
    else:
        mined = HardNegativeSet([], [])
        neg_protos = []

    pos_terms, neg_terms, cos_rows = [], [], []
    for i in range(ctx.query.shape[0]):
        lp, cos_row = loss_pos(tape, ctx.query[i], protos.z_plus,
                               int(ctx.query_slots[i]), hyper.tau_temp)
        pos_terms.append(lp)
        neg_terms.append(loss_neg(tape, ctx.query[i], neg_protos,
                                  hyper.tau_margin, hyper.hinge_mode))
        cos_rows.append(cos_row)
    pos_mean = ad.vmean(ad.stack(pos_terms))
    neg_mean = ad.vmean(ad.stack(neg_terms))

    leaves = {tape.param_names[i]: Var(tape, i) for i in tape.param_ids}
    reg = attn_regularizer(tape, leaves, params.regularized_names(hyper.reg_scope), hyper.gamma)

    loss = pos_mean + neg_mean + reg
    breakdown = LossBreakdown(float(loss.value), float(pos_mean.value),
                              float(neg_mean.value), float(reg.value))
    cosines = np.vstack(cos_rows)
    return TotalLossResult(loss, breakdown, cosines, np.argmax(cosines, axis=1),
                           mined, protos)


# ---------------------------------------------------------------------------
# scoring


def score_query(query: np.ndarray, t_adapted: np.ndarray, v_adapted: np.ndarray,
                lambda_infer: float, tau_calib: float) -> tuple[np.ndarray, int, np.ndarray]:
    """Modality-split score: lam*cos(q, v_c) + (1-lam)*cos(q, t_c).

    Returns (scores, predicted slot, calibrated probabilities). Ties go to
    the lowest slot.
    """
    def cos_rows(mat):
        norms = np.linalg.norm(mat, axis=1)
        qn = np.linalg.norm(query)
        if qn == 0.0 or np.any(norms == 0.0):
            raise DegenerateInputError("score_query: zero-norm argument")
        return (mat @ query) / (norms * qn)

    scores = lambda_infer * cos_rows(v_adapted) + (1.0 - lambda_infer) * cos_rows(t_adapted)
    shifted = (scores - np.max(scores)) / tau_calib
    e = np.exp(shifted)
    return scores, int(np.argmax(scores)), e / np.sum(e)


def zero_shot_scores(query: np.ndarray, t_base: np.ndarray, v_base: np.ndarray) -> np.ndarray:
    """Frozen baseline: cosine against t_c + v_c per class."""
    protos = t_base + v_base
    norms = np.linalg.norm(protos, axis=1)
    qn = np.linalg.norm(query)
    if qn == 0.0 or np.any(norms == 0.0):
        raise DegenerateInputError("zero_shot_scores: zero-norm argument")
    return (protos @ query) / (norms * qn)


def zero_shot_predict(ctx: EpisodeContext) -> np.ndarray:
    """Baseline predictions with unweighted support means."""
    v_base = np.vstack([
        ctx.support[rows].mean(axis=0) if rows.size else ctx.s_bar
        for rows in ctx.groups])
    preds = [int(np.argmax(zero_shot_scores(q, ctx.t_base, v_base))) for q in ctx.query]
    return np.asarray(preds, dtype=np.int64)


def predict_queries(ctx: EpisodeContext, params: AdapterParams, hyper: Hyperparams,
                    weights: np.ndarray, scorer: str = "fused") -> np.ndarray:
    """Inference-only predictions (value-mode tape, no gradients)."""
    tape = Tape(grad_enabled=False)
    pv = params.bind(tape)
    protos = build_prototypes(tape, ctx, pv, params, hyper, weights)
    if scorer == "fused":
        z = np.vstack([p.value for p in protos.z_plus])
        norms = np.linalg.norm(z, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInputError("predict_queries: zero-norm prototype")
        qn = np.linalg.norm(ctx.query, axis=1)
        cos = (ctx.query @ z.T) / np.outer(qn, norms)
        return np.argmax(cos, axis=1)
    if scorer == "modal":
        t_ad = np.vstack([p.value for p in protos.t_adapted])
        v_ad = np.vstack([p.value for p in protos.v_adapted])
        return np.asarray([score_query(q, t_ad, v_ad, hyper.lambda_infer, hyper.tau_calib)[1]
                           for q in ctx.query], dtype=np.int64)
    raise ConfigError(f"unknown scorer {scorer!r}")
