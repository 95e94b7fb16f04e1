"""Shared numeric test utilities: central differences and episode fixtures."""

import numpy as np

from pfnl.autodiff import Tape
from pfnl.bank import ClassGallery, EmbeddingBank, Episode, derive_seed, sample_episode
from pfnl.objective import Hyperparams, build_context, total_loss
from pfnl.params import AdapterParams
from pfnl.reweight import compute_weights

FD_STEP = 1e-5


def rel_err(a, b, floor=1e-30) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def finite_difference(f, tensors: dict, step: float = FD_STEP) -> dict:
    """Central-difference gradient of scalar ``f(tensors)`` per tensor.

    Perturbs entries in place and restores them, so ``f`` must re-read the
    dict on every call.
    """
    grads = {}
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(tensors)
            flat[i] = orig - step
            fm = f(tensors)
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
        grads[name] = g.reshape(arr.shape)
    return grads


def episode_fixture(banks, way=3, shot=2, query=2, seed=0, index=0,
                    hyper=None, params_seed=0, reweight=True):
    """(ctx, params, hyper, weights, gallery) ready for total_loss."""
    visual, textual = banks
    gallery = ClassGallery.from_bank(textual)
    episode = sample_episode(visual, textual, way, shot, query,
                             derive_seed(seed, 1, index))
    ctx = build_context(episode, textual)
    params = AdapterParams.initialize(visual.dim, way, params_seed)
    hyper = hyper or Hyperparams()
    if reweight:
        weights = compute_weights(ctx, params, hyper, 2).values
    else:
        weights = np.ones(ctx.support.shape[0])
    return ctx, params, hyper, weights, gallery


def loss_value(ctx, params, hyper, weights, gallery) -> float:
    """total_loss forward value on a value-only tape."""
    tape = Tape(grad_enabled=False)
    pv = params.bind(tape)
    return total_loss(tape, ctx, pv, params, hyper, weights, gallery).breakdown.total


def hand_episode(support_rows, support_labels, texts, queries=None, query_labels=None):
    """Episode context from explicit raw vectors; labels index into texts."""
    support_rows = np.asarray(support_rows, float)
    d = support_rows.shape[1]
    way = len(texts)
    labels = np.asarray(support_labels, dtype=np.int64)
    shot = int(np.bincount(labels, minlength=way).max())
    if queries is None:
        queries = support_rows[:way]
        query_labels = labels[:way]
    queries = np.asarray(queries, float)
    textual = EmbeddingBank("textual", d, [f"class_{i:03d}" for i in range(way)],
                            np.arange(way), np.asarray(texts, float))
    episode = Episode(way, shot, max(len(queries) // way, 1),
                      np.arange(way, dtype=np.int64), support_rows, labels,
                      queries, np.asarray(query_labels, dtype=np.int64))
    return build_context(episode, textual)


def identity_params(dim, way, styles=2, layers=1) -> AdapterParams:
    """Adapter whose tensors commute with coordinate permutations.

    Zero styles/MLP (prompt contributes nothing), identity q/k/v with zero
    output projection, identity visual projection, unit LayerNorms, zero
    residuals. Useful for symmetry arguments in tests.
    """
    p = AdapterParams(dim, way, styles, layers)
    t = p.tensors
    t["style_bank"] = np.zeros((styles, dim))
    t["prompt_w1"] = np.zeros((p.hidden, dim))
    t["prompt_b1"] = np.zeros(p.hidden)
    t["prompt_w2"] = np.zeros((styles, p.hidden))
    t["prompt_b2"] = np.zeros(styles)
    for l in range(layers):
        t[f"attn{l}_wq"] = np.eye(dim)
        t[f"attn{l}_wk"] = np.eye(dim)
        t[f"attn{l}_wv"] = np.eye(dim)
        t[f"attn{l}_wo"] = np.zeros((dim, dim))
        t[f"attn{l}_ln_gain"] = np.ones(dim)
        t[f"attn{l}_ln_bias"] = np.zeros(dim)
    t["vis_proj"] = np.eye(dim)
    t["vis_ln_gain"] = np.ones(dim)
    t["vis_ln_bias"] = np.zeros(dim)
    for c in range(way):
        t[f"residual_{c}"] = np.zeros(dim)
    return p
