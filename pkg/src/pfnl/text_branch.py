"""Textual prototype adaptation.

A lightweight MLP predicts mixing logits over a bank of learned style
vectors from the class text embedding; the mixed style is added to the
embedding, and a stack of cross-attention layers then grounds the result
in the episode's support features. With a zero output projection the
attention stack is a no-op, so a fresh model leaves text untouched up to
the residual LayerNorm.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .params import AdapterVars, AttnLayerVars


def predict_prompt(t_c: Var, pv: AdapterVars, activation: str = "gelu") -> tuple[Var, Var]:
    """Mix style vectors by MLP-predicted softmax weights.

    Returns (prompt, weights); the prompt is a convex combination of the
    style rows, so it lies in their hull by construction.
    """
    logits = ad.mlp2(t_c, pv.prompt_w1, pv.prompt_b1, pv.prompt_w2, pv.prompt_b2, activation)
    alpha = ad.softmax(logits)
    prompt = ad.matvec(ad.transpose(pv.style_bank), alpha)
    return prompt, alpha


def enhance_text(t_c: Var, prompt: Var) -> Var:
    return t_c + prompt


def attention_context(t: Var, support: Var, layer: AttnLayerVars) -> tuple[Var, Var]:
    """Single-head cross-attention read: text queries attend over support rows.

    Returns (context, weights). Scores are scaled by 1/sqrt(dim); weights
    are a softmax so they sum to one.
    """
    d = t.value.shape[0]
    q = ad.matvec(layer.wq, t)
    keys = ad.matmat(support, ad.transpose(layer.wk))    # row j = wk @ support_j
    vals = ad.matmat(support, ad.transpose(layer.wv))
    scores = ad.scale(ad.matvec(keys, q), 1.0 / np.sqrt(d))
    weights = ad.softmax(scores)
    context = ad.matvec(ad.transpose(vals), weights)
    return context, weights


def cross_modal_coordinate(t_prime: Var, support: Var, layers: list[AttnLayerVars],
                           eps: float = 1e-5) -> Var:
    """Residual attention stack: t <- LayerNorm(t + wo @ context) per layer."""
    t = t_prime
    for layer in layers:
        context, _ = attention_context(t, support, layer)
        t = ad.layer_norm(t + ad.matvec(layer.wo, context), layer.ln_gain, layer.ln_bias, eps)
    return t


def adapt_class_text(t_c: Var, support: Var, pv: AdapterVars,
                     activation: str = "gelu", eps: float = 1e-5) -> Var:
    """Full textual branch for one class: prompt, enhance, coordinate."""
    prompt, _ = predict_prompt(t_c, pv, activation)
    return cross_modal_coordinate(enhance_text(t_c, prompt), support, pv.attn, eps)
