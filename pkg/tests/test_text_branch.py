"""Prompt prediction, style enhancement, and cross-modal attention."""

import math

import numpy as np
import pytest

import pfnl.autodiff as ad
from pfnl.autodiff import Tape, param_gradients
from pfnl.params import AdapterParams, AdapterVars, AttnLayerVars
from pfnl.text_branch import (adapt_class_text, attention_context, cross_modal_coordinate,
                              enhance_text, predict_prompt)

from helpers import finite_difference, rel_err


def bind_prompt_vars(tape, style, w1, b1, w2, b2):
    return AdapterVars(
        style_bank=tape.param(np.asarray(style, float), "style_bank"),
        prompt_w1=tape.param(np.asarray(w1, float), "prompt_w1"),
        prompt_b1=tape.param(np.asarray(b1, float), "prompt_b1"),
        prompt_w2=tape.param(np.asarray(w2, float), "prompt_w2"),
        prompt_b2=tape.param(np.asarray(b2, float), "prompt_b2"),
        attn=[], vis_proj=None, vis_ln_gain=None, vis_ln_bias=None, residual=[])


def identity_layer(tape, d):
    eye = np.eye(d)
    return AttnLayerVars(tape.const(eye), tape.const(eye), tape.const(eye),
                         tape.const(eye), tape.const(np.ones(d)), tape.const(np.zeros(d)))


# ---------------------------------------------------------------------------
# prompt prediction


def test_prompt_forced_mixture():
    # zero MLP except output bias (ln 1, ln 3): alpha = (0.25, 0.75)
    tape = Tape()
    pv = bind_prompt_vars(tape, style=[[1.0, 0.0], [0.0, 1.0]],
                          w1=np.zeros((2, 2)), b1=np.zeros(2),
                          w2=np.zeros((2, 2)), b2=[0.0, math.log(3.0)])
    prompt, alpha = predict_prompt(tape.const([0.3, 0.4]), pv)
    np.testing.assert_allclose(alpha.value, [0.25, 0.75], atol=1e-12)
    np.testing.assert_allclose(prompt.value, [0.25, 0.75], atol=1e-12)


def test_prompt_single_style_is_that_row():
    tape = Tape()
    row = np.array([0.7, -0.2, 1.1])
    pv = bind_prompt_vars(tape, style=[row], w1=np.zeros((2, 3)), b1=np.zeros(2),
                          w2=np.zeros((1, 2)), b2=np.zeros(1))
    prompt, alpha = predict_prompt(tape.const([1.0, 0.0, 0.0]), pv)
    np.testing.assert_array_equal(alpha.value, [1.0])
    np.testing.assert_allclose(prompt.value, row, atol=1e-15)


def test_prompt_identical_styles_collapse(rng):
    row = rng.normal(size=4)
    tape = Tape()
    pv = bind_prompt_vars(tape, style=np.tile(row, (3, 1)),
                          w1=rng.normal(size=(4, 4)), b1=rng.normal(size=4),
                          w2=rng.normal(size=(3, 4)), b2=rng.normal(size=3))
    prompt, _ = predict_prompt(tape.const(rng.normal(size=4)), pv)
    np.testing.assert_allclose(prompt.value, row, atol=1e-12)


def test_prompt_weights_simplex_and_hull(rng):
    # alpha on the simplex; prompt reconstructs from the styles with those
    # coefficients (least-squares residual ~ 0 for S <= d + 1)
    for _ in range(10):
        style = rng.normal(size=(3, 5))
        tape = Tape()
        pv = bind_prompt_vars(tape, style, rng.normal(size=(5, 5)), rng.normal(size=5),
                              rng.normal(size=(3, 5)), rng.normal(size=3))
        prompt, alpha = predict_prompt(tape.const(rng.normal(size=5)), pv)
        a = alpha.value
        assert np.all(a >= 0) and abs(a.sum() - 1.0) < 1e-12
        coef, residual, *_ = np.linalg.lstsq(style.T, prompt.value, rcond=None)
        assert float(np.linalg.norm(style.T @ coef - prompt.value)) < 1e-8
        np.testing.assert_allclose(coef, a, atol=1e-8)


def test_enhance_is_plain_residual(rng):
    tape = Tape()
    t = tape.const(rng.normal(size=4))
    p = tape.const(rng.normal(size=4))
    np.testing.assert_array_equal(enhance_text(t, p).value, t.value + p.value)


# ---------------------------------------------------------------------------
# cross-modal attention


def test_attention_single_row_identity():
    tape = Tape()
    row = np.array([0.2, -1.0, 0.4])
    ctxv, weights = attention_context(tape.const([1.0, 0.0, 0.0]),
                                      tape.const(row[None, :]), identity_layer(tape, 3))
    np.testing.assert_array_equal(weights.value, [1.0])
    np.testing.assert_allclose(ctxv.value, row, atol=1e-15)


def test_attention_equal_rows_collapse(rng):
    row = rng.normal(size=4)
    tape = Tape()
    ctxv, weights = attention_context(tape.const(rng.normal(size=4)),
                                      tape.const(np.tile(row, (5, 1))),
                                      identity_layer(tape, 4))
    np.testing.assert_allclose(weights.value, np.full(5, 0.2), atol=1e-12)
    np.testing.assert_allclose(ctxv.value, row, atol=1e-12)


def test_attention_two_row_softmax_oracle():
    # scores (1/sqrt(2), 0); weights from an independent exp computation
    tape = Tape()
    support = np.array([[1.0, 0.0], [0.0, 1.0]])
    ctxv, weights = attention_context(tape.const([1.0, 0.0]), tape.const(support),
                                      identity_layer(tape, 2))
    e = math.exp(1.0 / math.sqrt(2.0))
    w0 = e / (e + 1.0)
    np.testing.assert_allclose(weights.value, [w0, 1.0 - w0], atol=1e-12)
    np.testing.assert_allclose(ctxv.value, [w0, 1.0 - w0], atol=1e-12)
    assert abs(w0 - 0.66975) < 1e-4


def test_attention_weights_sum_to_one(rng):
    for _ in range(10):
        tape = Tape()
        _, weights = attention_context(tape.const(rng.normal(size=6)),
                                       tape.const(rng.normal(size=(7, 6))),
                                       identity_layer(tape, 6))
        assert abs(float(np.sum(weights.value)) - 1.0) < 1e-12


def test_zero_output_projection_ignores_support(rng):
    # with wo = 0 the support matrix cannot leak into the output at all
    d = 5
    t_prime = rng.normal(size=d)
    gain, bias = rng.normal(size=d), rng.normal(size=d)

    def run(support):
        tape = Tape()
        layer = AttnLayerVars(tape.const(np.eye(d)), tape.const(rng.normal(size=(d, d))),
                              tape.const(np.eye(d)), tape.const(np.zeros((d, d))),
                              tape.const(gain), tape.const(bias))
        return cross_modal_coordinate(tape.const(t_prime), tape.const(support), [layer]).value

    a = run(rng.normal(size=(4, d)))
    b = run(rng.normal(size=(4, d)))
    np.testing.assert_array_equal(a, b)


def test_multi_layer_stack_composes(rng):
    # two layers applied sequentially equal one layer applied to the other's output
    d = 4
    support = rng.normal(size=(3, d))
    t0 = rng.normal(size=d)
    mats = [{k: rng.normal(size=(d, d)) * 0.3 + np.eye(d) for k in "qkvo"} for _ in range(2)]

    def layer_vars(tape, m):
        return AttnLayerVars(tape.const(m["q"]), tape.const(m["k"]), tape.const(m["v"]),
                             tape.const(m["o"]), tape.const(np.ones(d)), tape.const(np.zeros(d)))

    tape = Tape()
    sup = tape.const(support)
    full = cross_modal_coordinate(tape.const(t0), sup,
                                  [layer_vars(tape, m) for m in mats]).value
    tape2 = Tape()
    sup2 = tape2.const(support)
    step1 = cross_modal_coordinate(tape2.const(t0), sup2, [layer_vars(tape2, mats[0])]).value
    tape3 = Tape()
    step2 = cross_modal_coordinate(tape3.const(step1), tape3.const(support),
                                   [layer_vars(tape3, mats[1])]).value
    np.testing.assert_allclose(full, step2, atol=1e-12)


# ---------------------------------------------------------------------------
# full branch


def straight_line_text_branch(t_c, support, params):
    """Independent numpy mirror of the branch for one class."""
    t = params.tensors

    def act(x):
        from scipy.special import erf
        return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))

    h = act(t["prompt_w1"] @ t_c + t["prompt_b1"])
    logits = t["prompt_w2"] @ h + t["prompt_b2"]
    e = np.exp(logits - logits.max())
    alpha = e / e.sum()
    x = t_c + t["style_bank"].T @ alpha
    d = params.dim
    for l in range(params.layers):
        q = t[f"attn{l}_wq"] @ x
        keys = support @ t[f"attn{l}_wk"].T
        vals = support @ t[f"attn{l}_wv"].T
        s = keys @ q / np.sqrt(d)
        w = np.exp(s - s.max())
        w /= w.sum()
        ctxv = vals.T @ w
        y = x + t[f"attn{l}_wo"] @ ctxv
        mu, var = y.mean(), ((y - y.mean()) ** 2).mean()
        x = t[f"attn{l}_ln_gain"] * (y - mu) / np.sqrt(var + 1e-5) + t[f"attn{l}_ln_bias"]
    return x


def test_adapt_class_text_matches_straight_line(rng):
    params = AdapterParams.initialize(6, 3, seed=5, styles=4, layers=2)
    # move wo off zero so the attention path actually contributes
    params.tensors["attn0_wo"] += rng.normal(size=(6, 6)) * 0.3
    params.tensors["attn1_wo"] += rng.normal(size=(6, 6)) * 0.3
    t_c = rng.normal(size=6)
    support = rng.normal(size=(5, 6))
    tape = Tape()
    pv = params.bind(tape)
    out = adapt_class_text(tape.const(t_c), tape.const(support), pv).value
    oracle = straight_line_text_branch(t_c, support, params)
    assert rel_err(out, oracle) < 1e-12


def test_text_branch_gradcheck(rng):
    params = AdapterParams.initialize(4, 2, seed=3, styles=3)
    params.tensors["attn0_wo"] += rng.normal(size=(4, 4)) * 0.2
    t_c = rng.normal(size=4)
    support = rng.normal(size=(4, 4))
    probe = rng.normal(size=4)

    def f(tensors):
        p = AdapterParams(4, 2, 3, 1, 0, "gelu", tensors)
        tape = Tape(grad_enabled=False)
        pv = p.bind(tape)
        out = adapt_class_text(tape.const(t_c), tape.const(support), pv)
        return float(np.dot(out.value, probe))

    tape = Tape()
    pv = params.bind(tape)
    out = adapt_class_text(tape.const(t_c), tape.const(support), pv)
    loss = ad.dot(out, tape.const(probe))
    grads = param_gradients(tape, loss)
    fd = finite_difference(f, params.tensors)
    text_names = [n for n in params.names() if params.group_of(n) == "text"]
    full = np.concatenate([grads[n].ravel() for n in text_names])
    full_fd = np.concatenate([fd[n].ravel() for n in text_names])
    assert rel_err(full, full_fd) < 1e-5
