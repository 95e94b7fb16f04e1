"""Trainable adapter state and its per-episode tape binding.

All tensors live in one name-keyed dict so the optimizer and checkpoint
code stay generic. Initialization follows the identity-start scheme: the
attention output projection starts at zero, which gates the cross-modal
stack off, so a fresh model with fusion weight 0 reproduces the frozen
zero-shot classifier exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from .autodiff import Tape, Var
from .bank import STREAM_INIT
from .errors import ConfigError

INIT_STD = 0.02


@dataclass
class AttnLayerVars:
    wq: Var
    wk: Var
    wv: Var
    wo: Var
    ln_gain: Var
    ln_bias: Var


@dataclass
class AdapterVars:
    """Tape-bound view of the parameters for one episode."""

    style_bank: Var
    prompt_w1: Var
    prompt_b1: Var
    prompt_w2: Var
    prompt_b2: Var
    attn: list[AttnLayerVars]
    vis_proj: Var
    vis_ln_gain: Var
    vis_ln_bias: Var
    residual: list[Var]  # one (dim,) token per episode class slot


class AdapterParams:
    """Persistent parameter store: style bank, prompt MLP, cross-modal
    attention stack, visual projection/norm, and per-slot residual tokens."""

    def __init__(self, dim: int, way: int, styles: int = 8, layers: int = 1,
                 hidden: int = 0, activation: str = "gelu",
                 tensors: dict[str, np.ndarray] | None = None):
        if styles < 1 or layers < 1 or dim < 2 or way < 2:
            raise ConfigError("adapter sizes must be positive (dim/way >= 2)")
        if activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.dim = dim
        self.way = way
        self.styles = styles
        self.layers = layers
        self.hidden = hidden if hidden > 0 else dim
        self.activation = activation
        self.tensors = tensors if tensors is not None else {}

    @classmethod
    def initialize(cls, dim: int, way: int, seed: int, styles: int = 8, layers: int = 1,
                   hidden: int = 0, activation: str = "gelu") -> "AdapterParams":
        p = cls(dim, way, styles, layers, hidden, activation)
        rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_INIT]))
        h, d, s = p.hidden, dim, styles
        t = p.tensors
        t["style_bank"] = rng.normal(0.0, INIT_STD, size=(s, d))
        # truncated at +/-2 sigma, zero biases
        t["prompt_w1"] = truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=(h, d), random_state=rng)
        t["prompt_b1"] = np.zeros(h)
        t["prompt_w2"] = truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=(s, h), random_state=rng)
        t["prompt_b2"] = np.zeros(s)
        for l in range(layers):
            t[f"attn{l}_wq"] = np.eye(d) + rng.normal(0.0, INIT_STD, size=(d, d))
            t[f"attn{l}_wk"] = np.eye(d) + rng.normal(0.0, INIT_STD, size=(d, d))
            t[f"attn{l}_wv"] = np.eye(d) + rng.normal(0.0, INIT_STD, size=(d, d))
            t[f"attn{l}_wo"] = np.zeros((d, d))
            t[f"attn{l}_ln_gain"] = np.ones(d)
            t[f"attn{l}_ln_bias"] = np.zeros(d)
        t["vis_proj"] = np.eye(d) + rng.normal(0.0, INIT_STD, size=(d, d))
        t["vis_ln_gain"] = np.ones(d)
        t["vis_ln_bias"] = np.zeros(d)
        for c in range(way):
            t[f"residual_{c}"] = np.zeros(d)
        for k in t:
            t[k] = np.asarray(t[k], dtype=np.float64)
        return p

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def group_of(self, name: str) -> str:
        """Modality group for per-group optimizer settings."""
        if name.startswith(("vis_", "residual_")):
            return "vision"
        return "text"

    def regularized_names(self, scope: str = "full") -> list[str]:
        """Parameters inside the attention-stack L2 penalty."""
        proj = [f"attn{l}_{w}" for l in range(self.layers) for w in ("wq", "wk", "wv", "wo")]
        if scope == "attn":
            return proj
        if scope == "full":
            return proj + ["style_bank", "prompt_w1", "prompt_b1", "prompt_w2", "prompt_b2"]
        raise ConfigError(f"unknown regularizer scope {scope!r}")

    def bind(self, tape: Tape) -> AdapterVars:
        """Register every tensor as a named tape parameter.

        A tape carries one episode; binding twice means a stale tape is
        being reused, which is a hard error.
        """
        if getattr(tape, "adapter_bound", False):
            raise ConfigError("tape already bound to adapter parameters; "
                              "build a fresh tape per episode")
        tape.adapter_bound = True
        t = self.tensors
        leaf = {name: tape.param(t[name], name) for name in self.names()}
        attn = [AttnLayerVars(leaf[f"attn{l}_wq"], leaf[f"attn{l}_wk"], leaf[f"attn{l}_wv"],
                              leaf[f"attn{l}_wo"], leaf[f"attn{l}_ln_gain"], leaf[f"attn{l}_ln_bias"])
                for l in range(self.layers)]
        return AdapterVars(
            style_bank=leaf["style_bank"],
            prompt_w1=leaf["prompt_w1"], prompt_b1=leaf["prompt_b1"],
            prompt_w2=leaf["prompt_w2"], prompt_b2=leaf["prompt_b2"],
            attn=attn,
            vis_proj=leaf["vis_proj"],
            vis_ln_gain=leaf["vis_ln_gain"], vis_ln_bias=leaf["vis_ln_bias"],
            residual=[leaf[f"residual_{c}"] for c in range(self.way)])

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.dim, self.way, self.styles, self.layers, self.hidden,
                             self.activation, {k: v.copy() for k, v in self.tensors.items()})
