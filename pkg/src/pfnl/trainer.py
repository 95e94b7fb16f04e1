"""Episodic training, evaluation, and checkpointing.

One AdamW step per episode, modality-specific learning rates, decoupled
weight decay. The training stream is strictly serial; evaluation may fan
episodes out over worker processes, with results reassembled in episode
order so worker count never changes the output.

Checkpoint layout (little-endian, extension ``.ckpt``):

    magic "PFNL" | version u32 (=1)
    | config u32 length + canonical key=value text
    | embedding dim u32
    | parameter count u32, then per tensor:
    |     name u16+bytes | ndim u8 | dims u32* | float64 data
    | optimizer step u64 | same tensor blocks for first and second moments
    | rng block: master seed u64 | episode counter u64
    | CRC32 u32 over all preceding bytes
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bank import (STREAM_EVAL_EPISODE, STREAM_EVAL_NOISE, STREAM_TRAIN_EPISODE,
                   STREAM_TRAIN_NOISE, ClassGallery, EmbeddingBank, derive_seed,
                   inject_label_noise, sample_episode)
from .config import TrainConfig
from .errors import CheckpointFormatError, ConfigError, NumericalError
from .objective import Hyperparams, build_context, predict_queries, total_loss
from .autodiff import Tape, param_gradients
from .params import AdapterParams
from .reweight import compute_weights, uniform_weights

CKPT_MAGIC = b"PFNL"
CKPT_VERSION = 1
SWEEP_RATES = (0.0, 0.1, 0.25, 0.5)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: AdapterParams) -> "AdamWState":
        return cls(0,
                   {k: np.zeros_like(t) for k, t in params.tensors.items()},
                   {k: np.zeros_like(t) for k, t in params.tensors.items()})

    def copy(self) -> "AdamWState":
        return AdamWState(self.step,
                          {k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()})


def adamw_step(params: AdapterParams, grads: dict[str, np.ndarray], state: AdamWState,
               lr_by_group: dict[str, float], beta1: float, beta2: float,
               eps: float, weight_decay: float) -> None:
    """Bias-corrected AdamW with decoupled weight decay.

    Every tensor advances every step; a missing gradient counts as zero, so
    moments and the bias correction still move.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in params.names():
        theta = params.tensors[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        lr = lr_by_group[params.group_of(name)]
        params.tensors[name] = (theta - lr * weight_decay * theta
                                - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))


def lr_multiplier(schedule: str, episode: int, total: int) -> float:
    if schedule == "none":
        return 1.0
    if schedule == "cosine":
        return 0.5 * (1.0 + np.cos(np.pi * episode / max(total, 1)))
    raise ConfigError(f"unknown lr schedule {schedule!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class MetricsRow:
    episode: int
    loss_total: float
    loss_pos: float
    loss_neg: float
    reg: float
    query_acc: float


@dataclass
class Checkpoint:
    config: TrainConfig
    dim: int
    params: AdapterParams
    opt: AdamWState
    episode_counter: int


def _check_banks(visual: EmbeddingBank, textual: EmbeddingBank) -> None:
    if visual.modality != "visual" or textual.modality != "textual":
        raise ConfigError("train/evaluate need (visual, textual) banks in that order")
    if visual.dim != textual.dim:
        raise ConfigError(f"bank dims disagree: visual {visual.dim}, textual {textual.dim}")
    if visual.classes != textual.classes:
        raise ConfigError("visual and textual banks disagree on the class table")


def train(visual: EmbeddingBank, textual: EmbeddingBank, config: TrainConfig,
          resume: Checkpoint | None = None) -> tuple[Checkpoint, list[MetricsRow]]:
    """Run episodes ``[start, config.episodes)`` and return the final state.

    ``resume`` continues a checkpoint bit-identically: the per-episode seeds
    are pure functions of (config seed, episode index), so nothing beyond
    the episode counter is needed to pick up the stream.
    """
    config.validate()
    _check_banks(visual, textual)
    gallery = ClassGallery.from_bank(textual)
    if resume is not None:
        if resume.config.to_text() != config.to_text():
            raise ConfigError("resume checkpoint was written with a different config")
        params = resume.params.copy()
        opt = resume.opt.copy()
        start = resume.episode_counter
    else:
        params = AdapterParams.initialize(visual.dim, config.way, config.seed,
                                          config.styles, config.attn_layers,
                                          config.hidden, config.activation)
        opt = AdamWState.zeros_like(params)
        start = 0
    if start > config.episodes:
        raise ConfigError(f"checkpoint already at episode {start} > {config.episodes}")
    hyper = config.hyperparams()
    rows: list[MetricsRow] = []
    for i in range(start, config.episodes):
        episode = sample_episode(visual, textual, config.way, config.shot, config.query,
                                 derive_seed(config.seed, STREAM_TRAIN_EPISODE, i))
        if config.noise_rate > 0.0:
            episode = inject_label_noise(episode, config.noise_rate,
                                         derive_seed(config.seed, STREAM_TRAIN_NOISE, i))
        ctx = build_context(episode, textual)
        if config.reweight:
            weights = compute_weights(ctx, params, hyper, config.reweight_rounds).values
        else:
            weights = uniform_weights(ctx).values
        tape = Tape()
        pv = params.bind(tape)
        result = total_loss(tape, ctx, pv, params, hyper, weights, gallery)
        if not np.isfinite(result.breakdown.total):
            raise NumericalError(
                f"non-finite loss at episode {i}: {result.breakdown}")
        grads = param_gradients(tape, result.loss)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r} at episode {i}")
        mult = lr_multiplier(config.lr_schedule, i, config.episodes)
        adamw_step(params, grads, opt,
                   {"text": config.lr_text * mult, "vision": config.lr_vision * mult},
                   config.beta1, config.beta2, config.adam_eps, config.weight_decay)
        acc = float(np.mean(result.predictions == ctx.query_slots))
        b = result.breakdown
        rows.append(MetricsRow(i, b.total, b.pos, b.neg, b.reg, acc))
    return Checkpoint(config, visual.dim, params, opt, config.episodes), rows


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("episode,loss_total,loss_pos,loss_neg,reg,query_acc\n")
        for r in rows:
            fh.write(f"{r.episode},{r.loss_total!r},{r.loss_pos!r},"
                     f"{r.loss_neg!r},{r.reg!r},{r.query_acc!r}\n")


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    episodes: int
    acc_mean: float
    acc_se: float
    acc_ci95: float
    per_episode: np.ndarray


def _eval_one(visual: EmbeddingBank, textual: EmbeddingBank, params: AdapterParams,
              hyper: Hyperparams, way: int, shot: int, query: int, seed: int, index: int,
              noise_rate: float, reweight: bool, rounds: int, scorer: str) -> float:
    episode = sample_episode(visual, textual, way, shot, query,
                             derive_seed(seed, STREAM_EVAL_EPISODE, index))
    if noise_rate > 0.0:
        episode = inject_label_noise(episode, noise_rate,
                                     derive_seed(seed, STREAM_EVAL_NOISE, index))
    ctx = build_context(episode, textual)
    if reweight:
        weights = compute_weights(ctx, params, hyper, rounds).values
    else:
        weights = uniform_weights(ctx).values
    preds = predict_queries(ctx, params, hyper, weights, scorer)
    return float(np.mean(preds == ctx.query_slots))


def _eval_chunk(args) -> list[tuple[int, float]]:
    (visual, textual, params, hyper, way, shot, query, seed,
     noise_rate, reweight, rounds, scorer, indices) = args
    return [(i, _eval_one(visual, textual, params, hyper, way, shot, query, seed, i,
                          noise_rate, reweight, rounds, scorer))
            for i in indices]


def evaluate(visual: EmbeddingBank, textual: EmbeddingBank, params: AdapterParams,
             hyper: Hyperparams, *, episodes: int, way: int, shot: int, query: int,
             seed: int, noise_rate: float = 0.0, reweight: bool = True, rounds: int = 2,
             scorer: str = "fused", workers: int = 1) -> EvalResult:
    """Mean query accuracy over freshly sampled episodes.

    Deterministic in (banks, params, seed) regardless of ``workers``; the
    per-episode accuracy vector keeps episode order.
    """
    _check_banks(visual, textual)
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    if workers == 1 or episodes == 1:
        pairs = _eval_chunk((visual, textual, params, hyper, way, shot, query, seed,
                             noise_rate, reweight, rounds, scorer, range(episodes)))
    else:
        chunks = [(visual, textual, params, hyper, way, shot, query, seed,
                   noise_rate, reweight, rounds, scorer,
                   list(range(w, episodes, workers)))
                  for w in range(workers)]
        pairs = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_eval_chunk, chunks):
                pairs.extend(part)
    accs = np.empty(episodes)
    for i, acc in pairs:
        accs[i] = acc
    mean = float(np.mean(accs))
    se = float(np.std(accs, ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return EvalResult(episodes, mean, se, 1.96 * se, accs)


@dataclass
class SweepRow:
    rate: float
    reweight: bool
    acc_mean: float
    acc_ci95: float


def noise_sweep(visual: EmbeddingBank, textual: EmbeddingBank, params: AdapterParams,
                hyper: Hyperparams, *, episodes: int, way: int, shot: int, query: int,
                seed: int, rounds: int = 2, scorer: str = "fused",
                workers: int = 1) -> list[SweepRow]:
    """Paired on/off reweighting evaluation over the fixed corruption grid.

    The same evaluation seed drives both arms at every rate, so each pair
    sees identical episodes and identical flips.
    """
    rows = []
    for reweight in (False, True):
        for rate in SWEEP_RATES:
            r = evaluate(visual, textual, params, hyper, episodes=episodes, way=way,
                         shot=shot, query=query, seed=seed, noise_rate=rate,
                         reweight=reweight, rounds=rounds, scorer=scorer, workers=workers)
            rows.append(SweepRow(rate, reweight, r.acc_mean, r.acc_ci95))
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("rate,reweight,acc_mean,acc_ci95\n")
        for r in rows:
            fh.write(f"{r.rate!r},{'on' if r.reweight else 'off'},"
                     f"{r.acc_mean!r},{r.acc_ci95!r}\n")


# ---------------------------------------------------------------------------
# checkpoint serialization


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
    parts.extend(struct.pack("<I", n) for n in arr.shape)
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    cfg = ckpt.config.to_text().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
             struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", ckpt.dim)]
    names = ckpt.params.names()
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        parts.append(_pack_tensor(name, ckpt.params.tensors[name]))
    parts.append(struct.pack("<Q", ckpt.opt.step))
    for name in names:
        parts.append(_pack_tensor(name, ckpt.opt.m[name]))
    for name in names:
        parts.append(_pack_tensor(name, ckpt.opt.v[name]))
    parts.append(struct.pack("<QQ", ckpt.config.seed, ckpt.episode_counter))
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self, what: str) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H", f"{what} name length")
        name = self.take(nlen, f"{what} name").decode("utf-8")
        (ndim,) = self.unpack("<B", f"{what} rank")
        shape = tuple(self.unpack("<" + "I" * ndim, f"{what} dims")) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(8 * count, f"{what} data"), dtype="<f8")
        return name, data.reshape(shape).astype(np.float64)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise CheckpointFormatError("file too small to be a checkpoint", 0)
    crc_stored = struct.unpack("<I", data[-4:])[0]
    crc_actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise CheckpointFormatError(
            f"checksum mismatch: stored {crc_stored:#010x}, computed {crc_actual:#010x}",
            len(data) - 4)
    r = _Reader(data[:-4])
    if r.take(4, "magic") != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic, not a checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    (cfg_len,) = r.unpack("<I", "config length")
    config = TrainConfig.from_text(r.take(cfg_len, "config").decode("utf-8"))
    (dim,) = r.unpack("<I", "dim")
    (n_params,) = r.unpack("<I", "parameter count")
    tensors = dict(r.tensor(f"parameter {i}") for i in range(n_params))
    (step,) = r.unpack("<Q", "optimizer step")
    m = dict(r.tensor(f"first moment {i}") for i in range(n_params))
    v = dict(r.tensor(f"second moment {i}") for i in range(n_params))
    seed, counter = r.unpack("<QQ", "rng block")
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.pos} trailing bytes", r.pos)
    if seed != config.seed:
        raise CheckpointFormatError("rng block seed disagrees with config seed")
    params = AdapterParams(dim, config.way, config.styles, config.attn_layers,
                           config.hidden, config.activation, tensors)
    if set(tensors) != set(m) or set(tensors) != set(v):
        raise CheckpointFormatError("optimizer blocks do not match parameter names")
    return Checkpoint(config, dim, params, AdamWState(step, m, v), int(counter))
