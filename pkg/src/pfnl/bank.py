"""Embedding banks: binary persistence, synthetic data, episode sampling.

Bank file layout (little-endian, extension ``.ebnk``):

    magic "EBNK" | version u32 (=1) | modality u8 (0 visual, 1 textual)
    | dim u32 | class count u32 | record count u32
    | class table: per class, name length u16 + UTF-8 bytes
    | records: per record, class index u32 + dim float32 values
    | CRC32 u32 over all preceding bytes

Vectors are stored at 32-bit and widened to float64 in memory. Banks hold
raw vectors; normalization happens where features enter the engine, so a
bank round-trips byte-for-byte through save/load.

A plain-text CSV form (``class_name,v0,v1,...`` per row) is accepted for
hand-written fixtures.
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BankDataError, BankFormatError, DegenerateInputError, SamplingError
from .autodiff import l2_normalize

MAGIC = b"EBNK"
VERSION = 1
MODALITY_CODES = {"visual": 0, "textual": 1}
MODALITY_NAMES = {0: "visual", 1: "textual"}

# seed-derivation stream ids, shared with the trainer
STREAM_INIT = 0
STREAM_TRAIN_EPISODE = 1
STREAM_TRAIN_NOISE = 2
STREAM_EVAL_EPISODE = 3
STREAM_EVAL_NOISE = 4


def derive_seed(*parts: int) -> int:
    """Stable integer seed from a tuple of non-negative ints."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class EmbeddingBank:
    """A frozen set of embeddings grouped by class."""

    modality: str
    dim: int
    classes: list[str]
    class_index: np.ndarray  # (n_records,) int64
    vectors: np.ndarray      # (n_records, dim) float64
    source: str = ""

    def __post_init__(self):
        if self.modality not in MODALITY_CODES:
            raise BankDataError(f"unknown modality {self.modality!r}")
        self.class_index = np.asarray(self.class_index, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dim:
            raise BankDataError(f"vectors shape {self.vectors.shape} does not match dim {self.dim}")
        if self.class_index.shape != (self.vectors.shape[0],):
            raise BankDataError("class_index length does not match record count")
        n_classes = len(self.classes)
        if len(set(self.classes)) != n_classes:
            raise BankDataError("duplicate class names")
        if self.n_records and (self.class_index.min() < 0 or self.class_index.max() >= n_classes):
            raise BankDataError("record class index out of range")
        counts = np.bincount(self.class_index, minlength=n_classes)
        if np.any(counts == 0):
            missing = self.classes[int(np.argmin(counts))]
            raise BankDataError(f"class {missing!r} has no records")
        if self.modality == "textual" and np.any(counts != 1):
            raise BankDataError("textual bank must hold exactly one record per class")
        bad = ~np.isfinite(self.vectors).all(axis=1)
        if bad.any():
            raise BankDataError(f"non-finite vector at record {int(np.argmax(bad))}")

    @property
    def n_records(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def records_of(self, class_id: int) -> np.ndarray:
        return np.nonzero(self.class_index == class_id)[0]

    def text_vector(self, class_id: int) -> np.ndarray:
        if self.modality != "textual":
            raise BankDataError("text_vector on a non-textual bank")
        return self.vectors[self.records_of(class_id)[0]]


def save_bank(bank: EmbeddingBank, path) -> None:
    parts = [MAGIC,
             struct.pack("<IBIII", VERSION, MODALITY_CODES[bank.modality], bank.dim,
                         bank.n_classes, bank.n_records)]
    for name in bank.classes:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise BankDataError(f"class name too long: {name[:32]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    f32 = bank.vectors.astype("<f4")
    for i in range(bank.n_records):
        parts.append(struct.pack("<I", int(bank.class_index[i])))
        parts.append(f32[i].tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise BankFormatError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_bank(path, modality: str = "visual") -> EmbeddingBank:
    """Load a bank file; ``.csv`` paths go through the fixture reader.

    ``modality`` is only consulted for CSV input, which carries no header.
    """
    if str(path).endswith(".csv"):
        return load_bank_csv(path, modality=modality)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise BankFormatError("bad magic, not a bank file", 0)
    min_size = 4 + struct.calcsize("<IBIII") + 4
    if len(data) < min_size:
        raise BankFormatError("file too small to hold a bank header", len(data))
    # checksum first: nothing after the header is trusted until it passes
    (crc_stored,) = struct.unpack("<I", data[-4:])
    crc_actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise BankFormatError(
            f"checksum mismatch: stored {crc_stored:#010x}, computed {crc_actual:#010x}",
            len(data) - 4)
    cur = _Cursor(data[:-4])
    cur.take(4, "magic")
    version, mod_code, dim, n_classes, n_records = cur.unpack("<IBIII", "header")
    if version != VERSION:
        raise BankFormatError(f"unsupported version {version}", 4)
    if mod_code not in MODALITY_NAMES:
        raise BankFormatError(f"unknown modality code {mod_code}", 8)
    classes = []
    for _ in range(n_classes):
        (nlen,) = cur.unpack("<H", "class name length")
        raw = cur.take(nlen, "class name")
        try:
            classes.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise BankFormatError(f"undecodable class name: {exc}", cur.pos - nlen) from None
    remaining = len(cur.data) - cur.pos
    expected = n_records * (4 + 4 * dim)
    if remaining != expected:
        raise BankFormatError(
            f"record section holds {remaining} bytes, expected {expected}", cur.pos)
    records = np.frombuffer(cur.data, dtype=np.dtype([("ci", "<u4"), ("v", "<f4", (dim,))]),
                            count=n_records, offset=cur.pos)
    class_index = records["ci"].astype(np.int64)
    vectors = records["v"].astype(np.float64)
    out_of_range = class_index >= n_classes
    if out_of_range.any():
        i = int(np.argmax(out_of_range))
        raise BankFormatError(f"record {i} class index {class_index[i]} out of range",
                              cur.pos + i * (4 + 4 * dim))
    bad = ~np.isfinite(vectors).all(axis=1)
    if bad.any():
        raise BankDataError(f"non-finite vector at record {int(np.argmax(bad))}")
    return EmbeddingBank(MODALITY_NAMES[mod_code], dim, classes, class_index, vectors,
                         source=str(path))


def load_bank_csv(path, modality: str = "visual") -> EmbeddingBank:
    classes: list[str] = []
    by_name: dict[str, int] = {}
    index, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            name = row[0].strip()
            try:
                vec = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise BankFormatError(f"line {lineno}: {exc}") from None
            if not vec:
                raise BankFormatError(f"line {lineno}: record has no values")
            if rows and len(vec) != len(rows[0]):
                raise BankFormatError(f"line {lineno}: expected {len(rows[0])} values, got {len(vec)}")
            if name not in by_name:
                by_name[name] = len(classes)
                classes.append(name)
            index.append(by_name[name])
            rows.append(vec)
    if not rows:
        raise BankFormatError("empty CSV bank")
    return EmbeddingBank(modality, len(rows[0]), classes, np.array(index),
                         np.array(rows, dtype=np.float64), source=str(path))


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(n_classes: int, per_class: int, dim: int, separation: float,
                       seed: int, text_noise: float = 1.0) -> tuple[EmbeddingBank, EmbeddingBank]:
    """Unit-sphere class means with Gaussian spread scaled by 1/separation.

    Returns (visual, textual). Visual records are ``normalize(mean + eps/sep)``;
    the textual record per class is the mean perturbed at ``text_noise/sep``.
    ``separation=inf`` gives exact means, ``separation=0`` pure noise.
    """
    if n_classes < 2:
        raise SamplingError(f"need at least 2 classes, got {n_classes}")
    if per_class < 1 or dim < 2 or separation < 0 or text_noise < 0:
        raise SamplingError("invalid synthetic bank request")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    means = l2_normalize(rng.normal(size=(n_classes, dim)), "class mean")

    def spread(base: np.ndarray, scale: float) -> np.ndarray:
        noise = rng.normal(size=base.shape)
        if separation == 0.0:
            return l2_normalize(noise, "record")
        if math.isinf(separation) or scale == 0.0:
            return base.copy()
        return l2_normalize(base + noise * (scale / separation), "record")

    vis_vecs = np.vstack([spread(np.tile(means[c], (per_class, 1)), 1.0)
                          for c in range(n_classes)])
    vis_index = np.repeat(np.arange(n_classes), per_class)
    txt_vecs = spread(means, text_noise)
    classes = [f"class_{c:03d}" for c in range(n_classes)]
    visual = EmbeddingBank("visual", dim, classes, vis_index, vis_vecs, source="synthetic")
    textual = EmbeddingBank("textual", dim, classes, np.arange(n_classes), txt_vecs,
                            source="synthetic")
    return visual, textual


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task drawn from a visual bank.

    Labels are bank class ids. Support rows are class-major (K consecutive
    rows per sampled class); ``noise_mask`` marks support labels flipped by
    :func:`inject_label_noise`. Query labels are always clean.
    """

    way: int
    shot: int
    n_query: int
    class_ids: np.ndarray      # (way,)
    support_x: np.ndarray      # (way*shot, dim) raw bank vectors
    support_y: np.ndarray      # (way*shot,) bank class ids, possibly noisy
    query_x: np.ndarray        # (way*n_query, dim)
    query_y: np.ndarray        # (way*n_query,)
    noise_mask: np.ndarray = field(default=None)  # (way*shot,) bool

    def __post_init__(self):
        if self.noise_mask is None:
            object.__setattr__(self, "noise_mask",
                               np.zeros(self.support_x.shape[0], dtype=bool))


def sample_episode(visual: EmbeddingBank, textual: EmbeddingBank,
                   way: int, shot: int, n_query: int, seed: int) -> Episode:
    """Sample classes without replacement, then disjoint support/query records."""
    if visual.modality != "visual" or textual.modality != "textual":
        raise SamplingError("sample_episode needs (visual, textual) banks in that order")
    if visual.classes != textual.classes:
        raise SamplingError("visual and textual banks disagree on the class table")
    if way < 2:
        raise SamplingError(f"way must be >= 2, got {way}")
    if way > visual.n_classes:
        raise SamplingError(f"way {way} exceeds bank classes {visual.n_classes}")
    if shot < 1 or n_query < 1:
        raise SamplingError("shot and query counts must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    class_ids = rng.choice(visual.n_classes, size=way, replace=False)
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for cid in class_ids:
        recs = visual.records_of(int(cid))
        if recs.size < shot + n_query:
            raise SamplingError(
                f"class {visual.classes[int(cid)]!r} has {recs.size} records, "
                f"needs {shot + n_query}")
        pick = rng.choice(recs, size=shot + n_query, replace=False)
        sup_x.append(visual.vectors[pick[:shot]])
        sup_y.append(np.full(shot, cid, dtype=np.int64))
        qry_x.append(visual.vectors[pick[shot:]])
        qry_y.append(np.full(n_query, cid, dtype=np.int64))
    return Episode(way, shot, n_query, np.asarray(class_ids, dtype=np.int64),
                   np.vstack(sup_x), np.concatenate(sup_y),
                   np.vstack(qry_x), np.concatenate(qry_y))


def inject_label_noise(episode: Episode, rate: float, seed: int) -> Episode:
    """Flip ``round_half_up(rate * way * shot)`` support labels.

    Each flipped label is reassigned uniformly over the other ``way - 1``
    episode classes (never its clean class). Queries are untouched.
    """
    if not 0.0 <= rate <= 1.0:
        raise SamplingError(f"noise rate must be in [0, 1], got {rate}")
    n = episode.support_y.shape[0]
    count = int(math.floor(rate * n + 0.5))
    if count == 0:
        return replace(episode, support_y=episode.support_y.copy(),
                       noise_mask=np.zeros(n, dtype=bool))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    flip = rng.choice(n, size=count, replace=False)
    new_y = episode.support_y.copy()
    mask = np.zeros(n, dtype=bool)
    for i in flip:
        others = episode.class_ids[episode.class_ids != episode.support_y[i]]
        new_y[i] = rng.choice(others)
        mask[i] = True
    return replace(episode, support_y=new_y, noise_mask=mask)


# ---------------------------------------------------------------------------
# gallery


@dataclass(frozen=True)
class ClassGallery:
    """L2-normalized text embedding per class, for hard-negative mining."""

    classes: list[str]
    vectors: np.ndarray  # (n_classes, dim), unit rows

    @classmethod
    def from_bank(cls, textual: EmbeddingBank) -> "ClassGallery":
        if textual.modality != "textual":
            raise BankDataError("gallery requires a textual bank")
        rows = np.vstack([textual.text_vector(c) for c in range(textual.n_classes)])
        try:
            rows = l2_normalize(rows, "gallery row")
        except DegenerateInputError as exc:
            raise BankDataError(str(exc)) from None
        return cls(list(textual.classes), rows)

    @property
    def n_classes(self) -> int:
        return len(self.classes)
