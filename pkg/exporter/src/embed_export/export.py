"""Dataset-to-bank export: class-per-subdirectory image folders in, EBNK out.

Class identity comes from subdirectory names in sorted order, so the visual
and textual banks always share one class table and on-disk creation order
is irrelevant. Features are written unnormalized; normalization is the
consuming engine's policy.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import __version__
from .ebnk import write_bank
from .encoder import make_encoder
from .errors import DatasetError, SpecError

DEFAULT_TEMPLATE = "a photo of a {}"


@dataclass(frozen=True)
class ExportSpec:
    root: str
    out_prefix: str
    template: str = DEFAULT_TEMPLATE
    encoder: str = "local:64"
    batch: int = 32

    def validate(self) -> "ExportSpec":
        if self.template.count("{}") != 1:
            raise SpecError(
                f"template must contain exactly one {{}} placeholder: {self.template!r}")
        if self.batch < 1:
            raise SpecError(f"batch size must be >= 1, got {self.batch}")
        return self


@dataclass
class ExportReport:
    path: str
    crc: int
    classes: list[str]
    records: int
    skipped: list[dict] = field(default_factory=list)
    vectors: np.ndarray | None = None      # what was written, f32
    class_index: np.ndarray | None = None


def discover_classes(root) -> list[tuple[str, Path]]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root is not a directory: {root}")
    dirs = sorted((p.name, p) for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise DatasetError(f"no class subdirectories under {root}")
    return dirs


def _decode_class_images(name: str, class_dir: Path, skipped: list[dict]):
    images = []
    for path in sorted(p for p in class_dir.iterdir() if p.is_file()):
        try:
            with Image.open(path) as img:
                img.load()
                images.append(img.copy())
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            warnings.warn(f"skipping undecodable image {path}: {exc}")
            skipped.append({"path": str(path), "reason": str(exc)})
    if not images:
        raise DatasetError(f"class {name!r} has no decodable images in {class_dir}")
    return images


def export_visual(spec: ExportSpec, enc=None) -> ExportReport:
    """One record per decodable image; class index follows sorted directory order."""
    spec.validate()
    enc = enc or make_encoder(spec.encoder)
    skipped: list[dict] = []
    names, feats, index = [], [], []
    for cid, (name, class_dir) in enumerate(discover_classes(spec.root)):
        names.append(name)
        images = _decode_class_images(name, class_dir, skipped)
        for start in range(0, len(images), spec.batch):
            feats.append(enc.encode_images(images[start:start + spec.batch]))
        index.extend([cid] * len(images))
    vectors = np.vstack(feats).astype(np.float32)
    class_index = np.asarray(index)
    path = f"{spec.out_prefix}.visual.ebnk"
    crc = write_bank(path, "visual", names, class_index, vectors)
    return ExportReport(path, crc, names, len(index), skipped, vectors, class_index)


def export_textual(spec: ExportSpec, enc=None) -> ExportReport:
    """One record per class from the filled template, same class ordering."""
    spec.validate()
    enc = enc or make_encoder(spec.encoder)
    names = [name for name, _ in discover_classes(spec.root)]
    texts = [spec.template.replace("{}", name) for name in names]
    vectors = enc.encode_texts(texts)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        bad = names[int(np.argmin(norms))]
        raise DatasetError(f"encoder produced a zero text feature for class {bad!r}")
    path = f"{spec.out_prefix}.textual.ebnk"
    index = np.arange(len(names))
    crc = write_bank(path, "textual", names, index, vectors)
    return ExportReport(path, crc, names, len(names), [], vectors, index)


def alignment_fraction(visual: np.ndarray, visual_index: np.ndarray,
                       textual: np.ndarray) -> float:
    """Fraction of classes whose text feature is closest to its own image mean.

    A sanity signal for semantic encoders; the local encoder is documented
    to score near chance here, so this is reported, never asserted.
    """
    n_classes = textual.shape[0]
    means = np.vstack([visual[visual_index == c].mean(axis=0)
                       for c in range(n_classes)])
    means = means / np.linalg.norm(means, axis=1, keepdims=True)
    texts = textual / np.linalg.norm(textual, axis=1, keepdims=True)
    cos = texts @ means.T
    return float(np.mean(np.argmax(cos, axis=1) == np.arange(n_classes)))


def export_pair(spec: ExportSpec) -> dict:
    """Export both banks plus a manifest; returns the manifest dict."""
    started = time.monotonic()
    enc = make_encoder(spec.validate().encoder)
    visual = export_visual(spec, enc)
    textual = export_textual(spec, enc)
    # identical discovery, but the parity invariant is cheap to prove here
    if visual.classes != textual.classes:
        raise DatasetError("class tables diverged between modalities")
    align = alignment_fraction(visual.vectors, visual.class_index, textual.vectors)

    manifest = {
        "tool": "embed_export",
        "version": __version__,
        "command": "export",
        "config": {
            "root": str(spec.root),
            "template": spec.template,
            "encoder": enc.name,
            "encoder_dim": enc.dim,
            "batch": spec.batch,
        },
        "classes": visual.classes,
        "records": visual.records,
        "skipped": visual.skipped,
        "alignment_majority_fraction": align,
        "outputs": {visual.path: f"{visual.crc:#010x}",
                    textual.path: f"{textual.crc:#010x}"},
        "wall_clock_s": round(time.monotonic() - started, 3),
    }
    with open(f"{spec.out_prefix}.manifest.json", "w", newline="") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
