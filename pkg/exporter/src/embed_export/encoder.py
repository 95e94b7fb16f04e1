"""Frozen encoders behind one identifier string.

``local:<dim>`` is a deterministic offline encoder that needs no weights or
network: images are downscaled to a 16x16 RGB patch and passed through a
fixed random projection; texts are hashed character trigrams with signed
buckets. It produces stable, class-separable features for pipelines and
tests, not semantic ones: alignment between a class name and its images
only emerges with a real pretrained backend.

``clip:<model-id>`` loads a pretrained two-tower model via transformers;
torch and transformers are imported lazily so the default path has no heavy
dependencies.
"""

from __future__ import annotations

import zlib

import numpy as np
from PIL import Image

from .errors import SpecError

PATCH = 16  # local encoder input resolution, 16x16 RGB


class LocalEncoder:
    def __init__(self, dim: int):
        if dim < 2:
            raise SpecError(f"local encoder dim must be >= 2, got {dim}")
        self.dim = dim
        self.name = f"local:{dim}"
        rng = np.random.default_rng(zlib.crc32(self.name.encode()))
        flat = PATCH * PATCH * 3
        # fixed projection, variance-preserving for [0,1] pixel inputs
        self._proj = rng.normal(0.0, 1.0 / np.sqrt(flat), size=(dim, flat))

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        pixels = np.stack([
            np.asarray(img.convert("RGB").resize((PATCH, PATCH), Image.BILINEAR),
                       dtype=np.float64).reshape(-1) / 255.0
            for img in images])
        return (pixels @ self._proj.T).astype(np.float32)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            marked = f"\x02{text}\x03"
            grams = [marked[i:i + 3] for i in range(len(marked) - 2)]
            for gram in grams:
                h = zlib.crc32(gram.encode("utf-8"))
                sign = 1.0 if (h >> 31) & 1 == 0 else -1.0
                out[row, h % self.dim] += sign
            out[row] /= np.sqrt(max(1, len(grams)))
        return out.astype(np.float32)


class ClipEncoder:
    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise SpecError(
                "clip encoder needs the optional dependencies: "
                "pip install 'embed-export[clip]'") from exc
        self._torch = torch
        self._model = CLIPModel.from_pretrained(model_id).eval()
        self._processor = CLIPProcessor.from_pretrained(model_id)
        self.dim = int(self._model.config.projection_dim)
        self.name = f"clip:{model_id}"

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        inputs = self._processor(images=[img.convert("RGB") for img in images],
                                 return_tensors="pt")
        with self._torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return feats.cpu().numpy().astype(np.float32)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        inputs = self._processor(text=texts, return_tensors="pt", padding=True)
        with self._torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return feats.cpu().numpy().astype(np.float32)


def make_encoder(identifier: str):
    kind, _, arg = identifier.partition(":")
    if kind == "local" and arg:
        try:
            return LocalEncoder(int(arg))
        except ValueError:
            raise SpecError(f"local encoder wants an integer dim, got {arg!r}") from None
    if kind == "clip" and arg:
        return ClipEncoder(arg)
    raise SpecError(f"unknown encoder {identifier!r}; use local:<dim> or clip:<model-id>")
