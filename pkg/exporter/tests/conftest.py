"""Dataset builders: tiny color-clustered PNG folders, one class per color."""

import zlib

import numpy as np
import pytest
from PIL import Image

BASE_COLORS = ((200, 60, 60), (60, 80, 200), (60, 180, 90), (220, 200, 40))


def make_dataset(root, counts: dict, size=(24, 18), seed=0):
    """Class subdirectories of noisy solid-color images.

    Content is a pure function of (class name, image index, seed), so two
    roots with the same classes and counts are byte-identical no matter the
    creation order.
    """
    for cid, name in enumerate(sorted(counts)):
        write_class(root, name, counts[name], BASE_COLORS[cid % len(BASE_COLORS)],
                    size, seed)
    return root


def write_class(root, name: str, count: int, base, size=(24, 18), seed=0):
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    class_dir = root / name
    class_dir.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        arr = np.clip(rng.normal(base, 30.0, size=(size[1], size[0], 3)),
                      0, 255).astype("uint8")
        Image.fromarray(arr).save(class_dir / f"img_{i}.png")
    return class_dir


@pytest.fixture()
def sanity_root(tmp_path):
    # the 2-class, 10-image round-trip dataset
    return make_dataset(tmp_path / "pets", {"cat": 5, "dog": 5})
