import sys
from pathlib import Path

import numpy as np
import pytest

from patchlab import (ImageTensor, LinearProbeClassifier, OccluderSprite,
                      save_image, save_linear_probe)

TESTS_DIR = Path(__file__).parent
TOY_PEER = TESTS_DIR / "helpers" / "toy_peer.py"


def peer_command(weights_path, *extra: str) -> str:
    argv = [sys.executable, str(TOY_PEER), str(weights_path), *extra]
    return "cmd:" + " ".join(argv)


def random_image(rng: np.random.Generator, h: int, w: int, c: int = 3) -> ImageTensor:
    return ImageTensor(rng.random((h, w, c), dtype=np.float32))


def circle_sprite(size: int, rgb, category: str = "disc",
                  name: str | None = None) -> OccluderSprite:
    yy, xx = np.mgrid[0:size, 0:size]
    center = (size - 1) / 2.0
    inside = (yy - center) ** 2 + (xx - center) ** 2 <= (size / 2.0 - 1.0) ** 2
    img = np.zeros((size, size, 4), dtype=np.float32)
    img[..., 0], img[..., 1], img[..., 2] = rgb
    img[..., 3] = inside.astype(np.float32)
    sprite_id = name or f"{category}/c{size}"
    return OccluderSprite(ImageTensor(img), category, sprite_id)


def square_sprite(size: int, value: float = 0.3, category: str = "square") -> OccluderSprite:
    img = np.zeros((size, size, 4), dtype=np.float32)
    img[..., :3] = value
    img[..., 3] = 1.0
    return OccluderSprite(ImageTensor(img), category, f"{category}/s{size}")


def half_field_probe(h: int, w: int, c: int = 3) -> LinearProbeClassifier:
    """Two categories: summed brightness of the left and the right half."""
    weight = np.zeros((2, h, w, c))
    weight[0, :, : w // 2, :] = 1.0
    weight[1, :, w // 2:, :] = 1.0
    return LinearProbeClassifier(weight, np.zeros(2))


def write_two_class_dataset(rng: np.random.Generator, image_dir: Path, prefix: str,
                            count: int, h: int = 28, w: int = 28) -> list[str]:
    """Images whose bright half encodes the class; returns label CSV rows."""
    image_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        label = i % 2
        data = rng.random((h, w, 3)).astype(np.float32) * 0.2
        if label == 0:
            data[:, : w // 2, :] += 0.7
        else:
            data[:, w // 2:, :] += 0.7
        save_image(ImageTensor(np.clip(data, 0.0, 1.0)), image_dir / f"{prefix}{i:03d}.png")
        rows.append(f"{prefix}{i:03d},{label}")
    return rows


@pytest.fixture
def probe_file(tmp_path):
    rng = np.random.default_rng(1905)
    weight = rng.normal(size=(3, 8, 8, 3)) * 0.1
    bias = np.array([0.1, -0.2, 0.05])
    path = tmp_path / "probe.npz"
    save_linear_probe(path, LinearProbeClassifier(weight, bias))
    return path
