"""Deterministic synthetic digit corpus in canonical IDX layout.

For offline environments without the real handwritten-digit files: renders
font glyphs 0-9 with random affine jitter, stroke-intensity variation and
pixel noise, then writes standard IDX image/label files that the normal
ingestion path parses. Not a substitute for the real corpus when reproducing
published numbers; a stand-in for desk-scale runs and CI.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .data import IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, MNIST_FILES

GLYPH_SIZE = 64  # base render resolution, downsampled to 28x28
_FONT_NAMES = ("DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSerif.ttf", "DejaVuSansMono.ttf")


def _find_fonts() -> list[str]:
    import matplotlib

    ttf_dir = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    found = [str(ttf_dir / name) for name in _FONT_NAMES if (ttf_dir / name).exists()]
    if not found:
        raise FileNotFoundError(f"no usable TTF fonts under {ttf_dir}")
    return found


def _render_bases() -> np.ndarray:
    """Pre-render each digit x font at GLYPH_SIZE, centered. Returns [10, F, S, S]."""
    fonts = _find_fonts()
    bases = np.zeros((10, len(fonts), GLYPH_SIZE, GLYPH_SIZE), dtype=np.float32)
    for fi, font_path in enumerate(fonts):
        font = ImageFont.truetype(font_path, int(GLYPH_SIZE * 0.78))
        for d in range(10):
            img = Image.new("L", (GLYPH_SIZE, GLYPH_SIZE), 0)
            draw = ImageDraw.Draw(img)
            left, top, right, bottom = draw.textbbox((0, 0), str(d), font=font)
            x = (GLYPH_SIZE - (right - left)) / 2 - left
            y = (GLYPH_SIZE - (bottom - top)) / 2 - top
            draw.text((x, y), str(d), fill=255, font=font)
            bases[d, fi] = np.asarray(img, dtype=np.float32) / 255.0
    return bases


def _jitter(base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random affine + intensity + noise; returns a 28x28 float image in [0,1]."""
    angle = rng.uniform(-12.0, 12.0)
    shear = rng.uniform(-0.18, 0.18)
    scale = rng.uniform(0.78, 1.08)
    tx = rng.uniform(-4.5, 4.5)
    ty = rng.uniform(-4.5, 4.5)

    theta = np.deg2rad(angle)
    cos, sin = np.cos(theta) / scale, np.sin(theta) / scale
    c = GLYPH_SIZE / 2
    # inverse map for PIL: output (x,y) -> input coords
    a, b = cos + shear * sin, sin - shear * cos
    d_, e_ = -sin, cos
    coeffs = (
        a, b, c - a * (c + tx) - b * (c + ty),
        d_, e_, c - d_ * (c + tx) - e_ * (c + ty),
    )
    img = Image.fromarray((base * 255).astype(np.uint8))
    img = img.transform((GLYPH_SIZE, GLYPH_SIZE), Image.AFFINE, coeffs, resample=Image.BILINEAR)
    img = img.resize((28, 28), Image.LANCZOS)

    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr *= rng.uniform(0.72, 1.0)
    arr += rng.normal(0.0, 0.05, arr.shape).astype(np.float32)
    return np.clip(arr, 0.0, 1.0)


def build_digit_arrays(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render n jittered digit images. Returns (uint8 images [n,28,28], uint8 labels [n])."""
    rng = np.random.default_rng(seed)
    bases = _render_bases()
    n_fonts = bases.shape[1]
    labels = np.tile(np.arange(10, dtype=np.uint8), n // 10 + 1)[:n]
    rng.shuffle(labels)
    images = np.empty((n, 28, 28), dtype=np.uint8)
    for i in range(n):
        base = bases[labels[i], rng.integers(n_fonts)]
        images[i] = np.round(_jitter(base, rng) * 255).astype(np.uint8)
    return images, labels


def write_idx_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def ensure_digits_corpus(root: Path, train_size: int = 60000, test_size: int = 10000,
                         seed: int = 0) -> Path:
    """Create (or reuse) a synthetic corpus at root in the MNIST file layout."""
    root = Path(root)
    marker = root / "corpus.json"
    params = {"train_size": train_size, "test_size": test_size, "seed": seed, "kind": "synthetic-digits"}
    if marker.exists() and json.loads(marker.read_text()) == params:
        return root
    root.mkdir(parents=True, exist_ok=True)
    train_images, train_labels = build_digit_arrays(train_size, seed)
    test_images, test_labels = build_digit_arrays(test_size, seed + 1)
    write_idx_images(root / MNIST_FILES["train"][0], train_images)
    write_idx_labels(root / MNIST_FILES["train"][1], train_labels)
    write_idx_images(root / MNIST_FILES["test"][0], test_images)
    write_idx_labels(root / MNIST_FILES["test"][1], test_labels)
    marker.write_text(json.dumps(params, indent=2))
    return root
