"""Procedurally rendered 28x28 glyph corpora in MNIST layout.

Stand-in image data when no real MNIST-class files are at hand: digits
serve as the in-distribution classes; letters (same strokes, near OOD) and
geometric shapes (far OOD) are disjoint corpora. Output is written as IDX
files, so downstream code goes through the same reader as real data.
"""
from __future__ import annotations

import os
from functools import lru_cache

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from .data import write_idx
from .errors import ConfigError

DIGITS = "0123456789"
# letters that do not read as digits
LETTERS = "ACEFHKMNPRTUVWXYacdefhkmnprtuvwxy"
SIZE = 28


@lru_cache(maxsize=None)
def _font(size: int):
    return ImageFont.load_default(size=size)


def render_glyph(char: str, rng: np.random.Generator) -> np.ndarray:
    canvas = 2 * SIZE
    img = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(img)
    font = _font(int(rng.integers(17, 25)))
    stroke = int(rng.integers(0, 2))
    draw.text((canvas / 2, canvas / 2), char, fill=255, font=font, anchor="mm", stroke_width=stroke,
              stroke_fill=255)
    angle = float(rng.uniform(-15, 15))
    shear = float(rng.uniform(-0.25, 0.25))
    img = img.transform((canvas, canvas), Image.AFFINE,
                        (1, shear, -shear * canvas / 2, 0, 1, 0), resample=Image.BILINEAR)
    img = img.rotate(angle, resample=Image.BILINEAR)
    dx, dy = rng.integers(-3, 4, size=2)
    left = SIZE // 2 + int(dx)
    top = SIZE // 2 + int(dy)
    img = img.crop((left, top, left + SIZE, top + SIZE))
    img = img.filter(ImageFilter.GaussianBlur(float(rng.uniform(0.0, 0.8))))
    return np.asarray(img, dtype=np.uint8)


SHAPES = ("ellipse", "rectangle", "triangle", "polygon", "lines")


def render_shape(kind: str, rng: np.random.Generator) -> np.ndarray:
    img = Image.new("L", (SIZE, SIZE), 0)
    draw = ImageDraw.Draw(img)
    filled = bool(rng.integers(0, 2))
    width = int(rng.integers(1, 4))
    if kind in ("ellipse", "rectangle"):
        x0, y0 = rng.integers(2, 12, size=2)
        x1, y1 = rng.integers(16, 26, size=2)
        box = [int(x0), int(y0), int(x1), int(y1)]
        shape = draw.ellipse if kind == "ellipse" else draw.rectangle
        shape(box, fill=255 if filled else None, outline=255, width=width)
    elif kind in ("triangle", "polygon"):
        k = 3 if kind == "triangle" else int(rng.integers(5, 8))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        radius = rng.uniform(7, 12, size=k)
        cx, cy = rng.uniform(11, 17, size=2)
        pts = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a, r in zip(angles, radius)]
        draw.polygon(pts, fill=255 if filled else None, outline=255, width=width)
    else:
        for _ in range(int(rng.integers(2, 5))):
            draw.line([tuple(float(v) for v in rng.uniform(2, 26, size=2)) for _ in range(2)],
                      fill=255, width=width + 1)
    img = img.filter(ImageFilter.GaussianBlur(float(rng.uniform(0.0, 0.8))))
    return np.asarray(img, dtype=np.uint8)


def render_shapes(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 1:
        raise ConfigError("render_shapes needs n >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(SHAPES)
    rng.shuffle(labels)
    images = np.stack([render_shape(SHAPES[y], rng) for y in labels])
    return images, labels.astype(np.uint8)


def render_corpus(chars: str, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` images cycling through ``chars``; labels index into ``chars``."""
    if n < 1 or not chars:
        raise ConfigError("render_corpus needs n >= 1 and a non-empty alphabet")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(chars)
    rng.shuffle(labels)
    images = np.stack([render_glyph(chars[y], rng) for y in labels])
    return images, labels.astype(np.uint8)


CORPORA = {"digits": DIGITS, "letters": LETTERS, "shapes": None}


def write_corpus(prefix: str, kind: str, n: int, seed: int) -> tuple[str, str]:
    """Render ``kind`` and write ``<prefix>-images-idx3-ubyte`` / ``<prefix>-labels-idx1-ubyte``."""
    if kind not in CORPORA:
        raise ConfigError(f"unknown corpus {kind!r}; choose from {sorted(CORPORA)}")
    if kind == "shapes":
        images, labels = render_shapes(n, seed)
    else:
        images, labels = render_corpus(CORPORA[kind], n, seed)
    directory = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(directory, exist_ok=True)
    img_path = f"{prefix}-images-idx3-ubyte"
    lbl_path = f"{prefix}-labels-idx1-ubyte"
    write_idx(img_path, images)
    write_idx(lbl_path, labels)
    return img_path, lbl_path
