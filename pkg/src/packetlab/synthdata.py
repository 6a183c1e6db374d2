"""Local stand-in datasets written in the real on-disk formats.

This environment has no copy of MNIST or CIFAR-10 and no way to download
them, so these generators produce desk-scale look-alikes: rendered digit
glyphs saved as genuine IDX files, and class-structured color textures saved
as genuine CIFAR-10 binary batches.  The loaders in `data` treat these files
exactly as they would the real datasets.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

__all__ = ["write_idx_images", "write_idx_labels",
           "make_digits_dataset", "make_cifar_batches"]


def write_idx_images(path, images):
    """images: uint8 (N, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    n, r, c = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, r, c))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.tobytes())


def _fonts():
    import matplotlib
    ttf = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    names = ["DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSerif.ttf",
             "DejaVuSansMono.ttf"]
    return [ttf / n for n in names if (ttf / n).exists()]


def _render_digit(digit, font_path, pt, dx, dy, angle):
    img = Image.new("L", (56, 56), 0)
    draw = ImageDraw.Draw(img)
    font = ImageFont.truetype(str(font_path), pt)
    bbox = draw.textbbox((0, 0), str(digit), font=font)
    w, h = bbox[2] - bbox[0], bbox[3] - bbox[1]
    draw.text((28 - w / 2 - bbox[0] + dx, 28 - h / 2 - bbox[1] + dy),
              str(digit), fill=255, font=font)
    img = img.rotate(angle, resample=Image.BILINEAR, center=(28, 28))
    img = img.resize((28, 28), resample=Image.LANCZOS)
    return np.asarray(img, dtype=np.uint8)


def make_digits_dataset(outdir, n_train=12000, n_test=2000, seed=0):
    """Write train/test digit IDX pairs under outdir; returns outdir."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    fonts = _fonts()
    if not fonts:
        raise RuntimeError("no bundled TTF fonts found")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2718)))
    specs = [("train-images-idx3-ubyte", "train-labels-idx1-ubyte", n_train),
             ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", n_test)]
    for img_name, lbl_name, count in specs:
        images = np.empty((count, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=count).astype(np.uint8)
        for k in range(count):
            images[k] = _render_digit(
                int(labels[k]),
                fonts[int(rng.integers(len(fonts)))],
                pt=int(rng.integers(30, 44)),
                dx=float(rng.uniform(-5, 5)),
                dy=float(rng.uniform(-5, 5)),
                angle=float(rng.uniform(-14, 14)),
            )
        write_idx_images(outdir / img_name, images)
        write_idx_labels(outdir / lbl_name, labels)
    return outdir


def _texture(label, rng):
    """32x32 RGB texture whose orientation/color statistics encode the class."""
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    theta = label * np.pi / 10 + rng.normal(0, 0.08)
    freq = 3.0 + (label % 5) + rng.normal(0, 0.2)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq *
                              (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    tint = np.array([0.35 + 0.6 * ((label * 37) % 10) / 9.0,
                     0.35 + 0.6 * ((label * 53 + 3) % 10) / 9.0,
                     0.35 + 0.6 * ((label * 71 + 6) % 10) / 9.0])
    img = wave[None, :, :] * tint[:, None, None]
    img = img + rng.normal(0, 0.06, size=img.shape)
    return np.clip(img, 0, 1)


def make_cifar_batches(outdir, n=6000, seed=0, per_file=2000):
    """Write CIFAR-10 format .bin batches of synthetic textures."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 31415)))
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    written = 0
    batch = 0
    while written < n:
        count = min(per_file, n - written)
        rec = np.empty((count, 3073), dtype=np.uint8)
        for k in range(count):
            lab = labels[written + k]
            rec[k, 0] = lab
            img = (_texture(int(lab), rng) * 255).astype(np.uint8)
            rec[k, 1:] = img.reshape(-1)
        with open(outdir / f"data_batch_{batch + 1}.bin", "wb") as f:
            f.write(rec.tobytes())
        written += count
        batch += 1
    return outdir
