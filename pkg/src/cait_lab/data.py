"""Datasets: a seeded synthetic task and directories of raw 8-bit images.

Manifest format (``labels.txt``)::

    # comment lines and blank lines are ignored
    img_000.raw 3
    sub/img_001.pgm 0

``.raw`` files are headerless 8-bit pixels of a square image, either gray
(H*W bytes) or interleaved RGB (3*H*W bytes). ``.pgm``/``.ppm`` files are
binary netpbm (P5/P6).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MANIFEST = "labels.txt"


class ManifestError(ValueError):
    """Malformed dataset manifest; the message carries the line number."""


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, H, W] float64 in [0, 1]
    labels: np.ndarray  # [n] int64
    split: str = "train"
    num_classes: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} do not match")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def patches(self, patch_size: int = 16) -> np.ndarray:
        from .cait import patchify

        return patchify(self.images, patch_size)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


def synthetic(seed: int = 0, n: int = 512, classes: int = 2, image_size: int = 64,
              channels: int = 1, square: int = 16, split: str = "train") -> Dataset:
    """Seeded square-in-region task.

    The image is cut into a g x g grid of cells with g = ceil(sqrt(classes));
    cell k (row-major) is the region of class k. Each image has background
    pixels drawn i.i.d. from U[0, 0.1) and one ``square`` x ``square`` patch of
    intensity 0.9 placed uniformly at random, pixel-aligned, fully inside the
    region of its label. Labels are drawn uniformly. Pixel values are quantized
    to multiples of 1/255 so the set survives an 8-bit round trip exactly.

    Summed intensity over region k exceeds that of every other region exactly
    when the label is k, so the task is linearly separable by construction.
    """
    g = math.ceil(math.sqrt(classes))
    cell = image_size // g
    if cell < square:
        raise ValueError(f"{classes} classes leave {cell}-pixel regions, smaller than the {square}-pixel square")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    imgs = rng.uniform(0.0, 0.1, size=(n, channels, image_size, image_size))
    for i, k in enumerate(labels):
        r0, c0 = (k // g) * cell, (k % g) * cell
        y = r0 + rng.integers(0, cell - square + 1)
        x = c0 + rng.integers(0, cell - square + 1)
        imgs[i, :, y:y + square, x:x + square] = 0.9
    imgs = np.round(imgs * 255.0) / 255.0
    return Dataset(imgs, labels, split, classes)


# ---------------------------------------------------------------- netpbm


def write_pnm(path, pixels: np.ndarray) -> None:
    """Binary PGM (2-D input) or PPM ([H, W, 3]); values in [0, 1] map to 0..255."""
    arr = np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def read_pnm(path) -> np.ndarray:
    """Binary PGM/PPM as uint8 [H, W] or [H, W, 3]."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: truncated netpbm header")
        tokens.append(m.group(2))
        pos = m.end()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: only 8-bit binary P5/P6 is supported")
    pos += 1  # single whitespace byte after maxval
    c = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * c, offset=pos)
    return data.reshape((h, w, 3) if c == 3 else (h, w))


# ---------------------------------------------------------------- manifest datasets


def parse_manifest(text: str) -> list[tuple[str, int]]:
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 2:
            raise ManifestError(f"line {lineno}: expected 'relative_path label', got {line!r}")
        try:
            label = int(parts[1])
        except ValueError:
            raise ManifestError(f"line {lineno}: label {parts[1]!r} is not an integer") from None
        if label < 0:
            raise ManifestError(f"line {lineno}: negative label {label}")
        entries.append((parts[0], label))
    return entries


def _load_image(path: Path, image_size: int) -> np.ndarray:
    if path.suffix.lower() in (".pgm", ".ppm"):
        px = read_pnm(path)
    else:
        buf = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        n = image_size * image_size
        if buf.size == n:
            px = buf.reshape(image_size, image_size)
        elif buf.size == 3 * n:
            px = buf.reshape(image_size, image_size, 3)
        else:
            raise ValueError(f"{path}: {buf.size} bytes is not a {image_size}x{image_size} gray or RGB image")
    if px.ndim == 2:
        px = px[None]
    else:
        px = px.transpose(2, 0, 1)
    return px.astype(np.float64) / 255.0


def load_dataset(path, format: str = "auto", image_size: int = 64, split: str = "train",
                 num_classes: int = 0) -> Dataset:
    """Load a manifest directory or a synthetic spec.

    ``path`` is a directory holding ``labels.txt``, a manifest file, or a
    string ``synthetic[:key=value,...]`` (keys: seed, n, classes, size,
    channels) when ``format`` is ``"auto"`` or ``"synthetic"``.
    """
    spec = str(path)
    if format == "synthetic" or (format == "auto" and spec.startswith("synthetic")):
        kw = {}
        if ":" in spec:
            for item in spec.split(":", 1)[1].split(","):
                if item:
                    k, _, v = item.partition("=")
                    kw[{"size": "image_size"}.get(k.strip(), k.strip())] = int(v)
        return synthetic(split=split, **kw)
    p = Path(spec)
    manifest = p / MANIFEST if p.is_dir() else p
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest at {manifest}")
    entries = parse_manifest(manifest.read_text())
    if not entries:
        raise ManifestError(f"{manifest}: no samples listed")
    root = manifest.parent
    imgs = [_load_image(root / rel, image_size) for rel, _ in entries]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ValueError(f"images in {manifest} have mixed shapes {sorted(shapes)}")
    labels = np.array([lab for _, lab in entries])
    return Dataset(np.stack(imgs), labels, split, max(num_classes, int(labels.max()) + 1))


def save_dataset(ds: Dataset, directory) -> Path:
    """Write ``.raw`` images plus ``labels.txt``; inverse of ``load_dataset``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"# {len(ds)} samples, {ds.num_classes} classes, {ds.image_size}px, {ds.channels} channel(s)"]
    width = max(3, len(str(len(ds) - 1)))
    for i in range(len(ds)):
        name = f"img_{i:0{width}d}.raw"
        px = np.round(ds.images[i] * 255.0).astype(np.uint8)
        px = px[0] if ds.channels == 1 else px.transpose(1, 2, 0)
        (d / name).write_bytes(np.ascontiguousarray(px).tobytes())
        lines.append(f"{name} {int(ds.labels[i])}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Index batches of a fresh permutation; the last batch may be short."""
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


__all__ = [
    "Dataset",
    "ManifestError",
    "iter_batches",
    "load_dataset",
    "parse_manifest",
    "read_pnm",
    "save_dataset",
    "synthetic",
    "write_pnm",
]
