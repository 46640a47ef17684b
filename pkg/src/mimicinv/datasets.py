"""Hermetic toy datasets plus the big-endian IDX reader.

The glyph set is the workhorse: four procedurally drawn 14x14 shapes with
position/intensity jitter, used to train the toy prior and the classifier
without any files on disk.  Real IDX image/label pairs can be swapped in
wherever glyphs are used.
"""

from __future__ import annotations

import struct

import numpy as np

from .priors import as_rng

GLYPH_SIZE = 14
GLYPH_CLASSES = 4

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxError(Exception):
    """IDX file is malformed or the pair is inconsistent."""


def glyph_dataset(count: int, rng, size: int = GLYPH_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Images [count, size, size, 1] in [-1, 1] and labels in [0, 4).

    Classes: 0 filled box, 1 two corner squares, 2 plus sign, 3 diagonal
    cross.  Shapes are blob-like on purpose: a desk-scale deconvolution
    generator can actually cover all four modes.
    """
    rng = as_rng(rng)
    labels = rng.integers(0, GLYPH_CLASSES, size=count)
    images = np.full((count, size, size, 1), -1.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = size / 14.0  # geometry defined on the 14-pixel grid
    for i, label in enumerate(labels):
        cy = size / 2 - 0.5 + rng.uniform(-1.0, 1.0)
        cx = size / 2 - 0.5 + rng.uniform(-1.0, 1.0)
        fg = rng.uniform(0.05, 0.35)  # low contrast: classifier margins stay small
        if label == 0:
            half = s * rng.uniform(2.8, 3.4)
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        elif label == 1:
            off = s * rng.uniform(3.2, 3.8)
            half = s * rng.uniform(1.6, 2.0)
            mask = ((np.abs(yy - (cy - off)) <= half) & (np.abs(xx - (cx - off)) <= half)) | \
                   ((np.abs(yy - (cy + off)) <= half) & (np.abs(xx - (cx + off)) <= half))
        elif label == 2:
            thick = s * rng.uniform(1.0, 1.3)
            arm = s * rng.uniform(4.5, 5.5)
            mask = ((np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= arm)) | \
                   ((np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= arm))
        else:
            thick = s * rng.uniform(1.0, 1.3)
            arm = s * rng.uniform(4.5, 5.5)
            d1, d2 = (yy - cy) - (xx - cx), (yy - cy) + (xx - cx)
            near = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= arm
            mask = ((np.abs(d1) <= thick) | (np.abs(d2) <= thick)) & near
        images[i, mask, 0] = fg
        images[i, :, :, 0] += rng.normal(0.0, 0.02, size=(size, size))
    return np.clip(images, -1.0, 1.0), labels.astype(np.int64)


def eight_gaussians(count: int, rng, radius: float = 0.8,
                    sigma: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """2-D mixture of 8 Gaussians on a circle; returns (points, centers)."""
    rng = as_rng(rng)
    angles = 2.0 * np.pi * np.arange(8) / 8.0
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    which = rng.integers(0, 8, size=count)
    points = centers[which] + rng.normal(0.0, sigma, size=(count, 2))
    return np.clip(points, -1.0, 1.0), centers


def mode_coverage(points: np.ndarray, centers: np.ndarray, sigma: float = 0.02,
                  k: float = 3.0) -> int:
    """Number of centers with at least one point within k*sigma."""
    hit = 0
    for c in centers:
        if np.any(np.linalg.norm(points - c, axis=1) <= k * sigma):
            hit += 1
    return hit


def two_blob_dataset(count: int, rng, separation: float = 0.8,
                     sigma: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Linearly separable 2-class point set in the plane."""
    rng = as_rng(rng)
    labels = rng.integers(0, 2, size=count)
    centers = np.array([[-separation / 2, 0.0], [separation / 2, 0.0]])
    points = centers[labels] + rng.normal(0.0, sigma, size=(count, 2))
    return points, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# IDX ingestion


def _read_be32(blob: bytes, pos: int, what: str) -> int:
    if pos + 4 > len(blob):
        raise IdxError(f"truncated IDX file while reading {what}")
    return struct.unpack(">I", blob[pos:pos + 4])[0]


def read_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an IDX image/label pair into ([N,H,W,1] float in [-1,1], labels)."""
    with open(images_path, "rb") as f:
        blob = f.read()
    if _read_be32(blob, 0, "image magic") != IDX_IMAGE_MAGIC:
        raise IdxError(f"bad image magic in {images_path}")
    count = _read_be32(blob, 4, "image count")
    rows = _read_be32(blob, 8, "row count")
    cols = _read_be32(blob, 12, "column count")
    need = 16 + count * rows * cols
    if len(blob) < need:
        raise IdxError(f"truncated image payload: want {need} bytes, have {len(blob)}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, rows, cols, 1).astype(np.float64) / 127.5 - 1.0

    with open(labels_path, "rb") as f:
        blob = f.read()
    if _read_be32(blob, 0, "label magic") != IDX_LABEL_MAGIC:
        raise IdxError(f"bad label magic in {labels_path}")
    n_labels = _read_be32(blob, 4, "label count")
    if n_labels != count:
        raise IdxError(f"count mismatch: {count} images vs {n_labels} labels")
    if len(blob) < 8 + n_labels:
        raise IdxError("truncated label payload")
    labels = np.frombuffer(blob, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    return images, labels


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of read_idx for fixtures: [-1,1] floats quantized back to u8."""
    n, rows, cols = images.shape[0], images.shape[1], images.shape[2]
    pixels = np.clip(np.round((images.reshape(n, rows, cols) + 1.0) * 127.5), 0, 255)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())
