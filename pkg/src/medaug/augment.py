"""Restricted augmentation set for radiographs: flip, small rotation, mild crop.

All geometric steps are folded into one inverse coordinate map and sampled
once with bilinear interpolation; pixels outside the source frame read as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from medaug.cohort import ImageRecord


@dataclass(frozen=True)
class AugmentationSpec:
    horizontal_flip_prob: float = 0.5
    rotation_range_degrees: tuple[float, float] = (-10.0, 10.0)
    crop_scale_range: tuple[float, float] | None = None
    output_size: tuple[int, int] | None = None  # None keeps the input size

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ValueError("horizontal_flip_prob must be in [0, 1]")
        lo, hi = self.rotation_range_degrees
        if not -180.0 <= lo <= hi <= 180.0:
            raise ValueError("rotation range must satisfy -180 <= lo <= hi <= 180")
        if self.crop_scale_range is not None:
            lo, hi = self.crop_scale_range
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError("crop scale range must satisfy 0 < lo <= hi <= 1")


@dataclass(frozen=True)
class AugParams:
    flip: bool
    angle: float
    crop: tuple[float, float, float, float]  # top, left, height, width in source pixels


@dataclass(frozen=True)
class View:
    pixels: np.ndarray
    source_id: int
    params: AugParams


def sample_rng(seed: int, epoch: int, image_id: int, stream: int = 0) -> np.random.Generator:
    """Counter-style RNG keyed by (seed, epoch, image_id, stream)."""
    return np.random.default_rng([int(seed), int(epoch), int(image_id), int(stream)])


def draw_params(spec: AugmentationSpec, shape: tuple[int, int], rng: np.random.Generator) -> AugParams:
    h, w = shape
    flip = bool(rng.random() < spec.horizontal_flip_prob)
    lo, hi = spec.rotation_range_degrees
    angle = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    if spec.crop_scale_range is None:
        crop = (0.0, 0.0, float(h), float(w))
    else:
        lo, hi = spec.crop_scale_range
        scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        side = np.sqrt(scale)  # aspect ratio fixed at 1
        ch, cw = side * h, side * w
        top = float(rng.uniform(0.0, h - ch)) if h > ch else 0.0
        left = float(rng.uniform(0.0, w - cw)) if w > cw else 0.0
        crop = (top, left, float(ch), float(cw))
    return AugParams(flip, angle, crop)


def bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates with zero padding."""
    h, w = img.shape
    padded = np.pad(img, ((1, 2), (1, 2)))
    # beyond one pixel outside the frame every neighbour is padding
    ys = np.clip(ys, -1.0, float(h))
    xs = np.clip(xs, -1.0, float(w))
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    dy = ys - y0
    dx = xs - x0
    iy = y0.astype(np.int64) + 1
    ix = x0.astype(np.int64) + 1
    return (
        padded[iy, ix] * ((1.0 - dy) * (1.0 - dx))
        + padded[iy, ix + 1] * ((1.0 - dy) * dx)
        + padded[iy + 1, ix] * (dy * (1.0 - dx))
        + padded[iy + 1, ix + 1] * (dy * dx)
    )


def transform(pixels: np.ndarray, params: AugParams, output_size=None) -> np.ndarray:
    h, w = pixels.shape
    oh, ow = output_size or (h, w)
    top, left, ch, cw = params.crop
    ii, jj = np.mgrid[0:oh, 0:ow].astype(np.float64)
    # output grid -> crop window
    ys = top + (ii + 0.5) * (ch / oh) - 0.5
    xs = left + (jj + 0.5) * (cw / ow) - 0.5
    # undo the rotation about the frame center
    if params.angle != 0.0:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        t = np.deg2rad(params.angle)
        c, s = np.cos(t), np.sin(t)
        ry, rx = ys - cy, xs - cx
        ys, xs = cy + c * ry + s * rx, cx - s * ry + c * rx
    if params.flip:
        xs = (w - 1) - xs
    return np.clip(bilinear(pixels, ys, xs), 0.0, 1.0)


def apply(spec: AugmentationSpec, record: ImageRecord, rng: np.random.Generator) -> View:
    if record.pixels is None:
        raise ValueError(f"image {record.image_id} has no pixels")
    params = draw_params(spec, record.pixels.shape, rng)
    return View(transform(record.pixels, params, spec.output_size), record.image_id, params)


def make_positive_pair(
    query: ImageRecord, partner: ImageRecord, spec: AugmentationSpec, rng: np.random.Generator
) -> tuple[View, View]:
    """Independently augmented views ``(from query, from partner)``."""
    return apply(spec, query, rng), apply(spec, partner, rng)
