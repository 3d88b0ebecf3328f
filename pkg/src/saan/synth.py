"""Synthetic crowd scenes and training-time augmentation.

Scenes are grayscale canvases in [0,1]: a textured noise background plus
one bright Gaussian blob per person, whose radius shrinks linearly from
4 px at the top edge to 1.5 px at the bottom (a cheap perspective
proxy). Everything is a pure function of its seed.

Augmentation is a multiple-of-4-aligned random square crop plus a 50%
horizontal flip; annotation points and the density map are transformed
consistently, and points falling outside the crop are dropped.
"""

import math

import numpy as np

from .errors import ShapeError

BLOB_RADIUS_TOP = 4.0
BLOB_RADIUS_BOTTOM = 1.5
BLOB_AMP_RANGE = (0.5, 0.9)
BACKGROUND_LEVEL = 0.3
BACKGROUND_NOISE = 0.015


def synth_scene(seed, height, width, count_range):
    """One scene -> (image [1,H,W] in [0,1], points [K,2] of (x, y))."""
    cmin, cmax = count_range
    if not (0 <= cmin <= cmax):
        raise ValueError(f"invalid count range ({cmin}, {cmax})")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(cmin, cmax + 1))

    coarse = rng.uniform(0.0, BACKGROUND_LEVEL, (height // 8 + 1, width // 8 + 1))
    img = np.kron(coarse, np.ones((8, 8)))[:height, :width]
    img = img + rng.normal(0.0, BACKGROUND_NOISE, (height, width))
    np.clip(img, 0.0, BACKGROUND_LEVEL, out=img)

    points = np.empty((k, 2), dtype=np.float64)
    for i in range(k):
        # dots stay within [0, W-1] x [0, H-1] so a pixel-center flip
        # cannot push them out of bounds
        x = rng.uniform(0.0, width - 1.0)
        y = rng.uniform(0.0, height - 1.0)
        points[i] = (x, y)
        span = BLOB_RADIUS_TOP - BLOB_RADIUS_BOTTOM
        r = BLOB_RADIUS_TOP - span * (y / max(height - 1.0, 1.0))
        amp = rng.uniform(*BLOB_AMP_RANGE)
        sig = r / 2.0
        reach = math.ceil(3.0 * sig)
        cx, cy = int(round(x)), int(round(y))
        y0, y1 = max(0, cy - reach), min(height, cy + reach + 1)
        x0, x1 = max(0, cx - reach), min(width, cx + reach + 1)
        dy = np.arange(y0, y1) - y
        dx = np.arange(x0, x1) - x
        img[y0:y1, x0:x1] += amp * np.exp(
            -(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * sig * sig)
        )
    np.clip(img, 0.0, 1.0, out=img)
    return img[None, :, :], points


def hflip(image, points, density):
    """Mirror all three around the vertical pixel-center axis."""
    w = image.shape[2]
    flipped_pts = np.array(points, dtype=np.float64).reshape(-1, 2).copy()
    flipped_pts[:, 0] = np.maximum((w - 1.0) - flipped_pts[:, 0], 0.0)
    return (
        np.ascontiguousarray(image[:, :, ::-1]),
        flipped_pts,
        np.ascontiguousarray(density[:, ::-1]),
    )


def crop_region(image, points, density, top, left, size):
    """Fixed crop of all three; drops points outside the window."""
    img = np.ascontiguousarray(image[:, top : top + size, left : left + size])
    den = np.ascontiguousarray(density[top : top + size, left : left + size])
    pts = np.array(points, dtype=np.float64).reshape(-1, 2)
    keep = (
        (pts[:, 0] >= left)
        & (pts[:, 0] < left + size)
        & (pts[:, 1] >= top)
        & (pts[:, 1] < top + size)
    )
    pts = pts[keep].copy()
    pts[:, 0] -= left
    pts[:, 1] -= top
    return img, pts, den


def augment(image, points, density, seed, crop):
    """Seeded random aligned crop + 50% horizontal flip."""
    _, h, w = image.shape
    if crop % 4:
        raise ShapeError(f"crop size must be divisible by 4, got {crop}")
    if crop > min(h, w):
        raise ShapeError(f"crop {crop} exceeds image size {h}x{w}")
    rng = np.random.default_rng(seed)
    top = 4 * int(rng.integers(0, (h - crop) // 4 + 1))
    left = 4 * int(rng.integers(0, (w - crop) // 4 + 1))
    flip = bool(rng.integers(0, 2))
    img, pts, den = crop_region(image, points, density, top, left, crop)
    if flip:
        img, pts, den = hflip(img, pts, den)
    return img, pts, den
