"""Ground-truth density maps and density-scale labels.

Dot annotations are arrays of (x, y) pixel coordinates, one per person,
0-indexed with 0 <= x < W and 0 <= y < H. A density map is a plain 2-D
float array whose sum equals the person count: each dot stamps a
Gaussian kernel (truncated at 4*sigma, clipped at the borders) that is
renormalized to sum to exactly 1.

Scale labels discretize counts into three equal-width bins over the
training-set range; the first two intervals are half-open, the last is
closed, and out-of-range counts clamp to the nearest class. The global
label bins the per-image total; the local label bins the count inside
the 64x64 window [h-32, h+32) x [w-32, w+32) around every pixel and is
then subsampled at stride 4 to match the attention-map resolution.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import AnnotationError, BinningError, ShapeError
from .ops import box_sum

LOCAL_RADIUS = 32  # half-width of the local counting window


@dataclass(frozen=True)
class ScaleBins:
    global_min: float
    global_max: float
    local_min: float
    local_max: float

    def __post_init__(self):
        if self.global_min > self.global_max:
            raise BinningError(f"global range inverted: [{self.global_min}, {self.global_max}]")
        if self.local_min > self.local_max:
            raise BinningError(f"local range inverted: [{self.local_min}, {self.local_max}]")


def bin_of(values, lo, hi):
    """Class in {1,2,3} for each value: [lo,e1), [e1,e2), [e2,hi] with
    equal widths; values outside [lo,hi] clamp to class 1 or 3."""
    width = (hi - lo) / 3.0
    v = np.asarray(values, dtype=np.float64)
    out = np.where(v < lo + width, 1, np.where(v < lo + 2 * width, 2, 3))
    return out if out.ndim else int(out)


def gaussian_density_map(points, height, width, sigma=4.0):
    """Sum of per-dot normalized Gaussian stamps; float64 [height, width]."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    m = np.zeros((height, width), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    radius = math.ceil(4.0 * sigma)
    for i, (x, y) in enumerate(pts):
        if not (0 <= x < width and 0 <= y < height):
            raise AnnotationError(
                f"dot {i} at ({x}, {y}) lies outside the {width}x{height} image"
            )
        cx, cy = int(round(x)), int(round(y))
        y0, y1 = max(0, cy - radius), min(height, cy + radius + 1)
        x0, x1 = max(0, cx - radius), min(width, cx + radius + 1)
        yy = np.arange(y0, y1) - cy
        xx = np.arange(x0, x1) - cx
        kernel = np.exp(-(yy[:, None] ** 2 + xx[None, :] ** 2) / (2.0 * sigma * sigma))
        m[y0:y1, x0:x1] += kernel / kernel.sum()
    return m


def compute_bins(train_maps):
    """Global and local count ranges over the training maps -> ScaleBins."""
    if not train_maps:
        raise BinningError("cannot compute bins from an empty training set")
    counts = [float(np.asarray(m, dtype=np.float64).sum()) for m in train_maps]
    gmin, gmax = min(counts), max(counts)
    if gmin == gmax:
        raise BinningError(
            f"degenerate training set: every image has count {gmin}; "
            "global bins need a non-empty range"
        )
    lmin, lmax = np.inf, -np.inf
    for m in train_maps:
        local = box_sum(np.asarray(m, dtype=np.float64), LOCAL_RADIUS)
        lmin = min(lmin, float(local.min()))
        lmax = max(lmax, float(local.max()))
    if lmin == lmax:
        raise BinningError(
            f"degenerate training set: every local window has count {lmin}"
        )
    return ScaleBins(global_min=gmin, global_max=gmax, local_min=lmin, local_max=lmax)


def global_scale_label(density_map, bins):
    """Class in {1,2,3} of the image's total count."""
    total = float(np.asarray(density_map, dtype=np.float64).sum())
    return int(bin_of(total, bins.global_min, bins.global_max))


def local_scale_map(density_map, bins):
    """Stride-4 grid of local-count classes; [H/4, W/4] in {1,2,3}."""
    m = np.asarray(density_map, dtype=np.float64)
    h, w = m.shape
    if h % 4 or w % 4:
        raise ShapeError(f"local labels need H,W divisible by 4, got {h}x{w}")
    local = box_sum(m, LOCAL_RADIUS)
    labels = bin_of(local, bins.local_min, bins.local_max)
    return np.ascontiguousarray(labels[0::4, 0::4])
