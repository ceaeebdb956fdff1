"""Few-shot multi-view prompt generation and mask optimization.

A reference view's foreground features are matched against every target
view's features by cosine similarity; the averaged confidence map yields one
positive and one negative point prompt per view for an external promptable
segmenter. Rough masks are cleaned by morphological denoising followed by a
convex-hull merge (Graham scan + exact scanline fill).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cmp_to_key
from pathlib import Path

import numpy as np
from scipy import ndimage

from .assets import ImageBuffer
from .errors import BoundsError, EmptyMaskError, ShapeError, ValidationError


# ---------------------------------------------------------------------------
# features and confidence
# ---------------------------------------------------------------------------

@dataclass
class FeatureMap:
    """Per-pixel feature vectors (h, w, c); ``normalized`` asserts unit norms
    (all-zero pixels are exempt)."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError("feature map must be (h, w, c)")
        if self.normalized:
            norms = np.linalg.norm(self.data, axis=-1)
            nonzero = norms > 0
            if nonzero.any() and np.abs(norms[nonzero] - 1.0).max() > 1e-5:
                raise ValidationError("feature map marked normalized but is not")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def normalize_features(data: np.ndarray) -> FeatureMap:
    """L2-normalize per pixel; all-zero vectors stay zero."""
    data = np.asarray(data, dtype=np.float64)
    norms = np.linalg.norm(data, axis=-1, keepdims=True)
    return FeatureMap(np.where(norms > 0, data / np.maximum(norms, 1e-300), 0.0), True)


def extract_features_toy(img: ImageBuffer, blur_radius: int = 4) -> FeatureMap:
    """Self-contained 8-channel descriptor: RGB, two Sobel magnitudes of the
    luminance, and box-blurred RGB, L2-normalized per pixel."""
    if img.channels != 3:
        raise ValidationError("toy features need an RGB image")
    px = img.pixels.astype(np.float64)
    lum = px.mean(axis=-1)
    gx = np.abs(ndimage.sobel(lum, axis=1, mode="nearest"))
    gy = np.abs(ndimage.sobel(lum, axis=0, mode="nearest"))
    size = 2 * blur_radius + 1
    blurred = ndimage.uniform_filter(px, size=(size, size, 1), mode="nearest")
    data = np.concatenate([px, gx[..., None], gy[..., None], blurred], axis=-1)
    return normalize_features(data)


@dataclass
class LocalFeatureSet:
    """Foreground feature vectors (n, c) with their (row, col) sources."""

    vectors: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.int64)
        if len(self.vectors) < 1:
            raise ValidationError("local feature set is empty")

    def __len__(self) -> int:
        return len(self.vectors)


def _resample_mask_nearest(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    mh, mw = mask.shape
    if (mh, mw) == (h, w):
        return mask
    rows = np.minimum((np.arange(h) + 0.5) * mh / h, mh - 1).astype(np.int64)
    cols = np.minimum((np.arange(w) + 0.5) * mw / w, mw - 1).astype(np.int64)
    return mask[rows][:, cols]


def crop_foreground_features(features: FeatureMap, mask: np.ndarray) -> LocalFeatureSet:
    """One vector per foreground pixel, row-major order; the mask is aligned
    to the feature resolution by nearest neighbor when sizes differ."""
    mask = np.asarray(mask, dtype=bool)
    mask = _resample_mask_nearest(mask, features.height, features.width)
    coords = np.argwhere(mask)
    if len(coords) == 0:
        raise EmptyMaskError("mask selects no foreground pixels")
    return LocalFeatureSet(features.data[mask], coords)


def confidence_maps(features: FeatureMap, local: LocalFeatureSet) -> np.ndarray:
    """Cosine-similarity map per local feature: (n, h, w) in [-1, 1]."""
    if not features.normalized:
        raise ValidationError("target features must be L2-normalized")
    if features.channels != local.vectors.shape[1]:
        raise ShapeError("feature widths disagree")
    norms = np.linalg.norm(local.vectors, axis=-1)
    nonzero = norms > 0
    if nonzero.any() and np.abs(norms[nonzero] - 1.0).max() > 1e-5:
        raise ValidationError("local features must be L2-normalized")
    maps = np.einsum("hwc,nc->nhw", features.data, local.vectors)
    return np.clip(maps, -1.0, 1.0)


def aggregate_confidence(maps) -> np.ndarray:
    """Pixelwise mean of the per-feature confidence maps."""
    stack = np.asarray(maps, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise ValidationError("need at least one confidence map")
    return stack.mean(axis=0)


def aggregate_confidence_chunked(
    features: FeatureMap, local: LocalFeatureSet, chunk: int = 256
) -> np.ndarray:
    """Identical result to aggregate_confidence(confidence_maps(...)) without
    materializing all n maps at once."""
    total = np.zeros((features.height, features.width))
    for lo in range(0, len(local), chunk):
        part = LocalFeatureSet(local.vectors[lo : lo + chunk], local.coords[lo : lo + chunk])
        total += confidence_maps(features, part).sum(axis=0)
    return total / len(local)


@dataclass
class PromptPair:
    """Positive/negative point prompts as (x, y) pixel coordinates."""

    positive: tuple
    negative: tuple
    positive_score: float
    negative_score: float

    def __post_init__(self):
        if self.positive_score < self.negative_score:
            raise ValidationError("positive prompt must score at least the negative")


def select_prompts(confidence: np.ndarray) -> PromptPair:
    """Argmax/argmin of the map; ties resolve to the smallest row-major index."""
    s = np.asarray(confidence, dtype=np.float64)
    if s.size == 0:
        raise ValidationError("empty confidence map")
    h, w = s.shape
    hi = int(np.argmax(s))
    lo = int(np.argmin(s))
    return PromptPair(
        positive=(hi % w, hi // w),
        negative=(lo % w, lo // w),
        positive_score=float(s.flat[hi]),
        negative_score=float(s.flat[lo]),
    )


def emit_prompt_file(prompts: PromptPair, image_id: str, path) -> None:
    record = {
        "image": image_id,
        "positive": [int(prompts.positive[0]), int(prompts.positive[1])],
        "negative": [int(prompts.negative[0]), int(prompts.negative[1])],
        "scores": {
            "positive": prompts.positive_score,
            "negative": prompts.negative_score,
        },
    }
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def load_prompt_file(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# mask cleanup
# ---------------------------------------------------------------------------

def denoise_mask(mask: np.ndarray, min_component: int) -> np.ndarray:
    """3x3 morphological opening, then drop 4-connected components smaller
    than ``min_component`` pixels."""
    m = np.asarray(mask, dtype=bool)
    opened = ndimage.binary_opening(m, structure=np.ones((3, 3), dtype=bool))
    labels, count = ndimage.label(opened, structure=np.array(
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool
    ))
    if count == 0:
        return opened
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_component
    keep[0] = False
    return keep[labels]


def _orient(o, a, b):
    """Twice the signed area of (o, a, b); > 0 means a left turn."""
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_graham(points) -> np.ndarray:
    """Counter-clockwise convex hull, collinear interior points excluded.

    Classic pivot-and-polar-angle scan with exact integer cross products;
    degenerate inputs come back as a single point or the two segment ends.
    """
    arr = np.asarray(points)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeError("points must be (n, 2)")
    if len(arr) == 0:
        raise ValidationError("need at least one point")
    integral = np.issubdtype(arr.dtype, np.integer)
    uniq = sorted({(int(p[0]), int(p[1])) if integral else (float(p[0]), float(p[1]))
                   for p in arr})
    out_dtype = np.int64 if integral else np.float64
    if len(uniq) == 1:
        return np.asarray(uniq, dtype=out_dtype)
    a, b = uniq[0], uniq[-1]
    if all(_orient(a, b, p) == 0 for p in uniq):
        return np.asarray([a, b], dtype=out_dtype)

    pivot = min(uniq, key=lambda p: (p[1], p[0]))
    rest = [p for p in uniq if p != pivot]

    def by_angle(p, q):
        c = _orient(pivot, p, q)
        if c > 0:
            return -1
        if c < 0:
            return 1
        # Same ray from the pivot: nearer point first, so later points on the
        # ray pop it during the scan (only the farthest survives).
        dp = (p[0] - pivot[0]) ** 2 + (p[1] - pivot[1]) ** 2
        dq = (q[0] - pivot[0]) ** 2 + (q[1] - pivot[1]) ** 2
        return -1 if dp < dq else 1

    rest.sort(key=cmp_to_key(by_angle))
    stack = [pivot, rest[0]]
    for p in rest[1:]:
        while len(stack) >= 2 and _orient(stack[-2], stack[-1], p) <= 0:
            stack.pop()
        stack.append(p)
    return np.asarray(stack, dtype=out_dtype)


def fill_hull(hull: np.ndarray, h: int, w: int) -> np.ndarray:
    """Rasterize a convex polygon given as CCW (x, y) vertices: a pixel is
    set when its integer coordinate lies inside or on every edge (exact
    half-plane tests, no floating point for integer hulls)."""
    hull = np.asarray(hull)
    if len(hull) == 0:
        raise ValidationError("empty hull")
    xs, ys = hull[:, 0], hull[:, 1]
    if xs.min() < 0 or ys.min() < 0 or xs.max() >= w or ys.max() >= h:
        raise BoundsError("hull vertex outside the image")
    mask = np.zeros((h, w), dtype=bool)
    x0, x1 = int(np.floor(xs.min())), int(np.ceil(xs.max()))
    y0, y1 = int(np.floor(ys.min())), int(np.ceil(ys.max()))
    gy, gx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    if len(hull) == 1:
        mask[int(round(ys[0])), int(round(xs[0]))] = True
        return mask
    inside = np.ones(gx.shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % n]
        cross = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
        inside &= cross >= 0
    mask[y0 : y1 + 1, x0 : x1 + 1] = inside
    return mask


def optimize_mask(rough: np.ndarray, min_component: int = 16) -> np.ndarray:
    """denoise -> Graham hull of surviving pixels -> exact convex fill."""
    rough = np.asarray(rough, dtype=bool)
    clean = denoise_mask(rough, min_component)
    coords = np.argwhere(clean)
    if len(coords) == 0:
        raise EmptyMaskError("mask is empty after denoising")
    pts = np.stack([coords[:, 1], coords[:, 0]], axis=1)  # (x, y)
    hull = convex_hull_graham(pts)
    return fill_hull(hull, *rough.shape)
