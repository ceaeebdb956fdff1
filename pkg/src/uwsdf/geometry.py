"""Camera model, per-pixel rays, scene normalization, ray-sphere bounds.

Conventions: camera space looks down -z, pixel y grows downward, pixel centers
at +0.5 offsets. World units are arbitrary; :func:`normalize_scene` rescales a
capture so the object of interest fits the unit sphere with cameras outside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assets import CameraRecord
from .errors import BoundsError, DegenerateSceneError, ValidationError


@dataclass
class Ray:
    """Origin plus unit direction, both float64 world-space 3-vectors."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(d))
        if abs(n - 1.0) > 1e-9:
            raise ValidationError(f"ray direction must be unit norm, got {n}")
        self.origin = o
        self.direction = d

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class SceneTransform:
    """Similarity x' = scale * (x + translation) applied to world points."""

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationError("scale must be positive")
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) + self.translation) * self.scale

    def invert_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale - self.translation

    def apply_camera(self, cam: CameraRecord) -> CameraRecord:
        m = cam.world_from_camera.copy()
        m[:3, 3] = self.apply_points(m[:3, 3])
        return CameraRecord(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, m)


def _pixel_dirs_camera(cam: CameraRecord, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    x = (px + 0.5 - cam.cx) / cam.fx
    y = (py + 0.5 - cam.cy) / cam.fy
    d = np.stack([x, y, -np.ones_like(x)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_for_pixel(cam: CameraRecord, px: float, py: float) -> Ray:
    """World-space viewing ray through pixel (px, py)."""
    if not (0 <= px < cam.width and 0 <= py < cam.height):
        raise BoundsError(f"pixel ({px}, {py}) outside {cam.width}x{cam.height} image")
    d_cam = _pixel_dirs_camera(cam, np.float64(px), np.float64(py))
    d_world = cam.rotation @ d_cam
    return Ray(cam.center.copy(), d_world)


def rays_for_pixels(cam: CameraRecord, px: np.ndarray, py: np.ndarray):
    """Vectorized :func:`ray_for_pixel`: returns (origins (n,3), directions (n,3))."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    if px.size and (
        px.min() < 0 or px.max() >= cam.width or py.min() < 0 or py.max() >= cam.height
    ):
        raise BoundsError("pixel coordinates outside image")
    d_cam = _pixel_dirs_camera(cam, px, py)
    d_world = d_cam @ cam.rotation.T
    origins = np.broadcast_to(cam.center, d_world.shape).copy()
    return origins, d_world


def normalize_scene(
    cams: list[CameraRecord], target_radius: float = 3.0
) -> tuple[list[CameraRecord], SceneTransform]:
    """Map the camera-center centroid to the origin and the farthest camera
    to ``target_radius``; returns transformed cameras plus the (invertible)
    transform that was applied."""
    if target_radius <= 0:
        raise ValidationError("target_radius must be positive")
    if len(cams) < 2:
        raise DegenerateSceneError("need at least 2 cameras to normalize")
    centers = np.stack([c.center for c in cams])
    centroid = centers.mean(axis=0)
    max_dist = float(np.linalg.norm(centers - centroid, axis=1).max())
    if max_dist < 1e-12:
        raise DegenerateSceneError("cameras are coincident")
    transform = SceneTransform(-centroid, target_radius / max_dist)
    return [transform.apply_camera(c) for c in cams], transform


def ray_sphere_bounds(ray: Ray, radius: float):
    """Clamped entry/exit parameters of ``ray`` against the origin-centered
    sphere, or None if the sphere is missed (or lies entirely behind)."""
    if radius <= 0:
        raise ValidationError("radius must be positive")
    o, v = ray.origin, ray.direction
    b = float(o @ v)
    c = float(o @ o) - radius * radius
    disc = b * b - c
    if disc <= 0.0:
        return None
    root = float(np.sqrt(disc))
    t_near, t_far = -b - root, -b + root
    if t_far <= 0.0:
        return None
    return max(t_near, 0.0), t_far


def rays_sphere_bounds(origins: np.ndarray, dirs: np.ndarray, radius: float):
    """Vectorized sphere bounds: returns (t_near, t_far, hit_mask) arrays."""
    if radius <= 0:
        raise ValidationError("radius must be positive")
    o = np.asarray(origins, dtype=np.float64)
    v = np.asarray(dirs, dtype=np.float64)
    b = np.sum(o * v, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t_near = np.maximum(-b - root, 0.0)
    t_far = -b + root
    hit &= t_far > 0.0
    return t_near, t_far, hit
