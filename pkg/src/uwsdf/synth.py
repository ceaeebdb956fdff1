"""Synthetic multi-view dataset generation from analytic distance fields.

Ground truth comes from sphere tracing the exact SDF (independent of the
differentiable renderer under test): Lambertian shading, hit masks, ray-depth
and world-normal priors, plus an optional water-style per-channel tint. A
camera ring around the object provides the poses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import assets
from .errors import ConfigError, ValidationError
from .field import AnalyticField, BoxField, SphereField, TorusField
from .geometry import rays_for_pixels, rays_sphere_bounds


@dataclass
class SynthSceneSpec:
    """Scene recipe: object, camera ring, lighting, optional degradation."""

    field: AnalyticField
    num_views: int = 20
    ring_radius: float = 3.0
    elevation_deg: float = 20.0
    image_size: int = 64
    fov_deg: float = 32.0
    light_direction: tuple | None = None
    tint_attenuation: tuple = (0.0, 0.0, 0.0)
    haze_color: tuple = (0.12, 0.35, 0.45)
    prior_noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_views < 2:
            raise ValidationError("need at least 2 views")
        if self.ring_radius <= self.field.bounding_radius():
            raise ValidationError("camera ring must lie outside the object")
        if not -85.0 <= self.elevation_deg <= 85.0:
            raise ValidationError("elevation must stay within +-85 degrees")
        if not 5.0 <= self.fov_deg <= 120.0:
            raise ValidationError("fov must lie in [5, 120] degrees")
        if self.image_size < 8:
            raise ValidationError("image_size must be >= 8")
        if self.light_direction is None:
            self.light_direction = self.field.light_direction
        l = np.asarray(self.light_direction, dtype=np.float64)
        self.light_direction = tuple(l / np.linalg.norm(l))
        self.tint_attenuation = tuple(float(a) for a in self.tint_attenuation)
        self.haze_color = tuple(float(h) for h in self.haze_color)
        if any(a < 0 for a in self.tint_attenuation):
            raise ValidationError("attenuation coefficients must be >= 0")


def _look_at(eye: np.ndarray) -> np.ndarray:
    """world_from_camera for a camera at ``eye`` looking at the origin,
    view axis -z, image y pointing down (world +z is up)."""
    d = -eye / np.linalg.norm(eye)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, d)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValidationError("camera looks straight along the up axis")
    x /= nx
    z = -d
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, eye
    return m


def camera_ring(spec: SynthSceneSpec) -> list[assets.CameraRecord]:
    """Evenly spaced azimuths at fixed elevation, all aimed at the origin."""
    size = spec.image_size
    f = (size / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)
    el = math.radians(spec.elevation_deg)
    cams = []
    for i in range(spec.num_views):
        az = 2.0 * math.pi * i / spec.num_views
        eye = spec.ring_radius * np.array(
            [math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)]
        )
        cams.append(
            assets.CameraRecord(f, f, size / 2.0, size / 2.0, size, size, _look_at(eye))
        )
    return cams


def _sphere_trace(field: AnalyticField, origins: np.ndarray, dirs: np.ndarray):
    """March rays to the zero level set: 64 steps, hit when |s| < 1e-6, then a
    few Newton corrections along the ray to polish converged hits.

    Returns (hit mask, ray parameter t, surface points)."""
    rb = field.bounding_radius() + 0.05
    t_near, t_far, inside = rays_sphere_bounds(origins, dirs, rb)
    t = np.where(inside, t_near, 0.0)
    s = field.sdf(origins + t[:, None] * dirs)
    active = inside.copy()
    for _ in range(64):
        if not active.any():
            break
        t = np.where(active, t + s, t)
        s = np.where(active, field.sdf(origins + t[:, None] * dirs), s)
        active &= np.abs(s) >= 1e-6
        active &= t <= t_far + 0.1
    hit = inside & (np.abs(s) < 1e-6)
    for _ in range(4):
        if not hit.any():
            break
        p = origins + t[:, None] * dirs
        dsdt = np.sum(field.gradient(p) * dirs, axis=-1)
        step_ok = hit & (np.abs(dsdt) > 1e-3)
        t = np.where(step_ok, t - s / np.where(step_ok, dsdt, 1.0), t)
        s = np.where(step_ok, field.sdf(origins + t[:, None] * dirs), s)
    return hit, t, origins + t[:, None] * dirs


def render_view(spec: SynthSceneSpec, cam: assets.CameraRecord, view_index: int = 0):
    """Exact render of one view.

    Returns (ImageBuffer, priors) where priors holds ``mask`` (h,w) bool,
    ``depth`` (h,w) ray parameter at hits (0 elsewhere), and ``normal`` (h,w,3)
    world-frame unit normals at hits (0 elsewhere).
    """
    h, w = cam.height, cam.width
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    origins, dirs = rays_for_pixels(cam, px.ravel(), py.ravel())
    hit, t, points = _sphere_trace(spec.field, origins, dirs)

    normal = np.zeros((h * w, 3))
    if hit.any():
        g = spec.field.gradient(points[hit])
        normal[hit] = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    light = np.asarray(spec.light_direction)
    lam = np.maximum(normal @ light, 0.0)
    color = lam[:, None] * np.asarray(spec.field.albedo)
    color[~hit] = 0.0

    a = np.asarray(spec.tint_attenuation)
    if (a > 0).any():
        haze = np.asarray(spec.haze_color)
        # Background rays sit at effectively infinite range; the huge finite
        # stand-in keeps a=0 channels from producing 0*inf.
        reach = np.where(hit, t, 1e30)[:, None]
        att = np.exp(-a[None, :] * reach)
        color = color * att + haze * (1.0 - att)

    depth = np.where(hit, t, 0.0)
    if spec.prior_noise_std > 0:
        rng = np.random.default_rng([spec.seed, view_index])
        depth = np.where(hit, depth + spec.prior_noise_std * rng.normal(size=depth.shape), 0.0)
        normal = normal + spec.prior_noise_std * rng.normal(size=normal.shape)
        norms = np.maximum(np.linalg.norm(normal, axis=-1, keepdims=True), 1e-12)
        normal = np.where(hit[:, None], normal / norms, 0.0)

    img = assets.ImageBuffer(np.clip(color, 0.0, 1.0).reshape(h, w, 3).astype(np.float32))
    priors = {
        "mask": hit.reshape(h, w),
        "depth": depth.reshape(h, w),
        "normal": normal.reshape(h, w, 3),
    }
    return img, priors


def field_to_manifest(field: AnalyticField) -> dict:
    if isinstance(field, SphereField):
        shape = {"kind": "sphere", "center": list(field.center), "radius": field.radius}
    elif isinstance(field, BoxField):
        shape = {"kind": "box", "half_extents": list(field.half_extents)}
    elif isinstance(field, TorusField):
        shape = {"kind": "torus", "ring": field.ring, "tube": field.tube}
    else:
        shape = {"kind": "custom"}
    shape["albedo"] = list(field.albedo)
    shape["light_direction"] = list(field.light_direction)
    return shape


def field_from_manifest(data: dict) -> AnalyticField:
    kind = data.get("kind")
    common = {
        "albedo": tuple(data.get("albedo", (0.8, 0.7, 0.6))),
        "light_direction": tuple(data.get("light_direction", (0.0, 0.0, 1.0))),
    }
    if kind == "sphere":
        return SphereField(center=tuple(data["center"]), radius=data["radius"], **common)
    if kind == "box":
        return BoxField(half_extents=tuple(data["half_extents"]), **common)
    if kind == "torus":
        return TorusField(ring=data["ring"], tube=data["tube"], **common)
    raise ConfigError(f"unknown field kind {kind!r}")


def generate_dataset(spec: SynthSceneSpec, out_dir) -> Path:
    """Write the full on-disk dataset; byte-identical across reruns.

    Layout: images/*.ppm, masks/*.pgm, depth/*.uwtf (h,w float32),
    normal/*.uwtf (h,w,3 float32, camera frame), poses.txt, manifest.json.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "depth", "normal"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cams = camera_ring(spec)
    views = []
    for i, cam in enumerate(cams):
        img, priors = render_view(spec, cam, view_index=i)
        rel = {
            "image": f"images/view_{i:03d}.ppm",
            "mask": f"masks/view_{i:03d}.pgm",
            "depth": f"depth/view_{i:03d}.uwtf",
            "normal": f"normal/view_{i:03d}.uwtf",
        }
        assets.write_image(img, out / rel["image"])
        mask_img = assets.ImageBuffer(priors["mask"].astype(np.float32)[..., None])
        assets.write_image(mask_img, out / rel["mask"])
        assets.write_tensor(priors["depth"].astype(np.float32), out / rel["depth"])
        n_cam = priors["normal"] @ cam.rotation  # world -> camera rows
        assets.write_tensor(n_cam.astype(np.float32), out / rel["normal"])
        views.append(rel)
    assets.write_pose_file(cams, out / "poses.txt")
    manifest = {
        "num_views": spec.num_views,
        "image_size": spec.image_size,
        "normal_frame": "camera",
        "has_depth": True,
        "has_normal": True,
        "seed": spec.seed,
        "field": field_to_manifest(spec.field),
        "tint_attenuation": list(spec.tint_attenuation),
        "haze_color": list(spec.haze_color),
        "views": views,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# image enhancers (preprocessing stand-ins, selected by config name)
# ---------------------------------------------------------------------------

def enhance_identity(img: assets.ImageBuffer) -> assets.ImageBuffer:
    return assets.ImageBuffer(img.pixels.copy())


def enhance_grayworld(img: assets.ImageBuffer) -> assets.ImageBuffer:
    """Scale each channel so its mean matches the global luminance mean."""
    px = img.pixels.astype(np.float64)
    means = px.reshape(-1, img.channels).mean(axis=0)
    target = means.mean()
    gains = np.where(means > 1e-8, target / np.maximum(means, 1e-8), 1.0)
    out = np.clip(px * gains, 0.0, 1.0)
    return assets.ImageBuffer(out.astype(np.float32))


ENHANCERS = {
    "identity": enhance_identity,
    "grayworld": enhance_grayworld,
}
