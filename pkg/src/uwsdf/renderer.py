"""Differentiable volume rendering of a signed-distance field.

Density conversion uses the Laplace-CDF law: the learnable sharpness beta
concentrates density at the zero level set. Color, depth, normal, and opacity
are alpha-composited along stratified ray samples. Every function accepts
either numpy arrays (oracle/analytic paths, float64) or torch tensors
(training path, graph-preserving).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import field as field_mod
from .assets import PipelineConfig
from .errors import MissError, ShapeError, ValidationError
from .geometry import Ray, ray_sphere_bounds, rays_for_pixels, rays_sphere_bounds


def _is_torch(*xs) -> bool:
    return any(isinstance(x, torch.Tensor) for x in xs)


def _scalar(x) -> float:
    return x.item() if isinstance(x, torch.Tensor) else float(x)


def density_from_sdf(s, beta):
    """Laplace density: (1/b)(1 - exp(s/b)/2) inside, exp(-s/b)/(2b) outside.

    Continuous at s=0 where both branches give 1/(2b). The unused branch's
    exponent is clamped so no overflow leaks through ``where``.
    """
    if _scalar(beta) <= 0.0:
        raise ValidationError("beta must be positive")
    if isinstance(s, torch.Tensor):
        b = beta if isinstance(beta, torch.Tensor) else torch.as_tensor(beta, dtype=s.dtype)
        inside = (1.0 - 0.5 * torch.exp(torch.clamp(s, max=0.0) / b)) / b
        outside = 0.5 * torch.exp(-torch.clamp(s, min=0.0) / b) / b
        return torch.where(s < 0.0, inside, outside)
    s_arr = np.asarray(s, dtype=np.float64)
    b = float(beta)
    inside = (1.0 - 0.5 * np.exp(np.minimum(s_arr, 0.0) / b)) / b
    outside = 0.5 * np.exp(-np.maximum(s_arr, 0.0) / b) / b
    out = np.where(s_arr < 0.0, inside, outside)
    return float(out) if np.isscalar(s) or np.ndim(s) == 0 else out


@dataclass
class RaySamples:
    """Stratified samples along one ray or a batch of rays.

    ``t`` (..., M) strictly increasing, ``delta`` (..., M) positive spacings
    with the last entry reaching t_far, ``points`` (..., M, 3).
    """

    t: np.ndarray
    delta: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        if self.t.shape[-1] < 2:
            raise ValidationError("need at least 2 samples per ray")
        diffs = np.diff(np.asarray(self.t), axis=-1)
        if not (diffs > 0).all():
            raise ValidationError("sample parameters must be strictly increasing")
        if not (np.asarray(self.delta) > 0).all():
            raise ValidationError("sample spacings must be positive")


def _stratified_t(t_near, t_far, m: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per bin; t_near/t_far may be scalars or (B,) arrays."""
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    if not (t_near < t_far).all():
        raise ValidationError("need t_near < t_far")
    width = (t_far - t_near) / m
    u = rng.random(t_near.shape + (m,))
    return t_near[..., None] + (np.arange(m) + u) * width[..., None]


def sample_ray(ray: Ray, t_near: float, t_far: float, m: int, rng: np.random.Generator) -> RaySamples:
    """Stratified sampling of [t_near, t_far] into m bins, one draw each."""
    if m < 2:
        raise ValidationError("need at least 2 samples per ray")
    t = _stratified_t(float(t_near), float(t_far), m, rng)
    delta = np.concatenate([np.diff(t), [t_far - t[-1]]])
    points = ray.origin + t[:, None] * ray.direction
    return RaySamples(t, delta, points)


def sample_rays(origins, dirs, t_near, t_far, m: int, rng: np.random.Generator) -> RaySamples:
    """Batched stratified sampling; origins/dirs (B, 3), bounds (B,)."""
    if m < 2:
        raise ValidationError("need at least 2 samples per ray")
    t = _stratified_t(t_near, t_far, m, rng)
    delta = np.concatenate([np.diff(t, axis=-1), (np.asarray(t_far)[..., None] - t[..., -1:])], axis=-1)
    points = np.asarray(origins)[..., None, :] + t[..., None] * np.asarray(dirs)[..., None, :]
    return RaySamples(t, delta, points)


@dataclass
class RayRenderOutput:
    """Composited per-ray quantities; ``weights`` are the T*alpha terms."""

    color: object
    depth: object
    normal: object
    opacity: object
    weights: object
    hits: object = None


def composite(samples: RaySamples, sigma, rgb, normals) -> RayRenderOutput:
    """Alpha-composite color/depth/normal/opacity from densities.

    alpha_i = 1 - exp(-sigma_i * delta_i), T_i = prod_{j<i} (1 - alpha_j);
    each output is the weight-sum of its per-sample quantity.
    """
    m = np.shape(samples.t)[-1]
    if np.shape(sigma)[-1] != m or np.shape(rgb)[-2] != m or np.shape(normals)[-2] != m:
        raise ShapeError("per-sample arrays must share the sample count")
    if _is_torch(sigma, rgb, normals):
        if bool((sigma < 0).any()):
            raise ValidationError("densities must be nonnegative")
        delta = torch.as_tensor(samples.delta, dtype=sigma.dtype)
        t = torch.as_tensor(samples.t, dtype=sigma.dtype)
        alpha = 1.0 - torch.exp(-sigma * delta)
        trans = torch.cumprod(1.0 - alpha, dim=-1)
        ones = torch.ones_like(trans[..., :1])
        trans = torch.cat([ones, trans[..., :-1]], dim=-1)
        w = trans * alpha
        color = (w[..., None] * rgb).sum(dim=-2)
        depth = (w * t).sum(dim=-1)
        normal = (w[..., None] * normals).sum(dim=-2)
        opacity = w.sum(dim=-1)
        return RayRenderOutput(color, depth, normal, opacity, w)
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma < 0).any():
        raise ValidationError("densities must be nonnegative")
    alpha = 1.0 - np.exp(-sigma * samples.delta)
    trans = np.cumprod(1.0 - alpha, axis=-1)
    trans = np.concatenate([np.ones_like(trans[..., :1]), trans[..., :-1]], axis=-1)
    w = trans * alpha
    color = (w[..., None] * np.asarray(rgb, dtype=np.float64)).sum(axis=-2)
    depth = (w * samples.t).sum(axis=-1)
    normal = (w[..., None] * np.asarray(normals, dtype=np.float64)).sum(axis=-2)
    opacity = w.sum(axis=-1)
    return RayRenderOutput(color, depth, normal, opacity, w)


def _unit(x, eps: float = 1e-12):
    if isinstance(x, torch.Tensor):
        return x / torch.linalg.norm(x, dim=-1, keepdim=True).clamp_min(eps)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, eps)


def _field_outputs(fd, fc, points, view_dirs, create_graph: bool):
    """(sdf, rgb, unit normals) for either an analytic field or the MLP pair."""
    if isinstance(fd, field_mod.AnalyticField):
        s = fd.sdf(points)
        n = _unit(fd.gradient(points))
        rgb = fc.radiance(points, view_dirs)
        return s, rgb, n
    s, z, grad = fd.sdf_feature_gradient(points, create_graph=create_graph)
    rgb = fc.forward(z, view_dirs)
    return s, rgb, _unit(grad)


def render_ray(fd, fc, ray: Ray, cfg: PipelineConfig, beta, rng: np.random.Generator,
               num_samples: int | None = None) -> RayRenderOutput:
    """Render one ray: bound by the scene sphere, sample, shade, composite.

    Raises MissError when the ray never enters the bounding sphere; callers
    treat that as pure background.
    """
    bounds = ray_sphere_bounds(ray, cfg.bound_radius)
    if bounds is None:
        raise MissError("ray misses the bounding sphere")
    m = num_samples or cfg.samples_per_ray
    samples = sample_ray(ray, bounds[0], bounds[1], m, rng)
    if isinstance(fd, field_mod.AnalyticField):
        dirs = np.broadcast_to(ray.direction, samples.points.shape)
        s, rgb, normals = _field_outputs(fd, fc, samples.points, dirs, False)
        sigma = density_from_sdf(s, _scalar(beta))
        out = composite(samples, sigma, rgb, normals)
        out.color = out.color + (1.0 - out.opacity) * np.asarray(cfg.background)
        return out
    dtype = next(fd.parameters()).dtype
    pts = torch.as_tensor(samples.points, dtype=dtype)
    dirs = torch.as_tensor(np.broadcast_to(ray.direction, samples.points.shape).copy(), dtype=dtype)
    s, rgb, normals = _field_outputs(fd, fc, pts, dirs, create_graph=torch.is_grad_enabled())
    sigma = density_from_sdf(s, beta)
    out = composite(samples, sigma, rgb, normals)
    out.color = out.color + (1.0 - out.opacity) * torch.as_tensor(cfg.background, dtype=dtype)
    return out


def render_rays(fd, fc, origins, dirs, cfg: PipelineConfig, beta, rng: np.random.Generator,
                num_samples: int | None = None, create_graph: bool | None = None) -> RayRenderOutput:
    """Batched render. Rays that miss the bounding sphere come back as pure
    background with zero weights; ``hits`` flags the rest."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t_near, t_far, hits = rays_sphere_bounds(origins, dirs, cfg.bound_radius)
    # Misses get a placeholder interval so the batch stays rectangular; their
    # contributions are zeroed after compositing.
    t_near = np.where(hits, t_near, 0.0)
    t_far = np.where(hits, t_far, 1.0)
    m = num_samples or cfg.samples_per_ray
    samples = sample_rays(origins, dirs, t_near, t_far, m, rng)
    analytic = isinstance(fd, field_mod.AnalyticField)
    if analytic:
        pts = samples.points
        vdirs = np.broadcast_to(dirs[..., None, :], pts.shape)
        hit_mask = hits
        bg = np.asarray(cfg.background)
    else:
        dtype = next(fd.parameters()).dtype
        pts = torch.as_tensor(samples.points, dtype=dtype)
        vdirs = torch.as_tensor(np.broadcast_to(dirs[..., None, :], samples.points.shape).copy(), dtype=dtype)
        hit_mask = torch.as_tensor(hits)
        bg = torch.as_tensor(cfg.background, dtype=dtype)
        if create_graph is None:
            create_graph = torch.is_grad_enabled()
    s, rgb, normals = _field_outputs(fd, fc, pts, vdirs, bool(create_graph))
    sigma = density_from_sdf(s, _scalar(beta) if analytic else beta)
    sigma = sigma * hit_mask[..., None] if analytic else sigma * hit_mask[..., None].to(sigma.dtype)
    out = composite(samples, sigma, rgb, normals)
    out.color = out.color + (1.0 - out.opacity)[..., None] * bg
    out.hits = hits
    return out


def render_image(fd, fc, cam, cfg: PipelineConfig, beta, rng: np.random.Generator,
                 num_samples: int | None = None, chunk: int = 1024):
    """Render full-view maps (no gradients): color (h,w,3), depth (h,w),
    normal (h,w,3), opacity (h,w)."""
    h, w = cam.height, cam.width
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    origins, dirs = rays_for_pixels(cam, px.ravel(), py.ravel())
    m = num_samples or cfg.eval_samples_per_ray
    colors = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    normal = np.zeros((h * w, 3))
    opacity = np.zeros(h * w)

    def as_np(a):
        return a.detach().numpy() if isinstance(a, torch.Tensor) else a

    with torch.no_grad():
        for lo in range(0, h * w, chunk):
            hi = min(lo + chunk, h * w)
            out = render_rays(fd, fc, origins[lo:hi], dirs[lo:hi], cfg, beta, rng,
                              num_samples=m, create_graph=False)
            colors[lo:hi] = as_np(out.color)
            depth[lo:hi] = as_np(out.depth)
            normal[lo:hi] = as_np(out.normal)
            opacity[lo:hi] = as_np(out.opacity)
    return (
        colors.reshape(h, w, 3),
        depth.reshape(h, w),
        normal.reshape(h, w, 3),
        opacity.reshape(h, w),
    )
