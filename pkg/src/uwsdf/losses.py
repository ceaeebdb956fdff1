"""Training objective: photometric term plus eikonal and prior regularizers.

total = rgb + l1*eikonal + l2*mask + l3*depth + l4*normal

The depth prior is scale/shift ambiguous, so a per-batch affine fit (w, q)
aligns rendered depth to the prior before the residual is measured. All terms
use mean reduction over rays, making their scale batch-size independent.
Functions accept torch tensors (training) or numpy arrays (oracle tests).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from . import field as field_mod
from .assets import PipelineConfig
from .errors import ValidationError
from .renderer import render_rays


@dataclass
class RayBatch:
    """Rays with per-ray supervision, all numpy.

    ``depth_valid``/``normal_valid`` gate the prior terms per ray; background
    rays carry only color and a zero foreground label.
    """

    origins: np.ndarray        # (B, 3)
    dirs: np.ndarray           # (B, 3) unit
    colors: np.ndarray         # (B, 3) observed RGB
    fg: np.ndarray             # (B,) binary labels
    depth: np.ndarray          # (B,) prior depth (ray units), junk where invalid
    depth_valid: np.ndarray    # (B,) bool
    normal: np.ndarray         # (B, 3) prior unit normals, world frame
    normal_valid: np.ndarray   # (B,) bool

    def __post_init__(self):
        b = len(self.origins)
        if b == 0:
            raise ValidationError("empty ray batch")
        if not np.isin(self.fg, (0.0, 1.0)).all():
            raise ValidationError("foreground labels must be binary")
        if self.normal_valid.any():
            norms = np.linalg.norm(self.normal[self.normal_valid], axis=-1)
            if not np.allclose(norms, 1.0, atol=1e-5):
                raise ValidationError("valid prior normals must be unit length")

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class EikonalSampleSet:
    """Points where the unit-gradient property is enforced."""

    points: np.ndarray  # (K, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValidationError("eikonal sample set is empty")
        if not np.isfinite(pts).all():
            raise ValidationError("eikonal samples must be finite")
        self.points = pts


def eikonal_samples(
    count: int,
    bound_radius: float,
    rng: np.random.Generator,
    surface_points: np.ndarray | None = None,
    std: float = 0.05,
) -> EikonalSampleSet:
    """Half the points uniform in the bounding ball, half Gaussian-perturbed
    copies of current surface estimates (all uniform when none exist)."""
    if count < 1:
        raise ValidationError("need at least one eikonal sample")
    surface = None
    if surface_points is not None:
        surface = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
        if len(surface) == 0:
            surface = None
    n_near = count // 2 if surface is not None else 0
    n_uni = count - n_near
    d = rng.normal(size=(n_uni, 3))
    d /= np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)
    r = bound_radius * rng.random(n_uni) ** (1.0 / 3.0)
    pts = [d * r[:, None]]
    if n_near:
        idx = rng.integers(0, len(surface), size=n_near)
        pts.append(surface[idx] + std * rng.normal(size=(n_near, 3)))
    return EikonalSampleSet(np.concatenate(pts, axis=0))


class ScaleShift(NamedTuple):
    w: object
    q: object
    degenerate: bool


@dataclass
class LossReport:
    """Per-iteration loss breakdown; ``total`` is the float64 recombination
    of the reported terms under the configured weights."""

    rgb: float
    eikonal: float
    fg: float
    depth: float
    normal: float
    total: float
    w: float
    q: float
    degenerate_fit: bool

    def to_dict(self) -> dict:
        return {
            "rgb": self.rgb,
            "eikonal": self.eikonal,
            "fg": self.fg,
            "depth": self.depth,
            "normal": self.normal,
            "total": self.total,
            "w": self.w,
            "q": self.q,
            "degenerate_fit": self.degenerate_fit,
        }


def _is_torch(*xs) -> bool:
    return any(isinstance(x, torch.Tensor) for x in xs)


def _scalar(x) -> float:
    return x.item() if isinstance(x, torch.Tensor) else float(x)


def rgb_loss(pred, obs):
    """Mean over rays of the channel-summed absolute color error."""
    if np.shape(pred) != np.shape(obs):
        raise ValidationError("color batches must have equal shapes")
    if _is_torch(pred, obs):
        return (pred - obs).abs().sum(dim=-1).mean()
    return float(np.abs(np.asarray(pred) - np.asarray(obs)).sum(axis=-1).mean())


def eikonal_loss(fd, samples: EikonalSampleSet, create_graph: bool | None = None):
    """Mean squared deviation of the gradient norm from 1 over the sample set."""
    pts = samples.points if isinstance(samples, EikonalSampleSet) else np.asarray(samples)
    if isinstance(fd, field_mod.AnalyticField):
        g = fd.gradient(pts)
        return float(((np.linalg.norm(g, axis=-1) - 1.0) ** 2).mean())
    dtype = next(fd.parameters()).dtype
    t = torch.as_tensor(pts, dtype=dtype)
    if create_graph is None:
        create_graph = torch.is_grad_enabled()
    g = fd.gradient(t, create_graph=create_graph)
    return ((torch.linalg.norm(g, dim=-1) - 1.0) ** 2).mean()


def mask_loss(pred_opacity, labels):
    """Binary cross entropy on ray opacity, clamped away from 0 and 1."""
    lo, hi = 1e-4, 1.0 - 1e-4
    if _is_torch(pred_opacity, labels):
        y = labels if isinstance(labels, torch.Tensor) else torch.as_tensor(labels, dtype=pred_opacity.dtype)
        if not bool(((y == 0) | (y == 1)).all()):
            raise ValidationError("mask labels must be binary")
        p = pred_opacity.clamp(lo, hi)
        y = y.to(p.dtype)
        return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()
    y = np.asarray(labels, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("mask labels must be binary")
    p = np.clip(np.asarray(pred_opacity, dtype=np.float64), lo, hi)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def solve_scale_shift(pred_depth, prior_depth) -> ScaleShift:
    """Closed-form least-squares (w, q) minimizing sum((w*pred + q - prior)^2).

    Degenerate prediction variance falls back to a pure shift (w=1) with the
    ``degenerate`` flag raised.
    """
    if _is_torch(pred_depth, prior_depth):
        pred = pred_depth if isinstance(pred_depth, torch.Tensor) else torch.as_tensor(pred_depth)
        prior = prior_depth if isinstance(prior_depth, torch.Tensor) else torch.as_tensor(prior_depth, dtype=pred.dtype)
        mp = pred.mean()
        mq = prior.mean()
        var = ((pred - mp) ** 2).mean()
        if var.detach().item() <= 1e-12:
            return ScaleShift(torch.ones_like(var), (prior - pred).mean(), True)
        w = ((pred - mp) * (prior - mq)).mean() / var
        return ScaleShift(w, mq - w * mp, False)
    pred = np.asarray(pred_depth, dtype=np.float64)
    prior = np.asarray(prior_depth, dtype=np.float64)
    mp, mq = pred.mean(), prior.mean()
    var = ((pred - mp) ** 2).mean()
    if var <= 1e-12:
        return ScaleShift(1.0, float((prior - pred).mean()), True)
    w = float(((pred - mp) * (prior - mq)).mean() / var)
    return ScaleShift(w, float(mq - w * mp), False)


def depth_loss(pred_depth, prior_depth, fit: ScaleShift | None = None):
    """Mean squared residual after affine alignment of predictions to the prior."""
    if fit is None:
        fit = solve_scale_shift(pred_depth, prior_depth)
    if _is_torch(pred_depth, prior_depth):
        pred = pred_depth if isinstance(pred_depth, torch.Tensor) else torch.as_tensor(pred_depth)
        prior = prior_depth if isinstance(prior_depth, torch.Tensor) else torch.as_tensor(prior_depth, dtype=pred.dtype)
        return ((fit.w * pred + fit.q - prior) ** 2).mean()
    pred = np.asarray(pred_depth, dtype=np.float64)
    prior = np.asarray(prior_depth, dtype=np.float64)
    return float(((fit.w * pred + fit.q - prior) ** 2).mean())


def normal_loss(pred, prior):
    """Mean of L1 difference plus angular L1 (1 - cosine) per ray; both inputs
    are renormalized to unit length first."""
    if _is_torch(pred, prior):
        p = pred / torch.linalg.norm(pred, dim=-1, keepdim=True).clamp_min(1e-12)
        g = prior if isinstance(prior, torch.Tensor) else torch.as_tensor(prior, dtype=pred.dtype)
        g = g / torch.linalg.norm(g, dim=-1, keepdim=True).clamp_min(1e-12)
        l1 = (p - g).abs().sum(dim=-1)
        ang = (1.0 - (p * g).sum(dim=-1)).abs()
        return (l1 + ang).mean()
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(prior, dtype=np.float64)
    p = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    l1 = np.abs(p - g).sum(axis=-1)
    ang = np.abs(1.0 - (p * g).sum(axis=-1))
    return float((l1 + ang).mean())


def total_loss(model, batch: RayBatch, cfg: PipelineConfig, rng: np.random.Generator):
    """Render the batch and combine all objective terms.

    Returns (scalar torch loss, LossReport). Rays lacking a prior contribute
    nothing to that prior's term.
    """
    dtype = next(model.sdf.parameters()).dtype
    out = render_rays(
        model.sdf, model.radiance, batch.origins, batch.dirs, cfg, model.beta, rng,
        num_samples=cfg.samples_per_ray,
    )
    obs = torch.as_tensor(batch.colors, dtype=dtype)
    term_rgb = rgb_loss(out.color, obs)

    surface = None
    hits = np.asarray(out.hits, dtype=bool)
    if hits.any():
        d = out.depth.detach().numpy()[hits]
        surface = batch.origins[hits] + d[:, None] * batch.dirs[hits]
    samples = eikonal_samples(len(batch), cfg.bound_radius, rng, surface_points=surface)
    term_eik = eikonal_loss(model.sdf, samples)

    term_fg = mask_loss(out.opacity, torch.as_tensor(batch.fg, dtype=dtype))

    zero = torch.zeros((), dtype=dtype)
    fit = ScaleShift(1.0, 0.0, False)
    term_depth = zero
    dv = batch.depth_valid
    if dv.any():
        pred_d = out.depth[torch.as_tensor(dv)]
        prior_d = torch.as_tensor(batch.depth[dv], dtype=dtype)
        fit = solve_scale_shift(pred_d, prior_d)
        term_depth = depth_loss(pred_d, prior_d, fit)

    term_normal = zero
    nv = batch.normal_valid
    if nv.any():
        pred_n = out.normal[torch.as_tensor(nv)]
        prior_n = torch.as_tensor(batch.normal[nv], dtype=dtype)
        term_normal = normal_loss(pred_n, prior_n)

    total = (
        term_rgb
        + cfg.lambda1 * term_eik
        + cfg.lambda2 * term_fg
        + cfg.lambda3 * term_depth
        + cfg.lambda4 * term_normal
    )
    vals = [_scalar(t) for t in (term_rgb, term_eik, term_fg, term_depth, term_normal)]
    report = LossReport(
        rgb=vals[0],
        eikonal=vals[1],
        fg=vals[2],
        depth=vals[3],
        normal=vals[4],
        total=vals[0] + cfg.lambda1 * vals[1] + cfg.lambda2 * vals[2]
        + cfg.lambda3 * vals[3] + cfg.lambda4 * vals[4],
        w=_scalar(fit.w),
        q=_scalar(fit.q),
        degenerate_fit=bool(fit.degenerate),
    )
    return total, report
