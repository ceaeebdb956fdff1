"""Training loop: masked pixel sampling, gradients, Adam, checkpoints.

Every stochastic choice flows from a single numpy Generator seeded by the
config, so a full run (and its checkpoint bytes) is reproducible.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import assets, losses, synth
from .errors import (
    ConfigError,
    NumericError,
    ValidationError,
    ViewSkippedWarning,
)
from .field import ReconstructionModel, build_model, load_checkpoint, save_checkpoint
from .geometry import rays_for_pixels
from .losses import LossReport, RayBatch


@dataclass
class ViewRecord:
    """One view with its priors; pixel pools are precomputed for sampling."""

    image: assets.ImageBuffer
    camera: assets.CameraRecord
    mask: np.ndarray                 # (h, w) bool
    depth: np.ndarray | None         # (h, w) ray units at foreground pixels
    normal: np.ndarray | None        # (h, w, 3) world-frame unit at foreground
    fg_idx: np.ndarray = None        # flat indices of mask==1
    bg_idx: np.ndarray = None        # flat indices of mask==0 inside dilated bbox

    def build_pools(self, dilate_px: int) -> None:
        h, w = self.mask.shape
        flat = self.mask.ravel()
        self.fg_idx = np.flatnonzero(flat)
        if len(self.fg_idx) == 0:
            self.bg_idx = np.empty(0, dtype=np.int64)
            return
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        r0, r1 = max(rows[0] - dilate_px, 0), min(rows[-1] + dilate_px, h - 1)
        c0, c1 = max(cols[0] - dilate_px, 0), min(cols[-1] + dilate_px, w - 1)
        box = np.zeros((h, w), dtype=bool)
        box[r0 : r1 + 1, c0 : c1 + 1] = True
        self.bg_idx = np.flatnonzero(box.ravel() & ~flat)


@dataclass
class Dataset:
    views: list[ViewRecord]
    has_depth: bool
    has_normal: bool

    def __post_init__(self):
        if not self.views:
            raise ValidationError("dataset has no views")
        for i, v in enumerate(self.views):
            h, w = v.mask.shape
            if (v.image.height, v.image.width) != (h, w):
                raise ValidationError(f"view {i}: image/mask size mismatch")
            if (v.camera.height, v.camera.width) != (h, w):
                raise ValidationError(f"view {i}: camera/image size mismatch")
            if self.has_depth != (v.depth is not None) or self.has_normal != (
                v.normal is not None
            ):
                raise ValidationError("views disagree on prior availability")
            if v.depth is not None and v.depth.shape != (h, w):
                raise ValidationError(f"view {i}: depth size mismatch")
            if v.normal is not None and v.normal.shape != (h, w, 3):
                raise ValidationError(f"view {i}: normal size mismatch")


def load_dataset(dataset_dir, cfg: assets.PipelineConfig) -> Dataset:
    """Read a dataset directory, apply the configured enhancer, and rotate
    camera-frame prior normals into world frame."""
    root = Path(dataset_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"{dataset_dir}: missing manifest.json") from exc
    if cfg.enhancer not in synth.ENHANCERS:
        raise ConfigError(f"unknown enhancer {cfg.enhancer!r}")
    enhance = synth.ENHANCERS[cfg.enhancer]
    cams = assets.read_pose_file(root / "poses.txt")
    entries = manifest["views"]
    if len(cams) != len(entries):
        raise ValidationError("poses.txt and manifest disagree on view count")
    has_depth = bool(manifest.get("has_depth", False))
    has_normal = bool(manifest.get("has_normal", False))
    camera_frame = manifest.get("normal_frame", "camera") == "camera"
    views = []
    for cam, entry in zip(cams, entries):
        img = enhance(assets.read_image(root / entry["image"]))
        mask_img = assets.read_image(root / entry["mask"])
        mask_vals = mask_img.pixels[..., 0]
        if not np.isin(mask_vals, (0.0, 1.0)).all():
            raise ValidationError(f"{entry['mask']}: mask is not binary")
        mask = mask_vals.astype(bool)
        depth = normal = None
        if has_depth:
            depth = assets.read_tensor(root / entry["depth"]).astype(np.float64)
        if has_normal:
            normal = assets.read_tensor(root / entry["normal"]).astype(np.float64)
            if camera_frame:
                normal = normal @ cam.rotation.T  # camera rows -> world rows
            norms = np.linalg.norm(normal, axis=-1, keepdims=True)
            normal = np.where(norms > 1e-6, normal / np.maximum(norms, 1e-12), 0.0)
        view = ViewRecord(img, cam, mask, depth, normal)
        view.build_pools(cfg.dilate_px)
        views.append(view)
    return Dataset(views, has_depth, has_normal)


def sample_pixel_batch(
    ds: Dataset, batch_size: int, fg_fraction: float, rng: np.random.Generator
) -> RayBatch:
    """Draw rays mostly from foreground pixels; the background remainder comes
    from inside the dilated foreground bounding box and carries only color and
    a zero mask label."""
    usable = []
    for i, v in enumerate(ds.views):
        if len(v.fg_idx) == 0:
            warnings.warn(f"view {i} has an empty mask; skipped", ViewSkippedWarning)
        else:
            usable.append(v)
    if not usable:
        raise ValidationError("no view has foreground pixels")
    n_fg = math.ceil(fg_fraction * batch_size)
    origins = np.empty((batch_size, 3))
    dirs = np.empty((batch_size, 3))
    colors = np.empty((batch_size, 3))
    fg = np.empty(batch_size)
    depth = np.zeros(batch_size)
    depth_valid = np.zeros(batch_size, dtype=bool)
    normal = np.zeros((batch_size, 3))
    normal_valid = np.zeros(batch_size, dtype=bool)
    for i in range(batch_size):
        view = usable[rng.integers(len(usable))]
        pool = view.fg_idx if (i < n_fg or len(view.bg_idx) == 0) else view.bg_idx
        flat = pool[rng.integers(len(pool))]
        h, w = view.mask.shape
        py, px = divmod(int(flat), w)
        o, d = rays_for_pixels(view.camera, np.array([px], float), np.array([py], float))
        origins[i], dirs[i] = o[0], d[0]
        pix = view.image.pixels[py, px]
        colors[i] = pix if view.image.channels == 3 else np.repeat(pix, 3)
        is_fg = bool(view.mask[py, px])
        fg[i] = float(is_fg)
        if is_fg and ds.has_depth:
            depth[i] = view.depth[py, px]
            depth_valid[i] = True
        if is_fg and ds.has_normal:
            normal[i] = view.normal[py, px]
            normal_valid[i] = True
    return RayBatch(origins, dirs, colors, fg, depth, depth_valid, normal, normal_valid)


def compute_gradients(model: ReconstructionModel, batch: RayBatch,
                      cfg: assets.PipelineConfig, rng: np.random.Generator):
    """Gradients of the total loss for every parameter; parameters untouched."""
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericError(f"non-finite parameter {name!r} before gradient step")
    total, report = losses.total_loss(model, batch, cfg, rng)
    for term in ("rgb", "eikonal", "fg", "depth", "normal"):
        if not math.isfinite(getattr(report, term)):
            raise NumericError(f"non-finite {term} loss term")
    params = model.parameters()
    grads = torch.autograd.grad(total, params, allow_unused=True)
    grads = [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]
    return grads, report


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter list."""

    step: int
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            0,
            [torch.zeros_like(p) for p in params],
            [torch.zeros_like(p) for p in params],
        )


def adam_step(params, grads, state: AdamState, lr: float):
    """Bias-corrected Adam update, in place on the parameter tensors."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValidationError("parameter/gradient/state lengths disagree")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if p.shape != g.shape:
                raise ValidationError("gradient shape mismatch")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.addcdiv_(m / c1, (v / c2).sqrt().add_(state.eps), value=-lr)
    return params, state


def cosine_lr(iteration: int, total: int, lr0: float, lr1: float) -> float:
    """Cosine decay from lr0 to lr1 over ``total`` iterations."""
    if total <= 1:
        return lr0
    frac = min(max(iteration / (total - 1), 0.0), 1.0)
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * frac))


def _optimizer_state_to_dict(model: ReconstructionModel, state: AdamState) -> dict:
    names = [n for n, _ in model.named_parameters()]
    tensors = {}
    for name, m, v in zip(names, state.m, state.v):
        tensors[f"m.{name}"] = m.numpy()
        tensors[f"v.{name}"] = v.numpy()
    return {"step": state.step, "tensors": tensors}


def _optimizer_state_from_dict(model: ReconstructionModel, data: dict) -> AdamState:
    params = model.parameters()
    names = [n for n, _ in model.named_parameters()]
    state = AdamState.for_params(params)
    state.step = int(data["step"])
    for i, (name, p) in enumerate(zip(names, params)):
        state.m[i] = torch.as_tensor(
            np.asarray(data["tensors"][f"m.{name}"]).reshape(p.shape), dtype=p.dtype
        )
        state.v[i] = torch.as_tensor(
            np.asarray(data["tensors"][f"v.{name}"]).reshape(p.shape), dtype=p.dtype
        )
    return state


def _checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:06d}"


def find_latest_checkpoint(out_dir) -> Path | None:
    root = Path(out_dir)
    if not root.is_dir():
        return None
    candidates = sorted(root.glob("ckpt_[0-9]*"))
    return candidates[-1] if candidates else None


def train(ds: Dataset, cfg: assets.PipelineConfig, resume: bool = False):
    """Run the optimization loop; returns (model, per-iteration log entries).

    Checkpoints land under cfg.out_dir (when set) every cfg.checkpoint_every
    iterations and at the end; log entries stream to log.jsonl there. A
    NumericError aborts the loop, leaving the last checkpoint on disk.
    """
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    start_iter = 0
    state = None
    model = None
    if resume and out_dir is not None:
        latest = find_latest_checkpoint(out_dir)
        if latest is not None:
            model, start_iter, opt = load_checkpoint(latest)
            if opt is not None:
                state = _optimizer_state_from_dict(model, opt)
    if model is None:
        model = build_model(seed=cfg.seed, beta_init=cfg.beta_init)
    params = model.parameters()
    if state is None:
        state = AdamState.for_params(params)
    rng = np.random.default_rng([cfg.seed, start_iter] if start_iter else cfg.seed)

    log: list[dict] = []
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.jsonl"
        if start_iter == 0 and log_path.exists():
            log_path.unlink()

    def checkpoint(iteration: int) -> None:
        if out_dir is not None:
            save_checkpoint(
                model, out_dir / _checkpoint_name(iteration), iteration,
                optimizer_state=_optimizer_state_to_dict(model, state),
            )

    if cfg.iterations == start_iter or cfg.iterations == 0:
        checkpoint(start_iter)
        return model, log

    t0 = time.monotonic()
    for i in range(start_iter, cfg.iterations):
        lr = cosine_lr(i, cfg.iterations, cfg.learning_rate, cfg.lr_final)
        batch = sample_pixel_batch(ds, cfg.batch_size, cfg.fg_fraction, rng)
        grads, report = compute_gradients(model, batch, cfg, rng)
        adam_step(params, grads, state, lr)
        with torch.no_grad():
            model.beta.clamp_(min=cfg.beta_min)
        entry = {
            "iteration": i + 1,
            **report.to_dict(),
            "beta": model.beta.item(),
            "lr": lr,
            "wall": time.monotonic() - t0,
        }
        log.append(entry)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if (i + 1) % cfg.checkpoint_every == 0:
            checkpoint(i + 1)
        if (i + 1) % 100 == 0 or i + 1 == cfg.iterations:
            print(
                f"iter {i + 1}/{cfg.iterations} total {report.total:.4f} "
                f"rgb {report.rgb:.4f} beta {model.beta.item():.4f}",
                flush=True,
            )
    if cfg.iterations % cfg.checkpoint_every != 0:
        checkpoint(cfg.iterations)
    return model, log
