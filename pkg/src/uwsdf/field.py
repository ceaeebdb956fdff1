"""Implicit geometry/appearance model.

The geometry field maps a 3D point to a signed distance (negative inside) and
a feature vector; the appearance field maps (feature, view direction) to RGB.
Analytic distance fields (sphere/box/torus) provide exact oracles with the
same call surface, so the renderer can run against either.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import assets
from .errors import FormatError, NumericError, ShapeError, ValidationError


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PositionalEncoding:
    """Sinusoidal encoding: [x, sin(2^0 pi x), cos(2^0 pi x), ..., 2^(L-1)]."""

    num_frequencies: int = 6

    def width(self, input_dim: int = 3) -> int:
        return input_dim * (2 * self.num_frequencies + 1)


def encode(x, enc: PositionalEncoding):
    """Apply the sinusoidal encoding along the last axis.

    Accepts torch tensors (graph-preserving) or numpy arrays.
    """
    is_np = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(np.asarray(x, dtype=np.float64)) if is_np else x
    parts = [t]
    for k in range(enc.num_frequencies):
        f = (2.0**k) * math.pi
        parts.append(torch.sin(f * t))
        parts.append(torch.cos(f * t))
    out = torch.cat(parts, dim=-1)
    return out.numpy() if is_np else out


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def _normal_(w: torch.Tensor, mean: float, std: float, generator) -> None:
    with torch.no_grad():
        w.normal_(mean, std, generator=generator)


class SdfNetwork(nn.Module):
    """MLP returning (signed distance, feature vector) for 3D points.

    Geometric initialization biases the untrained field toward a sphere of
    ``init_radius``, which keeps early volume rendering well conditioned.
    """

    def __init__(
        self,
        hidden_dim: int = 128,
        num_hidden: int = 4,
        feature_dim: int = 64,
        encoding: PositionalEncoding = PositionalEncoding(6),
        softplus_beta: float = 100.0,
        init_radius: float = 0.5,
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.encoding = encoding
        self.feature_dim = feature_dim
        self.softplus_beta = softplus_beta
        self.init_radius = init_radius
        dims = [encoding.width(3)] + [hidden_dim] * num_hidden + [1 + feature_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=dtype) for i in range(len(dims) - 1)
        )
        self._geometric_init(generator)

    def _geometric_init(self, generator) -> None:
        n = len(self.layers)
        for i, lin in enumerate(self.layers):
            with torch.no_grad():
                lin.bias.zero_()
            if i == n - 1:
                _normal_(
                    lin.weight,
                    math.sqrt(math.pi) / math.sqrt(lin.in_features),
                    1e-4,
                    generator,
                )
                with torch.no_grad():
                    lin.bias.fill_(-self.init_radius)
            else:
                _normal_(
                    lin.weight, 0.0, math.sqrt(2.0) / math.sqrt(lin.out_features), generator
                )
                if i == 0:
                    # Encoded channels start at zero weight so the init acts on
                    # raw coordinates only (first 3 columns of the encoding).
                    with torch.no_grad():
                        lin.weight[:, 3:].zero_()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = encode(x, self.encoding)
        for i, lin in enumerate(self.layers):
            h = lin(h)
            if i < len(self.layers) - 1:
                h = F.softplus(h, beta=self.softplus_beta)
        return h[..., 0], h[..., 1:]

    def sdf_and_feature(self, x: torch.Tensor):
        return self.forward(x)

    def gradient(self, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
        with torch.enable_grad():
            xg = x.detach().clone().requires_grad_(True)
            s, _ = self.forward(xg)
            (grad,) = torch.autograd.grad(s.sum(), xg, create_graph=create_graph)
        return grad

    def sdf_feature_gradient(self, x: torch.Tensor, create_graph: bool = False):
        """Single forward returning (s, z, grad_x s); grads share the graph."""
        with torch.enable_grad():
            xg = x if x.requires_grad else x.detach().clone().requires_grad_(True)
            s, z = self.forward(xg)
            (grad,) = torch.autograd.grad(
                s, xg, torch.ones_like(s), create_graph=create_graph, retain_graph=True
            )
        return s, z, grad


class RadianceNetwork(nn.Module):
    """MLP mapping (geometry feature, view direction) to sigmoid-bounded RGB."""

    def __init__(
        self,
        feature_dim: int = 64,
        hidden_dim: int = 64,
        num_hidden: int = 2,
        dir_encoding: PositionalEncoding = PositionalEncoding(4),
        softplus_beta: float = 100.0,
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.feature_dim = feature_dim
        self.dir_encoding = dir_encoding
        self.softplus_beta = softplus_beta
        dims = [feature_dim + dir_encoding.width(3)] + [hidden_dim] * num_hidden + [3]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=dtype) for i in range(len(dims) - 1)
        )
        for lin in self.layers:
            _normal_(lin.weight, 0.0, math.sqrt(2.0) / math.sqrt(lin.out_features), generator)
            with torch.no_grad():
                lin.bias.zero_()

    def forward(self, z: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.feature_dim:
            raise ShapeError(
                f"feature width {z.shape[-1]} != expected {self.feature_dim}"
            )
        if v.shape[-1] != 3 or v.shape[:-1] != z.shape[:-1]:
            raise ShapeError(f"direction shape {tuple(v.shape)} incompatible with features")
        h = torch.cat([z, encode(v, self.dir_encoding)], dim=-1)
        for i, lin in enumerate(self.layers):
            h = lin(h)
            if i < len(self.layers) - 1:
                h = F.softplus(h, beta=self.softplus_beta)
        return torch.sigmoid(h)

    def radiance(self, z: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return self.forward(z, v)


def _check_finite_params(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericError(f"non-finite parameter {name!r}")


def _as_points_tensor(x, dtype):
    """Normalize (3,) / (n, 3) numpy-or-torch input; returns (tensor, was_np, was_single)."""
    if isinstance(x, torch.Tensor):
        t = x
        was_np = False
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)
        was_np = True
    single = t.ndim == 1
    if single:
        t = t[None, :]
    if t.shape[-1] != 3:
        raise ShapeError(f"points must be 3-vectors, got shape {tuple(t.shape)}")
    return t.to(dtype) if t.dtype != dtype else t, was_np, single


def eval_sdf(f, x):
    """Evaluate (signed distance, feature) at x; accepts (3,) or (n, 3)."""
    if isinstance(f, AnalyticField):
        s = analytic_sdf(f, x)
        z = np.asarray(x, dtype=np.float64) if not isinstance(x, torch.Tensor) else x
        return s, z
    _check_finite_params(f)
    dtype = next(f.parameters()).dtype
    t, was_np, single = _as_points_tensor(x, dtype)
    s, z = f.forward(t)
    if single:
        s, z = s[0], z[0]
    if was_np:
        return (s.item() if single else s.detach().numpy()), z.detach().numpy()
    return s, z


def eval_radiance(f: RadianceNetwork, z, v):
    """Evaluate view-dependent RGB in [0,1]^3 for feature z and unit direction v."""
    _check_finite_params(f)
    dtype = next(f.parameters()).dtype
    was_np = not isinstance(z, torch.Tensor)
    zt = torch.as_tensor(np.asarray(z, dtype=np.float64), dtype=dtype) if was_np else z
    vt = torch.as_tensor(np.asarray(v, dtype=np.float64), dtype=dtype) if not isinstance(v, torch.Tensor) else v
    single = zt.ndim == 1
    if single:
        zt, vt = zt[None], vt[None]
    rgb = f.forward(zt, vt.to(zt.dtype))
    if single:
        rgb = rgb[0]
    return rgb.detach().numpy() if was_np else rgb


def sdf_gradient(f, x, create_graph: bool = False):
    """Spatial gradient of the signed distance at x (analytic or autograd)."""
    if isinstance(f, AnalyticField):
        return analytic_gradient(f, x)
    dtype = next(f.parameters()).dtype
    t, was_np, single = _as_points_tensor(x, dtype)
    g = f.gradient(t, create_graph=create_graph)
    if single:
        g = g[0]
    return g.detach().numpy() if was_np else g


# ---------------------------------------------------------------------------
# analytic oracle fields
# ---------------------------------------------------------------------------

def _split_xyz(x):
    return x[..., 0], x[..., 1], x[..., 2]


@dataclass
class AnalyticField:
    """Exact signed-distance field with Lambertian shading attributes.

    ``albedo`` is a constant RGB reflectance; ``light_direction`` points from
    the surface toward the light (unit vector).
    """

    albedo: tuple = (0.8, 0.7, 0.6)
    light_direction: tuple = (0.408248290463863, -0.408248290463863, 0.816496580927726)

    def __post_init__(self):
        l = np.asarray(self.light_direction, dtype=np.float64)
        self.light_direction = tuple(l / np.linalg.norm(l))
        self.albedo = tuple(float(a) for a in self.albedo)

    # subclasses implement _sdf / _gradient on either numpy or torch arrays
    def sdf(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def bounding_radius(self) -> float:
        raise NotImplementedError

    def sdf_and_feature(self, x):
        """Renderer-facing surface; the feature is the point itself."""
        return self.sdf(x), x


@dataclass
class SphereField(AnalyticField):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5

    def __post_init__(self):
        super().__post_init__()
        if self.radius <= 0:
            raise ValidationError("sphere radius must be positive")
        self.center = tuple(float(c) for c in self.center)

    def sdf(self, x):
        if isinstance(x, torch.Tensor):
            c = torch.as_tensor(self.center, dtype=x.dtype)
            return torch.linalg.norm(x - c, dim=-1) - self.radius
        d = np.asarray(x, dtype=np.float64) - np.asarray(self.center)
        return np.linalg.norm(d, axis=-1) - self.radius

    def gradient(self, x):
        if isinstance(x, torch.Tensor):
            d = x - torch.as_tensor(self.center, dtype=x.dtype)
            n = torch.linalg.norm(d, dim=-1, keepdim=True).clamp_min(1e-12)
            return d / n
        d = np.asarray(x, dtype=np.float64) - np.asarray(self.center)
        n = np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)
        return d / n

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center) + self.radius)


@dataclass
class BoxField(AnalyticField):
    half_extents: tuple = (0.4, 0.3, 0.25)

    def __post_init__(self):
        super().__post_init__()
        if any(h <= 0 for h in self.half_extents):
            raise ValidationError("box half-extents must be positive")
        self.half_extents = tuple(float(h) for h in self.half_extents)

    def sdf(self, x):
        if isinstance(x, torch.Tensor):
            h = torch.as_tensor(self.half_extents, dtype=x.dtype)
            q = x.abs() - h
            outside = torch.linalg.norm(q.clamp_min(0.0), dim=-1)
            inside = q.amax(dim=-1).clamp_max(0.0)
            return outside + inside
        q = np.abs(np.asarray(x, dtype=np.float64)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def gradient(self, x):
        if isinstance(x, torch.Tensor):
            h = torch.as_tensor(self.half_extents, dtype=x.dtype)
            q = x.abs() - h
            qpos = q.clamp_min(0.0)
            norm = torch.linalg.norm(qpos, dim=-1, keepdim=True)
            out_grad = qpos / norm.clamp_min(1e-12) * torch.sign(x)
            axis = q.argmax(dim=-1, keepdim=True)
            in_grad = torch.zeros_like(x).scatter(-1, axis, 1.0) * torch.sign(x)
            return torch.where(norm > 0, out_grad, in_grad)
        xa = np.asarray(x, dtype=np.float64)
        q = np.abs(xa) - np.asarray(self.half_extents)
        qpos = np.maximum(q, 0.0)
        norm = np.linalg.norm(qpos, axis=-1, keepdims=True)
        sign = np.where(xa >= 0, 1.0, -1.0)
        out_grad = qpos / np.maximum(norm, 1e-12) * sign
        in_grad = np.zeros_like(xa)
        idx = np.argmax(q, axis=-1)
        np.put_along_axis(in_grad, idx[..., None], 1.0, axis=-1)
        in_grad *= sign
        return np.where(norm > 0, out_grad, in_grad)

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half_extents))


@dataclass
class TorusField(AnalyticField):
    """Torus around the z axis: ring radius ``ring`` and tube radius ``tube``."""

    ring: float = 0.35
    tube: float = 0.12

    def __post_init__(self):
        super().__post_init__()
        if self.ring <= 0 or self.tube <= 0 or self.tube >= self.ring:
            raise ValidationError("need 0 < tube < ring")

    def sdf(self, x):
        xx, yy, zz = _split_xyz(x)
        if isinstance(x, torch.Tensor):
            ell = torch.sqrt(xx * xx + yy * yy)
            return torch.sqrt((ell - self.ring) ** 2 + zz * zz) - self.tube
        ell = np.sqrt(xx * xx + yy * yy)
        return np.sqrt((ell - self.ring) ** 2 + zz * zz) - self.tube

    def gradient(self, x):
        xx, yy, zz = _split_xyz(x)
        if isinstance(x, torch.Tensor):
            ell = torch.sqrt(xx * xx + yy * yy).clamp_min(1e-12)
            d = torch.sqrt((ell - self.ring) ** 2 + zz * zz).clamp_min(1e-12)
            k = (ell - self.ring) / (d * ell)
            return torch.stack([xx * k, yy * k, zz / d], dim=-1)
        ell = np.maximum(np.sqrt(xx * xx + yy * yy), 1e-12)
        d = np.maximum(np.sqrt((ell - self.ring) ** 2 + zz * zz), 1e-12)
        k = (ell - self.ring) / (d * ell)
        return np.stack([xx * k, yy * k, zz / d], axis=-1)

    def bounding_radius(self) -> float:
        return float(self.ring + self.tube)


def analytic_sdf(f: AnalyticField, x):
    """Exact signed distance of an analytic field, negative inside."""
    return f.sdf(x if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64))


def analytic_gradient(f: AnalyticField, x):
    return f.gradient(x if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64))


class LambertianAppearance:
    """Shade an analytic field: albedo * max(0, n . l).

    The renderer hands back the point as the feature, so the normal can be
    recovered from the field's own gradient.
    """

    def __init__(self, field: AnalyticField):
        self.field = field

    def radiance(self, z, v):
        n = self.field.gradient(z)
        if isinstance(z, torch.Tensor):
            n = n / torch.linalg.norm(n, dim=-1, keepdim=True).clamp_min(1e-12)
            l = torch.as_tensor(self.field.light_direction, dtype=z.dtype)
            lam = (n @ l).clamp_min(0.0)[..., None]
            return lam * torch.as_tensor(self.field.albedo, dtype=z.dtype)
        n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
        lam = np.maximum(n @ np.asarray(self.field.light_direction), 0.0)[..., None]
        return lam * np.asarray(self.field.albedo)


# ---------------------------------------------------------------------------
# trainable model bundle + checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ReconstructionModel:
    """The trainable trio: geometry MLP, radiance MLP, density sharpness beta."""

    sdf: SdfNetwork
    radiance: RadianceNetwork
    beta: torch.nn.Parameter

    def parameters(self) -> list[torch.nn.Parameter]:
        return list(self.sdf.parameters()) + list(self.radiance.parameters()) + [self.beta]

    def named_parameters(self) -> list[tuple[str, torch.nn.Parameter]]:
        out = [(f"sdf.{n}", p) for n, p in self.sdf.named_parameters()]
        out += [(f"radiance.{n}", p) for n, p in self.radiance.named_parameters()]
        out.append(("beta", self.beta))
        return out

    @property
    def arch(self) -> dict:
        sdf_dims = [lin.out_features for lin in self.sdf.layers]
        return {
            "sdf_hidden_dim": sdf_dims[0],
            "sdf_num_hidden": len(sdf_dims) - 1,
            "feature_dim": self.sdf.feature_dim,
            "pos_frequencies": self.sdf.encoding.num_frequencies,
            "dir_frequencies": self.radiance.dir_encoding.num_frequencies,
            "softplus_beta": self.sdf.softplus_beta,
            "init_radius": self.sdf.init_radius,
            "radiance_hidden_dim": self.radiance.layers[0].out_features,
            "radiance_num_hidden": len(self.radiance.layers) - 1,
        }


def build_model(
    seed: int = 0,
    beta_init: float = 0.1,
    dtype: torch.dtype = torch.float32,
    *,
    sdf_hidden_dim: int = 128,
    sdf_num_hidden: int = 4,
    feature_dim: int = 64,
    pos_frequencies: int = 6,
    dir_frequencies: int = 4,
    softplus_beta: float = 100.0,
    init_radius: float = 0.5,
    radiance_hidden_dim: int = 64,
    radiance_num_hidden: int = 2,
) -> ReconstructionModel:
    gen = torch.Generator().manual_seed(int(seed))
    sdf = SdfNetwork(
        hidden_dim=sdf_hidden_dim,
        num_hidden=sdf_num_hidden,
        feature_dim=feature_dim,
        encoding=PositionalEncoding(pos_frequencies),
        softplus_beta=softplus_beta,
        init_radius=init_radius,
        dtype=dtype,
        generator=gen,
    )
    radiance = RadianceNetwork(
        feature_dim=feature_dim,
        hidden_dim=radiance_hidden_dim,
        num_hidden=radiance_num_hidden,
        dir_encoding=PositionalEncoding(dir_frequencies),
        softplus_beta=softplus_beta,
        dtype=dtype,
        generator=gen,
    )
    beta = torch.nn.Parameter(torch.tensor(float(beta_init), dtype=dtype))
    return ReconstructionModel(sdf, radiance, beta)


def save_checkpoint(
    model: ReconstructionModel,
    ckpt_dir,
    iteration: int,
    optimizer_state: dict | None = None,
) -> None:
    """Write manifest.json plus one UWTF tensor per parameter (all float32)."""
    ckpt = Path(ckpt_dir)
    (ckpt / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, p) in enumerate(model.named_parameters()):
        rel = f"params/p{i:03d}.uwtf"
        arr = p.detach().to(torch.float32).numpy()
        arr = arr.reshape(1) if arr.ndim == 0 else arr
        assets.write_tensor(arr, ckpt / rel)
        entries.append({"name": name, "shape": list(arr.shape), "file": rel})
    manifest = {"format": 1, "iteration": int(iteration), "arch": model.arch, "params": entries}
    if optimizer_state is not None:
        (ckpt / "optim").mkdir(exist_ok=True)
        opt_entries = []
        for i, (name, arr) in enumerate(sorted(optimizer_state["tensors"].items())):
            rel = f"optim/o{i:03d}.uwtf"
            a = np.asarray(arr, dtype=np.float32)
            assets.write_tensor(a.reshape(1) if a.ndim == 0 else a, ckpt / rel)
            opt_entries.append({"name": name, "shape": list(np.shape(arr)), "file": rel})
        manifest["optimizer"] = {"step": int(optimizer_state["step"]), "tensors": opt_entries}
    (ckpt / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(ckpt_dir, dtype: torch.dtype = torch.float32):
    """Rebuild a model from a checkpoint directory.

    Returns (model, iteration, optimizer_state-or-None).
    """
    ckpt = Path(ckpt_dir)
    try:
        manifest = json.loads((ckpt / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{ckpt_dir}: missing manifest.json") from exc
    arch = manifest["arch"]
    model = build_model(seed=0, beta_init=1.0, dtype=dtype, **{
        k: arch[k] for k in (
            "sdf_hidden_dim", "sdf_num_hidden", "feature_dim", "pos_frequencies",
            "dir_frequencies", "softplus_beta", "init_radius",
            "radiance_hidden_dim", "radiance_num_hidden",
        )
    })
    params = dict(model.named_parameters())
    for entry in manifest["params"]:
        arr = assets.read_tensor(ckpt / entry["file"])
        p = params[entry["name"]]
        if list(arr.shape) != list(p.shape) and not (p.ndim == 0 and arr.size == 1):
            raise FormatError(f"checkpoint shape mismatch for {entry['name']}")
        with torch.no_grad():
            p.copy_(torch.as_tensor(arr.reshape(p.shape), dtype=dtype))
    opt_state = None
    if "optimizer" in manifest:
        tensors = {
            e["name"]: assets.read_tensor(ckpt / e["file"]).reshape(e["shape"] or (1,))
            for e in manifest["optimizer"]["tensors"]
        }
        opt_state = {"step": manifest["optimizer"]["step"], "tensors": tensors}
    return model, int(manifest["iteration"]), opt_state
