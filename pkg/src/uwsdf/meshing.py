"""Isosurface extraction from an implicit field."""

from __future__ import annotations

import numpy as np
import torch
from skimage import measure

from .assets import TriangleMesh
from .errors import EmptySurfaceError, NumericError, ValidationError
from .field import AnalyticField


def _evaluate_field(field, pts: np.ndarray) -> np.ndarray:
    """Field values at (n, 3) points for analytic fields, SDF networks, or
    plain callables."""
    if isinstance(field, AnalyticField):
        return np.asarray(field.sdf(pts), dtype=np.float64)
    if isinstance(field, torch.nn.Module):
        dtype = next(field.parameters()).dtype
        vals = np.empty(len(pts))
        with torch.no_grad():
            for lo in range(0, len(pts), 65536):
                chunk = torch.as_tensor(pts[lo : lo + 65536], dtype=dtype)
                s, _ = field.forward(chunk)
                vals[lo : lo + 65536] = s.numpy()
        return vals
    return np.asarray(field(pts), dtype=np.float64)


def marching_cubes(field, bounds, res: int, iso: float = 0.0) -> TriangleMesh:
    """Extract the ``iso`` level set on a (res+1)^3 grid over ``bounds``
    ((3,) lower corner, (3,) upper corner) with linear edge interpolation.

    Raises EmptySurfaceError when the level never crosses the grid values.
    """
    if res < 8:
        raise ValidationError("grid resolution must be >= 8")
    lo = np.broadcast_to(np.asarray(bounds[0], dtype=np.float64), (3,))
    hi = np.broadcast_to(np.asarray(bounds[1], dtype=np.float64), (3,))
    if not (hi > lo).all():
        raise ValidationError("bounds must span a positive box")
    axes = [np.linspace(lo[k], hi[k], res + 1) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vol = _evaluate_field(field, grid).reshape(res + 1, res + 1, res + 1)
    if not np.isfinite(vol).all():
        raise NumericError("field produced non-finite values on the grid")
    if vol.min() >= iso or vol.max() <= iso:
        raise EmptySurfaceError("level set does not cross the sampled grid")
    spacing = tuple((hi - lo) / res)
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=spacing)
    verts = verts + lo
    a, b, c = (verts[faces[:, k]] for k in range(3))
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    return TriangleMesh(verts.astype(np.float64), faces[area2 > 0].astype(np.int64))


def sample_mesh_points(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform surface samples, (n, 3)."""
    if len(mesh.faces) == 0:
        raise ValidationError("mesh has no faces")
    if n < 1:
        raise ValidationError("need at least one sample")
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValidationError("mesh has zero total area")
    idx = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    w0, w1, w2 = 1.0 - su, su * (1.0 - v), su * v
    return w0[:, None] * a[idx] + w1[:, None] * b[idx] + w2[:, None] * c[idx]
