"""File IO: tensors, PPM/PGM images, camera poses, OBJ meshes, run configuration.

All readers and writers are stateless; concurrent use on distinct paths is safe.
Formats are deliberately minimal and language-neutral:

* tensors:  magic ``UWTF``, u32 LE ndim, ndim x u32 LE dims, f32 LE row-major payload
* images:   binary PPM (P6) / PGM (P5), maxval 255
* poses:    per camera one ``fx fy cx cy w h`` line plus four rows of the 4x4
  world-from-camera matrix
* meshes:   Wavefront OBJ ``v``/``f`` subset with 1-based indices
* config:   flat JSON object with documented defaults
"""

from __future__ import annotations

import dataclasses
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    IoError,
    TruncationError,
    ValidationError,
)

TENSOR_MAGIC = b"UWTF"


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------

def write_tensor(tensor: np.ndarray, path) -> None:
    """Write a float32 tensor in the UWTF container (bit-exact round trip)."""
    arr = np.asarray(tensor, dtype=np.float32)
    if arr.ndim == 0 or any(d < 1 for d in arr.shape):
        raise ValidationError(f"tensor dims must all be >= 1, got shape {arr.shape}")
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    except OSError as exc:
        raise IoError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    """Read a UWTF tensor; inverse of :func:`write_tensor`."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read tensor from {path}: {exc}") from exc
    if blob[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(blob) < 8:
        raise TruncationError(f"{path}: header truncated")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    head_end = 8 + 4 * ndim
    if len(blob) < head_end:
        raise TruncationError(f"{path}: dim list truncated")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    if ndim == 0 or any(d < 1 for d in dims):
        raise FormatError(f"{path}: illegal dims {dims}")
    count = int(np.prod(dims))
    payload = blob[head_end:]
    if len(payload) < 4 * count:
        raise TruncationError(
            f"{path}: payload holds {len(payload)} bytes, need {4 * count}"
        )
    data = np.frombuffer(payload[: 4 * count], dtype="<f4")
    return data.reshape(dims).astype(np.float32, copy=True)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

@dataclass
class ImageBuffer:
    """Float image with values in [0, 1]; ``pixels`` has shape (h, w, c), c in {1, 3}."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValidationError(f"image must be (h, w, 1|3), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValidationError("image dimensions must be positive")
        if float(px.min()) < 0.0 or float(px.max()) > 1.0:
            raise ValidationError("image values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def _read_pnm_tokens(blob: bytes, n: int, start: int) -> tuple[list[bytes], int]:
    """Read n whitespace-separated header tokens, honoring ``#`` comments."""
    tokens: list[bytes] = []
    i = start
    while len(tokens) < n:
        if i >= len(blob):
            raise FormatError("image header truncated")
        c = blob[i : i + 1]
        if c == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j : j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    return tokens, i + 1  # skip the single whitespace after the last token


def read_image(path) -> ImageBuffer:
    """Read a binary PPM (P6) or PGM (P5) with maxval 255; values become raw/255."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read image from {path}: {exc}") from exc
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported image magic {magic!r}")
    channels = 3 if magic == b"P6" else 1
    (w_tok, h_tok, maxval_tok), data_start = _read_pnm_tokens(blob, 3, 2)
    try:
        w, h, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric image header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"{path}: illegal image size {w}x{h}")
    need = w * h * channels
    raw = blob[data_start : data_start + need]
    if len(raw) < need:
        raise TruncationError(f"{path}: pixel data truncated ({len(raw)}/{need})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    return ImageBuffer(arr.astype(np.float32) / 255.0)


def write_image(img: ImageBuffer, path) -> None:
    """Write PPM/PGM with round-to-nearest quantization; inverse of read_image."""
    magic = b"P6" if img.channels == 3 else b"P5"
    quant = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(magic + b"\n%d %d\n255\n" % (img.width, img.height))
            fh.write(quant.tobytes(order="C"))
    except OSError as exc:
        raise IoError(f"cannot write image to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass
class CameraRecord:
    """Pinhole camera: intrinsics in pixels plus a rigid world-from-camera transform.

    Camera space looks down -z with y down in pixel space (COLMAP-compatible);
    pixel centers sit at +0.5 offsets.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_from_camera: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be positive")
        m = np.asarray(self.world_from_camera, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValidationError(f"world_from_camera must be 4x4, got {m.shape}")
        r = m[:3, :3]
        err = float(np.abs(r @ r.T - np.eye(3)).max())
        if err > 1e-3:
            raise ValidationError(f"rotation block not orthonormal (error {err:.2e})")
        if err > 1e-5:
            # Snap to the nearest rotation so the stored record always meets
            # the 1e-5 orthonormality invariant.
            u, _, vt = np.linalg.svd(r)
            r = u @ vt
            if np.linalg.det(r) < 0:
                u[:, -1] *= -1.0
                r = u @ vt
            m = m.copy()
            m[:3, :3] = r
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValidationError("last row of world_from_camera must be [0 0 0 1]")
        self.world_from_camera = m

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]


def read_pose_file(path) -> list[CameraRecord]:
    """Read cameras in file order; rotation orthonormality is validated."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read poses from {path}: {exc}") from exc
    lines = [ln for ln in (raw.strip() for raw in text.splitlines()) if ln]
    if len(lines) % 5 != 0:
        raise FormatError(f"{path}: expected 5 lines per camera, got {len(lines)} lines")
    cams = []
    for i in range(0, len(lines), 5):
        head = lines[i].split()
        if len(head) != 6:
            raise FormatError(f"{path}: bad intrinsics line {lines[i]!r}")
        try:
            fx, fy, cx, cy = (float(v) for v in head[:4])
            w, h = int(head[4]), int(head[5])
            rows = [[float(v) for v in lines[i + 1 + r].split()] for r in range(4)]
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric pose entry near line {i}") from exc
        if any(len(row) != 4 for row in rows):
            raise FormatError(f"{path}: matrix row with wrong entry count near line {i}")
        cams.append(CameraRecord(fx, fy, cx, cy, w, h, np.array(rows, dtype=np.float64)))
    return cams


def write_pose_file(cams: list[CameraRecord], path) -> None:
    """Write cameras in the text format accepted by :func:`read_pose_file`."""
    out = []
    for cam in cams:
        out.append(
            f"{cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} {cam.cy:.17g} "
            f"{cam.width} {cam.height}"
        )
        for row in cam.world_from_camera:
            out.append(" ".join(f"{v:.17g}" for v in row))
        out.append("")
    try:
        Path(path).write_text("\n".join(out))
    except OSError as exc:
        raise IoError(f"cannot write poses to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    """Triangle mesh with float64 vertices (n, 3) and int faces (m, 3)."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError("face index out of range")
        self.vertices = v
        self.faces = f


def write_mesh_obj(mesh: TriangleMesh, path) -> None:
    """Write the OBJ v/f subset with 9 significant digits."""
    out = []
    for v in mesh.vertices:
        out.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for f in mesh.faces:
        out.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    out.append("")
    try:
        Path(path).write_text("\n".join(out))
    except OSError as exc:
        raise IoError(f"cannot write mesh to {path}: {exc}") from exc


def read_mesh_obj(path) -> TriangleMesh:
    """Read the OBJ v/f subset written by :func:`write_mesh_obj`."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read mesh from {path}: {exc}") from exc
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v" and len(parts) == 4:
            try:
                verts.append([float(p) for p in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad vertex") from exc
        elif parts[0] == "f" and len(parts) == 4:
            try:
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad face") from exc
            if any(i < 0 or i >= len(verts) for i in idx):
                raise ValidationError(f"{path}:{lineno}: face index out of range")
            faces.append(idx)
        else:
            raise FormatError(f"{path}:{lineno}: unsupported OBJ element {parts[0]!r}")
    return TriangleMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
    )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    """Flat run configuration; every field has a usable default.

    Loss weights follow common practice for eikonal/prior-supervised SDF
    training and may be overridden per run.
    """

    lambda1: float = 0.1    # eikonal regularizer weight
    lambda2: float = 0.5    # foreground-mask BCE weight
    lambda3: float = 0.1    # depth prior weight
    lambda4: float = 0.05   # normal prior weight
    learning_rate: float = 5e-4
    lr_final: float = 5e-5
    iterations: int = 2000
    samples_per_ray: int = 64
    eval_samples_per_ray: int = 128
    batch_size: int = 64
    fg_fraction: float = 0.8
    beta_init: float = 0.1
    beta_min: float = 1e-4
    bound_radius: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    grid_resolution: int = 64
    seed: int = 0
    checkpoint_every: int = 1000
    enhancer: str = "identity"
    dilate_px: int = 16
    min_component: int = 16
    metric_samples: int = 100000
    distance_cap: float | None = None
    dataset_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.learning_rate <= 0 or self.lr_final <= 0:
            raise ConfigError("learning rates must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.samples_per_ray < 2 or self.eval_samples_per_ray < 2:
            raise ConfigError("samples-per-ray must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.fg_fraction <= 1.0:
            raise ConfigError("fg_fraction must lie in [0, 1]")
        if self.beta_init <= 0 or self.beta_min <= 0:
            raise ConfigError("beta values must be positive")
        if self.bound_radius <= 0:
            raise ConfigError("bound_radius must be positive")
        if self.grid_resolution < 8:
            raise ConfigError("grid_resolution must be >= 8")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.metric_samples < 1:
            raise ConfigError("metric_samples must be >= 1")
        if self.distance_cap is not None and self.distance_cap <= 0:
            raise ConfigError("distance_cap must be positive when set")
        bg = tuple(float(v) for v in self.background)
        if len(bg) != 3:
            raise ConfigError("background must be an RGB triple")
        self.background = bg


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _coerce_config_value(name: str, value):
    """Check JSON value types (bool is not a number here)."""
    want = _CONFIG_FIELDS[name].type
    if name == "background":
        if not isinstance(value, (list, tuple)) or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
        ):
            raise ConfigError("background must be a list of numbers")
        return tuple(float(v) for v in value)
    if name == "distance_cap":
        if value is None:
            return None
        want = "float"
    if isinstance(value, bool):
        raise ConfigError(f"config key {name!r} must not be a boolean")
    if want == "int":
        if not isinstance(value, int):
            raise ConfigError(f"config key {name!r} must be an integer, got {value!r}")
        return value
    if want == "float":
        if not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name!r} must be a number, got {value!r}")
        return float(value)
    if want == "str":
        if not isinstance(value, str):
            raise ConfigError(f"config key {name!r} must be a string, got {value!r}")
        return value
    raise ConfigError(f"config key {name!r} has unsupported type")


def config_from_dict(data: dict) -> PipelineConfig:
    """Build a config from a flat dict; unknown keys warn, bad values raise."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key not in _CONFIG_FIELDS:
            warnings.warn(f"unknown config key: {key!r}", stacklevel=2)
            continue
        kwargs[key] = _coerce_config_value(key, value)
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    """Load a flat JSON config file; missing keys take defaults."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config from {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: PipelineConfig, path) -> None:
    data = dataclasses.asdict(cfg)
    data["background"] = list(cfg.background)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
