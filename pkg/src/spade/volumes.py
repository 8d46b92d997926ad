"""Volumes, synthetic phantoms and the preprocessing chain.

Arrays are stored depth-major as ``(d, h, w)``; voxel coordinates follow the
same axis order, so a coordinate triple is always ``(z, y, x)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

AIR_HU = -1000.0


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ConfigError(f"volume needs three non-empty axes, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be three positive numbers, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"volume {self.id!r} contains non-finite values")

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, spacing=None):
        return Volume(data, self.spacing if spacing is None else spacing, self.id)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    size: tuple = (64, 64, 64)
    num_blobs: int = 6
    intensity_range: tuple = (AIR_HU, 400.0)


@dataclass
class Blob:
    center: np.ndarray
    sigma: np.ndarray
    amplitude: float


def blob_parameters(spec: PhantomSpec) -> list[Blob]:
    size = np.asarray(spec.size, dtype=np.float64)
    if size.shape != (3,) or np.any(size < 8):
        raise ConfigError(f"phantom size must have three components >= 8, got {spec.size}")
    if spec.num_blobs < 0:
        raise ConfigError("num_blobs must be non-negative")
    lo, hi = spec.intensity_range
    if not lo < hi:
        raise ConfigError(f"intensity_range must satisfy lo < hi, got {spec.intensity_range}")
    rng = np.random.default_rng(spec.seed)
    blobs = []
    for _ in range(spec.num_blobs):
        center = rng.uniform(0.3, 0.7, 3) * (size - 1)
        sigma = rng.uniform(0.06, 0.16, 3) * size
        amplitude = rng.uniform(0.5, 1.0) * (hi - lo)
        blobs.append(Blob(center, sigma, float(amplitude)))
    return blobs


def render_blobs(blobs, size, intensity_range, coords=None) -> np.ndarray:
    """Evaluate a blob field on the voxel grid, or at explicit ``coords`` of shape (3, ...)."""
    lo, hi = intensity_range
    if coords is None:
        coords = np.indices(tuple(size), dtype=np.float64)
    out = np.full(coords.shape[1:], float(lo))
    for b in blobs:
        r2 = sum(((coords[k] - b.center[k]) / b.sigma[k]) ** 2 for k in range(3))
        out += b.amplitude * np.exp(-0.5 * r2)
    return np.minimum(out, hi)


def generate_phantom(spec: PhantomSpec, id: str | None = None) -> Volume:
    blobs = blob_parameters(spec)
    data = render_blobs(blobs, spec.size, spec.intensity_range)
    return Volume(data, (1.0, 1.0, 1.0), id if id is not None else f"phantom{spec.seed}")


def clip_normalize(v: Volume, lo: float = AIR_HU, hi: float = 1000.0) -> Volume:
    if not lo < hi:
        raise ConfigError(f"clip range needs lo < hi, got ({lo}, {hi})")
    x = np.clip(v.data.astype(np.float64), lo, hi)
    return v.with_data((x - lo) / (hi - lo))


def sample_trilinear(data: np.ndarray, coords: np.ndarray, with_grad: bool = False):
    """Trilinear interpolation of ``data`` at float voxel ``coords`` (shape (3, ...)).

    Out-of-range coordinates are clamped to the edge. With ``with_grad`` the
    spatial gradient (3, ...) of the sampled value is returned as well; it is
    zero along an axis where the coordinate was clamped.
    """
    data = np.asarray(data, dtype=np.float64)
    idx0, idx1, frac, inside = [], [], [], []
    for k in range(3):
        n = data.shape[k]
        c = coords[k]
        q = np.clip(c, 0.0, n - 1)
        i0 = np.floor(q).astype(np.intp)
        if n > 1:
            np.minimum(i0, n - 2, out=i0)
            i1 = i0 + 1
        else:
            i1 = i0
        idx0.append(i0)
        idx1.append(i1)
        frac.append(q - i0)
        if with_grad:
            inside.append((c >= 0.0) & (c <= n - 1) & (n > 1))

    fz, fy, fx = frac
    z0, y0, x0 = idx0
    z1, y1, x1 = idx1
    c000 = data[z0, y0, x0]
    c001 = data[z0, y0, x1]
    c010 = data[z0, y1, x0]
    c011 = data[z0, y1, x1]
    c100 = data[z1, y0, x0]
    c101 = data[z1, y0, x1]
    c110 = data[z1, y1, x0]
    c111 = data[z1, y1, x1]

    c00 = c000 + (c001 - c000) * fx
    c01 = c010 + (c011 - c010) * fx
    c10 = c100 + (c101 - c100) * fx
    c11 = c110 + (c111 - c110) * fx
    c0 = c00 + (c01 - c00) * fy
    c1 = c10 + (c11 - c10) * fy
    value = c0 + (c1 - c0) * fz
    if not with_grad:
        return value

    gz = c1 - c0
    gy = (c01 - c00) * (1 - fz) + (c11 - c10) * fz
    gx = ((c001 - c000) * (1 - fy) + (c011 - c010) * fy) * (1 - fz) + (
        (c101 - c100) * (1 - fy) + (c111 - c110) * fy
    ) * fz
    grad = np.stack([gz * inside[0], gy * inside[1], gx * inside[2]])
    return value, grad


def _resample_grid(n_in, n_out):
    # center-aligned: output voxel i covers input [(i)*r, (i+1)*r) with r = n_in/n_out
    r = np.asarray(n_in, dtype=np.float64) / np.asarray(n_out, dtype=np.float64)
    return r, 0.5 * r - 0.5


def resample(v: Volume, factor) -> Volume:
    """Trilinear resampling by a per-axis scale ``factor`` (0.5 halves each dimension).

    Output sizes are ``round(n * factor)``; the grid is center-aligned and the
    spacing is multiplied by the realised ``n_in / n_out`` ratio.
    """
    factor = np.broadcast_to(np.asarray(factor, dtype=np.float64), (3,))
    if np.any(factor <= 0):
        raise ConfigError(f"resample factors must be positive, got {tuple(factor)}")
    n_in = np.asarray(v.shape)
    n_out = np.rint(n_in * factor).astype(int)
    if np.any(n_out < 1):
        raise ConfigError(f"resampling {v.shape} by {tuple(factor)} leaves an empty axis")
    scale, offset = _resample_grid(n_in, n_out)
    axes = [np.arange(n_out[k]) * scale[k] + offset[k] for k in range(3)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    data = sample_trilinear(v.data, coords)
    spacing = tuple(float(s * r) for s, r in zip(v.spacing, scale))
    return v.with_data(data, spacing)


def extract_box(data: np.ndarray, corner, size, out_shape) -> np.ndarray:
    """Resample the continuous box ``[corner, corner + size)`` onto an ``out_shape`` grid."""
    corner = np.asarray(corner, dtype=np.float64)
    step = np.asarray(size, dtype=np.float64) / np.asarray(out_shape, dtype=np.float64)
    axes = [corner[k] + (np.arange(out_shape[k]) + 0.5) * step[k] - 0.5 for k in range(3)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return sample_trilinear(data, coords)


def crop_background(v: Volume, threshold: float = -350.0):
    """Tight bounding box of voxels above ``threshold`` and its corner in ``v``.

    When nothing exceeds the threshold the whole volume comes back with a zero
    offset.
    """
    mask = v.data > threshold
    if not mask.any():
        return v, (0, 0, 0)
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(mask.any(axis=other))
        lo.append(int(hit[0]))
        hi.append(int(hit[-1]) + 1)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    return v.with_data(v.data[sl]), tuple(lo)


def write_svol(v: Volume, path) -> None:
    header = {"dims": list(v.shape), "spacing": list(v.spacing), "dtype": "f32", "id": v.id}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_svol(path) -> Volume:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
        dims = tuple(int(d) for d in header["dims"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed .svol header") from exc
    if header.get("dtype", "f32") != "f32":
        raise DataError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Volume(data.astype(np.float32), tuple(header.get("spacing", (1, 1, 1))),
                  str(header.get("id", Path(path).stem)))


def load_volume_dir(directory) -> list[Volume]:
    paths = sorted(Path(directory).glob("*.svol"))
    if not paths:
        raise DataError(f"no .svol files in {directory}")
    return [read_svol(p) for p in paths]
