"""Affine registration to a template by gradient descent on negative NCC.

Transforms map *moving* voxel coordinates to *template* voxel coordinates,
``T(p) = A @ p + t`` with coordinates in ``(z, y, x)`` order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, GeometryError, NumericalError
from .volumes import Volume, crop_background, resample, sample_trilinear

log = logging.getLogger(__name__)


@dataclass
class AffineTransform:
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        self.translation = np.array(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_translation(cls, shift):
        return cls(np.eye(3), shift)

    @classmethod
    def from_scale(cls, scale, center=(0.0, 0.0, 0.0)):
        """Scaling about ``center`` (isotropic when ``scale`` is a scalar)."""
        a = np.diag(np.broadcast_to(np.asarray(scale, dtype=np.float64), (3,)))
        center = np.asarray(center, dtype=np.float64)
        return cls(a, center - a @ center)

    def __call__(self, points):
        """Apply to points whose last axis holds (z, y, x)."""
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.translation

    @property
    def det(self):
        return float(np.linalg.det(self.matrix))

    def params(self):
        return np.concatenate([self.matrix.ravel(), self.translation])

    def to_dict(self):
        return {"matrix": self.matrix.tolist(), "translation": self.translation.tolist()}


def compose(t1: AffineTransform, t2: AffineTransform) -> AffineTransform:
    """``compose(t1, t2)(p) == t1(t2(p))``."""
    return AffineTransform(t1.matrix @ t2.matrix, t1.matrix @ t2.translation + t1.translation)


def invert(t: AffineTransform) -> AffineTransform:
    det = np.linalg.det(t.matrix)
    if not np.isfinite(det) or abs(det) < 1e-12:
        raise GeometryError(f"affine matrix is singular (det={det:.3g})")
    inv = np.linalg.inv(t.matrix)
    return AffineTransform(inv, -inv @ t.translation)


def _grid(shape):
    return np.indices(shape, dtype=np.float64).reshape(3, -1)


def warp(v: Volume, t: AffineTransform, out_dims=None) -> Volume:
    """``out[p] = v(t^-1 p)``, trilinear with edge clamping."""
    out_dims = tuple(v.shape if out_dims is None else out_dims)
    inv = invert(t)
    q = inv.matrix @ _grid(out_dims) + inv.translation[:, None]
    data = sample_trilinear(v.data, q).reshape(out_dims)
    return v.with_data(data)


def _ncc_parts(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigError(f"ncc needs equal sizes, got {a.size} and {b.size}")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa <= 1e-12 * max(1.0, a.size) or sbb <= 1e-12 * max(1.0, b.size):
        raise DegenerateInputError("ncc is undefined for a constant input")
    return da, db, saa, sbb


def ncc(a, b) -> float:
    a = a.data if isinstance(a, Volume) else a
    b = b.data if isinstance(b, Volume) else b
    if np.shape(a) != np.shape(b):
        raise ConfigError(f"ncc needs identical dimensions, got {np.shape(a)} and {np.shape(b)}")
    da, db, saa, sbb = _ncc_parts(a, b)
    return float(np.clip((da @ db) / np.sqrt(saa * sbb), -1.0, 1.0))


def ncc_objective(moving: np.ndarray, template: np.ndarray, t: AffineTransform):
    """Value of ``-ncc(warp(moving, t), template)`` and its gradient.

    Returns ``(value, dA, dt)`` with the gradient taken with respect to the raw
    matrix entries and translation of ``t``.
    """
    moving = np.asarray(moving, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    inv = invert(t)
    b_mat, c_vec = inv.matrix, inv.translation
    p = _grid(template.shape)
    q = b_mat @ p + c_vec[:, None]
    w, gq = sample_trilinear(moving, q, with_grad=True)

    dw, dt_, sww, stt = _ncc_parts(w, template)
    denom = np.sqrt(sww * stt)
    r = (dw @ dt_) / denom
    # d ncc / d w_i
    dr_dw = dt_ / denom - r * dw / sww
    g_q = -(gq * dr_dw)  # gradient of the objective w.r.t. the sample coordinates
    g_b = g_q @ p.T
    g_c = g_q.sum(axis=1)
    g_b_total = g_b - np.outer(g_c, t.translation)
    d_t = -b_mat.T @ g_c
    d_a = -b_mat.T @ g_b_total @ b_mat.T
    return -float(r), d_a, d_t


@dataclass
class RegistrationConfig:
    learning_rate: float = 0.5
    min_iterations: int = 50
    max_iterations: int = 400
    downsample_factor: float = 2.0
    background_threshold: float = -350.0
    convergence_tol: float = 1e-5
    convergence_window: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.min_iterations > self.max_iterations:
            raise ConfigError("min_iterations must not exceed max_iterations")
        if self.downsample_factor <= 0:
            raise ConfigError("downsample_factor must be positive")


@dataclass
class RegistrationResult:
    transform: AffineTransform
    final_ncc: float
    initial_ncc: float
    iterations: int


def _low_to_full(n_full, n_low, offset):
    # inverse of the center-aligned resample grid, then undo the background crop
    r = np.asarray(n_full, dtype=np.float64) / np.asarray(n_low, dtype=np.float64)
    return AffineTransform(np.diag(r), 0.5 * r - 0.5 + np.asarray(offset, dtype=np.float64))


def register_arrays(moving: np.ndarray, template: np.ndarray, cfg: RegistrationConfig):
    """Optimise the low-level problem directly on two arrays, starting from identity.

    The matrix part is reparameterised about the moving-grid center and scaled by
    the coordinate spread, so all twelve parameters move voxels by comparable
    amounts; the step is normalised by the RMS of the first gradient.
    """
    moving = np.asarray(moving, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    n = np.asarray(moving.shape, dtype=np.float64)
    center = (n - 1) / 2
    spread = np.maximum(np.sqrt((n**2 - 1) / 12.0), 1.0)

    def unpack(u):
        a = np.eye(3) + u[:9].reshape(3, 3) / spread[None, :]
        return AffineTransform(a, center + u[9:] - a @ center)

    def evaluate(u, it):
        t = unpack(u)
        try:
            val, d_a, d_t = ncc_objective(moving, template, t)
        except GeometryError as exc:
            raise NumericalError(f"transform became singular at iteration {it}", iteration=it) from exc
        if not np.isfinite(val) or not (np.all(np.isfinite(d_a)) and np.all(np.isfinite(d_t))):
            raise NumericalError(f"non-finite registration loss at iteration {it}", iteration=it)
        g_m = (d_a - np.outer(d_t, center)) / spread[None, :]
        return val, np.concatenate([g_m.ravel(), d_t])

    u = np.zeros(12)
    val, grad = evaluate(u, 0)
    initial = -val
    scale = max(float(np.sqrt(np.mean(grad**2))), 1e-12)
    lr = cfg.learning_rate
    history = [initial]
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        trial = u - lr * grad / scale
        t_val, t_grad = evaluate(trial, it)
        if t_val <= val:
            u, val, grad = trial, t_val, t_grad
            lr = min(lr * 1.1, cfg.learning_rate)
        else:
            lr *= 0.5
        history.append(-val)
        if it >= cfg.min_iterations and it >= cfg.convergence_window:
            gain = history[-1] - history[-1 - cfg.convergence_window]
            if gain < cfg.convergence_tol:
                break
    return unpack(u), -val, initial, it


def register(moving: Volume, template: Volume, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Affinely align ``moving`` to ``template``.

    Both volumes are background-cropped and downsampled before optimisation;
    the returned transform is expressed in full-resolution voxel coordinates of
    the original volumes, ``final_ncc`` at the optimisation resolution.
    """
    cfg = cfg or RegistrationConfig()
    m_crop, m_off = crop_background(moving, cfg.background_threshold)
    t_crop, t_off = crop_background(template, cfg.background_threshold)
    factor = 1.0 / cfg.downsample_factor
    m_low = resample(m_crop, factor) if factor != 1 else m_crop
    t_low = resample(t_crop, factor) if factor != 1 else t_crop
    for v, name in ((m_low, moving.id), (t_low, template.id)):
        if float(np.ptp(v.data)) == 0.0:
            raise DegenerateInputError(f"volume {name!r} is constant after preprocessing")

    low, final, initial, iters = register_arrays(m_low.data, t_low.data, cfg)
    d_m = _low_to_full(m_crop.shape, m_low.shape, m_off)
    d_t = _low_to_full(t_crop.shape, t_low.shape, t_off)
    full = compose(d_t, compose(low, invert(d_m)))
    log.debug("registered %s -> %s: ncc %.4f -> %.4f in %d its", moving.id, template.id, initial, final, iters)
    return RegistrationResult(full, final, initial, iters)


def save_transform(path, t: AffineTransform, moving_id="", template_id="", final_ncc=None):
    doc = t.to_dict()
    doc.update({"moving_id": moving_id, "template_id": template_id, "final_ncc": final_ncc})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_transform(path):
    """Returns ``(transform, metadata_dict)``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
        t = AffineTransform(doc["matrix"], doc["translation"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read transform {path}: {exc}") from exc
    return t, doc
