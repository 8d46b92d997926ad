"""Patch geometry: moving crops between volumes through the template, and box IoU."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, GeometryError, OutOfFieldError
from .registration import AffineTransform, compose, invert


def _vec3(x, name):
    a = np.array(x, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ConfigError(f"{name} must have three components")
    return a


@dataclass(eq=False)
class Box:
    corner: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        self.corner = _vec3(self.corner, "corner")
        self.size = _vec3(self.size, "size")
        if np.any(self.size <= 0):
            raise ConfigError(f"box size must be positive, got {self.size.tolist()}")

    @property
    def upper(self):
        return self.corner + self.size

    @property
    def volume(self):
        return float(np.prod(self.size))

    def corners(self):
        """The 8 vertices, shape (8, 3)."""
        lo, hi = self.corner, self.upper
        return np.array([[(lo, hi)[b][k] for k, b in enumerate(bits)]
                         for bits in itertools.product((0, 1), repeat=3)])


class TemplateFootprint(Box):
    """Axis-aligned extent of a patch in template voxel coordinates."""


@dataclass(eq=False)
class Patch(Box):
    volume_id: str = ""

    def to_dict(self):
        return {"volume_id": self.volume_id, "corner": self.corner.tolist(), "size": self.size.tolist()}

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(doc["corner"], doc["size"], str(doc.get("volume_id", "")))
        except KeyError as exc:
            raise DataError(f"patch record lacks {exc}") from exc

    def box(self):
        return Box(self.corner, self.size)


def _aabb(points):
    lo = points.min(axis=0)
    return lo, points.max(axis=0) - lo


def to_template(p: Box, t: AffineTransform) -> TemplateFootprint:
    if abs(t.det) < 1e-12:
        raise GeometryError("cannot map a patch through a singular transform")
    lo, size = _aabb(t(p.corners()))
    return TemplateFootprint(lo, size)


def map_patch(p: Patch, t_src: AffineTransform, t_dst: AffineTransform, dst_shape, dst_id: str = "") -> Patch:
    """Corresponding patch in the destination volume, ``T_dst^-1 o T_src``.

    The mapped box is clipped to the destination grid; less than one voxel left
    along any axis raises :class:`OutOfFieldError`.
    """
    rel = compose(invert(t_dst), t_src)
    lo, size = _aabb(rel(p.corners()))
    hi = lo + size
    bounds = np.asarray(dst_shape, dtype=np.float64)
    lo = np.clip(lo, 0.0, bounds)
    hi = np.clip(hi, 0.0, bounds)
    if np.any(hi - lo < 1.0):
        raise OutOfFieldError(f"patch maps outside volume {dst_id!r} (extent {np.round(hi - lo, 3).tolist()})")
    return Patch(lo, hi - lo, dst_id)


def intersection(a: Box, b: Box):
    """Intersection box as ``(lo, hi)``; ``hi <= lo`` on some axis when empty."""
    return np.maximum(a.corner, b.corner), np.minimum(a.upper, b.upper)


def patch_iou(a: Box, b: Box) -> float:
    lo, hi = intersection(a, b)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    if inter == 0.0:
        return 0.0
    # the two volume products round differently, so identical boxes can land a hair above 1
    return min(inter / (a.volume + b.volume - inter), 1.0)


def iou_many(anchor: Box, lows: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """IoU of ``anchor`` against N boxes given as (N, 3) corner and size arrays."""
    lows = np.asarray(lows, dtype=np.float64).reshape(-1, 3)
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 3)
    lo = np.maximum(lows, anchor.corner)
    hi = np.minimum(lows + sizes, anchor.upper)
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=1)
    union = anchor.volume + np.prod(sizes, axis=1) - inter
    return np.where(inter > 0, np.minimum(inter / np.where(union > 0, union, 1.0), 1.0), 0.0)


def load_patch(path) -> Patch:
    try:
        with open(path) as fh:
            return Patch.from_dict(json.load(fh))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read patch {path}: {exc}") from exc
