"""Synthetic phantom corpora with shared anatomy and per-subject variation.

Every subject starts from the same blob layout (the "anatomy"), perturbs it
slightly, and is then placed with a random affine. Subject 0 is unperturbed and
serves as the template.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .registration import AffineTransform, compose, invert, save_transform
from .volumes import Blob, PhantomSpec, Volume, blob_parameters, render_blobs, write_svol


@dataclass
class CorpusSpec:
    phantom: PhantomSpec = field(default_factory=lambda: PhantomSpec(seed=0, size=(32, 64, 64), num_blobs=10))
    count: int = 16
    seed: int = 0
    jitter: float = 0.02
    amplitude_jitter: float = 0.1
    max_translation: float = 4.0
    scale_range: tuple = (0.93, 1.07)
    max_rotation_deg: float = 6.0
    id_prefix: str = "vol"

    def __post_init__(self):
        if isinstance(self.phantom, dict):
            self.phantom = PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in self.phantom.items()})
        if self.count < 1:
            raise ConfigError("corpus count must be at least 1")

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "phantom" not in doc:
            keys = ("seed", "size", "num_blobs", "intensity_range")
            doc["phantom"] = {k: doc.pop(k) for k in keys if k in doc}
        if "scale_range" in doc:
            doc["scale_range"] = tuple(doc["scale_range"])
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


def _random_placement(rng, spec: CorpusSpec, size):
    center = (np.asarray(size, dtype=np.float64) - 1) / 2
    s = rng.uniform(*spec.scale_range)
    a = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    shift = rng.uniform(-spec.max_translation, spec.max_translation, 3)
    linear = AffineTransform(s * rot, np.zeros(3))
    about = compose(AffineTransform.from_translation(center + shift),
                    compose(linear, AffineTransform.from_translation(-center)))
    return about


def subject_id(spec: CorpusSpec, i: int) -> str:
    return f"{spec.id_prefix}{i:03d}"


def generate_corpus(spec: CorpusSpec):
    """Returns ``(volumes, truth)``.

    ``truth[id]`` maps the subject's voxel coordinates to template coordinates
    (exact up to the anatomical jitter).
    """
    base = blob_parameters(spec.phantom)
    size = tuple(spec.phantom.size)
    rng = np.random.default_rng(spec.seed)
    extent = np.asarray(size, dtype=np.float64)
    volumes, truth = [], {}
    for i in range(spec.count):
        vid = subject_id(spec, i)
        if i == 0:
            blobs, placement = base, AffineTransform.identity()
        else:
            blobs = [Blob(b.center + rng.normal(0.0, spec.jitter, 3) * extent,
                          b.sigma * rng.uniform(0.9, 1.1, 3),
                          b.amplitude * rng.uniform(1 - spec.amplitude_jitter, 1 + spec.amplitude_jitter))
                     for b in base]
            placement = _random_placement(rng, spec, size)
        # placement maps template coordinates into the subject volume
        back = invert(placement)
        grid = np.indices(size, dtype=np.float64).reshape(3, -1)
        coords = (back.matrix @ grid + back.translation[:, None]).reshape(3, *size)
        data = render_blobs(blobs, size, spec.phantom.intensity_range, coords)
        volumes.append(Volume(data, (1.0, 1.0, 1.0), vid))
        truth[vid] = back
    return volumes, truth


def write_corpus(volumes, truth, out_dir, spec: CorpusSpec | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v in volumes:
        write_svol(v, out / f"{v.id}.svol")
    if truth:
        tdir = out / "truth"
        tdir.mkdir(exist_ok=True)
        template = volumes[0].id
        for vid, t in truth.items():
            save_transform(tdir / f"{vid}.affine.json", t, vid, template)
    if spec is not None:
        (out / "corpus.json").write_text(json.dumps(spec.to_dict(), indent=1))
