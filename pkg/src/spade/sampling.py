"""Anchor crop sampling and positive/negative cohort construction."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .correspondence import Patch, map_patch, patch_iou
from .errors import AvailabilityError, CohortError, ConfigError, OutOfFieldError, SamplingExhaustedError
from .memory_bank import MemoryBank, overlap_split
from .volumes import Volume, extract_box

# normalised-intensity equivalent of -350 HU after clipping to [-1000, 1000]
AIR_THRESHOLD = (-350.0 + 1000.0) / 2000.0


class StrategyId(str, enum.Enum):
    MOCO = "MoCo-baseline"
    G1 = "G1"
    G2 = "G2"
    G3 = "G3"
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    L4 = "L4"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for s in cls:
            if str(value).lower() in (s.value.lower(), s.name.lower()):
                return s
        raise ConfigError(f"unknown strategy {value!r}")


GLOBAL_STRATEGIES = (StrategyId.MOCO, StrategyId.G1, StrategyId.G2, StrategyId.G3)
LOCAL_STRATEGIES = (StrategyId.L1, StrategyId.L2, StrategyId.L3, StrategyId.L4)


@dataclass
class SamplingConfig:
    o: float = 0.2
    p: int = 2
    n_plus: int = 4
    crop_size: tuple = (32, 64, 64)
    scale_range: tuple = (0.5, 2.0)
    air_threshold: float = AIR_THRESHOLD
    min_foreground: float = 0.1
    max_rejections: int = 1000

    def __post_init__(self):
        self.crop_size = tuple(int(c) for c in self.crop_size)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if not 0.0 <= self.o <= 1.0:
            raise ConfigError(f"o must lie in [0, 1], got {self.o}")
        if self.p < 1:
            raise ConfigError("p must be at least 1")
        if self.n_plus < 0:
            raise ConfigError("n_plus must be non-negative")
        if len(self.crop_size) != 3 or min(self.crop_size) < 1:
            raise ConfigError(f"bad crop_size {self.crop_size}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad scale_range {self.scale_range}")


def extract_crop(v: Volume, patch: Patch, crop_size) -> np.ndarray:
    return extract_box(v.data, patch.corner, patch.size, crop_size).astype(np.float32)


def foreground_fraction(crop: np.ndarray, threshold: float = AIR_THRESHOLD) -> float:
    return float(np.mean(crop > threshold))


def _random_box(rng, dims, crop, scale_range):
    s_max = float(np.min(dims / crop))
    lo, hi = scale_range
    if s_max < lo:
        raise ConfigError(f"volume {tuple(dims.astype(int))} is too small for crop {tuple(crop.astype(int))}"
                          f" at scale {lo}")
    s = rng.uniform(lo, min(hi, s_max))
    return crop * s


def sample_anchor_pairs(v: Volume, cfg: SamplingConfig, seed) -> list[tuple[Patch, Patch]]:
    """``cfg.p`` overlapping crop pairs from one volume, skipping mainly-air crops."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = np.asarray(v.shape, dtype=np.float64)
    crop = np.asarray(cfg.crop_size, dtype=np.float64)

    def acceptable(patch):
        return foreground_fraction(extract_crop(v, patch, cfg.crop_size), cfg.air_threshold) >= cfg.min_foreground

    pairs = []
    rejections = 0
    while len(pairs) < cfg.p:
        size_j = _random_box(rng, dims, crop, cfg.scale_range)
        corner_j = rng.uniform(0.0, 1.0, 3) * (dims - size_j)
        pj = Patch(corner_j, size_j, v.id)
        size_k = _random_box(rng, dims, crop, cfg.scale_range)
        center = corner_j + size_j / 2 + rng.uniform(-0.25, 0.25, 3) * (size_j + size_k)
        corner_k = np.clip(center - size_k / 2, 0.0, dims - size_k)
        pk = Patch(corner_k, size_k, v.id)
        if patch_iou(pj, pk) >= cfg.o and acceptable(pj) and acceptable(pk):
            pairs.append((pj, pk))
            rejections = 0
            continue
        rejections += 1
        if rejections >= cfg.max_rejections:
            raise SamplingExhaustedError(
                f"{rejections} consecutive crop rejections in volume {v.id!r}")
    return pairs


def select_positive_volumes(anchor: Patch, transforms: dict, shapes: dict, n_plus: int, rng=None) -> list[Patch]:
    """Corresponding patches of ``anchor`` in ``n_plus`` other volumes."""
    return [group[0] for group in select_corresponding([anchor], transforms, shapes, n_plus, rng)]


def select_corresponding(anchors, transforms, shapes, n_plus, rng=None) -> list[tuple[Patch, ...]]:
    """Map every patch of ``anchors`` (all from one volume) into the same ``n_plus`` volumes.

    Volumes are visited in a random order; one where any anchor falls out of
    field is skipped.
    """
    if n_plus == 0:
        return []
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    src = anchors[0].volume_id
    if src not in transforms:
        raise AvailabilityError(f"no transform for anchor volume {src!r}", usable=0)
    candidates = sorted(k for k in transforms if k != src)
    order = rng.permutation(len(candidates))
    out = []
    for i in order:
        vid = candidates[i]
        try:
            out.append(tuple(map_patch(a, transforms[src], transforms[vid], shapes[vid], vid) for a in anchors))
        except OutOfFieldError:
            continue
        if len(out) == n_plus:
            return out
    raise AvailabilityError(f"only {len(out)} of the requested {n_plus} volumes hold the anchor", usable=len(out))


@dataclass
class CohortPair:
    """Positive and negative sets for one anchor.

    The first ``n_online`` positives are live embeddings supplied by the
    caller; everything after them, and every negative, is a bank entry.
    ``positive_index`` and ``negative_index`` give those entries' queue
    positions in the bank snapshot the cohort was built from.
    """

    positives: np.ndarray
    negatives: np.ndarray
    n_online: int
    positive_index: np.ndarray = None
    negative_index: np.ndarray = None
    ious: np.ndarray = None
    ages: np.ndarray = None
    debiased: int = 0

    @property
    def positive_ids(self) -> list:
        return [f"online:{i}" for i in range(self.n_online)] + [f"bank:{self.ages[i]}" for i in self.positive_index]

    @property
    def negative_ids(self) -> list:
        return [f"bank:{self.ages[i]}" for i in self.negative_index]

    @property
    def positive_ious(self) -> np.ndarray:
        return np.concatenate([np.full(self.n_online, np.nan), self.ious[self.positive_index]])

    @property
    def negative_ious(self) -> np.ndarray:
        return self.ious[self.negative_index]


def _stack(embs):
    return np.stack([np.asarray(e) for e in embs])


def _assemble(online, bank, pos_idx, neg_idx, ious, debiased):
    emb = bank.embeddings
    shape = np.shape(online[0])
    positives = _stack(online)
    if pos_idx is not None and len(pos_idx):
        positives = np.concatenate([positives, emb[pos_idx].reshape(-1, *shape)])
    negatives = emb if neg_idx is None else emb[neg_idx]
    negatives = negatives.reshape(-1, *shape) if len(negatives) else np.zeros((0, *shape), np.float32)
    return CohortPair(
        positives=positives,
        negatives=negatives,
        n_online=len(online),
        positive_index=np.zeros(0, int) if pos_idx is None else pos_idx,
        negative_index=np.arange(len(bank)) if neg_idx is None else neg_idx,
        ious=ious,
        ages=bank.ages,
        debiased=debiased,
    )


def build_global_cohorts(strategy, anchor_embedding, positive_embeddings, anchor_footprint,
                         bank: MemoryBank, o: float) -> CohortPair:
    """Global cohorts.

    ``positive_embeddings`` lists the anchor's other view first, then the
    corresponding crops from other volumes; the MoCo baseline keeps only the
    other view.
    """
    strategy = StrategyId.parse(strategy)
    if strategy not in GLOBAL_STRATEGIES:
        raise ConfigError(f"{strategy.value} is not a global strategy")
    online = [anchor_embedding] + list(positive_embeddings)
    if strategy is StrategyId.MOCO:
        online = online[:2]
    below, above, ious = overlap_split(bank, anchor_footprint, o)
    if strategy in (StrategyId.MOCO, StrategyId.G1):
        return _assemble(online, bank, None, None, ious, 0)
    pos_idx = above if strategy is StrategyId.G3 else None
    return _assemble(online, bank, pos_idx, below, ious, len(above))


def build_local_cohorts(strategy, own_overlap_embeddings, cross_overlap_embeddings, anchor_footprint,
                        bank: MemoryBank, o: float) -> CohortPair:
    strategy = StrategyId.parse(strategy)
    if strategy not in LOCAL_STRATEGIES:
        raise ConfigError(f"{strategy.value} is not a local strategy")
    own = list(own_overlap_embeddings)
    if len(own) != 2:
        raise CohortError("local cohorts need both overlap embeddings of the anchor pair")
    below, above, ious = overlap_split(bank, anchor_footprint, o)
    if strategy is StrategyId.L1:
        return _assemble(own, bank, None, None, ious, 0)
    if strategy is StrategyId.L2:
        return _assemble(own, bank, None, below, ious, len(above))
    online = own + list(cross_overlap_embeddings)
    pos_idx = above if strategy is StrategyId.L4 else None
    return _assemble(online, bank, pos_idx, below, ious, len(above))
