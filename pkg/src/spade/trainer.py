"""Pretraining loop: corpus registration, batch assembly, one optimisation step, probing."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .correspondence import Box, intersection, map_patch, to_template
from .errors import (AvailabilityError, ConfigError, DataError, NumericalError, OutOfFieldError,
                     SamplingExhaustedError, SpadeError)
from .losses import LossConfig, con_loss, recon_loss, total_loss
from .memory_bank import BankMass, MemoryBank, enqueue_arrays, save_bank
from .model import (ModelConfig, apply_intensity, apply_spatial, build_pair, extract_overlap_logits,
                    flat_params, invert_spatial, momentum_update, random_intensity, random_spatial,
                    save_checkpoint, set_flat_params)
from .registration import AffineTransform, RegistrationConfig, register, save_transform
from .sampling import (SamplingConfig, StrategyId, build_global_cohorts, build_local_cohorts, extract_crop,
                       foreground_fraction, sample_anchor_pairs, select_corresponding)
from .volumes import Volume, clip_normalize

log = logging.getLogger(__name__)

DESK_CROP = (8, 16, 16)
METRIC_COLUMNS = (
    "step", "lr", "loss_global", "loss_local", "loss_recon", "loss_total",
    "pos_global", "neg_global", "debiased_global", "pos_local", "neg_local", "debiased_local",
    "bank_global", "bank_local",
)


@dataclass
class TrainConfig:
    strategy_global: str = "G3"
    strategy_local: str = "L2"
    use_reconstruction: bool = True
    beta: float = 0.99
    steps: int = 2000
    learning_rate: float = 0.01
    sgd_momentum: float = 0.9
    seed: int = 0
    queue_global: int = 16000
    queue_local: int = 1000
    warmup_entries: int = 64
    checkpoint_every: int = 500
    probe_every: int = 0
    probe_pairs: int = 64
    template_id: str = ""
    clip_range: tuple = (-1000.0, 1000.0)
    verify_momentum: bool = False
    # "momentum": each contrastive term scores a regular-network query against a momentum-network
    # key of the other positive; "online": both members are live regular-network embeddings
    positive_keys: str = "momentum"
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(crop_size=DESK_CROP))
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(crop_size=DESK_CROP))

    def __post_init__(self):
        if isinstance(self.sampling, dict):
            self.sampling = SamplingConfig(**{"crop_size": DESK_CROP, **self.sampling})
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**{"crop_size": self.sampling.crop_size, **self.model})
        if tuple(self.model.crop_size) != tuple(self.sampling.crop_size):
            self.model = ModelConfig(**{**asdict(self.model), "crop_size": self.sampling.crop_size})
        g = StrategyId.parse(self.strategy_global)
        if g.value not in ("MoCo-baseline", "G1", "G2", "G3"):
            raise ConfigError(f"{self.strategy_global!r} is not a global strategy")
        self.strategy_global = g.value
        if str(self.strategy_local).lower() in ("none", ""):
            self.strategy_local = "none"
        else:
            loc = StrategyId.parse(self.strategy_local)
            if loc.value not in ("L1", "L2", "L3", "L4"):
                raise ConfigError(f"{self.strategy_local!r} is not a local strategy")
            self.strategy_local = loc.value
        if self.positive_keys not in ("momentum", "online"):
            raise ConfigError(f"unknown positive_keys {self.positive_keys!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.steps < 1 or self.learning_rate <= 0:
            raise ConfigError("steps and learning_rate must be positive")

    @property
    def batch_size(self):
        """Anchor crops per step: ``p`` pairs of two."""
        return 2 * self.sampling.p

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)


def load_train_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if "SPADE_SEED" in os.environ:
        try:
            doc["seed"] = int(os.environ["SPADE_SEED"])
        except ValueError as exc:
            raise ConfigError("SPADE_SEED must be an integer") from exc
    try:
        return TrainConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ----------------------------------------------------------------- corpus


def _row_mass(cache: BankMass, bank: MemoryBank, cohort):
    """Whole-bank mass of the cohort's bank positives; ``None`` when there are none."""
    if not len(cohort.positive_index):
        return None
    return cache.mass(bank)[cohort.positive_index]


def prepare_corpus(volumes, template_id, cfg: RegistrationConfig | None = None, out_dir=None):
    """Register every volume to the template; the template keeps the identity."""
    by_id = {v.id: v for v in volumes}
    if template_id not in by_id:
        raise DataError(f"template {template_id!r} is not among the volumes")
    template = by_id[template_id]
    transforms, scores = {}, {}
    for v in volumes:
        if v.id == template_id:
            transforms[v.id], scores[v.id] = AffineTransform.identity(), 1.0
            continue
        try:
            res = register(v, template, cfg)
        except SpadeError as exc:
            raise type(exc)(f"registration of {v.id!r} failed: {exc}") from exc
        transforms[v.id], scores[v.id] = res.transform, res.final_ncc
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for vid, t in transforms.items():
            save_transform(out / f"{vid}.affine.json", t, vid, template_id, scores[vid])
    return transforms


# ----------------------------------------------------------------- batches


@dataclass
class Batch:
    step: int
    anchor_id: str
    pairs: list
    views: np.ndarray          # (2 * n_crops, D, H, W), view v of crop c at 2 * c + v
    targets: np.ndarray        # spatially transformed crops without intensity noise
    view_augs: list
    positives: np.ndarray      # (n_crops * n_plus, D, H, W), crop-major
    positive_patches: list     # per crop, list of Patch
    positive_augs: list
    crop_footprints: list
    overlap_footprints: list
    overlap_boxes: list

    @property
    def n_crops(self):
        return 2 * len(self.pairs)


def _overlap_box(a, b):
    lo, hi = intersection(a, b)
    if np.any(hi - lo <= 0):
        return None
    return Box(lo, hi - lo)


def _param_digest(net):
    return hashlib.sha256(flat_params(net).numpy().tobytes()).hexdigest()


@dataclass
class StepLosses:
    total: float
    global_loss: float
    local_loss: float
    recon_loss: float
    stats_global: list
    stats_local: list
    global_keys: np.ndarray     # momentum embeddings of the crop views, to enqueue
    local_keys: list            # (momentum overlap embedding, template footprint) pairs


class Trainer:
    """Holds the networks, optimiser and banks for one run."""

    def __init__(self, cfg: TrainConfig, volumes, transforms, dtype=torch.float32):
        self.cfg = cfg
        lo, hi = cfg.clip_range
        self.volumes = {v.id: clip_normalize(v, lo, hi) for v in volumes}
        missing = [vid for vid in self.volumes if vid not in transforms]
        if missing:
            raise DataError(f"no transform for volumes {missing}")
        self.transforms = {vid: transforms[vid] for vid in self.volumes}
        self.shapes = {vid: v.shape for vid, v in self.volumes.items()}
        self.ids = sorted(self.volumes)
        self.dtype = dtype
        self.net, self.twin = build_pair(cfg.model, cfg.seed, dtype)
        self.optimizer = torch.optim.SGD(self.net.parameters(), lr=cfg.learning_rate, momentum=cfg.sgd_momentum)
        g = cfg.model.global_dim
        self.bank_g = MemoryBank(cfg.queue_global, (g,))
        self.bank_l = MemoryBank(cfg.queue_local, (cfg.model.local_dim, cfg.model.local_grid, cfg.model.local_grid))
        self._mass_g, self._mass_l = BankMass(cfg.loss.tau), BankMass(cfg.loss.tau)
        self.step = 0
        self.records = []

    # -- batch assembly (pure numpy, deterministic in (seed, step))

    def make_batch(self, step: int) -> Batch:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, step])
        scfg = cfg.sampling
        for _ in range(50):
            anchor_id = self.ids[int(rng.integers(len(self.ids)))]
            vol = self.volumes[anchor_id]
            try:
                pairs = sample_anchor_pairs(vol, scfg, rng)
                groups = [select_corresponding(list(pair), self.transforms, self.shapes, scfg.n_plus, rng)
                          for pair in pairs]
            except (AvailabilityError, SamplingExhaustedError) as exc:
                log.debug("step %d: resampling batch (%s)", step, exc)
                continue
            overlaps = [_overlap_box(*pair) for pair in pairs]
            if any(o is None for o in overlaps):
                continue
            break
        else:
            raise DataError(f"could not assemble a batch at step {step}")

        crops = [p for pair in pairs for p in pair]
        square = scfg.crop_size[1] == scfg.crop_size[2]
        views, targets, view_augs = [], [], []
        for patch in crops:
            raw = extract_crop(vol, patch, scfg.crop_size)
            for _ in range(2):
                s_aug = random_spatial(rng, square)
                i_aug = random_intensity(rng)
                t = np.ascontiguousarray(apply_spatial(raw, s_aug))
                targets.append(t)
                views.append(apply_intensity(t, i_aug))
                view_augs.append(s_aug)
        positive_patches = [[] for _ in crops]
        for q, group in enumerate(groups):
            for mapped in group:
                positive_patches[2 * q].append(mapped[0])
                positive_patches[2 * q + 1].append(mapped[1])
        positives, positive_augs = [], []
        for plist in positive_patches:
            for patch in plist:
                raw = extract_crop(self.volumes[patch.volume_id], patch, scfg.crop_size)
                s_aug = random_spatial(rng, square)
                positives.append(apply_intensity(apply_spatial(raw, s_aug), random_intensity(rng)))
                positive_augs.append(s_aug)
        t_a = self.transforms[anchor_id]
        shape = (0, *scfg.crop_size)
        return Batch(
            step=step,
            anchor_id=anchor_id,
            pairs=pairs,
            views=np.stack(views).astype(np.float32),
            targets=np.stack(targets).astype(np.float32),
            view_augs=view_augs,
            positives=np.stack(positives).astype(np.float32) if positives else np.zeros(shape, np.float32),
            positive_patches=positive_patches,
            positive_augs=positive_augs,
            crop_footprints=[to_template(p, t_a) for p in crops],
            overlap_footprints=[to_template(b, t_a) for b in overlaps],
            overlap_boxes=overlaps,
        )

    # -- one optimisation step

    def _local_embeddings(self, net, logits, batch, view_index, with_cross):
        """Overlap embeddings ``(jk, kj)`` for each pair, and cross-volume ones when asked."""
        own, cross = [], []
        n_plus = self.cfg.sampling.n_plus
        for q, (pj, pk) in enumerate(batch.pairs):
            embs = []
            for c, (me, other) in enumerate(((pj, pk), (pk, pj))):
                i = 2 * (2 * q + c) + view_index
                z = invert_spatial(logits[i], batch.view_augs[i])
                embs.append(net.local_embedding(extract_overlap_logits(z, me, other)[None])[0])
            own.append(embs)
            if not with_cross:
                continue
            extra = []
            for b in range(len(batch.positive_patches[2 * q])):
                bj = batch.positive_patches[2 * q][b]
                bk = batch.positive_patches[2 * q + 1][b]
                if _overlap_box(bj, bk) is None:
                    continue
                for c, (me, other) in enumerate(((bj, bk), (bk, bj))):
                    i = (2 * q + c) * n_plus + b
                    z = invert_spatial(logits[batch.n_crops * 2 + i], batch.positive_augs[i])
                    extra.append(net.local_embedding(extract_overlap_logits(z, me, other)[None])[0])
            cross.append(extra)
        return own, cross

    def compute_losses(self, batch: Batch, backward: bool = True) -> StepLosses:
        """Forward both networks, build cohorts and evaluate the combined loss.

        With ``backward`` the loss gradient is accumulated into the regular
        network's ``.grad`` fields (previous values are cleared first).
        """
        cfg = self.cfg
        lcfg = cfg.loss
        n_views = len(batch.views)
        n_plus = cfg.sampling.n_plus
        local = cfg.strategy_local != "none"
        cross_needed = cfg.strategy_local in ("L3", "L4")
        need_decoder = local or cfg.use_reconstruction

        x = torch.from_numpy(np.concatenate([batch.views, batch.positives]))[:, None].to(self.dtype)
        z, skips = self.net.encode(x)
        g_emb = self.net.global_embedding(z)
        logits = recon = None
        if need_decoder:
            upto = len(x) if cross_needed else n_views
            logits = self.net.decode(z[:upto], tuple(s[:upto] for s in skips))
            recon = torch.sigmoid(self.net.recon(logits[:n_views]))[:, 0]

        momentum_keys = cfg.positive_keys == "momentum"
        with torch.no_grad():
            upto_t = len(x) if momentum_keys else n_views
            zt, skt = self.twin.encode(x[:upto_t])
            key_all = self.twin.global_embedding(zt)
            key_g = key_all[:n_views]
            key_l = []
            if local:
                dec_t = upto_t if cross_needed else n_views
                lt = self.twin.decode(zt[:dec_t], tuple(s[:dec_t] for s in skt))
                for v in range(2):
                    key_l.append(self._local_embeddings(self.twin, lt, batch, v, cross_needed and momentum_keys))

        # global cohorts, one per anchor crop
        g_np = g_emb.detach().double().numpy()
        k_np = key_all.double().numpy()
        grad_g = np.zeros_like(g_np)
        l_g, stats_g = 0.0, []
        if len(self.bank_g) >= cfg.warmup_entries:
            losses = []
            for c in range(batch.n_crops):
                rows = [2 * c, 2 * c + 1] + [n_views + c * n_plus + b for b in range(len(batch.positive_patches[c]))]
                cohort = build_global_cohorts(cfg.strategy_global, g_np[rows[0]], g_np[rows[1:]],
                                              batch.crop_footprints[c], self.bank_g, cfg.sampling.o)
                keys = None
                if momentum_keys:
                    keys = build_global_cohorts(cfg.strategy_global, k_np[rows[0]], k_np[rows[1:]],
                                                batch.crop_footprints[c], self.bank_g, cfg.sampling.o).positives
                k = cohort.n_online
                val, gpos = con_loss(cohort.positives, cohort.negatives, lcfg.tau, lcfg.con_normalizer,
                                     n_grad=k, keys=keys, row_mass=_row_mass(self._mass_g, self.bank_g, cohort))
                grad_g[rows[:k]] += gpos[:k] / batch.n_crops
                losses.append(val)
                stats_g.append((len(cohort.positives), len(cohort.negatives), cohort.debiased))
            l_g = float(np.mean(losses))

        # local cohorts, one per pair and view
        l_l, stats_l = 0.0, []
        local_terms = []
        if local and len(self.bank_l) >= cfg.warmup_entries:
            losses = []
            n_cohorts = 2 * len(batch.pairs)
            for v in range(2):
                own, cross = self._local_embeddings(self.net, logits, batch, v, cross_needed)
                for q in range(len(batch.pairs)):
                    online = own[q] + (cross[q] if cross_needed else [])
                    arrs = [t.detach().double().numpy() for t in online]
                    fp = batch.overlap_footprints[q]
                    cohort = build_local_cohorts(cfg.strategy_local, arrs[:2], arrs[2:], fp, self.bank_l,
                                                 cfg.sampling.o)
                    keys = None
                    if momentum_keys:
                        own_t, cross_t = key_l[v]
                        karrs = [t.double().numpy() for t in own_t[q] + (cross_t[q] if cross_needed else [])]
                        keys = build_local_cohorts(cfg.strategy_local, karrs[:2], karrs[2:], fp, self.bank_l,
                                                   cfg.sampling.o).positives
                    k = cohort.n_online
                    val, gpos = con_loss(cohort.positives, cohort.negatives, lcfg.tau, lcfg.con_normalizer,
                                         n_grad=k, keys=keys, row_mass=_row_mass(self._mass_l, self.bank_l, cohort))
                    for t, g in zip(online, gpos[:k]):
                        local_terms.append((t, g / n_cohorts))
                    losses.append(val)
                    stats_l.append((len(cohort.positives), len(cohort.negatives), cohort.debiased))
            l_l = float(np.mean(losses))

        l_r, grad_r = 0.0, None
        if recon is not None:
            l_r, grad_r = recon_loss(batch.targets, recon.detach().double().numpy())
        loss_cfg = lcfg if cfg.use_reconstruction else LossConfig(lcfg.tau, lcfg.lam, 0.0, lcfg.con_normalizer)
        try:
            total, (w_g, w_l, w_r) = total_loss(l_g, l_l, l_r, loss_cfg)
        except NumericalError as exc:
            raise NumericalError(f"step {self.step}: {exc}", iteration=self.step, component=exc.component) from exc

        tensors, grads = [g_emb], [torch.from_numpy(w_g * grad_g).to(self.dtype)]
        for t, g in local_terms:
            tensors.append(t)
            grads.append(torch.from_numpy(w_l * g).to(self.dtype))
        if grad_r is not None and w_r > 0:
            tensors.append(recon)
            grads.append(torch.from_numpy(w_r * grad_r).to(self.dtype))
        if backward:
            self.optimizer.zero_grad(set_to_none=False)
            torch.autograd.backward(tensors, grads)

        local_keys = []
        if local:
            for v in range(2):
                for q, pair_embs in enumerate(key_l[v][0]):
                    local_keys += [(e.numpy(), batch.overlap_footprints[q]) for e in pair_embs]
        return StepLosses(total, l_g, l_l, l_r, stats_g, stats_l, key_g.numpy(), local_keys)

    def train_step(self, batch: Batch):
        cfg = self.cfg
        lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * self.step / cfg.steps))
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        if cfg.verify_momentum:
            digest = _param_digest(self.twin)
        out = self.compute_losses(batch)
        self.optimizer.step()

        if cfg.verify_momentum and _param_digest(self.twin) != digest:
            raise NumericalError(f"momentum parameters changed outside the momentum update at step {self.step}")
        set_flat_params(self.twin, momentum_update(flat_params(self.net), flat_params(self.twin), cfg.beta))

        # enqueue one momentum embedding per crop view
        fps = [batch.crop_footprints[i // 2] for i in range(len(batch.views))]
        self.bank_g = enqueue_arrays(self.bank_g, out.global_keys, [f.corner for f in fps], [f.size for f in fps])
        if out.local_keys:
            self.bank_l = enqueue_arrays(self.bank_l, np.stack([e for e, _ in out.local_keys]),
                                         [f.corner for _, f in out.local_keys], [f.size for _, f in out.local_keys])

        stats_g, stats_l = out.stats_global, out.stats_local
        record = {
            "step": self.step, "lr": lr, "loss_global": out.global_loss, "loss_local": out.local_loss,
            "loss_recon": out.recon_loss, "loss_total": out.total,
            "pos_global": _mean(stats_g, 0), "neg_global": _mean(stats_g, 1), "debiased_global": _mean(stats_g, 2),
            "pos_local": _mean(stats_l, 0), "neg_local": _mean(stats_l, 1), "debiased_local": _mean(stats_l, 2),
            "bank_global": len(self.bank_g), "bank_local": len(self.bank_l),
        }
        for key, val in record.items():
            if not np.isfinite(val):
                raise NumericalError(f"non-finite {key} at step {self.step}", iteration=self.step, component=key)
        self.step += 1
        self.records.append(record)
        return record

    def run(self, steps=None, out_dir=None, probe_volumes=None, probe_transforms=None):
        cfg = self.cfg
        steps = cfg.steps if steps is None else steps
        out = Path(out_dir) if out_dir is not None else None
        writer = fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "checkpoints").mkdir(exist_ok=True)
            (out / "config.json").write_text(json.dumps(
                {**cfg.to_dict(), "enqueue_policy": "one momentum embedding per crop view"}, indent=1))
            fh = open(out / "metrics.csv", "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
        probes = []
        try:
            while self.step < steps:
                rec = self.train_step(self.make_batch(self.step))
                if writer is not None:
                    writer.writerow([_fmt(rec[c]) for c in METRIC_COLUMNS])
                if out is not None and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save(out / "checkpoints" / f"step{self.step:06d}.ckpt")
                if probe_volumes is not None and cfg.probe_every and self.step % cfg.probe_every == 0:
                    corr, non = alignment_probe(self.net, probe_volumes, probe_transforms, cfg.probe_pairs,
                                                seed=cfg.seed, sampling=cfg.sampling, clip_range=cfg.clip_range)
                    probes.append((self.step, corr, non))
        finally:
            if fh is not None:
                fh.close()
        if out is not None:
            self.save(out / "checkpoints" / "final.ckpt")
            save_bank(self.bank_g, out / "bank_global.bank")
            save_bank(self.bank_l, out / "bank_local.bank")
            if probes:
                with open(out / "probe.csv", "w", newline="") as pf:
                    w = csv.writer(pf, lineterminator="\n")
                    w.writerow(("step", "mean_corr", "mean_noncorr", "margin"))
                    for s, c, n in probes:
                        w.writerow((s, _fmt(c), _fmt(n), _fmt(c - n)))
        return self.records

    def save(self, path):
        save_checkpoint(path, self.cfg.model, flat_params(self.net).numpy(), flat_params(self.twin).numpy(),
                        {"step": self.step, "seed": self.cfg.seed})


def _mean(stats, k):
    return float(np.mean([s[k] for s in stats])) if stats else 0.0


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else str(x)


# ----------------------------------------------------------------- probe


def _embed(net, crops):
    x = torch.from_numpy(np.stack(crops))[:, None].to(next(net.parameters()).dtype)
    with torch.no_grad():
        z, _ = net.encode(x)
        return net.global_embedding(z).double().numpy()


def alignment_probe(net, volumes, transforms, n_pairs: int = 64, seed: int = 0,
                    sampling: SamplingConfig | None = None, clip_range=(-1000.0, 1000.0), normalized=False):
    """Mean global-embedding cosine of corresponding vs. non-corresponding crop pairs.

    Corresponding pairs are a crop and its mapping into another volume;
    non-corresponding pairs have zero template-space overlap.
    """
    sampling = sampling or SamplingConfig(crop_size=tuple(net.cfg.crop_size))
    vols = {v.id: (v if normalized else clip_normalize(v, *clip_range)) for v in volumes}
    ids = sorted(vols)
    if len(ids) < 2:
        raise AvailabilityError("the probe needs at least two volumes", usable=len(ids))
    missing = [i for i in ids if i not in transforms]
    if missing:
        raise AvailabilityError(f"no transforms for {missing}", usable=len(ids) - len(missing))
    rng = np.random.default_rng([seed, 7919])
    crop = np.asarray(sampling.crop_size, dtype=np.float64)

    def random_patch(vid):
        from .correspondence import Patch

        dims = np.asarray(vols[vid].shape, dtype=np.float64)
        for _ in range(sampling.max_rejections):
            corner = rng.uniform(0, 1, 3) * np.maximum(dims - crop, 0)
            p = Patch(corner, np.minimum(crop, dims), vid)
            c = extract_crop(vols[vid], p, sampling.crop_size)
            if foreground_fraction(c, sampling.air_threshold) >= sampling.min_foreground:
                return p, c
        raise SamplingExhaustedError(f"no foreground crop found in {vid!r}")

    anchors, corr, non = [], [], []
    attempts = 0
    while len(anchors) < n_pairs:
        attempts += 1
        if attempts > 50 * n_pairs:
            raise SamplingExhaustedError("probe could not find enough crop pairs")
        i, j = rng.choice(len(ids), 2, replace=False)
        a, b = ids[i], ids[j]
        pa, ca = random_patch(a)
        try:
            pb = map_patch(pa, transforms[a], transforms[b], vols[b].shape, b)
        except OutOfFieldError:
            continue
        fa = to_template(pa, transforms[a])
        for _ in range(200):
            pn, cn = random_patch(b)
            if to_template(pn, transforms[b]) is not None and _disjoint(fa, to_template(pn, transforms[b])):
                break
        else:
            continue
        anchors.append(ca)
        corr.append(extract_crop(vols[b], pb, sampling.crop_size))
        non.append(cn)
    ea, ec, en = _embed(net, anchors), _embed(net, corr), _embed(net, non)
    return float(np.mean(np.sum(ea * ec, axis=1))), float(np.mean(np.sum(ea * en, axis=1)))


def _disjoint(a, b):
    lo, hi = intersection(a, b)
    return bool(np.any(hi - lo <= 0))
