"""Command-line entry point: ``spade <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, SpadeError

log = logging.getLogger("spade")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _load_transforms(directory, ids=None):
    from .registration import load_transform

    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"transform directory {d} does not exist")
    out = {}
    for f in sorted(d.glob("*.affine.json")):
        t, doc = load_transform(f)
        out[doc.get("moving_id") or f.name[: -len(".affine.json")]] = t
    if ids is not None:
        missing = [i for i in ids if i not in out]
        if missing:
            raise DataError(f"no transforms for volumes {missing}")
    return out


def cmd_phantom_gen(args):
    from .corpus import CorpusSpec, generate_corpus, write_corpus

    spec = CorpusSpec.from_dict(_read_json(args.spec)) if args.spec else CorpusSpec()
    volumes, truth = generate_corpus(spec)
    write_corpus(volumes, truth, args.out, spec)
    print(json.dumps({"volumes": len(volumes), "out": str(args.out)}))


def cmd_register(args):
    from .registration import RegistrationConfig, register, save_transform
    from .volumes import read_svol

    cfg = RegistrationConfig(**_read_json(args.config)) if args.config else None
    moving, template = read_svol(args.moving), read_svol(args.template)
    res = register(moving, template, cfg)
    save_transform(args.out, res.transform, moving.id, template.id, res.final_ncc)
    print(json.dumps({"moving_id": moving.id, "template_id": template.id, "final_ncc": res.final_ncc,
                      "initial_ncc": res.initial_ncc, "iterations": res.iterations}))


def cmd_register_corpus(args):
    from .registration import RegistrationConfig
    from .trainer import prepare_corpus
    from .volumes import load_volume_dir

    volumes = load_volume_dir(args.volumes)
    template = args.template or volumes[0].id
    cfg = RegistrationConfig(**_read_json(args.config)) if args.config else None
    transforms = prepare_corpus(volumes, template, cfg, args.out)
    print(json.dumps({"template_id": template, "registered": len(transforms), "out": str(args.out)}))


def cmd_iou(args):
    from .correspondence import load_patch, patch_iou, to_template

    a, b = load_patch(args.a), load_patch(args.b)
    if args.transforms:
        ts = _load_transforms(args.transforms, [a.volume_id, b.volume_id])
        value = patch_iou(to_template(a, ts[a.volume_id]), to_template(b, ts[b.volume_id]))
    else:
        if a.volume_id != b.volume_id:
            raise ConfigError("patches from different volumes need --transforms")
        value = patch_iou(a, b)
    print(repr(value))


def cmd_sample(args):
    """Cohort membership for one batch, against a loaded bank or one filled from earlier batches."""
    from .memory_bank import MemoryBank, enqueue_arrays, load_bank
    from .sampling import GLOBAL_STRATEGIES, StrategyId, build_global_cohorts, build_local_cohorts
    from .trainer import TrainConfig, Trainer
    from .volumes import load_volume_dir

    strategy = StrategyId.parse(args.strategy)
    doc = _read_json(args.config) if args.config else {}
    cfg = TrainConfig.from_dict(doc)
    volumes = load_volume_dir(args.volumes)
    transforms = _load_transforms(args.transforms, [v.id for v in volumes])
    trainer = Trainer(cfg, volumes, transforms)
    is_global = strategy in GLOBAL_STRATEGIES
    if args.bank:
        bank = load_bank(args.bank)
    else:
        # footprint-only bank: embeddings are placeholders, membership depends on footprints alone
        bank = MemoryBank(cfg.queue_global if is_global else cfg.queue_local, (2,))
        for s in range(args.fill_steps):
            b = trainer.make_batch(s)
            fps = b.crop_footprints if is_global else b.overlap_footprints
            emb = np.tile([1.0, 0.0], (len(fps), 1))
            bank = enqueue_arrays(bank, emb, [f.corner for f in fps], [f.size for f in fps])
    batch = trainer.make_batch(args.fill_steps)
    dim = bank.embeddings.shape[1:] if len(bank) else (2,)
    dummy = np.zeros(dim)
    dummy.flat[0] = 1.0
    cohorts = []
    if is_global:
        for c, fp in enumerate(batch.crop_footprints):
            n_pos = 1 + len(batch.positive_patches[c])
            co = build_global_cohorts(strategy, dummy, [dummy] * n_pos, fp, bank, cfg.sampling.o)
            cohorts.append((batch.pairs[c // 2][c % 2], fp, co))
    else:
        for q, fp in enumerate(batch.overlap_footprints):
            n_cross = 2 * len(batch.positive_patches[2 * q])
            co = build_local_cohorts(strategy, [dummy, dummy], [dummy] * n_cross, fp, bank, cfg.sampling.o)
            cohorts.append((batch.pairs[q][0], fp, co))
    doc = {
        "strategy": strategy.value,
        "anchor_volume": batch.anchor_id,
        "bank_size": len(bank),
        "o": cfg.sampling.o,
        "cohorts": [
            {
                "anchor": patch.to_dict(),
                "footprint": {"corner": fp.corner.tolist(), "size": fp.size.tolist()},
                "positive_ids": co.positive_ids,
                "positive_ious": [None if np.isnan(x) else float(x) for x in co.positive_ious],
                "negative_ids": co.negative_ids,
                "negative_ious": [float(x) for x in co.negative_ious],
                "debiased": co.debiased,
            }
            for patch, fp, co in cohorts
        ],
    }
    Path(args.out).write_text(json.dumps(doc, indent=1))
    print(json.dumps({"cohorts": len(cohorts), "bank_size": len(bank), "out": str(args.out)}))


def cmd_train(args):
    from .trainer import Trainer, load_train_config
    from .volumes import load_volume_dir

    cfg = load_train_config(args.config) if args.config else _default_config()
    volumes = load_volume_dir(args.volumes)
    transforms = _load_transforms(args.transforms, [v.id for v in volumes])
    probe_vols = probe_ts = None
    if args.probe_volumes:
        probe_vols = load_volume_dir(args.probe_volumes)
        probe_ts = _load_transforms(args.probe_transforms or args.transforms, [v.id for v in probe_vols])
    trainer = Trainer(cfg, volumes, transforms)
    records = trainer.run(out_dir=args.out, probe_volumes=probe_vols, probe_transforms=probe_ts)
    print(json.dumps({"steps": len(records), "final_loss": records[-1]["loss_total"], "out": str(args.out)}))


def _default_config():
    import os

    from .trainer import TrainConfig

    doc = {}
    if "SPADE_SEED" in os.environ:
        try:
            doc["seed"] = int(os.environ["SPADE_SEED"])
        except ValueError as exc:
            raise ConfigError("SPADE_SEED must be an integer") from exc
    return TrainConfig.from_dict(doc)


def cmd_probe(args):
    from .model import load_networks
    from .sampling import SamplingConfig
    from .trainer import alignment_probe, prepare_corpus
    from .volumes import load_volume_dir

    net, _, header = load_networks(args.checkpoint)
    volumes = load_volume_dir(args.volumes)
    if args.transforms:
        transforms = _load_transforms(args.transforms, [v.id for v in volumes])
    else:
        transforms = prepare_corpus(volumes, volumes[0].id)
    sampling = SamplingConfig(crop_size=tuple(net.cfg.crop_size))
    corr, non = alignment_probe(net, volumes, transforms, args.pairs, args.seed, sampling)
    print(json.dumps({"mean_corr": corr, "mean_noncorr": non, "margin": corr - non}))


def cmd_report(args):
    from .report import write_report

    paths = write_report(args.run, args.out, window=args.window, figures=not args.no_figures)
    print(json.dumps({"written": [str(p) for p in paths]}))


def build_parser():
    p = argparse.ArgumentParser(prog="spade", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom-gen", help="generate a synthetic phantom corpus")
    s.add_argument("--spec", help="corpus spec JSON (defaults apply when omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("register", help="affinely register one volume to a template")
    s.add_argument("--moving", required=True)
    s.add_argument("--template", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("register-corpus", help="register every volume of a directory to a template")
    s.add_argument("--volumes", required=True)
    s.add_argument("--template", help="template volume id (first volume by default)")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_register_corpus)

    s = sub.add_parser("iou", help="template-space IoU of two patches")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--transforms")
    s.set_defaults(func=cmd_iou)

    s = sub.add_parser("sample", help="emit cohort membership for one batch")
    s.add_argument("--strategy", required=True)
    s.add_argument("--volumes", required=True)
    s.add_argument("--transforms", required=True)
    s.add_argument("--config")
    s.add_argument("--bank", help="saved bank; otherwise filled from earlier batches")
    s.add_argument("--fill-steps", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("train", help="run pretraining")
    s.add_argument("--config")
    s.add_argument("--volumes", required=True)
    s.add_argument("--transforms", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--probe-volumes", help="held-out volumes for periodic probing")
    s.add_argument("--probe-transforms")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("probe", help="alignment probe of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--volumes", required=True)
    s.add_argument("--transforms")
    s.add_argument("--pairs", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("report", help="plot-ready CSV and figures for a run")
    s.add_argument("--run", required=True)
    s.add_argument("--out")
    s.add_argument("--window", type=int, default=25)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SpadeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
