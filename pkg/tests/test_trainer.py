import dataclasses

import numpy as np
import pytest
import torch

import spade.trainer as trainer_mod
from oracles import central_difference, random_unit, rel_error
from spade.errors import ConfigError, DataError, NumericalError
from spade.memory_bank import enqueue_arrays
from spade.model import ModelConfig, flat_params, set_flat_params
from spade.registration import AffineTransform, invert, warp
from spade.sampling import SamplingConfig
from spade.trainer import TrainConfig, Trainer, alignment_probe, load_train_config, prepare_corpus
from spade.volumes import PhantomSpec, generate_phantom


def quick_config(**kw):
    base = dict(steps=6, queue_global=64, queue_local=32, warmup_entries=8, checkpoint_every=3)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def corpus(small_corpus):
    vols, truth = small_corpus
    return vols, truth


def test_config_defaults_and_validation(tmp_path, monkeypatch):
    cfg = TrainConfig()
    assert (cfg.strategy_global, cfg.strategy_local, cfg.use_reconstruction) == ("G3", "L2", True)
    assert cfg.beta == 0.99 and cfg.batch_size == 4
    assert cfg.model.crop_size == cfg.sampling.crop_size
    assert TrainConfig(strategy_local="none").strategy_local == "none"
    for kw in [dict(strategy_global="L2"), dict(strategy_local="G1"), dict(beta=2.0), dict(steps=0),
               dict(positive_keys="both")]:
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    (tmp_path / "c.json").write_text('{"seed": 3, "sampling": {"p": 1, "crop_size": [4, 8, 8]}}')
    monkeypatch.setenv("SPADE_SEED", "11")
    loaded = load_train_config(tmp_path / "c.json")
    assert loaded.seed == 11 and loaded.sampling.p == 1 and loaded.model.crop_size == (4, 8, 8)
    again = TrainConfig.from_dict(loaded.to_dict())
    assert again == loaded


def test_prepare_corpus_template_only(tmp_path):
    v = generate_phantom(PhantomSpec(seed=0, size=(16, 32, 32)), id="t")
    t = prepare_corpus([v], "t", out_dir=tmp_path)
    assert list(t) == ["t"] and np.array_equal(t["t"].params(), AffineTransform.identity().params())
    assert (tmp_path / "t.affine.json").exists()
    with pytest.raises(DataError):
        prepare_corpus([v], "missing")


def test_prepare_corpus_recovers_shifts():
    template = generate_phantom(PhantomSpec(seed=5, size=(32, 64, 64), num_blobs=8), id="tmpl")
    shifts = {"a": (1.0, 3.0, -2.0), "b": (-2.0, -4.0, 5.0)}
    vols = [template]
    for vid, s in shifts.items():
        moved = warp(template, invert(AffineTransform.from_translation(s)))
        vols.append(dataclasses.replace(moved, id=vid))
    t = prepare_corpus(vols, "tmpl")
    assert np.array_equal(t["tmpl"].params(), AffineTransform.identity().params())
    center = np.array([[15.5, 31.5, 31.5]])
    for vid, s in shifts.items():
        assert np.max(np.abs(t[vid](center)[0] - (center[0] + s))) <= 1.0


def test_batch_is_deterministic(corpus):
    vols, truth = corpus
    tr = Trainer(quick_config(), vols, truth)
    a, b = tr.make_batch(4), tr.make_batch(4)
    assert np.array_equal(a.views, b.views) and np.array_equal(a.positives, b.positives)
    assert a.anchor_id == b.anchor_id
    assert a.views.shape == (8, 8, 16, 16)
    assert a.positives.shape == (16, 8, 16, 16)
    assert all(len(p) == 4 for p in a.positive_patches)
    assert all(pp.volume_id != a.anchor_id for plist in a.positive_patches for pp in plist)


def test_momentum_step_matches_formula(corpus):
    vols, truth = corpus
    tr = Trainer(quick_config(), vols, truth)
    eps0 = flat_params(tr.twin).double().numpy()
    tr.train_step(tr.make_batch(0))
    theta1 = flat_params(tr.net).double().numpy()
    eps1 = flat_params(tr.twin).double().numpy()
    assert np.allclose(eps1, 0.99 * eps0 + 0.01 * theta1, atol=1e-7, rtol=0)
    assert not np.allclose(theta1, eps0)


def test_bank_sizes_and_telemetry(corpus):
    vols, truth = corpus
    tr = Trainer(quick_config(verify_momentum=True), vols, truth)
    for k in range(1, 7):
        rec = tr.train_step(tr.make_batch(k - 1))
        assert rec["bank_global"] == min(64, 8 * k)
        assert rec["bank_local"] == min(32, 8 * k)
        assert all(np.isfinite(v) for v in rec.values())
    # debiasing only removes: per-cohort |negatives| + debiased = |bank|
    batch = tr.make_batch(6)
    out = tr.compute_losses(batch, backward=False)
    assert out.stats_global and out.stats_local
    for pos, neg, deb in out.stats_global:
        assert neg <= len(tr.bank_g) and neg + deb == len(tr.bank_g)
    for pos, neg, deb in out.stats_local:
        assert neg + deb == len(tr.bank_l) and pos == 2


def test_warmup_skips_contrastive_terms(corpus):
    vols, truth = corpus
    tr = Trainer(quick_config(warmup_entries=1000), vols, truth)
    rec = tr.train_step(tr.make_batch(0))
    assert rec["loss_global"] == 0.0 and rec["loss_local"] == 0.0 and rec["loss_recon"] > 0


def test_reconstruction_off_keeps_first_step_contrastive_loss(corpus):
    vols, truth = corpus
    recs = []
    for use_r in (True, False):
        tr = Trainer(quick_config(use_reconstruction=use_r, warmup_entries=0), vols, truth)
        rng = np.random.default_rng(0)
        tr.bank_g = enqueue_arrays(tr.bank_g, random_unit(rng, 32, 128), rng.uniform(0, 20, (32, 3)),
                                   np.full((32, 3), 8.0))
        tr.bank_l = enqueue_arrays(tr.bank_l, random_unit(rng, 16, 64, 3, 3), rng.uniform(0, 20, (16, 3)),
                                   np.full((16, 3), 8.0))
        recs.append(tr.train_step(tr.make_batch(0)))
    assert recs[0]["loss_global"] > 0 and recs[0]["loss_local"] > 0
    assert recs[0]["loss_global"] == recs[1]["loss_global"]
    assert recs[0]["loss_local"] == recs[1]["loss_local"]
    assert recs[0]["loss_total"] != recs[1]["loss_total"]


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_nan_parameters_abort(corpus):
    vols, truth = corpus
    tr = Trainer(quick_config(warmup_entries=0), vols, truth)
    tr.train_step(tr.make_batch(0))
    with torch.no_grad():
        tr.net.head_g[-1].weight.fill_(float("nan"))
    with pytest.raises(NumericalError):
        tr.train_step(tr.make_batch(1))


@pytest.mark.parametrize("keys", ["momentum", "online"])
@pytest.mark.parametrize("strategies", [("G3", "L2"), ("G1", "L4"), ("MoCo-baseline", "L3")])
def test_bridged_gradient_matches_finite_differences(corpus, keys, strategies):
    vols, truth = corpus
    tiny = ModelConfig(crop_size=(2, 4, 4), base_channels=2, z_channels=2, global_hidden=3, global_dim=4,
                       local_hidden=3, local_dim=2)
    cfg = TrainConfig(strategy_global=strategies[0], strategy_local=strategies[1], steps=4, queue_global=32,
                      queue_local=16, warmup_entries=4, positive_keys=keys, model=tiny,
                      sampling=SamplingConfig(crop_size=(2, 4, 4), n_plus=2, o=0.2, scale_range=(1.0, 2.0)))
    tr = Trainer(cfg, vols, truth, dtype=torch.float64)
    for s in range(2):
        tr.train_step(tr.make_batch(s))
    batch = tr.make_batch(2)
    tr.compute_losses(batch, backward=True)
    analytic = torch.cat([torch.zeros_like(p).reshape(-1) if p.grad is None else p.grad.reshape(-1)
                          for p in tr.net.parameters()]).numpy()
    theta0 = flat_params(tr.net).numpy()

    def f(vec):
        set_flat_params(tr.net, torch.from_numpy(vec))
        with torch.no_grad():
            return tr.compute_losses(batch, backward=False).total

    # a full sweep is thousands of loss evaluations; check a few coordinates from every tensor
    rng = np.random.default_rng(0)
    sizes = [p.numel() for p in tr.net.parameters()]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    idx = np.unique(np.concatenate([s + rng.choice(n, min(n, 4), replace=False) for s, n in zip(starts, sizes)]))
    numeric = np.array([central_difference(lambda t: f(_with(theta0, i, t[0])), [theta0[i]], 1e-5)[0]
                        for i in idx])
    set_flat_params(tr.net, torch.from_numpy(theta0))
    assert np.linalg.norm(numeric) > 0
    assert rel_error(analytic[idx], numeric) <= 1e-4


def _with(vec, i, value):
    out = vec.copy()
    out[i] = value
    return out


def test_runs_are_deterministic(corpus, tmp_path):
    vols, truth = corpus
    for name in ("a", "b"):
        Trainer(quick_config(), vols, truth).run(out_dir=tmp_path / name)
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert len(a.decode().strip().splitlines()) == 7
    for f in ("config.json", "bank_global.bank", "bank_local.bank", "checkpoints/final.ckpt",
              "checkpoints/step000003.ckpt", "checkpoints/step000006.ckpt"):
        assert (tmp_path / "a" / f).exists()


def test_run_writes_probe_csv(corpus, tmp_path):
    vols, truth = corpus
    tr = Trainer(quick_config(steps=2, probe_every=1, probe_pairs=4), vols[:6], truth)
    tr.run(out_dir=tmp_path, probe_volumes=vols[6:], probe_transforms=truth)
    lines = (tmp_path / "probe.csv").read_text().splitlines()
    assert lines[0] == "step,mean_corr,mean_noncorr,margin" and len(lines) == 3


def test_probe_self_cosine_is_one(corpus):
    vols, truth = corpus
    net = Trainer(quick_config(), vols, truth).net
    big = generate_phantom(PhantomSpec(seed=1, size=(32, 64, 64), num_blobs=12), id="orig")
    twins = [big, dataclasses.replace(big, id="copy")]
    ident = {v.id: AffineTransform.identity() for v in twins}
    corr, _ = alignment_probe(net, twins, ident, n_pairs=8, sampling=SamplingConfig(crop_size=(8, 16, 16)))
    assert corr == pytest.approx(1.0, abs=1e-6)


def test_probe_errors(corpus):
    vols, truth = corpus
    net = Trainer(quick_config(), vols, truth).net
    from spade.errors import AvailabilityError

    with pytest.raises(AvailabilityError):
        alignment_probe(net, vols[:1], truth)
    with pytest.raises(AvailabilityError):
        alignment_probe(net, vols[:2], {})


@pytest.mark.parametrize("seed", range(3))
def test_untrained_probe_has_no_margin(seed):
    from spade.corpus import CorpusSpec, generate_corpus

    vols, truth = generate_corpus(CorpusSpec(count=6, seed=seed))
    net = Trainer(TrainConfig(seed=seed), vols, truth).net
    corr, non = alignment_probe(net, vols, truth, n_pairs=64, seed=seed)
    assert abs(corr - non) <= 0.1


def test_bank_mass_route_matches_direct_losses(corpus, monkeypatch):
    vols, truth = corpus
    tr = Trainer(quick_config(strategy_local="L4", queue_global=256, queue_local=128), vols, truth,
                 dtype=torch.float64)
    for s in range(12):
        tr.train_step(tr.make_batch(s))
    batch = tr.make_batch(12)
    fast = tr.compute_losses(batch, backward=False)
    assert any(pos > 2 for pos, _, _ in fast.stats_global)
    monkeypatch.setattr(trainer_mod, "_row_mass", lambda cache, bank, cohort: None)
    direct = tr.compute_losses(batch, backward=False)
    assert fast.global_loss == pytest.approx(direct.global_loss, rel=1e-10)
    assert fast.local_loss == pytest.approx(direct.local_loss, rel=1e-10)
