import csv
import json

import pytest

from spade.cli import main
from spade.correspondence import Patch

TRAIN = {"steps": 3, "queue_global": 32, "queue_local": 16, "warmup_entries": 8, "checkpoint_every": 0,
         "sampling": {"n_plus": 2}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = {"phantom": {"seed": 2, "size": [16, 32, 32], "num_blobs": 8}, "count": 4, "seed": 1,
            "max_translation": 2.0}
    (root / "corpus.json").write_text(json.dumps(spec))
    (root / "train.json").write_text(json.dumps(TRAIN))
    assert main(["phantom-gen", "--spec", str(root / "corpus.json"), "--out", str(root / "vols")]) == 0
    return root


def test_phantom_gen_layout(workspace):
    names = sorted(p.name for p in (workspace / "vols").glob("*.svol"))
    assert names == ["vol000.svol", "vol001.svol", "vol002.svol", "vol003.svol"]
    assert len(list((workspace / "vols" / "truth").glob("*.affine.json"))) == 4


def test_register_and_corpus(workspace, capsys):
    v = workspace / "vols"
    assert main(["register", "--moving", str(v / "vol001.svol"), "--template", str(v / "vol000.svol"),
                 "--out", str(workspace / "one.affine.json")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["moving_id"] == "vol001" and doc["final_ncc"] >= doc["initial_ncc"]
    assert main(["register-corpus", "--volumes", str(v), "--out", str(workspace / "tf")]) == 0
    assert len(list((workspace / "tf").glob("*.affine.json"))) == 4


def test_iou(workspace, capsys):
    a = workspace / "a.json"
    b = workspace / "b.json"
    a.write_text(json.dumps(Patch((0, 0, 0), (10, 10, 10), "vol000").to_dict()))
    b.write_text(json.dumps(Patch((0, 0, 5), (10, 10, 10), "vol000").to_dict()))
    assert main(["iou", "--a", str(a), "--b", str(b)]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1 / 3)
    b.write_text(json.dumps(Patch((0, 0, 5), (10, 10, 10), "vol001").to_dict()))
    assert main(["iou", "--a", str(a), "--b", str(b)]) == 2
    assert main(["iou", "--a", str(a), "--b", str(b), "--transforms", str(workspace / "vols" / "truth")]) == 0


@pytest.mark.parametrize("strategy", ["G3", "L2", "MoCo-baseline"])
def test_sample_audit(workspace, strategy):
    out = workspace / f"cohorts_{strategy}.json"
    args = ["sample", "--strategy", strategy, "--volumes", str(workspace / "vols"), "--transforms",
            str(workspace / "vols" / "truth"), "--config", str(workspace / "train.json"), "--fill-steps", "3",
            "--out", str(out)]
    assert main(args) == 0
    doc = json.loads(out.read_text())
    assert doc["strategy"] == strategy and doc["cohorts"]
    for c in doc["cohorts"]:
        assert not set(c["positive_ids"]) & set(c["negative_ids"])
        assert all(iou <= doc["o"] for iou in c["negative_ious"]) or strategy == "MoCo-baseline"


def test_train_probe_report(workspace, capsys):
    run = workspace / "run"
    args = ["train", "--config", str(workspace / "train.json"), "--volumes", str(workspace / "vols"),
            "--transforms", str(workspace / "vols" / "truth"), "--out", str(run)]
    assert main(args) == 0
    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    capsys.readouterr()
    assert main(["probe", "--checkpoint", str(run / "checkpoints" / "final.ckpt"), "--volumes",
                 str(workspace / "vols"), "--transforms", str(workspace / "vols" / "truth"), "--pairs", "8"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["margin"] == pytest.approx(doc["mean_corr"] - doc["mean_noncorr"])
    assert main(["report", "--run", str(run)]) == 0
    rep = run / "report"
    for name in ("loss_curves.csv", "cohort_stats.csv", "loss_curves.png", "cohort_stats.png"):
        assert (rep / name).stat().st_size > 0


def test_seed_override(workspace, monkeypatch):
    monkeypatch.setenv("SPADE_SEED", "5")
    run = workspace / "run_seed"
    assert main(["train", "--config", str(workspace / "train.json"), "--volumes", str(workspace / "vols"),
                 "--transforms", str(workspace / "vols" / "truth"), "--out", str(run)]) == 0
    assert json.loads((run / "config.json").read_text())["seed"] == 5


def test_exit_codes(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"strategy_global": "G9"}')
    vols = str(workspace / "vols")
    truth = str(workspace / "vols" / "truth")
    assert main(["train", "--config", str(bad), "--volumes", vols, "--transforms", truth,
                 "--out", str(tmp_path / "r")]) == 2
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--volumes", vols, "--transforms", truth,
                 "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--volumes", str(tmp_path / "nothing"), "--transforms", truth,
                 "--out", str(tmp_path / "r")]) == 3
    assert main(["probe", "--checkpoint", str(tmp_path / "none.ckpt"), "--volumes", vols]) == 3
    with pytest.raises(SystemExit):
        main(["no-such-command"])
