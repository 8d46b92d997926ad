"""Plot-ready CSV tables and figures from a training run directory."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DataError

LOSS_COLUMNS = ("loss_global", "loss_local", "loss_recon", "loss_total")
COHORT_COLUMNS = ("pos_global", "neg_global", "debiased_global", "pos_local", "neg_local", "debiased_local",
                  "bank_global", "bank_local")


def read_metrics(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read metrics {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} holds no records")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def smooth(x, window: int):
    """Trailing moving average; the first entries average over what is available."""
    if window <= 1:
        return np.asarray(x, dtype=np.float64)
    c = np.cumsum(np.insert(np.asarray(x, dtype=np.float64), 0, 0.0))
    n = np.arange(1, len(x) + 1)
    lo = np.maximum(n - window, 0)
    return (c[n] - c[lo]) / (n - lo)


def _write_table(path, header, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else int(v) for v in row])


def write_report(run_dir, out_dir=None, window: int = 25, figures: bool = True) -> list[Path]:
    """Writes ``loss_curves.csv``, ``cohort_stats.csv`` and, if asked, PNG figures. Returns the paths."""
    run = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    m = read_metrics(run / "metrics.csv")
    step = m["step"].astype(int)
    written = []

    loss_cols = [c for c in LOSS_COLUMNS if c in m]
    header = ["step"] + loss_cols + [f"{c}_smooth" for c in loss_cols]
    _write_table(out / "loss_curves.csv", header,
                 [step] + [m[c] for c in loss_cols] + [smooth(m[c], window) for c in loss_cols])
    written.append(out / "loss_curves.csv")

    cohort_cols = [c for c in COHORT_COLUMNS if c in m]
    _write_table(out / "cohort_stats.csv", ["step"] + cohort_cols, [step] + [m[c] for c in cohort_cols])
    written.append(out / "cohort_stats.csv")

    probe = None
    if (run / "probe.csv").exists():
        probe = read_metrics(run / "probe.csv")

    if figures:
        written += _figures(out, step, m, loss_cols, window, probe)
    return written


def _figures(out, step, m, loss_cols, window, probe):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, axes = plt.subplots(1, len(loss_cols), figsize=(3.2 * len(loss_cols), 2.8))
    for ax, c in zip(np.atleast_1d(axes), loss_cols):
        ax.plot(step, m[c], color="0.75", lw=0.6)
        ax.plot(step, smooth(m[c], window), color="C0", lw=1.2)
        ax.set_title(c.replace("_", " "))
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=110)
    plt.close(fig)
    paths.append(out / "loss_curves.png")

    fig, axes = plt.subplots(1, 2, figsize=(7, 2.8))
    for ax, kind in zip(axes, ("global", "local")):
        for c, label in ((f"pos_{kind}", "positives"), (f"neg_{kind}", "negatives"),
                         (f"debiased_{kind}", "debiased"), (f"bank_{kind}", "bank size")):
            if c in m:
                ax.plot(step, m[c], lw=1.0, label=label)
        ax.set_title(f"{kind} cohorts")
        ax.set_xlabel("step")
        ax.set_yscale("symlog")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "cohort_stats.png", dpi=110)
    plt.close(fig)
    paths.append(out / "cohort_stats.png")

    if probe is not None:
        fig, ax = plt.subplots(figsize=(3.6, 2.8))
        ax.plot(probe["step"], probe["mean_corr"], marker="o", label="corresponding")
        ax.plot(probe["step"], probe["mean_noncorr"], marker="o", label="non-corresponding")
        ax.set_xlabel("step")
        ax.set_ylabel("mean cosine")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "probe.png", dpi=110)
        plt.close(fig)
        paths.append(out / "probe.png")
    return paths
