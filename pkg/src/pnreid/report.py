"""Figures and a tab-delimited summary for a finished run directory."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "svg.hashsalt": "pnreid",
}


def _read_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_cmc(cmc_csv: Path, out: Path, max_rank: int = 20) -> Path:
    d = _read_csv(cmc_csv)
    fig, ax = plt.subplots(figsize=(4, 3))
    k = d["rank"][:max_rank]
    ax.plot(k, d["accuracy"][:max_rank], marker="o", ms=3)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.set_title("CMC")
    return _save(fig, out)


def plot_gan_losses(gan_csv: Path, out: Path, window: int = 25) -> Path:
    d = _read_csv(gan_csv)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    kernel = np.ones(window) / window
    for name in ("L_D", "gen_adv"):
        y = np.convolve(d[name], kernel, mode="valid") if len(d[name]) >= window else d[name]
        axes[0].plot(d["step"][len(d["step"]) - len(y):], y, label=name)
    axes[0].set_xlabel("step")
    axes[0].set_title("adversarial terms")
    axes[0].legend()
    y = np.convolve(d["L1"], kernel, mode="valid") if len(d["L1"]) >= window else d["L1"]
    axes[1].plot(d["step"][len(d["step"]) - len(y):], y, color="C2")
    axes[1].set_xlabel("step")
    axes[1].set_title("L1 reconstruction")
    fig.tight_layout()
    return _save(fig, out)


def plot_reid_curves(csvs: dict[str, Path], out: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for label, path in csvs.items():
        d = _read_csv(path)
        if not d:
            continue
        axes[0].plot(d["epoch"], d["loss"], label=label)
        axes[1].plot(d["epoch"], d["accuracy"], label=label)
    axes[0].set_title("identity loss")
    axes[1].set_title("training accuracy")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend()
    fig.tight_layout()
    return _save(fig, out)


def plot_pose_projection(projection_csv: Path, out: Path) -> Path:
    with open(projection_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    xy = np.array([[float(r["pc1"]), float(r["pc2"])] for r in rows])
    lab = np.array([int(r["cluster"]) for r in rows])
    canon = np.array([r["is_canonical"] == "1" for r in rows])
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(xy[:, 0], xy[:, 1], c=lab, cmap="tab10", s=10)
    ax.scatter(xy[canon, 0], xy[canon, 1], marker="x", c="red", s=60, label="canonical")
    ax.set_xlabel("principal axis 1")
    ax.set_ylabel("principal axis 2")
    ax.legend()
    return _save(fig, out)


def plot_canonical_poses(canon_dir: Path, out: Path) -> Path:
    from .synth_data import image_to_uint8, load_png

    paths = sorted(canon_dir.glob("pose_*.png"), key=lambda p: int(p.stem.split("_")[1]))
    fig, axes = plt.subplots(1, len(paths), figsize=(1.2 * len(paths), 2.6))
    for ax, p in zip(np.atleast_1d(axes), paths):
        ax.imshow(image_to_uint8(load_png(p)), interpolation="nearest")
        ax.set_title(p.stem.split("_")[1])
        ax.axis("off")
    return _save(fig, out)


def build_report(run_root, out_dir=None) -> Path:
    """Render every figure whose inputs exist and write ``summary.tsv``."""
    run_root = Path(run_root)
    out_dir = Path(out_dir) if out_dir else run_root / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[str, str, str]] = []
    with plt.rc_context(STYLE):
        if (run_root / "metrics" / "cmc.csv").is_file():
            rows.append(("figure", "cmc", str(plot_cmc(run_root / "metrics" / "cmc.csv", out_dir / "cmc.png").name)))
        if (run_root / "losses" / "gan.csv").is_file():
            rows.append(("figure", "gan_losses",
                         plot_gan_losses(run_root / "losses" / "gan.csv", out_dir / "gan_losses.png").name))
        reid = {k: run_root / "losses" / f"reid_{k}.csv" for k in ("a", "b")}
        reid = {f"backbone {k.upper()}": p for k, p in reid.items() if p.is_file()}
        if reid:
            rows.append(("figure", "reid_training", plot_reid_curves(reid, out_dir / "reid_training.png").name))
        proj = run_root / "canonical_poses" / "projection.csv"
        if proj.is_file():
            rows.append(("figure", "pose_projection", plot_pose_projection(proj, out_dir / "pose_projection.png").name))
        if (run_root / "canonical_poses").is_dir():
            rows.append(("figure", "canonical_poses",
                         plot_canonical_poses(run_root / "canonical_poses", out_dir / "canonical_poses.png").name))
    ev = run_root / "metrics" / "eval.json"
    if ev.is_file():
        e = json.loads(ev.read_text())
        rows.append(("metric", "mAP", f"{e['map']:.6f}"))
        for r in e["ranks"]:
            rows.append(("metric", f"rank{r['k']}", f"{r['acc']:.6f}"))
        rows.append(("metric", "n_queries", str(e["n_queries"])))
        rows.append(("metric", "n_excluded", str(e["n_excluded"])))
    ab = run_root / "metrics" / "ablation.json"
    if ab.is_file():
        for name, vals in sorted(json.loads(ab.read_text()).items()):
            rows.append(("ablation", f"{name}.map", f"{vals['map']:.6f}"))
            rows.append(("ablation", f"{name}.rank1", f"{vals['rank1']:.6f}"))
    with open(out_dir / "summary.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["kind", "name", "value"])
        w.writerows(rows)
    return out_dir


SCHEMA_FILES = {
    "metrics/eval.json": "eval.schema.json",
    "metrics/ablation.json": "ablation.schema.json",
    "manifest.json": "run_manifest.schema.json",
    "canonical_poses/manifest.json": "canonical_manifest.schema.json",
    "dataset/split.json": "dataset_split.schema.json",
    "config.lock.json": "config_lock.schema.json",
}


def load_schema(name: str) -> dict:
    from importlib.resources import files

    return json.loads(files("pnreid").joinpath("schemas", name).read_text())
