"""Figures and the delimited ablation table."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .artifacts import write_csv  # noqa: E402
from .pipeline import SUMMARY_COLUMNS, AblationResult  # noqa: E402
from .artifacts import METRIC_COLUMNS  # noqa: E402


def _save(fig, path, config_json: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata={"Description": config_json})
    plt.close(fig)
    return path


def ablation_bars(result: AblationResult, path, config_json: str) -> Path:
    names = ["baseline"] + result.variants
    means = [result.mean(v) for v in names]
    stds = [result.std(v) for v in names]
    fig, ax = plt.subplots(figsize=(max(6, 0.55 * len(names)), 3.6))
    colours = ["0.6"] + ["C0" if "-mask-" in v else "C1" for v in result.variants]
    ax.bar(range(len(names)), means, yerr=stds, color=colours, capsize=3)
    ax.axhline(means[0], color="0.3", lw=0.8, ls="--")
    ax.axhline(result.teacher_mIoU, color="C3", lw=0.8, ls=":", label="teacher")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("val mIoU")
    lo = min(m - s for m, s in zip(means, stds))
    ax.set_ylim(max(0.0, lo - 0.05), min(1.0, max(max(means), result.teacher_mIoU) + 0.05))
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path, config_json)


def training_curves(result: AblationResult, path, config_json: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for v in ["baseline"] + result.variants:
        hists = [c.history for c in result.cells if c.variant == v]
        curve = np.mean([[r["mIoU"] for r in h] for h in hists], axis=0)
        ax.plot(np.arange(1, len(curve) + 1), curve, lw=1.4 if v == "baseline" else 0.8,
                color="k" if v == "baseline" else None, label=v)
    ax.set_xlabel("epoch")
    ax.set_ylabel("val mIoU (seed mean)")
    ax.legend(fontsize=5, ncol=2)
    fig.tight_layout()
    return _save(fig, path, config_json)


def mask_grid(masks: dict[str, np.ndarray], path, config_json: str) -> Path:
    """``masks`` maps band label to ``T × Hb × Wb`` soft masks."""
    labels = list(masks)
    t = next(iter(masks.values())).shape[0]
    fig, axes = plt.subplots(t, len(labels), figsize=(1.1 * len(labels), 1.2 * t), squeeze=False)
    for j, lab in enumerate(labels):
        for i in range(t):
            ax = axes[i][j]
            ax.imshow(masks[lab][i], vmin=0.0, vmax=1.0, cmap="magma")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(lab, fontsize=7)
    fig.tight_layout()
    return _save(fig, path, config_json)


def summary_table(result: AblationResult) -> list[dict]:
    return result.run_rows() + result.baseline_rows() + result.summary_rows()


def write_ablation(result: AblationResult, outdir, config_json: str) -> dict[str, Path]:
    outdir = Path(outdir)
    paths = {"summary": outdir / "summary.csv", "metrics": outdir / "metrics.csv"}
    write_csv(paths["summary"], SUMMARY_COLUMNS, summary_table(result), config_json)
    write_csv(paths["metrics"], METRIC_COLUMNS, result.metric_rows(), config_json)
    paths["bars"] = ablation_bars(result, outdir / "ablation.png", config_json)
    paths["curves"] = training_curves(result, outdir / "curves.png", config_json)
    return paths


def format_table(result: AblationResult) -> str:
    """Pipe-delimited comparison: mean ± std, lift over baseline, per-seed wins."""
    lines = ["variant | mIoU mean | mIoU std | lift | wins"]
    base = result.by_variant("baseline")
    for v in ["baseline"] + result.variants:
        vals = result.by_variant(v)
        lift = np.mean([vals[s] - base[s] for s in vals])
        wins = sum(vals[s] > base[s] for s in vals)
        lines.append(f"{v} | {result.mean(v):.4f} | {result.std(v):.4f} | {lift:+.4f} | {wins}/{len(vals)}")
    lines.append(f"teacher | {result.teacher_mIoU:.4f} | - | - | -")
    return "\n".join(lines)
