"""Report rendering: report.json (full numbers), summary.csv (one row per
scenario/shot cell), and roc_grid.svg (one panel per scenario, one mean ROC
curve per shot count, x axis plotted as 1 - specificity)."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import SweepReport

log = logging.getLogger(__name__)


def write_report_json(report: SweepReport, path: str | Path, deterministic: bool = False) -> None:
    doc = report.to_dict(deterministic=deterministic)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def write_summary_csv(report: SweepReport, path: str | Path, deterministic: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scenario", "k", "mean_auc", "std_auc", "sens", "spec", "fit_time_s"])
        for scenario in report.scenarios:
            for k in report.shot_list:
                cell = report.cells.get((scenario, k))
                if cell is None:
                    continue
                d = cell.to_dict(deterministic=deterministic)
                writer.writerow([
                    f"{scenario[0]}:{scenario[1]}",
                    k,
                    f"{d['mean_auc']:.6f}",
                    f"{d['std_auc']:.6f}",
                    f"{d['mean_sensitivity']:.6f}",
                    f"{d['mean_specificity']:.6f}",
                    f"{d['mean_fit_time_s']:.4f}",
                ])


def write_roc_grid_svg(report: SweepReport, path: str | Path, deterministic: bool = False) -> None:
    n_panels = max(1, len(report.scenarios))
    fig, axes = plt.subplots(1, n_panels, figsize=(4.0 * n_panels, 3.6), squeeze=False)
    with plt.rc_context({"svg.hashsalt": "fslkit"}):
        for col, scenario in enumerate(report.scenarios):
            ax = axes[0][col]
            for k in report.shot_list:
                cell = report.cells.get((scenario, k))
                if cell is None:
                    continue
                ax.plot(cell.mean_fpr, cell.mean_tpr, label=f"k={k} (AUC {cell.mean_auc:.2f})")
            ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=0.8)
            ax.set_xlabel("1 - Specificity")
            ax.set_ylabel("Sensitivity")
            ax.set_title(f"{scenario[0]} vs {scenario[1]}")
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1.02)
            ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        metadata = {"Date": None} if deterministic else None
        fig.savefig(path, format="svg", metadata=metadata)
    plt.close(fig)


def write_sweep_outputs(report: SweepReport, out_dir: str | Path, deterministic: bool = False) -> dict[str, Path]:
    """Write the three report artifacts into out_dir and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "report_json": out_dir / "report.json",
        "summary_csv": out_dir / "summary.csv",
        "roc_grid_svg": out_dir / "roc_grid.svg",
    }
    write_report_json(report, paths["report_json"], deterministic=deterministic)
    write_summary_csv(report, paths["summary_csv"], deterministic=deterministic)
    write_roc_grid_svg(report, paths["roc_grid_svg"], deterministic=deterministic)
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return paths
