"""Figure rendering for training histories and cost reports.

Every report path writes its delimited output (CSV / JSON / text table)
with a rendered PNG next to it, so a run directory is self-explanatory.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = ["write_history", "plot_history", "plot_cost_report", "write_cost_report"]


def write_history(history, path: str) -> None:
    """history rows are (iteration, epoch, loss, test_acc)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "epoch", "loss", "test_acc"])
        for row in history:
            w.writerow([row[0], f"{row[1]:.3f}", f"{row[2]:.6f}", f"{row[3]:.6f}"])


def plot_history(history, path: str, title: str = "training") -> None:
    fig, ax1 = plt.subplots(figsize=(7, 4))
    if history:
        its = [r[0] for r in history]
        ax1.plot(its, [r[2] for r in history], color="tab:red", label="loss")
        ax2 = ax1.twinx()
        ax2.plot(its, [r[3] for r in history], color="tab:blue", label="test accuracy")
        ax2.set_ylabel("test accuracy", color="tab:blue")
        ax2.set_ylim(0, 1)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss", color="tab:red")
    ax1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_cost_report(report, path: str, title: str = "energy per inference") -> None:
    """Log-scale bars: float reference vs LUT execution, with the preamble
    share of the LUT bar hatched."""
    fig, ax = plt.subplots(figsize=(6, 4))
    fp = report.energy_fp_pj
    labels, values, colors = ["32-bit float"], [fp], ["tab:gray"]
    if report.energy_lut_pj is not None:
        labels.append("LUT netlist")
        values.append(report.energy_lut_pj)
        colors.append("tab:green")
    bars = ax.bar(labels, values, color=colors)
    if report.energy_lut_pj is not None and report.preamble_share:
        pre = report.energy_lut_pj * report.preamble_share
        ax.bar(["LUT netlist"], [pre], color="tab:olive", hatch="//",
               label=f"float preamble ({report.preamble_share * 100:.0f}%)")
        ax.legend()
    ax.set_yscale("log")
    ax.set_ylabel("energy (pJ / inference)")
    if report.improvement_ratio:
        ax.set_title(f"{title}  ({report.improvement_ratio:.1f}x improvement)")
    else:
        ax.set_title(title)
    for bar, v in zip(bars, values):
        ax.annotate(f"{v * 1e-6:.4g} uJ", (bar.get_x() + bar.get_width() / 2, v),
                    ha="center", va="bottom", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_cost_report(report, base_path: str) -> list:
    """Emit <base>.json, <base>.txt, and <base>.png; returns the paths."""
    import json
    paths = [base_path + ".json", base_path + ".txt", base_path + ".png"]
    with open(paths[0], "w") as fh:
        json.dump(report.to_json(), fh, indent=1)
    with open(paths[1], "w") as fh:
        fh.write(report.format_table() + "\n")
    plot_cost_report(report, paths[2])
    return paths
