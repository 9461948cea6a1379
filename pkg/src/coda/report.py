"""Figure and delimited-output rendering for run artifacts.

Every report path writes machine-readable rows (JSON/CSV) plus a PNG figure
next to them; figures are rendered headless.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_csv(rows: list[dict], fieldnames: list[str], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def save_loss_figure(history: list[dict], path) -> Path:
    path = Path(path)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ts = [h["t"] for h in history]
    ax1.plot(ts, [h["loss_s"] for h in history], label="source CE", alpha=0.5)
    ax1.plot(ts, [h["loss_s_smooth"] for h in history], label="source CE (smoothed)", lw=2)
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(ts, [h["loss_t"] for h in history], label="target CE", color="tab:orange")
    ax2.plot(ts, [h["q_mean"] for h in history], label="mean confidence q", color="tab:green")
    ax2.set_xlabel("iteration")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_eval_figure(report: dict, path) -> Path:
    path = Path(path)
    names = list(report["scene"]) + ["overall"]
    scores = [report["scene"][s]["miou"] for s in report["scene"]] + [
        report["overall"]["miou"]
    ]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(names, [100 * s for s in scores], color="tab:blue")
    bars[-1].set_color("tab:red")
    ax.set_ylabel("mIoU (%)")
    ax.set_ylim(0, 100)
    ax.set_title(f"savpt={'on' if report['savpt'] else 'off'}")
    for rect, s in zip(bars, scores):
        ax.text(rect.get_x() + rect.get_width() / 2, rect.get_height() + 1,
                f"{100 * s:.1f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def eval_report_rows(report: dict) -> list[dict]:
    rows = []
    for scene, entry in list(report["scene"].items()) + [("overall", report["overall"])]:
        row = {"scene": scene, "miou": entry["miou"], "pixels": entry["pixels"]}
        for i, v in enumerate(entry["per_class"]):
            row[f"iou_class{i}"] = v
        rows.append(row)
    return rows


def save_range_figure(report: dict, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (strategy, entry) in enumerate(report["strategies"].items()):
        scores = [100 * r["miou"] for r in entry["runs"] if "miou" in r]
        seeds = [r["seed"] for r in entry["runs"] if "miou" in r]
        xs = [i] * len(scores)
        ax.scatter(xs, scores, label=strategy)
        for x, y, seed in zip(xs, scores, seeds):
            ax.annotate(str(seed), (x, y), textcoords="offset points", xytext=(6, 0), fontsize=7)
        if entry["range"] is not None:
            ax.vlines(i, min(scores), max(scores), color="gray", alpha=0.5)
            ax.text(i, max(scores) + 0.5, f"range {100 * entry['range']:.2f}", ha="center",
                    fontsize=8)
    ax.set_xticks(range(len(report["strategies"])))
    ax.set_xticklabels(list(report["strategies"]))
    ax.set_ylabel("final mIoU (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def range_report_rows(report: dict) -> list[dict]:
    rows = []
    for strategy, entry in report["strategies"].items():
        for run in entry["runs"]:
            rows.append(
                {
                    "strategy": strategy,
                    "seed": run["seed"],
                    "miou": run.get("miou"),
                    "error": run.get("error", ""),
                }
            )
    return rows


def save_sweep_figure(rows: list[dict], x_key: str, title: str, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [str(r[x_key]) for r in rows]
    ys = [100 * r["miou"] for r in rows]
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(x_key)
    ax.set_ylabel("final mIoU (%)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_severity_figure(hist: dict, path) -> Path:
    path = Path(path)
    scenes = list(hist["scenes"])
    high = [hist["scenes"][s]["high"] for s in scenes]
    low = [hist["scenes"][s]["low"] for s in scenes]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(scenes, high, label="high severity", color="tab:purple")
    ax.bar(scenes, low, bottom=high, label="low severity", color="tab:green")
    ax.set_ylabel("images")
    ax.set_title(f"sigma={hist['sigma']}, tau={hist['tau']}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
