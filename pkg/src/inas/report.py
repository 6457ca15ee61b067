"""Report emission: trade-off frontiers, architecture-usage histograms,
band-tracking curves. Every report is a file artifact (CSV or JSON for the
data, a rendered PNG alongside); nothing mutates run state.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .runs import read_metrics


def load_checkpoint_index(run_dir) -> list[dict]:
    path = Path(run_dir) / "checkpoints" / "index.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint index at {path}; run `search` first")
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def frontier_report(run_dir, out_dir=None) -> Path:
    """CSV of (name, error %, latency mean/std) per checkpoint, sorted by
    latency ascending, plus a plot-data file and a rendered frontier figure."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in load_checkpoint_index(run_dir):
        s = entry["summary"]
        rows.append({
            "name": f"epoch-{entry['epoch']:03d}",
            "err_pct": round(100.0 * (1.0 - s["val_acc"]), 6),
            "latency_ms_mean": s["mean_latency_ms"],
            "latency_ms_std": s["std_latency_ms"],
        })
    rows.sort(key=lambda r: r["latency_ms_mean"])

    csv_path = out_dir / "frontier.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["name", "err_pct", "latency_ms_mean", "latency_ms_std"])
        writer.writeheader()
        writer.writerows(rows)

    points_path = out_dir / "frontier_points.csv"
    with open(points_path, "w", newline="") as fh:
        fh.write("latency_ms,accuracy\n")
        for r in rows:
            fh.write(f"{r['latency_ms_mean']},{1.0 - r['err_pct'] / 100.0}\n")

    fig, ax = plt.subplots(figsize=(6, 4))
    lats = [r["latency_ms_mean"] for r in rows]
    errs = [r["err_pct"] for r in rows]
    ax.errorbar(lats, errs, xerr=[r["latency_ms_std"] for r in rows],
                fmt="o-", markersize=3, linewidth=0.8, capsize=2)
    ax.set_xlabel("mean estimated latency (ms)")
    ax.set_ylabel("error (%)")
    ax.set_title("accuracy / latency trade-off per checkpoint")
    fig.tight_layout()
    fig.savefig(out_dir / "frontier.png", dpi=120)
    plt.close(fig)
    return csv_path


def arch_usage_report(selections, probs, latencies_ms, groups, spec, out_dir) -> Path:
    """Histogram of deterministic selections plus the raw per-instance policy
    vectors, exported for external projection tools."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [sel.to_string(spec) for sel in selections]
    counts = Counter(names)

    hist_path = out_dir / "arch_usage.csv"
    with open(hist_path, "w", newline="") as fh:
        fh.write("selection,count\n")
        for name, count in counts.most_common():
            fh.write(f"{name},{count}\n")

    with open(out_dir / "policies.csv", "w", newline="") as fh:
        fh.write(",".join(f"p{i}" for i in range(probs.shape[1])) + "\n")
        for row in probs:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")

    summary = {
        "instances": len(names),
        "distinct_selections": len(counts),
        "mean_latency_ms": float(np.mean(latencies_ms)),
    }
    if groups is not None:
        summary["group_mean_latency_ms"] = {
            str(g): float(np.mean(np.asarray(latencies_ms)[np.asarray(groups) == g]))
            for g in sorted(set(int(g) for g in groups))
        }
    with open(out_dir / "usage_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    fig, ax = plt.subplots(figsize=(7, 4))
    top = counts.most_common(20)
    ax.bar(range(len(top)), [c for _, c in top])
    ax.set_xticks(range(len(top)))
    ax.set_xticklabels([n for n, _ in top], rotation=90, fontsize=5, family="monospace")
    ax.set_ylabel("instances")
    ax.set_title(f"architecture usage ({len(counts)} distinct selections)")
    fig.tight_layout()
    fig.savefig(out_dir / "arch_usage.png", dpi=120)
    plt.close(fig)
    return hist_path


def band_tracking_figure(run_dir, out_dir=None) -> Path | None:
    """Mean estimated latency per epoch against the decaying reward band."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [r for r in read_metrics(run_dir / "metrics.jsonl")
               if r["stage"] in ("search", "oracle") and r["phase"] == "controller"]
    if not records:
        return None
    epochs = [r["epoch"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    z = [r["mean_latency_ms"] for r in records]
    if any(v is not None for v in z):
        ax.plot(epochs, z, label="mean estimated latency", linewidth=1.2)
    ax.plot(epochs, [r["U_t"] for r in records], "--", label="upper bound", linewidth=1.0)
    ax.plot(epochs, [r["L_t"] for r in records], "--", label="lower bound", linewidth=1.0)
    ax.fill_between(epochs, [r["L_t"] for r in records], [r["U_t"] for r in records], alpha=0.12)
    ax.set_xlabel("joint epoch")
    ax.set_ylabel("latency (ms)")
    ax.legend(fontsize=8)
    ax.set_title("reward band tracking")
    fig.tight_layout()
    path = out_dir / "band_tracking.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def correlation_figure(estimated, measured, r, out_path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(estimated, measured, s=8, alpha=0.6)
    lo = min(min(estimated), min(measured))
    hi = max(max(estimated), max(measured))
    ax.plot([lo, hi], [lo, hi], "k--", linewidth=0.8)
    ax.set_xlabel("estimated latency (ms)")
    ax.set_ylabel("measured latency (ms)")
    ax.set_title(f"lookup-table estimate vs wall clock (r = {r:.3f})")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
