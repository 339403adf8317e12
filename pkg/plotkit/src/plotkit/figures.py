"""Figure rendering: attainment curves with goodput markers, blocking bars.

Pure readers of the simulator's CSV/JSON artifacts; each renderer also
returns the plotted numbers so callers and tests can check them without
parsing image files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .frames import SweepFrame

AXIS_LABELS = {
    "rate": "request rate (req/s)",
    "slo_scale": "SLO scale",
    "chunk_tokens": "chunk size (tokens)",
    "batch_budget": "batch token budget",
}


def plot_attainment_curve(
    sweep_csvs: Sequence[str], target: float, out_image: str
) -> dict:
    """One attainment curve per CSV, a horizontal target line, and per
    series a vertical line at the largest swept value still meeting the
    target. Single-row series render as a scatter point without a line.
    """
    if not sweep_csvs:
        raise ValueError("need at least one sweep CSV")
    frames = [SweepFrame.load(p) for p in sweep_csvs]
    svars = {f.sweep_var for f in frames}
    if len(svars) != 1:
        raise ValueError(f"sweep CSVs disagree on sweep_var: {sorted(svars)}")
    sweep_var = svars.pop()

    # Disambiguate series whose files share a basename (e.g. out/*/sweep.csv).
    labels: list[str] = []
    for frame in frames:
        label = frame.label
        if label in labels:
            label = f"{Path(frame.path).parent.name}/{frame.label}"
        while label in labels:
            label = f"{label}#{len(labels)}"
        labels.append(label)

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    series: dict[str, dict] = {}
    for i, (frame, label) in enumerate(zip(frames, labels)):
        color = f"C{i}"
        if len(frame.values) == 1:
            ax.scatter(frame.values, frame.attainments, color=color, label=label)
            marker = None
        else:
            ax.plot(frame.values, frame.attainments, "o-", color=color, label=label)
            marker = frame.goodput(target)
            if marker is not None:
                ax.axvline(marker, color=color, linestyle="--", alpha=0.7)
        series[label] = {"goodput": marker, "points": len(frame.values)}

    ax.axhline(target, color="gray", linestyle=":", label=f"target {target:.0%}")
    ax.set_xlabel(AXIS_LABELS.get(sweep_var, sweep_var))
    ax.set_ylabel("SLO attainment")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_image)
    plt.close(fig)
    return {"out": out_image, "sweep_var": sweep_var, "target": target, "series": series}


def plot_blocking_bars(summary_jsons: Sequence[str], out_image: str) -> dict:
    """Grouped bars of mean preemption blocking time per run summary."""
    if not summary_jsons:
        raise ValueError("need at least one summary JSON")
    labels, means = [], []
    for path in summary_jsons:
        with open(path, "r", encoding="utf-8") as fh:
            summary = json.load(fh)
        for field in ("granularity", "blocking"):
            if field not in summary:
                raise ValueError(f"{path}: missing field {field!r}")
        blocking = summary["blocking"]
        if blocking.get("count", 0) == 0 or blocking.get("mean_s") is None:
            raise ValueError(f"{path}: no blocking samples (field 'blocking.mean_s')")
        label = summary["granularity"]
        if label in labels:
            label = f"{label} ({Path(path).stem})"
        labels.append(label)
        means.append(float(blocking["mean_s"]) * 1e3)

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(labels, means, color=[f"C{i}" for i in range(len(labels))])
    ax.set_ylabel("mean blocking time (ms)")
    ax.set_xlabel("preemption granularity")
    fig.tight_layout()
    fig.savefig(out_image)
    plt.close(fig)
    return {"out": out_image, "bars": dict(zip(labels, means))}
