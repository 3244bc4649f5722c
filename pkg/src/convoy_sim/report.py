"""Figure rendering and trace re-analysis for the replay path.

Reads the per-step trace CSV back in and renders the standard run figures
(per-vehicle speed and position error over time, decision markers) to PNG
files next to the delimited output, plus an average-speed histogram for
batch aggregates.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def read_trace(path: Union[str, Path]) -> List[dict]:
    """Load a trace CSV into typed row dicts."""
    rows = []
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append({
                "step": int(rec["step"]),
                "time": float(rec["time"]),
                "id": int(rec["id"]),
                "role": rec["role"],
                "task": rec["task"],
                "lane": int(rec["lane"]),
                "x": float(rec["x"]),
                "y": float(rec["y"]),
                "v": float(rec["v"]),
                "vy": float(rec["vy"]),
                "decision": rec["decision"],
                "position_error": (float(rec["position_error"])
                                   if rec["position_error"] else None),
            })
    return rows


def trace_stats(rows: List[dict]) -> dict:
    """Summary statistics recomputed from a trace."""
    convoy = [r for r in rows if r["role"] == "convoy"]
    if not convoy:
        return {"convoy_vehicles": 0, "steps": 0}
    last_step = max(r["step"] for r in convoy)
    final = [r for r in convoy if r["step"] == last_step]
    speeds = [r["v"] for r in convoy]
    pes = [r["position_error"] for r in final if r["position_error"] is not None]
    return {
        "convoy_vehicles": len({r["id"] for r in convoy}),
        "steps": last_step + 1,
        "duration": max(r["time"] for r in convoy),
        "avg_speed": round(sum(speeds) / len(speeds), 4),
        "final_PE": round(max(pes), 4) if pes else 0.0,
        "min_speed": round(min(speeds), 4),
        "max_speed": round(max(speeds), 4),
    }


def _convoy_series(rows: List[dict], key: str) -> Dict[int, List[tuple]]:
    series: Dict[int, List[tuple]] = defaultdict(list)
    for r in rows:
        if r["role"] == "convoy" and r[key] is not None:
            series[r["id"]].append((r["time"], r[key]))
    return series


def render_run_figures(rows: List[dict], out_dir: Union[str, Path]) -> List[Path]:
    """Render speed and position-error figures for one run's trace."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, label, fname in (("v", "speed [m/s]", "speed.png"),
                              ("position_error", "position error [m]",
                               "position_error.png")):
        series = _convoy_series(rows, key)
        fig, ax = plt.subplots(figsize=(8, 4))
        for vid in sorted(series):
            times, values = zip(*series[vid])
            ax.plot(times, values, label=f"veh{vid}", linewidth=1.0)
        ax.set_xlabel("time [s]")
        ax.set_ylabel(label)
        ax.legend(ncol=4, fontsize=7)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def render_batch_figure(aggregate_path: Union[str, Path],
                        out_dir: Union[str, Path]) -> Path:
    """Histogram of per-run average convoy speeds from a batch aggregate."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with Path(aggregate_path).open("r", encoding="utf-8") as fh:
        aggregate = json.load(fh)
    speeds = [r["avg_speed"] for r in aggregate.get("runs", [])
              if r.get("avg_speed")]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(speeds, bins=12, edgecolor="black", alpha=0.8)
    ax.set_xlabel("average convoy speed per run [m/s]")
    ax.set_ylabel("runs")
    ax.set_title(f"{aggregate.get('scenario', '?')} "
                 f"(density {aggregate.get('density', '?')})")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = out_dir / "avg_speed_hist.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
