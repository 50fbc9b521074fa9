"""Sweep tables and their plots."""

from __future__ import annotations

import csv
import io
from typing import Sequence

SWEEP_COLUMNS = (
    "axis",
    "value",
    "num_segments",
    "t_comp",
    "t_comm",
    "t_uncover",
    "t_total",
    "sim_latency_mean",
    "sim_latency_steady",
    "peak_memory_fraction",
    "error",
)


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def sweep_svg(rows: Sequence[dict], axis: str) -> str:
    """Model latency and simulated latency against the swept value."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "offloadpipe"
    plt.rcParams["svg.fonttype"] = "none"
    ok = [r for r in rows if not r.get("error")]
    labels = [str(r["value"]) for r in ok]
    xs = range(len(ok))
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    if ok:
        ax.plot(xs, [r["t_total"] for r in ok], marker="o", label="cost model t_total")
        ax.plot(xs, [r["sim_latency_mean"] for r in ok], marker="s", linestyle="--",
                label="simulated mean per token")
        ax.bar(xs, [r["t_uncover"] for r in ok], alpha=0.3, label="uncovered load")
        ax.legend(fontsize="small")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_xlabel(axis)
    ax.set_ylabel("seconds per token")
    ax.set_title(f"{axis} sweep")
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()
