"""Timeline export: structured JSON, CSV rows and an SVG Gantt chart."""

from __future__ import annotations

import csv
import io
import json

from ..errors import UnsupportedFormat
from .pipeline import Timeline

TIMELINE_VERSION = 1
CSV_COLUMNS = ("kind", "device", "segment", "micro_batch", "layer", "t_start", "t_end")
KIND_COLORS = {
    "ComputeBlock": "#4C72B0",
    "LoadShard": "#DD8452",
    "OffloadShard": "#937860",
    "ActivationSend": "#55A868",
    "KvSend": "#C44E52",
    "KvRestore": "#8172B3",
    "PlanTrigger": "#000000",
}


def timeline_to_dict(tl: Timeline) -> dict:
    return {
        "timeline_version": TIMELINE_VERSION,
        "num_segments": tl.num_segments,
        "micro_batches": tl.micro_batches,
        "num_layers": tl.num_layers,
        "decode_start": tl.decode_start,
        "token_latencies": list(tl.token_latencies),
        "peak_memory": list(tl.peak_memory),
        "capacities": list(tl.capacities),
        "memory_samples": [list(s) for s in tl.memory_samples],
        "triggers": tl.triggers,
        "actions": tl.actions,
        "transfers": tl.transfers,
        "streamed_layers": tl.streamed_layers,
        "baseline": tl.baseline,
        "events": [e.to_dict() for e in tl.events],
    }


def to_json(tl: Timeline) -> str:
    return json.dumps(timeline_to_dict(tl), sort_keys=True, indent=1) + "\n"


def to_csv(tl: Timeline) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for e in tl.events:
        w.writerow([e.kind, e.device, e.segment, e.micro_batch, e.layer, repr(e.t_start), repr(e.t_end)])
    return buf.getvalue()


def _lanes(tl: Timeline):
    """One lane group per device: compute, storage, outbound link."""
    lanes = []
    D = len(tl.capacities)
    for d in range(D):
        lanes += [(d, "compute"), (d, "storage"), (d, "link")]
    return lanes


def _lane_of(e):
    if e.kind in ("ComputeBlock", "PlanTrigger"):
        return e.device, "compute"
    if e.kind in ("LoadShard", "OffloadShard"):
        return e.device, "storage"
    return e.device, "link"


def to_svg(tl: Timeline, title: str = "timeline") -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "offloadpipe"
    plt.rcParams["svg.fonttype"] = "none"
    lanes = _lanes(tl)
    index = {lane: k for k, lane in enumerate(lanes)}
    fig, ax = plt.subplots(figsize=(12, 0.45 * len(lanes) + 1.2))
    for e in tl.events:
        y = index[_lane_of(e)]
        width = e.t_end - e.t_start
        if width <= 0:
            ax.plot([e.t_start, e.t_start], [y - 0.4, y + 0.4], color=KIND_COLORS[e.kind], linewidth=0.8)
            continue
        ax.broken_barh([(e.t_start, width)], (y - 0.4, 0.8), facecolors=KIND_COLORS[e.kind],
                       edgecolor="white", linewidth=0.3)
    ax.set_yticks(range(len(lanes)))
    ax.set_yticklabels([f"dev{d} {kind}" for d, kind in lanes])
    ax.invert_yaxis()
    ax.set_xlabel("time (s)")
    ax.set_title(title)
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in KIND_COLORS.values()]
    ax.legend(handles, list(KIND_COLORS), loc="upper center", bbox_to_anchor=(0.5, -0.25),
              ncol=4, fontsize="small", frameon=False)
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def export_timeline(tl: Timeline, fmt: str) -> str:
    if fmt in ("json", "text", "structured-text"):
        return to_json(tl)
    if fmt == "csv":
        return to_csv(tl)
    if fmt in ("svg", "svg-gantt"):
        return to_svg(tl)
    raise UnsupportedFormat(f"unknown timeline format {fmt!r}")
