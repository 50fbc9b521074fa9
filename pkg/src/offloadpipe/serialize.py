"""Versioned documents: allocation plans and run metrics.

Every document carries an integer schema version.  Readers accept any
version whose major part they know and reject the rest.
"""

from __future__ import annotations

import json
from typing import Any, Mapping, Sequence

from .cost_model import AllocationPlan, Block, DeviceAssignment, LatencyBreakdown
from .errors import MalformedConfig, SchemaVersionError
from .online import OffloadThreshold, TransferAssignment

PLAN_VERSION = 1
METRICS_VERSION = 1


def _major(value: Any, field_name: str) -> int:
    if value is None:
        raise SchemaVersionError(f"document has no {field_name!r} field")
    try:
        return int(str(value).split(".")[0])
    except ValueError as exc:
        raise SchemaVersionError(f"{field_name}: unreadable version {value!r}") from exc


def check_version(doc: Mapping, field_name: str, supported: int) -> None:
    major = _major(doc.get(field_name), field_name)
    if major != supported:
        raise SchemaVersionError(f"{field_name} {doc.get(field_name)!r} is not supported (expected {supported})")


def dumps(doc: Mapping) -> str:
    """Canonical text form: sorted keys, fixed indent, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads(text: str, where: str = "document") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedConfig(f"{where}: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedConfig(f"{where}: expected a mapping at top level")
    return doc


# --------------------------------------------------------------------------
# plan


def plan_to_dict(
    plan: AllocationPlan,
    breakdown: LatencyBreakdown | None = None,
    thresholds: Sequence[OffloadThreshold] = (),
    transfers: Sequence[TransferAssignment] = (),
) -> dict:
    devices = []
    for dev in plan.per_device:
        devices.append({
            "layers_per_segment": [list(seg) for seg in dev.layers_per_segment],
            "offloaded_per_segment": [list(seg) for seg in dev.offloaded_per_segment],
            "resident_block": {str(l): b.value for l, b in sorted(dev.resident_block.items())},
            "kv_transfer_tokens": dev.kv_transfer_tokens,
        })
    doc = {
        "plan_version": PLAN_VERSION,
        "num_segments": plan.num_segments,
        "empirical_n": plan.empirical_n,
        "micro_batch": plan.micro_batch,
        "leftover": plan.leftover,
        "greedy_counts": list(plan.greedy_counts),
        "devices": devices,
        "online": {
            "thresholds": [t.to_dict() for t in thresholds],
            "transfers": [a.to_dict() for a in transfers],
        },
    }
    if breakdown is not None:
        doc["breakdown"] = breakdown.to_dict()
    return doc


def plan_from_dict(doc: Mapping) -> AllocationPlan:
    check_version(doc, "plan_version", PLAN_VERSION)
    try:
        per_device = []
        for entry in doc["devices"]:
            pins = {int(l): Block(b) for l, b in entry.get("resident_block", {}).items()}
            per_device.append(DeviceAssignment(
                layers_per_segment=tuple(tuple(int(x) for x in seg) for seg in entry["layers_per_segment"]),
                offloaded_per_segment=tuple(tuple(int(x) for x in seg) for seg in entry["offloaded_per_segment"]),
                resident_block=pins,
                kv_transfer_tokens=int(entry.get("kv_transfer_tokens", 0)),
            ))
        return AllocationPlan(
            num_segments=int(doc["num_segments"]),
            per_device=tuple(per_device),
            empirical_n=int(doc.get("empirical_n", 512)),
            micro_batch=int(doc.get("micro_batch", 1)),
            leftover=int(doc.get("leftover", 0)),
            greedy_counts=tuple(int(x) for x in doc.get("greedy_counts", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedConfig(f"plan document: {exc!r}") from exc


def online_from_dict(doc: Mapping):
    """The (thresholds, transfers) pair stored under ``online``."""
    check_version(doc, "plan_version", PLAN_VERSION)
    section = doc.get("online") or {}
    thresholds = [OffloadThreshold(**t) for t in section.get("thresholds", [])]
    transfers = [TransferAssignment(**a) for a in section.get("transfers", [])]
    return thresholds, transfers


# --------------------------------------------------------------------------
# metrics


def metrics_from_timeline(tl, pattern: str, config: Mapping | None = None) -> dict:
    lat = tl.token_latencies
    sent = {}
    for e in tl.events:
        if e.kind == "KvSend" and e.amount > 0:
            sent[e.device] = sent.get(e.device, 0) + e.amount
    doc = {
        "metrics_version": METRICS_VERSION,
        "pattern": pattern,
        "micro_batches": tl.micro_batches,
        "num_segments": tl.num_segments,
        "tokens": len(lat),
        "per_token_latency_mean": sum(lat) / len(lat),
        "per_token_latency_max": max(lat),
        "per_token_latency_steady": lat[-1],
        "peak_memory_bytes": list(tl.peak_memory),
        "capacity_bytes": list(tl.capacities),
        "trigger_tokens": [
            {"device": t["device"], "token": t["token"], "alpha": t["alpha"], "beta": t["beta"]}
            for t in tl.triggers
        ],
        "bandwidth_actions": [
            {"device": a["device"], "token": a["token"], "action": a["action"],
             "n_trans_before": a["n_trans_before"], "n_trans_after": a["n_trans_after"]}
            for a in tl.actions
        ],
        "transfers": list(tl.transfers),
        "kv_tokens_sent": {str(k): v for k, v in sorted(sent.items())},
        "baseline": tl.baseline,
    }
    if config is not None:
        doc["config"] = dict(config)
    return doc


def check_metrics(doc: Mapping) -> None:
    check_version(doc, "metrics_version", METRICS_VERSION)
