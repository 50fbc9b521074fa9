"""Schedule checks that make "lossless and physically possible" concrete."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from ..cost_model import AllocationPlan
from ..errors import ValidationFailure
from .pipeline import Timeline

EPS = 1e-12
CLAUSES = ("a", "b", "c", "d", "e")


@dataclass
class ValidationReport:
    passed: dict = field(default_factory=dict)
    checked_events: int = 0

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


def _layer_of(label: str):
    # "L12.mha" -> (12, "mha")
    head, _, block = label.partition(".")
    return int(head[1:]), block


def _check_coverage(tl: Timeline, plan: AllocationPlan | None):
    owner = {}
    if plan is not None:
        for i, dev in enumerate(plan.per_device):
            for l in dev.layers:
                owner[l] = i
    runs = defaultdict(list)
    for e in tl.events:
        if e.kind == "ComputeBlock" and e.token > 0:
            runs[(e.token, e.micro_batch)].append(e)
    tokens = len(tl.token_latencies)
    expected = [(l, b) for l in range(tl.num_layers) for b in ("mha", "mlp")]
    for t in range(1, tokens + 1):
        for mb in range(tl.micro_batches):
            seq = sorted(runs.get((t, mb), []), key=lambda e: (e.t_start, e.eid))
            got = [_layer_of(e.layer) for e in seq]
            if got != expected:
                raise ValidationFailure("a", f"token {t} micro-batch {mb}: layers computed out of order or not exactly once")
            for prev, cur in zip(seq, seq[1:]):
                if cur.t_start < prev.t_end - EPS:
                    raise ValidationFailure("a", f"token {t} micro-batch {mb}: {cur.layer} starts before {prev.layer} ends")
            for e in seq:
                layer, _ = _layer_of(e.layer)
                if owner and owner[layer] != e.device:
                    raise ValidationFailure("a", f"layer {layer} computed on device {e.device}, planned on {owner[layer]}")


def _resource(e):
    if e.kind == "ComputeBlock":
        return ("compute", e.device)
    if e.kind in ("LoadShard", "OffloadShard"):
        return ("storage", e.device)
    if e.kind in ("ActivationSend", "KvSend", "KvRestore"):
        return ("link", e.device, e.peer)
    return None


def _check_exclusive(tl: Timeline):
    lanes = defaultdict(list)
    for e in tl.events:
        if e.t_end < e.t_start:
            raise ValidationFailure("b", f"event {e.eid} ends before it starts")
        key = _resource(e)
        if key is not None and e.t_end > e.t_start:
            lanes[key].append(e)
    for key, evs in lanes.items():
        evs.sort(key=lambda e: (e.t_start, e.t_end))
        for prev, cur in zip(evs, evs[1:]):
            if cur.t_start < prev.t_end - EPS:
                raise ValidationFailure("b", f"{key}: {prev.kind} {prev.layer} overlaps {cur.kind} {cur.layer}")


def _check_memory(tl: Timeline):
    for t, dev, nbytes in tl.memory_samples:
        cap = tl.capacities[dev]
        if nbytes > cap:
            raise ValidationFailure("c", f"device {dev} holds {nbytes} B > {cap} B at t={t:.9f}")


def _check_loads(tl: Timeline):
    by_id = {e.eid: e for e in tl.events}
    static = [set(x) for x in tl.streamed_layers]
    for e in tl.events:
        if e.kind != "ComputeBlock" or e.token == 0:
            continue
        layer, _ = _layer_of(e.layer)
        if e.gate >= 0:
            load = by_id.get(e.gate)
            if load is None or load.kind != "LoadShard" or load.device != e.device:
                raise ValidationFailure("d", f"compute {e.layer} names a missing load")
            if load.t_end > e.t_start + EPS:
                raise ValidationFailure("d", f"compute {e.layer} starts before its load completes")
        elif static and layer in static[e.device]:
            raise ValidationFailure("d", f"streamed layer {layer} computed without a load")


def _check_kv(tl: Timeline):
    out = defaultdict(int)
    moves = []
    for e in tl.events:
        if e.amount <= 0:
            continue
        if e.kind == "KvSend":
            moves.append((e.t_end, 0, e.device, e.segment, e.amount))
        elif e.kind == "KvRestore":
            moves.append((e.t_end, 1, e.peer, e.segment, -e.amount))
    moves.sort()
    for t, _, src, seg, delta in moves:
        out[(src, seg)] += delta
        if out[(src, seg)] < 0:
            raise ValidationFailure("e", f"device {src} segment {seg}: more KV restored than sent at t={t:.9f}")
    sent = sum(m[4] for m in moves if m[4] > 0)
    back = -sum(m[4] for m in moves if m[4] < 0)
    if back > sent:
        raise ValidationFailure("e", "global KV restores exceed sends")


def validate_timeline(timeline: Timeline, plan: AllocationPlan | None = None, specs=None) -> ValidationReport:
    """Check clauses (a) coverage, (b) exclusivity, (c) memory, (d) loads, (e) KV.

    Raises :class:`ValidationFailure` naming the first violated clause.
    """
    report = ValidationReport(checked_events=len(timeline.events))
    checks = {
        "a": lambda: _check_coverage(timeline, plan),
        "b": lambda: _check_exclusive(timeline),
        "c": lambda: _check_memory(timeline),
        "d": lambda: _check_loads(timeline),
        "e": lambda: _check_kv(timeline),
    }
    for clause in CLAUSES:
        checks[clause]()
        report.passed[clause] = True
    return report
