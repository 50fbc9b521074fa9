"""Runtime memory adaptation: offload thresholds and KV cache transfer."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .errors import LedgerUnderflow, NoRemainingBlocks, ZeroKvRate
from .profiles import ModelSpec

DEFAULT_FLUCTUATION_THRESHOLD = 4


# --------------------------------------------------------------------------
# offload thresholds


@dataclass(frozen=True)
class OffloadThreshold:
    device: int
    ordinal: int
    trigger_tokens: int
    alpha: int
    beta: int

    def to_dict(self) -> dict:
        return {
            "device": self.device,
            "ordinal": self.ordinal,
            "trigger_tokens": self.trigger_tokens,
            "alpha": self.alpha,
            "beta": self.beta,
        }


@dataclass(frozen=True)
class DeviceOnlineState:
    """What the planner needs to know about one device at a trigger.

    ``alpha``/``beta`` are the MHA/MLP blocks currently offloaded per
    segment; ``max_alpha``/``max_beta`` bound them (fewest fully resident
    layers over the device's segments).
    """

    device: int
    ordinal: int
    trigger_tokens: int
    kv_rate: int
    need_bytes: int
    max_alpha: int
    max_beta: int
    alpha: int = 0
    beta: int = 0


def first_threshold(residual_memory: float, kv_rate: float) -> int:
    if kv_rate <= 0:
        raise ZeroKvRate("per-token KV footprint must be > 0")
    return max(0, math.floor(residual_memory / kv_rate))


def freed_bytes(alpha: int, beta: int, model: ModelSpec, num_segments: int) -> int:
    """In-budget memory released by offloading alpha MHA + beta MLP blocks per segment.

    One copy of each block stays as the streaming slot, hence ``#Seg - 1``.
    """
    return (alpha * model.mha_bytes + beta * model.mlp_bytes) * (num_segments - 1)


def offload_grid(state: DeviceOnlineState, model: ModelSpec, num_segments: int,
                 full_layer: bool = False):
    """All (alpha, beta, freed, cost) candidates in the admissible ranges.

    ``full_layer`` keeps only alpha == beta, i.e. whole layers.
    """
    for a in range(state.max_alpha + 1):
        for b in range(state.max_beta + 1):
            if full_layer and a != b:
                continue
            cost = a * model.mha_bytes + b * model.mlp_bytes
            yield a, b, freed_bytes(a, b, model, num_segments), cost


def next_offload_plan(state: DeviceOnlineState, model: ModelSpec, num_segments: int,
                      full_layer: bool = False) -> OffloadThreshold:
    """Cheapest absolute (alpha, beta) target that frees ``need_bytes`` more.

    Ties prefer fewer blocks, then fewer MLP blocks.  When no target frees
    enough, the one freeing the most is taken; when that frees nothing new
    the device is out of blocks.
    """
    if state.kv_rate <= 0:
        raise ZeroKvRate("per-token KV footprint must be > 0")
    current = freed_bytes(state.alpha, state.beta, model, num_segments)
    if state.need_bytes <= 0:
        return OffloadThreshold(state.device, state.ordinal + 1, state.trigger_tokens,
                                state.alpha, state.beta)
    target = current + state.need_bytes
    best = None
    most = None
    for a, b, freed, cost in offload_grid(state, model, num_segments, full_layer):
        key = (cost, a + b, b)
        if freed >= target and (best is None or key < best[0]):
            best = (key, a, b, freed)
        mkey = (-freed, cost, a + b, b)
        if most is None or mkey < most[0]:
            most = (mkey, a, b, freed)
    if best is None:
        if most[3] <= current:
            raise NoRemainingBlocks(f"device {state.device}: every block already offloaded")
        best = most
    _, a, b, freed = best
    gained = max(0, freed - current)
    nxt = state.trigger_tokens + gained // state.kv_rate
    return OffloadThreshold(state.device, state.ordinal + 1, nxt, a, b)


def offload_order(resident_layers: Sequence[int], alpha: int, beta: int) -> list[tuple[int, str]]:
    """Blocks to stream for one segment: last layer first, MHA before MLP."""
    ordered = sorted(resident_layers, reverse=True)
    out = []
    for idx, layer in enumerate(ordered):
        if idx < alpha:
            out.append((layer, "mha"))
        if idx < beta:
            out.append((layer, "mlp"))
    return out


# --------------------------------------------------------------------------
# KV transfer


@dataclass(frozen=True)
class TransferAssignment:
    source: int
    target: int
    tokens_per_segment: int
    fluctuation_threshold: int = DEFAULT_FLUCTUATION_THRESHOLD

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("source and target must differ")
        if self.tokens_per_segment < 0:
            raise ValueError("tokens_per_segment must be >= 0")

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "target": self.target,
            "tokens_per_segment": self.tokens_per_segment,
            "fluctuation_threshold": self.fluctuation_threshold,
        }


def transfer_tokens(uncovered_stall: float, bw_net: float, kv_rate: float) -> int:
    if kv_rate <= 0:
        raise ZeroKvRate("per-token KV footprint must be > 0")
    if bw_net <= 0:
        raise ValueError("bw_net must be > 0")
    volume = max(0.0, uncovered_stall) * bw_net
    # guard against 0.38e6 / 5e4 landing a hair under an integer
    return max(0, math.floor(volume / kv_rate + 1e-9))


def assign_transfer_targets(
    thresholds: Sequence[int],
    transfer: Sequence[int],
    headroom: Sequence[float] | None = None,
    kv_rates: Sequence[float] | None = None,
    n_ts: int = DEFAULT_FLUCTUATION_THRESHOLD,
) -> list[TransferAssignment]:
    """Pair low-threshold senders with high-threshold receivers.

    Devices are ranked by first threshold; the lower half sends, the upper
    half receives, lowest sender matched with highest receiver.  A pair is
    kept only when the sender has something to send and the receiver's
    headroom exceeds the bytes it would host.
    """
    D = len(thresholds)
    if D < 2 or len(set(thresholds)) == 1:
        return []
    order = sorted(range(D), key=lambda i: (thresholds[i], i))
    half = D // 2
    low = order[:half]
    high = sorted(order[D - half:], key=lambda i: (-thresholds[i], i))
    out = []
    for src, dst in zip(low, high):
        if thresholds[src] >= thresholds[dst] or transfer[src] <= 0:
            continue
        if headroom is not None and kv_rates is not None:
            if not headroom[dst] > transfer[src] * kv_rates[src]:
                continue
        out.append(TransferAssignment(src, dst, transfer[src], n_ts))
    return out


class BandwidthAction(str, Enum):
    KEEP = "keep"
    RECOMPUTE = "recompute"
    DEFER = "defer"


@dataclass(frozen=True)
class BandwidthDecision:
    action: BandwidthAction
    tokens: int  # n_trans in force after the decision


def on_bandwidth_change(
    current_bw: float,
    observed_bw: float,
    n_trans: int,
    uncovered_stall: float,
    kv_rate: float,
    generated_tokens: int,
    next_threshold: int,
    n_ts: int = DEFAULT_FLUCTUATION_THRESHOLD,
) -> BandwidthDecision:
    """React to a bandwidth change seen before an auto-regressive step."""
    if observed_bw <= 0:
        raise ValueError("observed bandwidth must be > 0")
    fresh = transfer_tokens(uncovered_stall, observed_bw, kv_rate)
    if abs(fresh - n_trans) < n_ts:
        return BandwidthDecision(BandwidthAction.KEEP, n_trans)
    if observed_bw < current_bw:
        return BandwidthDecision(BandwidthAction.RECOMPUTE, fresh)
    if generated_tokens + n_trans >= next_threshold - 1:
        return BandwidthDecision(BandwidthAction.RECOMPUTE, fresh)
    return BandwidthDecision(BandwidthAction.DEFER, n_trans)


# --------------------------------------------------------------------------
# cache ledger


@dataclass
class SegmentCache:
    resident: int = 0
    transferred_out: int = 0
    ready_at: float = 0.0

    @property
    def generated(self) -> int:
        return self.resident + self.transferred_out


@dataclass
class CacheLedger:
    entries: dict = field(default_factory=dict)  # (device, segment) -> SegmentCache
    hosted: dict = field(default_factory=dict)  # target -> tokens held for others

    def cell(self, device: int, segment: int) -> SegmentCache:
        return self.entries.setdefault((device, segment), SegmentCache())

    def append_tokens(self, device: int, segments: int, count: int = 1) -> None:
        for s in range(segments):
            self.cell(device, s).resident += count

    def send(self, source: int, segment: int, target: int, tokens: int) -> None:
        cell = self.cell(source, segment)
        if tokens > cell.resident:
            raise LedgerUnderflow(
                f"device {source} segment {segment}: {tokens} tokens requested, "
                f"{cell.resident} resident"
            )
        cell.resident -= tokens
        cell.transferred_out += tokens
        self.hosted[target] = self.hosted.get(target, 0) + tokens

    def restore(self, source: int, segment: int, target: int) -> int:
        cell = self.cell(source, segment)
        tokens = cell.transferred_out
        cell.resident += tokens
        cell.transferred_out = 0
        self.hosted[target] = self.hosted.get(target, 0) - tokens
        return tokens

    def total_out(self) -> int:
        return sum(c.transferred_out for c in self.entries.values())

    def total_hosted(self) -> int:
        return sum(self.hosted.values())


@dataclass(frozen=True)
class ProtocolEvent:
    kind: str  # "KvRestore" | "KvSend"
    source: int
    target: int
    segment: int
    tokens: int
    t_start: float
    t_end: float


def protocol_step(
    ledger: CacheLedger,
    segment: int,
    assignment: TransferAssignment,
    now: float = 0.0,
    compute_seconds: float = 0.0,
    transfer_seconds: float = 0.0,
) -> tuple[CacheLedger, list[ProtocolEvent]]:
    """One segment of the transfer protocol on the source device.

    Waits for any inbound restore, folds the restored tokens back, runs the
    forward pass, then ships the trailing ``n_trans`` tokens out and books
    their return ahead of the segment's next use.
    """
    n = assignment.tokens_per_segment
    src, dst = assignment.source, assignment.target
    if n == 0:
        return ledger, []
    out = copy.deepcopy(ledger)
    cell = out.cell(src, segment)
    events = []
    start = max(now, cell.ready_at)
    back = out.restore(src, segment, dst)
    if back:
        events.append(ProtocolEvent("KvRestore", dst, src, segment, back,
                                    cell.ready_at - transfer_seconds, cell.ready_at))
    done = start + compute_seconds
    out.send(src, segment, dst, n)
    send_end = done + transfer_seconds
    events.append(ProtocolEvent("KvSend", src, dst, segment, n, done, send_end))
    cell.ready_at = send_end + transfer_seconds
    return out, events
