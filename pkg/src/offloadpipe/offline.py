"""Offline layer allocation: greedy fill, per-segment DP, block-level refinement."""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, replace
from typing import Sequence

from .cost_model import (
    AllocationPlan,
    Block,
    LatencyBreakdown,
    idle_time,
    layout_plan,
    load_deficits,
    reserved_bytes,
    total_latency,
    uncovered_from_deficits,
)
from .errors import EmptyDeviceList, InfeasibleModel, LimitsExceeded, NoFeasibleAssignment
from .profiles import CostProfile, DeviceSpec, ModelSpec, NetworkSpec

DEFAULT_KV_RESERVE = 0.1


@dataclass
class DpState:
    f_allo: list[list[float]]
    p_pre: list[list[int]]
    ops: int = 0


def greedy_capacity_fill(
    model: ModelSpec,
    devices: Sequence[DeviceSpec],
    kv_reserve_fraction: float = DEFAULT_KV_RESERVE,
) -> tuple[list[int], list[int], int]:
    """Hand out whole layers round-robin until no device has room left.

    Returns per-device layer counts, per-device residual bytes and the
    number of layers that did not fit anywhere.
    """
    if not devices:
        raise EmptyDeviceList("no devices")
    if not 0.0 <= kv_reserve_fraction < 1.0:
        raise ValueError("kv_reserve_fraction must lie in [0, 1)")
    D = len(devices)
    usable = [d.memory_bytes - reserved_bytes(model, i, D) for i, d in enumerate(devices)]
    capacity = [
        max(0, math.floor((d.memory_bytes * (1.0 - kv_reserve_fraction) - reserved_bytes(model, i, D)) / model.layer_bytes))
        for i, d in enumerate(devices)
    ]
    counts = [0] * D
    remaining = model.num_layers
    while remaining:
        progressed = False
        for i in range(D):
            if remaining and counts[i] < capacity[i]:
                counts[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    residual = [max(0, usable[i] - counts[i] * model.layer_bytes) for i in range(D)]
    return counts, residual, remaining


def dp_segment_allocate(
    leftover: int,
    idle: Sequence[float],
    load_per_layer: Sequence[float],
    composition: str = "max",
    state: DpState | None = None,
) -> tuple[list[int], float]:
    """Split ``leftover`` offloaded layers of one segment across devices.

    ``F[l][i]`` is the least extra delay once ``l`` layers went to devices
    ``0..i``.  With ``composition="max"`` a device's own uncovered load
    ``max(0, k * load_i - idle_i)`` combines with the prefix by ``max``
    (devices load in parallel); ``"additive"`` chains the prefix delay
    through ``max(0, F + k * load_i - idle_i)`` instead.
    Ties go to the smaller ``k``.
    """
    if leftover < 0:
        raise ValueError("leftover must be >= 0")
    D = len(idle)
    if D == 0:
        if leftover:
            raise NoFeasibleAssignment("leftover layers but no devices")
        return [], 0.0
    if composition not in ("max", "additive"):
        raise ValueError(f"unknown composition {composition!r}")
    inf = float("inf")
    F = [[inf] * D for _ in range(leftover + 1)]
    P = [[0] * D for _ in range(leftover + 1)]
    ops = 0
    for l in range(leftover + 1):
        F[l][0] = max(0.0, l * load_per_layer[0] - idle[0])
        P[l][0] = l
    for i in range(1, D):
        for l in range(leftover + 1):
            for k in range(l + 1):
                ops += 1
                own = k * load_per_layer[i]
                if composition == "max":
                    cur = max(F[l - k][i - 1], max(0.0, own - idle[i]))
                else:
                    cur = max(0.0, F[l - k][i - 1] + own - idle[i])
                if cur < F[l][i]:
                    F[l][i] = cur
                    P[l][i] = k
    counts = [0] * D
    l = leftover
    for i in range(D - 1, -1, -1):
        counts[i] = P[l][i]
        l -= counts[i]
    if state is not None:
        state.f_allo, state.p_pre, state.ops = F, P, ops
    return counts, F[leftover][D - 1]


def _device_keys(plan: AllocationPlan, profile: CostProfile, bw_net: float) -> list[tuple[float, int]]:
    """Per device: (worst load deficit over loading segments, that segment)."""
    deficits = load_deficits(plan, profile, bw_net)
    keys = []
    for i in range(plan.num_devices):
        best, seg = float("-inf"), 0
        for s in range(1, plan.num_segments):
            if deficits[s][i] > best:
                best, seg = deficits[s][i], s
        keys.append((best, seg))
    return keys


def _pin(plan: AllocationPlan, device: int, layer: int, block: Block) -> AllocationPlan:
    dev = plan.per_device[device]
    blocks = dict(dev.resident_block)
    blocks[layer] = block
    per_device = list(plan.per_device)
    per_device[device] = replace(dev, resident_block=blocks)
    return replace(plan, per_device=tuple(per_device))


def fine_grained_refine(
    plan: AllocationPlan,
    residual_memory: Sequence[int],
    profile: CostProfile,
    bw_net: float,
    swapped_updates: bool = False,
) -> tuple[AllocationPlan, list[int], int]:
    """Pin MLP or MHA blocks of offloaded layers on the bottleneck device.

    A max-heap keyed by each device's worst load deficit is popped until the
    top device has no deficit, no fully-offloaded layer in its worst
    segment, or too little residual memory for either block.  Returns the
    refined plan, the remaining residual memory and the iteration count.

    ``swapped_updates`` keys the heap with the alternative bookkeeping that
    credits the MHA share when MLP is pinned (and vice versa) instead of the
    streamed bytes actually saved.
    """
    model = profile.model
    residual = list(residual_memory)
    keys = _device_keys(plan, profile, bw_net)
    heap = [(-key, i, seg) for i, (key, seg) in enumerate(keys)]
    heapq.heapify(heap)
    full_load = profile.load
    steps = 0
    while heap:
        neg_key, i, seg = heapq.heappop(heap)
        key = -neg_key
        if key <= 0:
            break
        dev = plan.per_device[i]
        candidates = [l for l in dev.offloaded_per_segment[seg] if l not in dev.resident_block]
        if not candidates:
            break
        layer = candidates[0]
        if residual[i] >= model.mlp_bytes:
            block, cost = Block.MLP, model.mlp_bytes
            literal_credit = full_load(i, model.layer_bytes) * model.mha_fraction
        elif residual[i] >= model.mha_bytes:
            block, cost = Block.MHA, model.mha_bytes
            literal_credit = full_load(i, model.layer_bytes) * model.mlp_fraction
        else:
            break
        plan = _pin(plan, i, layer, block)
        residual[i] -= cost
        steps += 1
        if swapped_updates:
            heapq.heappush(heap, (-(key - literal_credit), i, seg))
        else:
            new_key, new_seg = _device_keys(plan, profile, bw_net)[i]
            heapq.heappush(heap, (-new_key, i, new_seg))
    return plan, residual, steps


def segment_counts(num_segments: int, greedy: Sequence[int], leftover: int) -> tuple[list[list[int]], list[int]]:
    """Even split of greedy layers and leftover layers over segments.

    Earlier segments take the remainder in both cases.
    """
    S = num_segments
    resident = [[g // S + (1 if s < g % S else 0) for g in greedy] for s in range(S)]
    per_seg_leftover = [leftover // S + (1 if s < leftover % S else 0) for s in range(S)]
    return resident, per_seg_leftover


def candidate_segment_counts(num_layers: int, greedy: Sequence[int], leftover: int) -> list[int]:
    D = len(greedy)
    upper = min(-(-num_layers // D), max(2, leftover))
    return [S for S in range(2, upper + 1) if min(greedy) >= S]


def _allocate_for_segments(
    S: int,
    greedy: Sequence[int],
    leftover: int,
    residual: Sequence[int],
    profile: CostProfile,
    bw_net: float,
    plan_kwargs: dict,
    composition: str,
    swapped_updates: bool,
    fine_grained: bool = True,
) -> AllocationPlan:
    D = len(greedy)
    resident, per_seg = segment_counts(S, greedy, leftover)
    offloaded = [[0] * D for _ in range(S)]
    load_per_layer = [profile.load(i, profile.model.layer_bytes) for i in range(D)]
    # Segment 0 first (its load hides in the previous token's last segment),
    # then in pipeline order so earlier choices feed later windows.
    for s in range(S):
        current = layout_plan(resident, offloaded, **plan_kwargs)
        prev = (s - 1) % S
        idle = [idle_time(current, profile, i, prev, bw_net) for i in range(D)]
        counts, _ = dp_segment_allocate(per_seg[s], idle, load_per_layer, composition)
        offloaded[s] = counts
    plan = layout_plan(resident, offloaded, **plan_kwargs)
    if fine_grained:
        plan, _, _ = fine_grained_refine(plan, residual, profile, bw_net, swapped_updates)
    return plan


def plan(
    model: ModelSpec,
    devices: Sequence[DeviceSpec],
    network: NetworkSpec,
    empirical_n: int = 512,
    micro_batch: int = 1,
    kv_reserve_fraction: float = DEFAULT_KV_RESERVE,
    composition: str = "max",
    swapped_updates: bool = False,
    fine_grained: bool = True,
) -> AllocationPlan:
    """Sweep segment counts and return the allocation with least latency.

    ``fine_grained=False`` skips block-level refinement, leaving every
    layer either fully resident or fully streamed (the ablation baseline).
    """
    if not devices:
        raise EmptyDeviceList("no devices")
    profile = CostProfile(model, tuple(devices))
    bw = network.base_bandwidth_bps
    greedy, residual, leftover = greedy_capacity_fill(model, devices, kv_reserve_fraction)
    candidates = candidate_segment_counts(model.num_layers, greedy, leftover)
    if not candidates:
        raise InfeasibleModel(
            f"cannot give every device a layer in each of >= 2 segments "
            f"(greedy counts {greedy}, leftover {leftover})"
        )
    kwargs = dict(
        empirical_n=empirical_n,
        micro_batch=micro_batch,
        leftover=leftover,
        greedy_counts=tuple(greedy),
    )
    best, best_t = None, float("inf")
    for S in candidates:
        cand = _allocate_for_segments(
            S, greedy, leftover, residual, profile, bw, kwargs, composition, swapped_updates,
            fine_grained,
        )
        t = total_latency(cand, profile, bw).t_total
        if t < best_t:
            best, best_t = cand, t
    return best


def plan_for_segments(
    model: ModelSpec,
    devices: Sequence[DeviceSpec],
    network: NetworkSpec,
    num_segments: int,
    empirical_n: int = 512,
    micro_batch: int = 1,
    kv_reserve_fraction: float = DEFAULT_KV_RESERVE,
) -> AllocationPlan:
    """The allocation :func:`plan` would build for one fixed segment count."""
    if not devices:
        raise EmptyDeviceList("no devices")
    profile = CostProfile(model, tuple(devices))
    greedy, residual, leftover = greedy_capacity_fill(model, devices, kv_reserve_fraction)
    if num_segments not in candidate_segment_counts(model.num_layers, greedy, leftover):
        raise InfeasibleModel(f"segment count {num_segments} is not admissible")
    kwargs = dict(
        empirical_n=empirical_n,
        micro_batch=micro_batch,
        leftover=leftover,
        greedy_counts=tuple(greedy),
    )
    return _allocate_for_segments(
        num_segments, greedy, leftover, residual, profile, network.base_bandwidth_bps,
        kwargs, "max", False,
    )


# --------------------------------------------------------------------------
# exhaustive oracle


@dataclass(frozen=True)
class OracleLimits:
    max_devices: int = 3
    max_leftover: int = 8
    max_segments: int = 4


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _pin_options(k_by_seg: Sequence[int], residual: int, model: ModelSpec, load_bps: float):
    """Pareto-minimal streamed-load vectors for one device.

    Every offloaded layer may keep its MHA block, its MLP block or nothing
    resident; layers inside one segment are interchangeable, so a choice is
    a per-segment count pair.  Segment 0 is staged and never benefits.
    """
    per_seg = []
    for s, k in enumerate(k_by_seg):
        opts = [(0, 0)]
        if s > 0:
            opts = [(a, b) for a in range(k + 1) for b in range(k + 1 - a)]
        per_seg.append(opts)
    found = {}
    for combo in itertools.product(*per_seg):
        mem = sum(a * model.mha_bytes + b * model.mlp_bytes for a, b in combo)
        if mem > residual:
            continue
        loads = tuple(
            (k * model.layer_bytes - a * model.mha_bytes - b * model.mlp_bytes) / load_bps
            for k, (a, b) in zip(k_by_seg, combo)
        )
        if loads not in found:
            found[loads] = combo
    vectors = list(found)
    pareto = [
        v for v in vectors
        if not any(w != v and all(x <= y for x, y in zip(w, v)) for w in vectors)
    ]
    pareto.sort()
    return [(v, found[v]) for v in pareto]


def brute_force_plan(
    model: ModelSpec,
    devices: Sequence[DeviceSpec],
    network: NetworkSpec,
    empirical_n: int = 512,
    limits: OracleLimits = OracleLimits(),
    micro_batch: int = 1,
    kv_reserve_fraction: float = DEFAULT_KV_RESERVE,
) -> AllocationPlan:
    """Exhaustive argmin of the latency objective under plan()'s constraints.

    Same greedy fill, segment range and even split as :func:`plan`; every
    per-segment leftover distribution and every block-residency choice is
    enumerated.
    """
    if not devices:
        raise EmptyDeviceList("no devices")
    D = len(devices)
    profile = CostProfile(model, tuple(devices))
    bw = network.base_bandwidth_bps
    greedy, residual, leftover = greedy_capacity_fill(model, devices, kv_reserve_fraction)
    candidates = candidate_segment_counts(model.num_layers, greedy, leftover)
    if D > limits.max_devices or leftover > limits.max_leftover or (
        candidates and max(candidates) > limits.max_segments
    ):
        raise LimitsExceeded(
            f"instance exceeds oracle limits: |D|={D}, leftover={leftover}, "
            f"max #Seg={max(candidates) if candidates else 0} "
            f"(limits {limits.max_devices}/{limits.max_leftover}/{limits.max_segments})"
        )
    if not candidates:
        raise InfeasibleModel(f"no feasible segment count (greedy {greedy}, leftover {leftover})")
    kwargs = dict(
        empirical_n=empirical_n,
        micro_batch=micro_batch,
        leftover=leftover,
        greedy_counts=tuple(greedy),
    )
    comp = [d.comp_per_layer_seconds * micro_batch for d in devices]
    hop = profile.comm(bw, micro_batch)
    scored = []
    for S in candidates:
        resident, per_seg = segment_counts(S, greedy, leftover)
        for dist in itertools.product(*(list(_compositions(m, D)) for m in per_seg)):
            n = [[resident[s][i] + dist[s][i] for i in range(D)] for s in range(S)]
            t_comp = sum(comp[i] * n[s][i] for s in range(S) for i in range(D))
            t_comm = S * D * hop
            window = [
                [
                    comp[i] * resident[s][i]
                    + sum(comp[j] * n[s][j] for j in range(i + 1, D))
                    + sum(comp[j] * n[(s + 1) % S][j] for j in range(i))
                    + D * hop
                    for i in range(D)
                ]
                for s in range(S)
            ]
            options = [
                _pin_options([dist[s][i] for s in range(S)], residual[i], model,
                             devices[i].storage_read_bps)
                for i in range(D)
            ]
            for choice in itertools.product(*options):
                deficits = [[0.0] * D] + [
                    [choice[i][0][s] - window[s - 1][i] for i in range(D)]
                    for s in range(1, S)
                ]
                t = t_comp + t_comm + uncovered_from_deficits(deficits)
                scored.append((t, S, dist, tuple(c[1] for c in choice)))
    scored.sort(key=lambda x: (x[0], x[1]))
    floor_t = scored[0][0]
    best, best_t = None, float("inf")
    # Re-score near-ties through the shared objective so float summation
    # order cannot decide the winner.
    for t, S, dist, pins in scored:
        if t > floor_t + 1e-9:
            break
        resident, _ = segment_counts(S, greedy, leftover)
        blocks = []
        for i in range(D):
            mapping = {}
            for s, (a, b) in enumerate(pins[i]):
                for k in range(a):
                    mapping[(s, k)] = Block.MHA
                for k in range(a, a + b):
                    mapping[(s, k)] = Block.MLP
            blocks.append(mapping)
        offl = [list(dist[s]) for s in range(S)]
        cand = layout_plan(resident, offl, blocks, **kwargs)
        exact = total_latency(cand, profile, bw).t_total
        if exact < best_t:
            best, best_t = cand, exact
    return best


def plan_breakdown(plan_: AllocationPlan, model: ModelSpec, devices, network: NetworkSpec) -> LatencyBreakdown:
    return total_latency(plan_, CostProfile(model, tuple(devices)), network.base_bandwidth_bps)
