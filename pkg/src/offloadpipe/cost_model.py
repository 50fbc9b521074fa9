"""Latency objective and memory checks for interleaved-pipeline allocations.

Layout convention
-----------------
Layers are numbered segment-major and, inside a segment, in device order.
Inside one device's span the offloaded (shared-slot) layers come first and
the resident layers follow, so the next segment's load can start as soon as
the offloaded layers have been computed while the resident ones still run.

Timing convention
-----------------
One decode step is evaluated with segment 0's shared-slot blocks already
staged.  The load of device ``i``'s segment ``s`` blocks starts when the
device finishes its offloaded layers of segment ``s - 1`` and has to be done
before it reaches the offloaded layers of segment ``s``.  The slack between
those two points is :func:`idle_time`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from .errors import InfeasiblePlan
from .profiles import CostProfile, DeviceSpec, ModelSpec


class Block(str, Enum):
    MHA = "mha"
    MLP = "mlp"


@dataclass(frozen=True)
class DeviceAssignment:
    layers_per_segment: tuple[tuple[int, ...], ...]
    offloaded_per_segment: tuple[tuple[int, ...], ...]
    # layer -> block kept resident while the rest of the layer streams
    resident_block: Mapping[int, Block] = field(default_factory=dict)
    kv_transfer_tokens: int = 0

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(l for seg in self.layers_per_segment for l in seg)

    @property
    def offloaded(self) -> tuple[int, ...]:
        return tuple(l for seg in self.offloaded_per_segment for l in seg)

    def resident_layers(self, segment: int) -> tuple[int, ...]:
        off = set(self.offloaded_per_segment[segment])
        return tuple(l for l in self.layers_per_segment[segment] if l not in off)

    def streamed_bytes(self, layer: int, model: ModelSpec) -> int:
        """Bytes of an offloaded layer that travel from storage each pass."""
        block = self.resident_block.get(layer)
        if block is Block.MHA:
            return model.mlp_bytes
        if block is Block.MLP:
            return model.mha_bytes
        return model.layer_bytes

    def offloaded_bytes(self, segment: int, model: ModelSpec) -> int:
        return sum(self.streamed_bytes(l, model) for l in self.offloaded_per_segment[segment])

    def pinned_bytes(self, model: ModelSpec) -> int:
        return sum(
            model.mha_bytes if b is Block.MHA else model.mlp_bytes
            for b in self.resident_block.values()
        )

    def resident_layer_count(self) -> int:
        return len(self.layers) - len(self.offloaded)


@dataclass(frozen=True)
class AllocationPlan:
    num_segments: int
    per_device: tuple[DeviceAssignment, ...]
    empirical_n: int = 512
    micro_batch: int = 1
    leftover: int = 0
    greedy_counts: tuple[int, ...] = ()

    @property
    def num_devices(self) -> int:
        return len(self.per_device)

    def check_invariants(self, num_layers: int) -> None:
        """Raise InfeasiblePlan on any structural violation."""
        S = self.num_segments
        D = self.num_devices
        if S < 2:
            raise InfeasiblePlan(f"num_segments must be >= 2, got {S}")
        bound = -(-num_layers // D)
        if S > bound:
            raise InfeasiblePlan(f"num_segments {S} exceeds ceil(|L|/|D|) = {bound}")
        expected = 0
        for s in range(S):
            for i, dev in enumerate(self.per_device):
                if len(dev.layers_per_segment) != S or len(dev.offloaded_per_segment) != S:
                    raise InfeasiblePlan(f"device {i}: expected {S} segments")
                seg = dev.layers_per_segment[s]
                if not seg:
                    raise InfeasiblePlan(f"device {i} has no layer in segment {s}")
                for layer in seg:
                    if layer != expected:
                        raise InfeasiblePlan(
                            f"layer order broken at device {i} segment {s}: "
                            f"got {layer}, expected {expected}"
                        )
                    expected += 1
                if not set(dev.offloaded_per_segment[s]) <= set(seg):
                    raise InfeasiblePlan(f"device {i} segment {s}: offloaded layers not assigned")
        if expected != num_layers:
            raise InfeasiblePlan(f"plan covers {expected} layers, model has {num_layers}")
        for i, dev in enumerate(self.per_device):
            if not set(dev.resident_block) <= set(dev.offloaded):
                raise InfeasiblePlan(f"device {i}: pinned block on a non-offloaded layer")


@dataclass(frozen=True)
class LatencyBreakdown:
    t_comp: float
    t_comm: float
    t_uncover: float

    @property
    def t_total(self) -> float:
        return self.t_comp + self.t_comm + self.t_uncover

    def to_dict(self) -> dict:
        return {
            "t_comp": self.t_comp,
            "t_comm": self.t_comm,
            "t_uncover": self.t_uncover,
            "t_total": self.t_total,
        }


def layout_plan(
    resident_counts: Sequence[Sequence[int]],
    offloaded_counts: Sequence[Sequence[int]],
    resident_blocks: Sequence[Mapping[tuple[int, int], Block]] | None = None,
    **plan_kwargs,
) -> AllocationPlan:
    """Number layers for per-(segment, device) resident/offloaded counts.

    ``resident_counts[s][i]`` and ``offloaded_counts[s][i]`` give the layer
    counts of device ``i`` in segment ``s``.  ``resident_blocks[i]`` maps
    ``(segment, k)`` (the k-th offloaded layer of that segment) to a pinned
    block.
    """
    S = len(resident_counts)
    D = len(resident_counts[0])
    layers = [[[] for _ in range(S)] for _ in range(D)]
    offl = [[[] for _ in range(S)] for _ in range(D)]
    pinned: list[dict[int, Block]] = [{} for _ in range(D)]
    nxt = 0
    for s in range(S):
        for i in range(D):
            for k in range(offloaded_counts[s][i]):
                layers[i][s].append(nxt)
                offl[i][s].append(nxt)
                if resident_blocks is not None and (s, k) in resident_blocks[i]:
                    pinned[i][nxt] = resident_blocks[i][(s, k)]
                nxt += 1
            for _ in range(resident_counts[s][i]):
                layers[i][s].append(nxt)
                nxt += 1
    per_device = tuple(
        DeviceAssignment(
            layers_per_segment=tuple(tuple(x) for x in layers[i]),
            offloaded_per_segment=tuple(tuple(x) for x in offl[i]),
            resident_block=pinned[i],
        )
        for i in range(D)
    )
    return AllocationPlan(num_segments=S, per_device=per_device, **plan_kwargs)


# --------------------------------------------------------------------------
# timing


def segment_compute(plan: AllocationPlan, profile: CostProfile, device: int, segment: int) -> float:
    n = len(plan.per_device[device].layers_per_segment[segment])
    return profile.comp(device, n, plan.micro_batch)


def resident_compute(plan: AllocationPlan, profile: CostProfile, device: int, segment: int) -> float:
    n = len(plan.per_device[device].resident_layers(segment))
    return profile.comp(device, n, plan.micro_batch)


def load_time(plan: AllocationPlan, profile: CostProfile, device: int, segment: int) -> float:
    return profile.load(device, plan.per_device[device].offloaded_bytes(segment, profile.model))


def idle_time(
    plan: AllocationPlan,
    profile: CostProfile,
    device: int,
    segment: int,
    bw_net: float,
) -> float:
    """Overlap window opened by ``device`` in ``segment`` for the next load.

    Own resident compute, the compute of every other device between this
    device's slot in ``segment`` and its slot in the following segment, and
    one full ring of activation hops.
    """
    D, S = plan.num_devices, plan.num_segments
    if not (0 <= device < D and 0 <= segment < S):
        raise IndexError(f"device {device} / segment {segment} out of range")
    nxt = (segment + 1) % S
    window = resident_compute(plan, profile, device, segment)
    window += sum(segment_compute(plan, profile, j, segment) for j in range(device + 1, D))
    window += sum(segment_compute(plan, profile, j, nxt) for j in range(device))
    return window + D * profile.comm(bw_net, plan.micro_batch)


def load_deficits(plan: AllocationPlan, profile: CostProfile, bw_net: float) -> list[list[float]]:
    """``deficit[s][i]`` = load of segment ``s`` blocks minus the window hiding it.

    Row 0 is zero: segment 0's blocks are staged before the step starts.
    """
    D, S = plan.num_devices, plan.num_segments
    out = [[0.0] * D]
    for s in range(1, S):
        out.append([
            load_time(plan, profile, i, s) - idle_time(plan, profile, i, s - 1, bw_net)
            for i in range(D)
        ])
    return out


def uncovered_from_deficits(deficits: Sequence[Sequence[float]]) -> float:
    """Worst accumulated stall over chains of loads that can delay in series.

    A stall of device ``i`` in segment ``s`` lies inside the windows of
    devices ``j < i`` for segment ``s + 1``, which therefore absorb it; only
    devices ``j >= i`` (or any device two segments later) stack on top.
    With a single loading boundary this is the max over devices.
    """
    S = len(deficits)
    if S < 2:
        return 0.0
    D = len(deficits[0])
    best = [[float("-inf")] * D for _ in range(S)]
    settled = 0.0  # best chain ending two or more segments back
    result = 0.0
    for s in range(1, S):
        prefix = 0.0
        for i in range(D):
            if s >= 2:
                prefix = max(prefix, best[s - 1][i])
            best[s][i] = deficits[s][i] + max(0.0, prefix, settled)
            result = max(result, best[s][i])
        if s >= 2:
            settled = max(settled, max(best[s - 1]))
    return result


def total_latency(plan: AllocationPlan, profile: CostProfile, bw_net: float) -> LatencyBreakdown:
    feasible = memory_feasible(plan, profile.model, profile.devices, 0)
    if not all(feasible):
        bad = [i for i, ok in enumerate(feasible) if not ok]
        raise InfeasiblePlan(f"memory constraint violated on device(s) {bad}")
    D, S = plan.num_devices, plan.num_segments
    t_comp = sum(segment_compute(plan, profile, i, s) for i in range(D) for s in range(S))
    t_comm = S * D * profile.comm(bw_net, plan.micro_batch)
    t_uncover = uncovered_from_deficits(load_deficits(plan, profile, bw_net))
    return LatencyBreakdown(t_comp, t_comm, t_uncover)


# --------------------------------------------------------------------------
# memory


def reserved_bytes(model: ModelSpec, device: int, num_devices: int) -> int:
    """Embedding sits on the first device, LM head on the last."""
    out = 0
    if device == 0:
        out += model.embedding_bytes
    if device == num_devices - 1:
        out += model.lm_head_bytes
    return out


def resident_parameter_bytes(plan: AllocationPlan, model: ModelSpec, device: int) -> int:
    dev = plan.per_device[device]
    return (
        dev.resident_layer_count() * model.layer_bytes
        + dev.pinned_bytes(model)
        + reserved_bytes(model, device, plan.num_devices)
    )


def kv_bytes(model: ModelSpec, num_layers: int, tokens: int, micro_batches: int = 1) -> int:
    per_layer = 2 * model.num_kv_heads * model.head_dim * model.dtype_bytes
    return per_layer * num_layers * max(0, tokens) * micro_batches


def memory_feasible(
    plan: AllocationPlan,
    model: ModelSpec,
    device_specs: Sequence[DeviceSpec],
    tokens: int,
) -> list[bool]:
    """Per-device check of the steady-state parameter + KV constraint.

    Non-offloaded layer equivalents are scaled by ``(#Seg - 1) / #Seg``; a
    layer with a pinned block counts the pinned fraction as non-offloaded.
    """
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    S = plan.num_segments
    out = []
    for i, dev in enumerate(plan.per_device):
        offloaded_equiv = sum(dev.streamed_bytes(l, model) for l in dev.offloaded) / model.layer_bytes
        kept_equiv = len(dev.layers) - offloaded_equiv
        params = kept_equiv * model.layer_bytes * (S - 1) / S
        params += reserved_bytes(model, i, plan.num_devices)
        kv = kv_bytes(model, len(dev.layers), tokens - dev.kv_transfer_tokens, plan.micro_batch)
        out.append(params + kv <= device_specs[i].memory_bytes)
    return out
