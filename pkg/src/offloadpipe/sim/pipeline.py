"""Token-by-token execution of an allocation plan on simulated devices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from ..cost_model import AllocationPlan, load_deficits, memory_feasible, reserved_bytes
from ..errors import InfeasiblePlan, NoRemainingBlocks, OutOfMemoryAtRuntime
from ..offline import greedy_capacity_fill, DEFAULT_KV_RESERVE
from ..online import (
    DEFAULT_FLUCTUATION_THRESHOLD,
    BandwidthAction,
    CacheLedger,
    DeviceOnlineState,
    OffloadThreshold,
    TransferAssignment,
    assign_transfer_targets,
    next_offload_plan,
    offload_order,
    on_bandwidth_change,
    transfer_tokens,
)
from ..profiles import CostProfile, DeviceSpec, ModelSpec, NetworkSpec, kv_bytes_per_token_per_layer
from .engine import PRIO_ACT, PRIO_COMPUTE, PRIO_KV, PRIO_LOAD, Job, Link, Loop, Process, Signal

SPORADIC = "sporadic"
BURSTY = "bursty"

EVENT_KINDS = (
    "ComputeBlock",
    "LoadShard",
    "OffloadShard",
    "ActivationSend",
    "KvSend",
    "KvRestore",
    "PlanTrigger",
)
KIND_ORDER = {
    "LoadShard": 0,
    "OffloadShard": 0,
    "ComputeBlock": 1,
    "PlanTrigger": 1,
    "ActivationSend": 2,
    "KvSend": 3,
    "KvRestore": 3,
}


@dataclass(frozen=True)
class SimConfig:
    pattern: str = SPORADIC
    prompt_tokens: int = 0
    output_tokens: int = 1
    bw_trace: tuple = ()  # (token, bytes/s) pairs; overrides the network trace when set
    enable_online_planner: bool = False
    enable_kv_transfer: bool = False
    seed: int = 0
    n_ts: int = DEFAULT_FLUCTUATION_THRESHOLD
    full_layer_offload: bool = False  # ablation: online plans move whole layers only

    def __post_init__(self):
        if self.pattern not in (SPORADIC, BURSTY):
            raise ValueError(f"pattern must be {SPORADIC!r} or {BURSTY!r}")
        if self.output_tokens < 1:
            raise ValueError("output_tokens must be >= 1")
        if self.prompt_tokens < 0:
            raise ValueError("prompt_tokens must be >= 0")

    def micro_batches(self, num_devices: int) -> int:
        return 1 if self.pattern == SPORADIC else num_devices


@dataclass(frozen=True)
class Event:
    kind: str
    device: int
    segment: int
    micro_batch: int
    layer: str
    t_start: float
    t_end: float
    token: int = 0
    peer: int = -1
    amount: int = 0
    gate: int = -1
    eid: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "device": self.device,
            "segment": self.segment,
            "micro_batch": self.micro_batch,
            "layer": self.layer,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "token": self.token,
            "peer": self.peer,
            "amount": self.amount,
            "gate": self.gate,
            "eid": self.eid,
        }


@dataclass
class Timeline:
    events: list
    token_latencies: list
    peak_memory: list
    capacities: list
    memory_samples: list  # (time, device, bytes)
    decode_start: float
    num_segments: int
    micro_batches: int
    num_layers: int
    triggers: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    transfers: list = field(default_factory=list)
    streamed_layers: list = field(default_factory=list)  # per device: layers that always stream
    baseline: bool = False

    @property
    def steady_latency(self) -> float:
        return self.token_latencies[-1]

    def breakdown(self) -> dict:
        lat = self.token_latencies
        return {
            "tokens": len(lat),
            "per_token_mean": sum(lat) / len(lat),
            "per_token_max": max(lat),
            "per_token_steady": lat[-1],
            "decode_seconds": sum(lat),
        }


@dataclass
class _Group:
    layers: tuple  # layers touched by the load, in span order
    nbytes: int
    label: str


# --------------------------------------------------------------------------
# device programs


class _Program:
    """Static shape of what one device executes, plus the online state."""

    def __init__(self, spans, model: ModelSpec, per_mb_groups: bool):
        self.spans = [tuple(s) for s in spans]
        self.model = model
        self.per_mb_groups = per_mb_groups
        self.num_segments = len(self.spans)

    @property
    def layers(self):
        return [l for s in self.spans for l in s]


class _InterleavedProgram(_Program):
    def __init__(self, plan: AllocationPlan, device: int, model: ModelSpec):
        dev = plan.per_device[device]
        super().__init__(dev.layers_per_segment, model, per_mb_groups=False)
        self.dev = dev
        self.shared = [tuple(x) for x in dev.offloaded_per_segment]
        self.alpha = 0
        self.beta = 0
        self.pending = [dict() for _ in self.spans]  # layer -> bytes to load once

    def resident_layers(self, s):
        return [l for l in self.spans[s] if l not in self.shared[s]]

    def max_online(self) -> int:
        return min(len(self.resident_layers(s)) for s in range(self.num_segments))

    def online_blocks(self, s) -> dict:
        out = {}
        for layer, block in offload_order(self.resident_layers(s), self.alpha, self.beta):
            nbytes = self.model.mha_bytes if block == "mha" else self.model.mlp_bytes
            out[layer] = out.get(layer, 0) + nbytes
        return out

    def groups(self, s) -> list:
        content = {}
        for layer in self.shared[s]:
            content[layer] = self.dev.streamed_bytes(layer, self.model)
        for layer, nbytes in self.online_blocks(s).items():
            content[layer] = content.get(layer, 0) + nbytes
        for layer, nbytes in self.pending[s].items():
            content[layer] = content.get(layer, 0) + nbytes
        layers = tuple(l for l in self.spans[s] if l in content)
        return [_Group(layers, sum(content.values()), f"seg{s}")]

    def group_count(self, s) -> int:
        return 1

    def streamed_now(self, s) -> tuple:
        keys = set(self.shared[s]) | set(self.online_blocks(s))
        return tuple(l for l in self.spans[s] if l in keys)

    def param_bytes(self, device: int, num_devices: int) -> int:
        model = self.model
        total = reserved_bytes(model, device, num_devices)
        for s in range(self.num_segments):
            online = self.online_blocks(s)
            for layer in self.spans[s]:
                if layer in self.shared[s]:
                    total += model.layer_bytes - self.dev.streamed_bytes(layer, model)
                else:
                    total += model.layer_bytes - online.get(layer, 0)
        total += self.alpha * model.mha_bytes + self.beta * model.mlp_bytes
        return total


class _TraditionalProgram(_Program):
    """One contiguous stage; the slot cycles through ``k + 1`` layers per micro-batch."""

    def __init__(self, layers, offloaded: int, model: ModelSpec):
        super().__init__([layers], model, per_mb_groups=True)
        n = len(layers)
        self.k = offloaded
        if offloaded:
            step = max(1, n // (offloaded + 1))
            pos = sorted({min(n - 1, j * step) for j in range(offloaded + 1)})
            j = 0
            while len(pos) < offloaded + 1:  # crowded stage: take the tail
                cand = n - 1 - j
                if cand not in pos:
                    pos.append(cand)
                j += 1
            pos.sort()
            self.slot_layers = tuple(layers[p] for p in pos)
        else:
            self.slot_layers = ()
        self.alpha = self.beta = 0

    def groups(self, s) -> list:
        if not self.slot_layers:
            return [_Group((), 0, "stage")]
        return [_Group((l,), self.model.layer_bytes, f"L{l}") for l in self.slot_layers]

    def group_count(self, s) -> int:
        return max(1, len(self.slot_layers))

    def streamed_now(self, s) -> tuple:
        return self.slot_layers

    def param_bytes(self, device: int, num_devices: int) -> int:
        n = len(self.spans[0])
        held = n - len(self.slot_layers) + (1 if self.slot_layers else 0)
        return reserved_bytes(self.model, device, num_devices) + held * self.model.layer_bytes


# --------------------------------------------------------------------------
# the run


class _Run:
    def __init__(self, programs, model, devices, network, config, plan=None, baseline=False):
        self.programs = programs
        self.model = model
        self.devices = tuple(devices)
        self.profile = CostProfile(model, self.devices)
        self.network = network
        self.config = config
        self.plan = plan
        self.baseline = baseline
        self.D = len(devices)
        self.S = programs[0].num_segments
        self.M = config.micro_batches(self.D)
        self.T = config.output_tokens
        self.loop = Loop()
        self.events = []
        self._eid = 0
        self.kvpl = kv_bytes_per_token_per_layer(model)
        trace = tuple(config.bw_trace) if config.bw_trace else network.trace
        self.net = NetworkSpec(network.base_bandwidth_bps, tuple((int(a), float(b)) for a, b in trace))
        self.links = {}
        self.signals = {}
        self.arrivals = {}
        self.ledger = CacheLedger()
        self.restore_buf = [0] * self.D
        self.hosted = [0] * self.D
        self.params = [p.param_bytes(i, self.D) for i, p in enumerate(programs)]
        self.samples = []
        self.peak = [0] * self.D
        self.triggers = []
        self.actions = []
        self.load_ids = {}
        self.load_snap = {}
        self.tokens = [config.prompt_tokens] * self.D
        self.ordinal = [0] * self.D
        self.n_trans = [0] * self.D
        self.target = [-1] * self.D
        self.sent_any = [[False] * self.S for _ in range(self.D)]
        self.assignments = []
        self.failure = None
        for i in range(self.D):
            self.ledger.append_tokens(i, self.S, config.prompt_tokens)

    # ---- bookkeeping

    def sig(self, key) -> Signal:
        s = self.signals.get(key)
        if s is None:
            s = self.signals[key] = Signal(self.loop)
        return s

    def emit(self, kind, device, segment, mb, layer, t0, t1, token=0, peer=-1, amount=0, gate=-1) -> int:
        eid = self._eid
        self._eid += 1
        self.events.append(Event(kind, device, segment, mb, str(layer), t0, t1, token, peer, amount, gate, eid))
        return eid

    def layers_in(self, i, s) -> int:
        return len(self.programs[i].spans[s])

    def kv_rate(self, i) -> int:
        return self.kvpl * len(self.programs[i].layers) * self.M

    def kv_bytes(self, i) -> int:
        total = 0
        for s in range(self.S):
            total += self.ledger.cell(i, s).resident * self.layers_in(i, s)
        return total * self.kvpl * self.M

    def memory(self, i) -> int:
        return self.params[i] + self.kv_bytes(i) + self.restore_buf[i] + self.hosted[i]

    def sample(self, i) -> None:
        m = self.memory(i)
        self.samples.append((self.loop.now, i, m))
        if m > self.peak[i]:
            self.peak[i] = m
        if m > self.devices[i].memory_bytes and self.failure is None:
            self.failure = OutOfMemoryAtRuntime(i, self.tokens[i], m, self.devices[i].memory_bytes)

    def bw(self, token: int) -> float:
        return self.net.bandwidth_at(token)

    def link(self, src, dst) -> Link:
        key = (src, dst)
        if key not in self.links:
            self.links[key] = Link(self.loop, src, dst, self._record_link)
        return self.links[key]

    def _record_link(self, job, t0, t1, final) -> None:
        m = job.meta
        self.emit(job.kind, m["device"], m["segment"], m["mb"], m["layer"], t0, t1,
                  token=m["token"], peer=m["peer"], amount=m.get("amount", 0) if final else 0)

    # ---- thresholds

    def hosted_reserve(self, j) -> int:
        return sum(
            self.n_trans[i] * self.kv_rate(i)
            for i in range(self.D) if self.target[i] == j and self.n_trans[i] > 0
        )

    def away_credit(self, i) -> int:
        if self.n_trans[i] <= 0 or self.target[i] < 0:
            return 0
        biggest = max(self.layers_in(i, s) for s in range(self.S))
        return self.n_trans[i] * self.kvpl * self.M * (len(self.programs[i].layers) - biggest)

    def threshold(self, i) -> int:
        """Largest KV token count device i can hold under its current plan."""
        free = (self.devices[i].memory_bytes - self.params[i] - self.hosted_reserve(i)
                + self.away_credit(i))
        return math.floor(free / self.kv_rate(i)) if free >= 0 else -1

    def uncovered_stall(self, i, bw) -> float:
        if self.plan is None:
            return 0.0
        deficits = load_deficits(self.plan, self.profile, bw)
        return max(0.0, max(deficits[s][i] for s in range(1, self.S)))

    # ---- online planner at a device's token boundary

    def before_token(self, i, t) -> None:
        cfg = self.config
        prog = self.programs[i]
        if self.n_trans[i] > 0 or (self.target[i] >= 0 and cfg.enable_kv_transfer):
            self.bandwidth_check(i, t)
        n_next = cfg.prompt_tokens + t
        while n_next > self.threshold(i):
            ts = self.threshold(i)
            if not cfg.enable_online_planner or self.baseline:
                raise OutOfMemoryAtRuntime(i, t, self.memory(i) + self.kv_rate(i), self.devices[i].memory_bytes)
            n_now = n_next - 1
            need = self.kv_rate(i) * max(1, self.plan.empirical_n - n_now) if self.plan else self.kv_rate(i)
            state = DeviceOnlineState(
                device=i,
                ordinal=self.ordinal[i],
                trigger_tokens=max(ts, 0),
                kv_rate=self.kv_rate(i),
                need_bytes=need,
                max_alpha=prog.max_online(),
                max_beta=prog.max_online(),
                alpha=prog.alpha,
                beta=prog.beta,
            )
            try:
                th = next_offload_plan(state, self.model, self.S, cfg.full_layer_offload)
            except NoRemainingBlocks:
                raise OutOfMemoryAtRuntime(i, t, self.memory(i) + self.kv_rate(i), self.devices[i].memory_bytes)
            self.apply_online(i, th.alpha, th.beta, t)
            self.ordinal[i] += 1
            now = self.loop.now
            self.emit("PlanTrigger", i, 0, 0, f"alpha={th.alpha},beta={th.beta}", now, now,
                      token=n_now, amount=th.trigger_tokens)
            self.triggers.append({
                "device": i,
                "ordinal": th.ordinal,
                "token": n_now,
                "threshold": ts,
                "alpha": th.alpha,
                "beta": th.beta,
                "next_trigger_tokens": th.trigger_tokens,
                "time": now,
            })
            self.sample(i)

    def apply_online(self, i, alpha, beta, t) -> None:
        prog = self.programs[i]
        before = [prog.online_blocks(s) for s in range(self.S)]
        prog.alpha, prog.beta = alpha, beta
        after = [prog.online_blocks(s) for s in range(self.S)]
        now = self.loop.now
        for s in range(self.S):
            for layer, nbytes in after[s].items():
                if nbytes > before[s].get(layer, 0):
                    self.emit("OffloadShard", i, s, 0, f"L{layer}", now, now, token=t)
            if s == 0:
                continue  # segment 0's blocks move between slot and residency in place
            for layer, nbytes in before[s].items():
                back = nbytes - after[s].get(layer, 0)
                if back > 0:
                    prog.pending[s][layer] = prog.pending[s].get(layer, 0) + back
        self.params[i] = prog.param_bytes(i, self.D)

    def bandwidth_check(self, i, t) -> None:
        observed = self.bw(t)
        known = self._bw_known[i]
        if observed == known:
            return
        generated = self.config.prompt_tokens + t - 1
        next_ts = self.threshold(i)
        decision = on_bandwidth_change(
            known, observed, self.n_trans[i], self.uncovered_stall(i, observed),
            self.kv_rate(i), generated, next_ts, self.config.n_ts,
        )
        self.actions.append({
            "device": i,
            "token": t,
            "from_bw": known,
            "to_bw": observed,
            "action": decision.action.value,
            "n_trans_before": self.n_trans[i],
            "n_trans_after": decision.tokens,
            "generated": generated,
            "next_threshold": next_ts,
            "time": self.loop.now,
        })
        if decision.action is not BandwidthAction.DEFER:
            self._bw_known[i] = observed
        self.n_trans[i] = decision.tokens

    # ---- processes

    def setup_transfers(self) -> None:
        self._bw_known = [self.bw(1)] * self.D
        if not self.config.enable_kv_transfer or self.plan is None or self.D < 2:
            return
        bw = self.bw(1)
        stalls = [self.uncovered_stall(i, bw) for i in range(self.D)]
        want = [transfer_tokens(stalls[i], bw, self.kv_rate(i)) for i in range(self.D)]
        ts = [self.threshold(i) for i in range(self.D)]
        # free memory on each device when the earliest sender fills up
        first = max(0, min(ts))
        headroom = [
            self.devices[j].memory_bytes - self.params[j] - self.kv_rate(j) * first
            for j in range(self.D)
        ]
        rates = [self.kv_rate(i) for i in range(self.D)]
        self.assignments = assign_transfer_targets(ts, want, headroom, rates, self.config.n_ts)
        for a in self.assignments:
            self.n_trans[a.source] = a.tokens_per_segment
            self.target[a.source] = a.target

    def successor(self, i, s, t):
        if i < self.D - 1:
            return i + 1, s, t
        if s < self.S - 1:
            return 0, s + 1, t
        return 0, 0, t + 1

    def input_key(self, t, s, b, i):
        return ("in", t, s, b, i)

    def device_proc(self, i):
        prog = self.programs[i]
        model = self.model
        dev = self.devices[i]
        c_mha = dev.comp_per_layer_seconds * model.mha_fraction
        c_mlp = dev.comp_per_layer_seconds * model.mlp_fraction
        h_bytes = self.profile.h_size(1)
        for t in range(1, self.T + 1):
            for s in range(self.S):
                streamed = None
                for b in range(self.M):
                    yield ("wait", self.sig(self.input_key(t, s, b, i)), PRIO_COMPUTE)
                    if s == 0 and b == 0:
                        self.before_token(i, t)
                        self.tokens[i] = self.config.prompt_tokens + t
                        self.ledger.append_tokens(i, self.S, 1)
                        self.sample(i)
                    if b == 0:
                        rs = self.signals.get(("restore", i, t, s))
                        if rs is not None:
                            yield ("wait", rs, PRIO_COMPUTE)
                    if streamed is None:
                        streamed = prog.streamed_now(s)
                    groups = self.group_layout(i, t, s, b, streamed)
                    for g, (_, last_layer) in enumerate(groups):
                        if last_layer is None and self.release_mb(b):
                            self.sig(("release", i, t, s, self.gkey(b), g)).fire()
                    gate_of = {gl: g for g, (gl, _) in enumerate(groups) if gl is not None}
                    last_of = {ll: g for g, (_, ll) in enumerate(groups) if ll is not None}
                    current_gate = -1
                    for layer in prog.spans[s]:
                        if layer in gate_of:
                            g = gate_of[layer]
                            key = (i, t, s, self.gkey(b), g)
                            yield ("wait", self.sig(("loaded",) + key), PRIO_COMPUTE)
                            current_gate = self.load_ids.get(key, -1)
                        gate = current_gate if layer in streamed else -1
                        for block, dur in (("mha", c_mha), ("mlp", c_mlp)):
                            t0 = self.loop.now
                            yield ("sleep", dur, PRIO_COMPUTE)
                            self.emit("ComputeBlock", i, s, b, f"L{layer}.{block}", t0, self.loop.now,
                                      token=t, gate=gate)
                        if layer in last_of and self.release_mb(b):
                            g = last_of[layer]
                            self.sig(("release", i, t, s, self.gkey(b), g)).fire()
                    self.send_activation(i, s, b, t, h_bytes)
                self.after_segment(i, s, t)
        return

    def gkey(self, b):
        return b if self.programs[0].per_mb_groups else 0

    def release_mb(self, b) -> bool:
        return self.programs[0].per_mb_groups or b == self.M - 1

    def group_layout(self, i, t, s, b, streamed):
        """(gate layer, release layer) per group; ``None`` for an empty group."""
        prog = self.programs[i]
        out = []
        for g in range(prog.group_count(s)):
            key = (i, t, s, self.gkey(b), g)
            if isinstance(prog, _InterleavedProgram):
                # the load for this segment started when the previous one released
                snap = self.load_snap.get(key)
                loaded = set(snap) if snap else set()
                touched = loaded | set(streamed)
            else:
                loaded = set(prog.groups(s)[g].layers)
                touched = loaded
            span = [l for l in prog.spans[s] if l in touched]
            if not span:
                out.append((None, None))
                continue
            gate_layers = [l for l in prog.spans[s] if l in loaded]
            gate = gate_layers[0] if gate_layers else None
            out.append((gate, span[-1]))
        return out

    def send_activation(self, i, s, b, t, h_bytes) -> None:
        j, s2, t2 = self.successor(i, s, t)
        key = self.input_key(t2, s2, b, j)
        meta = {"device": i, "segment": s, "mb": b, "layer": f"h{t}.{s}", "token": t, "peer": j}

        def done(key=key, t2=t2, s2=s2, j=j, b=b):
            if j == 0 and s2 == 0:
                self.arrivals[(t2, b)] = self.loop.now
            self.sig(key).fire()

        self.link(i, j).submit(Job("ActivationSend", h_bytes, self.bw(t), meta, on_done=done))

    def loader_proc(self, i):
        prog = self.programs[i]
        prev = None
        mbs = range(self.M) if prog.per_mb_groups else range(1)
        for t in range(1, self.T + 1):
            for s in range(self.S):
                for b in mbs:
                    for g in range(prog.group_count(s)):
                        key = (i, t, s, b, g)
                        if prev is not None:
                            yield ("wait", self.sig(("release",) + prev), PRIO_LOAD)
                            if self.baseline and g == 0:
                                # a plain stage cannot prefetch behind other devices' work
                                yield ("wait", self.sig(self.input_key(t, s, b, i)), PRIO_LOAD)
                        prev = key
                        group = prog.groups(s)[g]
                        if group.nbytes > 0 and group.layers:
                            if isinstance(prog, _InterleavedProgram):
                                prog.pending[s] = {}
                            self.load_snap[key] = group.layers
                            self.emit("OffloadShard", i, s, b, "slot", self.loop.now, self.loop.now, token=t)
                            t0 = self.loop.now
                            yield ("sleep", self.profile.load(i, group.nbytes), PRIO_LOAD)
                            self.load_ids[key] = self.emit("LoadShard", i, s, b, group.label, t0,
                                                           self.loop.now, token=t, amount=group.nbytes)
                        self.sig(("loaded",) + key).fire()

    # ---- KV protocol

    def after_segment(self, i, s, t) -> None:
        n = self.n_trans[i]
        j = self.target[i]
        if j < 0:
            return
        nxt_s = (s + 1) % self.S
        nxt_t = t + 1 if nxt_s == 0 else t
        cell = self.ledger.cell(i, s)
        restore_needed = nxt_t <= self.T and self.sent_any[i][nxt_s]
        if restore_needed:
            self.sig(("restore", i, nxt_t, nxt_s))

        def start_restore():
            if not restore_needed:
                return
            out_tokens = self.ledger.cell(i, nxt_s).transferred_out
            sigr = self.sig(("restore", i, nxt_t, nxt_s))
            if out_tokens <= 0:
                sigr.fire()
                return
            nbytes = out_tokens * self.kvpl * self.layers_in(i, nxt_s) * self.M
            meta = {"device": j, "segment": nxt_s, "mb": 0, "layer": f"kv{i}.{nxt_s}",
                    "token": nxt_t, "peer": i, "amount": out_tokens}

            def begin():
                self.restore_buf[i] += nbytes
                self.sample(i)

            def done():
                self.restore_buf[i] -= nbytes
                self.ledger.restore(i, nxt_s, j)
                self.hosted[j] -= nbytes
                self.sample(i)
                self.sample(j)
                sigr.fire()

            self.link(j, i).submit(Job("KvRestore", nbytes, self.bw(t), meta, on_done=done, on_start=begin))

        if n > 0 and cell.resident >= n and cell.transferred_out == 0:
            nbytes = n * self.kvpl * self.layers_in(i, s) * self.M
            meta = {"device": i, "segment": s, "mb": 0, "layer": f"kv{i}.{s}",
                    "token": t, "peer": j, "amount": n}
            self.sent_any[i][s] = True

            def begin():
                self.hosted[j] += nbytes
                self.sample(j)

            def done():
                self.ledger.send(i, s, j, n)
                self.sample(i)
                start_restore()

            self.link(i, j).submit(Job("KvSend", nbytes, self.bw(t), meta, on_done=done, on_start=begin))
        else:
            start_restore()

    # ---- driver

    def prologue(self):
        """Prefill pass and first-group staging; returns the decode-start signal."""
        start = self.sig(("decode-start",))
        prefill_bytes = self.profile.h_size(self.M) * max(1, self.config.prompt_tokens)
        state = {"loads": 0, "prefill": False}
        need_loads = self.D

        def maybe_start():
            if state["prefill"] and state["loads"] == need_loads:
                start.fire()

        def prefill_on(i):
            t0 = self.loop.now
            dur = self.devices[i].prefill_seconds

            def finished():
                self.emit("ComputeBlock", i, 0, 0, "prefill", t0, self.loop.now, token=0)
                j = (i + 1) % self.D
                meta = {"device": i, "segment": 0, "mb": 0, "layer": "prefill", "token": 0, "peer": j}

                def arrived():
                    if j == 0:
                        state["prefill"] = True
                        maybe_start()
                    else:
                        prefill_on(j)

                self.link(i, j).submit(Job("ActivationSend", prefill_bytes, self.bw(0), meta, on_done=arrived))

            self.loop.at(t0 + dur, PRIO_COMPUTE, i, finished)

        prefill_on(0)
        for i in range(self.D):
            key = (i, 1, 0, 0, 0)

            def staged(i=i, key=key):
                state["loads"] += 1
                maybe_start()

            self.sig(("loaded",) + key).on(PRIO_LOAD, i, staged)
        return start

    def run(self) -> Timeline:
        self.setup_transfers()
        for i in range(self.D):
            self.sample(i)
        if self.failure is not None:
            raise self.failure
        start = self.prologue()

        def kick():
            self.decode_start = self.loop.now
            for b in range(self.M):
                self.arrivals[(1, b)] = self.loop.now
                self.sig(self.input_key(1, 0, b, 0)).fire()

        start.on(PRIO_COMPUTE, 0, kick)
        procs = [Process(self.loop, self.loader_proc(i), i, PRIO_LOAD) for i in range(self.D)]
        procs += [Process(self.loop, self.device_proc(i), i, PRIO_COMPUTE) for i in range(self.D)]
        for p in procs:
            p.start()
        self.loop.run()
        if self.failure is not None:
            raise self.failure
        done_at = [max(self.arrivals[(t, b)] for b in range(self.M)) for t in range(1, self.T + 2)]
        latencies = [done_at[k + 1] - done_at[k] for k in range(self.T)]
        events = sorted(self.events, key=lambda e: (e.t_start, KIND_ORDER[e.kind], e.device, e.eid))
        streamed = []
        for prog in self.programs:
            if isinstance(prog, _InterleavedProgram):
                streamed.append(sorted(l for seg in prog.shared for l in seg))
            else:
                streamed.append(sorted(prog.slot_layers))
        return Timeline(
            events=events,
            token_latencies=latencies,
            peak_memory=list(self.peak),
            capacities=[d.memory_bytes for d in self.devices],
            memory_samples=list(self.samples),
            decode_start=self.decode_start,
            num_segments=self.S,
            micro_batches=self.M,
            num_layers=self.model.num_layers,
            triggers=list(self.triggers),
            actions=list(self.actions),
            transfers=[a.to_dict() for a in self.assignments],
            streamed_layers=streamed,
            baseline=self.baseline,
        )


def simulate(
    plan: AllocationPlan,
    model: ModelSpec,
    devices: Sequence[DeviceSpec],
    network: NetworkSpec,
    config: SimConfig = SimConfig(),
) -> Timeline:
    """Run ``config.output_tokens`` decode steps of ``plan``."""
    if len(devices) != plan.num_devices:
        raise InfeasiblePlan(f"plan has {plan.num_devices} devices, specs have {len(devices)}")
    plan.check_invariants(model.num_layers)
    feasible = memory_feasible(plan, model, devices, 0)
    if not all(feasible):
        raise InfeasiblePlan(f"memory constraint violated at token 0 on {feasible}")
    programs = [_InterleavedProgram(plan, i, model) for i in range(plan.num_devices)]
    return _Run(programs, model, devices, network, config, plan=plan).run()


def online_schedule(
    plan: AllocationPlan,
    model: ModelSpec,
    devices: Sequence[DeviceSpec],
    network: NetworkSpec,
    config: SimConfig = SimConfig(enable_online_planner=True, enable_kv_transfer=True),
):
    """First offload threshold per device and the KV transfer pairing.

    Mirrors what :func:`simulate` arms before the first decode step, so the
    plan document can carry it.  Returns ``(thresholds, assignments)``.
    """
    programs = [_InterleavedProgram(plan, i, model) for i in range(plan.num_devices)]
    run = _Run(programs, model, devices, network, config, plan=plan)
    run.setup_transfers()
    thresholds = []
    for i, prog in enumerate(programs):
        ts = max(run.threshold(i), 0)
        rate = run.kv_rate(i)
        state = DeviceOnlineState(
            device=i,
            ordinal=0,
            trigger_tokens=ts,
            kv_rate=rate,
            need_bytes=rate * max(1, plan.empirical_n - ts),
            max_alpha=prog.max_online(),
            max_beta=prog.max_online(),
        )
        try:
            nxt = next_offload_plan(state, model, run.S, config.full_layer_offload)
            alpha, beta = nxt.alpha, nxt.beta
        except NoRemainingBlocks:
            alpha = beta = 0
        thresholds.append(OffloadThreshold(i, 1, ts, alpha, beta))
    return thresholds, list(run.assignments)


def traditional_layer_counts(model: ModelSpec, devices: Sequence[DeviceSpec],
                             kv_reserve_fraction: float = DEFAULT_KV_RESERVE):
    """Greedy capacities with leftover layers dealt round-robin."""
    counts, _, leftover = greedy_capacity_fill(model, devices, kv_reserve_fraction)
    extra = [0] * len(devices)
    i = 0
    while leftover:
        extra[i % len(devices)] += 1
        leftover -= 1
        i += 1
    return [c + e for c, e in zip(counts, extra)], extra


def simulate_traditional_baseline(
    model: ModelSpec,
    devices: Sequence[DeviceSpec],
    network: NetworkSpec,
    config: SimConfig = SimConfig(),
    layer_counts: Sequence[int] | None = None,
    offloaded_counts: Sequence[int] | None = None,
) -> Timeline:
    """Plain pipeline: one contiguous stage per device, offloading inside the stage.

    With ``layer_counts``/``offloaded_counts`` the stage sizes mirror another
    allocation (e.g. the per-device totals of an interleaved plan); the
    device then keeps ``total - offloaded - 1`` layers resident and cycles
    one slot through the rest.  Online features are not part of the baseline.
    """
    if layer_counts is None:
        layer_counts, offloaded_counts = traditional_layer_counts(model, devices)
    if offloaded_counts is None:
        offloaded_counts = [0] * len(layer_counts)
    if sum(layer_counts) != model.num_layers:
        raise InfeasiblePlan("stage sizes must cover every layer")
    programs = []
    nxt = 0
    for i, n in enumerate(layer_counts):
        if n < 1:
            raise InfeasiblePlan(f"device {i} has an empty stage")
        layers = list(range(nxt, nxt + n))
        nxt += n
        programs.append(_TraditionalProgram(layers, offloaded_counts[i], model))
    for i, prog in enumerate(programs):
        if prog.param_bytes(i, len(devices)) > devices[i].memory_bytes:
            raise InfeasiblePlan(f"device {i}: stage does not fit even with one shared slot")
    cfg = SimConfig(
        pattern=config.pattern,
        prompt_tokens=config.prompt_tokens,
        output_tokens=config.output_tokens,
        bw_trace=config.bw_trace,
        seed=config.seed,
        n_ts=config.n_ts,
    )
    return _Run(programs, model, devices, network, cfg, baseline=True).run()


def baseline_counts_from_plan(plan: AllocationPlan):
    totals = [len(d.layers) for d in plan.per_device]
    offl = [len(d.offloaded) for d in plan.per_device]
    return totals, offl
