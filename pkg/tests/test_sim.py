import dataclasses
import xml.etree.ElementTree as ET

import pytest

from offloadpipe import offline
from offloadpipe.cost_model import total_latency
from offloadpipe.errors import InfeasiblePlan, InvariantViolation, UnsupportedFormat, ValidationFailure
from offloadpipe.profiles import CostProfile, DeviceSpec, ModelSpec, NetworkSpec
from offloadpipe.sim import (
    BURSTY,
    SimConfig,
    baseline_counts_from_plan,
    export_timeline,
    online_schedule,
    simulate,
    simulate_traditional_baseline,
    validate_timeline,
)
from offloadpipe.sim.export import CSV_COLUMNS, to_json

from conftest import MB


@pytest.fixture(scope="module")
def toy_plan(toy):
    model, devices, network = toy
    return offline.plan(model, devices, network)


def test_one_token_matches_cost_model(toy, toy_plan):
    model, devices, network = toy
    tl = simulate(toy_plan, model, devices, network, SimConfig(output_tokens=1))
    assert abs(tl.steady_latency - 0.114) < 1e-9
    validate_timeline(tl, toy_plan, devices)


def test_bursty_overlaps_micro_batches(toy, toy_plan):
    model, devices, network = toy
    sporadic = simulate(toy_plan, model, devices, network, SimConfig(output_tokens=1))
    bursty = simulate(toy_plan, model, devices, network, SimConfig(pattern=BURSTY, output_tokens=1))
    assert bursty.micro_batches == 2
    assert bursty.steady_latency < 2 * sporadic.steady_latency
    validate_timeline(bursty, toy_plan, devices)
    assert total_latency(toy_plan, CostProfile(model, devices), network.base_bandwidth_bps).t_uncover == 0


def test_zero_bandwidth_trace_rejected():
    with pytest.raises(InvariantViolation):
        NetworkSpec(10 * MB, ((3, 0.0),))


def test_config_guards():
    with pytest.raises(ValueError):
        SimConfig(output_tokens=0)
    with pytest.raises(ValueError):
        SimConfig(pattern="steady")


def test_wrong_device_count(toy, toy_plan):
    model, devices, network = toy
    with pytest.raises(InfeasiblePlan):
        simulate(toy_plan, model, devices[:1], network)


def fig3_instance():
    # each device: 3 resident layers plus one layer through a shared slot
    model = ModelSpec(8, 100 * MB, 0.4, 0.6, 5000, 2, 2, 1, h_size_bytes=10_000)
    devices = tuple(DeviceSpec(f"d{i}", 335 * MB, 0.010, 1000 * MB, 1000 * MB) for i in range(2))
    return model, devices, NetworkSpec(10 * MB)


def test_baseline_slower_on_fig3_shape():
    model, devices, network = fig3_instance()
    plan = offline.plan(model, devices, network, kv_reserve_fraction=0.0)
    assert [len(d.layers) for d in plan.per_device] == [4, 4]
    assert [len(d.offloaded) for d in plan.per_device] == [1, 1]
    cfg = SimConfig(output_tokens=4)
    inter = simulate(plan, model, devices, network, cfg)
    totals, offl = baseline_counts_from_plan(plan)
    base = simulate_traditional_baseline(model, devices, network, cfg, totals, offl)
    validate_timeline(base, None, devices)
    assert base.breakdown()["per_token_mean"] > inter.breakdown()["per_token_mean"]


def test_baseline_without_offload_is_plain_pipeline():
    model, devices, network = fig3_instance()
    roomy = tuple(dataclasses.replace(d, memory_bytes=1000 * MB) for d in devices)
    base = simulate_traditional_baseline(model, roomy, network, SimConfig(output_tokens=3), [4, 4], [0, 0])
    # one pass of compute plus one hop per device
    assert base.steady_latency == pytest.approx(8 * 0.010 + 2 * 0.001)


def test_toy_two_stages_uncovered(toy):
    model, devices, network = toy
    base = simulate_traditional_baseline(model, devices, network, SimConfig(output_tokens=3), [5, 3], [2, 0])
    plain = 5 * 0.010 + 3 * 0.020 + 2 * 0.001
    assert base.steady_latency > plain + 1e-6


def test_validate_toy(toy, toy_plan):
    model, devices, network = toy
    tl = simulate(toy_plan, model, devices, network, SimConfig(output_tokens=3))
    report = validate_timeline(tl, toy_plan, devices)
    assert report.ok and report.checked_events == len(tl.events)


def test_validate_catches_swapped_compute(toy, toy_plan):
    model, devices, network = toy
    tl = simulate(toy_plan, model, devices, network, SimConfig(output_tokens=2))
    idx = [k for k, e in enumerate(tl.events) if e.kind == "ComputeBlock" and e.token == 1]
    a, b = idx[0], idx[3]
    ea, eb = tl.events[a], tl.events[b]
    tl.events[a] = dataclasses.replace(ea, layer=eb.layer)
    tl.events[b] = dataclasses.replace(eb, layer=ea.layer)
    with pytest.raises(ValidationFailure) as err:
        validate_timeline(tl, toy_plan, devices)
    assert err.value.clause == "a"


def test_validate_catches_memory_spike(toy, toy_plan):
    model, devices, network = toy
    tl = simulate(toy_plan, model, devices, network, SimConfig(output_tokens=2))
    tl.memory_samples.append((0.05, 0, devices[0].memory_bytes + 1))
    with pytest.raises(ValidationFailure) as err:
        validate_timeline(tl, toy_plan, devices)
    assert err.value.clause == "c"


def test_validate_catches_overlap(toy, toy_plan):
    model, devices, network = toy
    tl = simulate(toy_plan, model, devices, network, SimConfig(output_tokens=2))
    comp = [e for e in tl.events if e.kind == "ComputeBlock" and e.device == 1]
    tl.events.append(dataclasses.replace(comp[0], t_start=comp[1].t_start, t_end=comp[1].t_end + 1, token=0, eid=10**9))
    with pytest.raises(ValidationFailure) as err:
        validate_timeline(tl, toy_plan, devices)
    assert err.value.clause == "b"


def test_online_trigger_at_threshold(toy, toy_plan):
    model, devices, network = toy
    tl = simulate(toy_plan, model, devices, network, SimConfig(output_tokens=210, enable_online_planner=True))
    first = [t for t in tl.triggers if t["device"] == 0][0]
    assert first["token"] == 200 and (first["alpha"], first["beta"]) == (1, 0)
    validate_timeline(tl, toy_plan, devices)


def test_online_schedule_toy(toy, toy_plan):
    model, devices, network = toy
    thresholds, transfers = online_schedule(toy_plan, model, devices, network)
    assert thresholds[0].trigger_tokens == 200
    assert (thresholds[0].alpha, thresholds[0].beta) == (1, 0)
    assert transfers == []


def test_export_csv_shape(toy, toy_plan):
    model, devices, network = toy
    tl = simulate(toy_plan, model, devices, network, SimConfig(output_tokens=2))
    lines = export_timeline(tl, "csv").splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + len(tl.events)


def test_export_svg_lanes(toy, toy_plan):
    model, devices, network = toy
    tl = simulate(toy_plan, model, devices, network, SimConfig(output_tokens=1))
    svg = export_timeline(tl, "svg")
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    for d in range(len(devices)):
        assert f"dev{d} compute" in svg and f"dev{d} storage" in svg
    assert svg == export_timeline(tl, "svg")


def test_export_unknown_format(toy, toy_plan):
    model, devices, network = toy
    tl = simulate(toy_plan, model, devices, network, SimConfig(output_tokens=1))
    with pytest.raises(UnsupportedFormat):
        export_timeline(tl, "pdf")


def test_deterministic(toy, toy_plan):
    model, devices, network = toy
    cfg = SimConfig(output_tokens=5, pattern=BURSTY, seed=3)
    a = to_json(simulate(toy_plan, model, devices, network, cfg))
    b = to_json(simulate(toy_plan, model, devices, network, cfg))
    assert a == b and '"timeline_version": 1' in a
