import itertools

import pytest

from offloadpipe import offline
from offloadpipe.cost_model import Block, layout_plan, memory_feasible, total_latency
from offloadpipe.errors import EmptyDeviceList, InfeasibleModel, LimitsExceeded, NoFeasibleAssignment
from offloadpipe.profiles import CostProfile, DeviceSpec, ModelSpec, NetworkSpec

from conftest import MB

BW = 10 * MB


def dp_oracle(leftover, idle, load):
    """Every distribution of ``leftover`` layers over the devices."""
    best = None
    for ks in itertools.product(range(leftover + 1), repeat=len(idle)):
        if sum(ks) != leftover:
            continue
        delay = max(max(0.0, k * l - w) for k, l, w in zip(ks, load, idle))
        if best is None or delay < best:
            best = delay
    return best


# ---- greedy fill

def test_greedy_toy(toy):
    model, devices, _ = toy
    assert offline.greedy_capacity_fill(model, devices, 0.0) == ([3, 3], [50 * MB, 50 * MB], 2)


def test_greedy_model_fits():
    model = ModelSpec(4, 100 * MB, 0.4, 0.6, 5000, 2, 2, 1)
    devs = [DeviceSpec(f"d{i}", 300 * MB, 0.01, 1e9, 1e9) for i in range(2)]
    counts, _, leftover = offline.greedy_capacity_fill(model, devs, 0.0)
    assert leftover == 0 and sum(counts) == 4


def test_greedy_tiny_device():
    model = ModelSpec(4, 100 * MB, 0.4, 0.6, 5000, 2, 2, 1)
    assert offline.greedy_capacity_fill(model, [DeviceSpec("d", 50 * MB, 0.01, 1e9, 1e9)], 0.0) == ([0], [50 * MB], 4)


def test_greedy_empty():
    with pytest.raises(EmptyDeviceList):
        offline.greedy_capacity_fill(ModelSpec(4, 100 * MB, 0.4, 0.6, 5000, 2, 2, 1), [], 0.0)


# ---- DP

def test_dp_toy_segment():
    counts, delay = offline.dp_segment_allocate(1, [0.062, 0.062], [0.100, 0.200])
    assert counts == [1, 0]
    assert delay == pytest.approx(0.038)


def test_dp_zero_leftover():
    assert offline.dp_segment_allocate(0, [0.05, 0.05], [0.04, 0.04]) == ([0, 0], 0.0)


def test_dp_two_identical_devices():
    counts, delay = offline.dp_segment_allocate(2, [0.050, 0.050], [0.040, 0.040])
    assert counts == [1, 1] and delay == 0.0


def test_dp_no_devices():
    with pytest.raises(NoFeasibleAssignment):
        offline.dp_segment_allocate(1, [], [])
    assert offline.dp_segment_allocate(0, [], []) == ([], 0.0)


def test_dp_additive_variant_chains_delay():
    # prefix delay 0.03 carries into the second device's window
    counts, delay = offline.dp_segment_allocate(2, [0.0, 0.01], [0.03, 0.03], composition="additive")
    assert delay == pytest.approx(0.05)
    counts, delay = offline.dp_segment_allocate(2, [0.0, 0.01], [0.03, 0.03])
    assert delay == pytest.approx(0.03)


def test_dp_state_and_complexity():
    state = offline.DpState([], [])
    L, D = 7, 3
    offline.dp_segment_allocate(L, [0.01] * D, [0.02] * D, state=state)
    assert all(state.f_allo[0][i] == 0 for i in range(D))
    for i in range(D):
        col = [state.f_allo[l][i] for l in range(L + 1)]
        assert col == sorted(col)
    assert state.ops <= (L + 1) ** 2 * D


def test_dp_matches_oracle_small():
    idle = [0.05, 0.02, 0.09]
    load = [0.03, 0.01, 0.07]
    for leftover in range(6):
        _, delay = offline.dp_segment_allocate(leftover, idle, load)
        assert delay == pytest.approx(dp_oracle(leftover, idle, load), abs=1e-15)


# ---- refinement

def test_refine_toy_pins_mha(toy_profile):
    plan = layout_plan([[2, 2], [1, 1]], [[1, 0], [1, 0]])
    refined, residual, steps = offline.fine_grained_refine(plan, [50 * MB, 50 * MB], toy_profile, BW)
    assert refined.per_device[0].resident_block == {5: Block.MHA}
    assert residual == [10 * MB, 50 * MB]
    assert steps == 1
    assert total_latency(refined, toy_profile, BW).t_uncover == pytest.approx(0.0, abs=1e-12)


def test_refine_no_residual(toy_profile):
    plan = layout_plan([[2, 2], [1, 1]], [[1, 0], [1, 0]])
    refined, residual, steps = offline.fine_grained_refine(plan, [0, 0], toy_profile, BW)
    assert refined == plan and steps == 0


def test_refine_prefers_mlp(toy_profile):
    plan = layout_plan([[2, 2], [1, 1]], [[1, 0], [1, 0]])
    refined, residual, _ = offline.fine_grained_refine(plan, [100 * MB, 0], toy_profile, BW)
    assert refined.per_device[0].resident_block[5] is Block.MLP
    assert residual[0] == 40 * MB


# ---- plan

def test_plan_toy(toy):
    model, devices, network = toy
    plan = offline.plan(model, devices, network)
    assert plan.num_segments == 2
    assert [len(d.layers) for d in plan.per_device] == [5, 3]
    assert offline.plan_breakdown(plan, model, devices, network).t_total == pytest.approx(0.114)
    plan.check_invariants(model.num_layers)
    assert all(memory_feasible(plan, model, devices, 0))


def test_plan_no_leftover():
    model = ModelSpec(4, 100 * MB, 0.4, 0.6, 5000, 2, 2, 1)
    devs = [DeviceSpec(f"d{i}", 300 * MB, 0.01, 1e8, 1e8) for i in range(2)]
    plan = offline.plan(model, devs, NetworkSpec(BW))
    assert plan.num_segments == 2 and plan.leftover == 0
    assert all(not d.offloaded for d in plan.per_device)
    assert offline.plan_breakdown(plan, model, devs, NetworkSpec(BW)).t_uncover == 0


def test_plan_infeasible_one_layer_each():
    model = ModelSpec(4, 100 * MB, 0.4, 0.6, 5000, 2, 2, 1)
    devs = [DeviceSpec(f"d{i}", 112 * MB, 0.01, 1e9, 1e9) for i in range(4)]
    with pytest.raises(InfeasibleModel):
        offline.plan(model, devs, NetworkSpec(BW))


def test_plan_for_segments_matches(toy):
    model, devices, network = toy
    assert offline.plan_for_segments(model, devices, network, 2) == offline.plan(model, devices, network)
    with pytest.raises(InfeasibleModel):
        offline.plan_for_segments(model, devices, network, 3)


def test_full_layer_ablation_has_no_pins(toy):
    model, devices, network = toy
    plan = offline.plan(model, devices, network, fine_grained=False)
    assert all(not d.resident_block for d in plan.per_device)
    assert offline.plan_breakdown(plan, model, devices, network).t_uncover == pytest.approx(0.038)


# ---- oracle

def test_oracle_toy(toy):
    model, devices, network = toy
    oracle = offline.brute_force_plan(model, devices, network)
    profile = CostProfile(model, devices)
    assert total_latency(oracle, profile, BW).t_total == pytest.approx(0.114)


def test_oracle_no_leftover():
    model = ModelSpec(4, 100 * MB, 0.4, 0.6, 5000, 2, 2, 1)
    devs = [DeviceSpec(f"d{i}", 300 * MB, 0.01, 1e8, 1e8) for i in range(2)]
    assert offline.brute_force_plan(model, devs, NetworkSpec(BW)) == offline.plan(model, devs, NetworkSpec(BW))


def test_oracle_limits():
    model = ModelSpec(16, 100 * MB, 0.4, 0.6, 5000, 2, 2, 1)
    devs = [DeviceSpec(f"d{i}", 350 * MB, 0.01, 1e9, 1e9) for i in range(4)]
    with pytest.raises(LimitsExceeded):
        offline.brute_force_plan(model, devs, NetworkSpec(BW))
