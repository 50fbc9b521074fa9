import pytest

from offloadpipe import offline
from offloadpipe.errors import MalformedConfig, SchemaVersionError
from offloadpipe.serialize import (
    check_metrics,
    dumps,
    loads,
    metrics_from_timeline,
    online_from_dict,
    plan_from_dict,
    plan_to_dict,
)
from offloadpipe.sim import SimConfig, online_schedule, simulate


def test_plan_round_trip(toy):
    model, devices, network = toy
    plan = offline.plan(model, devices, network)
    thresholds, transfers = online_schedule(plan, model, devices, network)
    doc = plan_to_dict(plan, offline.plan_breakdown(plan, model, devices, network), thresholds, transfers)
    text = dumps(doc)
    back = loads(text)
    assert back["plan_version"] == 1
    assert plan_from_dict(back) == plan
    ths, trs = online_from_dict(back)
    assert ths == thresholds and trs == transfers
    assert dumps(plan_to_dict(plan_from_dict(back), offline.plan_breakdown(plan, model, devices, network),
                              ths, trs)) == text


@pytest.mark.parametrize("version", [2, "2.0", None])
def test_unknown_major_rejected(toy, version):
    model, devices, network = toy
    doc = plan_to_dict(offline.plan(model, devices, network))
    if version is None:
        del doc["plan_version"]
    else:
        doc["plan_version"] = version
    with pytest.raises(SchemaVersionError):
        plan_from_dict(doc)


def test_minor_version_accepted(toy):
    model, devices, network = toy
    plan = offline.plan(model, devices, network)
    doc = plan_to_dict(plan)
    doc["plan_version"] = "1.3"
    assert plan_from_dict(doc) == plan


def test_malformed_documents():
    with pytest.raises(MalformedConfig):
        loads("{not json")
    with pytest.raises(MalformedConfig):
        loads("[1, 2]")
    with pytest.raises(MalformedConfig):
        plan_from_dict({"plan_version": 1, "num_segments": 2})


def test_metrics_document(toy):
    model, devices, network = toy
    plan = offline.plan(model, devices, network)
    tl = simulate(plan, model, devices, network, SimConfig(output_tokens=3))
    doc = metrics_from_timeline(tl, "sporadic")
    check_metrics(doc)
    assert doc["tokens"] == 3 and doc["micro_batches"] == 1
    assert doc["per_token_latency_max"] >= doc["per_token_latency_mean"]
    doc["metrics_version"] = 9
    with pytest.raises(SchemaVersionError):
        check_metrics(doc)
