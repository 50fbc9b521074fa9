"""Command line: plan, simulate, check and sweep.

Exit codes: 0 success, 1 configuration or usage error, 2 infeasible model,
3 out of memory at runtime, 4 timeline validation failure, 5 oracle mismatch.
"""

from __future__ import annotations

import argparse
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import offline
from .cost_model import total_latency
from .errors import (
    ConfigError,
    InfeasibleModel,
    InfeasiblePlan,
    LimitsExceeded,
    OffloadPipeError,
    OutOfMemoryAtRuntime,
    SchemaVersionError,
    UnsupportedFormat,
    ValidationFailure,
)
from .instances import random_instance
from .profiles import CostProfile, NetworkSpec, network_from_dict, parse_configs, parse_rate
from .serialize import dumps, loads, metrics_from_timeline, plan_from_dict, plan_to_dict
from .sim import (
    BURSTY,
    SPORADIC,
    SimConfig,
    baseline_counts_from_plan,
    export_timeline,
    online_schedule,
    simulate,
    simulate_traditional_baseline,
    validate_timeline,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_OOM = 3
EXIT_VALIDATION = 4
EXIT_MISMATCH = 5

MANIFEST_VERSION = 1
CHECK_TOLERANCE = 1e-9
SWEEP_AXES = ("bandwidth", "empirical_n", "segment_count", "pattern")


class CheckMismatch(OffloadPipeError):
    pass


@dataclass
class RunManifest:
    model: str | None = None
    devices: str | None = None
    network: str | None = None
    plan: str | None = None
    out: str = "."
    sim: dict = field(default_factory=dict)
    schema_version: int = MANIFEST_VERSION

    def configs(self):
        for name in ("model", "devices", "network"):
            if getattr(self, name) is None:
                raise ConfigError(f"--{name} is required")
        return parse_configs(self.model, self.devices, self.network)


# --------------------------------------------------------------------------
# helpers


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _manifest(args) -> RunManifest:
    return RunManifest(
        model=args.model,
        devices=args.devices,
        network=args.network,
        plan=getattr(args, "plan", None),
        out=args.out,
    )


def _read_trace(path: str, network: NetworkSpec) -> tuple:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if isinstance(raw, dict):
        raw = raw.get("trace", [])
    return network_from_dict({"base_bandwidth_bps": network.base_bandwidth_bps, "trace": raw}, path).trace


def _sim_config(args, network: NetworkSpec) -> SimConfig:
    trace = _read_trace(args.bw_trace, network) if args.bw_trace else ()
    return SimConfig(
        pattern=args.pattern,
        prompt_tokens=args.prompt_tokens,
        output_tokens=args.output_tokens,
        bw_trace=trace,
        enable_online_planner=args.enable_online,
        enable_kv_transfer=args.enable_kv_transfer,
        seed=args.seed,
    )


def _config_record(cfg: SimConfig) -> dict:
    return {
        "pattern": cfg.pattern,
        "prompt_tokens": cfg.prompt_tokens,
        "output_tokens": cfg.output_tokens,
        "bw_trace": [list(x) for x in cfg.bw_trace],
        "enable_online_planner": cfg.enable_online_planner,
        "enable_kv_transfer": cfg.enable_kv_transfer,
        "seed": cfg.seed,
        "n_ts": cfg.n_ts,
    }


def _write(out_dir: Path, files: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text)


def _fmt_breakdown(bd) -> list[str]:
    return [f"{k}={v:.9g}" for k, v in bd.to_dict().items()]


def _load_plan(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    return plan_from_dict(loads(text, path))


# --------------------------------------------------------------------------
# commands


def cmd_plan(args) -> int:
    manifest = _manifest(args)
    model, devices, network = manifest.configs()
    plan = offline.plan(model, devices, network, empirical_n=args.empirical_n)
    bd = total_latency(plan, CostProfile(model, devices), network.base_bandwidth_bps)
    thresholds, transfers = online_schedule(plan, model, devices, network)
    doc = plan_to_dict(plan, bd, thresholds, transfers)
    _write(Path(manifest.out), {"plan.json": dumps(doc)})
    print(f"num_segments={plan.num_segments}")
    print(f"leftover={plan.leftover}")
    for line in _fmt_breakdown(bd):
        print(line)
    print(f"plan written to {Path(manifest.out) / 'plan.json'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    manifest = _manifest(args)
    model, devices, network = manifest.configs()
    cfg = _sim_config(args, network)
    if manifest.plan:
        plan = _load_plan(manifest.plan)
    else:
        plan = offline.plan(model, devices, network, empirical_n=args.empirical_n)
    tl = simulate(plan, model, devices, network, cfg)
    validate_timeline(tl, plan, devices)
    files = {
        "timeline.csv": export_timeline(tl, "csv"),
        "metrics.json": dumps(metrics_from_timeline(tl, cfg.pattern, _config_record(cfg))),
    }
    if args.format == "text":
        files["timeline.json"] = export_timeline(tl, "json")
    elif args.format == "svg":
        files["timeline.svg"] = export_timeline(tl, "svg")
    base = None
    if args.baseline == "traditional":
        totals, offl = baseline_counts_from_plan(plan)
        base = simulate_traditional_baseline(model, devices, network, cfg, totals, offl)
        validate_timeline(base, None, devices)
        files["baseline_timeline.csv"] = export_timeline(base, "csv")
        files["baseline_metrics.json"] = dumps(metrics_from_timeline(base, cfg.pattern, _config_record(cfg)))
        if args.format == "svg":
            files["baseline_timeline.svg"] = export_timeline(base, "svg")
    _write(Path(manifest.out), files)
    bd = tl.breakdown()
    print(f"micro_batches={tl.micro_batches}")
    print(f"per_token_mean={bd['per_token_mean']:.9g}")
    print(f"per_token_max={bd['per_token_max']:.9g}")
    print("peak_memory=" + ",".join(str(p) for p in tl.peak_memory))
    for t in tl.triggers:
        print(f"trigger device={t['device']} token={t['token']} alpha={t['alpha']} beta={t['beta']}")
    if base is not None:
        print(f"baseline_per_token_mean={base.breakdown()['per_token_mean']:.9g}")
    print(f"outputs written to {manifest.out}")
    return EXIT_OK


def _check_one(model, devices, network, limits) -> tuple[bool, str]:
    plan = offline.plan(model, devices, network)
    profile = CostProfile(model, devices)
    bw = network.base_bandwidth_bps
    got = total_latency(plan, profile, bw).t_total
    oracle = offline.brute_force_plan(model, devices, network, limits=limits)
    want = total_latency(oracle, profile, bw).t_total
    tl = simulate(plan, model, devices, NetworkSpec(bw), SimConfig(output_tokens=1))
    validate_timeline(tl, plan, devices)
    delta = abs(tl.steady_latency - got)
    ok = abs(got - want) <= CHECK_TOLERANCE and delta < CHECK_TOLERANCE
    line = (f"plan==oracle: {got:.6g} s {'==' if abs(got - want) <= CHECK_TOLERANCE else '!='} "
            f"{want:.6g} s; sim==model: delta {delta:.3g}; {'PASS' if ok else 'FAIL'}")
    return ok, line


def cmd_check(args) -> int:
    limits = offline.OracleLimits()
    results = []
    if args.instances:
        rng = random.Random(args.seed)
        done = 0
        while done < args.instances:
            inst = random_instance(rng, max_devices=limits.max_devices)
            try:
                ok, line = _check_one(inst.model, inst.devices, inst.network, limits)
            except (InfeasibleModel, LimitsExceeded):
                continue
            done += 1
            results.append((ok, f"instance {done}: {line}"))
    else:
        model, devices, network = _manifest(args).configs()
        ok, line = _check_one(model, devices, network, limits)
        results.append((ok, line))
    for _, line in results:
        print(line)
    passed = sum(ok for ok, _ in results)
    print(f"{passed}/{len(results)} PASS")
    return EXIT_OK if passed == len(results) else EXIT_MISMATCH


def _sweep_row(axis, value, model, devices, network, args) -> dict:
    row = {"axis": axis, "value": value}
    try:
        cfg = SimConfig(pattern=args.pattern, output_tokens=args.output_tokens)
        empirical_n = args.empirical_n
        if axis == "bandwidth":
            network = NetworkSpec(parse_rate(value, "bandwidth"))
        elif axis == "empirical_n":
            empirical_n = int(value)
        elif axis == "pattern":
            cfg = SimConfig(pattern=value, output_tokens=args.output_tokens)
        micro = cfg.micro_batches(len(devices))
        if axis == "segment_count":
            plan = offline.plan_for_segments(model, devices, network, int(value), empirical_n, micro)
        else:
            plan = offline.plan(model, devices, network, empirical_n=empirical_n, micro_batch=micro)
        bd = total_latency(plan, CostProfile(model, devices), network.base_bandwidth_bps)
        tl = simulate(plan, model, devices, network, cfg)
        validate_timeline(tl, plan, devices)
        stats = tl.breakdown()
        row.update({
            "num_segments": plan.num_segments,
            **bd.to_dict(),
            "sim_latency_mean": stats["per_token_mean"],
            "sim_latency_steady": stats["per_token_steady"],
            "peak_memory_fraction": max(p / c for p, c in zip(tl.peak_memory, tl.capacities)),
        })
    except (OffloadPipeError, ValueError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def cmd_sweep(args) -> int:
    from .report import sweep_csv, sweep_svg

    model, devices, network = _manifest(args).configs()
    values = [v.strip() for v in args.values.split(",") if v.strip()] if args.values else []
    rows = [_sweep_row(args.axis, v, model, devices, network, args) for v in values]
    files = {"sweep.csv": sweep_csv(rows)}
    if args.format == "svg":
        files["sweep.svg"] = sweep_svg(rows, args.axis)
    _write(Path(args.out), files)
    sys.stdout.write(files["sweep.csv"])
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common(p, need_configs=True) -> None:
    p.add_argument("--model", required=need_configs, help="model config (YAML)")
    p.add_argument("--devices", required=need_configs, help="device list (YAML)")
    p.add_argument("--network", required=need_configs, help="network config (YAML)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--empirical-n", type=int, default=512, help="typical generated length for the planner")


def _sim_flags(p) -> None:
    p.add_argument("--pattern", choices=(SPORADIC, BURSTY), default=SPORADIC)
    p.add_argument("--output-tokens", type=int, default=16)
    p.add_argument("--prompt-tokens", type=int, default=0)
    p.add_argument("--bw-trace", help="YAML list of token_index/new_bandwidth_bps entries")
    p.add_argument("--enable-online", type=_on_off, default=False, metavar="{on,off}")
    p.add_argument("--enable-kv-transfer", type=_on_off, default=False, metavar="{on,off}")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offloadpipe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="build an allocation plan")
    _common(p)
    p.add_argument("--format", choices=("text",), default="text")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate a plan token by token")
    _common(p)
    _sim_flags(p)
    p.add_argument("--plan", help="plan document; planned from the configs when omitted")
    p.add_argument("--baseline", choices=("none", "traditional"), default="none")
    p.add_argument("--format", choices=("text", "csv", "svg"), default="csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check", help="compare the planner with the exhaustive oracle")
    _common(p, need_configs=False)
    p.add_argument("--instances", type=int, default=0, help="random instances instead of the given configs")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep", help="tabulate metrics over one parameter")
    _common(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", default="", help="comma-separated values")
    p.add_argument("--pattern", choices=(SPORADIC, BURSTY), default=SPORADIC)
    p.add_argument("--output-tokens", type=int, default=4)
    p.add_argument("--format", choices=("csv", "svg"), default="csv")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleModel as exc:
        print(f"error: infeasible model: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OutOfMemoryAtRuntime as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OOM
    except ValidationFailure as exc:
        print(f"error: timeline validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except LimitsExceeded as exc:
        print(f"error: LimitsExceeded: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, SchemaVersionError, UnsupportedFormat, InfeasiblePlan, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
