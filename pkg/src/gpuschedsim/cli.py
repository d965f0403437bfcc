"""Command-line entry points: generate, simulate, compare, report.

Every run writes a manifest holding the exact config and input file
digests, so rerunning from the manifest reproduces the outputs byte
for byte.  All flags can instead come from a JSON config file; a flag
given on the command line wins over the file value.  Data goes to
files only; diagnostics go to stderr.  Exit codes: 0 ok, 1 usage
error, 2 bad input, 3 internal failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional

from .cluster import TopologyError, load_topology, load_topology_file
from .engine import SimConfig, Simulation
from .metrics import MetricsError
from .placement import PLACEMENT_POLICIES, PlacementError
from .presets import PRESET_NAMES, PresetError, get_preset
from .queueing import QUEUE_POLICIES, QueueingError
from .snapshot import SnapshotError
from .workload import (
    GeneratorParams,
    TenantQuota,
    TraceError,
    generate_trace,
    load_quotas_file,
    parse_trace_file,
    write_trace_file,
)

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_INTERNAL = 3

_INPUT_ERRORS = (
    TraceError,
    TopologyError,
    PresetError,
    QueueingError,
    PlacementError,
    SnapshotError,
    MetricsError,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    json.JSONDecodeError,
)


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that raises instead of exiting, so main() owns
    the exit code mapping."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _merge_config_file(args: argparse.Namespace, keys: list[str]) -> None:
    """Fill unset flags from the JSON config file; flags already given
    on the command line keep their values."""
    if not getattr(args, "config", None):
        return
    data = _load_json(args.config)
    unknown = set(data) - set(keys)
    if unknown:
        raise InputError(
            f"config file {args.config}: unknown keys {sorted(unknown)}"
        )
    for key in keys:
        if key in data and getattr(args, key, None) is None:
            setattr(args, key, data[key])


def _norm_choice(value: str, valid: tuple, what: str) -> str:
    got = value.replace("-", "_")
    if got not in valid:
        pretty = ", ".join(v.replace("_", "-") for v in valid)
        raise UsageError(f"unknown {what} {value!r}; valid values: {pretty}")
    return got


# -- generate ----------------------------------------------------------------

_GENERATE_KEYS = [
    "preset", "jobs", "seed", "tenants", "arrival_rate", "max_size",
    "pods_gpus", "hbd_fraction",
]


def _cmd_generate(args: argparse.Namespace) -> int:
    _merge_config_file(args, _GENERATE_KEYS)
    if args.preset:
        params = get_preset(args.preset).params
    else:
        params = GeneratorParams()
    if args.seed is None and params.seed == 0 and not args.preset:
        print("warning: no seed given, using seed 0", file=sys.stderr)
    if args.jobs is not None:
        params.job_count = int(args.jobs)
    if args.seed is not None:
        params.seed = int(args.seed)
    if args.tenants is not None:
        params.tenant_count = int(args.tenants)
    if args.arrival_rate is not None:
        params.arrival_rate = float(args.arrival_rate)
    if args.max_size is not None:
        params.max_size = int(args.max_size)
    if args.pods_gpus is not None:
        params.pods_gpus = int(args.pods_gpus)
    if args.hbd_fraction is not None:
        params.hbd_fraction = float(args.hbd_fraction)

    trace = generate_trace(params)
    out = Path(args.output)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_trace_file(trace, str(out))
    manifest = {
        "tool": "gpuschedsim",
        "version": __version__,
        "command": "generate",
        "preset": args.preset,
        "params": dataclasses.asdict(params),
        "outputs": {
            out.name: _sha256(out),
            out.name + ".meta.json": _sha256(Path(str(out) + ".meta.json")),
        },
    }
    _write_json(Path(str(out) + ".manifest.json"), manifest)
    print(f"wrote {len(trace.jobs)} jobs to {out}", file=sys.stderr)
    return EXIT_OK


# -- simulate -----------------------------------------------------------------

_SIM_FLAG_KEYS = [
    "preset", "trace", "topology", "quotas",
    "queue", "placement", "cycle_period", "backfill_timeout", "horizon",
    "preemption", "victim_exempt_cycles", "startup_latency",
    "preemption_overhead", "metrics_tick", "snapshot_mode", "merge",
    "requeue_limit", "max_cycles", "topology_aware", "requeue_resets_wait",
    "healthy_only_metrics",
]

# SimConfig fields settable from the command line, in manifest order
_CONFIG_FIELDS = [
    "cycle_period", "queue_policy", "placement_policy", "policy_by_kind",
    "topology_aware", "backfill_timeout", "preemption",
    "victim_exempt_cycles", "startup_latency", "preemption_overhead",
    "horizon", "requeue_resets_wait", "metrics_tick", "healthy_only_metrics",
    "snapshot_mode", "merge", "requeue_limit", "max_cycles",
]


def _build_sim_config(args: argparse.Namespace, base: Optional[SimConfig]) -> SimConfig:
    config = base or SimConfig()
    if args.queue is not None:
        config.queue_policy = _norm_choice(args.queue, QUEUE_POLICIES, "queue policy")
    if args.placement is not None:
        config.placement_policy = _norm_choice(
            args.placement, PLACEMENT_POLICIES, "placement policy"
        )
    for flag, fieldname, cast in (
        ("cycle_period", "cycle_period", float),
        ("backfill_timeout", "backfill_timeout", float),
        ("horizon", "horizon", float),
        ("victim_exempt_cycles", "victim_exempt_cycles", int),
        ("startup_latency", "startup_latency", float),
        ("preemption_overhead", "preemption_overhead", float),
        ("metrics_tick", "metrics_tick", float),
        ("requeue_limit", "requeue_limit", int),
        ("max_cycles", "max_cycles", int),
    ):
        value = getattr(args, flag)
        if value is not None:
            setattr(config, fieldname, cast(value))
    for flag, fieldname in (
        ("preemption", "preemption"),
        ("topology_aware", "topology_aware"),
        ("requeue_resets_wait", "requeue_resets_wait"),
        ("healthy_only_metrics", "healthy_only_metrics"),
    ):
        value = getattr(args, flag)
        if value is not None:
            setattr(config, fieldname, bool(value))
    if args.snapshot_mode is not None:
        if args.snapshot_mode not in ("incremental", "rebuild"):
            raise UsageError(
                f"unknown snapshot mode {args.snapshot_mode!r}; "
                "valid values: incremental, rebuild"
            )
        config.snapshot_mode = args.snapshot_mode
    if args.merge is not None:
        config.merge = _norm_choice(args.merge, ("ordered", "round_robin"), "merge mode")
    return config


def _config_to_manifest(config: SimConfig) -> dict:
    return {name: getattr(config, name) for name in _CONFIG_FIELDS}


def _config_from_manifest(data: dict) -> SimConfig:
    unknown = set(data) - set(_CONFIG_FIELDS)
    if unknown:
        raise InputError(f"manifest config has unknown keys {sorted(unknown)}")
    return SimConfig(**data)


def _digest_entry(path: str) -> dict:
    return {"path": path, "sha256": _sha256(Path(path))}


def _check_digest(entry: dict, what: str) -> None:
    actual = _sha256(Path(entry["path"]))
    if actual != entry["sha256"]:
        raise InputError(
            f"{what} file {entry['path']} does not match the manifest digest"
        )


def _cmd_simulate(args: argparse.Namespace) -> int:
    base_config: Optional[SimConfig] = None
    quotas: Optional[dict[str, TenantQuota]] = None
    inputs: dict[str, Optional[dict]] = {}

    if args.from_manifest:
        manifest = _load_json(args.from_manifest)
        if manifest.get("command") != "simulate":
            raise InputError(f"{args.from_manifest} is not a simulate manifest")
        if not isinstance(manifest.get("config"), dict):
            raise InputError(f"{args.from_manifest} has no config section")
        base_config = _config_from_manifest(manifest["config"])
        for key in ("trace", "topology", "quotas"):
            entry = manifest.get("inputs", {}).get(key)
            if entry and getattr(args, key, None) is None:
                _check_digest(entry, key)
                setattr(args, key, entry["path"])
        if manifest.get("preset") and args.preset is None:
            args.preset = manifest["preset"]

    _merge_config_file(args, _SIM_FLAG_KEYS)

    preset = get_preset(args.preset) if args.preset else None
    if preset is not None and base_config is None:
        base_config = preset.sim_config()

    if args.trace is None:
        raise UsageError("a trace is required (--trace or --from-manifest)")
    trace = parse_trace_file(args.trace)
    inputs["trace"] = _digest_entry(args.trace)

    if args.topology:
        topology = load_topology_file(args.topology)
        inputs["topology"] = _digest_entry(args.topology)
    elif preset is not None:
        topology = preset.topology()
        inputs["topology"] = None
    else:
        raise UsageError("a topology is required (--topology or --preset)")

    if args.quotas:
        quotas = load_quotas_file(args.quotas)
        inputs["quotas"] = _digest_entry(args.quotas)
    elif preset is not None:
        quotas = preset.quotas()
        inputs["quotas"] = None
    else:
        inputs["quotas"] = None

    config = _build_sim_config(args, base_config)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    events_path = out_dir / "events.jsonl"
    with open(events_path, "w", encoding="utf-8", newline="\n") as log:
        sim = Simulation(trace, topology, quotas, config, event_log=log)
        result = sim.run()
    result.metrics.write_report(out_dir, result.end_time, result.counters)
    _write_stats(out_dir / "stats.csv", result)

    output_names = [
        "events.jsonl", "metrics.json", "allocation_rate.csv",
        "fragmented_node_rate.csv", "wait_buckets.csv", "consolidation.csv",
        "stats.csv",
    ]
    manifest = {
        "tool": "gpuschedsim",
        "version": __version__,
        "command": "simulate",
        "preset": args.preset,
        "config": _config_to_manifest(config),
        "inputs": inputs,
        "outputs": {name: _sha256(out_dir / name) for name in output_names},
    }
    _write_json(out_dir / "manifest.json", manifest)
    print(
        f"simulated {len(trace.jobs)} jobs over {result.end_time:.0f}s "
        f"({result.cycles} cycles) into {out_dir}",
        file=sys.stderr,
    )
    return EXIT_OK


def _write_stats(path: Path, result) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "job_id", "submit_time", "first_dispatch", "wait", "first_start",
            "finish_time", "state", "preemptions", "backfilled",
            "nodes_used", "groups_used",
        ])
        def fmt(v):
            return "" if v is None else f"{v:.6f}"
        for job_id in sorted(result.stats):
            st = result.stats[job_id]
            writer.writerow([
                st.job_id, fmt(st.submit_time), fmt(st.first_dispatch),
                fmt(st.wait), fmt(st.first_start), fmt(st.finish_time),
                st.state, st.preemptions, int(st.backfilled),
                st.nodes_used, st.groups_used,
            ])


# -- compare ------------------------------------------------------------------

def _delta(a: float, b: float) -> dict:
    out = {"a": a, "b": b, "absolute": b - a}
    out["relative"] = (b - a) / a if a else None
    return out


def _cmd_compare(args: argparse.Namespace) -> int:
    runs = []
    for run_dir in (args.run_a, args.run_b):
        base = Path(run_dir)
        manifest = _load_json(str(base / "manifest.json"))
        metrics = _load_json(str(base / "metrics.json"))
        runs.append((manifest, metrics))
    (man_a, met_a), (man_b, met_b) = runs

    for key in ("trace", "topology", "quotas"):
        da = (man_a.get("inputs", {}).get(key) or {}).get("sha256")
        db = (man_b.get("inputs", {}).get(key) or {}).get("sha256")
        pa, pb = man_a.get("preset"), man_b.get("preset")
        if da != db or (da is None and pa != pb):
            raise InputError(
                f"runs disagree on their {key} input; comparison is meaningless"
            )

    try:
        return _emit_compare(args, met_a, met_b)
    except KeyError as exc:
        raise InputError(f"metrics file is missing field {exc}") from exc


def _emit_compare(args: argparse.Namespace, met_a: dict, met_b: dict) -> int:
    deltas: dict = {
        "occupancy": _delta(met_a["occupancy"], met_b["occupancy"]),
        "allocation_rate": {
            k: _delta(met_a["allocation_rate"][k], met_b["allocation_rate"][k])
            for k in met_a["allocation_rate"]
        },
        "fragmented_node_rate": {
            k: _delta(
                met_a["fragmented_node_rate"][k], met_b["fragmented_node_rate"][k]
            )
            for k in met_a["fragmented_node_rate"]
            if k in met_b["fragmented_node_rate"]
        },
        "wait": {},
        "consolidation": {},
    }
    for bucket in set(met_a["wait"]) & set(met_b["wait"]):
        deltas["wait"][bucket] = {
            stat: _delta(met_a["wait"][bucket][stat], met_b["wait"][bucket][stat])
            for stat in ("mean", "median", "p95")
        }
    for key in set(met_a["consolidation"]) & set(met_b["consolidation"]):
        if key == "count":
            continue
        deltas["consolidation"][key] = _delta(
            met_a["consolidation"][key], met_b["consolidation"][key]
        )
    payload = {
        "tool": "gpuschedsim",
        "version": __version__,
        "command": "compare",
        "run_a": str(args.run_a),
        "run_b": str(args.run_b),
        "deltas": deltas,
    }
    _write_json(Path(args.output), payload)
    print(f"wrote comparison to {args.output}", file=sys.stderr)
    return EXIT_OK


# -- report -------------------------------------------------------------------

def _cmd_report(args: argparse.Namespace) -> int:
    base = Path(args.run)
    metrics = _load_json(str(base / "metrics.json"))
    try:
        return _emit_report(args, metrics)
    except KeyError as exc:
        raise InputError(f"metrics file is missing field {exc}") from exc


def _emit_report(args: argparse.Namespace, metrics: dict) -> int:
    flat: dict = {
        "occupancy": metrics["occupancy"],
        "allocation_rate_mean": metrics["allocation_rate"]["mean"],
        "allocation_rate_final": metrics["allocation_rate"]["final"],
        "fragmented_node_rate_mean": metrics["fragmented_node_rate"]["mean"],
        "fragmented_node_rate_time_avg": metrics["fragmented_node_rate"]["time_avg"],
        "horizon": metrics["horizon"],
    }
    for bucket, stats in metrics["wait"].items():
        flat[f"wait_mean[{bucket}]"] = stats["mean"]
        flat[f"wait_p95[{bucket}]"] = stats["p95"]
    for key, value in metrics["consolidation"].items():
        flat[f"consolidation_{key}"] = value
    for key, value in metrics.get("counters", {}).items():
        flat[f"count_{key}"] = value
    _write_json(Path(args.output), flat)
    print(f"wrote report summary to {args.output}", file=sys.stderr)
    return EXIT_OK


# -- wiring -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gpuschedsim", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic trace")
    gen.add_argument("--preset", choices=PRESET_NAMES)
    gen.add_argument("--jobs", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--tenants", type=int)
    gen.add_argument("--arrival-rate", dest="arrival_rate", type=float)
    gen.add_argument("--max-size", dest="max_size", type=int)
    gen.add_argument("--pods-gpus", dest="pods_gpus", type=int)
    gen.add_argument("--hbd-fraction", dest="hbd_fraction", type=float)
    gen.add_argument("--config", help="JSON file with flag defaults")
    gen.add_argument("-o", "--output", required=True)
    gen.set_defaults(func=_cmd_generate)

    simp = sub.add_parser("simulate", help="run one simulation")
    simp.add_argument("--trace")
    simp.add_argument("--topology")
    simp.add_argument("--quotas")
    simp.add_argument("--preset", choices=PRESET_NAMES)
    simp.add_argument("--from-manifest", dest="from_manifest")
    simp.add_argument("--queue")
    simp.add_argument("--placement")
    simp.add_argument("--cycle-period", dest="cycle_period", type=float)
    simp.add_argument("--backfill-timeout", dest="backfill_timeout", type=float)
    simp.add_argument("--horizon", type=float)
    simp.add_argument(
        "--preemption", action=argparse.BooleanOptionalAction, default=None
    )
    simp.add_argument(
        "--topology-aware", dest="topology_aware",
        action=argparse.BooleanOptionalAction, default=None,
    )
    simp.add_argument(
        "--requeue-resets-wait", dest="requeue_resets_wait",
        action=argparse.BooleanOptionalAction, default=None,
    )
    simp.add_argument(
        "--healthy-only-metrics", dest="healthy_only_metrics",
        action=argparse.BooleanOptionalAction, default=None,
    )
    simp.add_argument("--victim-exempt-cycles", dest="victim_exempt_cycles", type=int)
    simp.add_argument("--startup-latency", dest="startup_latency", type=float)
    simp.add_argument("--preemption-overhead", dest="preemption_overhead", type=float)
    simp.add_argument("--metrics-tick", dest="metrics_tick", type=float)
    simp.add_argument("--snapshot-mode", dest="snapshot_mode")
    simp.add_argument("--merge")
    simp.add_argument("--requeue-limit", dest="requeue_limit", type=int)
    simp.add_argument("--max-cycles", dest="max_cycles", type=int)
    simp.add_argument("--config", help="JSON file with flag defaults")
    simp.add_argument("-o", "--out-dir", dest="out_dir", required=True)
    simp.set_defaults(func=_cmd_simulate)

    cmp_ = sub.add_parser("compare", help="diff two run directories")
    cmp_.add_argument("run_a")
    cmp_.add_argument("run_b")
    cmp_.add_argument("-o", "--output", required=True)
    cmp_.set_defaults(func=_cmd_compare)

    rep = sub.add_parser("report", help="flatten one run's metrics")
    rep.add_argument("--run", required=True)
    rep.add_argument("-o", "--output", required=True)
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # argparse --help / --version
        code = exc.code if isinstance(exc.code, int) else EXIT_OK
        return code
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
