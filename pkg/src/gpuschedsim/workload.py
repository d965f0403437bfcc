"""Job and tenant model, trace files and the synthetic trace generator.

Traces are line-delimited JSON, one job per line, with field names
matching :class:`Job` (schema version 1).  The generator is fully
deterministic for a given seed and parameter set.
"""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Optional, Union

from .cluster import MILLI

log = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1

PRIORITY_DEBUG = 0
PRIORITY_TRAINING = 1
PRIORITY_INFERENCE = 2

SIZE_BUCKETS = ("1-7", "8-63", "64-255", "256-1023", "1024-2047", ">=2048")


class TraceError(ValueError):
    """Raised on malformed trace records or infeasible generator params."""


@dataclass(frozen=True)
class PodSpec:
    """One pod's demand: a GPU type and a milli-GPU amount.

    Whole GPUs are multiples of 1000 milli; a pod never spans a
    fraction of more than one device.
    """

    gpu_type: str
    gpus_milli: int

    @property
    def gpus(self) -> float:
        return self.gpus_milli / MILLI


@dataclass
class Job:
    """A unit of work submitted by a tenant.

    ``kind`` is ``"gang"`` (all pods start together or not at all) or
    ``"non_gang"`` (pods are placed independently).
    """

    job_id: str
    tenant_id: str
    priority: int
    kind: str
    pod_specs: tuple[PodSpec, ...]
    submit_time: float
    duration: float
    needs_hbd: bool = False
    state: str = "pending"

    @property
    def gang(self) -> bool:
        return self.kind == "gang"

    @property
    def total_milli(self) -> int:
        return sum(p.gpus_milli for p in self.pod_specs)

    @property
    def total_gpus(self) -> float:
        return self.total_milli / MILLI

    def demand_by_type(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.pod_specs:
            out[p.gpu_type] = out.get(p.gpu_type, 0) + p.gpus_milli
        return out


def job_size_bucket(total_gpus: Union[Job, float]) -> str:
    """Bucket a job (or raw GPU demand) by total size.

    Every positive demand maps to exactly one bucket; the first bucket
    absorbs fractional demands below one GPU.
    """
    if isinstance(total_gpus, Job):
        total_gpus = total_gpus.total_gpus
    if total_gpus <= 0:
        raise ValueError("job size must be positive")
    if total_gpus < 8:
        return "1-7"
    if total_gpus < 64:
        return "8-63"
    if total_gpus < 256:
        return "64-255"
    if total_gpus < 1024:
        return "256-1023"
    if total_gpus < 2048:
        return "1024-2047"
    return ">=2048"


@dataclass
class TenantQuota:
    """Per-tenant quota and its live usage ledgers (all in milli-GPUs).

    ``mode`` is ``"shared"`` (may lend unused quota and borrow from
    other shared tenants) or ``"isolated"`` (strictly limited to its
    own quota, neither lends nor borrows).
    """

    tenant_id: str
    mode: str
    quota: dict[str, int]
    used: dict[str, int] = field(default_factory=dict)
    lent_out: dict[str, int] = field(default_factory=dict)
    borrowed_in: dict[str, int] = field(default_factory=dict)

    def own_headroom(self, gpu_type: str) -> int:
        return (
            self.quota.get(gpu_type, 0)
            - self.used.get(gpu_type, 0)
            - self.lent_out.get(gpu_type, 0)
        )


def load_quotas(config: Union[dict, list]) -> dict[str, TenantQuota]:
    """Parse a quota config: per-tenant records with ``tenant_id``,
    ``mode`` and ``quotas`` (gpu_type -> whole-GPU count)."""
    records = config.get("tenants", []) if isinstance(config, dict) else config
    out: dict[str, TenantQuota] = {}
    for rec in records:
        tid = str(rec["tenant_id"])
        if tid in out:
            raise TraceError(f"duplicate tenant {tid!r} in quota config")
        mode = rec.get("mode", "shared")
        if mode not in ("shared", "isolated"):
            raise TraceError(f"tenant {tid!r}: unknown quota mode {mode!r}")
        quota = {str(t): int(round(float(c) * MILLI)) for t, c in rec["quotas"].items()}
        if any(v < 0 for v in quota.values()):
            raise TraceError(f"tenant {tid!r}: negative quota")
        out[tid] = TenantQuota(tenant_id=tid, mode=mode, quota=quota)
    return out


def load_quotas_file(path: str) -> dict[str, TenantQuota]:
    with open(path, "r", encoding="utf-8") as fh:
        return load_quotas(json.load(fh))


@dataclass
class Trace:
    jobs: list[Job]
    metadata: dict = field(default_factory=dict)


# -- trace files ---------------------------------------------------------

def _job_to_record(job: Job) -> dict:
    # consecutive identical pod specs compact into one entry with a count
    specs: list[dict] = []
    for p in job.pod_specs:
        if (
            specs
            and specs[-1]["gpu_type"] == p.gpu_type
            and specs[-1]["gpus_per_pod"] == p.gpus
        ):
            specs[-1]["count"] += 1
        else:
            specs.append({"gpu_type": p.gpu_type, "gpus_per_pod": p.gpus, "count": 1})
    return {
        "job_id": job.job_id,
        "tenant_id": job.tenant_id,
        "priority": job.priority,
        "kind": job.kind,
        "pod_specs": specs,
        "submit_time": job.submit_time,
        "duration": job.duration,
        "needs_hbd": job.needs_hbd,
    }


def _record_to_job(rec: dict, line_no: int) -> Job:
    try:
        specs: list[PodSpec] = []
        for entry in rec["pod_specs"]:
            gpus = float(entry["gpus_per_pod"])
            milli = int(round(gpus * MILLI))
            if milli <= 0 or abs(gpus * MILLI - milli) > 1e-6:
                raise TraceError(
                    f"line {line_no}: gpus_per_pod must be a positive multiple of 0.001"
                )
            count = int(entry.get("count", 1))
            if count <= 0:
                raise TraceError(f"line {line_no}: pod count must be positive")
            specs.extend([PodSpec(str(entry["gpu_type"]), milli)] * count)
        kind = str(rec["kind"])
        if kind not in ("gang", "non_gang"):
            raise TraceError(f"line {line_no}: unknown job kind {kind!r}")
        duration = float(rec["duration"])
        job = Job(
            job_id=str(rec["job_id"]),
            tenant_id=str(rec["tenant_id"]),
            priority=int(rec["priority"]),
            kind=kind,
            pod_specs=tuple(specs),
            submit_time=float(rec["submit_time"]),
            duration=duration,
            needs_hbd=bool(rec.get("needs_hbd", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, TraceError):
            raise
        raise TraceError(f"line {line_no}: malformed job record ({exc})") from exc
    if duration <= 0:
        raise TraceError(f"job {job.job_id}: duration must be positive, got {duration}")
    if not specs:
        raise TraceError(f"job {job.job_id}: no pods")
    return job


def write_trace(trace: Trace, stream: IO[str]) -> None:
    for job in trace.jobs:
        stream.write(json.dumps(_job_to_record(job), sort_keys=True))
        stream.write("\n")


def write_trace_file(trace: Trace, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_trace(trace, fh)
    meta = dict(trace.metadata)
    meta["schema_version"] = TRACE_SCHEMA_VERSION
    with open(path + ".meta.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def parse_trace(stream: Union[IO[str], Iterable[str]], metadata: Optional[dict] = None) -> Trace:
    """Parse a line-delimited trace into a Trace sorted by submit time.

    Out-of-order records are accepted with a warning.  Malformed
    records, unknown fields of the wrong type or non-positive durations
    raise TraceError naming the offending line or job.
    """
    jobs: list[Job] = []
    seen: set[str] = set()
    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"line {line_no}: invalid JSON ({exc})") from exc
        job = _record_to_job(rec, line_no)
        if job.job_id in seen:
            raise TraceError(f"duplicate job id {job.job_id!r}")
        seen.add(job.job_id)
        jobs.append(job)
    if any(a.submit_time > b.submit_time for a, b in zip(jobs, jobs[1:])):
        log.warning("trace records out of submit-time order; sorting")
        jobs.sort(key=lambda j: (j.submit_time, j.job_id))
    return Trace(jobs=jobs, metadata=dict(metadata or {}))


def parse_trace_file(path: str) -> Trace:
    metadata = {}
    try:
        with open(path + ".meta.json", "r", encoding="utf-8") as fh:
            metadata = json.load(fh)
    except FileNotFoundError:
        pass
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace(fh, metadata)


# -- synthetic generation -------------------------------------------------

# Job-size mixture: counts are dominated by jobs below 8 GPUs while jobs
# of 256+ GPUs get long durations and dominate consumed GPU-time.
DEFAULT_SIZE_WEIGHTS: dict[int, float] = {
    1: 0.45, 2: 0.25, 4: 0.22,
    8: 0.03, 16: 0.01, 32: 0.005, 64: 0.005, 128: 0.005,
    256: 0.012, 512: 0.008, 1024: 0.004, 2048: 0.001,
}

DEFAULT_DURATION_MEANS = {"small": 600.0, "mid": 2400.0, "large": 7200.0}

DEFAULT_TASK_MIX_SMALL = {"inference": 0.5, "training": 0.3, "debug": 0.2}


@dataclass
class GeneratorParams:
    """Knobs for the synthetic trace generator."""

    job_count: int = 1000
    seed: int = 0
    tenant_count: int = 1
    arrival_rate: float = 0.05  # jobs per second (Poisson)
    size_weights: dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_SIZE_WEIGHTS)
    )
    duration_means: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_DURATION_MEANS)
    )
    duration_min: float = 60.0
    duration_max_factor: float = 6.0
    task_mix_small: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_TASK_MIX_SMALL)
    )
    gpu_types: dict[str, float] = field(default_factory=lambda: {"default": 1.0})
    pods_gpus: int = 8  # training jobs split into pods of this many GPUs
    hbd_fraction: float = 0.0  # fraction of >=hbd_min_size jobs marked needs_hbd
    hbd_min_size: int = 512
    max_size: Optional[int] = None  # drop mixture entries above this size
    require_shape: bool = False  # enforce the small-count/large-time shape

    def effective_size_weights(self) -> dict[int, float]:
        weights = {
            int(s): float(w)
            for s, w in self.size_weights.items()
            if self.max_size is None or int(s) <= self.max_size
        }
        return weights

    def validate(self) -> None:
        if self.job_count <= 0:
            raise TraceError("job_count must be positive")
        if self.arrival_rate <= 0:
            raise TraceError("arrival_rate must be positive")
        if self.tenant_count <= 0:
            raise TraceError("tenant_count must be positive")
        weights = self.effective_size_weights()
        if not weights or any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
            raise TraceError("size_weights must contain positive mass")
        if any(s <= 0 for s in weights):
            raise TraceError("job sizes must be positive")
        if any(m <= 0 for m in self.duration_means.values()):
            raise TraceError("duration means must be positive")
        if self.require_shape:
            total = sum(weights.values())
            small = sum(w for s, w in weights.items() if s < 8) / total
            gpu_time = {
                s: w * s * self.duration_means[_size_class(s)]
                for s, w in weights.items()
            }
            large_share = sum(v for s, v in gpu_time.items() if s >= 256) / sum(
                gpu_time.values()
            )
            if small <= 0.9:
                raise TraceError(
                    f"infeasible distribution: only {small:.2%} of jobs below 8 GPUs"
                )
            if large_share <= 0.5:
                raise TraceError(
                    "infeasible distribution: jobs of 256+ GPUs get "
                    f"{large_share:.2%} of GPU-time"
                )


def _size_class(size: int) -> str:
    if size < 8:
        return "small"
    if size < 256:
        return "mid"
    return "large"


def _pick(rng: random.Random, weighted: list[tuple[object, float]]):
    total = sum(w for _, w in weighted)
    x = rng.random() * total
    acc = 0.0
    for value, w in weighted:
        acc += w
        if x < acc:
            return value
    return weighted[-1][0]


def _pods_for(task: str, size: int, gpu_type: str, pods_gpus: int) -> tuple[PodSpec, ...]:
    if task == "inference":
        # one single-GPU replica per requested GPU
        return tuple(PodSpec(gpu_type, MILLI) for _ in range(size))
    if task == "training" and size >= pods_gpus:
        full, rem = divmod(size, pods_gpus)
        pods = [PodSpec(gpu_type, pods_gpus * MILLI)] * full
        if rem:
            pods.append(PodSpec(gpu_type, rem * MILLI))
        return tuple(pods)
    return (PodSpec(gpu_type, size * MILLI),)


def generate_trace(params: GeneratorParams) -> Trace:
    """Generate a synthetic multi-tenant trace.

    Arrivals follow a Poisson process; sizes come from a discrete
    mixture; durations are exponential with a size-class mean, clamped
    to [duration_min, mean * duration_max_factor].  Small jobs split
    into inference / training / debug task types; jobs of 8+ GPUs are
    gang training jobs in pods of ``pods_gpus`` GPUs.
    """
    params.validate()
    rng = random.Random(params.seed)
    sizes = sorted(params.effective_size_weights().items())
    type_choices = sorted(params.gpu_types.items())
    pad = len(str(params.job_count))

    jobs: list[Job] = []
    now = 0.0
    for i in range(params.job_count):
        now += rng.expovariate(params.arrival_rate)
        size = _pick(rng, sizes)
        cls = _size_class(size)
        if size < 8:
            task = _pick(rng, sorted(params.task_mix_small.items()))
        else:
            task = "training"
        gpu_type = _pick(rng, type_choices)
        mean = params.duration_means[cls]
        if task == "debug":
            mean *= 0.3
        duration = rng.expovariate(1.0 / mean)
        duration = min(max(duration, params.duration_min), mean * params.duration_max_factor)
        needs_hbd = (
            size >= params.hbd_min_size
            and params.hbd_fraction > 0
            and rng.random() < params.hbd_fraction
        )
        priority = {
            "inference": PRIORITY_INFERENCE,
            "training": PRIORITY_TRAINING,
            "debug": PRIORITY_DEBUG,
        }[task]
        kind = "gang" if task == "training" else "non_gang"
        jobs.append(
            Job(
                job_id=f"j{i:0{pad}d}",
                tenant_id=f"t{rng.randrange(params.tenant_count)}",
                priority=priority,
                kind=kind,
                pod_specs=_pods_for(task, size, gpu_type, params.pods_gpus),
                submit_time=round(now, 6),
                duration=round(duration, 6),
                needs_hbd=needs_hbd,
            )
        )
    metadata = {
        "generator": "gpuschedsim",
        "seed": params.seed,
        "job_count": params.job_count,
        "arrival_rate": params.arrival_rate,
        "tenant_count": params.tenant_count,
    }
    return Trace(jobs=jobs, metadata=metadata)
