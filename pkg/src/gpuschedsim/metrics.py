"""Cluster and job metrics: allocation rate, occupancy, fragmentation,
wait-time distribution, and placement-consolidation deviation.

The accumulator samples a snapshot at every simulation event plus a
fixed wall tick.  The occupancy ratio integrates the allocation-rate
step series over time, so both always agree under the same sampling.
"""
from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .cluster import MILLI, ClusterTopology, Node
from .snapshot import ResourceSnapshot
from .workload import SIZE_BUCKETS, Job, job_size_bucket


class MetricsError(ValueError):
    pass


def allocation_rate(
    snapshot: ResourceSnapshot, healthy_only: bool = False
) -> float:
    """Fraction of cluster GPU capacity currently allocated.

    ``healthy_only`` shrinks the denominator to healthy devices;
    otherwise broken devices still count as capacity.
    """
    topo = snapshot.topology
    total = _healthy_total(topo) if healthy_only else topo.total_milli
    if total == 0:
        return 0.0
    return snapshot.allocated_total_milli / total


def fragmented_node_rate(snapshot: ResourceSnapshot) -> float:
    """Fraction of nodes partially occupied: allocated but with some
    healthy device still completely free."""
    count = len(snapshot.topology.nodes)
    if count == 0:
        return 0.0
    return snapshot.fragmented_nodes / count


def fragmentation_degree(node: Node, snapshot: ResourceSnapshot) -> float:
    """Free share of a fragmented node: (capacity - allocated) / capacity
    in devices, where a device counts as allocated once it holds any
    share.  Raises MetricsError on nodes that are not fragmented.
    """
    state = snapshot.node_state(node.node_id)
    healthy = [d for d in node.devices if d.healthy]
    occupied = sum(1 for d in healthy if state.device_used_milli(d.device_id) > 0)
    if not healthy or occupied == 0 or occupied >= len(healthy):
        raise MetricsError(f"node {node.node_id} is not fragmented")
    return (len(healthy) - occupied) / len(healthy)


def _healthy_total(topology: ClusterTopology) -> int:
    return sum(len(n.healthy_devices) for n in topology.nodes.values()) * MILLI


@dataclass(frozen=True)
class DeviationRecord:
    """How far one gang placement strayed from the consolidation optimum."""

    job_id: str
    nodes_used: int
    nodes_min: int
    groups_used: int
    groups_min: int

    @property
    def node_ratio(self) -> float:
        return self.nodes_used / self.nodes_min

    @property
    def group_ratio(self) -> float:
        return self.groups_used / self.groups_min


def consolidation_optimum(job: Job, topology: ClusterTopology) -> tuple[int, int]:
    """Fewest nodes, then fewest groups, that could ever host the job:
    nodes from the ceiling of demand over the largest node of each
    type, groups from the ceiling of that node count over the largest
    group, so a job that fits one group has a group optimum of 1."""
    nodes_min = 0
    groups_min = 0
    for gpu_type, milli in job.demand_by_type().items():
        pool = [topology.nodes[n] for n in topology.pool_nodes(gpu_type)]
        if not pool:
            raise MetricsError(f"no nodes of type {gpu_type!r}")
        node_cap = max(n.capacity_milli for n in pool)
        group_size = max(
            sum(1 for m in g.node_ids if topology.nodes[m].gpu_type == gpu_type)
            for g in topology.groups.values()
        )
        n_min = math.ceil(milli / node_cap)
        nodes_min += n_min
        if group_size:
            groups_min += math.ceil(n_min / group_size)
    return max(nodes_min, 1), max(groups_min, 1)


def _p95(values: list[float]) -> float:
    ordered = sorted(values)
    idx = math.ceil(0.95 * len(ordered)) - 1
    return ordered[idx]


class MetricsAccumulator:
    """Collects time series and distributions over one simulation run."""

    def __init__(self, topology: ClusterTopology, healthy_only: bool = False):
        self.topology = topology
        self.healthy_only = healthy_only
        self.alloc_series: list[tuple[float, float]] = []
        self.frag_series: list[tuple[float, float]] = []
        self.waits: dict[str, list[float]] = {b: [] for b in SIZE_BUCKETS}
        self.deviations: list[DeviationRecord] = []
        self._occupancy_integral = 0.0
        self._frag_integral = 0.0
        self._last_time: Optional[float] = None
        self._last_alloc_milli = 0
        self._last_frag = 0.0
        self._total = (
            _healthy_total(topology) if healthy_only else topology.total_milli
        )

    def sample(
        self,
        time: float,
        snapshot: ResourceSnapshot,
        excluded_milli: int = 0,
    ) -> None:
        """Record one observation; must be called with nondecreasing time.

        ``excluded_milli`` removes capacity held by gangs that are not
        fully scheduled from the occupancy accrual.
        """
        if self._last_time is not None:
            if time < self._last_time:
                raise MetricsError("samples must not go back in time")
            dt = time - self._last_time
            self._occupancy_integral += self._last_alloc_milli * dt
            self._frag_integral += self._last_frag * dt
        self._last_time = time
        self._last_alloc_milli = max(snapshot.allocated_total_milli - excluded_milli, 0)
        rate = (
            snapshot.allocated_total_milli / self._total if self._total else 0.0
        )
        frag = fragmented_node_rate(snapshot)
        self._last_frag = frag
        for series, value in ((self.alloc_series, rate), (self.frag_series, frag)):
            if series and series[-1][0] == time:
                series[-1] = (time, value)
            else:
                series.append((time, value))

    def record_wait(
        self, job: Job, dispatch_time: float, since: Optional[float] = None
    ) -> None:
        start = job.submit_time if since is None else since
        wait = dispatch_time - start
        if wait < 0:
            raise MetricsError(f"job {job.job_id} dispatched before submit")
        self.waits[job_size_bucket(job)].append(wait)

    def record_consolidation(
        self, job: Job, nodes_used: int, groups_used: int
    ) -> None:
        """Track gang placement deviation from the capacity optimum."""
        if not job.gang:
            return
        nodes_min, groups_min = consolidation_optimum(job, self.topology)
        self.deviations.append(
            DeviationRecord(
                job_id=job.job_id,
                nodes_used=nodes_used,
                nodes_min=nodes_min,
                groups_used=groups_used,
                groups_min=groups_min,
            )
        )

    def occupancy(self, horizon: float) -> float:
        """Time-averaged allocation over the horizon, accrued from each
        allocation commit to its release."""
        if horizon <= 0 or self._total == 0:
            return 0.0
        return self._occupancy_integral / (self._total * horizon)

    def time_avg_fragmentation(self, horizon: float) -> float:
        if horizon <= 0:
            return 0.0
        return self._frag_integral / horizon

    def wait_summary(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for bucket in SIZE_BUCKETS:
            values = self.waits[bucket]
            if not values:
                continue
            out[bucket] = {
                "count": len(values),
                "mean": statistics.fmean(values),
                "median": statistics.median(values),
                "p95": _p95(values),
            }
        return out

    def consolidation_summary(self) -> dict[str, float]:
        if not self.deviations:
            return {"count": 0}
        return {
            "count": len(self.deviations),
            "node_ratio_mean": statistics.fmean(d.node_ratio for d in self.deviations),
            "node_ratio_max": max(d.node_ratio for d in self.deviations),
            "group_ratio_mean": statistics.fmean(d.group_ratio for d in self.deviations),
            "group_ratio_max": max(d.group_ratio for d in self.deviations),
        }

    def report(self, horizon: float, counters: Optional[dict] = None) -> dict:
        alloc_values = [v for _, v in self.alloc_series]
        frag_values = [v for _, v in self.frag_series]
        return {
            "horizon": horizon,
            "occupancy": self.occupancy(horizon),
            "allocation_rate": {
                "mean": statistics.fmean(alloc_values) if alloc_values else 0.0,
                "max": max(alloc_values, default=0.0),
                "final": alloc_values[-1] if alloc_values else 0.0,
            },
            "fragmented_node_rate": {
                "mean": statistics.fmean(frag_values) if frag_values else 0.0,
                "max": max(frag_values, default=0.0),
                "final": frag_values[-1] if frag_values else 0.0,
                "time_avg": self.time_avg_fragmentation(horizon),
            },
            "wait": self.wait_summary(),
            "consolidation": self.consolidation_summary(),
            "counters": dict(counters or {}),
        }

    def write_report(
        self, out_dir: str | Path, horizon: float, counters: Optional[dict] = None
    ) -> dict:
        """Write metrics.json plus CSV series and return the summary."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = self.report(horizon, counters)
        with open(out / "metrics.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for name, series in (
            ("allocation_rate.csv", self.alloc_series),
            ("fragmented_node_rate.csv", self.frag_series),
        ):
            with open(out / name, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["time", "value"])
                writer.writerows((f"{t:.6f}", f"{v:.9f}") for t, v in series)
        with open(out / "wait_buckets.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bucket", "count", "mean", "median", "p95"])
            for bucket, stats in self.wait_summary().items():
                writer.writerow([
                    bucket,
                    stats["count"],
                    f"{stats['mean']:.6f}",
                    f"{stats['median']:.6f}",
                    f"{stats['p95']:.6f}",
                ])
        with open(out / "consolidation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "job_id", "nodes_used", "nodes_min", "node_ratio",
                "groups_used", "groups_min", "group_ratio",
            ])
            for d in self.deviations:
                writer.writerow([
                    d.job_id, d.nodes_used, d.nodes_min, f"{d.node_ratio:.6f}",
                    d.groups_used, d.groups_min, f"{d.group_ratio:.6f}",
                ])
        return summary
