"""Shipped preset bundles: topology, workload and run config in one name.

Each preset pairs a synthetic topology with generator parameters,
tenant quotas and simulation overrides, so an experiment is one
command.  The training preset is contended enough that queue policies
diverge; the churn preset keeps small jobs arriving and finishing fast
so placement policies diverge on fragmentation; the uncontended preset
leaves room so consolidation is never capacity-limited.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .cluster import ClusterTopology, load_topology, make_topology
from .engine import SimConfig
from .workload import GeneratorParams, TenantQuota, load_quotas


class PresetError(ValueError):
    pass


@dataclass
class Preset:
    """One named bundle of topology, workload and config."""

    name: str
    description: str
    topology_config: dict
    params: GeneratorParams
    quota_config: list = field(default_factory=list)
    sim_overrides: dict = field(default_factory=dict)

    def topology(self) -> ClusterTopology:
        return load_topology(self.topology_config)

    def quotas(self) -> Optional[dict[str, TenantQuota]]:
        if not self.quota_config:
            return None
        return load_quotas(self.quota_config)

    def sim_config(self, **overrides) -> SimConfig:
        merged = dict(self.sim_overrides)
        merged.update(overrides)
        return SimConfig(**merged)


def _paper_training() -> Preset:
    # 512 nodes of 8 GPUs; arrivals overrun capacity inside the window
    # so the queue stays deep, and sizes reach 2048 so the large wait
    # buckets are populated; the horizon covers every large dispatch
    # under all three queue policies but cuts before the common drain
    params = GeneratorParams(
        job_count=2000,
        seed=7,
        tenant_count=4,
        arrival_rate=0.07,
        size_weights={
            1: 0.45, 2: 0.25, 4: 0.22,
            8: 0.03, 16: 0.01, 32: 0.005, 64: 0.01, 128: 0.01,
            256: 0.012, 512: 0.008, 1024: 0.002, 2048: 0.003,
        },
        require_shape=True,
    )
    quotas = [
        {"tenant_id": f"t{i}", "mode": "shared", "quotas": {"default": 2048}}
        for i in range(4)
    ]
    return Preset(
        name="paper-training",
        description="contended homogeneous training cluster, 4096 GPUs",
        topology_config=make_topology(
            node_count=512,
            gpus_per_node=8,
            nodes_per_group=8,
            groups_per_spine=8,
            spines_per_superspine=4,
        ),
        params=params,
        quota_config=quotas,
        sim_overrides={
            "queue_policy": "backfill",
            "placement_policy": "e_binpack",
            "backfill_timeout": 3600.0,
            "horizon": 48000.0,
        },
    )


def _paper_inference() -> Preset:
    params = GeneratorParams(
        job_count=1500,
        seed=11,
        tenant_count=6,
        arrival_rate=0.1,
        gpu_types={"h100": 0.5, "a100": 0.5},
        max_size=64,
    )
    quotas = [
        {"tenant_id": "t0", "mode": "isolated", "quotas": {"h100": 64, "a100": 64}},
        {"tenant_id": "t1", "mode": "isolated", "quotas": {"h100": 64, "a100": 64}},
    ] + [
        {"tenant_id": f"t{i}", "mode": "shared", "quotas": {"h100": 96, "a100": 96}}
        for i in range(2, 6)
    ]
    return Preset(
        name="paper-inference",
        description="heterogeneous multi-tenant cluster with an inference zone",
        topology_config=make_topology(
            node_count=120,
            gpus_per_node=8,
            nodes_per_group=8,
            groups_per_spine=5,
            spines_per_superspine=3,
            gpu_types={"h100": 64, "a100": 56},
            inference_zone_fraction=0.25,
        ),
        params=params,
        quota_config=quotas,
        sim_overrides={
            "queue_policy": "backfill",
            "placement_policy": "e_binpack",
            "policy_by_kind": {"non_gang": "e_spread"},
        },
    )


def _tiny_training() -> Preset:
    params = GeneratorParams(
        job_count=100,
        seed=3,
        tenant_count=2,
        arrival_rate=0.01,
        max_size=32,
    )
    return Preset(
        name="tiny-training",
        description="8-node smoke preset spanning over a thousand cycles",
        topology_config=make_topology(
            node_count=8,
            gpus_per_node=8,
            nodes_per_group=4,
            groups_per_spine=2,
            spines_per_superspine=1,
        ),
        params=params,
        sim_overrides={"queue_policy": "backfill", "placement_policy": "e_binpack"},
    )


def _tiny_inference() -> Preset:
    params = GeneratorParams(
        job_count=120,
        seed=5,
        tenant_count=2,
        arrival_rate=0.05,
        max_size=4,
    )
    return Preset(
        name="tiny-inference",
        description="8-node inference-zone smoke preset",
        topology_config=make_topology(
            node_count=8,
            gpus_per_node=8,
            nodes_per_group=4,
            groups_per_spine=2,
            spines_per_superspine=1,
            inference_zone_fraction=0.5,
        ),
        params=params,
        sim_overrides={
            "queue_policy": "best_effort",
            "placement_policy": "e_binpack",
            "policy_by_kind": {"non_gang": "e_spread"},
        },
    )


def _churn() -> Preset:
    # jobs of two or four half-node pods: co-locating pods fills nodes
    # exactly, while dispersing replicas leaves every node half free
    params = GeneratorParams(
        job_count=2500,
        seed=13,
        tenant_count=1,
        arrival_rate=0.11,
        size_weights={8: 0.7, 16: 0.3},
        duration_means={"small": 1500.0, "mid": 1500.0, "large": 1500.0},
        duration_min=300.0,
        duration_max_factor=3.0,
        pods_gpus=4,
    )
    return Preset(
        name="churn",
        description="high-churn small-gang stream for fragmentation contrasts",
        topology_config=make_topology(
            node_count=240,
            gpus_per_node=8,
            nodes_per_group=8,
            groups_per_spine=6,
            spines_per_superspine=5,
        ),
        params=params,
        sim_overrides={"queue_policy": "backfill", "placement_policy": "e_binpack"},
    )


def _uncontended() -> Preset:
    # whole-node gangs on a mostly idle cluster: consolidation should
    # always reach its optimum when group ranking is on
    params = GeneratorParams(
        job_count=200,
        seed=17,
        tenant_count=1,
        arrival_rate=0.016,
        size_weights={8: 0.5, 16: 0.3, 32: 0.2},
        duration_means={"small": 300.0, "mid": 300.0, "large": 300.0},
        duration_min=120.0,
        duration_max_factor=2.0,
    )
    return Preset(
        name="uncontended",
        description="idle-heavy whole-node gangs for consolidation checks",
        topology_config=make_topology(
            node_count=32,
            gpus_per_node=8,
            nodes_per_group=4,
            groups_per_spine=4,
            spines_per_superspine=2,
        ),
        params=params,
        sim_overrides={"queue_policy": "backfill", "placement_policy": "e_binpack"},
    )


_BUILDERS = {
    "paper-training": _paper_training,
    "paper-inference": _paper_inference,
    "tiny-training": _tiny_training,
    "tiny-inference": _tiny_inference,
    "churn": _churn,
    "uncontended": _uncontended,
}

PRESET_NAMES = tuple(_BUILDERS)


def get_preset(name: str) -> Preset:
    """Build a fresh preset bundle by name."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise PresetError(
            f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}"
        ) from None
    return builder()
