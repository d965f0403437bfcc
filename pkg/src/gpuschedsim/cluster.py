"""Static cluster model: devices, nodes, network groups and the topology tree.

The topology is loaded once from a config dict (or JSON file) and is
immutable afterwards.  Dynamic allocation state lives in
:mod:`gpuschedsim.snapshot`; everything here describes hardware only.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

MILLI = 1000  # one whole GPU expressed in milli-GPU units


class TopologyError(ValueError):
    """Raised when a topology config is malformed or inconsistent."""


@dataclass(frozen=True)
class GpuDevice:
    """A single GPU and its intra-node connectivity.

    Attributes:
        device_id: Index of the device within its node.
        nvlink_group: Devices sharing an nvlink_group are fully connected
            over NVLink (the fastest intra-node path).
        numa_domain: NUMA domain hosting the device.
        pcie_switch: PCIe switch the device hangs off (faster than NUMA,
            slower than NVLink).
        nic_id: Network interface serving this device for inter-node
            traffic.
        healthy: Unhealthy devices are never allocated.
    """

    device_id: int
    nvlink_group: int
    numa_domain: int
    pcie_switch: int
    nic_id: str
    healthy: bool = True


@dataclass(frozen=True)
class Node:
    """A server with a fixed set of GPU devices and its network position."""

    node_id: str
    gpu_type: str
    devices: tuple[GpuDevice, ...]
    leaf_group_id: str
    spine_id: str
    superspine_id: str
    hbd_id: Optional[str] = None
    in_inference_zone: bool = False

    @property
    def capacity_milli(self) -> int:
        return len(self.devices) * MILLI

    @property
    def healthy_devices(self) -> tuple[GpuDevice, ...]:
        return tuple(d for d in self.devices if d.healthy)


@dataclass(frozen=True)
class NodeNetGroup:
    """A set of nodes under one leaf switch; intra-group traffic stays local."""

    group_id: str
    node_ids: tuple[str, ...]
    spine_id: str


@dataclass
class ClusterTopology:
    """Immutable view of the whole cluster.

    Attributes:
        nodes: node_id -> Node.
        groups: group_id -> NodeNetGroup.
        node_pools: gpu_type -> node ids of that type.
        hbds: hbd_id -> node ids wired into one high-bandwidth domain.
        inference_zone: node ids reserved first for latency-sensitive pods.
    """

    nodes: dict[str, Node]
    groups: dict[str, NodeNetGroup]
    node_pools: dict[str, frozenset[str]] = field(default_factory=dict)
    hbds: dict[str, frozenset[str]] = field(default_factory=dict)
    inference_zone: frozenset[str] = frozenset()

    @property
    def total_devices(self) -> int:
        return sum(len(n.devices) for n in self.nodes.values())

    @property
    def total_milli(self) -> int:
        return self.total_devices * MILLI

    def healthy_milli(self, gpu_type: Optional[str] = None) -> int:
        nodes: Iterable[Node] = self.nodes.values()
        if gpu_type is not None:
            nodes = (self.nodes[n] for n in self.node_pools.get(gpu_type, frozenset()))
        return sum(len(n.healthy_devices) for n in nodes) * MILLI

    def pool_nodes(self, gpu_type: str) -> frozenset[str]:
        return self.node_pools.get(gpu_type, frozenset())


def _default_devices(count: int, node_id: str, unhealthy: Sequence[int] = ()) -> tuple[GpuDevice, ...]:
    """Default intra-node shape: nvlink groups of 4, NUMA domains of 4,
    a PCIe switch per device pair and one NIC per nvlink group."""
    bad = set(unhealthy)
    devices = []
    for i in range(count):
        group = i // 4
        devices.append(
            GpuDevice(
                device_id=i,
                nvlink_group=group,
                numa_domain=i // 4,
                pcie_switch=i // 2,
                nic_id=f"{node_id}/nic{group}",
                healthy=i not in bad,
            )
        )
    return tuple(devices)


def _parse_device(raw: dict, node_id: str) -> GpuDevice:
    try:
        return GpuDevice(
            device_id=int(raw["device_id"]),
            nvlink_group=int(raw["nvlink_group"]),
            numa_domain=int(raw["numa_domain"]),
            pcie_switch=int(raw["pcie_switch"]),
            nic_id=str(raw["nic_id"]),
            healthy=bool(raw.get("healthy", True)),
        )
    except KeyError as exc:
        raise TopologyError(f"node {node_id}: device record missing field {exc}") from exc


def load_topology(config: dict) -> ClusterTopology:
    """Build a validated ClusterTopology from a config dict.

    The config uses top-level keys ``nodes``, ``groups``, ``hbds`` and
    ``inference_zone``.  A node's ``devices`` entry may be either a full
    list of device records or an integer count that expands to the
    default intra-node shape.

    Raises:
        TopologyError: on duplicate node ids, references to unknown
            groups, empty device lists, groupings that do not partition
            the node set, or a leaf/spine/superspine relation that is
            not a strict tree.
    """
    nodes: dict[str, Node] = {}
    groups: dict[str, NodeNetGroup] = {}

    raw_groups = {g["group_id"]: g for g in config.get("groups", [])}
    if len(raw_groups) != len(config.get("groups", [])):
        raise TopologyError("duplicate group id in config")

    membership: dict[str, list[str]] = {gid: [] for gid in raw_groups}
    for raw in config.get("nodes", []):
        node_id = str(raw["node_id"])
        if node_id in nodes:
            raise TopologyError(f"duplicate node id {node_id!r}")
        gid = str(raw["leaf_group_id"])
        if gid not in raw_groups:
            raise TopologyError(f"node {node_id!r} references unknown group {gid!r}")
        dev_raw = raw.get("devices", 8)
        if isinstance(dev_raw, int):
            devices = _default_devices(dev_raw, node_id, raw.get("unhealthy_devices", ()))
        else:
            devices = tuple(_parse_device(d, node_id) for d in dev_raw)
        if not devices:
            raise TopologyError(f"node {node_id!r} has no devices")
        seen_dev = set()
        for d in devices:
            if d.device_id in seen_dev:
                raise TopologyError(f"node {node_id!r}: duplicate device id {d.device_id}")
            seen_dev.add(d.device_id)
        spine = str(raw.get("spine_id", raw_groups[gid].get("spine_id", "")))
        node = Node(
            node_id=node_id,
            gpu_type=str(raw.get("gpu_type", "default")),
            devices=devices,
            leaf_group_id=gid,
            spine_id=spine,
            superspine_id=str(raw.get("superspine_id", "ss0")),
            hbd_id=raw.get("hbd_id"),
            in_inference_zone=bool(raw.get("in_inference_zone", False)),
        )
        nodes[node_id] = node
        membership[gid].append(node_id)

    for gid, raw in raw_groups.items():
        declared = raw.get("node_ids")
        members = membership[gid]
        if declared is not None and sorted(declared) != sorted(members):
            raise TopologyError(
                f"group {gid!r} node_ids do not match node leaf_group_id assignments"
            )
        groups[gid] = NodeNetGroup(
            group_id=gid,
            node_ids=tuple(sorted(members)),
            spine_id=str(raw.get("spine_id", "")),
        )

    grouped = [nid for g in groups.values() for nid in g.node_ids]
    if len(grouped) != len(set(grouped)) or set(grouped) != set(nodes):
        raise TopologyError("groups do not partition the node set")

    # leaf -> spine -> superspine must be a strict tree
    leaf_spine: dict[str, str] = {}
    spine_super: dict[str, str] = {}
    for node in nodes.values():
        prev = leaf_spine.setdefault(node.leaf_group_id, node.spine_id)
        if prev != node.spine_id:
            raise TopologyError(
                f"leaf group {node.leaf_group_id!r} maps to multiple spines"
            )
        prev = spine_super.setdefault(node.spine_id, node.superspine_id)
        if prev != node.superspine_id:
            raise TopologyError(f"spine {node.spine_id!r} maps to multiple superspines")
    for gid, grp in groups.items():
        if grp.node_ids and grp.spine_id and leaf_spine.get(gid, grp.spine_id) != grp.spine_id:
            raise TopologyError(f"group {gid!r} spine_id conflicts with its nodes")

    pools: dict[str, set[str]] = {}
    for node in nodes.values():
        pools.setdefault(node.gpu_type, set()).add(node.node_id)

    hbds: dict[str, frozenset[str]] = {}
    for hbd_id, node_ids in config.get("hbds", {}).items():
        unknown = set(node_ids) - set(nodes)
        if unknown:
            raise TopologyError(f"hbd {hbd_id!r} references unknown nodes {sorted(unknown)}")
        hbds[str(hbd_id)] = frozenset(str(n) for n in node_ids)

    zone = frozenset(str(n) for n in config.get("inference_zone", []))
    unknown = zone - set(nodes)
    if unknown:
        raise TopologyError(f"inference_zone references unknown nodes {sorted(unknown)}")
    zone = zone | frozenset(n.node_id for n in nodes.values() if n.in_inference_zone)

    fixed_nodes = {}
    for nid, node in nodes.items():
        hbd_id = node.hbd_id
        for h, members in hbds.items():
            if nid in members:
                hbd_id = h
        fixed_nodes[nid] = Node(
            node_id=node.node_id,
            gpu_type=node.gpu_type,
            devices=node.devices,
            leaf_group_id=node.leaf_group_id,
            spine_id=node.spine_id,
            superspine_id=node.superspine_id,
            hbd_id=hbd_id,
            in_inference_zone=nid in zone,
        )

    return ClusterTopology(
        nodes=fixed_nodes,
        groups=groups,
        node_pools={t: frozenset(m) for t, m in pools.items()},
        hbds=hbds,
        inference_zone=zone,
    )


def load_topology_file(path: str) -> ClusterTopology:
    with open(path, "r", encoding="utf-8") as fh:
        return load_topology(json.load(fh))


def node_comm_tier(a: str, b: str, topology: ClusterTopology) -> int:
    """Communication tier between two nodes.

    0 = same leaf group, 1 = same spine, 2 = same superspine, 3 = beyond.
    Symmetric, and 0 for a node with itself.
    """
    try:
        na, nb = topology.nodes[a], topology.nodes[b]
    except KeyError as exc:
        raise TopologyError(f"unknown node {exc}") from exc
    if na.leaf_group_id == nb.leaf_group_id:
        return 0
    if na.spine_id == nb.spine_id:
        return 1
    if na.superspine_id == nb.superspine_id:
        return 2
    return 3


def link_score(devices: Sequence[GpuDevice]) -> tuple[int, int, int]:
    """Lexicographic connectivity score of a device combination.

    Counts device pairs sharing an nvlink group, then a PCIe switch,
    then a NUMA domain.  Higher compares better.
    """
    nv = pcie = numa = 0
    for x, y in itertools.combinations(devices, 2):
        if x.nvlink_group == y.nvlink_group:
            nv += 1
        if x.pcie_switch == y.pcie_switch:
            pcie += 1
        if x.numa_domain == y.numa_domain:
            numa += 1
    return (nv, pcie, numa)


@dataclass(frozen=True)
class DeviceSelection:
    device_ids: tuple[int, ...]
    nic_ids: tuple[str, ...]
    score: tuple[int, int, int]


def select_intra_node_devices(
    node: Node,
    count: int,
    available: Optional[Iterable[int]] = None,
) -> DeviceSelection:
    """Pick ``count`` devices on one node maximizing the link score.

    Args:
        node: Node to select on.
        count: Number of whole devices required.
        available: Device ids currently free; defaults to every healthy
            device.  Unhealthy devices are excluded either way.

    Returns:
        The best-scoring combination; ties resolve to the lowest
        device-id set.  NIC assignments follow the chosen devices.

    Raises:
        ValueError: if fewer than ``count`` healthy devices are available.
    """
    by_id = {d.device_id: d for d in node.devices}
    if available is None:
        pool = [d for d in node.devices if d.healthy]
    else:
        pool = [by_id[i] for i in sorted(available) if by_id[i].healthy]
    if count <= 0:
        raise ValueError("device count must be positive")
    if len(pool) < count:
        raise ValueError(
            f"node {node.node_id}: need {count} healthy free devices, have {len(pool)}"
        )
    best: Optional[tuple[tuple[int, int, int], tuple[int, ...]]] = None
    for combo in itertools.combinations(pool, count):
        ids = tuple(d.device_id for d in combo)
        score = link_score(combo)
        # higher score wins; among ties the lowest id tuple wins
        key = (tuple(-s for s in score), ids)
        if best is None or key < best:
            best = key
    assert best is not None
    neg_score, ids = best
    score = tuple(-s for s in neg_score)
    nics = tuple(by_id[i].nic_id for i in ids)
    return DeviceSelection(device_ids=ids, nic_ids=nics, score=score)  # type: ignore[arg-type]


def make_topology(
    node_count: int,
    gpus_per_node: int = 8,
    nodes_per_group: int = 8,
    groups_per_spine: int = 8,
    spines_per_superspine: int = 4,
    gpu_types: Optional[dict[str, int]] = None,
    inference_zone_fraction: float = 0.0,
    hbd_size: int = 0,
    unhealthy: Optional[dict[str, Sequence[int]]] = None,
) -> dict:
    """Build a synthetic topology config dict.

    Nodes are laid out contiguously into leaf groups, spines and
    superspines.  ``gpu_types`` maps type name to node count and must sum
    to ``node_count`` (a single ``default`` type otherwise).  The first
    ``inference_zone_fraction`` of nodes form the inference zone.  When
    ``hbd_size`` > 0 consecutive nodes are wired into high-bandwidth
    domains of that size.
    """
    if gpu_types is None:
        gpu_types = {"default": node_count}
    if sum(gpu_types.values()) != node_count:
        raise ValueError("gpu_types node counts must sum to node_count")
    type_of: list[str] = []
    for t, cnt in gpu_types.items():
        type_of.extend([t] * cnt)

    unhealthy = unhealthy or {}
    zone_count = int(node_count * inference_zone_fraction)
    nodes = []
    groups = {}
    for i in range(node_count):
        gid = f"g{i // nodes_per_group}"
        spine = f"s{i // (nodes_per_group * groups_per_spine)}"
        superspine = f"ss{i // (nodes_per_group * groups_per_spine * spines_per_superspine)}"
        node_id = f"n{i}"
        groups.setdefault(gid, {"group_id": gid, "spine_id": spine})
        nodes.append(
            {
                "node_id": node_id,
                "gpu_type": type_of[i],
                "leaf_group_id": gid,
                "spine_id": spine,
                "superspine_id": superspine,
                "devices": gpus_per_node,
                "unhealthy_devices": list(unhealthy.get(node_id, ())),
                "in_inference_zone": i < zone_count,
            }
        )
    hbds = {}
    if hbd_size > 0:
        for h in range(node_count // hbd_size):
            hbds[f"hbd{h}"] = [f"n{i}" for i in range(h * hbd_size, (h + 1) * hbd_size)]
    return {
        "nodes": nodes,
        "groups": list(groups.values()),
        "hbds": hbds,
        "inference_zone": [],
    }
