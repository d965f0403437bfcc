"""Value-semantic resource snapshots with incremental advancement.

A snapshot captures per-device allocations, per-tenant usage and a
generation counter.  ``advance_snapshot`` copies state only for nodes
touched by the change batch (the dirty set); untouched node states are
shared between generations, so applying the dirty set of generation g
to generation g-1 reproduces a full rebuild exactly.  Aggregates
(allocated milli, fragmented node count, per-type allocation) are
maintained incrementally and used for O(1) metric sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .cluster import MILLI, ClusterTopology, Node


class SnapshotError(ValueError):
    """Raised on inconsistent allocation or release requests."""


@dataclass(frozen=True)
class Change:
    """One allocation or release of milli-GPUs on a single device.

    ``kind`` is ``"allocate"`` or ``"release"``.  A release drops the
    pod's entire share on the device; ``milli`` is ignored for releases.
    """

    kind: str
    node_id: str
    device_id: int
    pod_id: str
    milli: int = 0
    tenant_id: str = ""
    gpu_type: str = ""


def allocate(node_id: str, device_id: int, pod_id: str, milli: int,
             tenant_id: str = "", gpu_type: str = "") -> Change:
    return Change("allocate", node_id, device_id, pod_id, milli, tenant_id, gpu_type)


def release(node_id: str, device_id: int, pod_id: str,
            tenant_id: str = "", gpu_type: str = "") -> Change:
    return Change("release", node_id, device_id, pod_id, 0, tenant_id, gpu_type)


@dataclass(frozen=True)
class NodeState:
    """Allocation state of one node; treated as immutable once built.

    ``alloc`` maps device_id -> tuple of (pod_id, milli) shares sorted
    by pod_id.  Devices with no shares are absent.
    """

    alloc: dict[int, tuple[tuple[str, int], ...]] = field(default_factory=dict)

    def device_used_milli(self, device_id: int) -> int:
        return sum(m for _, m in self.alloc.get(device_id, ()))

    @property
    def allocated_devices(self) -> int:
        return len(self.alloc)

    @property
    def allocated_milli(self) -> int:
        return sum(m for shares in self.alloc.values() for _, m in shares)

    def pods(self) -> Iterable[tuple[str, int, int]]:
        """Yields (pod_id, device_id, milli) over all shares."""
        for dev, shares in self.alloc.items():
            for pod, m in shares:
                yield pod, dev, m


_EMPTY = NodeState()


def _is_fragmented(node: Node, state: NodeState) -> bool:
    """Fragmented = neither fully idle nor fully occupied.  A node is
    occupied once every healthy device holds some share."""
    allocated = state.allocated_devices
    if allocated == 0:
        return False
    healthy = sum(1 for d in node.devices if d.healthy)
    occupied = sum(1 for d in node.devices if d.healthy and d.device_id in state.alloc)
    return occupied < healthy


@dataclass(frozen=True)
class ResourceSnapshot:
    """Cluster allocation state at one generation."""

    topology: ClusterTopology
    generation: int
    node_states: dict[str, NodeState]
    tenant_usage: dict[str, dict[str, int]]
    dirty: frozenset[str]
    allocated_total_milli: int = 0
    allocated_by_type: dict[str, int] = field(default_factory=dict)
    fragmented_nodes: int = 0

    # -- read helpers ----------------------------------------------------
    def node_state(self, node_id: str) -> NodeState:
        return self.node_states.get(node_id, _EMPTY)

    def device_free_milli(self, node: Node, device_id: int) -> int:
        used = self.node_state(node.node_id).device_used_milli(device_id)
        return MILLI - used

    def free_whole_devices(self, node: Node) -> list[int]:
        """Healthy devices with no allocation at all, ascending ids."""
        state = self.node_state(node.node_id)
        return [
            d.device_id
            for d in node.devices
            if d.healthy and d.device_id not in state.alloc
        ]

    def free_milli(self, node: Node) -> int:
        """Free healthy capacity of a node in milli-GPUs."""
        state = self.node_state(node.node_id)
        total = 0
        for d in node.devices:
            if d.healthy:
                total += MILLI - state.device_used_milli(d.device_id)
        return total

    def allocated_milli(self, node_id: str) -> int:
        return self.node_state(node_id).allocated_milli

    def pool_free_milli(self, gpu_type: str) -> int:
        healthy = self.topology.healthy_milli(gpu_type)
        return healthy - self.allocated_by_type.get(gpu_type, 0)

    def pods_on_node(self, node_id: str) -> dict[str, int]:
        """pod_id -> total milli held on this node."""
        out: dict[str, int] = {}
        for pod, _, m in self.node_state(node_id).pods():
            out[pod] = out.get(pod, 0) + m
        return out

    def state_equal(self, other: "ResourceSnapshot") -> bool:
        """Equality of allocation state, ignoring generation and dirty set."""
        mine = {n: s.alloc for n, s in self.node_states.items() if s.alloc}
        theirs = {n: s.alloc for n, s in other.node_states.items() if s.alloc}
        if mine != theirs:
            return False
        mine_u = {t: {g: m for g, m in u.items() if m} for t, u in self.tenant_usage.items()}
        theirs_u = {t: {g: m for g, m in u.items() if m} for t, u in other.tenant_usage.items()}
        return {t: u for t, u in mine_u.items() if u} == {t: u for t, u in theirs_u.items() if u}


def initial_snapshot(topology: ClusterTopology) -> ResourceSnapshot:
    return ResourceSnapshot(
        topology=topology,
        generation=0,
        node_states={},
        tenant_usage={},
        dirty=frozenset(),
    )


def _apply_to_node(state: NodeState, changes: list[Change], node: Node) -> NodeState:
    alloc: dict[int, dict[str, int]] = {
        dev: dict(shares) for dev, shares in state.alloc.items()
    }
    by_id = {d.device_id: d for d in node.devices}
    for ch in changes:
        if ch.device_id not in by_id:
            raise SnapshotError(f"unknown device {ch.device_id} on node {ch.node_id}")
        device = by_id[ch.device_id]
        shares = alloc.setdefault(ch.device_id, {})
        if ch.kind == "allocate":
            if not device.healthy:
                raise SnapshotError(
                    f"allocating unhealthy device {ch.device_id} on {ch.node_id}"
                )
            if ch.milli <= 0:
                raise SnapshotError("allocation must be a positive milli-GPU amount")
            used = sum(shares.values())
            if ch.pod_id in shares or used + ch.milli > MILLI:
                raise SnapshotError(
                    f"device {ch.node_id}/{ch.device_id} already allocated: "
                    f"pod {ch.pod_id} wants {ch.milli}, {MILLI - used} free"
                )
            shares[ch.pod_id] = ch.milli
        elif ch.kind == "release":
            if ch.pod_id not in shares:
                raise SnapshotError(
                    f"releasing unallocated device {ch.node_id}/{ch.device_id} "
                    f"for pod {ch.pod_id}"
                )
            del shares[ch.pod_id]
        else:
            raise SnapshotError(f"unknown change kind {ch.kind!r}")
        if not shares:
            del alloc[ch.device_id]
    return NodeState(
        alloc={dev: tuple(sorted(shares.items())) for dev, shares in sorted(alloc.items())}
    )


def advance_snapshot(prev: ResourceSnapshot, changes: Iterable[Change]) -> ResourceSnapshot:
    """Produce the next generation by applying a batch of changes.

    Only node states named in the batch are copied; the dirty set is
    exactly the touched node ids.  Raises SnapshotError on double
    allocation, over-allocation or release of an unheld share.
    """
    changes = list(changes)
    by_node: dict[str, list[Change]] = {}
    for ch in changes:
        if ch.node_id not in prev.topology.nodes:
            raise SnapshotError(f"unknown node {ch.node_id!r}")
        by_node.setdefault(ch.node_id, []).append(ch)

    node_states = dict(prev.node_states)
    allocated_total = prev.allocated_total_milli
    by_type = dict(prev.allocated_by_type)
    fragmented = prev.fragmented_nodes
    usage = {t: dict(u) for t, u in prev.tenant_usage.items()}

    for node_id, node_changes in by_node.items():
        node = prev.topology.nodes[node_id]
        old_state = prev.node_state(node_id)
        new_state = _apply_to_node(old_state, node_changes, node)

        delta = new_state.allocated_milli - old_state.allocated_milli
        allocated_total += delta
        if delta:
            by_type[node.gpu_type] = by_type.get(node.gpu_type, 0) + delta
        fragmented += int(_is_fragmented(node, new_state)) - int(
            _is_fragmented(node, old_state)
        )

        # per-tenant usage follows each pod share added or removed
        for ch in node_changes:
            if not ch.tenant_id:
                continue
            per = usage.setdefault(ch.tenant_id, {})
            if ch.kind == "allocate":
                per[ch.gpu_type] = per.get(ch.gpu_type, 0) + ch.milli
            else:
                held = dict(old_state.alloc.get(ch.device_id, ())).get(ch.pod_id, 0)
                per[ch.gpu_type] = per.get(ch.gpu_type, 0) - held

        if new_state.alloc:
            node_states[node_id] = new_state
        else:
            node_states.pop(node_id, None)

    return ResourceSnapshot(
        topology=prev.topology,
        generation=prev.generation + 1,
        node_states=node_states,
        tenant_usage=usage,
        dirty=frozenset(by_node),
        allocated_total_milli=allocated_total,
        allocated_by_type=by_type,
        fragmented_nodes=fragmented,
    )


class SnapshotStore:
    """Keeps the current snapshot, advancing either incrementally or by
    full rebuild from the cumulative change history (both must agree)."""

    def __init__(self, topology: ClusterTopology, mode: str = "incremental"):
        if mode not in ("incremental", "rebuild"):
            raise ValueError(f"unknown snapshot mode {mode!r}")
        self.mode = mode
        self.topology = topology
        self.current = initial_snapshot(topology)
        self._history: list[list[Change]] = []

    def advance(self, changes: Iterable[Change]) -> ResourceSnapshot:
        changes = list(changes)
        if self.mode == "incremental":
            self.current = advance_snapshot(self.current, changes)
        else:
            self._history.append(changes)
            snap = initial_snapshot(self.topology)
            for batch in self._history:
                snap = advance_snapshot(snap, batch)
            dirty = frozenset(ch.node_id for ch in changes)
            self.current = ResourceSnapshot(
                topology=self.topology,
                generation=snap.generation,
                node_states=dict(snap.node_states),
                tenant_usage={t: dict(u) for t, u in snap.tenant_usage.items()},
                dirty=dirty,
                allocated_total_milli=snap.allocated_total_milli,
                allocated_by_type=dict(snap.allocated_by_type),
                fragmented_nodes=snap.fragmented_nodes,
            )
        return self.current
