"""Placement tier: two-level node selection, scoring policies, gang placement.

Placement picks candidate NodeNetGroups first (consolidation for the
binpack family, emptiest-first for spread), then nodes within them via
policy scores reordered by topology affinity to the job's already
chosen nodes.  Gang requests commit atomically: either every pod gets
devices or the decision reports failure with no side effects.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .cluster import (
    MILLI,
    ClusterTopology,
    Node,
    select_intra_node_devices,
)
from .snapshot import ResourceSnapshot

PLACEMENT_POLICIES = ("binpack", "e_binpack", "spread", "e_spread")


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class PodRequest:
    pod_id: str
    gpu_type: str
    milli: int


@dataclass
class PlacementRequest:
    """All pods of one job to place under one policy.

    ``e_spread`` is only valid for non-gang requests; gang requests
    asking for it are built with ``e_binpack`` instead.
    """

    job_id: str
    pods: tuple[PodRequest, ...]
    gang: bool
    policy: str
    needs_hbd: bool = False
    # nodes already hosting this job's pods (non-gang partial placement)
    existing: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in PLACEMENT_POLICIES:
            raise PlacementError(f"unknown placement policy {self.policy!r}")
        if self.policy == "e_spread" and self.gang:
            raise PlacementError("e_spread only places non-gang requests")

    def demand_by_type(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.pods:
            out[p.gpu_type] = out.get(p.gpu_type, 0) + p.milli
        return out


@dataclass(frozen=True)
class PodAssignment:
    pod_id: str
    node_id: str
    devices: tuple[tuple[int, int], ...]  # (device_id, milli)
    nic_ids: tuple[str, ...]


@dataclass
class PlacementDecision:
    job_id: str
    policy: str
    success: bool
    assignments: dict[str, PodAssignment] = field(default_factory=dict)
    failed_pods: tuple[str, ...] = ()
    overflowed: tuple[str, ...] = ()  # e_spread pods that left the zone
    reason: str = ""

    def nodes_used(self) -> tuple[str, ...]:
        return tuple(sorted({a.node_id for a in self.assignments.values()}))

    def groups_used(self, topology: ClusterTopology) -> tuple[str, ...]:
        return tuple(
            sorted({topology.nodes[n].leaf_group_id for n in self.nodes_used()})
        )


@dataclass(frozen=True)
class NodeScore:
    """Policy score of one node for one pod; lower key places first."""

    node_id: str
    feasible: bool
    key: tuple = ()


# -- working availability ----------------------------------------------------

class _NodeAvail:
    __slots__ = ("free_milli", "whole_free", "frac_free")

    def __init__(self, node: Node, snapshot: ResourceSnapshot):
        state = snapshot.node_state(node.node_id)
        self.whole_free: set[int] = set()
        self.frac_free: dict[int, int] = {}
        total = 0
        for d in node.devices:
            if not d.healthy:
                continue
            used = state.device_used_milli(d.device_id)
            free = MILLI - used
            total += free
            if used == 0:
                self.whole_free.add(d.device_id)
            elif free > 0:
                self.frac_free[d.device_id] = free

    def clone(self) -> "_NodeAvail":
        out = object.__new__(_NodeAvail)
        out.free_milli = self.free_milli
        out.whole_free = set(self.whole_free)
        out.frac_free = dict(self.frac_free)
        return out


def _node_avail_init(node: Node, snapshot: ResourceSnapshot) -> _NodeAvail:
    avail = _NodeAvail(node, snapshot)
    avail.free_milli = len(avail.whole_free) * MILLI + sum(avail.frac_free.values())
    return avail


class _Availability:
    """Free capacity per node: the snapshot plus this decision's tentative
    assignments.  Entries build lazily and copy cheaply for backtracking."""

    def __init__(self, snapshot: ResourceSnapshot):
        self.snapshot = snapshot
        self.entries: dict[str, _NodeAvail] = {}

    def entry(self, node: Node) -> _NodeAvail:
        got = self.entries.get(node.node_id)
        if got is None:
            got = _node_avail_init(node, self.snapshot)
            self.entries[node.node_id] = got
        return got

    def clone(self) -> "_Availability":
        out = object.__new__(_Availability)
        out.snapshot = self.snapshot
        out.entries = {n: e.clone() for n, e in self.entries.items()}
        return out

    def feasible(self, node: Node, milli: int) -> bool:
        e = self.entry(node)
        whole, frac = divmod(milli, MILLI)
        if frac == 0:
            return len(e.whole_free) >= whole
        if len(e.whole_free) >= whole + 1:
            return True
        return len(e.whole_free) >= whole and any(
            f >= frac for f in e.frac_free.values()
        )

    def assign(self, node: Node, pod_id: str, milli: int) -> PodAssignment:
        e = self.entry(node)
        whole, frac = divmod(milli, MILLI)
        devices: list[tuple[int, int]] = []
        nic_ids: list[str] = []
        by_id = {d.device_id: d for d in node.devices}
        if whole:
            sel = select_intra_node_devices(node, whole, available=e.whole_free)
            for dev in sel.device_ids:
                e.whole_free.discard(dev)
                devices.append((dev, MILLI))
            nic_ids.extend(sel.nic_ids)
        if frac:
            # best fit: the smallest sufficient fractional remainder,
            # falling back to breaking open a whole device
            fit = [(f, dev) for dev, f in e.frac_free.items() if f >= frac]
            if fit:
                _, dev = min(fit)
                left = e.frac_free[dev] - frac
                if left:
                    e.frac_free[dev] = left
                else:
                    del e.frac_free[dev]
            else:
                dev = min(e.whole_free)
                e.whole_free.discard(dev)
                e.frac_free[dev] = MILLI - frac
            devices.append((dev, frac))
            nic = by_id[dev].nic_id
            if nic not in nic_ids:
                nic_ids.append(nic)
        e.free_milli -= milli
        return PodAssignment(
            pod_id=pod_id,
            node_id=node.node_id,
            devices=tuple(devices),
            nic_ids=tuple(nic_ids),
        )


class _TierTracker:
    """O(1) max-communication-tier from a node to all chosen nodes."""

    def __init__(self, topology: ClusterTopology):
        self.topology = topology
        self.total = 0
        self.by_leaf: dict[str, int] = {}
        self.by_spine: dict[str, int] = {}
        self.by_super: dict[str, int] = {}

    def add(self, node: Node) -> None:
        self.total += 1
        self.by_leaf[node.leaf_group_id] = self.by_leaf.get(node.leaf_group_id, 0) + 1
        self.by_spine[node.spine_id] = self.by_spine.get(node.spine_id, 0) + 1
        self.by_super[node.superspine_id] = self.by_super.get(node.superspine_id, 0) + 1

    def max_tier(self, node: Node) -> int:
        if self.total == 0:
            return 0
        if self.by_leaf.get(node.leaf_group_id, 0) == self.total:
            return 0
        if self.by_spine.get(node.spine_id, 0) == self.total:
            return 1
        if self.by_super.get(node.superspine_id, 0) == self.total:
            return 2
        return 3


# -- scoring -----------------------------------------------------------------

def _policy_key(
    policy: str,
    node: Node,
    entry: _NodeAvail,
    pod_milli: int,
    achieved: int,
    remaining: Sequence[int],
) -> tuple:
    allocated = node.capacity_milli - entry.free_milli
    if policy == "binpack":
        return (-allocated, node.node_id)
    if policy == "e_binpack":
        free_after = entry.free_milli - pod_milli
        prospective = 0
        if remaining:
            if remaining[0] == remaining[-1]:
                # uniform sizes collapse the greedy fit to a division
                if free_after >= remaining[0]:
                    prospective = min(len(remaining), free_after // remaining[0])
            else:
                for m in remaining:
                    if free_after >= m:
                        prospective += 1
                        free_after -= m
        return (-achieved, -prospective, -allocated, node.node_id)
    # spread and e_spread: fewest same-job replicas, then emptiest
    return (achieved, -entry.free_milli, node.node_id)


def score_node(
    node: Node,
    pod: PodRequest,
    policy: str,
    snapshot: ResourceSnapshot,
    job_pods_on_node: int = 0,
    remaining: Sequence[int] = (),
) -> NodeScore:
    """Score one node for one pod under a policy; lower keys sort first.

    Infeasible nodes (wrong GPU type, not enough free healthy devices
    for the pod) come back with ``feasible=False``.
    """
    if policy not in PLACEMENT_POLICIES:
        raise PlacementError(f"unknown placement policy {policy!r}")
    if node.gpu_type != pod.gpu_type:
        return NodeScore(node.node_id, False)
    avail = _Availability(snapshot)
    if not avail.feasible(node, pod.milli):
        return NodeScore(node.node_id, False)
    key = _policy_key(policy, node, avail.entry(node), pod.milli,
                      job_pods_on_node, remaining)
    return NodeScore(node.node_id, True, key)


def topology_rank(
    node_ids: Sequence[str],
    chosen: Sequence[str],
    topology: ClusterTopology,
) -> list[str]:
    """Stable reorder of candidate nodes by max communication tier to the
    already chosen nodes; with nothing chosen the order is unchanged."""
    if not chosen:
        return list(node_ids)
    tracker = _TierTracker(topology)
    for c in chosen:
        tracker.add(topology.nodes[c])
    return sorted(node_ids, key=lambda n: tracker.max_tier(topology.nodes[n]))


# -- group preselection -------------------------------------------------------

def _group_free(
    snapshot: ResourceSnapshot, topology: ClusterTopology, gpu_types: set[str]
) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    for gid, group in topology.groups.items():
        per: dict[str, int] = {}
        for nid in group.node_ids:
            node = topology.nodes[nid]
            if node.gpu_type in gpu_types:
                per[node.gpu_type] = per.get(node.gpu_type, 0) + snapshot.free_milli(node)
        out[gid] = per
    return out


def preselect_groups(
    request: PlacementRequest,
    snapshot: ResourceSnapshot,
    topology: ClusterTopology,
) -> list[str]:
    """Ordered candidate NodeNetGroups for a request.

    The binpack family lists groups that fit the whole job first
    (fullest first, for consolidation), then the rest by descending
    free capacity so that multi-group covers need the fewest groups.
    Spread lists emptiest groups first.  Returns [] when the job does
    not fit even across all groups combined.
    """
    demand = request.demand_by_type()
    free = _group_free(snapshot, topology, set(demand))
    for gpu_type, need in demand.items():
        if sum(per.get(gpu_type, 0) for per in free.values()) < need:
            return []
    contributing = [
        gid for gid, per in free.items() if any(per.get(t, 0) > 0 for t in demand)
    ]
    totals = {gid: sum(free[gid].values()) for gid in contributing}
    if request.policy in ("spread", "e_spread"):
        return sorted(contributing, key=lambda g: (-totals[g], g))
    fits = [
        gid for gid in contributing
        if all(free[gid].get(t, 0) >= need for t, need in demand.items())
    ]
    rest = [gid for gid in contributing if gid not in set(fits)]
    fits.sort(key=lambda g: (totals[g], g))
    rest.sort(key=lambda g: (-totals[g], g))
    return fits + rest


# -- placement ----------------------------------------------------------------

def _pod_order(pods: Sequence[PodRequest]) -> list[PodRequest]:
    return sorted(pods, key=lambda p: (-p.milli, p.pod_id))


def _whole_slots_gate(
    pods: list[PodRequest], nodes: list[Node], avail: _Availability
) -> bool:
    """Cheap capacity-shape gate for uniform whole-GPU pods: count how
    many such pods the candidate nodes can host at all."""
    sizes = {(p.gpu_type, p.milli) for p in pods}
    if len(sizes) != 1:
        return True
    (gpu_type, milli), = sizes
    whole = milli // MILLI
    if whole == 0 or milli % MILLI:
        return True
    slots = 0
    for node in nodes:
        if node.gpu_type != gpu_type:
            continue
        slots += len(avail.entry(node).whole_free) // whole
        if slots >= len(pods):
            return True
    return False


def _greedy_assign(
    request: PlacementRequest,
    pods: list[PodRequest],
    nodes: list[Node],
    avail: _Availability,
    topology: ClusterTopology,
    topology_aware: bool,
) -> Optional[dict[str, PodAssignment]]:
    """Place every pod on the candidate nodes or return None."""
    if not _whole_slots_gate(pods, nodes, avail):
        return None
    assignments: dict[str, PodAssignment] = {}
    on_node: dict[str, int] = dict(request.existing)
    tracker = _TierTracker(topology)
    for nid in request.existing:
        tracker.add(topology.nodes[nid])
    for i, pod in enumerate(pods):
        remaining = [p.milli for p in pods[i + 1:]]
        best: Optional[tuple[tuple, Node]] = None
        for node in nodes:
            if node.gpu_type != pod.gpu_type or not avail.feasible(node, pod.milli):
                continue
            key = _policy_key(
                request.policy, node, avail.entry(node), pod.milli,
                on_node.get(node.node_id, 0), remaining,
            )
            if topology_aware:
                key = (tracker.max_tier(node),) + key
            if best is None or key < best[0]:
                best = (key, node)
        if best is None:
            return None
        node = best[1]
        assignments[pod.pod_id] = avail.assign(node, pod.pod_id, pod.milli)
        if node.node_id not in on_node:
            tracker.add(node)
        on_node[node.node_id] = on_node.get(node.node_id, 0) + 1
    return assignments


def _candidate_node_sets(
    request: PlacementRequest,
    snapshot: ResourceSnapshot,
    topology: ClusterTopology,
    topology_aware: bool,
) -> list[list[str]]:
    """Node-set attempts in order: single fitting groups, then covers
    widening over spines and superspines, then the whole cluster.
    Backtracking over placement happens only across these sets."""
    demand = request.demand_by_type()
    pool_union = sorted(set().union(*(topology.pool_nodes(t) for t in demand)))

    if request.needs_hbd:
        sets = []
        fits = []
        for hbd_id, members in topology.hbds.items():
            free: dict[str, int] = {}
            for nid in members:
                node = topology.nodes[nid]
                if node.gpu_type in demand:
                    free[node.gpu_type] = free.get(node.gpu_type, 0) + snapshot.free_milli(node)
            if all(free.get(t, 0) >= need for t, need in demand.items()):
                fits.append((sum(free.values()), hbd_id))
        for _, hbd_id in sorted(fits):
            sets.append(sorted(topology.hbds[hbd_id]))
        return sets

    if not topology_aware:
        return [pool_union]

    groups = preselect_groups(request, snapshot, topology)
    if not groups:
        return []
    free = _group_free(snapshot, topology, set(demand))

    def fits_whole(gids: Sequence[str]) -> bool:
        for t, need in demand.items():
            if sum(free[g].get(t, 0) for g in gids) < need:
                return False
        return True

    sets: list[list[str]] = []
    seen: set[tuple[str, ...]] = set()

    def add(gids: Sequence[str]) -> None:
        nodes = sorted(
            nid
            for g in gids
            for nid in topology.groups[g].node_ids
            if topology.nodes[nid].gpu_type in demand
        )
        key = tuple(nodes)
        if nodes and key not in seen:
            seen.add(key)
            sets.append(nodes)

    single_fits = [g for g in groups if fits_whole([g])]
    for g in single_fits:
        add([g])
    if not single_fits:
        # widen along the network: spines first, then superspines
        by_spine: dict[str, list[str]] = {}
        by_super: dict[str, list[str]] = {}
        for g in groups:
            grp = topology.groups[g]
            spine = grp.spine_id
            by_spine.setdefault(spine, []).append(g)
            any_node = topology.nodes[grp.node_ids[0]]
            by_super.setdefault(any_node.superspine_id, []).append(g)
        for spine in sorted(by_spine):
            if fits_whole(by_spine[spine]):
                add(by_spine[spine])
        for sup in sorted(by_super):
            if fits_whole(by_super[sup]):
                add(by_super[sup])
    add(groups)
    return sets


def _min_nodes_bound(request: PlacementRequest, topology: ClusterTopology) -> int:
    """Capacity lower bound on the node count any assignment needs."""
    total = 0
    for gpu_type, milli in request.demand_by_type().items():
        caps = [
            len(topology.nodes[n].healthy_devices) * MILLI
            for n in topology.pool_nodes(gpu_type)
        ]
        cap = max(caps, default=0)
        if cap <= 0:
            return len(request.pods)
        total += -(-milli // cap)
    return max(total, 1)


def place(
    request: PlacementRequest,
    snapshot: ResourceSnapshot,
    topology: ClusterTopology,
    topology_aware: bool = True,
) -> PlacementDecision:
    """Place a request against a snapshot.

    Gang requests are atomic: on any shortfall the decision fails with
    no assignments.  Candidate single groups are all tried and the one
    hosting the gang on the fewest nodes wins (ties keep the fuller
    group); widened multi-group covers keep first-fit semantics.
    Non-gang requests place pods independently and may succeed
    partially.  ``needs_hbd`` restricts candidates to a single
    high-bandwidth domain with no fallback.
    """
    if request.policy == "e_spread":
        return place_e_spread(request, snapshot, topology, topology_aware)
    decision = PlacementDecision(
        job_id=request.job_id, policy=request.policy, success=False
    )
    pods = _pod_order(request.pods)
    if request.gang:
        best: Optional[dict[str, PodAssignment]] = None
        best_used = 0
        # consolidating policies compare every fitting group and keep the
        # fewest-nodes outcome; spread keeps plain first-fit dispersal
        minimize = request.policy in ("binpack", "e_binpack")
        bound = _min_nodes_bound(request, topology)
        for node_ids in _candidate_node_sets(request, snapshot, topology, topology_aware):
            single_group = (
                len({topology.nodes[n].leaf_group_id for n in node_ids}) == 1
            )
            if best is not None and not single_group:
                break
            nodes = [topology.nodes[n] for n in node_ids]
            got = _greedy_assign(
                request, pods, nodes, _Availability(snapshot), topology, topology_aware
            )
            if got is None:
                continue
            used = len({a.node_id for a in got.values()})
            if best is None or used < best_used:
                best, best_used = got, used
            if not minimize or not single_group or used <= bound:
                break
        if best is not None:
            decision.assignments = best
            decision.success = True
            return decision
        decision.reason = "gang does not fit"
        if request.needs_hbd:
            decision.reason = "no high-bandwidth domain fits"
        return decision

    avail = _Availability(snapshot)
    failed: list[str] = []
    existing = dict(request.existing)
    for pod in pods:
        sub = PlacementRequest(
            job_id=request.job_id,
            pods=(pod,),
            gang=False,
            policy=request.policy,
            needs_hbd=request.needs_hbd,
            existing=existing,
        )
        placed = None
        for node_ids in _candidate_node_sets(sub, snapshot, topology, topology_aware):
            nodes = [topology.nodes[n] for n in node_ids]
            placed = _greedy_assign(sub, [pod], nodes, avail, topology, topology_aware)
            if placed:
                break
        if placed:
            a = placed[pod.pod_id]
            decision.assignments[pod.pod_id] = a
            existing[a.node_id] = existing.get(a.node_id, 0) + 1
        else:
            failed.append(pod.pod_id)
    decision.failed_pods = tuple(failed)
    decision.success = not failed
    if failed:
        decision.reason = f"{len(failed)} pods do not fit"
    return decision


def place_e_spread(
    request: PlacementRequest,
    snapshot: ResourceSnapshot,
    topology: ClusterTopology,
    topology_aware: bool = True,
) -> PlacementDecision:
    """Spread small pods across the inference zone, overflowing to the
    general pool under e_binpack once the zone is exhausted.

    Pods whose demand reaches a whole node never use the zone.
    """
    if request.gang:
        raise PlacementError("e_spread only places non-gang requests")
    decision = PlacementDecision(
        job_id=request.job_id, policy="e_spread", success=False
    )
    zone_ids = sorted(topology.inference_zone)
    general_ids = sorted(set(topology.nodes) - set(zone_ids))
    avail = _Availability(snapshot)
    existing = dict(request.existing)
    failed: list[str] = []
    overflowed: list[str] = []
    for pod in _pod_order(request.pods):
        zone_nodes = [
            topology.nodes[n]
            for n in zone_ids
            if topology.nodes[n].gpu_type == pod.gpu_type
            and pod.milli < topology.nodes[n].capacity_milli
        ]
        sub = PlacementRequest(
            job_id=request.job_id, pods=(pod,), gang=False,
            policy="spread", existing=existing,
        )
        placed = _greedy_assign(sub, [pod], zone_nodes, avail, topology, topology_aware)
        if placed is None:
            overflow_req = PlacementRequest(
                job_id=request.job_id, pods=(pod,), gang=False,
                policy="e_binpack", existing=existing,
            )
            nodes = [topology.nodes[n] for n in general_ids
                     if topology.nodes[n].gpu_type == pod.gpu_type]
            placed = _greedy_assign(
                overflow_req, [pod], nodes, avail, topology, topology_aware
            )
            if placed is not None and zone_nodes:
                overflowed.append(pod.pod_id)
        if placed is None:
            failed.append(pod.pod_id)
            continue
        a = placed[pod.pod_id]
        decision.assignments[pod.pod_id] = a
        existing[a.node_id] = existing.get(a.node_id, 0) + 1
    decision.failed_pods = tuple(failed)
    decision.overflowed = tuple(overflowed)
    decision.success = not failed
    if failed:
        decision.reason = f"{len(failed)} pods do not fit"
    return decision
