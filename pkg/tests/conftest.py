from __future__ import annotations

import random

from gpuschedsim.cluster import MILLI
from gpuschedsim.snapshot import allocate, release


class AllocModel:
    """Book-keeping that emits valid random change batches.

    Tracks who holds what so generated batches never double-allocate,
    overfill a device or release an unheld share.  Applied state is
    updated as each change is generated, so one batch may touch the
    same device repeatedly.
    """

    def __init__(self, topology, rng: random.Random, tenants=("t0", "t1", "t2")):
        self.topology = topology
        self.rng = rng
        self.tenants = tenants
        # (node_id, device_id) -> {pod_id: (milli, tenant_id)}
        self.held: dict[tuple[str, int], dict[str, tuple[int, str]]] = {}
        self._seq = 0

    def _random_allocate(self):
        node_id = self.rng.choice(sorted(self.topology.nodes))
        node = self.topology.nodes[node_id]
        healthy = [d.device_id for d in node.devices if d.healthy]
        if not healthy:
            return None
        dev = self.rng.choice(healthy)
        shares = self.held.get((node_id, dev), {})
        free = MILLI - sum(m for m, _ in shares.values())
        if free <= 0:
            return None
        milli = MILLI if free == MILLI and self.rng.random() < 0.6 else self.rng.randint(1, free)
        self._seq += 1
        pod_id = f"p{self._seq}"
        tenant = self.rng.choice(self.tenants)
        self.held.setdefault((node_id, dev), {})[pod_id] = (milli, tenant)
        return allocate(node_id, dev, pod_id, milli, tenant, node.gpu_type)

    def _random_release(self):
        keys = sorted(k for k, v in self.held.items() if v)
        if not keys:
            return None
        node_id, dev = self.rng.choice(keys)
        shares = self.held[(node_id, dev)]
        pod_id = self.rng.choice(sorted(shares))
        _, tenant = shares.pop(pod_id)
        if not shares:
            del self.held[(node_id, dev)]
        gpu_type = self.topology.nodes[node_id].gpu_type
        return release(node_id, dev, pod_id, tenant, gpu_type)

    def batch(self, size: int) -> list:
        changes = []
        for _ in range(size):
            if self.held and self.rng.random() < 0.45:
                ch = self._random_release()
            else:
                ch = self._random_allocate() or self._random_release()
            if ch is not None:
                changes.append(ch)
        return changes


def recount_fragmented(snapshot) -> int:
    """Independent fragmented-node count by full scan: some allocation
    on the node but not every healthy device holds a share."""
    count = 0
    for node in snapshot.topology.nodes.values():
        state = snapshot.node_state(node.node_id)
        if not state.alloc:
            continue
        for d in node.devices:
            if d.healthy and d.device_id not in state.alloc:
                count += 1
                break
    return count


def recount_allocated(snapshot) -> int:
    return sum(
        m
        for state in snapshot.node_states.values()
        for shares in state.alloc.values()
        for _, m in shares
    )


def pareto_gap_stats(seed: int = 11, n_cases: int = 400):
    """Randomized gang placement audit against exhaustive enumeration.

    Each case builds a small random topology, pre-fills whole devices,
    then enumerates every pod-to-node map to find the feasible set of
    (max comm tier, node count) outcomes.  The greedy result is a gap
    when some feasible point strictly dominates it on both axes.
    Returns (cases, infeasible, gap_log) where gap_log holds one tuple
    per dominated case.
    """
    import itertools
    import random

    from gpuschedsim.cluster import MILLI, load_topology, make_topology, node_comm_tier
    from gpuschedsim.placement import PlacementRequest, PodRequest, place
    from gpuschedsim.snapshot import advance_snapshot, allocate, initial_snapshot

    rng = random.Random(seed)
    cases = infeasible = 0
    gap_log = []
    for case in range(n_cases):
        node_count = rng.randint(4, 16)
        gpn = rng.choice([4, 8])
        topo = load_topology(make_topology(
            node_count=node_count, gpus_per_node=gpn,
            nodes_per_group=rng.randint(2, 4),
            groups_per_spine=2, spines_per_superspine=2,
        ))
        snap = initial_snapshot(topo)
        changes = []
        for nid in topo.nodes:
            for d in range(rng.randint(0, gpn)):
                changes.append(allocate(nid, d, f"bg/{nid}/{d}", MILLI, "bg", "default"))
        if changes:
            snap = advance_snapshot(snap, changes)
        sizes = [1, 2, 4] + ([8] if gpn == 8 else [])
        pods = [rng.choice(sizes) for _ in range(rng.randint(1, 4))]
        req = PlacementRequest(
            job_id="j",
            pods=tuple(
                PodRequest(f"j/{i}", "default", s * MILLI) for i, s in enumerate(pods)
            ),
            gang=True,
            policy="e_binpack",
        )
        dec = place(req, snap, topo)

        free = {nid: len(snap.free_whole_devices(topo.nodes[nid])) for nid in topo.nodes}
        node_ids = sorted(topo.nodes)
        feasible = set()
        for combo in itertools.product(node_ids, repeat=len(pods)):
            need: dict[str, int] = {}
            for nid, s in zip(combo, pods):
                need[nid] = need.get(nid, 0) + s
            if any(n > free[nid] for nid, n in need.items()):
                continue
            used = sorted(set(combo))
            tier = max(
                (node_comm_tier(a, b, topo) for a, b in itertools.combinations(used, 2)),
                default=0,
            )
            feasible.add((tier, len(used)))
        cases += 1
        if not feasible:
            infeasible += 1
            assert not dec.success, f"case {case}: placed an infeasible gang {pods}"
            continue
        assert dec.success, f"case {case}: failed a feasible gang {pods}"
        used = dec.nodes_used()
        tier = max(
            (node_comm_tier(a, b, topo) for a, b in itertools.combinations(used, 2)),
            default=0,
        )
        mine = (tier, len(used))
        if any(p != mine and p[0] <= mine[0] and p[1] <= mine[1] for p in feasible):
            gap_log.append((case, tuple(pods), mine, tuple(sorted(feasible))))
    return cases, infeasible, gap_log


def placed_pods_by_job(snapshot) -> dict[str, set[str]]:
    """Map job_id -> pod ids currently holding any device share."""
    out: dict[str, set[str]] = {}
    for state in snapshot.node_states.values():
        for shares in state.alloc.values():
            for pod_id, _ in shares:
                job_id = pod_id.rsplit("/", 1)[0]
                out.setdefault(job_id, set()).add(pod_id)
    return out
