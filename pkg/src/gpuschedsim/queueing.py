"""Queue-scheduler tier: tenant queues, two-tier admission, preemption plans.

Jobs pass static quota admission (per-tenant budgets, with borrowing
between shared-mode tenants) and dynamic resource admission (enough
free healthy GPUs of each requested type) before reaching placement.
Three queueing policies order dispatch: ``strict_fifo`` stops at the
first job that does not fit, ``best_effort`` skips over it, and
``backfill`` skips over it but tags bypassing jobs and preempts them
once the blocked head has waited past a timeout.
"""
from __future__ import annotations

import itertools
from bisect import insort
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .cluster import MILLI
from .snapshot import ResourceSnapshot
from .workload import Job, PodSpec, TenantQuota

QUEUE_POLICIES = ("strict_fifo", "best_effort", "backfill")


class QueueingError(ValueError):
    pass


# -- runtime wrappers ------------------------------------------------------

@dataclass
class PodRun:
    """Runtime state of one pod of a job."""

    pod_id: str
    spec: PodSpec
    state: str = "pending"  # pending | held | running | done
    node_id: Optional[str] = None
    devices: tuple[tuple[int, int], ...] = ()  # (device_id, milli)
    nic_ids: tuple[str, ...] = ()
    held_since: Optional[float] = None  # allocation instant
    start_time: Optional[float] = None  # running instant

    @property
    def placed(self) -> bool:
        return self.state in ("held", "running")


@dataclass
class JobRun:
    """Runtime state of a job as it moves through the scheduler."""

    job: Job
    pods: list[PodRun] = field(default_factory=list)
    state: str = "queued"  # queued | active | finished | failed
    dispatch_time: Optional[float] = None
    requeue_count: int = 0
    preempt_count: int = 0
    backfilled: bool = False
    last_preempted_cycle: Optional[int] = None
    epoch: int = 0

    def __post_init__(self):
        if not self.pods:
            self.pods = [
                PodRun(pod_id=f"{self.job.job_id}/{i}", spec=spec)
                for i, spec in enumerate(self.job.pod_specs)
            ]

    @property
    def job_id(self) -> str:
        return self.job.job_id

    @property
    def tenant_id(self) -> str:
        return self.job.tenant_id

    @property
    def priority(self) -> int:
        return self.job.priority

    @property
    def submit_time(self) -> float:
        return self.job.submit_time

    @property
    def gang(self) -> bool:
        return self.job.gang

    def pending_pods(self) -> list[PodRun]:
        return [p for p in self.pods if p.state == "pending"]

    def placed_pods(self) -> list[PodRun]:
        return [p for p in self.pods if p.placed]

    def pending_demand_by_type(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.pending_pods():
            out[p.spec.gpu_type] = out.get(p.spec.gpu_type, 0) + p.spec.gpus_milli
        return out

    def held_by_type(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.placed_pods():
            out[p.spec.gpu_type] = out.get(p.spec.gpu_type, 0) + p.spec.gpus_milli
        return out

    def earliest_hold(self) -> float:
        times = [p.held_since for p in self.pods if p.held_since is not None]
        return min(times) if times else float("inf")


def order_key(run: JobRun) -> tuple:
    """Queue ordering: priority desc, submit time asc, demand asc, id."""
    return (-run.priority, run.submit_time, run.job.total_milli, run.job_id)


@dataclass
class TenantQueue:
    """Pending jobs of one tenant, kept in dispatch order."""

    tenant_id: str
    items: list[JobRun] = field(default_factory=list)

    def enqueue(self, run: JobRun) -> None:
        insort(self.items, run, key=order_key)

    def remove(self, run: JobRun) -> None:
        self.items.remove(run)

    def __len__(self) -> int:
        return len(self.items)


# -- admission -------------------------------------------------------------

@dataclass(frozen=True)
class BorrowLoan:
    lender: str
    gpu_type: str
    milli: int


@dataclass
class AdmissionDecision:
    job_id: str
    static_pass: bool
    dynamic_pass: Optional[bool] = None
    reason: str = ""
    borrow_plan: tuple[BorrowLoan, ...] = ()
    loan_blocked: bool = False  # own quota would suffice were loans returned


class QuotaLedger:
    """Tracks per-tenant quota usage and inter-tenant loans.

    Tenants without a configured quota are unlimited: they always pass
    static admission and never lend.  Loans are recorded per borrowing
    job and repaid when that job's usage drains to zero.
    """

    def __init__(self, quotas: Optional[dict[str, TenantQuota]] = None):
        self.tenants: dict[str, TenantQuota] = quotas or {}
        self.job_loans: dict[str, list[BorrowLoan]] = {}
        self.job_usage: dict[str, dict[str, int]] = {}

    # tentative in-cycle deltas live in an overlay so selection can
    # account for jobs picked earlier in the same cycle
    def view(self) -> "LedgerView":
        return LedgerView(self)

    def _headroom(self, quota: TenantQuota, gpu_type: str,
                  extra_used: int = 0, extra_lent: int = 0) -> int:
        return (
            quota.quota.get(gpu_type, 0)
            - quota.used.get(gpu_type, 0) - extra_used
            - quota.lent_out.get(gpu_type, 0) - extra_lent
        )

    def static_check(
        self,
        tenant_id: str,
        demand: dict[str, int],
        overlay: Optional["LedgerView"] = None,
    ) -> AdmissionDecision:
        dec = AdmissionDecision(job_id="", static_pass=True)
        quota = self.tenants.get(tenant_id)
        if quota is None:
            return dec
        extra_used = overlay.used if overlay else {}
        extra_lent = overlay.lent if overlay else {}
        loans: list[BorrowLoan] = []
        loan_blocked = False
        for gpu_type in sorted(demand):
            need = demand[gpu_type]
            head = self._headroom(
                quota, gpu_type,
                extra_used.get((tenant_id, gpu_type), 0),
                extra_lent.get((tenant_id, gpu_type), 0),
            )
            shortfall = need - max(head, 0)
            if shortfall <= 0:
                continue
            own_budget = quota.quota.get(gpu_type, 0) - quota.used.get(gpu_type, 0) \
                - extra_used.get((tenant_id, gpu_type), 0)
            if own_budget >= need:
                loan_blocked = True
            if quota.mode == "isolated":
                return AdmissionDecision(
                    job_id="", static_pass=False,
                    reason=f"quota exceeded for {gpu_type}",
                    loan_blocked=loan_blocked,
                )
            for lender_id in sorted(self.tenants):
                if shortfall <= 0:
                    break
                lender = self.tenants[lender_id]
                if lender_id == tenant_id or lender.mode != "shared":
                    continue
                spare = self._headroom(
                    lender, gpu_type,
                    extra_used.get((lender_id, gpu_type), 0),
                    extra_lent.get((lender_id, gpu_type), 0),
                )
                spare -= sum(
                    l.milli for l in loans
                    if l.lender == lender_id and l.gpu_type == gpu_type
                )
                if spare <= 0:
                    continue
                amount = min(spare, shortfall)
                loans.append(BorrowLoan(lender_id, gpu_type, amount))
                shortfall -= amount
            if shortfall > 0:
                return AdmissionDecision(
                    job_id="", static_pass=False,
                    reason=f"quota exceeded for {gpu_type}, no lender capacity",
                    loan_blocked=loan_blocked,
                )
        dec.borrow_plan = tuple(loans)
        return dec

    def commit(self, run: JobRun, demand: dict[str, int],
               borrow_plan: Iterable[BorrowLoan]) -> None:
        quota = self.tenants.get(run.tenant_id)
        usage = self.job_usage.setdefault(run.job_id, {})
        for gpu_type, milli in demand.items():
            usage[gpu_type] = usage.get(gpu_type, 0) + milli
            if quota is not None:
                quota.used[gpu_type] = quota.used.get(gpu_type, 0) + milli
        for loan in borrow_plan:
            lender = self.tenants[loan.lender]
            lender.lent_out[loan.gpu_type] = (
                lender.lent_out.get(loan.gpu_type, 0) + loan.milli
            )
            if quota is not None:
                quota.borrowed_in[loan.gpu_type] = (
                    quota.borrowed_in.get(loan.gpu_type, 0) + loan.milli
                )
            self.job_loans.setdefault(run.job_id, []).append(loan)

    def release_usage(self, run: JobRun, by_type: dict[str, int]) -> None:
        quota = self.tenants.get(run.tenant_id)
        usage = self.job_usage.get(run.job_id)
        for gpu_type, milli in by_type.items():
            if usage is not None:
                usage[gpu_type] = usage.get(gpu_type, 0) - milli
            if quota is not None:
                quota.used[gpu_type] = quota.used.get(gpu_type, 0) - milli
        if usage is not None and all(v <= 0 for v in usage.values()):
            self.settle_job(run)

    def settle_job(self, run: JobRun) -> None:
        """Repay the job's loans; called once its usage drains to zero."""
        quota = self.tenants.get(run.tenant_id)
        for loan in self.job_loans.pop(run.job_id, []):
            lender = self.tenants[loan.lender]
            lender.lent_out[loan.gpu_type] -= loan.milli
            if quota is not None:
                quota.borrowed_in[loan.gpu_type] -= loan.milli
        self.job_usage.pop(run.job_id, None)

    def loans_from(self, lender_id: str) -> dict[str, dict[str, int]]:
        """borrowing job_id -> {gpu_type: milli} for loans from one lender."""
        out: dict[str, dict[str, int]] = {}
        for job_id, loans in self.job_loans.items():
            for loan in loans:
                if loan.lender == lender_id:
                    per = out.setdefault(job_id, {})
                    per[loan.gpu_type] = per.get(loan.gpu_type, 0) + loan.milli
        return out

    def check_invariants(self) -> None:
        """Raises AssertionError if conservation or balance is violated."""
        types = set()
        for q in self.tenants.values():
            types |= set(q.quota) | set(q.used) | set(q.lent_out) | set(q.borrowed_in)
        for t in types:
            lent = sum(q.lent_out.get(t, 0) for q in self.tenants.values())
            borrowed = sum(q.borrowed_in.get(t, 0) for q in self.tenants.values())
            loan_total = sum(
                l.milli for loans in self.job_loans.values() for l in loans
                if l.gpu_type == t
            )
            assert lent == borrowed == loan_total, (
                f"loan ledger out of balance for {t}: {lent} lent, "
                f"{borrowed} borrowed, {loan_total} recorded"
            )
            net = sum(
                q.used.get(t, 0) - q.borrowed_in.get(t, 0) + q.lent_out.get(t, 0)
                for q in self.tenants.values()
            )
            cap = sum(q.quota.get(t, 0) for q in self.tenants.values())
            assert net <= cap, f"quota conservation violated for {t}: {net} > {cap}"
        for q in self.tenants.values():
            for t in types:
                used = q.used.get(t, 0)
                assert used >= 0, f"tenant {q.tenant_id} negative usage for {t}"
                if q.mode == "isolated":
                    assert used <= q.quota.get(t, 0), (
                        f"isolated tenant {q.tenant_id} exceeds quota for {t}"
                    )
                else:
                    assert used <= q.quota.get(t, 0) + q.borrowed_in.get(t, 0), (
                        f"tenant {q.tenant_id} exceeds quota plus borrows for {t}"
                    )


class LedgerView:
    """Tentative per-cycle deltas layered over a QuotaLedger."""

    def __init__(self, ledger: QuotaLedger):
        self.ledger = ledger
        self.used: dict[tuple[str, str], int] = {}
        self.lent: dict[tuple[str, str], int] = {}

    def static_check(self, tenant_id: str, demand: dict[str, int]) -> AdmissionDecision:
        return self.ledger.static_check(tenant_id, demand, overlay=self)

    def apply(self, tenant_id: str, demand: dict[str, int],
              borrow_plan: Iterable[BorrowLoan]) -> None:
        for gpu_type, milli in demand.items():
            key = (tenant_id, gpu_type)
            self.used[key] = self.used.get(key, 0) + milli
        for loan in borrow_plan:
            key = (loan.lender, loan.gpu_type)
            self.lent[key] = self.lent.get(key, 0) + loan.milli


def static_quota_admit(run: JobRun, ledger: QuotaLedger) -> AdmissionDecision:
    """Static admission of a job's currently pending demand."""
    dec = ledger.static_check(run.tenant_id, run.pending_demand_by_type())
    dec.job_id = run.job_id
    return dec


def dynamic_resource_admit(demand: dict[str, int], free: dict[str, int]) -> bool:
    """True when every requested GPU type has enough free healthy
    capacity, all types jointly (capacity, not placeability)."""
    return all(free.get(t, 0) >= milli for t, milli in demand.items())


# -- preemption ------------------------------------------------------------

@dataclass(frozen=True)
class VictimRef:
    job_id: str
    pod_id: Optional[str] = None  # None = whole gang job


@dataclass(frozen=True)
class PodLoc:
    pod_id: str
    node_id: str
    gpu_type: str
    milli: int
    devices: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class VictimCandidate:
    """A running job eligible for preemption, with where its pods sit."""

    job_id: str
    tenant_id: str
    priority: int
    start_time: float
    gang: bool
    backfilled: bool
    pods: tuple[PodLoc, ...]


@dataclass
class PreemptionPlan:
    """Minimal victim set to free resources for one beneficiary.

    ``kind`` is ``priority``, ``quota_reclaim`` or ``backfill_timeout``.
    Victims are ordered lowest priority first, then latest started.
    Gang victims appear as whole jobs; non-gang victims per pod.
    """

    kind: str
    beneficiary: str
    victims: tuple[VictimRef, ...]
    freed: dict[str, int]
    unmet: dict[str, int]


@dataclass(frozen=True)
class _Unit:
    ref: VictimRef
    priority: int
    start_time: float
    freed: tuple[tuple[str, int], ...]  # by gpu_type

    def freed_dict(self) -> dict[str, int]:
        return dict(self.freed)


def _covers(units: Iterable[_Unit], unmet: dict[str, int]) -> bool:
    total: dict[str, int] = {}
    for u in units:
        for t, m in u.freed:
            total[t] = total.get(t, 0) + m
    return all(total.get(t, 0) >= m for t, m in unmet.items())


def _unit_sort_key(u: _Unit) -> tuple:
    return (u.priority, -u.start_time, u.ref.job_id, u.ref.pod_id or "")


def _select_minimal(units: list[_Unit], unmet: dict[str, int]) -> Optional[list[_Unit]]:
    """Fewest units covering the unmet demand; among equal counts the
    lowest aggregate priority, then the canonical victim order.  Exact
    for small candidate sets, greedy with pruning otherwise."""
    units = sorted(units, key=_unit_sort_key)
    if not _covers(units, unmet):
        return None
    if len(units) <= 12:
        for k in range(1, len(units) + 1):
            best = None
            for combo in itertools.combinations(range(len(units)), k):
                chosen = [units[i] for i in combo]
                if not _covers(chosen, unmet):
                    continue
                key = (sum(u.priority for u in chosen), combo)
                if best is None or key < best[0]:
                    best = (key, chosen)
            if best is not None:
                return best[1]
        return None
    # greedy: take in canonical order until covered, then prune surplus
    chosen = []
    for u in units:
        chosen.append(u)
        if _covers(chosen, unmet):
            break
    for u in list(reversed(chosen)):
        rest = [x for x in chosen if x is not u]
        if _covers(rest, unmet):
            chosen = rest
    return chosen


def _units_for(candidates: Iterable[VictimCandidate],
               measure: Callable[[VictimCandidate], Optional[list[_Unit]]]) -> list[_Unit]:
    units: list[_Unit] = []
    for cand in candidates:
        got = measure(cand)
        if got:
            units.extend(got)
    return units


def build_preemption_plan(
    kind: str,
    beneficiary_id: str,
    beneficiary_priority: int,
    unmet: dict[str, int],
    candidates: list[VictimCandidate],
    *,
    exempt: frozenset[str] = frozenset(),
    lender_loans: Optional[dict[str, dict[str, int]]] = None,
) -> Optional[PreemptionPlan]:
    """Build a capacity-covering preemption plan, or None.

    ``unmet`` is the beneficiary's demand minus currently free capacity,
    per GPU type.  For ``quota_reclaim`` the covering measure is the
    loan amounts owed to the beneficiary's tenant (``lender_loans``,
    borrowing job -> amounts); victims are whole jobs since loans repay
    at job granularity.  For ``priority`` only strictly lower-priority
    victims are eligible.
    """
    unmet = {t: m for t, m in unmet.items() if m > 0}
    if not unmet:
        return None
    eligible = [
        c for c in candidates
        if c.job_id != beneficiary_id and c.job_id not in exempt
    ]
    if kind == "priority":
        eligible = [c for c in eligible if c.priority < beneficiary_priority]
    elif kind == "backfill_timeout":
        eligible = [c for c in eligible if c.backfilled]
    elif kind == "quota_reclaim":
        loans = lender_loans or {}
        eligible = [c for c in eligible if c.job_id in loans]
    else:
        raise QueueingError(f"unknown preemption kind {kind!r}")

    def measure(cand: VictimCandidate) -> Optional[list[_Unit]]:
        if kind == "quota_reclaim":
            owed = (lender_loans or {}).get(cand.job_id, {})
            freed = tuple(sorted((t, m) for t, m in owed.items() if m > 0))
            if not freed:
                return None
            return [_Unit(VictimRef(cand.job_id), cand.priority, cand.start_time, freed)]
        if cand.gang:
            total: dict[str, int] = {}
            for p in cand.pods:
                total[p.gpu_type] = total.get(p.gpu_type, 0) + p.milli
            freed = tuple(sorted(total.items()))
            return [_Unit(VictimRef(cand.job_id), cand.priority, cand.start_time, freed)]
        return [
            _Unit(
                VictimRef(cand.job_id, p.pod_id),
                cand.priority,
                cand.start_time,
                ((p.gpu_type, p.milli),),
            )
            for p in cand.pods
        ]

    units = _units_for(eligible, measure)
    chosen = _select_minimal(units, unmet)
    if not chosen:
        return None
    chosen = sorted(chosen, key=_unit_sort_key)
    freed: dict[str, int] = {}
    for u in chosen:
        for t, m in u.freed:
            freed[t] = freed.get(t, 0) + m
    return PreemptionPlan(
        kind=kind,
        beneficiary=beneficiary_id,
        victims=tuple(u.ref for u in chosen),
        freed=freed,
        unmet=unmet,
    )


def build_node_clearing_plan(
    beneficiary_id: str,
    pod_demands: list[tuple[str, int]],
    snapshot: ResourceSnapshot,
    candidates: list[VictimCandidate],
    *,
    exempt: frozenset[str] = frozenset(),
) -> Optional[PreemptionPlan]:
    """Backfill-timeout plan that clears whole devices so the
    beneficiary's pods actually fit, not just capacity-wise.

    Victim units are gang jobs or single non-gang pods whose shares sit
    on nodes the beneficiary needs.  Returns None if even preempting
    every eligible backfilled victim cannot host the pods.
    """
    eligible = [
        c for c in candidates
        if c.backfilled and c.job_id != beneficiary_id and c.job_id not in exempt
    ]
    units: dict[VictimRef, list[PodLoc]] = {}
    unit_meta: dict[VictimRef, VictimCandidate] = {}
    pod_to_ref: dict[str, VictimRef] = {}
    for cand in eligible:
        for p in cand.pods:
            ref = VictimRef(cand.job_id) if cand.gang else VictimRef(cand.job_id, p.pod_id)
            units.setdefault(ref, []).append(p)
            unit_meta[ref] = cand
            pod_to_ref[p.pod_id] = ref
    if not units:
        return None

    topo = snapshot.topology
    pools = sorted({t for t, _ in pod_demands})
    relevant = sorted(set().union(*(topo.pool_nodes(t) for t in pools)))
    pool_order = {t: sorted(topo.pool_nodes(t)) for t in pools}

    # necessary bound checked before the expensive assignment scan:
    # free devices plus devices held only by eligible victims must
    # cover the total and the largest pod, per pool
    needs_by_type: dict[str, list[int]] = {}
    for t, m in pod_demands:
        needs_by_type.setdefault(t, []).append(m // MILLI + (1 if m % MILLI else 0))
    for t, needs in needs_by_type.items():
        total_cap = 0
        best_cap = 0
        for node_id in pool_order[t]:
            node = topo.nodes[node_id]
            state = snapshot.node_state(node_id)
            cap = sum(
                1 for d in node.devices
                if d.healthy and d.device_id not in state.alloc
            )
            victim_only: dict[int, bool] = {}
            for pod, dev, _ in state.pods():
                victim_only[dev] = victim_only.get(dev, True) and pod in pod_to_ref
            cap += sum(1 for clearable in victim_only.values() if clearable)
            total_cap += cap
            best_cap = max(best_cap, cap)
        if total_cap < sum(needs) or best_cap < max(needs):
            return None

    def attempt(selected: set[VictimRef]) -> Optional[list[VictimRef]]:
        """Greedy pod-to-node assignment allowed to clear devices held
        only by ``selected`` units; returns the units actually taken."""
        free: dict[str, set[int]] = {}
        holders: dict[tuple[str, int], set[VictimRef]] = {}
        by_node: dict[str, list[tuple[str, int]]] = {r: [] for r in relevant}
        pinned: set[tuple[str, int]] = set()
        for node_id in relevant:
            node = topo.nodes[node_id]
            state = snapshot.node_state(node_id)
            free[node_id] = {
                d.device_id for d in node.devices
                if d.healthy and d.device_id not in state.alloc
            }
            # a device shared with any non-victim pod can never clear
            owners: dict[int, Optional[set[VictimRef]]] = {}
            for pod, dev, _ in state.pods():
                ref = pod_to_ref.get(pod)
                if ref is None or ref not in selected:
                    owners[dev] = None
                elif owners.get(dev, set()) is not None:
                    owners.setdefault(dev, set()).add(ref)
            for dev, refs in owners.items():
                key = (node_id, dev)
                if refs is None:
                    pinned.add(key)
                else:
                    holders[key] = refs
                    by_node[node_id].append(key)

        taken: set[VictimRef] = set()
        order: list[VictimRef] = []
        assigned: dict[str, int] = {}

        def take(ref: VictimRef) -> None:
            taken.add(ref)
            order.append(ref)
            # clearing a unit may free its devices on other nodes too
            for p in units[ref]:
                if p.node_id not in free:
                    continue
                for dev, _ in p.devices:
                    dk = (p.node_id, dev)
                    if dk in pinned or dev in free[p.node_id]:
                        continue
                    if holders.get(dk, set()) <= taken:
                        free[p.node_id].add(dev)

        for gpu_type, milli in sorted(pod_demands, key=lambda pm: -pm[1]):
            need = milli // MILLI + (1 if milli % MILLI else 0)
            best: Optional[tuple[tuple[int, str], str]] = None
            for node_id in pool_order[gpu_type]:
                free_now = len(free[node_id]) - assigned.get(node_id, 0)
                if free_now >= need:
                    best = ((0, node_id), node_id)
                    break
                gap = need - free_now
                new_units: set[VictimRef] = set()
                clearable = sorted(
                    (k for k in by_node[node_id] if k[1] not in free[node_id]),
                    key=lambda k: (len(holders[k] - taken), k),
                )
                for k in clearable:
                    new_units |= holders[k] - taken
                    gap -= 1
                    if gap == 0:
                        break
                if gap > 0:
                    continue
                key = (len(new_units), node_id)
                if best is None or key < best[0]:
                    best = (key, node_id)
            if best is None:
                return None
            node_id = best[1]
            gap = need - (len(free[node_id]) - assigned.get(node_id, 0))
            while gap > 0:
                clearable = sorted(
                    (k for k in by_node[node_id] if k[1] not in free[node_id]),
                    key=lambda k: (len(holders[k] - taken), k),
                )
                if not clearable:
                    return None
                k = clearable[0]
                for ref in sorted(holders[k] - taken,
                                  key=lambda r: (r.job_id, r.pod_id or "")):
                    take(ref)
                if k[1] not in free[node_id] and holders[k] <= taken:
                    free[node_id].add(k[1])
                gap = need - (len(free[node_id]) - assigned.get(node_id, 0))
            assigned[node_id] = assigned.get(node_id, 0) + need
        return order

    needed = attempt(set(units))
    if needed is None:
        return None
    chosen = set(needed)
    if len(chosen) <= 16:  # prune to an irreducible set
        for ref in sorted(chosen, key=lambda r: (r.job_id, r.pod_id or ""),
                          reverse=True):
            trial = chosen - {ref}
            if trial and attempt(trial) is not None:
                chosen = trial
    if not chosen:
        return None

    def unit_key(ref: VictimRef) -> tuple:
        meta = unit_meta[ref]
        return (meta.priority, -meta.start_time, ref.job_id, ref.pod_id or "")

    ordered = sorted(chosen, key=unit_key)
    freed: dict[str, int] = {}
    for ref in ordered:
        for p in units[ref]:
            freed[p.gpu_type] = freed.get(p.gpu_type, 0) + p.milli
    return PreemptionPlan(
        kind="backfill_timeout",
        beneficiary=beneficiary_id,
        victims=tuple(ordered),
        freed=freed,
        unmet={},
    )


# -- cycle selection --------------------------------------------------------

@dataclass
class CandidateDispatch:
    run: JobRun
    decision: AdmissionDecision
    backfill_tag: bool = False


@dataclass
class CycleSelection:
    dispatches: list[CandidateDispatch] = field(default_factory=list)
    blocked_head: Optional[JobRun] = None
    head_over_timeout: bool = False
    loan_blocked: list[tuple[JobRun, AdmissionDecision]] = field(default_factory=list)
    dynamic_failed: list[JobRun] = field(default_factory=list)


class QueueScheduler:
    """Per-tenant queues plus the cross-tenant selection logic."""

    def __init__(
        self,
        ledger: QuotaLedger,
        policy: str = "backfill",
        backfill_timeout: Optional[float] = None,
        merge: str = "ordered",
        requeue_limit: Optional[int] = None,
    ):
        if policy not in QUEUE_POLICIES:
            raise QueueingError(f"unknown queue policy {policy!r}")
        if merge not in ("ordered", "round_robin"):
            raise QueueingError(f"unknown merge mode {merge!r}")
        self.ledger = ledger
        self.policy = policy
        self.backfill_timeout = backfill_timeout
        self.merge = merge
        self.requeue_limit = requeue_limit
        self.queues: dict[str, TenantQueue] = {}
        # victims bound to a blocked head may not redispatch before it
        self.reservations: dict[str, set[str]] = {}

    def enqueue(self, run: JobRun) -> None:
        q = self.queues.setdefault(run.tenant_id, TenantQueue(run.tenant_id))
        q.enqueue(run)
        run.state = "queued"

    def remove(self, run: JobRun) -> None:
        q = self.queues.get(run.tenant_id)
        if q and run in q.items:
            q.remove(run)

    def requeue(self, run: JobRun, reason: str) -> str:
        """Re-enter the tenant queue keeping the original submit time.

        Returns the resulting job state: ``queued`` or ``failed`` if the
        retry limit is exhausted.
        """
        if run.state == "finished":
            raise QueueingError(f"cannot requeue finished job {run.job_id}")
        run.requeue_count += 1
        if self.requeue_limit is not None and run.requeue_count > self.requeue_limit:
            run.state = "failed"
            return "failed"
        if not any(run in q.items for q in self.queues.values()):
            self.enqueue(run)
        run.state = "queued"
        return "queued"

    def queued_runs(self) -> list[JobRun]:
        if self.merge == "round_robin":
            per_tenant = [q.items[:] for _, q in sorted(self.queues.items())]
            merged: list[JobRun] = []
            for layer in itertools.zip_longest(*per_tenant):
                merged.extend(r for r in layer if r is not None)
            return merged
        runs = [r for q in self.queues.values() for r in q.items]
        runs.sort(key=order_key)
        return runs

    def reserve(self, head_id: str, victim_ids: Iterable[str]) -> None:
        self.reservations.setdefault(head_id, set()).update(victim_ids)

    def release_reservation(self, head_id: str) -> None:
        self.reservations.pop(head_id, None)

    def _reserved_jobs(self) -> set[str]:
        queued_ids = {r.job_id for q in self.queues.values() for r in q.items}
        for head_id in list(self.reservations):
            if head_id not in queued_ids:
                del self.reservations[head_id]
        out: set[str] = set()
        for victims in self.reservations.values():
            out |= victims
        return out

    def select_candidates(
        self,
        snapshot: ResourceSnapshot,
        now: float,
    ) -> CycleSelection:
        """Run two-tier admission over the merged queue and pick the
        dispatch list for this cycle, tracking a blocked head for the
        backfill policy."""
        sel = CycleSelection()
        working = {
            t: snapshot.pool_free_milli(t) for t in snapshot.topology.node_pools
        }
        view = self.ledger.view()
        reserved = self._reserved_jobs()
        frozen = False

        for run in self.queued_runs():
            if run.job_id in reserved:
                continue
            demand = run.pending_demand_by_type()
            if not demand:
                continue
            dec = view.static_check(run.tenant_id, demand)
            dec.job_id = run.job_id
            if not dec.static_pass:
                if dec.loan_blocked:
                    sel.loan_blocked.append((run, dec))
                continue
            if frozen and sel.blocked_head is not None \
                    and run.priority <= sel.blocked_head.priority:
                continue
            unknown = [t for t in demand if t not in snapshot.topology.node_pools]
            dec.dynamic_pass = not unknown and dynamic_resource_admit(demand, working)
            if dec.dynamic_pass:
                view.apply(run.tenant_id, demand, dec.borrow_plan)
                for t, m in demand.items():
                    working[t] -= m
                sel.dispatches.append(
                    CandidateDispatch(
                        run=run,
                        decision=dec,
                        backfill_tag=self.policy == "backfill"
                        and sel.blocked_head is not None,
                    )
                )
                continue
            dec.reason = dec.reason or "insufficient free capacity"
            sel.dynamic_failed.append(run)
            if sel.blocked_head is None:
                sel.blocked_head = run
                if self.policy == "strict_fifo":
                    break
                if (
                    self.policy == "backfill"
                    and self.backfill_timeout is not None
                    and now - run.submit_time >= self.backfill_timeout
                ):
                    sel.head_over_timeout = True
                    frozen = True
        return sel
