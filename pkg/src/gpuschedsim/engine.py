"""Deterministic discrete-event simulation of the scheduling loop.

Events sit on one heap ordered by (time, kind rank, sequence), so two
runs over the same inputs replay the same event order and produce
byte-identical logs.  At each timestamp releases land before arrivals,
arrivals before starts, and the scheduling cycle runs last so it sees
every state change of that instant.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, TextIO

from .cluster import MILLI, ClusterTopology
from .metrics import MetricsAccumulator
from .placement import PlacementRequest, PodRequest, place
from .queueing import (
    AdmissionDecision,
    JobRun,
    PodLoc,
    PodRun,
    PreemptionPlan,
    QueueScheduler,
    QuotaLedger,
    VictimCandidate,
    build_node_clearing_plan,
    build_preemption_plan,
    dynamic_resource_admit,
    order_key,
)
from .snapshot import Change, SnapshotStore, allocate, release
from .workload import Job, TenantQuota, Trace

# heap rank per event kind: releases first, the cycle last
_RANK = {"finish": 0, "arrival": 2, "start": 3, "cycle": 4}


class EngineError(RuntimeError):
    pass


@dataclass
class SimConfig:
    """Knobs for one simulation run."""

    cycle_period: float = 10.0
    queue_policy: str = "backfill"
    placement_policy: str = "e_binpack"
    policy_by_kind: dict[str, str] = field(default_factory=dict)
    topology_aware: bool = True
    backfill_timeout: Optional[float] = None  # None = 10 cycle periods
    preemption: bool = True
    victim_exempt_cycles: int = 5
    startup_latency: float = 0.0
    preemption_overhead: Optional[float] = None  # None = one cycle period
    horizon: Optional[float] = None  # None = run until drained
    # False: wait spans submit to first dispatch across requeue loops
    requeue_resets_wait: bool = False
    metrics_tick: float = 60.0
    healthy_only_metrics: bool = False
    snapshot_mode: str = "incremental"
    merge: str = "ordered"
    requeue_limit: Optional[int] = None
    max_cycles: Optional[int] = None
    check_invariants: bool = False

    def effective_backfill_timeout(self) -> float:
        if self.backfill_timeout is not None:
            return self.backfill_timeout
        return 10.0 * self.cycle_period

    def effective_preemption_overhead(self) -> float:
        if self.preemption_overhead is not None:
            return self.preemption_overhead
        return self.cycle_period

    def policy_for(self, job: Job) -> str:
        policy = self.policy_by_kind.get(job.kind, self.placement_policy)
        if policy == "e_spread" and job.gang:
            return "e_binpack"
        return policy


@dataclass
class JobStats:
    job_id: str
    submit_time: float
    first_dispatch: Optional[float] = None
    last_dispatch: Optional[float] = None
    first_start: Optional[float] = None
    finish_time: Optional[float] = None
    preemptions: int = 0
    state: str = "pending"
    backfilled: bool = False
    nodes_used: int = 0
    groups_used: int = 0

    @property
    def wait(self) -> Optional[float]:
        if self.first_dispatch is None:
            return None
        return self.first_dispatch - self.submit_time


@dataclass
class SimResult:
    end_time: float
    cycles: int
    events: int
    metrics: MetricsAccumulator
    report: dict
    stats: dict[str, JobStats]
    counters: dict[str, int]


class Simulation:
    """One run over a trace; use :func:`run_simulation` for the plain API."""

    def __init__(
        self,
        trace: Trace,
        topology: ClusterTopology,
        quotas: Optional[dict[str, TenantQuota]] = None,
        config: Optional[SimConfig] = None,
        event_log: Optional[TextIO] = None,
        on_event: Optional[Callable[[dict], None]] = None,
    ):
        self.trace = trace
        self.topology = topology
        self.config = config or SimConfig()
        self.event_log = event_log
        self.on_event = on_event
        self.ledger = QuotaLedger(quotas)
        self.scheduler = QueueScheduler(
            self.ledger,
            policy=self.config.queue_policy,
            backfill_timeout=self.config.effective_backfill_timeout(),
            merge=self.config.merge,
            requeue_limit=self.config.requeue_limit,
        )
        self.store = SnapshotStore(topology, mode=self.config.snapshot_mode)
        self.snapshot = self.store.current
        self.metrics = MetricsAccumulator(
            topology, healthy_only=self.config.healthy_only_metrics
        )
        self.runs: dict[str, JobRun] = {}
        self.stats: dict[str, JobStats] = {}
        self.counters: dict[str, int] = {
            "dispatches": 0,
            "gang_shape_failures": 0,
            "preemption_plans": 0,
            "preempted_jobs": 0,
            "preempted_pods": 0,
            "rejected": 0,
            "finished": 0,
            "failed": 0,
        }
        self.gang_remaining: dict[str, float] = {}
        self.pod_remaining: dict[str, float] = {}
        self.pod_epoch: dict[str, int] = {}
        self._last_enqueue: dict[str, float] = {}
        self._heap: list[tuple] = []
        self._seq = 0
        self._log_seq = 0
        self._cycle_no = 0
        self._events = 0
        self._live = len(trace.jobs)
        self._arrivals_left = len(trace.jobs)
        self._next_tick = 0.0
        self.now = 0.0
        self._jobs = {j.job_id: j for j in trace.jobs}

    # -- plumbing ------------------------------------------------------------

    def _push(self, time: float, kind: str, job_id: str = "",
              pod_id: Optional[str] = None, epoch: int = 0) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, _RANK[kind], self._seq, kind,
                                    job_id, pod_id, epoch))

    def _log(self, kind: str, **fields) -> None:
        entry = {"t": round(self.now, 6), "seq": self._log_seq, "kind": kind}
        entry.update(fields)
        self._log_seq += 1
        if self.event_log is not None:
            self.event_log.write(
                json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n"
            )
        if self.on_event is not None:
            self.on_event(entry)

    def _sample(self) -> None:
        self.metrics.sample(self.now, self.snapshot)

    def _advance(self, changes: list[Change]) -> None:
        if changes:
            self.snapshot = self.store.advance(changes)

    def _stat(self, job_id: str) -> JobStats:
        return self.stats[job_id]

    def _finish_job_accounting(self, run: JobRun, state: str) -> None:
        run.state = state
        self._live -= 1
        self.counters["finished" if state == "finished" else "failed"] += 1
        st = self._stat(run.job_id)
        st.state = state
        if state == "finished":
            st.finish_time = self.now

    # -- job feasibility at arrival -------------------------------------------

    def _fits_cluster_at_all(self, job: Job) -> Optional[str]:
        """Reason the job can never run on this topology, or None."""
        demand = job.demand_by_type()
        for gpu_type, milli in demand.items():
            if gpu_type not in self.topology.node_pools:
                return f"unknown gpu type {gpu_type!r}"
            if milli > self.topology.healthy_milli(gpu_type):
                return f"demand exceeds healthy {gpu_type} capacity"
        for spec in job.pod_specs:
            whole, frac = divmod(spec.gpus_milli, MILLI)
            need = whole + (1 if frac else 0)
            pool = self.topology.pool_nodes(spec.gpu_type)
            if not any(
                len(self.topology.nodes[n].healthy_devices) >= need for n in pool
            ):
                return "pod larger than any node"
        if job.needs_hbd:
            if not self.topology.hbds:
                return "no high-bandwidth domain in topology"
            fits = False
            for members in self.topology.hbds.values():
                cap: dict[str, int] = {}
                for nid in members:
                    node = self.topology.nodes[nid]
                    cap[node.gpu_type] = (
                        cap.get(node.gpu_type, 0)
                        + len(node.healthy_devices) * MILLI
                    )
                if all(cap.get(t, 0) >= m for t, m in demand.items()):
                    fits = True
                    break
            if not fits:
                return "no high-bandwidth domain large enough"
        quota = self.ledger.tenants.get(job.tenant_id)
        if quota is not None:
            for gpu_type, milli in demand.items():
                ceiling = quota.quota.get(gpu_type, 0)
                if quota.mode == "shared":
                    ceiling += sum(
                        q.quota.get(gpu_type, 0)
                        for q in self.ledger.tenants.values()
                        if q.tenant_id != quota.tenant_id and q.mode == "shared"
                    )
                if milli > ceiling:
                    return f"demand can never pass the {gpu_type} quota"
        return None

    # -- event handlers --------------------------------------------------------

    def _handle_arrival(self, job_id: str) -> None:
        job = self._jobs[job_id]
        run = JobRun(job)
        self.runs[job_id] = run
        self._arrivals_left -= 1
        reason = self._fits_cluster_at_all(job)
        if reason is not None:
            self._finish_job_accounting(run, "failed")
            self.counters["rejected"] += 1
            self._log("reject", job=job_id, reason=reason)
            return
        if job.gang:
            self.gang_remaining[job_id] = job.duration
        else:
            for pod in run.pods:
                self.pod_remaining[pod.pod_id] = job.duration
                self.pod_epoch[pod.pod_id] = 0
        self.scheduler.enqueue(run)
        self._last_enqueue[job_id] = self.now
        self._log("arrival", job=job_id, tenant=run.tenant_id,
                  gpus=round(job.total_milli / MILLI, 3))

    def _handle_start(self, job_id: str, pod_id: Optional[str], epoch: int) -> None:
        run = self.runs.get(job_id)
        if run is None:
            return
        if pod_id is None:
            if epoch != run.epoch or run.state in ("finished", "failed"):
                return
            if not run.placed_pods():
                return
            for pod in run.placed_pods():
                pod.state = "running"
                pod.start_time = self.now
            self._push(self.now + self.gang_remaining[job_id], "finish",
                       job_id, None, run.epoch)
            st = self._stat(job_id)
            if st.first_start is None:
                st.first_start = self.now
            self._log("start", job=job_id)
            return
        if epoch != self.pod_epoch.get(pod_id, -1):
            return
        pod = self._pod(run, pod_id)
        if pod is None or pod.state != "held":
            return
        pod.state = "running"
        pod.start_time = self.now
        self._push(self.now + self.pod_remaining[pod_id], "finish",
                   job_id, pod_id, epoch)
        st = self._stat(job_id)
        if st.first_start is None:
            st.first_start = self.now
            self._log("start", job=job_id)

    def _pod(self, run: JobRun, pod_id: str) -> Optional[PodRun]:
        for pod in run.pods:
            if pod.pod_id == pod_id:
                return pod
        return None

    def _release_pod(self, run: JobRun, pod: PodRun,
                     changes: list[Change], freed: dict[str, int]) -> None:
        for dev, _ in pod.devices:
            changes.append(release(pod.node_id, dev, pod.pod_id,
                                   run.tenant_id, pod.spec.gpu_type))
        freed[pod.spec.gpu_type] = (
            freed.get(pod.spec.gpu_type, 0) + pod.spec.gpus_milli
        )
        pod.node_id = None
        pod.devices = ()
        pod.nic_ids = ()
        pod.held_since = None
        pod.start_time = None

    def _handle_finish(self, job_id: str, pod_id: Optional[str], epoch: int) -> None:
        run = self.runs.get(job_id)
        if run is None or run.state in ("finished", "failed"):
            return
        changes: list[Change] = []
        freed: dict[str, int] = {}
        if pod_id is None:
            if epoch != run.epoch:
                return
            for pod in run.placed_pods():
                self._release_pod(run, pod, changes, freed)
                pod.state = "done"
            self._advance(changes)
            self.ledger.release_usage(run, freed)
            self._finish_job_accounting(run, "finished")
            self._log("finish", job=job_id)
            self._sample()
            return
        if epoch != self.pod_epoch.get(pod_id, -1):
            return
        pod = self._pod(run, pod_id)
        if pod is None or pod.state != "running":
            return
        self._release_pod(run, pod, changes, freed)
        pod.state = "done"
        self.pod_remaining[pod_id] = 0.0
        self._advance(changes)
        self.ledger.release_usage(run, freed)
        if all(p.state == "done" for p in run.pods):
            self.scheduler.remove(run)
            self._finish_job_accounting(run, "finished")
            self._log("finish", job=job_id)
        self._sample()

    # -- dispatch ---------------------------------------------------------------

    def _dispatch(self, run: JobRun, decision: AdmissionDecision,
                  backfill_tag: bool, extra_delay: float = 0.0) -> bool:
        """Place the run's pending pods; returns True when all landed."""
        job = run.job
        pending = run.pending_pods()
        demand = run.pending_demand_by_type()
        existing: dict[str, int] = {}
        for pod in run.placed_pods():
            existing[pod.node_id] = existing.get(pod.node_id, 0) + 1
        request = PlacementRequest(
            job_id=job.job_id,
            pods=tuple(
                PodRequest(p.pod_id, p.spec.gpu_type, p.spec.gpus_milli)
                for p in pending
            ),
            gang=job.gang,
            policy=self.config.policy_for(job),
            needs_hbd=job.needs_hbd,
            existing=existing,
        )
        pdec = place(request, self.snapshot, self.topology,
                     topology_aware=self.config.topology_aware)
        if job.gang and not pdec.success:
            self.counters["gang_shape_failures"] += 1
            return False
        if not pdec.assignments:
            return False
        self.ledger.commit(run, demand, decision.borrow_plan)
        changes: list[Change] = []
        placed: dict[str, int] = {}
        placed_pods: list[PodRun] = []
        for pod in pending:
            got = pdec.assignments.get(pod.pod_id)
            if got is None:
                continue
            pod.state = "held"
            pod.node_id = got.node_id
            pod.devices = got.devices
            pod.nic_ids = got.nic_ids
            pod.held_since = self.now
            placed[pod.spec.gpu_type] = (
                placed.get(pod.spec.gpu_type, 0) + pod.spec.gpus_milli
            )
            placed_pods.append(pod)
            for dev, milli in got.devices:
                changes.append(allocate(got.node_id, dev, pod.pod_id, milli,
                                        run.tenant_id, pod.spec.gpu_type))
        unplaced = {
            t: demand[t] - placed.get(t, 0)
            for t in demand if demand[t] > placed.get(t, 0)
        }
        if unplaced:
            self.ledger.release_usage(run, unplaced)
        self._advance(changes)
        run.state = "active"
        run.dispatch_time = self.now
        if backfill_tag:
            run.backfilled = True
        st = self._stat(run.job_id)
        if st.first_dispatch is None:
            st.first_dispatch = self.now
            since = (
                self._last_enqueue.get(run.job_id)
                if self.config.requeue_resets_wait else None
            )
            self.metrics.record_wait(job, self.now, since=since)
        st.last_dispatch = self.now
        st.backfilled = run.backfilled
        self.counters["dispatches"] += 1
        if job.gang:
            nodes = pdec.nodes_used()
            groups = pdec.groups_used(self.topology)
            st.nodes_used = len(nodes)
            st.groups_used = len(groups)
            self.metrics.record_consolidation(job, len(nodes), len(groups))
        if not run.pending_pods():
            self.scheduler.remove(run)
            self.scheduler.release_reservation(run.job_id)
        delay = self.config.startup_latency + extra_delay
        if job.gang:
            self._push(self.now + delay, "start", run.job_id, None, run.epoch)
        else:
            for pod in placed_pods:
                self._push(self.now + delay, "start", run.job_id, pod.pod_id,
                           self.pod_epoch[pod.pod_id])
        self._log(
            "dispatch", job=run.job_id, pods=len(placed_pods),
            nodes=list(pdec.nodes_used()), backfill=run.backfilled,
            borrowed=bool(decision.borrow_plan),
        )
        self._sample()
        return pdec.success

    def _retry_dispatch(self, run: JobRun, extra_delay: float = 0.0) -> bool:
        demand = run.pending_demand_by_type()
        if not demand:
            return False
        dec = self.ledger.static_check(run.tenant_id, demand)
        dec.job_id = run.job_id
        if not dec.static_pass:
            return False
        free = {t: self.snapshot.pool_free_milli(t) for t in demand
                if t in self.topology.node_pools}
        if not dynamic_resource_admit(demand, free):
            return False
        return self._dispatch(run, dec, backfill_tag=False,
                              extra_delay=extra_delay)

    # -- preemption ---------------------------------------------------------------

    def _victim_candidates(self) -> list[VictimCandidate]:
        out = []
        for run in self.runs.values():
            pods = run.placed_pods()
            if not pods or run.state in ("finished", "failed"):
                continue
            locs = tuple(
                PodLoc(
                    pod_id=p.pod_id,
                    node_id=p.node_id,
                    gpu_type=p.spec.gpu_type,
                    milli=p.spec.gpus_milli,
                    devices=p.devices,
                )
                for p in pods
            )
            out.append(
                VictimCandidate(
                    job_id=run.job_id,
                    tenant_id=run.tenant_id,
                    priority=run.priority,
                    start_time=run.dispatch_time or 0.0,
                    gang=run.gang,
                    backfilled=run.backfilled,
                    pods=locs,
                )
            )
        out.sort(key=lambda c: c.job_id)
        return out

    def _exempt_victims(self) -> frozenset[str]:
        window = self.config.victim_exempt_cycles
        out = set()
        for run in self.runs.values():
            if run.last_preempted_cycle is None:
                continue
            if self._cycle_no - run.last_preempted_cycle <= window:
                out.add(run.job_id)
        return frozenset(out)

    def _preempt_whole_job(self, run: JobRun, kind: str) -> None:
        changes: list[Change] = []
        freed: dict[str, int] = {}
        started = [p for p in run.placed_pods() if p.state == "running"]
        if run.gang and started:
            elapsed = self.now - started[0].start_time
            self.gang_remaining[run.job_id] = max(
                self.gang_remaining[run.job_id] - elapsed, 0.0
            )
        for pod in run.placed_pods():
            if not run.gang and pod.state == "running":
                elapsed = self.now - pod.start_time
                self.pod_remaining[pod.pod_id] = max(
                    self.pod_remaining[pod.pod_id] - elapsed, 0.0
                )
            if not run.gang:
                self.pod_epoch[pod.pod_id] += 1
            self._release_pod(run, pod, changes, freed)
            pod.state = "pending"
        run.epoch += 1
        self._advance(changes)
        self.ledger.release_usage(run, freed)
        run.preempt_count += 1
        run.last_preempted_cycle = self._cycle_no
        self._stat(run.job_id).preemptions += 1
        self.counters["preempted_jobs"] += 1
        state = self.scheduler.requeue(run, kind)
        if state == "failed":
            self._finish_job_accounting(run, "failed")
            self._log("job_failed", job=run.job_id, reason="requeue limit")
        else:
            self._last_enqueue[run.job_id] = self.now

    def _preempt_single_pod(self, run: JobRun, pod: PodRun, kind: str) -> None:
        changes: list[Change] = []
        freed: dict[str, int] = {}
        if pod.state == "running":
            elapsed = self.now - pod.start_time
            self.pod_remaining[pod.pod_id] = max(
                self.pod_remaining[pod.pod_id] - elapsed, 0.0
            )
        self.pod_epoch[pod.pod_id] += 1
        self._release_pod(run, pod, changes, freed)
        pod.state = "pending"
        self._advance(changes)
        self.ledger.release_usage(run, freed)
        run.preempt_count += 1
        run.last_preempted_cycle = self._cycle_no
        self._stat(run.job_id).preemptions += 1
        self.counters["preempted_pods"] += 1
        state = self.scheduler.requeue(run, kind)
        if state != "failed":
            self._last_enqueue[run.job_id] = self.now
        if state == "failed":
            leftover: list[Change] = []
            lfreed: dict[str, int] = {}
            for p in run.placed_pods():
                self.pod_epoch[p.pod_id] += 1
                self._release_pod(run, p, leftover, lfreed)
                p.state = "pending"
            self._advance(leftover)
            if lfreed:
                self.ledger.release_usage(run, lfreed)
            self._finish_job_accounting(run, "failed")
            self._log("job_failed", job=run.job_id, reason="requeue limit")

    def _execute_plan(self, plan: PreemptionPlan) -> bool:
        """Preempt every victim, or abort untouched if any is stale."""
        for ref in plan.victims:
            run = self.runs.get(ref.job_id)
            if run is None or run.state in ("finished", "failed"):
                return False
            if ref.pod_id is None:
                if not run.placed_pods():
                    return False
            else:
                pod = self._pod(run, ref.pod_id)
                if pod is None or not pod.placed:
                    return False
        self.counters["preemption_plans"] += 1
        victims = []
        for ref in plan.victims:
            run = self.runs[ref.job_id]
            if ref.pod_id is None:
                self._preempt_whole_job(run, plan.kind)
                victims.append(ref.job_id)
            else:
                self._preempt_single_pod(run, self._pod(run, ref.pod_id), plan.kind)
                victims.append(ref.pod_id)
        self._log("preempt", preemption_kind=plan.kind,
                  beneficiary=plan.beneficiary, victims=victims)
        self._sample()
        return True

    def _try_preemption(self, sel, effective_head: Optional[JobRun]) -> bool:
        """Build and execute at most one preemption plan; True if one ran."""
        if not self.config.preemption:
            return False
        candidates: Optional[list[VictimCandidate]] = None
        exempt: frozenset[str] = frozenset()

        def victims() -> list[VictimCandidate]:
            nonlocal candidates, exempt
            if candidates is None:
                candidates = self._victim_candidates()
                exempt = self._exempt_victims()
            return candidates

        plan = None
        beneficiary: Optional[JobRun] = None

        if (
            self.config.queue_policy == "backfill"
            and effective_head is not None
            and self.now - effective_head.submit_time
            >= self.config.effective_backfill_timeout()
        ):
            demands = [
                (p.spec.gpu_type, p.spec.gpus_milli)
                for p in effective_head.pending_pods()
            ]
            plan = build_node_clearing_plan(
                effective_head.job_id, demands, self.snapshot,
                victims(), exempt=exempt,
            )
            beneficiary = effective_head

        if plan is None and sel.loan_blocked:
            run, _ = sel.loan_blocked[0]
            loans = self.ledger.loans_from(run.tenant_id)
            quota = self.ledger.tenants.get(run.tenant_id)
            if loans and quota is not None:
                unmet: dict[str, int] = {}
                for t, need in run.pending_demand_by_type().items():
                    headroom = (
                        quota.quota.get(t, 0)
                        - quota.used.get(t, 0)
                        - quota.lent_out.get(t, 0)
                    )
                    if need > headroom:
                        unmet[t] = need - headroom
                plan = build_preemption_plan(
                    "quota_reclaim", run.job_id, run.priority, unmet,
                    victims(), exempt=exempt, lender_loans=loans,
                )
                beneficiary = run

        if plan is None and sel.blocked_head is not None:
            head = sel.blocked_head
            unmet = {}
            for t, need in head.pending_demand_by_type().items():
                free = self.snapshot.pool_free_milli(t) if t in self.topology.node_pools else 0
                if need > free:
                    unmet[t] = need - free
            plan = build_preemption_plan(
                "priority", head.job_id, head.priority, unmet,
                victims(), exempt=exempt,
            )
            beneficiary = head

        if plan is None or beneficiary is None:
            return False
        if not self._execute_plan(plan):
            return False
        if plan.kind == "backfill_timeout":
            job_ids = {ref.job_id for ref in plan.victims}
            self.scheduler.reserve(beneficiary.job_id, job_ids)
        self._retry_dispatch(
            beneficiary, extra_delay=self.config.effective_preemption_overhead()
        )
        return True

    # -- the cycle -------------------------------------------------------------

    def _handle_cycle(self) -> None:
        self._cycle_no += 1
        if (
            self.config.max_cycles is not None
            and self._cycle_no > self.config.max_cycles
        ):
            raise EngineError(f"exceeded max_cycles={self.config.max_cycles}")
        sel = self.scheduler.select_candidates(self.snapshot, self.now)
        blocked: list[JobRun] = []
        dispatched = 0
        # a pod shape that failed placement cannot succeed until some
        # allocation changes the snapshot, so repeats are skipped
        failed_shapes: set = set()
        for cand in sel.dispatches:
            run = cand.run
            pre_placed = len(run.placed_pods())
            key = None
            if pre_placed == 0:
                job = run.job
                key = (
                    self.config.policy_for(job), job.gang, job.needs_hbd,
                    tuple(sorted(
                        (p.gpu_type, p.gpus_milli) for p in job.pod_specs
                    )),
                )
                if key in failed_shapes:
                    blocked.append(run)
                    continue
            done = self._dispatch(run, cand.decision, cand.backfill_tag)
            if done:
                dispatched += 1
                failed_shapes.clear()
            else:
                blocked.append(run)
                if len(run.placed_pods()) != pre_placed:
                    failed_shapes.clear()
                elif key is not None:
                    failed_shapes.add(key)
        if sel.blocked_head is not None:
            blocked.append(sel.blocked_head)
        effective_head = min(blocked, key=order_key) if blocked else None
        preempted = self._try_preemption(sel, effective_head)
        if self.config.check_invariants:
            self.ledger.check_invariants()
        self._sample()
        if self._live > 0:
            stalled = (
                dispatched == 0
                and not preempted
                and self._arrivals_left == 0
                and not any(r.placed_pods() for r in self.runs.values()
                            if r.state not in ("finished", "failed"))
                and any(len(q) for q in self.scheduler.queues.values())
            )
            if stalled:
                stuck = [r.job_id for q in self.scheduler.queues.values()
                         for r in q.items]
                raise EngineError(
                    "queue stalled on an idle cluster; jobs can never place: "
                    + ", ".join(sorted(stuck)[:5])
                )
            nxt = self.now + self.config.cycle_period
            if self.config.horizon is None or nxt <= self.config.horizon:
                self._push(nxt, "cycle")

    # -- main loop ---------------------------------------------------------------

    def run(self) -> SimResult:
        for job in self.trace.jobs:
            self.stats[job.job_id] = JobStats(job.job_id, job.submit_time)
            self._push(job.submit_time, "arrival", job.job_id)
        self._push(0.0, "cycle")
        self._sample()

        horizon = self.config.horizon
        tick = self.config.metrics_tick
        last_time = 0.0
        while self._heap:
            time, _, _, kind, job_id, pod_id, epoch = self._heap[0]
            if horizon is not None and time > horizon:
                break
            heapq.heappop(self._heap)
            while tick > 0 and self._next_tick < time:
                self.metrics.sample(self._next_tick, self.snapshot)
                self._next_tick += tick
            self.now = time
            last_time = time
            if kind == "arrival":
                self._handle_arrival(job_id)
                self._sample()
            elif kind == "start":
                self._handle_start(job_id, pod_id, epoch)
            elif kind == "finish":
                self._handle_finish(job_id, pod_id, epoch)
            elif kind == "cycle":
                self._handle_cycle()
            self._events += 1

        end_time = horizon if horizon is not None else last_time
        while tick > 0 and self._next_tick < end_time:
            self.metrics.sample(self._next_tick, self.snapshot)
            self._next_tick += tick
        self.now = end_time
        self._sample()
        report = self.metrics.report(end_time, self.counters)
        return SimResult(
            end_time=end_time,
            cycles=self._cycle_no,
            events=self._events,
            metrics=self.metrics,
            report=report,
            stats=self.stats,
            counters=self.counters,
        )


def run_simulation(
    trace: Trace,
    topology: ClusterTopology,
    quotas: Optional[dict[str, TenantQuota]] = None,
    config: Optional[SimConfig] = None,
    event_log: Optional[TextIO] = None,
    on_event: Optional[Callable[[dict], None]] = None,
) -> SimResult:
    """Run one deterministic simulation over a trace."""
    sim = Simulation(trace, topology, quotas, config, event_log, on_event)
    return sim.run()
