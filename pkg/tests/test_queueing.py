from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpuschedsim.cluster import MILLI, load_topology, make_topology
from gpuschedsim.queueing import (
    BorrowLoan,
    JobRun,
    PodLoc,
    QueueingError,
    QueueScheduler,
    QuotaLedger,
    TenantQueue,
    VictimCandidate,
    build_node_clearing_plan,
    build_preemption_plan,
    dynamic_resource_admit,
    order_key,
    static_quota_admit,
)
from gpuschedsim.snapshot import advance_snapshot, allocate, initial_snapshot
from gpuschedsim.workload import Job, PodSpec, TenantQuota, load_quotas


def make_job(job_id, gpus=1, priority=1, submit=0.0, tenant="t0",
             kind="non_gang", pods=None, duration=100.0):
    if pods is None:
        pods = (PodSpec("default", gpus * MILLI),)
    return Job(
        job_id=job_id,
        tenant_id=tenant,
        priority=priority,
        kind=kind,
        pod_specs=tuple(pods),
        submit_time=submit,
        duration=duration,
    )


def make_run(job_id, **kwargs):
    return JobRun(make_job(job_id, **kwargs))


def quotas_of(*entries):
    return load_quotas([
        {"tenant_id": tid, "mode": mode, "quotas": q} for tid, mode, q in entries
    ])


# -- ordering ---------------------------------------------------------------

def test_order_key_ranks_priority_time_size_id():
    runs = [
        make_run("d", priority=0, submit=0.0, gpus=1),
        make_run("c", priority=1, submit=5.0, gpus=1),
        make_run("b", priority=1, submit=1.0, gpus=4),
        make_run("a", priority=1, submit=1.0, gpus=2),
        make_run("e", priority=2, submit=9.0, gpus=8),
    ]
    rng = random.Random(3)
    for _ in range(10):
        rng.shuffle(runs)
        got = [r.job_id for r in sorted(runs, key=order_key)]
        assert got == ["e", "a", "b", "c", "d"]


def test_tenant_queue_keeps_dispatch_order():
    q = TenantQueue("t0")
    for run in (make_run("low", priority=0), make_run("hi", priority=2),
                make_run("mid", priority=1)):
        q.enqueue(run)
    assert [r.job_id for r in q.items] == ["hi", "mid", "low"]
    q.remove(q.items[1])
    assert [r.job_id for r in q.items] == ["hi", "low"]
    assert len(q) == 2


# -- static quota admission ----------------------------------------------------

def test_unlimited_tenant_always_passes():
    ledger = QuotaLedger(quotas_of(("other", "shared", {"default": 1})))
    dec = static_quota_admit(make_run("j", tenant="unregistered", gpus=999), ledger)
    assert dec.static_pass
    assert dec.borrow_plan == ()


def test_within_own_quota_no_loans():
    ledger = QuotaLedger(quotas_of(("t0", "shared", {"default": 8})))
    dec = static_quota_admit(make_run("j", tenant="t0", gpus=8), ledger)
    assert dec.static_pass
    assert dec.borrow_plan == ()


def test_shared_tenant_borrows_shortfall():
    ledger = QuotaLedger(quotas_of(
        ("t0", "shared", {"default": 2}),
        ("t1", "shared", {"default": 8}),
    ))
    dec = static_quota_admit(make_run("j", tenant="t0", gpus=6), ledger)
    assert dec.static_pass
    assert dec.borrow_plan == (BorrowLoan("t1", "default", 4 * MILLI),)


def test_borrow_splits_across_lenders():
    ledger = QuotaLedger(quotas_of(
        ("t0", "shared", {"default": 0}),
        ("t1", "shared", {"default": 2}),
        ("t2", "shared", {"default": 3}),
    ))
    dec = static_quota_admit(make_run("j", tenant="t0", gpus=5), ledger)
    assert dec.static_pass
    assert dec.borrow_plan == (
        BorrowLoan("t1", "default", 2 * MILLI),
        BorrowLoan("t2", "default", 3 * MILLI),
    )


def test_isolated_tenant_never_borrows():
    ledger = QuotaLedger(quotas_of(
        ("iso", "isolated", {"default": 2}),
        ("t1", "shared", {"default": 100}),
    ))
    dec = static_quota_admit(make_run("j", tenant="iso", gpus=3), ledger)
    assert not dec.static_pass
    assert "quota exceeded" in dec.reason


def test_isolated_tenant_never_lends():
    ledger = QuotaLedger(quotas_of(
        ("t0", "shared", {"default": 0}),
        ("iso", "isolated", {"default": 100}),
    ))
    dec = static_quota_admit(make_run("j", tenant="t0", gpus=1), ledger)
    assert not dec.static_pass


def test_no_lender_capacity_fails():
    ledger = QuotaLedger(quotas_of(
        ("t0", "shared", {"default": 1}),
        ("t1", "shared", {"default": 1}),
    ))
    dec = static_quota_admit(make_run("j", tenant="t0", gpus=4), ledger)
    assert not dec.static_pass
    assert "no lender capacity" in dec.reason


def test_loan_blocked_flag_set_when_own_quota_is_lent_out():
    ledger = QuotaLedger(quotas_of(
        ("t0", "shared", {"default": 4}),
        ("t1", "shared", {"default": 0}),
    ))
    borrower = make_run("b", tenant="t1", gpus=4)
    dec = static_quota_admit(borrower, ledger)
    assert dec.static_pass
    ledger.commit(borrower, {"default": 4 * MILLI}, dec.borrow_plan)

    own = static_quota_admit(make_run("own", tenant="t0", gpus=4), ledger)
    assert not own.static_pass
    assert own.loan_blocked


def test_commit_release_settles_loans():
    ledger = QuotaLedger(quotas_of(
        ("t0", "shared", {"default": 2}),
        ("t1", "shared", {"default": 8}),
    ))
    run = make_run("j", tenant="t0", gpus=6)
    dec = static_quota_admit(run, ledger)
    ledger.commit(run, {"default": 6 * MILLI}, dec.borrow_plan)
    t0, t1 = ledger.tenants["t0"], ledger.tenants["t1"]
    assert t0.used["default"] == 6 * MILLI
    assert t0.borrowed_in["default"] == 4 * MILLI
    assert t1.lent_out["default"] == 4 * MILLI
    ledger.check_invariants()

    ledger.release_usage(run, {"default": 2 * MILLI})
    assert t0.used["default"] == 4 * MILLI
    assert t1.lent_out["default"] == 4 * MILLI  # repaid only on full drain
    ledger.check_invariants()

    ledger.release_usage(run, {"default": 4 * MILLI})
    assert t0.used["default"] == 0
    assert t0.borrowed_in["default"] == 0
    assert t1.lent_out["default"] == 0
    assert run.job_id not in ledger.job_loans
    ledger.check_invariants()


def test_lender_headroom_shrinks_by_loans():
    ledger = QuotaLedger(quotas_of(
        ("t0", "shared", {"default": 0}),
        ("lender", "shared", {"default": 4}),
    ))
    first = make_run("first", tenant="t0", gpus=3)
    dec = static_quota_admit(first, ledger)
    ledger.commit(first, {"default": 3 * MILLI}, dec.borrow_plan)
    second = static_quota_admit(make_run("second", tenant="t0", gpus=2), ledger)
    assert not second.static_pass


def test_ledger_view_tracks_same_cycle_picks():
    ledger = QuotaLedger(quotas_of(("t0", "shared", {"default": 4})))
    view = ledger.view()
    dec1 = view.static_check("t0", {"default": 3 * MILLI})
    assert dec1.static_pass
    view.apply("t0", {"default": 3 * MILLI}, dec1.borrow_plan)
    dec2 = view.static_check("t0", {"default": 3 * MILLI})
    assert not dec2.static_pass
    # the underlying ledger is untouched until commit
    assert ledger.tenants["t0"].used == {}


def test_loans_from_groups_by_borrowing_job():
    ledger = QuotaLedger(quotas_of(
        ("t0", "shared", {"default": 0}),
        ("lender", "shared", {"default": 10}),
    ))
    for name, gpus in (("a", 2), ("b", 3)):
        run = make_run(name, tenant="t0", gpus=gpus)
        dec = static_quota_admit(run, ledger)
        ledger.commit(run, {"default": gpus * MILLI}, dec.borrow_plan)
    assert ledger.loans_from("lender") == {
        "a": {"default": 2 * MILLI},
        "b": {"default": 3 * MILLI},
    }
    assert ledger.loans_from("t0") == {}


@settings(deadline=None, max_examples=60)
@given(st.data())
def test_ledger_invariants_hold_under_random_traffic(data):
    quotas = quotas_of(
        ("t0", "shared", {"g": 4}),
        ("t1", "shared", {"g": 2}),
        ("iso", "isolated", {"g": 3}),
    )
    ledger = QuotaLedger(quotas)
    active: dict[str, tuple] = {}
    seq = itertools.count()
    for _ in range(data.draw(st.integers(1, 25))):
        if active and data.draw(st.booleans()):
            job_id = data.draw(st.sampled_from(sorted(active)))
            run, milli = active.pop(job_id)
            ledger.release_usage(run, {"g": milli})
        else:
            tenant = data.draw(st.sampled_from(["t0", "t1", "iso"]))
            gpus = data.draw(st.integers(1, 5))
            run = JobRun(make_job(
                f"j{next(seq)}", tenant=tenant,
                pods=(PodSpec("g", gpus * MILLI),),
            ))
            dec = static_quota_admit(run, ledger)
            if dec.static_pass:
                ledger.commit(run, {"g": gpus * MILLI}, dec.borrow_plan)
                active[run.job_id] = (run, gpus * MILLI)
        ledger.check_invariants()
        iso = ledger.tenants["iso"]
        assert iso.used.get("g", 0) <= iso.quota["g"]
        assert iso.lent_out.get("g", 0) == 0
        assert iso.borrowed_in.get("g", 0) == 0


def test_dynamic_resource_admit():
    assert dynamic_resource_admit({"a": 5, "b": 1}, {"a": 5, "b": 2})
    assert not dynamic_resource_admit({"a": 6}, {"a": 5})
    assert not dynamic_resource_admit({"ghost": 1}, {"a": 5})
    assert dynamic_resource_admit({}, {})


# -- scheduler queues -----------------------------------------------------------

def test_requeue_limit_fails_job():
    sched = QueueScheduler(QuotaLedger(), requeue_limit=2)
    run = make_run("j")
    sched.enqueue(run)
    assert sched.requeue(run, "test") == "queued"
    assert sched.requeue(run, "test") == "queued"
    assert sched.requeue(run, "test") == "failed"
    assert run.state == "failed"


def test_requeue_finished_job_raises():
    sched = QueueScheduler(QuotaLedger())
    run = make_run("j")
    run.state = "finished"
    with pytest.raises(QueueingError):
        sched.requeue(run, "test")


def test_requeue_does_not_duplicate_entry():
    sched = QueueScheduler(QuotaLedger())
    run = make_run("j")
    sched.enqueue(run)
    sched.requeue(run, "test")
    assert sum(1 for r in sched.queued_runs() if r.job_id == "j") == 1


def test_unknown_policy_and_merge_rejected():
    with pytest.raises(QueueingError):
        QueueScheduler(QuotaLedger(), policy="lifo")
    with pytest.raises(QueueingError):
        QueueScheduler(QuotaLedger(), merge="shuffled")


def test_round_robin_merge_interleaves_tenants():
    sched = QueueScheduler(QuotaLedger(), merge="round_robin")
    for jid, tenant, submit in (
        ("a1", "ta", 0.0), ("a2", "ta", 1.0),
        ("b1", "tb", 2.0), ("b2", "tb", 3.0), ("b3", "tb", 4.0),
    ):
        sched.enqueue(make_run(jid, tenant=tenant, submit=submit))
    got = [r.job_id for r in sched.queued_runs()]
    assert got == ["a1", "b1", "a2", "b2", "b3"]


def test_ordered_merge_is_global_dispatch_order():
    sched = QueueScheduler(QuotaLedger())
    sched.enqueue(make_run("late", tenant="ta", submit=5.0))
    sched.enqueue(make_run("hi", tenant="tb", submit=9.0, priority=2))
    sched.enqueue(make_run("early", tenant="tb", submit=1.0))
    assert [r.job_id for r in sched.queued_runs()] == ["hi", "early", "late"]


# -- cycle selection --------------------------------------------------------------

def contended_snapshot():
    """Two 4-GPU nodes with 5 GPUs already taken: 3 GPUs remain free."""
    topo = load_topology(make_topology(node_count=2, gpus_per_node=4, nodes_per_group=2))
    snap = initial_snapshot(topo)
    changes = [allocate("n0", d, f"base{d}", MILLI, "zz", "default") for d in range(4)]
    changes.append(allocate("n1", 0, "base4", MILLI, "zz", "default"))
    return advance_snapshot(snap, changes)


def test_select_strict_fifo_stops_at_blocked_head():
    snap = contended_snapshot()
    sched = QueueScheduler(QuotaLedger(), policy="strict_fifo")
    sched.enqueue(make_run("big", gpus=4, submit=0.0))
    sched.enqueue(make_run("small", gpus=2, submit=1.0))
    sel = sched.select_candidates(snap, now=10.0)
    assert sel.dispatches == []
    assert sel.blocked_head.job_id == "big"


def test_select_best_effort_skips_blocked_head():
    snap = contended_snapshot()
    sched = QueueScheduler(QuotaLedger(), policy="best_effort")
    sched.enqueue(make_run("big", gpus=4, submit=0.0))
    sched.enqueue(make_run("small", gpus=2, submit=1.0))
    sel = sched.select_candidates(snap, now=10.0)
    assert [c.run.job_id for c in sel.dispatches] == ["small"]
    assert not sel.dispatches[0].backfill_tag
    assert sel.blocked_head.job_id == "big"


def test_select_backfill_tags_fills_behind_head():
    snap = contended_snapshot()
    sched = QueueScheduler(QuotaLedger(), policy="backfill", backfill_timeout=300.0)
    sched.enqueue(make_run("ahead", gpus=1, submit=0.0, priority=2))
    sched.enqueue(make_run("big", gpus=4, submit=0.0))
    sched.enqueue(make_run("small", gpus=2, submit=1.0))
    sel = sched.select_candidates(snap, now=10.0)
    tags = {c.run.job_id: c.backfill_tag for c in sel.dispatches}
    # ahead dispatches before the head blocks, small fills in behind it
    assert tags == {"ahead": False, "small": True}
    assert sel.blocked_head.job_id == "big"
    assert not sel.head_over_timeout


def test_select_backfill_freeze_suppresses_lower_priority():
    snap = contended_snapshot()
    sched = QueueScheduler(QuotaLedger(), policy="backfill", backfill_timeout=300.0)
    sched.enqueue(make_run("big", gpus=4, submit=0.0))
    sched.enqueue(make_run("small", gpus=2, submit=1.0))
    sched.enqueue(make_run("urgent", gpus=1, submit=400.0, priority=2))
    sel = sched.select_candidates(snap, now=400.0)
    assert sel.head_over_timeout
    # urgent sorts before the stale head and still flows; small does not
    assert [c.run.job_id for c in sel.dispatches] == ["urgent"]


def test_select_skips_reserved_victims():
    snap = contended_snapshot()
    sched = QueueScheduler(QuotaLedger(), policy="backfill", backfill_timeout=300.0)
    sched.enqueue(make_run("big", gpus=4, submit=0.0))
    sched.enqueue(make_run("small", gpus=2, submit=1.0))
    sched.reserve("big", ["small"])
    sel = sched.select_candidates(snap, now=10.0)
    assert sel.dispatches == []
    # reservation dies with its head leaving the queue
    sched.remove(sched.queued_runs()[0])
    assert sched._reserved_jobs() == set() or "big" not in sched.reservations


def test_select_reports_loan_blocked_heads():
    quotas = quotas_of(
        ("t0", "shared", {"default": 3}),
        ("t1", "shared", {"default": 0}),
    )
    ledger = QuotaLedger(quotas)
    borrower = make_run("borrower", tenant="t1", gpus=3)
    dec = static_quota_admit(borrower, ledger)
    ledger.commit(borrower, {"default": 3 * MILLI}, dec.borrow_plan)

    topo = load_topology(make_topology(node_count=2, gpus_per_node=4, nodes_per_group=2))
    snap = initial_snapshot(topo)
    sched = QueueScheduler(ledger, policy="backfill")
    sched.enqueue(make_run("reclaim", tenant="t0", gpus=3))
    sel = sched.select_candidates(snap, now=0.0)
    assert sel.dispatches == []
    assert [(r.job_id, d.loan_blocked) for r, d in sel.loan_blocked] == [("reclaim", True)]


def test_select_admits_within_working_capacity():
    topo = load_topology(make_topology(node_count=2, gpus_per_node=4, nodes_per_group=2))
    snap = initial_snapshot(topo)
    sched = QueueScheduler(QuotaLedger(), policy="best_effort")
    sched.enqueue(make_run("a", gpus=6, submit=0.0))
    sched.enqueue(make_run("b", gpus=3, submit=1.0))
    sched.enqueue(make_run("c", gpus=2, submit=2.0))
    sel = sched.select_candidates(snap, now=0.0)
    # a consumes 6 of 8; b no longer fits the working total; c does
    assert [c.run.job_id for c in sel.dispatches] == ["a", "c"]
    assert [r.job_id for r in sel.dynamic_failed] == ["b"]


# -- preemption plans ---------------------------------------------------------------

def victim(job_id, priority=0, start=0.0, gang=False, backfilled=False,
           pods=(("default", MILLI),), tenant="tv", node="n0"):
    locs = tuple(
        PodLoc(pod_id=f"{job_id}/{i}", node_id=node, gpu_type=t, milli=m)
        for i, (t, m) in enumerate(pods)
    )
    return VictimCandidate(
        job_id=job_id, tenant_id=tenant, priority=priority,
        start_time=start, gang=gang, backfilled=backfilled, pods=locs,
    )


def brute_force_min_units(victims, unmet, beneficiary_priority, kind):
    """Subset-enumeration oracle over the same victim units: fewest
    units, then lowest aggregate priority, that cover the demand."""
    units = []
    for cand in victims:
        if kind == "priority" and cand.priority >= beneficiary_priority:
            continue
        if kind == "backfill_timeout" and not cand.backfilled:
            continue
        if cand.gang:
            freed: dict[str, int] = {}
            for p in cand.pods:
                freed[p.gpu_type] = freed.get(p.gpu_type, 0) + p.milli
            units.append((cand.priority, freed))
        else:
            for p in cand.pods:
                units.append((cand.priority, {p.gpu_type: p.milli}))
    best = None
    for n in range(1, len(units) + 1):
        for combo in itertools.combinations(units, n):
            total: dict[str, int] = {}
            for _, freed in combo:
                for t, m in freed.items():
                    total[t] = total.get(t, 0) + m
            if all(total.get(t, 0) >= m for t, m in unmet.items()):
                key = (n, sum(p for p, _ in combo))
                if best is None or key < best:
                    best = key
        if best is not None:
            return best
    return None


def test_priority_plan_minimal_against_enumeration():
    rng = random.Random(11)
    for case in range(40):
        victims = []
        for i in range(rng.randint(1, 5)):
            gang = rng.random() < 0.5
            n_pods = rng.randint(1, 2 if gang else 3)
            pods = tuple(("default", rng.choice([MILLI, 2 * MILLI])) for _ in range(n_pods))
            victims.append(victim(
                f"v{i}", priority=rng.randint(0, 1), start=float(i),
                gang=gang, pods=pods,
            ))
        unmet = {"default": rng.randint(1, 6) * MILLI}
        plan = build_preemption_plan("priority", "head", 2, unmet, victims)
        oracle = brute_force_min_units(victims, unmet, 2, "priority")
        if oracle is None:
            assert plan is None, f"case {case}: plan exists but coverage is impossible"
            continue
        assert plan is not None, f"case {case}: no plan found though one exists"
        assert len(plan.victims) == oracle[0]
        freed = plan.freed
        assert all(freed.get(t, 0) >= m for t, m in unmet.items())


def test_priority_plan_spares_equal_priority():
    victims = [victim("peer", priority=1), victim("lower", priority=0)]
    plan = build_preemption_plan("priority", "head", 1, {"default": MILLI}, victims)
    assert plan is not None
    assert [v.job_id for v in plan.victims] == ["lower"]


def test_priority_plan_prefers_latest_started_on_ties():
    victims = [
        victim("old", priority=0, start=10.0),
        victim("young", priority=0, start=90.0),
    ]
    plan = build_preemption_plan("priority", "head", 1, {"default": MILLI}, victims)
    assert [v.job_id for v in plan.victims] == ["young"]


def test_gang_victims_are_whole_jobs():
    victims = [victim("g", priority=0, gang=True, pods=(("default", MILLI),) * 3)]
    plan = build_preemption_plan("priority", "head", 1, {"default": 2 * MILLI}, victims)
    assert plan is not None
    assert plan.victims == (plan.victims[0],)
    assert plan.victims[0].pod_id is None
    assert plan.freed == {"default": 3 * MILLI}


def test_non_gang_victims_are_single_pods():
    victims = [victim("ng", priority=0, pods=(("default", MILLI),) * 3)]
    plan = build_preemption_plan("priority", "head", 1, {"default": 2 * MILLI}, victims)
    assert plan is not None
    assert len(plan.victims) == 2
    assert all(v.pod_id is not None for v in plan.victims)


def test_backfill_timeout_plan_targets_backfilled_only():
    victims = [
        victim("plain", priority=0, backfilled=False),
        victim("filler", priority=1, backfilled=True),
    ]
    plan = build_preemption_plan("backfill_timeout", "head", 1, {"default": MILLI}, victims)
    assert plan is not None
    assert [v.job_id for v in plan.victims] == ["filler"]


def test_quota_reclaim_measures_loans_not_pods():
    victims = [
        victim("debtor", priority=1, pods=(("default", 4 * MILLI),)),
        victim("clean", priority=0, pods=(("default", 4 * MILLI),)),
    ]
    loans = {"debtor": {"default": 2 * MILLI}}
    plan = build_preemption_plan(
        "quota_reclaim", "head", 1, {"default": 2 * MILLI}, victims,
        lender_loans=loans,
    )
    assert plan is not None
    assert [v.job_id for v in plan.victims] == ["debtor"]
    assert plan.freed == {"default": 2 * MILLI}
    # demand beyond what is owed cannot be reclaimed
    assert build_preemption_plan(
        "quota_reclaim", "head", 1, {"default": 3 * MILLI}, victims,
        lender_loans=loans,
    ) is None


def test_exempt_victims_are_spared():
    victims = [victim("fresh", priority=0), victim("other", priority=0, start=1.0)]
    plan = build_preemption_plan(
        "priority", "head", 1, {"default": MILLI}, victims,
        exempt=frozenset(["other"]),
    )
    assert [v.job_id for v in plan.victims] == ["fresh"]


def test_beneficiary_never_preempts_itself():
    victims = [victim("head", priority=0)]
    assert build_preemption_plan("priority", "head", 1, {"default": MILLI}, victims) is None


def test_unknown_preemption_kind_raises():
    with pytest.raises(QueueingError):
        build_preemption_plan("vibes", "head", 1, {"default": MILLI}, [])


def test_satisfied_demand_needs_no_plan():
    assert build_preemption_plan("priority", "head", 1, {}, [victim("v")]) is None
    assert build_preemption_plan("priority", "head", 1, {"default": 0}, [victim("v")]) is None


# -- node-clearing plans -------------------------------------------------------------

def cluster_with(pod_map):
    """pod_map: node_id -> list of (pod_id, device_id, milli, tenant)."""
    topo = load_topology(make_topology(node_count=3, gpus_per_node=4, nodes_per_group=3))
    changes = []
    for node_id, entries in pod_map.items():
        for pod_id, dev, milli, tenant in entries:
            changes.append(allocate(node_id, dev, pod_id, milli, tenant, "default"))
    return topo, advance_snapshot(initial_snapshot(topo), changes)


def test_node_clearing_frees_whole_devices():
    # n0 holds two single-GPU backfilled pods and n1 four; n2 is pinned
    # by a bystander job, so the head's 4-GPU pod needs devices cleared
    _, snap = cluster_with({
        "n0": [("v/0", 0, MILLI, "tv"), ("v/1", 1, MILLI, "tv")],
        "n1": [("w/0", 0, MILLI, "tv"), ("w/1", 1, MILLI, "tv"),
               ("w/2", 2, MILLI, "tv"), ("w/3", 3, MILLI, "tv")],
        "n2": [(f"keep/{d}", d, MILLI, "tb") for d in range(4)],
    })
    victims = [
        victim("v", priority=1, backfilled=True, pods=(("default", MILLI),) * 2),
        victim("w", priority=1, backfilled=True, pods=(("default", MILLI),) * 4),
    ]
    victims[0] = VictimCandidate(
        job_id="v", tenant_id="tv", priority=1, start_time=0.0, gang=False,
        backfilled=True,
        pods=(PodLoc("v/0", "n0", "default", MILLI, ((0, MILLI),)),
              PodLoc("v/1", "n0", "default", MILLI, ((1, MILLI),))),
    )
    victims[1] = VictimCandidate(
        job_id="w", tenant_id="tv", priority=1, start_time=1.0, gang=False,
        backfilled=True,
        pods=tuple(
            PodLoc(f"w/{d}", "n1", "default", MILLI, ((d, MILLI),)) for d in range(4)
        ),
    )
    plan = build_node_clearing_plan(
        "head", [("default", 4 * MILLI)], snap, victims,
    )
    assert plan is not None
    assert plan.kind == "backfill_timeout"
    # clearing v's two pods turns n0 into four free whole devices,
    # which beats evicting all four pods of w
    assert sorted(v.job_id for v in plan.victims) == ["v", "v"]


def test_node_clearing_ignores_non_backfilled():
    _, snap = cluster_with({
        "n0": [(f"v/{d}", d, MILLI, "tv") for d in range(4)],
    })
    cand = VictimCandidate(
        job_id="v", tenant_id="tv", priority=1, start_time=0.0, gang=False,
        backfilled=False,
        pods=tuple(PodLoc(f"v/{d}", "n0", "default", MILLI, ((d, MILLI),)) for d in range(4)),
    )
    plan = build_node_clearing_plan(
        "head", [("default", 12 * MILLI)], snap, [cand],
    )
    assert plan is None


def test_node_clearing_never_frees_shared_devices():
    """A device carrying both a victim share and a bystander share must
    stay allocated, so the plan cannot promise it as a whole device."""
    topo = load_topology(make_topology(node_count=1, gpus_per_node=2, nodes_per_group=1))
    snap = advance_snapshot(initial_snapshot(topo), [
        allocate("n0", 0, "victim/0", 500, "tv", "default"),
        allocate("n0", 0, "bystander/0", 500, "tb", "default"),
        allocate("n0", 1, "victim/1", MILLI, "tv", "default"),
    ])
    cand = VictimCandidate(
        job_id="victim", tenant_id="tv", priority=1, start_time=0.0, gang=False,
        backfilled=True,
        pods=(PodLoc("victim/0", "n0", "default", 500, ((0, 500),)),
              PodLoc("victim/1", "n0", "default", MILLI, ((1, MILLI),))),
    )
    # two whole devices can never come free while the bystander holds
    # half of device 0
    plan = build_node_clearing_plan(
        "head", [("default", 2 * MILLI)], snap, [cand],
    )
    assert plan is None
    # one whole device is attainable by clearing victim/1 alone
    plan = build_node_clearing_plan("head", [("default", MILLI)], snap, [cand])
    assert plan is not None
    assert plan.victims == (plan.victims[0],)
    assert plan.victims[0].pod_id == "victim/1"


def test_node_clearing_respects_exempt():
    _, snap = cluster_with({
        "n0": [("v/0", 0, MILLI, "tv")],
    })
    cand = VictimCandidate(
        job_id="v", tenant_id="tv", priority=1, start_time=0.0, gang=False,
        backfilled=True,
        pods=(PodLoc("v/0", "n0", "default", MILLI, ((0, MILLI),)),),
    )
    assert build_node_clearing_plan(
        "head", [("default", 4 * MILLI)], snap, [cand],
        exempt=frozenset(["v"]),
    ) is None
