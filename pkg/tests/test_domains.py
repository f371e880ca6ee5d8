from __future__ import annotations

import itertools
import threading

import pytest

from retroheap.domains import (
    DeliveryError,
    DomainLimitError,
    InterruptRequest,
    global_barrier,
    opportunistic_work,
    send_interrupt,
)
from retroheap.runtime import Runtime, RuntimeConfig
from retroheap.values import Tag


def make_rt(**kw):
    kw.setdefault("minor_variant", "stw")
    kw.setdefault("arena_words", 1024)
    kw.setdefault("mode", "threads")
    return Runtime(RuntimeConfig(**kw))


def test_spawn_counts_domains():
    rt = make_rt()
    assert rt.gc.num_doms == 0
    rt.spawn(lambda mut: None)
    rt.join_all()
    # The domain terminated again; registry is empty afterwards.
    assert rt.gc.num_doms == 0
    assert len(rt.domains_history) == 1


def test_spawn_is_not_counted_in_doms_to_mark():
    rt = make_rt()
    seen = {}

    def entry(mut):
        seen["to_mark"] = rt.gc.num_doms_to_mark
        seen["done_flag"] = rt.registry[0].dl_marking_done

    rt.spawn(entry)
    rt.join_all()
    assert seen["to_mark"] == 0
    assert seen["done_flag"] is True


def test_domain_limit_enforced():
    rt = make_rt(max_domains=4)
    blockers = []
    release = threading.Event()

    def parked(mut):
        release.wait(5)

    for _ in range(4):
        blockers.append(rt.spawn(parked))
    with pytest.raises(DomainLimitError):
        rt.spawn(parked)
    release.set()
    rt.join_all()


def test_terminate_moves_pages_and_ephemerons_to_global():
    rt = make_rt()

    def entry(mut):
        mut.alloc_major(4, Tag.BLOCK)
        e1 = mut.make_ephemeron(1)
        e2 = mut.make_ephemeron(1)
        mut.set_root(0, e1)
        mut.set_root(1, e2)

    rt.spawn(entry)
    rt.join_all()
    assert len(rt.gc.global_ephemerons) == 2
    assert any(b["partial"] or b["full"] for b in rt.gc.orphan_pages.values())


def test_terminated_ephemerons_are_adopted_at_next_slice():
    rt = make_rt()

    def first(mut):
        mut.make_ephemeron(1)

    rt.spawn(first)
    rt.join_all()
    assert len(rt.gc.global_ephemerons) == 1
    seen = {}

    def second(mut):
        mut.gc_slice(64)
        d = rt.registry[0]
        seen["adopted"] = len(d.ephemerons)
        seen["global_after"] = len(rt.gc.global_ephemerons)

    rt.spawn(second)
    rt.join_all()
    assert seen["adopted"] == 1
    assert seen["global_after"] == 0
    # Termination hands them back for the next adopter.
    assert len(rt.gc.global_ephemerons) == 1


def test_send_interrupt_poisons_and_alloc_services():
    rt = make_rt()
    state = {"phase": 0}
    seen = {}

    def target(mut):
        d = rt.registry[0]
        state["domain"] = d
        while state["phase"] == 0:
            mut.relax()
        # The queued request is consumed at the next allocation.
        mut.alloc(2)
        seen["drained"] = len(d.interrupt_queue) == 0

    def sender():
        while "domain" not in state:
            threading.Event().wait(0.001)
        d = state["domain"]
        send_interrupt(d, InterruptRequest("stw_minor"))
        assert d.poisoned
        state["phase"] = 1

    t = threading.Thread(target=sender)
    t.start()
    rt.spawn(target)
    rt.join_all()
    t.join()
    assert seen["drained"]


def test_send_interrupt_to_terminated_domain_raises():
    rt = make_rt()
    holder = {}

    def entry(mut):
        holder["d"] = rt.registry[0]

    rt.spawn(entry)
    rt.join_all()
    with pytest.raises(DeliveryError):
        send_interrupt(holder["d"], InterruptRequest("stw_minor"))


def test_two_concurrent_senders_both_preserved():
    rt = make_rt()
    state = {}
    go = threading.Event()

    def target(mut):
        d = rt.registry[0]
        state["d"] = d
        go.wait(5)
        # Drain manually to observe both requests.
        got = d.interrupt_queue.drain()
        state["got"] = len(got)

    def sender():
        while "d" not in state:
            threading.Event().wait(0.001)
        send_interrupt(state["d"], InterruptRequest("stw_minor"))

    threads = [threading.Thread(target=sender) for _ in range(2)]
    rt.spawn(target)
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    go.set()
    rt.join_all()
    assert state["got"] == 2


# -- barrier -------------------------------------------------------------------

def _barrier_run(num_domains, seed):
    rt = Runtime(RuntimeConfig(minor_variant="stw", arena_words=1024,
                               mode="explore", schedule_seed=seed))
    hits = []

    def entry(mut):
        d = rt.current_domain()
        global_barrier(rt, d, lambda: hits.append(d.id))

    for _ in range(num_domains):
        rt.spawn(entry)
    rt.join_all()
    return hits


def test_barrier_single_domain_runs_action_immediately():
    assert len(_barrier_run(1, 0)) == 1


def test_barrier_action_exactly_once_for_three_domains():
    assert len(_barrier_run(3, 0)) == 1


def test_barrier_exactly_once_across_schedules():
    # Deterministic cooperative schedules standing in for all arrival
    # permutations of <= 3 domains.
    for seed in range(12):
        for n in (2, 3):
            assert len(_barrier_run(n, seed)) == 1, (seed, n)


# -- opportunistic work -----------------------------------------------------------

def test_opportunistic_budget_zero_is_noop():
    rt = make_rt()
    out = {}

    def entry(mut):
        d = rt.registry[0]
        out["rem"] = opportunistic_work(d, 0)

    rt.spawn(entry)
    rt.join_all()
    assert out["rem"] == 0


def test_opportunistic_no_work_returns_full_budget():
    rt = make_rt()
    out = {}

    def entry(mut):
        d = rt.registry[0]
        # Fresh domain: empty mark stack, no unswept pages.
        out["rem"] = opportunistic_work(d, 64)

    rt.spawn(entry)
    rt.join_all()
    assert out["rem"] == 64


def test_opportunistic_with_pending_sweep_consumes_budget():
    rt = make_rt()
    out = {}

    def entry(mut):
        import retroheap.values as values
        d = rt.registry[0]
        ref = mut.alloc_major(4, Tag.BLOCK)
        cm = rt.gc.colors
        h = rt.mem.load(ref - 8)
        rt.mem.store(ref - 8, values.header_with_color(h, cm.garbage))
        page = d.pages[4 - 1][0] if False else None
        # Queue the page for sweeping as a cycle would.
        d.sweep_queue = [p for pages in d.pages.values() for p in pages]
        for p in d.sweep_queue:
            p.swept_epoch = -1
        out["rem"] = opportunistic_work(d, 64)

    rt.spawn(entry)
    rt.join_all()
    assert out["rem"] < 64


def test_safe_point_bound_is_tracked():
    rt = make_rt()
    out = {}

    def entry(mut):
        for i in range(50):
            mut.alloc(2)
            mut.tick()
        out["max_ops"] = rt.registry[0].max_ops_between_polls

    rt.spawn(entry)
    rt.join_all()
    # Allocation sites and ticks both poll; with one op per poll the gap
    # stays tiny and far below any configured bound.
    assert out["max_ops"] <= 4
