"""Mostly-concurrent major collector.

Three object states drive the cycle: marking turns Unmarked objects into
Marked ones, sweeping turns Garbage into Free, and the two never touch
the same object, so they need no mutual synchronisation.  New allocations
are always Marked.  Marking is idempotent (an object may sit on two
domains' mark stacks; the colour transition is a CAS, so exactly one
marker "wins"), sweeping is disjoint (each domain sweeps only pages it
owns or has adopted).

The only global synchronisation is at the end of the cycle: when every
domain has finished sweeping and marking (gNumDomsToMark drops to zero)
and the ephemeron/finaliser phases have quiesced, the last domain into
the barrier relabels the colour patterns (Marked->Unmarked,
Unmarked->Garbage, Garbage->Marked, Free fixed) and resets the counters.
Because ephemeron get_key and finalisers can resurrect mark work after a
domain declared itself done, every phase transition re-checks its
condition inside the barrier and aborts if it no longer holds.

The deletion (snapshot-at-the-beginning) write barrier marks the old
value of any mutated field while marking is in progress, which bounds
the work of a cycle: everything reachable when the cycle started gets
marked, no matter what the mutator does afterwards.
"""

from __future__ import annotations

from . import values
from .domains import (
    IRQ_CYCLE_HEAP,
    PHASE_MARK,
    PHASE_MARK_FINAL,
    PHASE_SWEEP_EPHE,
    run_stw_episode,
)
from .major_alloc import sweep_slice
from .values import WORD_BYTES, State, Tag


def write_barrier(d, obj: int, field_idx: int, new_value: int) -> None:
    """Deletion barrier plus remembered-set maintenance, then the store."""
    rt = d.runtime
    addr = obj + field_idx * WORD_BYTES
    old = rt.mem.load(addr)
    if (rt.gc.phase != PHASE_SWEEP_EPHE and old & 1 == 0
            and rt.is_major(old)
            and rt.gc.colors.state_of(values.header_color(rt.mem.load(old - WORD_BYTES))) == State.UNMARKED):
        mark_object(d, old)
    if new_value & 1 == 0:
        if rt.is_minor(new_value):
            if rt.is_major(obj):
                d.remembered_set[addr] = None
            elif rt.variant == "conc" and rt.arena_of(obj) == d.arena_index:
                # Intra-arena write: allocation grows downward, so a higher
                # address means an older object.
                if rt.arena_of(new_value) == d.arena_index and obj > new_value:
                    d.minor_remset[addr] = None
    rt.mem.store(addr, new_value)


def mark_object(d, ref: int) -> bool:
    """Idempotent Unmarked->Marked transition; returns True for the call
    that performed it.  The winner pushes the object on its own stack.
    Pushing onto an empty stack after this domain already declared its
    marking done re-arms termination detection."""
    rt = d.runtime
    mem = rt.mem
    cm = rt.gc.colors
    while True:
        h = mem.load(ref - WORD_BYTES)
        assert h != values.FORWARDED_HEADER, "marking a forwarded minor object"
        st = cm.state_of(values.header_color(h))
        if st == State.MARKED:
            return False
        assert st == State.UNMARKED, "marking an object in state %s" % st.name
        # Lazy/Forcing headers race with the mutator's tag CAS; the loop
        # re-reads and retries, so no transition is lost on either side.
        if mem.cas(ref - WORD_BYTES, h, values.header_with_color(h, cm.marked)):
            break
    if not d.mark_stack and d.dl_marking_done:
        d.dl_marking_done = False
        g = rt.gc
        with g.lock:
            g.num_doms_to_mark += 1
    d.mark_stack.append(ref)
    if len(d.mark_stack) > d.mark_stack_peak:
        d.mark_stack_peak = len(d.mark_stack)
    return True


def _scan_object(d, ref: int, start: int, budget: int):
    """Scan fields [start..) of a marked object, marking Unmarked major
    referents.  Returns (resume_idx or None, budget_left); budget is
    charged one word per field scanned."""
    rt = d.runtime
    mem = rt.mem
    cm = rt.gc.colors
    h = mem.load(ref - WORD_BYTES)
    n = values.header_size(h)
    if values.header_tag(h) == Tag.EPHEMERON:
        # Weak slots: never traced here.  Key/value liveness is decided by
        # the ephemeron mark rounds.
        return None, budget - 1
    i = start
    while i < n:
        if budget <= 0:
            return i, 0
        w = mem.load(ref + i * WORD_BYTES)
        budget -= 1
        rt.gc.words_marked += 1
        i += 1
        if w & 1 == 0 and rt.is_major(w):
            if cm.state_of(values.header_color(mem.load(w - WORD_BYTES))) == State.UNMARKED:
                mark_object(d, w)
    return None, budget


def mark_slice(d, budget: int) -> int:
    """Pop gray objects and scan them until the budget is spent or the
    stack empties.  A partially scanned object is resumed first next time
    so one huge object cannot blow the pause bound."""
    if d.partial_scan is not None:
        ref, idx = d.partial_scan
        nxt, budget = _scan_object(d, ref, idx, budget)
        d.partial_scan = None if nxt is None else (ref, nxt)
        if d.partial_scan is not None:
            return 0
    while budget > 0 and d.mark_stack:
        ref = d.mark_stack.pop()
        nxt, budget = _scan_object(d, ref, 0, budget)
        if nxt is not None:
            d.partial_scan = (ref, nxt)
            return 0
    return max(budget, 0)


def drain_mark_stack(d) -> None:
    while d.mark_stack or d.partial_scan is not None:
        mark_slice(d, 1 << 30)


def mark_roots(d) -> None:
    """Non-incremental root marking: the whole registered root array, at
    cycle start.  Arenas were emptied inside the same barrier, so roots
    hold only scalars and major references."""
    rt = d.runtime
    cm = rt.gc.colors
    for w in d.roots:
        if w & 1 == 0:
            assert not rt.is_minor(w), "minor reference survived the cycle barrier"
            if cm.state_of(values.header_color(rt.mem.load(w - WORD_BYTES))) == State.UNMARKED:
                mark_object(d, w)


def compute_slice_budget(d) -> int:
    rt = d.runtime
    cfg = rt.config
    budget = int(cfg.pacing_factor * d.major_words_since_slice)
    if budget < cfg.min_slice_words:
        budget = cfg.min_slice_words
    if cfg.max_slice_words is not None and budget > cfg.max_slice_words:
        budget = cfg.max_slice_words
    return budget


def major_slice(d, budget: int | None = None) -> None:
    """One slice of major work: sweep, mark, declare termination, run the
    finaliser/ephemeron sub-slices gated by the phase, then try to advance
    the phase."""
    from . import features

    rt = d.runtime
    g = rt.gc
    t0 = rt.sched.now_ns()
    if budget is None:
        budget = compute_slice_budget(d)
    d.major_words_since_slice = 0
    g.slices_run += 1

    features.adopt_orphaned_features(d)

    b = sweep_slice(d, budget)
    b = mark_slice(d, b)
    if b > 0 and not d.dl_marking_done:
        d.dl_marking_done = True
        with g.lock:
            g.num_doms_to_mark -= 1
            g.ephe_round += 1
            g.num_doms_marked_ephe = 0

    if g.phase == PHASE_MARK_FINAL and not d.dl_marked_final:
        features.run_finalisers_phase(d)
    if g.phase == PHASE_SWEEP_EPHE and not d.dl_marked_final_last:
        features.run_finalisers_phase(d)

    cached = g.ephe_round
    if g.phase == PHASE_MARK_FINAL and cached > d.dl_ephe_round:
        b = features.ephe_mark_slice(d, b, cached)
        if b > 0 and d.dl_marking_done:
            d.dl_ephe_round = cached
            with g.lock:
                if cached == g.ephe_round:
                    g.num_doms_marked_ephe += 1

    if g.phase == PHASE_SWEEP_EPHE:
        b = features.ephe_sweep_slice(d, b)
        if b > 0 and not d.dl_sweep_ephe_done:
            d.dl_sweep_ephe_done = True
            with g.lock:
                g.num_doms_swept_ephe += 1

    change_phase(d)
    dt = rt.sched.now_ns() - t0
    if dt > g.max_slice_ns:
        g.max_slice_ns = dt


def change_phase(d) -> None:
    """Advance MARK -> MARK_FINAL -> SWEEP_EPHE -> cycle.  Mutator activity
    (get_key, finalisers) can invalidate a transition between the check
    and the barrier, so the condition is evaluated again by the last
    domain into the barrier and the transition aborted if it fails."""
    rt = d.runtime
    g = rt.gc

    if g.phase == PHASE_MARK and g.num_doms_to_mark == 0:
        def mark_done():
            return g.phase == PHASE_MARK and g.num_doms_to_mark == 0

        def flip_mark():
            if not mark_done():
                return False
            g.phase = PHASE_MARK_FINAL
            return True

        run_stw_episode(rt, d, "phase_mark_final", prep=flip_mark,
                        still_needed=mark_done)

    if (g.phase == PHASE_MARK_FINAL and g.num_doms_to_mark == 0
            and g.num_doms_marked_ephe >= g.num_doms
            and g.num_doms_marked_final >= g.num_doms
            and not g.orphan_features_pending()):
        def final_done():
            return (g.phase == PHASE_MARK_FINAL and g.num_doms_to_mark == 0
                    and g.num_doms_marked_ephe >= g.num_doms
                    and g.num_doms_marked_final >= g.num_doms
                    and not g.orphan_features_pending())

        def flip_sweep():
            if not final_done():
                return False
            g.phase = PHASE_SWEEP_EPHE
            return True

        run_stw_episode(rt, d, "phase_sweep_ephe", prep=flip_sweep,
                        still_needed=final_done)

    if (g.phase == PHASE_SWEEP_EPHE
            and g.num_doms_swept_ephe >= g.num_doms
            and g.num_doms_marked_final_last >= g.num_doms
            and not g.orphan_features_pending()):
        cycle_heap(d)


def cycle_heap(d) -> bool:
    """End-of-cycle barrier: the last domain to arrive rotates the colour
    map and resets the counters; then every domain (still stopped) clears
    its local flags, empties its minor arena, and marks its roots."""
    from . import minor_conc, minor_stw

    rt = d.runtime
    g = rt.gc

    def cycle_ready():
        return (g.phase == PHASE_SWEEP_EPHE
                and g.num_doms_swept_ephe >= g.num_doms
                and g.num_doms_marked_final_last >= g.num_doms
                and not g.orphan_features_pending())

    def prep():
        if not cycle_ready():
            return False
        if rt.debug_oracle:
            rt.oracle_check_cycle_end()
        g.colors = g.colors.rotated()
        g.cycle_no += 1
        g.num_doms_to_mark = g.num_doms
        g.ephe_round = 0
        g.num_doms_marked_ephe = 0
        g.num_doms_swept_ephe = 0
        g.num_doms_marked_final = 0
        g.num_doms_marked_final_last = 0
        g.phase = PHASE_MARK
        if rt.variant == "stw":
            minor_stw.episode_prep(rt)
        return True

    def per_domain(dom):
        dom.dl_marking_done = False
        dom.dl_ephe_round = 0
        dom.dl_sweep_ephe_done = False
        dom.dl_marked_final = False
        dom.dl_marked_final_last = False
        dom.ephe_mark_pos = 0
        dom.ephe_mark_round = -1
        dom.ephe_sweep_pos = 0
        dom.sweep_queue = [p for pages in dom.pages.values() for p in pages]
        dom.sweep_partial = None
        if rt.variant == "stw":
            minor_stw.episode_collect(rt, dom)
        else:
            minor_conc.full_minor_collect(dom)
        mark_roots(dom)
        dom.major_cycles_seen += 1

    def finish():
        if rt.variant == "stw":
            minor_stw.episode_finish(rt)
        if rt.debug_oracle:
            rt.oracle_snapshot_cycle_start()

    return run_stw_episode(rt, d, IRQ_CYCLE_HEAP, prep=prep,
                           per_domain=per_domain, still_needed=cycle_ready,
                           finish=finish)
