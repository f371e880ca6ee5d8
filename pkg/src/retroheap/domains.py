"""Domain lifecycle, inter-domain interrupts, safe points and barriers.

A domain is a mutator/collector participant running on its own scheduler
thread.  It owns a private minor arena, a mark stack, remembered sets,
ephemeron and finaliser lists, and a multi-producer single-consumer
interrupt queue.  All cross-domain agreement happens either through
atomic counters or inside a stop-the-world episode.

Episodes generalise the "barrier" of the phase machine: an initiator
takes the runtime-wide STW token (which also serialises spawn/terminate
with barriers), publishes an Episode, and interrupts everyone.  Each
participant arrives at its next safe point; the last arrival runs the
prep action exactly once; then every participant runs the per-domain
action in parallel; the last one out releases.  Domains waiting at entry
perform opportunistic mark/sweep work instead of spinning idle.
"""

from __future__ import annotations

import threading

from . import values
from .sync import AtomicInt, MpscQueue, QueueClosed
from .values import WORD_BYTES

PHASE_MARK = 0
PHASE_MARK_FINAL = 1
PHASE_SWEEP_EPHE = 2

# Interrupt kinds.  StwMinor and CycleHeap are only pokes: the episode
# pointer on the runtime is authoritative, the queue entry just makes the
# target reach a safe point quickly.  Promote carries a payload.
IRQ_STW_MINOR = "stw_minor"
IRQ_CYCLE_HEAP = "cycle_heap"
IRQ_PROMOTE = "promote"


class DomainLimitError(Exception):
    pass


class DeliveryError(Exception):
    """Interrupt sent to a terminated domain."""


class InterruptRequest:
    __slots__ = ("kind", "target", "reply")

    def __init__(self, kind, target=0, reply=None):
        self.kind = kind
        self.target = target
        self.reply = reply


class PromotionReply:
    """Single-assignment reply slot for a promotion request."""

    __slots__ = ("value", "ready")

    def __init__(self):
        self.value = 0
        self.ready = False

    def complete(self, value):
        self.value = value
        self.ready = True


class GlobalGcState:
    """Shared collector state.  Counter updates that the slice pseudocode
    groups into one atomic block take self.lock; bare reads are racy by
    design, every decision that matters is re-checked inside a barrier."""

    def __init__(self):
        self.colors = values.INITIAL_COLORS
        self.phase = PHASE_MARK
        self.cycle_no = 0
        self.num_doms = 0
        self.num_doms_to_mark = 0
        self.ephe_round = 0
        self.num_doms_marked_ephe = 0
        self.num_doms_swept_ephe = 0
        self.num_doms_marked_final = 0
        self.num_doms_marked_final_last = 0
        self.lock = threading.Lock()

        # Orphaned-page pool: size class -> {"partial": [...], "full": [...]}.
        self.orphan_pages = {}
        self.orphan_large = []
        self.orphan_lock = threading.Lock()

        # Features orphaned by terminating domains, adopted at slices.
        self.global_ephemerons = []
        self.global_final_first = []
        self.global_final_last = []
        self.features_lock = threading.Lock()

        # Statistics.
        self.words_marked = 0
        self.words_swept = 0
        self.slices_run = 0
        self.max_slice_ns = 0
        self.barrier_episodes = 0

    def orphan_features_pending(self) -> bool:
        return bool(self.global_ephemerons or self.global_final_first
                    or self.global_final_last)


class Domain:
    def __init__(self, runtime, dom_id, arena_index, entry):
        self.runtime = runtime
        self.id = dom_id
        self.arena_index = arena_index
        self.entry = entry

        layout = runtime.layout
        self.arena_base = layout.arena_base(arena_index)
        self.arena_end = self.arena_base + layout.arena_bytes
        self.alloc_cursor = self.arena_end
        self.alloc_limit = self.arena_base
        self.poisoned = False

        self.roots = [values.encode_scalar(0)] * runtime.config.root_slots
        self.mark_stack = []
        self.partial_scan = None        # (ref, field_idx) resume point
        self.mark_stack_peak = 0

        # Major-heap field locations holding minor references (minor roots).
        self.remembered_set = {}        # field addr -> None, insertion ordered
        # Intra-arena old->young field locations (concurrent collector only).
        self.minor_remset = {}
        # Sizes of arena slots turned into forwards by closure promotion,
        # so the younger-than-oldest walk can step over zero headers.
        self.minor_forward_sizes = {}

        self.ephemerons = []
        self.finalisers_first = []
        self.finalisers_last = []
        self.finaliser_errors = []

        self.dl_marking_done = False
        self.dl_ephe_round = 0
        self.dl_sweep_ephe_done = False
        self.dl_marked_final = False
        self.dl_marked_final_last = False
        self.ephe_mark_pos = 0
        self.ephe_mark_round = -1
        self.ephe_sweep_pos = 0

        self.interrupt_queue = MpscQueue()
        self.in_episode = None
        self.terminated = False

        # Allocator state (populated by major_alloc).
        self.pages = {}                 # class idx -> list of Page
        self.partial_pages = {}         # class idx -> list of Page with free slots
        self.large_blocks = []
        self.page_reserve = []
        self.sweep_queue = []
        self.sweep_partial = None

        self.major_words_since_slice = 0

        # Statistics.
        self.minor_gcs = 0
        self.major_cycles_seen = 0
        self.promoted_words = 0
        self.major_alloc_words = 0
        self.read_faults = 0
        self.closure_promotions = 0
        self.full_minor_promotions = 0
        self.pause_samples = []
        self.ops_since_poll = 0
        self.max_ops_between_polls = 0

    # -- arena helpers ----------------------------------------------------

    def arena_used_words(self) -> int:
        return (self.arena_end - self.alloc_cursor) // WORD_BYTES

    def reset_arena(self):
        self.alloc_cursor = self.arena_end
        self.minor_forward_sizes.clear()

    def poison(self):
        # Overwrite the limit so the bump check fails, plus the flag for
        # the slow path; we cannot rely on page-fault tricks portably.
        self.poisoned = True
        self.alloc_limit = self.arena_end

    def unpoison(self):
        self.poisoned = False
        self.alloc_limit = self.arena_base

    def note_op(self):
        self.ops_since_poll += 1

    def note_poll(self):
        if self.ops_since_poll > self.max_ops_between_polls:
            self.max_ops_between_polls = self.ops_since_poll
        self.ops_since_poll = 0


class Episode:
    """One stop-the-world rendezvous: prep runs exactly once (last domain
    to arrive), then all participants run the per-domain action in
    parallel, then the last one out releases everybody."""

    def __init__(self, kind, participants, prep, per_domain, t_broadcast,
                 finish=None):
        self.kind = kind
        self.participants = participants
        self.prep = prep
        self.per_domain = per_domain
        self.finish = finish
        self.t_broadcast = t_broadcast
        self.arrivals = AtomicInt(0)
        self.dones = AtomicInt(0)
        self.prep_done = False
        self.aborted = False
        self.released = False


def spawn_domain(runtime, entry):
    """Start a new domain.  It is born with dl_marking_done set: a domain
    created mid-cycle has no marking work of its own (its roots derive
    from already-running domains), so it is not counted in
    gNumDomsToMark until fresh work is pushed onto its stack."""
    me = runtime.current_domain()  # may be None (spawn from the harness)
    while not runtime.stw_token.acquire(blocking=False):
        if me is not None:
            poll_safe_point(me)
        runtime.sched.spin_pause()
    try:
        return runtime.register_domain(entry)
    finally:
        runtime.stw_token.release()


def terminate_domain(d):
    """Tear down a domain at a safe point: finish its current-cycle duties,
    empty its arena, drain its mark stack, sweep and orphan its pages, and
    hand its ephemerons/finalisers to the global lists for adoption."""
    from . import features, major_alloc, major_gc, minor_conc, minor_stw

    rt = d.runtime
    poll_safe_point(d)
    while not rt.stw_token.acquire(blocking=False):
        poll_safe_point(d)
        rt.sched.spin_pause()
    try:
        g = rt.gc
        # No episode can start while we hold the token; finish this cycle's
        # phase duties so orphaned lists never cross a phase unprocessed.
        if g.phase == PHASE_MARK_FINAL and not d.dl_marked_final:
            features.run_finalisers_phase(d)
        if g.phase == PHASE_SWEEP_EPHE:
            if not d.dl_marked_final_last:
                features.run_finalisers_phase(d)
            features.ephe_sweep_all(d)

        # Close the queue: later senders get a DeliveryError and re-read
        # the field they faulted on.  Anything already queued is serviced
        # through the final minor collection below.
        d.interrupt_queue.close()
        pending = [r for r in d.interrupt_queue.drain() if r.kind == IRQ_PROMOTE]

        if rt.variant == "conc":
            minor_conc.full_minor_collect(d, extra_roots=[r.target for r in pending])
            for r in pending:
                r.reply.complete(minor_conc.forward_of(rt, r.target))
        else:
            assert not pending, "promotion requests only exist on the conc variant"
            if d.arena_used_words() or any(t.arena_used_words()
                                           for t in rt.registry if t is not d):
                _run_episode_locked(rt, d, IRQ_STW_MINOR,
                                    prep=lambda: minor_stw.episode_prep(rt),
                                    per_domain=lambda dom: minor_stw.episode_collect(rt, dom))

        # Keep marking until the stack is empty, then settle the counters.
        major_gc.drain_mark_stack(d)
        if not d.dl_marking_done:
            d.dl_marking_done = True
            with g.lock:
                g.num_doms_to_mark -= 1
                g.ephe_round += 1
                g.num_doms_marked_ephe = 0

        # Sweep everything we own, then orphan it.
        major_alloc.sweep_all_owned(d)
        major_alloc.release_pages_on_terminate(d)

        with g.features_lock:
            g.global_ephemerons.extend(d.ephemerons)
            g.global_final_first.extend(d.finalisers_first)
            g.global_final_last.extend(d.finalisers_last)
        d.ephemerons = []
        d.finalisers_first = []
        d.finalisers_last = []

        rt.unregister_domain(d)
    finally:
        rt.stw_token.release()


def send_interrupt(target: Domain, req: InterruptRequest):
    """Enqueue a request and poison the target's allocation limit so its
    next allocation takes the slow path and services the queue."""
    if target.terminated:
        raise DeliveryError("domain %d has terminated" % target.id)
    try:
        target.interrupt_queue.push(req)
    except QueueClosed:
        raise DeliveryError("domain %d has terminated" % target.id) from None
    target.poison()


def poll_safe_point(d: Domain):
    """Service pending interrupts; may join a stop-the-world episode and
    run major GC work before returning."""
    rt = d.runtime
    d.note_poll()
    ep = rt.current_episode
    if ep is not None and d.in_episode is None and d in ep.participants:
        join_episode(rt, d, ep)
        if ep.kind == IRQ_STW_MINOR and not ep.aborted:
            from .major_gc import major_slice
            major_slice(d)
    if len(d.interrupt_queue):
        from .minor_conc import handle_promotion_request
        for req in d.interrupt_queue.drain():
            if req.kind == IRQ_PROMOTE:
                req.reply.complete(handle_promotion_request(d, req.target))
            # stop-the-world pokes carry no payload; the episode pointer
            # above is authoritative.
    if d.poisoned and rt.current_episode is None:
        d.unpoison()
    rt.sched.gate()


def join_episode(rt, d, ep):
    n = len(ep.participants)
    d.in_episode = ep
    if ep.arrivals.add(1) == n:
        ok = ep.prep() if ep.prep is not None else True
        ep.aborted = not ok
        ep.prep_done = True
    else:
        while not ep.prep_done:
            opportunistic_work(d, rt.config.opportunistic_budget)
            rt.sched.spin_pause()
    if not ep.aborted and ep.per_domain is not None:
        ep.per_domain(d)
    if ep.dones.add(1) == n:
        if not ep.aborted and ep.finish is not None:
            ep.finish()
        ep.released = True
    else:
        while not ep.released:
            rt.sched.spin_pause()
    d.in_episode = None
    d.pause_samples.append(max(rt.sched.now_ns() - ep.t_broadcast, 0))


def _run_episode_locked(rt, d, kind, prep, per_domain, finish=None):
    participants = list(rt.registry)
    ep = Episode(kind, participants, prep, per_domain, rt.sched.now_ns(),
                 finish=finish)
    rt.gc.barrier_episodes += 1
    rt.current_episode = ep
    for t in participants:
        if t is not d:
            send_interrupt(t, InterruptRequest(kind))
    join_episode(rt, d, ep)
    rt.current_episode = None
    return not ep.aborted


def run_stw_episode(rt, d, kind, prep=None, per_domain=None, still_needed=None,
                    finish=None):
    """Acquire the STW token (servicing other episodes while waiting) and
    run one episode.  Returns False if still_needed or the prep action
    vetoed it: the barrier double-check aborting a stale transition."""
    while not rt.stw_token.acquire(blocking=False):
        poll_safe_point(d)
        rt.sched.spin_pause()
    try:
        if still_needed is not None and not still_needed():
            return False
        return _run_episode_locked(rt, d, kind, prep, per_domain, finish=finish)
    finally:
        rt.stw_token.release()


class Rendezvous:
    """Two-phase sense-reversing barrier: the epoch number is the sense.
    The expected attendance is snapshotted by the first arrival of an
    epoch, so a spawn racing the barrier joins the next episode."""

    def __init__(self):
        self.lock = threading.Lock()
        self.epoch = 0
        self.arrived = 0
        self.expected = 0


def global_barrier(rt, d, action):
    """All active domains rendezvous (each must call this); the action is
    run exactly once, by the last domain to arrive, before anyone is
    released.  Waiters do opportunistic work and keep servicing
    interrupts so a concurrent stop-the-world episode cannot deadlock
    against the barrier."""
    bar = rt.rendezvous
    with bar.lock:
        my_epoch = bar.epoch
        if bar.arrived == 0:
            bar.expected = rt.gc.num_doms
        bar.arrived += 1
        last = bar.arrived == bar.expected
        if last:
            action()
            bar.arrived = 0
            bar.epoch += 1
    if not last:
        while bar.epoch == my_epoch:
            opportunistic_work(d, rt.config.opportunistic_budget)
            poll_safe_point(d)
            rt.sched.spin_pause()


def opportunistic_work(d: Domain, budget: int) -> int:
    """Mark/sweep work done while the mutator would otherwise spin (barrier
    entry, contention backoff).  Never changes phase."""
    if budget <= 0:
        return 0
    from .major_gc import mark_slice, sweep_slice
    budget = sweep_slice(d, budget)
    budget = mark_slice(d, budget)
    return budget
