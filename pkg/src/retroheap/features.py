"""Ephemerons, finalisers and multicore-safe lazy values.

Ephemerons are major-heap objects (tag EPHEMERON) whose slots are weak:
regular marking never traces them.  Field 0 is the value slot, fields
1..k the key slots.  A slot is either a value word or the distinguished
ERASED word, which is a non-heap even word so it can never collide with
a user scalar.  The value is semantically reachable only while the
ephemeron and every key are strongly reachable; once some key dies, the
sweep phase erases every slot.

Each domain incrementally marks and sweeps its own ephemeron list,
concurrently with the other domains; rounds of ephemeron marking are
coordinated only through counters (no per-round barrier).  A terminating
domain's list moves to a global list and is adopted at another domain's
next slice; adoption starts a fresh round so nothing is missed.

Lazy cells are 1-field major-heap blocks whose tag walks
Lazy -> Forcing -> Forward, every step an atomic header transition, so
forcing is safe against both concurrent forcers and concurrent GC
marking (which also uses header CAS).  While Forcing, field 0 holds the
forcing domain's id; on success it holds the result and the tag becomes
Forward; on an exception it holds a closure re-raising the same
exception and the tag reverts to Lazy.
"""

from __future__ import annotations

from . import values
from .domains import PHASE_MARK_FINAL, PHASE_SWEEP_EPHE
from .major_alloc import alloc_major
from .major_gc import mark_object, write_barrier
from .values import WORD_BYTES, State, Tag

# Erased-slot sentinel: an even (reference-shaped) word no heap object can
# ever live at, distinct from the scalar 0.
ERASED = 2

WITH_OBJECT = "with_object"
LAST_ONLY = "last_only"


class RecursiveForceError(Exception):
    """A lazy value was forced from inside its own deferred computation."""


class ConcurrentForceError(Exception):
    """A lazy value is being forced by another domain right now."""


class FinaliserEntry:
    __slots__ = ("kind", "target", "action")

    def __init__(self, kind, target, action):
        self.kind = kind
        self.target = target
        self.action = action


# -- ephemerons -----------------------------------------------------------

def make_ephemeron(d, num_keys: int) -> int:
    ref = alloc_major(d, 1 + num_keys, Tag.EPHEMERON)
    mem = d.runtime.mem
    for i in range(1 + num_keys):
        mem.store(ref + i * WORD_BYTES, ERASED)
    d.ephemerons.append(ref)
    return ref


def ephe_num_keys(rt, e: int) -> int:
    return values.header_size(rt.mem.load(e - WORD_BYTES)) - 1


def _weak_store(d, e: int, field_idx: int, v: int) -> None:
    # Weak slots skip the deletion barrier on purpose: overwriting a weak
    # reference must not keep the old referent alive.  Minor referents are
    # still remembered so the minor collector forwards (and thereby keeps)
    # them; weakness only starts once the object is in the major heap.
    rt = d.runtime
    addr = e + field_idx * WORD_BYTES
    if v != ERASED and v & 1 == 0 and rt.is_minor(v):
        d.remembered_set[addr] = None
    rt.mem.store(addr, v)


def ephe_set_key(d, e: int, i: int, key: int) -> None:
    _weak_store(d, e, 1 + i, key)


def ephe_set_value(d, e: int, v: int) -> None:
    _weak_store(d, e, 0, v)


def _slot_alive(rt, w: int) -> bool:
    if w == ERASED:
        return False
    if w & 1:
        return True  # scalars are immortal
    if rt.is_minor(w):
        return True  # strong until promoted; weakness starts in the major heap
    h = rt.mem.load(w - WORD_BYTES)
    return rt.gc.colors.state_of(values.header_color(h)) == State.MARKED


def ephe_get_key(d, e: int, i: int):
    """Return a strong reference to key i, or None if erased.  Obtaining
    the strong reference marks the key, which may hand fresh mark work to
    a domain that had already finished: that is what re-arms
    gNumDomsToMark.  Once the sweep phase has begun an unmarked key is
    already condemned, so it reads as erased rather than resurrected."""
    rt = d.runtime
    w = rt.mem.load(e + (1 + i) * WORD_BYTES)
    if w == ERASED:
        return None
    if w & 1 or rt.is_minor(w):
        return w
    st = rt.gc.colors.state_of(values.header_color(rt.mem.load(w - WORD_BYTES)))
    if st == State.MARKED:
        return w
    if rt.gc.phase == PHASE_SWEEP_EPHE:
        return None
    mark_object(d, w)
    return w


def ephe_get_value(d, e: int):
    rt = d.runtime
    w = rt.mem.load(e)
    if w == ERASED:
        return None
    if w & 1 or rt.is_minor(w):
        return w
    st = rt.gc.colors.state_of(values.header_color(rt.mem.load(w - WORD_BYTES)))
    if st == State.MARKED:
        return w
    if rt.gc.phase == PHASE_SWEEP_EPHE:
        return None
    mark_object(d, w)
    return w


def ephe_mark_slice(d, budget: int, cached_round: int) -> int:
    """One round of ephemeron marking: walk the list and, for every live
    ephemeron whose keys are all alive, mark the value.  The walk resumes
    where it left off if the budget runs out; the caller only counts the
    round once the whole list was covered with budget to spare."""
    rt = d.runtime
    mem = rt.mem
    cm = rt.gc.colors
    if d.ephe_mark_round != cached_round:
        d.ephe_mark_round = cached_round
        d.ephe_mark_pos = 0
    lst = d.ephemerons
    pos = d.ephe_mark_pos
    while pos < len(lst):
        if budget <= 0:
            d.ephe_mark_pos = pos
            return 0
        e = lst[pos]
        pos += 1
        nkeys = ephe_num_keys(rt, e)
        budget -= 1 + nkeys
        if cm.state_of(values.header_color(mem.load(e - WORD_BYTES))) != State.MARKED:
            continue
        v = mem.load(e)
        if v == ERASED or v & 1 or rt.is_minor(v):
            continue
        if cm.state_of(values.header_color(mem.load(v - WORD_BYTES))) == State.MARKED:
            continue
        if all(_slot_alive(rt, mem.load(e + (1 + i) * WORD_BYTES))
               for i in range(nkeys)):
            mark_object(d, v)
    d.ephe_mark_pos = pos
    return max(budget, 0)


def _sweep_one_ephemeron(d, e) -> bool:
    """Erase all slots if some key is dead.  Returns False if the
    ephemeron itself is dead and should leave the list."""
    rt = d.runtime
    mem = rt.mem
    cm = rt.gc.colors
    st = cm.state_of(values.header_color(mem.load(e - WORD_BYTES)))
    if st != State.MARKED:
        return False  # dead ephemeron: collected like any other object
    nkeys = ephe_num_keys(rt, e)
    if any(not _slot_alive(rt, mem.load(e + (1 + i) * WORD_BYTES))
           for i in range(nkeys)):
        for i in range(1 + nkeys):
            mem.store(e + i * WORD_BYTES, ERASED)
    return True


def ephe_sweep_slice(d, budget: int) -> int:
    rt = d.runtime
    lst = d.ephemerons
    pos = d.ephe_sweep_pos
    kept = lst[:pos]
    while pos < len(lst):
        if budget <= 0:
            d.ephemerons = kept + lst[pos:]
            d.ephe_sweep_pos = len(kept)
            return 0
        e = lst[pos]
        pos += 1
        budget -= 1 + ephe_num_keys(rt, e)
        if _sweep_one_ephemeron(d, e):
            kept.append(e)
    d.ephemerons = kept
    d.ephe_sweep_pos = len(kept)
    return max(budget, 0)


def ephe_sweep_all(d) -> None:
    """Complete this cycle's ephemeron sweep unconditionally (domain
    termination during SWEEP_EPHE): whatever is orphaned afterwards has
    already been swept and may safely cross the cycle boundary."""
    rt = d.runtime
    g = rt.gc
    d.ephemerons = [e for e in d.ephemerons if _sweep_one_ephemeron(d, e)]
    d.ephe_sweep_pos = len(d.ephemerons)
    if not d.dl_sweep_ephe_done:
        d.dl_sweep_ephe_done = True
        with g.lock:
            g.num_doms_swept_ephe += 1


def adopt_orphaned_features(d) -> None:
    """Pick up ephemerons/finalisers left behind by terminated domains.
    Adopted ephemerons force a fresh marking round so every domain
    re-confirms; if this domain already ran its finaliser or sweep pass
    for the current phase, the adopted entries are processed on the spot
    so the already-counted pass stays truthful."""
    rt = d.runtime
    g = rt.gc
    if not g.orphan_features_pending():
        return
    with g.features_lock:
        ephes, g.global_ephemerons = g.global_ephemerons, []
        first, g.global_final_first = g.global_final_first, []
        last, g.global_final_last = g.global_final_last, []
    if ephes:
        d.ephemerons.extend(ephes)
        with g.lock:
            g.ephe_round += 1
            g.num_doms_marked_ephe = 0
        if g.phase == PHASE_SWEEP_EPHE and d.dl_sweep_ephe_done:
            d.ephemerons = [e for e in d.ephemerons if _sweep_one_ephemeron(d, e)]
            d.ephe_sweep_pos = len(d.ephemerons)
    if first:
        d.finalisers_first.extend(first)
        if g.phase == PHASE_MARK_FINAL and d.dl_marked_final:
            _run_final_first(d)
    if last:
        d.finalisers_last.extend(last)
        if g.phase == PHASE_SWEEP_EPHE and d.dl_marked_final_last:
            _run_final_last(d)


# -- finalisers -----------------------------------------------------------

def register_finaliser(d, kind, target: int, action) -> None:
    """WithObject actions are called as action(mut, target) and mark the
    target first (the action may revive it); LastOnly actions are called
    as action(mut) once the target is past all marking, with no way to
    reach it."""
    assert kind in (WITH_OBJECT, LAST_ONLY)
    assert target & 1 == 0, "finalisers attach to heap objects"
    entry = FinaliserEntry(kind, target, action)
    if kind == WITH_OBJECT:
        d.finalisers_first.append(entry)
    else:
        d.finalisers_last.append(entry)


def _invoke(d, entry, pass_target: bool) -> None:
    mut = d.runtime.mutator_for(d)
    try:
        if pass_target:
            entry.action(mut, entry.target)
        else:
            entry.action(mut)
    except Exception as exc:  # surfaced to the harness, never aborts GC
        d.finaliser_errors.append((entry.kind, exc))


def _run_final_first(d) -> None:
    rt = d.runtime
    cm = rt.gc.colors
    kept = []
    for entry in d.finalisers_first:
        t = entry.target
        if rt.is_minor(t):
            kept.append(entry)  # still young, kept alive by the minor roots
            continue
        st = cm.state_of(values.header_color(rt.mem.load(t - WORD_BYTES)))
        if st == State.UNMARKED:
            mark_object(d, t)
            _invoke(d, entry, pass_target=True)
        else:
            assert st == State.MARKED, "finaliser target outlived its cycle"
            kept.append(entry)
    d.finalisers_first = kept


def _run_final_last(d) -> None:
    rt = d.runtime
    cm = rt.gc.colors
    kept = []
    for entry in d.finalisers_last:
        t = entry.target
        if rt.is_minor(t):
            kept.append(entry)
            continue
        st = cm.state_of(values.header_color(rt.mem.load(t - WORD_BYTES)))
        if st == State.UNMARKED:
            _invoke(d, entry, pass_target=False)
        else:
            assert st == State.MARKED, "finaliser target outlived its cycle"
            kept.append(entry)
    d.finalisers_last = kept


def run_finalisers_phase(d) -> None:
    """Run the finaliser pass for the current phase.  Every domain must
    participate once per cycle even with an empty list; the counters feed
    the phase transitions."""
    rt = d.runtime
    g = rt.gc
    if g.phase == PHASE_MARK_FINAL and not d.dl_marked_final:
        _run_final_first(d)
        d.dl_marked_final = True
        with g.lock:
            g.num_doms_marked_final += 1
    elif g.phase == PHASE_SWEEP_EPHE and not d.dl_marked_final_last:
        _run_final_last(d)
        d.dl_marked_final_last = True
        with g.lock:
            g.num_doms_marked_final_last += 1


# -- lazy values ----------------------------------------------------------

def make_lazy(d, fn) -> int:
    """Allocate a lazy cell whose deferred computation is fn(mut) -> word.
    Cells live on the major heap so a reference held across the force
    never moves."""
    rt = d.runtime
    token = rt.register_closure(fn)
    ref = alloc_major(d, 1, Tag.LAZY)
    rt.mem.store(ref, values.encode_scalar(token))
    return ref


def _cas_tag(rt, ref: int, old_tag: int, new_tag: int) -> bool:
    # Colour bits may be flipped concurrently by a marking CAS; retry on
    # any header change that kept our expected tag.
    mem = rt.mem
    while True:
        h = mem.load(ref - WORD_BYTES)
        if values.header_tag(h) != old_tag:
            return False
        if mem.cas(ref - WORD_BYTES, h, values.header_with_tag(h, new_tag)):
            return True


def _raiser(exc):
    def reraise(_mut):
        raise exc
    return reraise


def _force(d, ref: int, concurrent_is_error: bool):
    rt = d.runtime
    mem = rt.mem
    while True:
        tag = values.header_tag(mem.load(ref - WORD_BYTES))
        if tag == Tag.FORWARD:
            return mem.load(ref)
        if tag == Tag.LAZY:
            token_word = mem.load(ref)
            if not _cas_tag(rt, ref, Tag.LAZY, Tag.FORCING):
                continue  # lost the claim; re-examine the tag
            mem.store(ref, values.encode_scalar(d.id))
            fn = rt.closure(values.decode_scalar(token_word))
            try:
                result = fn(rt.mutator_for(d))
            except Exception as exc:
                replay = rt.register_closure(_raiser(exc))
                mem.store(ref, values.encode_scalar(replay))
                ok = _cas_tag(rt, ref, Tag.FORCING, Tag.LAZY)
                assert ok, "only the forcing domain may leave the Forcing state"
                raise
            write_barrier(d, ref, 0, result)
            ok = _cas_tag(rt, ref, Tag.FORCING, Tag.FORWARD)
            assert ok, "only the forcing domain may leave the Forcing state"
            return result
        if tag == Tag.FORCING:
            # Field 0 holds the forcing domain's id.  (There is a benign
            # window where the winner has stored its result but not yet
            # published Forward; a collision with our encoded id is then
            # reported as concurrency, never as someone else's result.)
            holder = mem.load(ref)
            if holder == values.encode_scalar(d.id):
                raise RecursiveForceError("lazy cell 0x%x forced recursively" % ref)
            if concurrent_is_error:
                raise ConcurrentForceError("lazy cell 0x%x is being forced" % ref)
            return None
        raise AssertionError("not a lazy cell: tag %d" % tag)


def lazy_force(d, ref: int) -> int:
    return _force(d, ref, concurrent_is_error=True)


def lazy_try_force(d, ref: int):
    """Like lazy_force but returns None instead of raising when another
    domain is mid-force; recursive forcing still raises."""
    return _force(d, ref, concurrent_is_error=False)


def lazy_force_wait(d, ref: int) -> int:
    """Busy-wait force for memoisation: keep trying, relaxing between
    attempts (servicing interrupts and doing opportunistic GC work)."""
    from .domains import opportunistic_work, poll_safe_point

    rt = d.runtime
    while True:
        result = lazy_try_force(d, ref)
        if result is not None:
            return result
        poll_safe_point(d)
        opportunistic_work(d, 64)
        rt.sched.spin_pause()
