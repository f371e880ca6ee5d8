"""Full-trace reachability oracle, independent of the collector.

The oracle answers "what is live" by brute force: a breadth-first walk
from the registered root arrays with the ephemeron conjunction rule
iterated to a fixpoint.  It never looks at colours, mark stacks or
remembered sets (except where the semantics say those are roots), so it
can sit in judgement over the collector at stop-the-world points.

Two views exist because the two generations treat weakness differently:

 * oracle_trace: semantic liveness.  Ephemeron values count only while
   the ephemeron and all keys are live; weak slots are never traced
   strongly.  Used for end-of-cycle checks.

 * minor_snapshot/check_minor_collection: minor-collection soundness.
   At minor granularity weak slots and finaliser targets are strong
   (weakness begins in the major heap), so the pre-collection live set
   is a strong closure; afterwards every live object must have exactly
   one major copy with identical contents (modulo forwarding) and no
   reference into the collected arenas may survive anywhere reachable.
"""

from __future__ import annotations

from . import values
from .values import WORD_BYTES, State, Tag

ERASED = 2  # keep in sync with features.ERASED


class OracleViolation(AssertionError):
    pass


def _fields(rt, ref):
    h = rt.mem.load(ref - WORD_BYTES)
    n = values.header_size(h)
    return [rt.mem.load(ref + i * WORD_BYTES) for i in range(n)]


def _is_heap_ref(rt, w):
    return w & 1 == 0 and w != ERASED and w != 0 and \
        (rt.is_minor(w) or rt.is_major(w))


def oracle_trace(rt, roots=None):
    """Semantic live set over both generations, with the conjunction rule.
    Returns (live_set, fixpoint_iterations)."""
    mem = rt.mem
    if roots is None:
        roots = []
        for d in rt.registry:
            roots.extend(d.roots)

    ephemerons = []
    for d in rt.registry:
        ephemerons.extend(d.ephemerons)
    ephemerons.extend(rt.gc.global_ephemerons)

    live = set()

    def trace_from(seeds):
        stack = [w for w in seeds if _is_heap_ref(rt, w) and w not in live]
        while stack:
            r = stack.pop()
            if r in live:
                continue
            live.add(r)
            h = mem.load(r - WORD_BYTES)
            if h == values.FORWARDED_HEADER:
                fwd = mem.load(r)
                if _is_heap_ref(rt, fwd) and fwd not in live:
                    stack.append(fwd)
                continue
            if values.header_tag(h) == Tag.EPHEMERON:
                continue  # weak slots: handled by the conjunction rule
            for w in _fields(rt, r):
                if _is_heap_ref(rt, w) and w not in live:
                    stack.append(w)

    trace_from(roots)
    iterations = 0
    while True:
        iterations += 1
        grew = False
        for e in ephemerons:
            if e not in live:
                continue
            flds = _fields(rt, e)
            value, keys = flds[0], flds[1:]
            if value == ERASED or value & 1 or value in live:
                continue
            def key_alive(k):
                if k == ERASED:
                    return False
                return bool(k & 1) or k in live
            if all(key_alive(k) for k in keys):
                before = len(live)
                trace_from([value])
                grew = grew or len(live) > before
        if not grew:
            break
    return live, iterations


def check_cycle_end(rt, snapshot):
    """Inside the end-of-cycle barrier, before rotation: everything that
    was reachable when the cycle started must be Marked now
    (snapshot-at-the-beginning), and so must everything reachable at this
    very moment."""
    cm = rt.gc.colors
    current, _ = oracle_trace(rt)
    suspects = current if snapshot is None else (snapshot | current)
    for r in suspects:
        if rt.is_minor(r):
            continue  # promoted copies are checked through their forwards
        st = cm.state_of(values.header_color(rt.mem.load(r - WORD_BYTES)))
        if st != State.MARKED:
            raise OracleViolation(
                "live object 0x%x is %s at cycle end" % (r, st.name))


def minor_snapshot(rt, doms, extra_roots):
    """Strong closure of the minor objects in the given domains' arenas,
    with a content snapshot for the bijection check."""
    mem = rt.mem
    arena_idxs = {d.arena_index for d in doms}

    def in_scope(w):
        return w & 1 == 0 and rt.is_minor(w) and rt.arena_of(w) in arena_idxs

    seeds = list(extra_roots)
    for d in rt.registry:
        seeds.extend(w for w in d.roots if in_scope(w))
        for entry in d.finalisers_first + d.finalisers_last:
            if in_scope(entry.target):
                seeds.append(entry.target)
        for field in d.remembered_set:
            w = mem.load(field)
            if in_scope(w):
                seeds.append(w)

    live = {}
    stack = list(seeds)
    while stack:
        r = stack.pop()
        if r in live:
            continue
        h = mem.load(r - WORD_BYTES)
        if h == values.FORWARDED_HEADER:
            continue
        flds = _fields(rt, r)
        live[r] = (values.header_size(h), values.header_tag(h), tuple(flds))
        for w in flds:
            if in_scope(w) and w not in live:
                stack.append(w)
    return (arena_idxs, live)


def _resolve(rt, w, arena_idxs):
    """Follow a forward if w points into a collected arena."""
    if w & 1 == 0 and rt.is_minor(w) and rt.arena_of(w) in arena_idxs:
        h = rt.mem.load(w - WORD_BYTES)
        if h == values.FORWARDED_HEADER:
            return rt.mem.load(w)
    return w


def check_minor_collection(rt, doms, snapshot):
    """After a collection of the given arenas: every pre-live object has
    exactly one major copy with contents preserved modulo forwarding, and
    nothing reachable still references the collected arenas."""
    arena_idxs, pre_live = snapshot
    mem = rt.mem

    forwards = {}
    for r, (size, tag, flds) in pre_live.items():
        h = mem.load(r - WORD_BYTES)
        if h != values.FORWARDED_HEADER:
            raise OracleViolation("live minor object 0x%x was not promoted" % r)
        m = mem.load(r)
        if not rt.is_major(m):
            raise OracleViolation("forward of 0x%x is not a major address" % r)
        forwards[r] = m

    if len(set(forwards.values())) != len(forwards):
        raise OracleViolation("two live minor objects share one major copy")

    for r, (size, tag, flds) in pre_live.items():
        m = forwards[r]
        mh = mem.load(m - WORD_BYTES)
        if values.header_size(mh) != size or values.header_tag(mh) != tag:
            raise OracleViolation("promotion of 0x%x changed shape" % r)
        for i, old in enumerate(flds):
            new = mem.load(m + i * WORD_BYTES)
            if new != old and new != _resolve(rt, old, arena_idxs):
                raise OracleViolation(
                    "field %d of 0x%x not preserved by promotion" % (i, r))

    def check_word(w, where):
        if w & 1 == 0 and rt.is_minor(w) and rt.arena_of(w) in arena_idxs:
            raise OracleViolation(
                "minor reference 0x%x survived the collection in %s" % (w, where))

    for d in rt.registry:
        for w in d.roots:
            check_word(w, "roots of domain %d" % d.id)
        for entry in d.finalisers_first + d.finalisers_last:
            check_word(entry.target, "finaliser of domain %d" % d.id)
        if d.arena_index not in arena_idxs:
            addr = d.alloc_cursor
            while addr < d.arena_end:
                h = mem.load(addr)
                size = d.minor_forward_sizes[addr] if h == values.FORWARDED_HEADER \
                    else values.header_size(h)
                if h != values.FORWARDED_HEADER:
                    for i in range(size):
                        check_word(mem.load(addr + (1 + i) * WORD_BYTES),
                                   "arena of domain %d" % d.id)
                addr += (size + 1) * WORD_BYTES
    live, _ = oracle_trace(rt)
    for r in live:
        if rt.is_minor(r):
            continue
        h = mem.load(r - WORD_BYTES)
        if h == values.FORWARDED_HEADER:
            continue
        # Ephemeron slots are checked too: weak stores are remembered, so
        # collection must have rewritten them like any other field.
        for w in _fields(rt, r):
            check_word(w, "major object 0x%x" % r)


def check_closure_promotion(rt, d, promoted):
    """Debug walk after a closure promotion: no reachable location in the
    owner's view still holds a promoted object's old address."""
    mem = rt.mem
    old_addrs = {r for r, _ in promoted}

    def check_word(w, where):
        if w in old_addrs:
            raise OracleViolation(
                "stale reference to promoted 0x%x in %s" % (w, where))

    for w in d.roots:
        check_word(w, "roots")
    for field in d.remembered_set:
        check_word(mem.load(field), "remembered set")
    for field in d.minor_remset:
        check_word(mem.load(field), "minor remembered set")
    addr = d.alloc_cursor
    while addr < d.arena_end:
        h = mem.load(addr)
        size = d.minor_forward_sizes[addr] if h == values.FORWARDED_HEADER \
            else values.header_size(h)
        if h != values.FORWARDED_HEADER:
            for i in range(size):
                check_word(mem.load(addr + (1 + i) * WORD_BYTES), "arena walk")
        addr += (size + 1) * WORD_BYTES
