"""Stop-the-world parallel minor collector.

Minor allocation is a downward bump of the domain's cursor in both
collector variants; this module owns the bump allocator and the
stop-the-world episode that collects every arena at once.

When a domain cannot satisfy an allocation it interrupts everyone;
domains reach the entry barrier at their next safe point (doing
opportunistic major work while they wait), and exactly one collection
runs even if several domains asked at once.  Inside the episode all
domains promote live objects in parallel.  Racing promotions of the same
object are serialised by claiming the header with a CAS into a transient
busy state; the loser spins until the header reads zero, at which point
field 0 holds the forwarding pointer.  The zero header is published only
after the forward is written, so no domain can ever observe a promoted
object without a valid forward.

Remembered-set entries from all domains are concatenated and split into
near-equal contiguous shares, one per domain, because one domain may own
nearly all the inter-generational pointers (a producer updating shared
state) while the rest sit idle.
"""

from __future__ import annotations

from . import values
from .domains import IRQ_STW_MINOR, poll_safe_point, run_stw_episode
from .major_alloc import alloc_major
from .values import WORD_BYTES, Tag

_ZERO = values.encode_scalar(0)


def alloc_minor(d, size_words: int, tag: int) -> int:
    """Bump-pointer allocation in the domain's arena; fields are
    initialised to scalar 0.  Objects that cannot fit in the arena at all
    go straight to the major heap."""
    rt = d.runtime
    nbytes = (size_words + 1) * WORD_BYTES
    if nbytes >= rt.layout.arena_bytes:
        return alloc_major(d, size_words, tag)
    mem = rt.mem
    while True:
        newc = d.alloc_cursor - nbytes
        if newc >= d.alloc_limit:
            d.alloc_cursor = newc
            mem.store(newc, values.pack_header(size_words, tag, rt.gc.colors.marked))
            for j in range(1, size_words + 1):
                mem.store(newc + j * WORD_BYTES, _ZERO)
            return newc + WORD_BYTES
        # Slow path: a poisoned limit (pending interrupts) or a full arena.
        poll_safe_point(d)
        if d.alloc_cursor - nbytes >= d.alloc_limit:
            continue
        if rt.variant == "conc":
            from .minor_conc import full_minor_collect
            full_minor_collect(d)
        else:
            request_stw_minor(d)
        from .major_gc import major_slice
        major_slice(d)


def request_stw_minor(d) -> None:
    """Bring all domains to a barrier and collect every arena.  Concurrent
    requests collapse into one episode: if a collection completed while we
    were waiting for the token, ours is no longer needed."""
    rt = d.runtime
    epoch = rt.minor_epoch

    def still_needed():
        return rt.minor_epoch == epoch

    run_stw_episode(
        rt, d, IRQ_STW_MINOR,
        prep=lambda: episode_prep(rt),
        per_domain=lambda dom: episode_collect(rt, dom),
        finish=lambda: episode_finish(rt),
        still_needed=still_needed,
    )


def episode_prep(rt) -> bool:
    """Run by the last domain into the barrier: split the union of the
    remembered sets into bounded-size shares."""
    if rt.debug_oracle:
        rt.oracle_stw_minor_pre()
    rt.stw_shares = partition_remembered_sets(rt.registry)
    return True


def partition_remembered_sets(domains):
    """Concatenate all domains' remembered-set entries and split them into
    len(domains) contiguous shares whose sizes differ by at most one.
    Duplicate field locations are not deduplicated across domains;
    forwarding is idempotent so a double rewrite is harmless."""
    entries = [addr for d in domains for addr in d.remembered_set]
    n = len(domains)
    base, extra = divmod(len(entries), n)
    shares = {}
    pos = 0
    for i, d in enumerate(domains):
        take = base + (1 if i < extra else 0)
        shares[d.id] = entries[pos:pos + take]
        pos += take
    return shares


def episode_collect(rt, dom) -> None:
    """Per-domain parallel phase: promote everything reachable from this
    domain's roots and its share of the remembered set."""
    mem = rt.mem
    single = len(rt.registry) == 1
    work = []
    for i, w in enumerate(dom.roots):
        if w & 1 == 0 and rt.is_minor(w):
            dom.roots[i] = promote_object(dom, w, work, single)
    for entry in dom.finalisers_first:
        if entry.target & 1 == 0 and rt.is_minor(entry.target):
            entry.target = promote_object(dom, entry.target, work, single)
    for entry in dom.finalisers_last:
        if entry.target & 1 == 0 and rt.is_minor(entry.target):
            entry.target = promote_object(dom, entry.target, work, single)
    for field in rt.stw_shares.get(dom.id, ()):
        w = mem.load(field)
        if w & 1 == 0 and rt.is_minor(w):
            m = promote_object(dom, w, work, single)
            # Duplicated entries race benignly: every promoter of the same
            # object writes the same forward.
            mem.store(field, m)
    while work:
        m = work.pop()
        size = values.header_size(mem.load(m - WORD_BYTES))
        for i in range(size):
            w = mem.load(m + i * WORD_BYTES)
            if w & 1 == 0 and rt.is_minor(w):
                mem.store(m + i * WORD_BYTES, promote_object(dom, w, work, single))
    dom.minor_gcs += 1


def promote_object(d, r: int, work: list, single_domain: bool = False) -> int:
    """Copy one minor object to the major heap, claiming it first.

    Exactly one domain wins the Original -> PromotionBusy transition,
    copies the payload, writes the forward into field 0, and only then
    publishes the zero header.  Losers spin on the busy state and read
    the forward once the header is zero.  With a single domain the CAS
    and the intermediate state are elided."""
    rt = d.runtime
    mem = rt.mem
    if single_domain:
        h = mem.load(r - WORD_BYTES)
        if h == values.FORWARDED_HEADER:
            return mem.load(r)
        return _copy_out(d, r, h, work)
    while True:
        h = mem.load(r - WORD_BYTES)
        if h == values.FORWARDED_HEADER:
            return mem.load(r)
        if values.header_tag(h) == Tag.PROMOTION_BUSY:
            rt.sched.spin_pause()
            continue
        if mem.cas(r - WORD_BYTES, h, values.header_with_tag(h, Tag.PROMOTION_BUSY)):
            return _copy_out(d, r, h, work)


def _copy_out(d, r, original_header, work):
    rt = d.runtime
    mem = rt.mem
    size = values.header_size(original_header)
    tag = values.header_tag(original_header)
    m = alloc_major(d, size, tag)
    for i in range(size):
        mem.store(m + i * WORD_BYTES, mem.load(r + i * WORD_BYTES))
    mem.store(r, m)
    # Publish last: a zero header always implies a valid field-0 forward.
    mem.store(r - WORD_BYTES, values.FORWARDED_HEADER)
    d.promoted_words += size + 1
    work.append(m)
    return m


def episode_finish(rt) -> None:
    """Last domain out: reset every arena, clear the remembered sets, and
    bump the collection epoch that collapses duplicate requests."""
    if rt.debug_oracle:
        rt.oracle_stw_minor_post()
    for dom in rt.registry:
        dom.reset_arena()
        dom.remembered_set = {}
        dom.minor_remset = {}
    rt.stw_shares = {}
    rt.minor_epoch += 1
