"""Concurrent minor collector with private, power-of-two aligned arenas.

Every domain's arena is a power-of-two sized, equally aligned slice of
one contiguous reserved region; a second region of the same size sits
immediately above and is never given to any heap ("the shadow"), so no
legal value can alias the bit patterns the read-barrier test relies on.

The read barrier classifies a loaded word against the domain's own
allocation cursor with three ALU steps,

    t = ((value XOR cursor) - arena_bytes) AND ((NOT (region_bytes-1)) OR 1)

and t == 0 exactly when the value points into someone else's arena.  A
remote reference triggers a read fault: the reader interrupts the owner,
keeps servicing its own interrupt queue while it waits (two domains may
fault on each other simultaneously), and receives the promoted major
address back.

The owner promotes cheaply when it can: if the requested object sits in
the youngest slice of its arena (near the cursor), only the object's
transitive closure moves, and the only places that can still reference
the moved objects - the minor roots, the intra-arena old-to-young
remembered set, and objects younger than the oldest promoted one - are
scanned and forwarded.  Anything older forces a full collection of the
arena.  Major-heap fields recorded in the remembered set are rewritten
with a compare-and-swap whose failure is ignored: a failed swap means a
mutator got there first, and its value wins.
"""

from __future__ import annotations

import enum

from . import values
from .domains import (
    IRQ_PROMOTE,
    DeliveryError,
    InterruptRequest,
    PromotionReply,
    poll_safe_point,
    send_interrupt,
)
from .major_alloc import alloc_major
from .values import WORD_BYTES, Tag

MAX_DOMAINS = 128
MAX_ARENA_BYTES = 16 * 1024 * 1024


class Classification(enum.Enum):
    SCALAR = "scalar"
    MAJOR_REF = "major"
    OWN_MINOR_REF = "own_minor"
    REMOTE_MINOR_REF = "remote_minor"


class ArenaLayout:
    """Geometry of the reserved minor region (plus shadow) and the derived
    read-barrier constants.  width_bits parameterises the arithmetic so
    the 16-bit teaching layout and the production 64-bit layout share one
    implementation."""

    def __init__(self, region_base, arena_bytes, num_arenas, width_bits=64):
        if arena_bytes & (arena_bytes - 1) or num_arenas & (num_arenas - 1):
            raise ValueError("arena size and arena count must be powers of two")
        if num_arenas > MAX_DOMAINS:
            raise ValueError("at most %d domains" % MAX_DOMAINS)
        if width_bits == 64 and arena_bytes > MAX_ARENA_BYTES:
            raise ValueError("arena larger than 16 MB")
        if region_base % (arena_bytes * num_arenas):
            raise ValueError("region must be aligned to its own size")
        self.region_base = region_base
        self.arena_bytes = arena_bytes
        self.num_arenas = num_arenas
        self.width_bits = width_bits
        self.word_mask = (1 << width_bits) - 1
        self.region_bytes = arena_bytes * num_arenas
        self.shadow_base = region_base + self.region_bytes
        self.shadow_end = self.shadow_base + self.region_bytes
        self.test_mask = (~(self.region_bytes - 1) | 1) & self.word_mask

    def arena_base(self, idx: int) -> int:
        return self.region_base + idx * self.arena_bytes

    def arena_of(self, addr: int) -> int:
        return (addr - self.region_base) // self.arena_bytes

    def in_region(self, addr: int) -> bool:
        return self.region_base <= addr < self.shadow_base

    def in_shadow(self, addr: int) -> bool:
        return self.shadow_base <= addr < self.shadow_end

    def total_reserved_bytes(self) -> int:
        return 2 * self.region_bytes


def build_arena_layout(space, num_domains: int, arena_bytes: int) -> ArenaLayout:
    """Reserve (not commit) region + shadow; arenas are committed as
    domains come up."""
    region_bytes = arena_bytes * num_domains
    base = space.reserve(2 * region_bytes, align=region_bytes)
    return ArenaLayout(base, arena_bytes, num_domains)


def model_layout_16bit() -> ArenaLayout:
    """The illustrative 16-bit address-space layout: 16 domains of 16
    bytes at 0x4200..0x42ff, shadow 0x4300..0x43ff."""
    return ArenaLayout(0x4200, 0x10, 16, width_bits=16)


def classify_value(v: int, alloc_cursor: int, layout: ArenaLayout) -> Classification:
    """The arithmetic read-barrier test (xor / sub arena / test mask).
    Total: every word classifies, and for every word that can actually
    occur as a value the answer agrees with the address-range oracle."""
    m = layout.word_mask
    t = (((v ^ alloc_cursor) - layout.arena_bytes) & m) & layout.test_mask
    if t == 0:
        return Classification.REMOTE_MINOR_REF
    if v & 1:
        return Classification.SCALAR
    if (v ^ alloc_cursor) < layout.arena_bytes:
        return Classification.OWN_MINOR_REF
    return Classification.MAJOR_REF


RESERVED = "reserved"


def range_classify(v: int, alloc_cursor: int, layout: ArenaLayout):
    """Geometric oracle for classify_value, by address-range membership.
    Returns RESERVED for even words inside the shadow: nothing is ever
    mapped there, so no such word can exist as a value and the barrier's
    answer for it is unconstrained."""
    if v & 1:
        return Classification.SCALAR
    if layout.in_shadow(v):
        return RESERVED
    if layout.in_region(v):
        own_base = alloc_cursor - (alloc_cursor - layout.region_base) % layout.arena_bytes
        if own_base <= v < own_base + layout.arena_bytes:
            return Classification.OWN_MINOR_REF
        return Classification.REMOTE_MINOR_REF
    return Classification.MAJOR_REF


# -- promotion ------------------------------------------------------------

def forward_of(rt, old_ref: int) -> int:
    assert rt.mem.load(old_ref - WORD_BYTES) == values.FORWARDED_HEADER
    return rt.mem.load(old_ref)


def _is_object_start(d, target: int) -> bool:
    """Walk the allocated arena prefix to check that target is a real
    object boundary.  Promoted slots have zero headers; their sizes come
    from the owner's forward-size map.  Young targets sit near the cursor
    so the walk usually stops after a few steps."""
    rt = d.runtime
    mem = rt.mem
    addr = d.alloc_cursor
    while addr < d.arena_end:
        ref = addr + WORD_BYTES
        if ref == target:
            return True
        if ref > target:
            return False
        h = mem.load(addr)
        size = d.minor_forward_sizes[addr] if h == values.FORWARDED_HEADER \
            else values.header_size(h)
        addr += (size + 1) * WORD_BYTES
    return False


def record_old_to_young(d, field_addr: int, r_addr: int, v_addr: int) -> None:
    """Remember an intra-arena write from an older object into a younger
    one (allocation grows downward, so older means higher address)."""
    if r_addr > v_addr:
        d.minor_remset[field_addr] = None


def rewrite_major_remset_entry(rt, field_addr: int, old_minor: int, new_major: int) -> None:
    """Unconditional CAS; failure means a mutator overwrote the field
    concurrently and its store wins."""
    rt.mem.cas(field_addr, old_minor, new_major)


def _promote_set(d, initial_refs):
    """Copy the transitive own-arena closure of initial_refs to the major
    heap, leaving each old slot as (zero header, forward in field 0).
    Returns the list of (old_ref, new_ref) pairs."""
    rt = d.runtime
    mem = rt.mem
    idx = d.arena_index
    work = [r for r in initial_refs]
    promoted = []
    while work:
        r = work.pop()
        if mem.load(r - WORD_BYTES) == values.FORWARDED_HEADER:
            continue
        h = mem.load(r - WORD_BYTES)
        size = values.header_size(h)
        tag = values.header_tag(h)
        assert tag != Tag.PROMOTION_BUSY
        m = alloc_major(d, size, tag)
        for i in range(size):
            w = mem.load(r + i * WORD_BYTES)
            mem.store(m + i * WORD_BYTES, w)
            if w & 1 == 0 and rt.is_minor(w):
                assert rt.arena_of(w) == idx, \
                    "no references between different minor arenas"
                work.append(w)
        mem.store(r, m)
        mem.store(r - WORD_BYTES, values.FORWARDED_HEADER)
        d.minor_forward_sizes[r - WORD_BYTES] = size
        d.promoted_words += size + 1
        promoted.append((r, m))
    # Fix the copies: the closure is transitive, so every minor reference
    # inside a copy has a forward by now.
    for _, m in promoted:
        size = values.header_size(mem.load(m - WORD_BYTES))
        for i in range(size):
            w = mem.load(m + i * WORD_BYTES)
            if w & 1 == 0 and rt.is_minor(w):
                mem.store(m + i * WORD_BYTES, forward_of(rt, w))
    return promoted


def _fix_forwarded(rt, w: int) -> int:
    if w & 1 == 0 and w != 0 and rt.is_minor(w) \
            and rt.mem.load(w - WORD_BYTES) == values.FORWARDED_HEADER:
        return rt.mem.load(w)
    return w


def _fix_roots_and_remsets(d):
    rt = d.runtime
    mem = rt.mem
    for i, w in enumerate(d.roots):
        d.roots[i] = _fix_forwarded(rt, w)
    for entry in d.finalisers_first:
        entry.target = _fix_forwarded(rt, entry.target)
    for entry in d.finalisers_last:
        entry.target = _fix_forwarded(rt, entry.target)
    for field in d.remembered_set:
        w = mem.load(field)
        if w & 1 == 0 and rt.is_minor(w) \
                and mem.load(w - WORD_BYTES) == values.FORWARDED_HEADER:
            rewrite_major_remset_entry(rt, field, w, mem.load(w))
    for field in d.minor_remset:
        w = mem.load(field)
        fixed = _fix_forwarded(rt, w)
        if fixed != w:
            mem.store(field, fixed)


def _walk_younger_than(d, oldest_ref):
    """Forward minor references held by objects allocated after the oldest
    promoted object (addresses below it)."""
    rt = d.runtime
    mem = rt.mem
    addr = d.alloc_cursor
    end = oldest_ref - WORD_BYTES
    while addr < end:
        h = mem.load(addr)
        if h == values.FORWARDED_HEADER:
            addr += (d.minor_forward_sizes[addr] + 1) * WORD_BYTES
            continue
        size = values.header_size(h)
        for i in range(size):
            w = mem.load(addr + (1 + i) * WORD_BYTES)
            fixed = _fix_forwarded(rt, w)
            if fixed != w:
                mem.store(addr + (1 + i) * WORD_BYTES, fixed)
        addr += (size + 1) * WORD_BYTES


def handle_promotion_request(d, target: int) -> int:
    """Service a promotion request for an object in this domain's arena.
    Returns the major address, or 0 if the request is stale (the slot no
    longer holds the object the requester saw); the requester re-reads
    the field it faulted on.

    A fresh target (youngest slice of the arena) promotes just its
    closure; an old one forces a full minor collection."""
    rt = d.runtime
    assert rt.arena_of(target) == d.arena_index
    mem = rt.mem
    if mem.load(target - WORD_BYTES) == values.FORWARDED_HEADER:
        return mem.load(target)
    if target < d.alloc_cursor + WORD_BYTES or not _is_object_start(d, target):
        return 0
    young_span = int(rt.config.young_fraction * d.runtime.layout.arena_bytes)
    if target - d.alloc_cursor <= young_span:
        promoted = _promote_set(d, [target])
        d.closure_promotions += 1
        _fix_roots_and_remsets(d)
        oldest = max(r for r, _ in promoted)
        _walk_younger_than(d, oldest)
        if rt.debug_oracle:
            rt.oracle_check_closure_promotion(d, promoted)
        return forward_of(rt, target)
    full_minor_collect(d, extra_roots=[target])
    return forward_of(rt, target)


def full_minor_collect(d, extra_roots=()) -> None:
    """Promote everything reachable from the minor roots (registered root
    array, remembered set, finaliser targets) out of this arena, fix all
    references, and reset the arena.  Both remembered sets are cleared."""
    rt = d.runtime
    mem = rt.mem
    idx = d.arena_index
    if rt.debug_oracle:
        pre_live = rt.oracle_minor_pre(d, extra_roots)

    roots = [w for w in d.roots
             if w & 1 == 0 and rt.is_minor(w) and rt.arena_of(w) == idx]
    for entry in d.finalisers_first:
        t = entry.target
        if rt.is_minor(t) and rt.arena_of(t) == idx:
            roots.append(t)
    for entry in d.finalisers_last:
        t = entry.target
        if rt.is_minor(t) and rt.arena_of(t) == idx:
            roots.append(t)
    for field in d.remembered_set:
        w = mem.load(field)
        if w & 1 == 0 and rt.is_minor(w) and rt.arena_of(w) == idx:
            roots.append(w)
    roots.extend(extra_roots)
    _promote_set(d, roots)  # already-forwarded roots are skipped inside
    _fix_roots_and_remsets(d)

    d.remembered_set = {}
    d.minor_remset = {}
    d.minor_gcs += 1
    d.full_minor_promotions += 1
    if rt.debug_oracle:
        rt.oracle_minor_post(d, pre_live)
    d.reset_arena()


def read_mutable_field(d, obj: int, field_idx: int) -> int:
    """Load with the read barrier.  A remote minor reference faults: the
    owner is interrupted, we service our own queue while waiting (mutual
    faults resolve each other), and the result is validated against the
    field before use - a stale promotion answer (the owner collected its
    arena in between) just means we re-read and go again."""
    rt = d.runtime
    mem = rt.mem
    layout = rt.layout
    while True:
        obj = _fix_forwarded(rt, obj)
        addr = obj + field_idx * WORD_BYTES
        v = mem.load(addr)
        if classify_value(v, d.alloc_cursor, layout) is not Classification.REMOTE_MINOR_REF:
            return v
        d.read_faults += 1
        owner = rt.domain_by_arena(rt.arena_of(v))
        if owner is None:
            continue  # owner terminated; its collection rewrote the field
        reply = PromotionReply()
        try:
            send_interrupt(owner, InterruptRequest(IRQ_PROMOTE, v, reply))
        except DeliveryError:
            continue
        while not reply.ready:
            poll_safe_point(d)
            rt.sched.spin_pause()
        m = reply.value
        if m == 0:
            continue  # stale target: the field no longer holds what we saw
        obj = _fix_forwarded(rt, obj)
        addr = obj + field_idx * WORD_BYTES
        if mem.cas(addr, v, m) or mem.load(addr) == m:
            return m
        # The field changed while we promoted; classify the new value.
