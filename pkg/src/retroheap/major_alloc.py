"""Size-segmented, domain-local page allocator for the major heap.

Pages of 4096 words are carved into equal-sized slots; each slot holds a
header word plus payload, so a class with slot payload S packs
floor(4096/(S+1)) slots.  Free slots are encoded in the headers
themselves (a Free-coloured header spanning the slot payload) rather
than a side bitmap; a per-page circular scan cursor makes allocation
amortised O(1).

Small requests are 1..127 payload words.  Size classes are exact for
1..16 words, then grow geometrically by 1.1x (rounded up, deduplicated)
and are capped at 127, which keeps the per-request waste under 10%.
Requests of 128 words or more bypass pages entirely and get their own
mapping, tracked in a domain-local list of large blocks.

All page operations are domain-local.  Ownership moves only through the
orphan pool, under one runtime-wide mutex, when a domain terminates or
another domain adopts.
"""

from __future__ import annotations

import bisect

from . import values
from .memory import CHUNK_BYTES, PAGE_WORDS
from .values import WORD_BYTES, State, Tag

LARGE_THRESHOLD_WORDS = 128
PAGES_PER_OS_CHUNK = 16


def build_size_classes() -> list:
    classes = list(range(1, 17))
    s = 16
    while s < 127:
        s = min(-(-s * 11 // 10), 127)  # ceil(s * 1.1), capped
        if s != classes[-1]:
            classes.append(s)
    return classes


SIZE_CLASSES = build_size_classes()

LARGE = -1


def size_class_for(size_words: int) -> int:
    """Index of the smallest adequate class, or LARGE for >= 128 words."""
    assert size_words >= 1
    if size_words >= LARGE_THRESHOLD_WORDS:
        return LARGE
    return bisect.bisect_left(SIZE_CLASSES, size_words)


class Page:
    __slots__ = ("base", "size_class", "slot_words", "n_slots", "owner",
                 "swept_epoch", "next_free_scan", "free_slots")

    def __init__(self, base, size_class):
        self.base = base
        self.size_class = size_class
        self.slot_words = SIZE_CLASSES[size_class]
        self.n_slots = PAGE_WORDS // (self.slot_words + 1)
        self.owner = None
        self.swept_epoch = -1
        self.next_free_scan = 0
        self.free_slots = 0

    def slot_addr(self, i: int) -> int:
        return self.base + i * (self.slot_words + 1) * WORD_BYTES

    def usable_words(self) -> int:
        return self.n_slots * (self.slot_words + 1)


class LargeBlock:
    __slots__ = ("ref", "size_words", "map_base", "map_bytes", "swept_epoch")

    def __init__(self, ref, size_words, map_base, map_bytes):
        self.ref = ref
        self.size_words = size_words
        self.map_base = map_base
        self.map_bytes = map_bytes
        self.swept_epoch = -1

    def footprint_words(self) -> int:
        return self.size_words + 1


def _init_free_page(rt, page):
    free_header = values.pack_header(page.slot_words, Tag.BLOCK, rt.gc.colors.free)
    mem = rt.mem
    for i in range(page.n_slots):
        mem.store(page.slot_addr(i), free_header)
    page.free_slots = page.n_slots
    page.next_free_scan = 0
    page.swept_epoch = rt.gc.cycle_no


def _fresh_page(rt, d, cls):
    # Address space is taken from the OS in 16-page chunks to amortise
    # mapping cost; individual pages are committed as they are handed out.
    if not d.page_reserve:
        base = rt.space.reserve(CHUNK_BYTES * PAGES_PER_OS_CHUNK, align=CHUNK_BYTES)
        d.page_reserve = [base + i * CHUNK_BYTES for i in range(PAGES_PER_OS_CHUNK)]
    base = d.page_reserve.pop()
    rt.mem.map_range(base, CHUNK_BYTES)
    page = Page(base, cls)
    page.owner = d.id
    _init_free_page(rt, page)
    rt.register_page(page)
    d.pages.setdefault(cls, []).append(page)
    d.partial_pages.setdefault(cls, []).append(page)
    return page


_ZERO = values.encode_scalar(0)


def _alloc_in_page(rt, d, page, size_words, tag):
    mem = rt.mem
    free_pat = rt.gc.colors.free
    n = page.n_slots
    scan = page.next_free_scan
    for k in range(n):
        i = (scan + k) % n
        addr = page.slot_addr(i)
        if values.header_color(mem.load(addr)) == free_pat:
            mem.store(addr, values.pack_header(size_words, tag, rt.gc.colors.marked))
            for j in range(1, size_words + 1):
                mem.store(addr + j * WORD_BYTES, _ZERO)
            page.next_free_scan = i + 1
            page.free_slots -= 1
            return addr + WORD_BYTES
    return None


def _take_partial(d, cls):
    lst = d.partial_pages.get(cls)
    while lst:
        page = lst[-1]
        if page.free_slots > 0:
            return page
        lst.pop()
    return None


def _adopt_orphan(rt, d, cls, want_full):
    g = rt.gc
    with g.orphan_lock:
        bucket = g.orphan_pages.get(cls)
        if not bucket:
            return None
        lst = bucket["full"] if want_full else bucket["partial"]
        if not lst:
            return None
        page = lst.pop()
    page.owner = d.id
    d.pages.setdefault(cls, []).append(page)
    d.partial_pages.setdefault(cls, []).append(page)
    return page


def alloc_major(d, size_words: int, tag: int) -> int:
    """Allocate on the major heap; returns a reference to an initialised
    header whose colour is the current Marked pattern.  Search order:
    local partial page, sweep local unswept pages of the class, adopt a
    global partial page, adopt and sweep a global full page, fresh page."""
    rt = d.runtime
    cls = size_class_for(size_words)
    if cls == LARGE:
        return _alloc_large(rt, d, size_words, tag)

    ref = None
    page = _take_partial(d, cls)
    if page is not None:
        ref = _alloc_in_page(rt, d, page, size_words, tag)
    if ref is None:
        page = _sweep_local_unswept(rt, d, cls)
        if page is not None:
            ref = _alloc_in_page(rt, d, page, size_words, tag)
    if ref is None:
        page = _adopt_orphan(rt, d, cls, want_full=False)
        if page is not None:
            if page.swept_epoch < rt.gc.cycle_no:
                sweep_page(d, page, rt.gc.colors)
            ref = _alloc_in_page(rt, d, page, size_words, tag)
    if ref is None:
        page = _adopt_orphan(rt, d, cls, want_full=True)
        if page is not None:
            sweep_page(d, page, rt.gc.colors)
            ref = _alloc_in_page(rt, d, page, size_words, tag)
    if ref is None:
        page = _fresh_page(rt, d, cls)
        ref = _alloc_in_page(rt, d, page, size_words, tag)
    assert ref is not None, "fresh page must satisfy a small allocation"
    d.major_alloc_words += size_words + 1
    d.major_words_since_slice += size_words + 1
    return ref


def _alloc_large(rt, d, size_words, tag):
    nbytes = (size_words + 1) * WORD_BYTES
    map_bytes = -(-nbytes // CHUNK_BYTES) * CHUNK_BYTES
    base = rt.space.reserve(map_bytes, align=CHUNK_BYTES)
    rt.mem.map_range(base, map_bytes)
    rt.mem.store(base, values.pack_header(size_words, tag, rt.gc.colors.marked))
    for j in range(1, size_words + 1):
        rt.mem.store(base + j * WORD_BYTES, _ZERO)
    lb = LargeBlock(base + WORD_BYTES, size_words, base, map_bytes)
    lb.swept_epoch = rt.gc.cycle_no
    d.large_blocks.append(lb)
    rt.register_large(lb)
    d.major_alloc_words += size_words + 1
    d.major_words_since_slice += size_words + 1
    return lb.ref


def _sweep_local_unswept(rt, d, cls):
    epoch = rt.gc.cycle_no
    for page in d.pages.get(cls, ()):
        if page.swept_epoch < epoch:
            freed = sweep_page(d, page, rt.gc.colors)
            if freed and page.free_slots > 0:
                d.partial_pages.setdefault(cls, []).append(page)
                return page
    return None


def sweep_page(d, page, cm) -> int:
    """Turn every Garbage slot into a Free slot spanning the whole slot;
    Marked/Unmarked slots are untouched.  Returns words freed (slot
    footprints, header included)."""
    rt = d.runtime
    mem = rt.mem
    freed = 0
    free_header = values.pack_header(page.slot_words, Tag.BLOCK, cm.free)
    nfree = 0
    for i in range(page.n_slots):
        addr = page.slot_addr(i)
        st = cm.state_of(values.header_color(mem.load(addr)))
        if st == State.GARBAGE:
            mem.store(addr, free_header)
            freed += page.slot_words + 1
            nfree += 1
        elif st == State.FREE:
            nfree += 1
    page.free_slots = nfree
    page.swept_epoch = rt.gc.cycle_no
    rt.gc.words_swept += page.usable_words()
    return freed


def _sweep_page_slice(d, page, start, budget):
    """Incremental form of sweep_page: sweep slots [start..) until the
    budget runs out.  Returns (next_slot or None, budget_left)."""
    rt = d.runtime
    mem = rt.mem
    cm = rt.gc.colors
    free_header = values.pack_header(page.slot_words, Tag.BLOCK, cm.free)
    cost = page.slot_words + 1
    i = start
    while i < page.n_slots and budget > 0:
        addr = page.slot_addr(i)
        st = cm.state_of(values.header_color(mem.load(addr)))
        if st == State.GARBAGE:
            mem.store(addr, free_header)
            page.free_slots += 1
            if page.free_slots == 1:
                d.partial_pages.setdefault(page.size_class, []).append(page)
        budget -= cost
        rt.gc.words_swept += cost
        i += 1
    if i >= page.n_slots:
        page.swept_epoch = rt.gc.cycle_no
        return None, budget
    return i, budget


def _sweep_large_list(rt, d, blocks, budget):
    epoch = rt.gc.cycle_no
    cm = rt.gc.colors
    kept = []
    freed_any = False
    for lb in blocks:
        if budget <= 0 or lb.swept_epoch >= epoch:
            kept.append(lb)
            continue
        st = cm.state_of(values.header_color(rt.mem.load(lb.ref - WORD_BYTES)))
        lb.swept_epoch = epoch
        budget -= 1
        if st == State.GARBAGE:
            rt.unregister_large(lb)
            rt.mem.unmap_range(lb.map_base, lb.map_bytes)
            budget -= lb.footprint_words()
            rt.gc.words_swept += lb.footprint_words()
            freed_any = True
        else:
            kept.append(lb)
    blocks[:] = kept
    return budget, freed_any


def sweep_slice(d, budget: int, own_only: bool = False) -> int:
    """Sweep own unswept pages, then unswept orphan pages (adopting them),
    then large blocks, until the budget is spent.  Returns unspent budget."""
    rt = d.runtime
    epoch = rt.gc.cycle_no
    while budget > 0:
        if d.sweep_partial is not None:
            page, pos = d.sweep_partial
            nxt, budget = _sweep_page_slice(d, page, pos, budget)
            d.sweep_partial = None if nxt is None else (page, nxt)
            continue
        page = None
        while d.sweep_queue:
            cand = d.sweep_queue.pop()
            if cand.owner == d.id and cand.swept_epoch < epoch:
                page = cand
                break
        if page is not None:
            d.sweep_partial = (page, 0)
            continue
        budget, progress = _sweep_large_list(rt, d, d.large_blocks, budget)
        if progress:
            continue
        if own_only:
            break
        page = _adopt_any_stale_orphan(rt, d)
        if page is not None:
            d.sweep_partial = (page, 0)
            continue
        if not _adopt_orphan_larges(rt, d):
            break
    return max(budget, 0)


def _adopt_any_stale_orphan(rt, d):
    g = rt.gc
    epoch = rt.gc.cycle_no
    with g.orphan_lock:
        for cls, bucket in g.orphan_pages.items():
            for key in ("full", "partial"):
                lst = bucket[key]
                for i in range(len(lst) - 1, -1, -1):
                    if lst[i].swept_epoch < epoch:
                        page = lst.pop(i)
                        page.owner = d.id
                        d.pages.setdefault(cls, []).append(page)
                        if page.free_slots > 0:
                            d.partial_pages.setdefault(cls, []).append(page)
                        # else the sweep's 0->1 crossing re-lists it.
                        return page
    return None


def _adopt_orphan_larges(rt, d):
    g = rt.gc
    with g.orphan_lock:
        if not g.orphan_large:
            return False
        blocks = g.orphan_large
        g.orphan_large = []
    d.large_blocks.extend(blocks)
    return True


def sweep_all_owned(d):
    while True:
        if sweep_slice(d, 1 << 30, own_only=True) > 0:
            break


def release_pages_on_terminate(d):
    """Move every owned page and large block to the global pool.  Called
    after the terminating domain's final sweep, so everything arrives
    swept for the current cycle."""
    rt = d.runtime
    g = rt.gc
    with g.orphan_lock:
        for cls, pages in d.pages.items():
            bucket = g.orphan_pages.setdefault(cls, {"partial": [], "full": []})
            for page in pages:
                page.owner = None
                bucket["partial" if page.free_slots > 0 else "full"].append(page)
        g.orphan_large.extend(d.large_blocks)
    d.pages = {}
    d.partial_pages = {}
    d.large_blocks = []
    d.sweep_queue = []
    d.sweep_partial = None
