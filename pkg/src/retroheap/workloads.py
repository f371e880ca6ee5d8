"""Mutator workloads for the CLI and the acceptance suite.

All workloads follow the heap discipline documented on the Runtime: a
reference held across an allocation, tick or relax lives in the root
array (slot conventions are local to each workload), and is re-read from
there afterwards.  Each workload validates its own data (checksums,
cache hits, execution counts) so a collector bug that corrupts or loses
reachable data fails loudly even without the debug oracle.

    treechurn  binarytrees-style allocation churn with a retained ring
    chanshare  a master farms work items to workers over bounded
               single-producer single-consumer channels in the major heap
    ephecache  an ephemeron-keyed cache under key churn, plus a large
               retained graph
    lazymemo   contended memoisation through lazy cells
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .report import GcReport, build_report
from .runtime import Runtime, RuntimeConfig
from .values import Tag


class WorkloadError(Exception):
    """Configuration or self-validation failure."""


@dataclass
class WorkloadSpec:
    name: str
    num_domains: int = 1
    iterations: int = 50
    arena_words: int = 4096
    minor_variant: str = "stw"
    seed: int = 0
    mode: str = "threads"
    pacing_factor: float = 1.5
    min_slice_words: int = 4096
    max_slice_words: int | None = None
    tree_depth: int = 5
    cache_slots: int = 6
    lazy_cells: int = 12
    retained_objects: int = 0
    root_slots: int = 64
    debug_oracle: bool = False


WORKLOADS = ("treechurn", "chanshare", "ephecache", "lazymemo")

# Root slot conventions shared by the workloads.
_R_SCRATCH = 0          # transient value being operated on
_R_BASE = 8             # base of the shadow stack / keep ring

_WORKLOAD_SALT = {"treechurn": 1, "chanshare": 2, "ephecache": 3, "lazymemo": 4}


def _rng(spec, index: int) -> random.Random:
    # Integer-only seed derivation: string/tuple seeds go through hash()
    # and would break run-to-run reproducibility under hash randomisation.
    return random.Random(spec.seed * 1000003 + index * 97
                         + _WORKLOAD_SALT[spec.name])


class RootStack:
    """Shadow stack over a slice of the root array: the stand-in for the
    program stack, so partially built structures survive collections."""

    def __init__(self, mut, base=_R_BASE):
        self.mut = mut
        self.base = base
        self.top = 0

    def push(self, w):
        self.mut.set_root(self.base + self.top, w)
        self.top += 1

    def pop(self):
        self.top -= 1
        w = self.mut.root(self.base + self.top)
        self.mut.set_root(self.base + self.top, self.mut.scalar(0))
        return w

    def peek(self, depth=0):
        return self.mut.root(self.base + self.top - 1 - depth)


def build_tree(mut, rs: RootStack, depth: int, rng) -> int:
    """Build a binary tree bottom-up; returns with the root pushed on rs.
    Nodes are [value, left, right]; leaves carry scalar zeros."""
    if depth == 0:
        leaf = mut.alloc(3)
        mut.store(leaf, 0, mut.scalar(rng.randrange(1 << 20)))
        rs.push(leaf)
        return leaf
    build_tree(mut, rs, depth - 1, rng)
    build_tree(mut, rs, depth - 1, rng)
    node = mut.alloc(3)
    right = rs.pop()
    left = rs.pop()
    mut.store(node, 0, mut.scalar(rng.randrange(1 << 20)))
    mut.store(node, 1, left)
    mut.store(node, 2, right)
    rs.push(node)
    return node


def tree_checksum(mut, tree: int) -> int:
    """Sum of all node values.  Pure loads: no allocation, so raw
    references are stable for the duration of the walk."""
    total = 0
    stack = [tree]
    while stack:
        r = stack.pop()
        total += mut.value(mut.load(r, 0))
        for i in (1, 2):
            w = mut.load(r, i)
            if w & 1 == 0:
                stack.append(w)
    return total


def _treechurn_entry(mut, spec, shared, index):
    rng = _rng(spec, index)
    rs = RootStack(mut)
    keep_slots = 4
    kept_sums = {}
    for it in range(spec.iterations):
        depth = rng.randint(2, spec.tree_depth)
        build_tree(mut, rs, depth, rng)
        total = tree_checksum(mut, rs.peek())
        if it % 3 == 0:
            # Retain in the keep ring; verify it again after later churn.
            slot = 1 + (it // 3) % keep_slots
            mut.set_root(slot, rs.pop())
            kept_sums[slot] = total
        else:
            rs.pop()
        mut.tick()
        for slot, expected in kept_sums.items():
            if it % 7 == slot % 7 and tree_checksum(mut, mut.root(slot)) != expected:
                raise WorkloadError("retained tree %d corrupted at iteration %d"
                                    % (slot, it))
    for slot, expected in kept_sums.items():
        if tree_checksum(mut, mut.root(slot)) != expected:
            raise WorkloadError("retained tree %d corrupted" % slot)
    shared.setdefault("results", []).append(("treechurn", index, sum(kept_sums.values())))


# -- chanshare --------------------------------------------------------------

_CAP = 4  # channel capacity (slots)


def _make_channel(mut) -> int:
    ch = mut.alloc_major(3 + _CAP, Tag.BLOCK)
    mut.store(ch, 0, mut.scalar(_CAP))
    mut.store(ch, 1, mut.scalar(0))  # head
    mut.store(ch, 2, mut.scalar(0))  # tail
    return ch


def _chan_push(mut, ch: int, w: int) -> None:
    cap = mut.value(mut.load(ch, 0))
    while True:
        head = mut.value(mut.load(ch, 1))
        tail = mut.value(mut.load(ch, 2))
        if tail - head < cap:
            break
        mut.relax()
    mut.store(ch, 3 + tail % cap, w)
    mut.store(ch, 2, mut.scalar(tail + 1))


def _chan_try_pop(mut, ch: int, root_slot: int):
    head = mut.value(mut.load(ch, 1))
    tail = mut.value(mut.load(ch, 2))
    if tail <= head:
        return None
    cap = mut.value(mut.load(ch, 0))
    w = mut.load(ch, 3 + head % cap)
    # Root the item before advancing head: once head moves the producer
    # may overwrite the slot, and the channel no longer keeps it alive.
    if w & 1 == 0:
        mut.set_root(root_slot, w)
    mut.store(ch, 1, mut.scalar(head + 1))
    return w


def _chan_pop(mut, ch: int, root_slot: int) -> int:
    while True:
        w = _chan_try_pop(mut, ch, root_slot)
        if w is not None:
            return w
        mut.relax()


def _chanshare_master(mut, spec, shared):
    rng = _rng(spec, 0)
    workers = spec.num_domains - 1
    rs = RootStack(mut)
    table = mut.alloc_major(2 * workers, Tag.BLOCK)
    mut.set_root(1, table)
    for i in range(workers):
        ch = _make_channel(mut)
        mut.store(table, i, ch)
        res = _make_channel(mut)
        mut.store(table, workers + i, res)
    shared["table"] = table
    shared["workers"] = workers

    expected = [0] * workers
    got = [0] * workers
    pending = [0] * workers

    def drain(i, blocking=False):
        res = mut.load(mut.root(1), workers + i)
        while pending[i]:
            w = _chan_pop(mut, res, _R_SCRATCH) if blocking \
                else _chan_try_pop(mut, res, _R_SCRATCH)
            if w is None:
                return
            got[i] += mut.value(w)
            pending[i] -= 1

    for it in range(spec.iterations):
        for i in range(workers):
            depth = rng.randint(1, spec.tree_depth)
            build_tree(mut, rs, depth, rng)
            expected[i] += tree_checksum(mut, rs.peek())
            ch = mut.load(mut.root(1), i)
            _chan_push(mut, ch, rs.pop())
            pending[i] += 1
            # Keep the result rings from filling while we produce.
            drain(i)
            mut.tick()
    for i in range(workers):
        drain(i, blocking=True)
    if got != expected:
        raise WorkloadError("chanshare checksums diverged: %r != %r" % (got, expected))
    shared.setdefault("results", []).append(("chanshare", "master", sum(got)))


def _chanshare_worker(mut, spec, shared, index):
    while "table" not in shared:
        mut.relax()
    table = shared["table"]
    workers = shared["workers"]
    mut.set_root(1, table)
    for it in range(spec.iterations):
        ch = mut.load(mut.root(1), index)
        item = _chan_pop(mut, ch, _R_SCRATCH)
        total = tree_checksum(mut, item)
        res = mut.load(mut.root(1), workers + index)
        _chan_push(mut, res, mut.scalar(total))
        mut.tick()


# -- ephecache ---------------------------------------------------------------

def _ephecache_entry(mut, spec, shared, index):
    rng = _rng(spec, index)
    slots = spec.cache_slots

    # Retained graph: a chain of pair nodes rooted at slot 1.
    mut.set_root(1, mut.scalar(0))
    for i in range(spec.retained_objects):
        node = mut.alloc(2)
        mut.store(node, 0, mut.scalar(i))
        mut.store(node, 1, mut.root(1))
        mut.set_root(1, node)
        if i % 256 == 0:
            mut.tick()

    table = mut.alloc_major(slots, Tag.BLOCK)
    mut.set_root(2, table)
    for i in range(slots):
        e = mut.make_ephemeron(1)
        mut.store(mut.root(2), i, e)

    key_base = 8  # roots 8..8+slots hold the current keys
    live = [False] * slots
    for it in range(spec.iterations):
        i = rng.randrange(slots)
        e = mut.load(mut.root(2), i)
        action = rng.random()
        if action < 0.5:
            # (Re)populate: fresh key object and cached value.
            key = mut.alloc(2)
            mut.set_root(key_base + i, key)
            e = mut.load(mut.root(2), i)
            value = mut.alloc(2)
            mut.set_root(_R_SCRATCH, value)
            e = mut.load(mut.root(2), i)
            mut.ephe_set_key(e, 0, mut.root(key_base + i))
            mut.ephe_set_value(e, mut.root(_R_SCRATCH))
            mut.store(mut.root(_R_SCRATCH), 0, mut.scalar(it))
            live[i] = True
        elif action < 0.75:
            # Drop the key: after a full cycle the cache entry must clear.
            mut.set_root(key_base + i, mut.scalar(0))
            live[i] = False
        else:
            k = mut.ephe_get_key(e, 0)
            v = mut.ephe_get_value(e)
            if k is not None and v is not None and v & 1 == 0:
                mut.set_root(_R_SCRATCH, v)
        mut.tick()
    shared.setdefault("results", []).append(("ephecache", index, sum(live)))


# -- lazymemo -----------------------------------------------------------------

def _lazymemo_setup(mut, spec, shared, counters):
    cells = spec.lazy_cells
    table = mut.alloc_major(cells, Tag.BLOCK)
    mut.set_root(1, table)

    def make_fn(i):
        def compute(m):
            counters[i].add(1)
            box = m.alloc(2)
            m.store(box, 0, m.scalar(1000 + i))
            m.store(box, 1, m.scalar(i))
            return box
        return compute

    for i in range(cells):
        cell = mut.make_lazy(make_fn(i))
        mut.store(mut.root(1), i, cell)
    shared["table"] = table


def _lazymemo_entry(mut, spec, shared, index, counters):
    if index == 0:
        _lazymemo_setup(mut, spec, shared, counters)
    else:
        while "table" not in shared:
            mut.relax()
    mut.set_root(1, shared["table"])
    rng = _rng(spec, index)
    for it in range(spec.iterations):
        i = rng.randrange(spec.lazy_cells)
        cell = mut.load(mut.root(1), i)
        box = mut.force_wait(cell)
        mut.set_root(_R_SCRATCH, box)
        if mut.value(mut.load(mut.root(_R_SCRATCH), 0)) != 1000 + i:
            raise WorkloadError("memoised value corrupted for cell %d" % i)
        mut.tick()


# -- driver --------------------------------------------------------------------

def run_workload(spec: WorkloadSpec) -> GcReport:
    if spec.name not in WORKLOADS:
        raise WorkloadError("unknown workload %r (have: %s)" %
                            (spec.name, ", ".join(WORKLOADS)))
    if spec.num_domains < 1:
        raise WorkloadError("need at least one domain")
    if spec.name == "chanshare" and spec.num_domains < 2:
        raise WorkloadError("chanshare needs a master and at least one worker")
    config = RuntimeConfig(
        minor_variant=spec.minor_variant,
        arena_words=spec.arena_words,
        mode=spec.mode,
        schedule_seed=spec.seed,
        pacing_factor=spec.pacing_factor,
        min_slice_words=spec.min_slice_words,
        max_slice_words=spec.max_slice_words,
        root_slots=spec.root_slots,
        debug_oracle=spec.debug_oracle,
    )
    rt = Runtime(config)
    shared = {}

    if spec.name == "lazymemo":
        from .sync import AtomicInt
        counters = [AtomicInt(0) for _ in range(spec.lazy_cells)]
        shared["exec_counters"] = counters

    def entry_for(index):
        if spec.name == "treechurn":
            return lambda mut: _treechurn_entry(mut, spec, shared, index)
        if spec.name == "chanshare":
            if index == 0:
                return lambda mut: _chanshare_master(mut, spec, shared)
            return lambda mut: _chanshare_worker(mut, spec, shared, index - 1)
        if spec.name == "ephecache":
            return lambda mut: _ephecache_entry(mut, spec, shared, index)
        if spec.name == "lazymemo":
            counters = shared["exec_counters"]
            return lambda mut: _lazymemo_entry(mut, spec, shared, index, counters)
        raise AssertionError

    for i in range(spec.num_domains):
        rt.spawn(entry_for(i))
    rt.join_all()

    if spec.name == "lazymemo":
        for i, c in enumerate(shared["exec_counters"]):
            if c.get() > 1:
                raise WorkloadError("lazy cell %d executed %d times" % (i, c.get()))
    return build_report(rt, spec.name, spec.seed)
