"""Runtime assembly: configuration, domain registry, and the mutator API.

The Runtime owns the simulated memory, the arena layout, the global GC
state and the scheduler; domains are spawned onto scheduler threads and
drive all heap work through a Mutator handle.

Heap discipline for mutator code: any reference held across a potential
GC point (an allocation, a tick, a relax/spin) must live in the domain's
registered root array, and must be re-read from there afterwards.  Minor
objects move when arenas are collected; the collectors rewrite the root
array, the remembered sets and the promoted objects, but they cannot see
plain Python locals.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field

from . import domains as domains_mod
from . import major_gc, minor_conc, minor_stw, oracle, values
from .domains import Domain, GlobalGcState
from .memory import AddressSpace, Memory
from .sync import CooperativeScheduler, ThreadScheduler
from .values import WORD_BYTES, Tag


@dataclass
class RuntimeConfig:
    minor_variant: str = "stw"          # "stw" | "conc"
    arena_words: int = 256 * 1024       # power of two, at most 2M words (16 MB)
    max_domains: int = 128
    root_slots: int = 64
    pacing_factor: float = 1.5
    min_slice_words: int = 4096
    max_slice_words: int | None = None
    young_fraction: float = 0.05
    opportunistic_budget: int = 256
    mode: str = "threads"               # "threads" | "explore"
    schedule_seed: int = 0
    explore_max_steps: int | None = 2_000_000
    debug_oracle: bool = field(
        default_factory=lambda: os.environ.get("RETROHEAP_DEBUG_ORACLE") == "1")


class Runtime:
    def __init__(self, config: RuntimeConfig | None = None, **overrides):
        if config is None:
            config = RuntimeConfig(**overrides)
        if config.minor_variant not in ("stw", "conc"):
            raise ValueError("minor_variant must be 'stw' or 'conc'")
        if config.arena_words & (config.arena_words - 1):
            raise ValueError("arena_words must be a power of two")
        self.config = config
        self.variant = config.minor_variant
        self.debug_oracle = config.debug_oracle

        if config.mode == "explore":
            self.sched = CooperativeScheduler(seed=config.schedule_seed,
                                              max_steps=config.explore_max_steps)
        else:
            self.sched = ThreadScheduler()

        self.mem = Memory()
        self.space = AddressSpace()
        num_arenas = 1
        while num_arenas < config.max_domains:
            num_arenas *= 2
        self.layout = minor_conc.build_arena_layout(
            self.space, num_arenas, config.arena_words * WORD_BYTES)

        self.gc = GlobalGcState()
        self.registry = []
        self.domains_history = []
        self.rendezvous = domains_mod.Rendezvous()
        self.stw_token = threading.Lock()
        self.current_episode = None
        self.minor_epoch = 0
        self.stw_shares = {}

        self._registry_lock = threading.Lock()
        self._next_domain_id = 0
        self._free_arena_slots = list(range(num_arenas - 1, -1, -1))
        self._arena_owner = {}
        self._tls = threading.local()

        self._closures = []
        self._closure_lock = threading.Lock()

        self._pages = []
        self._larges = {}
        self.major_words_total = 0
        self.max_heap_words = 0

        self._cycle_snapshot = None

    # -- address classification -------------------------------------------

    def is_minor(self, w: int) -> bool:
        return self.layout.region_base <= w < self.layout.shadow_base

    def is_major(self, w: int) -> bool:
        # Reference-shaped and above region+shadow: the minor region is
        # reserved before any major memory, so every major address is
        # beyond the shadow.  The erased sentinel and scalars fall out.
        return w & 1 == 0 and w >= self.layout.shadow_end

    def arena_of(self, addr: int) -> int:
        return self.layout.arena_of(addr)

    def domain_by_arena(self, arena_index: int):
        return self._arena_owner.get(arena_index)

    # -- registry -----------------------------------------------------------

    def register_domain(self, entry) -> Domain:
        with self._registry_lock:
            if len(self.registry) >= self.config.max_domains:
                raise domains_mod.DomainLimitError(
                    "domain limit %d reached" % self.config.max_domains)
            arena_index = self._free_arena_slots.pop()
            dom_id = self._next_domain_id
            self._next_domain_id += 1
            d = Domain(self, dom_id, arena_index, entry)
            # Born with marking "done": a mid-cycle newcomer has no mark
            # work of its own and is not counted in gNumDomsToMark; the
            # empty-stack push rule arms it if work ever arrives.  Being
            # born with an empty stack carries the same side effect as
            # emptying it: a fresh ephemeron round begins, which everyone
            # (including the newcomer) then confirms.
            d.dl_marking_done = True
            with self.gc.lock:
                self.gc.ephe_round += 1
                self.gc.num_doms_marked_ephe = 0
            self.mem.map_range(d.arena_base, self.layout.arena_bytes)
            self.registry.append(d)
            self.domains_history.append(d)
            self._arena_owner[arena_index] = d
            self.gc.num_doms += 1
        if entry is not None:
            self.sched.launch("domain-%d" % dom_id, lambda: self._domain_main(d))
        return d

    def unregister_domain(self, d: Domain) -> None:
        with self._registry_lock:
            self.registry.remove(d)
            self._arena_owner.pop(d.arena_index, None)
            self._free_arena_slots.append(d.arena_index)
            self.gc.num_doms -= 1
            d.terminated = True

    def _domain_main(self, d: Domain) -> None:
        self._tls.domain = d
        try:
            d.entry(self.mutator_for(d))
        finally:
            domains_mod.terminate_domain(d)
            self._tls.domain = None

    def current_domain(self):
        return getattr(self._tls, "domain", None)

    # -- spawn/join ----------------------------------------------------------

    def spawn(self, entry) -> Domain:
        return domains_mod.spawn_domain(self, entry)

    def join_all(self) -> None:
        self.sched.run_until_complete()

    # -- heap bookkeeping -----------------------------------------------------

    def register_page(self, page) -> None:
        self._pages.append(page)
        self._note_growth(page.usable_words())

    def register_large(self, lb) -> None:
        self._larges[lb.map_base] = lb
        self._note_growth(lb.footprint_words())

    def unregister_large(self, lb) -> None:
        self._larges.pop(lb.map_base, None)
        self.major_words_total -= lb.footprint_words()

    def _note_growth(self, words: int) -> None:
        self.major_words_total += words
        if self.major_words_total > self.max_heap_words:
            self.max_heap_words = self.major_words_total

    def iter_major_objects(self):
        """Yield (ref, header) for every non-free slot of every page and
        every large block.  Debug/oracle use only."""
        free = None
        for page in self._pages:
            for i in range(page.n_slots):
                addr = page.slot_addr(i)
                h = self.mem.load(addr)
                if self.gc.colors.state_of(values.header_color(h)) != values.State.FREE:
                    yield addr + WORD_BYTES, h
        for lb in list(self._larges.values()):
            yield lb.ref, self.mem.load(lb.ref - WORD_BYTES)

    # -- closures (lazy cells) -------------------------------------------------

    def register_closure(self, fn) -> int:
        with self._closure_lock:
            self._closures.append(fn)
            return len(self._closures) - 1

    def closure(self, token: int):
        return self._closures[token]

    # -- mutator handles ---------------------------------------------------------

    def mutator_for(self, d: Domain) -> "Mutator":
        mut = getattr(d, "_mutator", None)
        if mut is None:
            mut = Mutator(self, d)
            d._mutator = mut
        return mut

    # -- oracle hooks (debug mode) -------------------------------------------------

    def oracle_snapshot_cycle_start(self) -> None:
        live, _ = oracle.oracle_trace(self)
        self._cycle_snapshot = live

    def oracle_check_cycle_end(self) -> None:
        oracle.check_cycle_end(self, self._cycle_snapshot)

    def oracle_minor_pre(self, d, extra_roots):
        return oracle.minor_snapshot(self, [d], extra_roots)

    def oracle_minor_post(self, d, snapshot) -> None:
        oracle.check_minor_collection(self, [d], snapshot)

    def oracle_stw_minor_pre(self) -> None:
        self._stw_snapshot = oracle.minor_snapshot(self, self.registry, ())

    def oracle_stw_minor_post(self) -> None:
        oracle.check_minor_collection(self, self.registry, self._stw_snapshot)
        self._stw_snapshot = None

    def oracle_check_closure_promotion(self, d, promoted) -> None:
        oracle.check_closure_promotion(self, d, promoted)


class Mutator:
    """Per-domain handle used by workload code.  Every operation counts
    toward the safe-point bound; tick() and relax() are the explicit poll
    points workloads place on loop back-edges and contended spins."""

    def __init__(self, rt: Runtime, d: Domain):
        self.rt = rt
        self.d = d

    # -- allocation ----------------------------------------------------

    def alloc(self, size_words: int, tag: int = Tag.BLOCK) -> int:
        # Allocation sites are safe points.
        self.d.note_op()
        domains_mod.poll_safe_point(self.d)
        return minor_stw.alloc_minor(self.d, size_words, tag)

    def alloc_major(self, size_words: int, tag: int = Tag.BLOCK) -> int:
        from .major_alloc import alloc_major
        self.d.note_op()
        return alloc_major(self.d, size_words, tag)

    # -- field access ----------------------------------------------------

    def load(self, obj: int, i: int) -> int:
        self.d.note_op()
        if self.rt.variant == "conc":
            return minor_conc.read_mutable_field(self.d, obj, i)
        return self.rt.mem.load(obj + i * WORD_BYTES)

    def store(self, obj: int, i: int, w: int) -> None:
        self.d.note_op()
        major_gc.write_barrier(self.d, obj, i, w)

    # -- roots -------------------------------------------------------------

    def root(self, i: int) -> int:
        return self.d.roots[i]

    def set_root(self, i: int, w: int) -> None:
        self.d.roots[i] = w

    # -- scalars ------------------------------------------------------------

    @staticmethod
    def scalar(n: int) -> int:
        return values.encode_scalar(n)

    @staticmethod
    def value(w: int) -> int:
        return values.decode_scalar(w)

    # -- safe points -----------------------------------------------------------

    def tick(self) -> None:
        self.d.note_op()
        domains_mod.poll_safe_point(self.d)

    def relax(self) -> None:
        """Contention backoff: poll, do a little opportunistic GC work,
        and yield."""
        domains_mod.poll_safe_point(self.d)
        domains_mod.opportunistic_work(self.d, 64)
        self.rt.sched.spin_pause()

    # -- collector controls -------------------------------------------------------

    def gc_slice(self, budget: int | None = None) -> None:
        major_gc.major_slice(self.d, budget)

    def minor_collect(self) -> None:
        if self.rt.variant == "conc":
            minor_conc.full_minor_collect(self.d)
        else:
            minor_stw.request_stw_minor(self.d)
        major_gc.major_slice(self.d)

    def force_major_cycle(self) -> None:
        """Drive slices (and service barriers) until a cycle completes."""
        start = self.rt.gc.cycle_no
        while self.rt.gc.cycle_no == start:
            major_gc.major_slice(self.d, 1 << 20)
            domains_mod.poll_safe_point(self.d)

    # -- features ----------------------------------------------------------------

    def make_ephemeron(self, num_keys: int) -> int:
        from . import features
        return features.make_ephemeron(self.d, num_keys)

    def ephe_set_key(self, e: int, i: int, k: int) -> None:
        from . import features
        features.ephe_set_key(self.d, e, i, k)

    def ephe_set_value(self, e: int, v: int) -> None:
        from . import features
        features.ephe_set_value(self.d, e, v)

    def ephe_get_key(self, e: int, i: int):
        from . import features
        return features.ephe_get_key(self.d, e, i)

    def ephe_get_value(self, e: int):
        from . import features
        return features.ephe_get_value(self.d, e)

    def finalise(self, target: int, action) -> None:
        from . import features
        features.register_finaliser(self.d, features.WITH_OBJECT, target, action)

    def finalise_last(self, target: int, action) -> None:
        from . import features
        features.register_finaliser(self.d, features.LAST_ONLY, target, action)

    def make_lazy(self, fn) -> int:
        from . import features
        return features.make_lazy(self.d, fn)

    def force(self, cell: int) -> int:
        from . import features
        return features.lazy_force(self.d, cell)

    def try_force(self, cell: int):
        from . import features
        return features.lazy_try_force(self.d, cell)

    def force_wait(self, cell: int) -> int:
        from . import features
        return features.lazy_force_wait(self.d, cell)
