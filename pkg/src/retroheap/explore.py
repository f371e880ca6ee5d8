"""Exhaustive interleaving exploration of the phase-transition protocol.

The slice/phase machinery is abstracted to its counter operations: each
domain runs the slice program below as a sequence of atomic steps, and a
revival event (the get_key effect) may strike between any two steps,
handing fresh mark work to a domain that already declared itself done.
Barrier bodies are modelled as single atomic steps, which is exactly the
guarantee a stop-the-world barrier provides around its double-check.

    M1     sweep+mark, then declare: work -> 0; if work==0 and not done:
           done=1; atomically toMark--, epheRound++, markedEphe=0
    FIN    in MARK_FINAL (once): markedFinal++
           in SWEEP_EPHE (once): markedFinalLast++
    CACHE  cached = epheRound
    EPHE   in MARK_FINAL, if cached > dlEpheRound: mark ephemerons; if
           done: dlEpheRound = cached; atomically if cached == epheRound:
           markedEphe++
    ESWEEP in SWEEP_EPHE (once): sweptEphe++
    CP1    if MARK and toMark==0: barrier{ recheck; phase=MARK_FINAL }
    CP2    if MARK_FINAL and toMark==0 and markedEphe>=N and
           markedFinal>=N: barrier{ recheck; phase=SWEEP_EPHE }
    CP3    if SWEEP_EPHE and sweptEphe>=N and markedFinalLast>=N:
           barrier{ recheck; cycle }

The checker enumerates every schedule (with state deduplication and a
schedule budget), checking after each transition:

    P1  toMark never goes negative
    P2  entering SWEEP_EPHE or cycling requires toMark==0, no pending
        work, and every domain done
    P3  entering SWEEP_EPHE requires every dlEpheRound == epheRound (no
        stale round was counted)
    P4  the phase only ever advances MARK -> MARK_FINAL -> SWEEP_EPHE
    P5  the cycle fires at most once per run
    P6  from every reachable state the cycle remains reachable, and no
        state is stuck

Three seeded mutations reproduce classic implementation bugs; each must
be caught: skip-recheck (barrier flips on the stale outer check),
decrement-without-flag (gNumDomsToMark decremented even when the domain
already declared done), stale-round (markedEphe incremented without
comparing the cached round against the current one).
"""

from __future__ import annotations

from dataclasses import dataclass, field

MARK, MARK_FINAL, SWEEP_EPHE = 0, 1, 2
_PHASE_NAMES = {MARK: "MARK", MARK_FINAL: "MARK_FINAL", SWEEP_EPHE: "SWEEP_EPHE"}

# Per-domain program counter.
M1, FIN, CACHE, EPHE, ESWEEP, CP1, CP1F, CP2, CP2F, CP3, CP3F = range(11)
_STEP_NAMES = ["M1", "FIN", "CACHE", "EPHE", "ESWEEP", "CP1", "CP1_FLIP",
               "CP2", "CP2_FLIP", "CP3", "CYCLE"]

MUTATION_NONE = "none"
MUTATION_SKIP_RECHECK = "skip-recheck"
MUTATION_DECREMENT_NO_FLAG = "decrement-without-flag"
MUTATION_STALE_ROUND = "stale-round"
MUTATIONS = (MUTATION_SKIP_RECHECK, MUTATION_DECREMENT_NO_FLAG,
             MUTATION_STALE_ROUND)


@dataclass(frozen=True)
class Dom:
    pc: int = M1
    work: int = 1          # abstract units of pending mark work (0/1)
    done: bool = False
    ephe_round: int = 0    # dlEpheRound
    cached: int = 0
    swept: bool = False
    fin: bool = False
    fin_last: bool = False


@dataclass(frozen=True)
class Model:
    phase: int = MARK
    to_mark: int = 0
    ephe_round: int = 0
    marked_ephe: int = 0
    swept_ephe: int = 0
    marked_final: int = 0
    marked_final_last: int = 0
    revivals: int = 0
    cycled: bool = False
    doms: tuple = ()


def initial_state(num_doms: int, revivals: int) -> Model:
    return Model(to_mark=num_doms, revivals=revivals,
                 doms=tuple(Dom() for _ in range(num_doms)))


@dataclass
class Verdict:
    ok: bool
    states: int = 0
    transitions: int = 0
    violation: str | None = None
    trace: list = field(default_factory=list)
    truncated: bool = False

    def __str__(self):
        if self.ok:
            extra = " (schedule budget hit)" if self.truncated else ""
            return "ok: %d states, %d transitions%s" % (
                self.states, self.transitions, extra)
        lines = ["violation: %s" % self.violation, "schedule:"]
        lines += ["  %s" % step for step in self.trace]
        return "\n".join(lines)


def _replace_dom(s: Model, i: int, dom: Dom, **global_updates) -> Model:
    doms = s.doms[:i] + (dom,) + s.doms[i + 1:]
    kw = dict(phase=s.phase, to_mark=s.to_mark, ephe_round=s.ephe_round,
              marked_ephe=s.marked_ephe, swept_ephe=s.swept_ephe,
              marked_final=s.marked_final,
              marked_final_last=s.marked_final_last,
              revivals=s.revivals, cycled=s.cycled, doms=doms)
    kw.update(global_updates)
    return Model(**kw)


def _step(s: Model, i: int, mutation: str) -> Model:
    """Execute domain i's next atomic step."""
    d = s.doms[i]
    n = len(s.doms)
    pc = d.pc
    if pc == M1:
        work = 0
        decrement = (not d.done) if mutation != MUTATION_DECREMENT_NO_FLAG \
            else True
        if decrement:
            return _replace_dom(
                s, i, Dom(FIN, work, True, d.ephe_round, d.cached, d.swept,
                          d.fin, d.fin_last),
                to_mark=s.to_mark - 1, ephe_round=s.ephe_round + 1,
                marked_ephe=0)
        return _replace_dom(s, i, Dom(FIN, work, d.done, d.ephe_round,
                                      d.cached, d.swept, d.fin, d.fin_last))
    if pc == FIN:
        if s.phase == MARK_FINAL and not d.fin:
            return _replace_dom(
                s, i, Dom(CACHE, d.work, d.done, d.ephe_round, d.cached,
                          d.swept, True, d.fin_last),
                marked_final=s.marked_final + 1)
        if s.phase == SWEEP_EPHE and not d.fin_last:
            return _replace_dom(
                s, i, Dom(CACHE, d.work, d.done, d.ephe_round, d.cached,
                          d.swept, d.fin, True),
                marked_final_last=s.marked_final_last + 1)
        return _replace_dom(s, i, Dom(CACHE, d.work, d.done, d.ephe_round,
                                      d.cached, d.swept, d.fin, d.fin_last))
    if pc == CACHE:
        return _replace_dom(s, i, Dom(EPHE, d.work, d.done, d.ephe_round,
                                      s.ephe_round, d.swept, d.fin,
                                      d.fin_last))
    if pc == EPHE:
        if s.phase == MARK_FINAL and d.cached > d.ephe_round and d.done:
            count = d.cached == s.ephe_round \
                if mutation != MUTATION_STALE_ROUND else True
            return _replace_dom(
                s, i, Dom(ESWEEP, d.work, d.done, d.cached, d.cached,
                          d.swept, d.fin, d.fin_last),
                marked_ephe=s.marked_ephe + (1 if count else 0))
        return _replace_dom(s, i, Dom(ESWEEP, d.work, d.done, d.ephe_round,
                                      d.cached, d.swept, d.fin, d.fin_last))
    if pc == ESWEEP:
        if s.phase == SWEEP_EPHE and not d.swept:
            return _replace_dom(
                s, i, Dom(CP1, d.work, d.done, d.ephe_round, d.cached, True,
                          d.fin, d.fin_last),
                swept_ephe=s.swept_ephe + 1)
        return _replace_dom(s, i, Dom(CP1, d.work, d.done, d.ephe_round,
                                      d.cached, d.swept, d.fin, d.fin_last))
    if pc == CP1:
        target = CP1F if (s.phase == MARK and s.to_mark == 0) else CP2
        return _replace_dom(s, i, Dom(target, d.work, d.done, d.ephe_round,
                                      d.cached, d.swept, d.fin, d.fin_last))
    if pc == CP1F:
        ok = True if mutation == MUTATION_SKIP_RECHECK else \
            (s.phase == MARK and s.to_mark == 0)
        nd = Dom(CP2, d.work, d.done, d.ephe_round, d.cached, d.swept,
                 d.fin, d.fin_last)
        if ok:
            return _replace_dom(s, i, nd, phase=MARK_FINAL)
        return _replace_dom(s, i, nd)
    if pc == CP2:
        cond = (s.phase == MARK_FINAL and s.to_mark == 0
                and s.marked_ephe >= n and s.marked_final >= n)
        target = CP2F if cond else CP3
        return _replace_dom(s, i, Dom(target, d.work, d.done, d.ephe_round,
                                      d.cached, d.swept, d.fin, d.fin_last))
    if pc == CP2F:
        ok = True if mutation == MUTATION_SKIP_RECHECK else \
            (s.phase == MARK_FINAL and s.to_mark == 0
             and s.marked_ephe >= n and s.marked_final >= n)
        nd = Dom(CP3, d.work, d.done, d.ephe_round, d.cached, d.swept,
                 d.fin, d.fin_last)
        if ok:
            return _replace_dom(s, i, nd, phase=SWEEP_EPHE)
        return _replace_dom(s, i, nd)
    if pc == CP3:
        cond = (s.phase == SWEEP_EPHE and s.swept_ephe >= n
                and s.marked_final_last >= n)
        target = CP3F if cond else M1
        return _replace_dom(s, i, Dom(target, d.work, d.done, d.ephe_round,
                                      d.cached, d.swept, d.fin, d.fin_last))
    if pc == CP3F:
        ok = True if mutation == MUTATION_SKIP_RECHECK else \
            (s.phase == SWEEP_EPHE and s.swept_ephe >= n
             and s.marked_final_last >= n)
        nd = Dom(M1, d.work, d.done, d.ephe_round, d.cached, d.swept,
                 d.fin, d.fin_last)
        if ok:
            return _replace_dom(s, i, nd, cycled=True)
        return _replace_dom(s, i, nd)
    raise AssertionError("bad pc %d" % pc)


def _revive(s: Model, i: int) -> Model:
    """A get_key-style revival: fresh mark work lands on domain i.  If the
    domain had declared its marking done, the push onto the empty stack
    re-arms gNumDomsToMark."""
    d = s.doms[i]
    if d.done:
        return _replace_dom(s, i, Dom(d.pc, 1, False, d.ephe_round, d.cached,
                                      d.swept, d.fin, d.fin_last),
                            to_mark=s.to_mark + 1,
                            revivals=s.revivals - 1)
    return _replace_dom(s, i, Dom(d.pc, 1, d.done, d.ephe_round, d.cached,
                                  d.swept, d.fin, d.fin_last),
                        revivals=s.revivals - 1)


def _transitions(s: Model):
    if s.cycled:
        return
    for i in range(len(s.doms)):
        yield ("dom%d:%s" % (i, _STEP_NAMES[s.doms[i].pc]), _step, i)
    if s.revivals > 0 and s.phase != SWEEP_EPHE:
        for i in range(len(s.doms)):
            yield ("revive:dom%d" % i, _revive, i)


def _check(prev: Model, s: Model, label: str):
    if s.to_mark < 0:
        return "P1: gNumDomsToMark went negative after %s" % label
    entered_sweep = prev.phase != SWEEP_EPHE and s.phase == SWEEP_EPHE
    cycled_now = not prev.cycled and s.cycled
    if entered_sweep or cycled_now:
        what = "SWEEP_EPHE entry" if entered_sweep else "cycle"
        if s.to_mark != 0 or any(d.work for d in s.doms) \
                or not all(d.done for d in s.doms):
            return "P2: %s with marking work pending (after %s)" % (what, label)
    if entered_sweep:
        if any(d.ephe_round != s.ephe_round for d in s.doms):
            return "P3: SWEEP_EPHE entered on a stale ephemeron round (after %s)" % label
    if s.phase < prev.phase:
        return "P4: phase regressed %s -> %s (after %s)" % (
            _PHASE_NAMES[prev.phase], _PHASE_NAMES[s.phase], label)
    return None


def explore_interleavings(num_doms: int = 2, revivals: int = 1,
                          mutation: str = MUTATION_NONE,
                          max_schedules: int = 1_000_000) -> Verdict:
    """Depth-first enumeration of every schedule (modulo state
    deduplication), bounded by max_schedules explored transitions."""
    root = initial_state(num_doms, revivals)
    seen = {root: (None, None)}
    edges = {}
    stack = [root]
    transitions = 0
    truncated = False
    cycled_states = set()

    def trace_to(state):
        out = []
        while True:
            parent, label = seen[state]
            if parent is None:
                break
            out.append(label)
            state = parent
        out.reverse()
        return out

    while stack:
        s = stack.pop()
        succs = edges.setdefault(s, [])
        for label, fn, i in _transitions(s):
            if transitions >= max_schedules:
                truncated = True
                stack.clear()
                break
            transitions += 1
            ns = fn(s, i) if fn is not _step else _step(s, i, mutation)
            succs.append(ns)
            is_new = ns not in seen
            if is_new:
                seen[ns] = (s, label)
            err = _check(s, ns, label)
            if err:
                if not is_new:
                    seen[ns] = (s, label)
                return Verdict(False, len(seen), transitions, err,
                               trace_to(ns))
            if ns.cycled:
                cycled_states.add(ns)
            if is_new and not ns.cycled:
                stack.append(ns)

    # Liveness: every reachable state can still reach a completed cycle,
    # and no state is stuck with nothing enabled.
    if not truncated:
        reverse = {}
        for s, succs in edges.items():
            if not succs and not s.cycled:
                return Verdict(False, len(seen), transitions,
                               "P6: deadlock state", trace_to(s))
            for t in succs:
                reverse.setdefault(t, []).append(s)
        can_finish = set(cycled_states)
        frontier = list(cycled_states)
        while frontier:
            t = frontier.pop()
            for s in reverse.get(t, ()):
                if s not in can_finish:
                    can_finish.add(s)
                    frontier.append(s)
        for s in edges:
            if not s.cycled and s not in can_finish:
                return Verdict(False, len(seen), transitions,
                               "P6: cycle completion unreachable", trace_to(s))
    return Verdict(True, len(seen), transitions, truncated=truncated)
