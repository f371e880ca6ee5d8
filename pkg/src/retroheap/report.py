"""GC statistics reporting: per-domain counters, pause percentiles, and
CSV/JSON emission.

The CSV schema is fixed:

    workload,variant,domains,seed,minor_gcs,major_gcs,major_alloc_words,
    max_heap_words,pause_max_ns,pause_p999_ns,read_faults,promoted_words

Pause samples cover every stop-the-world episode, measured from the
moment the initiating domain broadcast the request until the barrier
released; the 99.9th percentile is computed over the full sample set
(no reservoir below a million samples).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

CSV_HEADER = ("workload,variant,domains,seed,minor_gcs,major_gcs,"
              "major_alloc_words,max_heap_words,pause_max_ns,pause_p999_ns,"
              "read_faults,promoted_words")


def percentile_999(samples) -> int:
    """Value at the 99.9th percentile: element ceil(0.999*N)-1 of the
    sorted samples; 0 for an empty set."""
    if not samples:
        return 0
    ordered = sorted(samples)
    idx = math.ceil(0.999 * len(ordered)) - 1
    return ordered[idx]


@dataclass
class DomainStats:
    domain_id: int
    minor_gcs: int
    major_cycles_seen: int
    promoted_words: int
    major_alloc_words: int
    read_faults: int
    closure_promotions: int
    full_minor_promotions: int
    pause_samples: list
    mark_stack_peak: int
    max_ops_between_polls: int
    finaliser_errors: list


@dataclass
class GcReport:
    workload: str
    variant: str
    domains: int
    seed: int
    minor_gcs: int
    major_gcs: int
    major_alloc_words: int
    max_heap_words: int
    read_faults: int
    promoted_words: int
    pause_samples: list = field(default_factory=list)
    per_domain: list = field(default_factory=list)
    slices_run: int = 0
    words_marked: int = 0
    words_swept: int = 0
    max_slice_ns: int = 0
    barrier_episodes: int = 0

    @property
    def pause_max_ns(self) -> int:
        return max(self.pause_samples) if self.pause_samples else 0

    @property
    def pause_p999_ns(self) -> int:
        return percentile_999(self.pause_samples)

    def csv_row(self) -> str:
        return ",".join(str(v) for v in (
            self.workload, self.variant, self.domains, self.seed,
            self.minor_gcs, self.major_gcs, self.major_alloc_words,
            self.max_heap_words, self.pause_max_ns, self.pause_p999_ns,
            self.read_faults, self.promoted_words))

    def to_json(self) -> str:
        doc = {
            "workload": self.workload,
            "variant": self.variant,
            "domains": self.domains,
            "seed": self.seed,
            "minor_gcs": self.minor_gcs,
            "major_gcs": self.major_gcs,
            "major_alloc_words": self.major_alloc_words,
            "max_heap_words": self.max_heap_words,
            "pause_max_ns": self.pause_max_ns,
            "pause_p999_ns": self.pause_p999_ns,
            "read_faults": self.read_faults,
            "promoted_words": self.promoted_words,
            "slices_run": self.slices_run,
            "words_marked": self.words_marked,
            "words_swept": self.words_swept,
            "max_slice_ns": self.max_slice_ns,
            "barrier_episodes": self.barrier_episodes,
            "per_domain": [
                {
                    "domain": ds.domain_id,
                    "minor_gcs": ds.minor_gcs,
                    "major_cycles_seen": ds.major_cycles_seen,
                    "promoted_words": ds.promoted_words,
                    "major_alloc_words": ds.major_alloc_words,
                    "read_faults": ds.read_faults,
                    "pause_max_ns": max(ds.pause_samples) if ds.pause_samples else 0,
                    "finaliser_errors": len(ds.finaliser_errors),
                }
                for ds in self.per_domain
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def build_report(rt, workload: str, seed: int) -> GcReport:
    doms = rt.domains_history
    per_domain = [
        DomainStats(
            domain_id=d.id,
            minor_gcs=d.minor_gcs,
            major_cycles_seen=d.major_cycles_seen,
            promoted_words=d.promoted_words,
            major_alloc_words=d.major_alloc_words,
            read_faults=d.read_faults,
            closure_promotions=d.closure_promotions,
            full_minor_promotions=d.full_minor_promotions,
            pause_samples=list(d.pause_samples),
            mark_stack_peak=d.mark_stack_peak,
            max_ops_between_polls=d.max_ops_between_polls,
            finaliser_errors=list(d.finaliser_errors),
        )
        for d in doms
    ]
    pauses = []
    for ds in per_domain:
        pauses.extend(ds.pause_samples)
    # Under the stop-the-world collector an episode collects every arena
    # at once, so collections are counted per episode, not per domain.
    if rt.variant == "stw":
        minor_gcs = rt.minor_epoch
    else:
        minor_gcs = sum(ds.minor_gcs for ds in per_domain)
    return GcReport(
        workload=workload,
        variant=rt.variant,
        domains=len(doms),
        seed=seed,
        minor_gcs=minor_gcs,
        major_gcs=rt.gc.cycle_no,
        major_alloc_words=sum(ds.major_alloc_words for ds in per_domain),
        max_heap_words=rt.max_heap_words,
        read_faults=sum(ds.read_faults for ds in per_domain),
        promoted_words=sum(ds.promoted_words for ds in per_domain),
        pause_samples=pauses,
        per_domain=per_domain,
        slices_run=rt.gc.slices_run,
        words_marked=rt.gc.words_marked,
        words_swept=rt.gc.words_swept,
        max_slice_ns=rt.gc.max_slice_ns,
        barrier_episodes=rt.gc.barrier_episodes,
    )


def emit_stats(report: GcReport, fmt: str, path, hist_path=None) -> None:
    """Write the report as CSV or JSON; optionally a gnuplot-compatible
    pause histogram ("<bucket_ns> <count>" lines)."""
    if fmt == "csv":
        text = CSV_HEADER + "\n" + report.csv_row() + "\n"
    elif fmt == "json":
        text = report.to_json() + "\n"
    else:
        raise ValueError("unknown format %r" % fmt)
    with open(path, "w") as f:
        f.write(text)
    if hist_path is not None:
        buckets = {}
        for s in report.pause_samples:
            b = 1 << max(s.bit_length() - 1, 0)
            buckets[b] = buckets.get(b, 0) + 1
        with open(hist_path, "w") as f:
            f.write("# pause_ns count\n")
            for b in sorted(buckets):
                f.write("%d %d\n" % (b, buckets[b]))
