"""Offline ranking metrics over semantic-id candidate lists."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .codebook import Sid
from .core import UserSequence

DEFAULT_KS = (1, 10, 100, 500, 2000)
LEVELS = (1, 2, 3)


@dataclass(frozen=True)
class EvalInstance:
    user_id: str
    history: tuple[Sid, ...]
    truth: Sid
    candidates: tuple[Sid, ...]

    def with_candidates(self, candidates: Iterable[Sid]) -> "EvalInstance":
        return EvalInstance(self.user_id, self.history, self.truth, tuple(candidates))


def _check(instances: Sequence[EvalInstance], k: int, level: int | None = None) -> None:
    if not instances:
        raise ValueError("no evaluation instances")
    if k < 1:
        raise ValueError("K must be >= 1")
    if level is not None and level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")


def project(candidates: Iterable[Sid], level: int) -> list[tuple[int, ...]]:
    """Level-``level`` prefixes in rank order; a repeated prefix keeps its first (best) rank."""
    seen: set[tuple[int, ...]] = set()
    out = []
    for sid in candidates:
        p = sid.prefix(level)
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def prefix_rank(inst: EvalInstance, level: int) -> int | None:
    """1-based rank of the truth prefix in the deduplicated projection, or None."""
    target = inst.truth.prefix(level)
    for r, p in enumerate(project(inst.candidates, level), start=1):
        if p == target:
            return r
    return None


def item_rank(inst: EvalInstance) -> int | None:
    try:
        return inst.candidates.index(inst.truth) + 1
    except ValueError:
        return None


def hit_item_at_k(instances: Sequence[EvalInstance], k: int) -> float:
    _check(instances, k)
    hits = 0
    for inst in instances:
        r = item_rank(inst)
        hits += r is not None and r <= k
    return hits / len(instances)


def hit_sid_at_k(instances: Sequence[EvalInstance], level: int, k: int) -> float:
    _check(instances, k, level)
    hits = 0
    for inst in instances:
        r = prefix_rank(inst, level)
        hits += r is not None and r <= k
    return hits / len(instances)


def mrr_sid_at_k(instances: Sequence[EvalInstance], level: int, k: int) -> float:
    _check(instances, k, level)
    total = 0.0
    for inst in instances:
        r = prefix_rank(inst, level)
        if r is not None and r <= k:
            total += 1.0 / r
    return total / len(instances)


def ood_split(instances: Iterable[EvalInstance]) -> tuple[list[EvalInstance], list[EvalInstance]]:
    """(in-distribution, out-of-distribution); OOD when the truth's first code never occurs in the history."""
    ind, ood = [], []
    for inst in instances:
        seen = {h[0] for h in inst.history}
        (ind if inst.truth[0] in seen else ood).append(inst)
    return ind, ood


@dataclass
class MetricReport:
    n: int
    hi: dict[int, float]
    hs: dict[tuple[int, int], float]
    ms: dict[tuple[int, int], float]
    loss: float | None = None
    ks: tuple[int, ...] = DEFAULT_KS

    def check(self) -> None:
        values = [*self.hi.values(), *self.hs.values(), *self.ms.values()]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise AssertionError("rate outside [0, 1]")
        his = [self.hi[k] for k in self.ks]
        if any(a > b for a, b in zip(his, his[1:])):
            raise AssertionError("HI@K decreases in K")
        if any(self.hs[(1, k)] < self.hs[(3, k)] for k in self.ks):
            raise AssertionError("HS_1@K below HS_3@K")

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "loss": None if self.loss is None else round(self.loss, 6),
            "HI": {f"@{k}": round(self.hi[k], 6) for k in self.ks},
            "HS": {f"{l}@{k}": round(self.hs[(l, k)], 6) for l in LEVELS for k in self.ks},
            "MS": {f"{l}@{k}": round(self.ms[(l, k)], 6) for l in LEVELS for k in self.ks},
        }

    def table(self, title: str = "") -> str:
        head = ["metric"] + [f"@{k}" for k in self.ks]
        rows = [["HI"] + [f"{self.hi[k]:.4f}" for k in self.ks]]
        for l in LEVELS:
            rows.append([f"HS_{l}"] + [f"{self.hs[(l, k)]:.4f}" for k in self.ks])
        for l in LEVELS:
            rows.append([f"MS_{l}"] + [f"{self.ms[(l, k)]:.4f}" for k in self.ks])
        widths = [max(len(r[c]) for r in [head, *rows]) for c in range(len(head))]
        fmt = lambda r: "  ".join(s.rjust(w) if c else s.ljust(w) for c, (s, w) in enumerate(zip(r, widths)))
        lines = [title] if title else []
        lines += [fmt(head), fmt(["-" * w for w in widths]), *map(fmt, rows)]
        if self.loss is not None:
            lines.append(f"loss {self.loss:.4f}   n={self.n}")
        else:
            lines.append(f"n={self.n}")
        return "\n".join(lines)


def evaluate(instances: Sequence[EvalInstance], ks: Sequence[int] = DEFAULT_KS, loss: float | None = None) -> MetricReport:
    """All metrics in one pass over per-instance ranks."""
    _check(instances, min(ks))
    ks = tuple(sorted(ks))
    n = len(instances)
    item_ranks = [item_rank(i) for i in instances]
    hi = {k: sum(r is not None and r <= k for r in item_ranks) / n for k in ks}
    hs, ms = {}, {}
    for l in LEVELS:
        ranks = [prefix_rank(i, l) for i in instances]
        for k in ks:
            hits = [r for r in ranks if r is not None and r <= k]
            hs[(l, k)] = len(hits) / n
            ms[(l, k)] = sum(1.0 / r for r in hits) / n
    return MetricReport(n, hi, hs, ms, loss, ks)


@dataclass(frozen=True)
class BucketRatio:
    bucket: int           # 0 = least popular
    n_items: int
    n_with: int
    n_without: int

    @property
    def ratio(self) -> float | None:
        if self.n_without == 0:
            return None if self.n_with == 0 else math.inf
        return self.n_with / self.n_without

    def to_json(self) -> dict:
        r = self.ratio
        return {
            "bucket": self.bucket,
            "n_items": self.n_items,
            "with": self.n_with,
            "without": self.n_without,
            "ratio": "inf" if r == math.inf else (None if r is None else round(r, 6)),
        }


def popularity_buckets(popularity: Mapping[str, int], n_buckets: int = 5) -> dict[str, int]:
    """Equal-size buckets by rank of (count, item_id); bucket 0 holds the least popular items."""
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    order = sorted(popularity, key=lambda i: (popularity[i], i))
    n = len(order)
    return {item: min(n_buckets - 1, r * n_buckets // n) for r, item in enumerate(order)}


def exposure_ratio_buckets(
    exposed_with: Iterable[str],
    exposed_without: Iterable[str],
    popularity: Mapping[str, int],
    n_buckets: int = 5,
) -> list[BucketRatio]:
    """Distinct exposed items per popularity bucket, guided over unguided."""
    bucket = popularity_buckets(popularity, n_buckets)
    with_set, without_set = set(exposed_with), set(exposed_without)
    unknown = (with_set | without_set) - bucket.keys()
    if unknown:
        raise KeyError(f"exposed items without popularity: {sorted(unknown)[:5]}")
    sizes = Counter(bucket.values())
    cw = Counter(bucket[i] for i in with_set)
    co = Counter(bucket[i] for i in without_set)
    return [BucketRatio(b, sizes[b], cw[b], co[b]) for b in range(n_buckets)]


def interaction_counts(sequences: Iterable[UserSequence]) -> Counter:
    return Counter(x.item_id for seq in sequences for x in seq)


def popularity_baseline(sequences: Sequence[UserSequence], k: int) -> list[str]:
    """Top-``k`` items by interaction count, ties broken by item id."""
    counts = interaction_counts(sequences)
    if not counts:
        raise ValueError("no training interactions")
    return sorted(counts, key=lambda i: (-counts[i], i))[:k]


def dump_report(report: Mapping) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
