"""Deterministic reasoner: role-conditioned popularity lookups over the catalog."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Protocol, Sequence

from ..codebook import Sid
from ..core import Item
from ..graph import CategoryGraph
from ..roles import ANY_ANCHOR, ContextualRole, Cost, FunctionalRole, InterestProfile, Popularity, Replenishment, UserRoles
from .counterfactual import (
    CounterfactualQuery,
    EmptyCandidateRoles,
    GlobalRoleTable,
    UserContext,
    build_candidate_roles,
    sample_counterfactuals,
)
from .records import history_pairs

DEFAULT_BEAM = 25

Intrinsic = tuple[Popularity, Replenishment, Cost]


@dataclass(frozen=True)
class ReasonerOutput:
    candidates: tuple[tuple[Sid, float], ...] = ()
    parse_failures: int = 0

    def __post_init__(self):
        scores = [s for _, s in self.candidates]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("candidate scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def sids(self) -> list[Sid]:
        return [s for s, _ in self.candidates]


def rank_scores(scores: Mapping[Sid, float], beam: int) -> ReasonerOutput:
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0].codes))
    return ReasonerOutput(tuple(ranked[:beam]))


class Reasoner(Protocol):
    def reason(self, query: CounterfactualQuery, beam: int = DEFAULT_BEAM) -> ReasonerOutput: ...

    def reason_factual(self, context: UserContext, beam: int = DEFAULT_BEAM) -> ReasonerOutput: ...


class OracleTable:
    """Item counts per functional role, with the anchor kept and also pooled."""

    def __init__(self):
        self.counts: dict[FunctionalRole, Counter] = {}
        self.version = 0   # bumped on every update so cached rankings can tell they are stale

    def add(self, role: FunctionalRole, item_id: str, n: int = 1) -> None:
        self.version += 1
        self.counts.setdefault(role, Counter())[item_id] += n
        if role.rel is not None and role.rel.anchor != ANY_ANCHOR:
            self.counts.setdefault(role.abstract(), Counter())[item_id] += n

    def copy(self) -> "OracleTable":
        t = OracleTable()
        t.counts = {role: c.copy() for role, c in self.counts.items()}
        return t

    def count(self, role: FunctionalRole, item_id: str) -> int:
        c = self.counts.get(role)
        return 0 if c is None else c.get(item_id, 0)

    def items(self, role: FunctionalRole) -> Counter:
        return self.counts.get(role, Counter())

    @classmethod
    def from_labels(cls, labels: Iterable[UserRoles]) -> "OracleTable":
        """Count every logged interaction under the role its item plays for that user."""
        t = cls()
        for lab in labels:
            for x, r in zip(lab.seq, lab.roles):
                t.add(r, x.item_id)
        return t

    def to_jsonl(self) -> Iterable[str]:
        for role in sorted(self.counts, key=FunctionalRole.sort_key):
            if role.rel is not None and role.rel.anchor == ANY_ANCHOR:
                continue  # pooled rows are rebuilt on load
            for item_id, n in sorted(self.counts[role].items()):
                yield json.dumps({"role": role.to_json(), "item_id": item_id, "count": n}, sort_keys=True)

    @classmethod
    def from_jsonl(cls, lines: Iterable[str]) -> "OracleTable":
        t = cls()
        for line in lines:
            if line.strip():
                rec = json.loads(line)
                t.add(FunctionalRole.from_json(rec["role"]), rec["item_id"], int(rec["count"]))
        return t


class MockReasoner:
    """Answers a role query with catalog items that play exactly that role for the user.

    Matches are ranked by how often the item was seen in that role, then by
    global popularity, then by id. Scores are add-one smoothed conditional
    frequencies over the matched set.
    """

    def __init__(
        self,
        catalog: Mapping[str, Item],
        sid_map: Mapping[str, Sid],
        graph: CategoryGraph,
        intrinsic: Mapping[str, Intrinsic],
        oracle: OracleTable,
        popularity: Mapping[str, int],
        exclude_history: bool = False,
    ):
        self.catalog = catalog
        self.sid_map = sid_map
        self.graph = graph
        self.intrinsic = intrinsic
        self.oracle = oracle
        self.popularity = popularity
        self.exclude_history = exclude_history
        self.categories = sorted({it.category for it in catalog.values()})
        self._cells: dict[tuple[str, Intrinsic], list[str]] = {}
        for item_id, it in catalog.items():
            self._cells.setdefault((it.category, intrinsic[item_id]), []).append(item_id)
        for ids in self._cells.values():
            ids.sort(key=lambda i: (-popularity.get(i, 0), i))
        self._categories_for = lru_cache(maxsize=8192)(self._index_categories)
        self._ranked = lru_cache(maxsize=65536)(self._rank_categories)

    def with_oracle(self, oracle: OracleTable) -> "MockReasoner":
        return MockReasoner(
            self.catalog, self.sid_map, self.graph, self.intrinsic, oracle, self.popularity, self.exclude_history
        )

    def _index_categories(self, profile: InterestProfile) -> dict[ContextualRole | None, tuple[str, ...]]:
        """Categories keyed by the contextual role they take under ``profile``, plus anchor-free keys."""
        # same rule as assign_contextual_role: highest score wins, earlier profile entry on ties
        ranked = sorted(range(len(profile.entries)), key=lambda k: (-profile.entries[k][1], k))
        role_of: dict[str, ContextualRole] = {}
        for k in ranked:
            src = profile.entries[k][0]
            for dst, e in self.graph.out_edges(src).items():
                role_of.setdefault(dst, ContextualRole(src, e.relation))
        index: dict[ContextualRole | None, list[str]] = {}
        for c in self.categories:
            rel = role_of.get(c)
            index.setdefault(rel, []).append(c)
            if rel is not None:
                index.setdefault(ContextualRole(ANY_ANCHOR, rel.relation), []).append(c)
        return {k: tuple(v) for k, v in index.items()}

    def matching_categories(self, profile: InterestProfile, rel: ContextualRole | None) -> tuple[str, ...]:
        return self._categories_for(profile).get(rel, ())

    def matching_items(self, profile: InterestProfile, role: FunctionalRole) -> list[str]:
        out = []
        for c in self.matching_categories(profile, role.rel):
            out.extend(self._cells.get((c, role.intrinsic), ()))
        return out

    def _rank(self, role: FunctionalRole, items: Sequence[str], beam: int) -> ReasonerOutput:
        if not items:
            return ReasonerOutput()
        counts = self.oracle.items(role)
        keyed = sorted(items, key=lambda i: (-counts.get(i, 0), -self.popularity.get(i, 0), i))
        total = sum(counts.get(i, 0) + 1 for i in items)
        best: dict[Sid, float] = {}
        for i in keyed:
            sid = self.sid_map[i]
            if sid not in best:
                best[sid] = (counts.get(i, 0) + 1) / total
                if len(best) == beam:
                    break
        return rank_scores(best, beam)

    def _rank_categories(
        self, role: FunctionalRole, categories: tuple[str, ...], beam: int, version: int
    ) -> ReasonerOutput:
        # ``version`` only takes part in the cache key
        items = [i for c in categories for i in self._cells.get((c, role.intrinsic), ())]
        return self._rank(role, items, beam)

    def reason(self, query: CounterfactualQuery, beam: int = DEFAULT_BEAM) -> ReasonerOutput:
        profile = query.context.profile
        if not self.exclude_history:
            cats = self.matching_categories(profile, query.role.rel)
            return self._ranked(query.role, cats, beam, self.oracle.version)
        seen = {s for _, s in query.context.history}
        items = [i for i in self.matching_items(profile, query.role) if self.sid_map[i] not in seen]
        return self._rank(query.role, items, beam)

    def reason_factual(self, context: UserContext, beam: int = DEFAULT_BEAM) -> ReasonerOutput:
        # no language model behind the mock, so there is no inferred role to fall back on
        return ReasonerOutput()


def merge_outputs(queries: Sequence[CounterfactualQuery], outputs: Sequence[ReasonerOutput], beam: int) -> ReasonerOutput:
    """Pool per-query candidates by summed (sampling weight x score)."""
    total: dict[Sid, float] = {}
    failures = 0
    for q, out in zip(queries, outputs, strict=True):
        failures += out.parse_failures
        for sid, score in out.candidates:
            total[sid] = total.get(sid, 0.0) + q.weight * score
    merged = rank_scores(total, beam)
    return ReasonerOutput(merged.candidates, failures)


def user_seed(seed: int, user_id: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{user_id}".encode()).digest()[:8], "little")


def build_user_context(lab: UserRoles, sid_map: Mapping[str, Sid]) -> UserContext:
    seq = lab.seq
    keys = tuple((sid_map[i], r) for i, r in lab.trajectory.entries)
    return UserContext(seq.user_id, seq.profile_text, tuple(history_pairs(seq, sid_map)), lab.profile, keys)


@dataclass
class ReasonConfig:
    beam: int = DEFAULT_BEAM
    n_queries: int = 12
    top_g: int = 10
    seed: int = 0


def reason_user(
    reasoner: Reasoner,
    lab: UserRoles,
    sid_map: Mapping[str, Sid],
    graph: CategoryGraph,
    global_table: GlobalRoleTable,
    cfg: ReasonConfig,
) -> tuple[ReasonerOutput, list[CounterfactualQuery]]:
    context = build_user_context(lab, sid_map)
    roles = build_candidate_roles(lab.trajectory, global_table, cfg.top_g, lab.profile, graph)
    try:
        queries = sample_counterfactuals(context, roles, cfg.n_queries, user_seed(cfg.seed, context.user_id), global_table)
    except EmptyCandidateRoles:
        return reasoner.reason_factual(context, cfg.beam), []
    outputs = [reasoner.reason(q, cfg.beam) for q in queries]
    return merge_outputs(queries, outputs, cfg.beam), queries


def cache_line(user_id: str, out: ReasonerOutput, generated_at: int) -> str:
    return json.dumps(
        {
            "user_id": user_id,
            "candidates": [{"sid": list(s.codes), "score": round(v, 10)} for s, v in out.candidates],
            "generated_at": generated_at,
        },
        sort_keys=True,
    )


def read_cache(lines: Iterable[str]) -> dict[str, ReasonerOutput]:
    out = {}
    for line in lines:
        if line.strip():
            rec = json.loads(line)
            out[rec["user_id"]] = ReasonerOutput(
                tuple((Sid(tuple(c["sid"])), float(c["score"])) for c in rec["candidates"])
            )
    return out
