"""Category-level decision graph: mining from logs, file IO and lookup."""
from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

from .core import Behavior, Item, SECONDS_PER_DAY, UserSequence


class Relation(enum.Enum):
    COMPLEMENT = "complement"
    SUBSTITUTE = "substitute"
    AUDIENCE = "audience"

    @classmethod
    def parse(cls, text: str) -> "Relation":
        return cls(text.strip().lower())


# precedence when two relations score exactly the same
RELATION_PRECEDENCE = (Relation.COMPLEMENT, Relation.SUBSTITUTE, Relation.AUDIENCE)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    relation: Relation
    weight: float

    def to_json(self) -> dict:
        return {"src": self.src, "dst": self.dst, "rel": self.relation.value, "weight": self.weight}


class CategoryGraph:
    """Directed graph with at most one weighted relation per ordered category pair."""

    def __init__(self, edges: Iterable[Edge] = ()):
        self._edges: dict[tuple[str, str], Edge] = {}
        self._out: dict[str, dict[str, Edge]] = defaultdict(dict)
        self._in: dict[str, dict[str, Edge]] = defaultdict(dict)
        for e in edges:
            self.add(e)

    def add(self, edge: Edge) -> None:
        if edge.src == edge.dst:
            raise ValueError(f"self-loop on {edge.src}")
        if not edge.weight > 0:
            raise ValueError(f"edge {edge.src}->{edge.dst}: weight must be positive")
        key = (edge.src, edge.dst)
        if key in self._edges:
            raise ValueError(f"duplicate edge {edge.src}->{edge.dst}")
        self._edges[key] = edge
        self._out[edge.src][edge.dst] = edge
        self._in[edge.dst][edge.src] = edge

    def __len__(self) -> int:
        return len(self._edges)

    def __iter__(self) -> Iterator[Edge]:
        return iter(self._edges.values())

    def __contains__(self, pair) -> bool:
        return pair in self._edges

    def edge(self, src: str, dst: str) -> Edge | None:
        return self._edges.get((src, dst))

    def out_edges(self, src: str) -> Mapping[str, Edge]:
        return self._out.get(src, {})

    def in_edges(self, dst: str) -> Mapping[str, Edge]:
        return self._in.get(dst, {})

    def to_jsonl(self) -> Iterator[str]:
        for e in self._edges.values():
            yield json.dumps(e.to_json(), sort_keys=True)

    @classmethod
    def from_jsonl(cls, lines: Iterable[str]) -> "CategoryGraph":
        edges = []
        for line in lines:
            if line.strip():
                rec = json.loads(line)
                edges.append(Edge(rec["src"], rec["dst"], Relation.parse(rec["rel"]), float(rec["weight"])))
        return cls(edges)


def query_relation(g: CategoryGraph, src: str, dst: str) -> tuple[Relation, float] | None:
    e = g.edge(src, dst)
    return None if e is None else (e.relation, e.weight)


@dataclass
class MiningParams:
    window_days: float = 7.0
    complement_threshold: float = 1.5
    substitute_threshold: float = 1.5
    audience_threshold: float = 0.2
    substitute_lambda: float = 1.0


@dataclass
class PairCounts:
    """User-level counters behind the mined scores."""

    n_users: int
    clicked: dict[str, set[str]]          # category -> users with a click
    acted: dict[str, set[str]]            # category -> users with click or purchase
    purchased: dict[str, set[str]]
    touched: dict[str, set[str]]          # any behavior
    follows: dict[tuple[str, str], set[str]]  # (a, b): users clicking a then acting on b within W


def count_pairs(sequences: Sequence[UserSequence], catalog: Mapping[str, Item], window_days: float) -> PairCounts:
    window = window_days * SECONDS_PER_DAY
    clicked, acted, purchased, touched = (defaultdict(set) for _ in range(4))
    follows: dict[tuple[str, str], set[str]] = defaultdict(set)
    for seq in sequences:
        u = seq.user_id
        events = [(catalog[x.item_id].category, x.behavior, x.ts) for x in seq]
        for cat, b, _ in events:
            touched[cat].add(u)
            if b is Behavior.CLICK:
                clicked[cat].add(u)
            if b is not Behavior.VIEW:
                acted[cat].add(u)
            if b is Behavior.PURCHASE:
                purchased[cat].add(u)
        click_times: dict[str, list[int]] = defaultdict(list)
        for cat, b, ts in events:
            if b is Behavior.CLICK:
                click_times[cat].append(ts)
        if not click_times:
            continue
        for cat_b, b, ts_b in events:
            if b is Behavior.VIEW:
                continue
            for cat_a, times in click_times.items():
                if cat_a == cat_b or u in follows.get((cat_a, cat_b), ()):
                    continue
                if any(0 < ts_b - ta <= window for ta in times):
                    follows[(cat_a, cat_b)].add(u)
    return PairCounts(len(sequences), dict(clicked), dict(acted), dict(purchased), dict(touched), dict(follows))


def _lift(joint: int, a: int, b: int, n: int) -> float:
    return 0.0 if joint == 0 or a == 0 or b == 0 else joint * n / (a * b)


def pair_scores(counts: PairCounts, params: MiningParams) -> dict[tuple[str, str], dict[Relation, float]]:
    """Per ordered category pair, the score of each relation.

    complement: lift of (click in a, then click/purchase in b within the window)
    substitute: co-click lift minus lambda * co-purchase lift
    audience:   Jaccard overlap of the two categories' user cohorts
    Only pairs sharing at least one user are returned.
    """
    n = counts.n_users
    cats = sorted(counts.touched)
    scores = {}
    for a in cats:
        ua = counts.touched[a]
        for b in cats:
            if a == b:
                continue
            ub = counts.touched[b]
            inter = len(ua & ub)
            if inter == 0:
                continue
            ca, cb = counts.clicked.get(a, set()), counts.clicked.get(b, set())
            pa, pb = counts.purchased.get(a, set()), counts.purchased.get(b, set())
            comp = _lift(len(counts.follows.get((a, b), ())), len(ca), len(counts.acted.get(b, ())), n)
            subs = _lift(len(ca & cb), len(ca), len(cb), n) - params.substitute_lambda * _lift(
                len(pa & pb), len(pa), len(pb), n
            )
            aud = inter / len(ua | ub)
            scores[(a, b)] = {Relation.COMPLEMENT: comp, Relation.SUBSTITUTE: subs, Relation.AUDIENCE: aud}
    return scores


def _select(rel_scores: Mapping[Relation, float], params: MiningParams) -> tuple[Relation, float] | None:
    thresholds = {
        Relation.COMPLEMENT: params.complement_threshold,
        Relation.SUBSTITUTE: params.substitute_threshold,
        Relation.AUDIENCE: params.audience_threshold,
    }
    best = None
    for rel in RELATION_PRECEDENCE:
        s = rel_scores[rel]
        if s >= thresholds[rel] and s > 0 and (best is None or s > best[1]):
            best = (rel, s)
    return best


def mine_graph(
    sequences: Sequence[UserSequence],
    catalog: Mapping[str, Item],
    params: MiningParams | None = None,
) -> CategoryGraph:
    """Keep, per ordered pair, the highest-scoring relation that clears its threshold."""
    params = params or MiningParams()
    if not sequences:
        return CategoryGraph()
    scores = pair_scores(count_pairs(sequences, catalog, params.window_days), params)
    edges = []
    for (a, b), rel_scores in scores.items():
        chosen = _select(rel_scores, params)
        if chosen is not None:
            edges.append(Edge(a, b, chosen[0], chosen[1]))
    return CategoryGraph(edges)
