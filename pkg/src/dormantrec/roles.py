"""Interest profiles, functional roles, key items and role trajectories."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Behavior, Item, UserSequence
from .graph import CategoryGraph, Relation


class Popularity(enum.Enum):
    BOOMING = "booming"
    EVERGREEN = "evergreen"
    LONG_TAIL = "longtail"


class Replenishment(enum.Enum):
    FMCG = "fmcg"
    DURABLE = "durable"


class Cost(enum.Enum):
    TRIAL = "trial"
    CORE = "core"
    PREMIUM = "premium"


@dataclass(frozen=True)
class ContextualRole:
    anchor: str
    relation: Relation

    def to_json(self) -> dict:
        return {"anchor": self.anchor, "relation": self.relation.value}


ANY_ANCHOR = "*"


@dataclass(frozen=True)
class FunctionalRole:
    pop: Popularity
    repl: Replenishment
    cost: Cost
    rel: ContextualRole | None = None

    @property
    def intrinsic(self) -> tuple[Popularity, Replenishment, Cost]:
        return (self.pop, self.repl, self.cost)

    def with_rel(self, rel: ContextualRole | None) -> "FunctionalRole":
        return FunctionalRole(self.pop, self.repl, self.cost, rel)

    def abstract(self) -> "FunctionalRole":
        """Same role with the anchor category wildcarded, so it transfers across users."""
        if self.rel is None:
            return self
        return self.with_rel(ContextualRole(ANY_ANCHOR, self.rel.relation))

    def sort_key(self) -> tuple:
        rel = ("", "") if self.rel is None else (self.rel.anchor, self.rel.relation.value)
        return (self.pop.value, self.repl.value, self.cost.value) + rel

    def to_text(self) -> str:
        rel = "none" if self.rel is None else f"{self.rel.relation.value} of {self.rel.anchor}"
        return f"pop={self.pop.value}, repl={self.repl.value}, cost={self.cost.value}, rel={rel}"

    @classmethod
    def parse(cls, text: str) -> "FunctionalRole":
        parts = dict(p.strip().split("=", 1) for p in text.split(", ", 3))
        rel_text = parts["rel"].strip()
        rel = None
        if rel_text != "none":
            relation, _, anchor = rel_text.partition(" of ")
            rel = ContextualRole(anchor, Relation.parse(relation))
        return cls(Popularity(parts["pop"]), Replenishment(parts["repl"]), Cost(parts["cost"]), rel)

    def to_json(self) -> dict:
        return {
            "pop": self.pop.value,
            "repl": self.repl.value,
            "cost": self.cost.value,
            "rel": None if self.rel is None else self.rel.to_json(),
        }

    @classmethod
    def from_json(cls, rec: Mapping) -> "FunctionalRole":
        rel = rec.get("rel")
        return cls(
            Popularity(rec["pop"]),
            Replenishment(rec["repl"]),
            Cost(rec["cost"]),
            None if rel is None else ContextualRole(rel["anchor"], Relation.parse(rel["relation"])),
        )


DEFAULT_WEIGHTS = {Behavior.VIEW: 1.0, Behavior.CLICK: 2.0, Behavior.PURCHASE: 4.0}


@dataclass(frozen=True)
class InterestProfile:
    entries: tuple[tuple[str, float], ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def categories(self) -> list[str]:
        return [c for c, _ in self.entries]

    def score(self, category: str) -> float:
        for c, s in self.entries:
            if c == category:
                return s
        return 0.0

    def rank(self, category: str) -> int:
        return self.categories.index(category)

    def to_text(self) -> str:
        # repr keeps scores exact so the text parses back to an equal profile
        return "; ".join(f"{c} ({s!r})" for c, s in self.entries) or "none"

    @classmethod
    def parse(cls, text: str) -> "InterestProfile":
        text = text.strip()
        if text == "none":
            return cls()
        entries = []
        for part in text.split("; "):
            cat, _, score = part.rpartition(" (")
            entries.append((cat, float(score.rstrip(")"))))
        return cls(tuple(entries))


def compute_interest_profile(
    seq: UserSequence,
    catalog: Mapping[str, Item],
    weights: Mapping[Behavior, float] = DEFAULT_WEIGHTS,
) -> InterestProfile:
    """Behavior-weighted category scores, best first.

    Scores are accumulated exactly (per-behavior counts times weight) so that
    rescaling the weights never flips a tie. Ties go to the category touched
    first, then lexicographic order.
    """
    if any(w < 0 for w in weights.values()):
        raise ValueError("behavior weights must be non-negative")
    counts: dict[str, list[int]] = {}
    first_ts: dict[str, int] = {}
    for x in seq:
        cat = catalog[x.item_id].category
        counts.setdefault(cat, [0, 0, 0])[int(x.behavior)] += 1
        first_ts.setdefault(cat, x.ts)
    scaled, denom = _integer_weights(weights)
    exact = {c: sum(n * w for n, w in zip(cs, scaled)) for c, cs in counts.items()}
    order = sorted(exact, key=lambda c: (-exact[c], first_ts[c], c))
    return InterestProfile(tuple((c, exact[c] / denom) for c in order))


def _integer_weights(weights: Mapping[Behavior, float]) -> tuple[tuple[int, ...], int]:
    """Behavior weights as integers over one common denominator (floats are dyadic, so this is exact)."""
    fracs = [Fraction(weights.get(b, 0.0)) for b in Behavior]
    denom = math.lcm(*(f.denominator for f in fracs))
    return tuple(int(f * denom) for f in fracs), denom


@dataclass(frozen=True)
class RoleThresholds:
    booming: float = 0.90
    evergreen: float = 0.40
    trial: float = 0.25
    core: float = 0.80


@dataclass
class CategoryStats:
    total_sales: dict[str, int]
    sales_cut: dict[str, tuple[float, float]]   # (evergreen, booming) sales quantiles
    price_cut: dict[str, tuple[float, float]]   # (trial, core) price quantiles
    median_total: float
    thresholds: RoleThresholds = field(default_factory=RoleThresholds)

    @classmethod
    def build(cls, catalog: Mapping[str, Item], thresholds: RoleThresholds | None = None) -> "CategoryStats":
        thresholds = thresholds or RoleThresholds()
        sales: dict[str, list[int]] = {}
        prices: dict[str, list[int]] = {}
        for it in catalog.values():
            sales.setdefault(it.category, []).append(it.sales_30d)
            prices.setdefault(it.category, []).append(it.price)
        totals = {c: int(sum(v)) for c, v in sales.items()}
        sales_cut = {
            c: tuple(float(q) for q in np.quantile(v, [thresholds.evergreen, thresholds.booming]))
            for c, v in sales.items()
        }
        price_cut = {
            c: tuple(float(q) for q in np.quantile(v, [thresholds.trial, thresholds.core])) for c, v in prices.items()
        }
        median = float(np.median(list(totals.values()))) if totals else 0.0
        return cls(totals, sales_cut, price_cut, median, thresholds)


def assign_intrinsic_roles(item: Item, stats: CategoryStats) -> tuple[Popularity, Replenishment, Cost]:
    cat = item.category
    if cat not in stats.total_sales:
        raise KeyError(f"unknown category {cat!r}")
    evergreen_cut, booming_cut = stats.sales_cut[cat]
    if item.sales_30d >= booming_cut:
        pop = Popularity.BOOMING
    elif item.sales_30d >= evergreen_cut:
        pop = Popularity.EVERGREEN
    else:
        pop = Popularity.LONG_TAIL
    repl = Replenishment.FMCG if stats.total_sales[cat] >= stats.median_total else Replenishment.DURABLE
    trial_cut, core_cut = stats.price_cut[cat]
    if item.price < trial_cut:
        cost = Cost.TRIAL
    elif item.price <= core_cut:
        cost = Cost.CORE
    else:
        cost = Cost.PREMIUM
    return pop, repl, cost


def assign_contextual_role(category: str, profile: InterestProfile, g: CategoryGraph) -> ContextualRole | None:
    """Anchor = best-scoring profiled category with an edge into ``category``.

    Only categories carrying an edge compete; among equal scores the one
    ranked higher in the profile wins.
    """
    incoming = g.in_edges(category)
    if not incoming:
        return None
    best = None
    for c, s in profile.entries:
        e = incoming.get(c)
        if e is None:
            continue
        if best is None or s > best[1]:
            best = (e, s)
    return None if best is None else ContextualRole(best[0].src, best[0].relation)


def item_role(
    item: Item, profile: InterestProfile, g: CategoryGraph, stats: CategoryStats
) -> FunctionalRole:
    pop, repl, cost = assign_intrinsic_roles(item, stats)
    return FunctionalRole(pop, repl, cost, assign_contextual_role(item.category, profile, g))


def extract_key_items(
    seq: UserSequence, roles: Sequence[FunctionalRole], max_key_items: int = 16
) -> list[int]:
    """Positions (into ``seq``) of interactions whose item has a contextual role.

    When more than ``max_key_items`` qualify the most recent ones are kept.
    """
    if len(roles) != len(seq):
        raise ValueError("need one role per interaction")
    keep = [k for k, r in enumerate(roles) if r.rel is not None]
    return keep[-max_key_items:] if max_key_items > 0 else []


@dataclass(frozen=True)
class RoleTrajectory:
    entries: tuple[tuple[str, FunctionalRole], ...] = ()

    def __post_init__(self):
        if any(r.rel is None for _, r in self.entries):
            raise ValueError("trajectory entries must carry a contextual role")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def roles(self) -> list[FunctionalRole]:
        return [r for _, r in self.entries]

    @property
    def item_ids(self) -> list[str]:
        return [i for i, _ in self.entries]


def build_role_trajectory(key_items: Iterable[str], roles: Iterable[FunctionalRole]) -> RoleTrajectory:
    pairs = list(zip(key_items, roles, strict=True))
    for item_id, r in pairs:
        if r.rel is None:
            raise ValueError(f"key item {item_id} has no contextual role")
    return RoleTrajectory(tuple(pairs))


@dataclass
class UserRoles:
    """Everything role-related derived from one user's sequence."""

    seq: UserSequence
    profile: InterestProfile
    roles: list[FunctionalRole]
    key_positions: list[int]
    trajectory: RoleTrajectory


def label_user(
    seq: UserSequence,
    catalog: Mapping[str, Item],
    stats: CategoryStats,
    g: CategoryGraph,
    weights: Mapping[Behavior, float] = DEFAULT_WEIGHTS,
    max_key_items: int = 16,
    intrinsic: Mapping[str, tuple[Popularity, Replenishment, Cost]] | None = None,
) -> UserRoles:
    profile = compute_interest_profile(seq, catalog, weights)
    ctx_cache: dict[str, ContextualRole | None] = {}
    roles = []
    for x in seq:
        item = catalog[x.item_id]
        if item.category not in ctx_cache:
            ctx_cache[item.category] = assign_contextual_role(item.category, profile, g)
        base = intrinsic[x.item_id] if intrinsic is not None else assign_intrinsic_roles(item, stats)
        roles.append(FunctionalRole(*base, ctx_cache[item.category]))
    keys = extract_key_items(seq, roles, max_key_items)
    traj = build_role_trajectory([seq.interactions[k].item_id for k in keys], [roles[k] for k in keys])
    return UserRoles(seq, profile, roles, keys, traj)


def role_dump_lines(labels: Iterable[UserRoles]) -> Iterable[str]:
    for lab in labels:
        for x, r in zip(lab.seq, lab.roles):
            rec = {"user_id": lab.seq.user_id, "item_id": x.item_id, **r.to_json()}
            yield json.dumps(rec, sort_keys=True)
