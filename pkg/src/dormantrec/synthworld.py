"""Synthetic e-commerce world with planted roles and role-driven user journeys.

Categories carry a replenishment type, items carry planted popularity and
decision-cost classes, and users walk a Markov chain over (replenishment,
cost) role classes. Every step picks a category related to the user's home
category through the relation graph and then an item of the right cost class,
weighted by sales. The last few steps of each walk are withheld from the log
and kept in :class:`WorldTruth` as future next items.

Some steps follow a lapse longer than the dormancy window. Such a
reactivation step keeps the walk's role class but is always a purchase,
moves from the user's most visited category along its relations (mostly
complements), and favours low-popularity items.
A dormant user's first withheld step is always a reactivation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import Behavior, Catalog, DormancyConfig, Interaction, Item, SECONDS_PER_DAY, UserSequence
from .graph import CategoryGraph, Edge, Relation
from .roles import Cost, FunctionalRole, Popularity, Replenishment

ROLE_CLASSES: tuple[tuple[Replenishment, Cost], ...] = tuple(
    (r, c) for r in (Replenishment.FMCG, Replenishment.DURABLE) for c in (Cost.TRIAL, Cost.CORE, Cost.PREMIUM)
)

# necessity -> scenario complement -> high-value extension, with some churn
DEFAULT_TRANSITIONS = (
    (0.30, 0.20, 0.05, 0.05, 0.30, 0.10),
    (0.20, 0.25, 0.15, 0.05, 0.20, 0.15),
    (0.25, 0.20, 0.15, 0.05, 0.10, 0.25),
    (0.15, 0.10, 0.05, 0.15, 0.25, 0.30),
    (0.15, 0.10, 0.05, 0.05, 0.25, 0.40),
    (0.35, 0.15, 0.05, 0.10, 0.15, 0.20),
)


def class_name(k: int) -> str:
    repl, cost = ROLE_CLASSES[k]
    return f"{repl.value}/{cost.value}"


def class_index(repl: Replenishment, cost: Cost) -> int:
    return ROLE_CLASSES.index((repl, cost))


@dataclass
class WorldConfig:
    n_categories: int = 50
    items_per_category: int = 40
    embedding_dim: int = 16
    category_spread: float = 1.5
    item_spread: float = 1.0
    # explicit (src, dst, relation) edges; generated from the out-degree knobs when None
    edges: list[tuple[str, str, str]] | None = None
    complement_out: int = 2
    substitute_out: int = 1
    audience_out: int = 1
    transitions: Sequence[Sequence[float]] = DEFAULT_TRANSITIONS
    terminal_classes: tuple[int, ...] = (2, 5)
    # step category choice: weight of staying in the anchor vs following each relation
    stay_weight: float = 2.0
    relation_weights: dict[str, float] = field(
        default_factory=lambda: {"complement": 1.0, "substitute": 0.6, "audience": 0.4}
    )
    wander_prob: float = 0.25
    popularity_exponent: float = 1.0
    sales_zipf: float = 1.0
    behavior_probs: tuple[float, float, float] = (0.70, 0.25, 0.05)
    terminal_purchase_boost: float = 4.0
    # reactivation after a lapse longer than the dormancy window
    lapse_prob: float = 0.08
    lapse_extra_days: tuple[float, float] = (2.0, 60.0)
    reactivation_stay_weight: float = 0.0
    reactivation_relation_weights: dict[str, float] = field(
        default_factory=lambda: {"complement": 2.0, "substitute": 0.3, "audience": 0.3}
    )
    # booming, evergreen, long-tail preference inside the chosen (category, cost) cell
    reactivation_popularity: tuple[float, float, float] = (0.1, 0.3, 0.6)
    n_users: int = 5000
    dormant_fraction: float = 0.5
    active_len: tuple[int, int] = (15, 40)
    dormant_len: tuple[int, int] = (3, 10)
    future_steps: int = 4
    mean_gap_days: float = 2.0
    now_ts: int = 1_700_000_000
    delta_t_days: int = 30
    seed: int = 0

    def __post_init__(self):
        t = np.asarray(self.transitions, dtype=np.float64)
        if t.shape != (len(ROLE_CLASSES), len(ROLE_CLASSES)):
            raise ValueError(f"transition matrix must be {len(ROLE_CLASSES)}x{len(ROLE_CLASSES)}")
        if (t < 0).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must be non-negative and sum to 1")
        object.__setattr__(self, "transitions", tuple(tuple(row) for row in t.tolist()))
        if not 0.0 <= self.lapse_prob <= 1.0:
            raise ValueError("lapse_prob must lie in [0, 1]")
        if min(self.reactivation_popularity) < 0 or sum(self.reactivation_popularity) <= 0:
            raise ValueError("reactivation_popularity needs non-negative weights with a positive sum")
        if self.n_categories < 2 or self.items_per_category < 1:
            raise ValueError("need at least two categories and one item per category")

    @property
    def category_names(self) -> list[str]:
        return [f"cat{c:02d}" for c in range(self.n_categories)]

    def dormancy(self) -> DormancyConfig:
        return DormancyConfig(now_ts=self.now_ts, delta_t_days=self.delta_t_days)


@dataclass
class UserTruth:
    user_id: str
    home: str
    dormant: bool
    classes: list[int]            # class of every logged step
    next_items: list[str]
    next_classes: list[int]
    next_behaviors: list[Behavior]
    next_ts: list[int]
    reactivations: list[int] = field(default_factory=list)   # step indices (logged and withheld) after a lapse


@dataclass
class WorldTruth:
    users: dict[str, UserTruth]
    item_roles: dict[str, tuple[Popularity, Replenishment, Cost]]
    category_repl: dict[str, Replenishment]

    def to_jsonl(self) -> Iterable[str]:
        for cat, r in self.category_repl.items():
            yield json.dumps({"kind": "category", "category": cat, "repl": r.value})
        for it, (p, r, c) in self.item_roles.items():
            yield json.dumps({"kind": "item", "item_id": it, "pop": p.value, "repl": r.value, "cost": c.value})
        for u in self.users.values():
            yield json.dumps({
                "kind": "user", "user_id": u.user_id, "home": u.home, "dormant": u.dormant,
                "classes": u.classes, "next_items": u.next_items, "next_classes": u.next_classes,
                "next_behaviors": [b.label for b in u.next_behaviors], "next_ts": u.next_ts,
                "reactivations": u.reactivations,
            })

    @classmethod
    def from_jsonl(cls, lines: Iterable[str]) -> "WorldTruth":
        users, roles, repl = {}, {}, {}
        for line in lines:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["kind"] == "category":
                repl[rec["category"]] = Replenishment(rec["repl"])
            elif rec["kind"] == "item":
                roles[rec["item_id"]] = (Popularity(rec["pop"]), Replenishment(rec["repl"]), Cost(rec["cost"]))
            else:
                users[rec["user_id"]] = UserTruth(
                    rec["user_id"], rec["home"], rec["dormant"], rec["classes"], rec["next_items"],
                    rec["next_classes"], [Behavior.parse(b) for b in rec["next_behaviors"]], rec["next_ts"],
                    rec.get("reactivations", []),
                )
        return cls(users, roles, repl)


@dataclass
class World:
    config: WorldConfig
    catalog: Catalog
    sequences: list[UserSequence]
    graph: CategoryGraph
    truth: WorldTruth

    def interaction_lines(self) -> Iterable[str]:
        from .core import sequences_to_jsonl

        return sequences_to_jsonl(self.sequences)


def world_role_oracle(truth: WorldTruth, item_id: str) -> FunctionalRole:
    """Planted intrinsic role of an item; the contextual part is user-dependent and left empty."""
    if item_id not in truth.item_roles:
        raise KeyError(f"unknown item {item_id!r}")
    return FunctionalRole(*truth.item_roles[item_id])


def _planted_counts(n: int, top_frac: float, bottom_frac: float) -> tuple[int, int]:
    return int(round(top_frac * n)), int(round(bottom_frac * n))


def _build_graph(cfg: WorldConfig, cats: list[str], repl: dict[str, Replenishment], rng) -> CategoryGraph:
    if cfg.edges is not None:
        known = set(cats)
        edges = []
        for src, dst, rel in cfg.edges:
            if src not in known or dst not in known:
                raise ValueError(f"edge {src}->{dst} references an undeclared category")
            edges.append(Edge(src, dst, Relation.parse(rel), 1.0))
        return CategoryGraph(edges)
    edges = []
    for a in cats:
        taken = {a}
        others = [c for c in cats if c not in taken]
        opposite = [c for c in others if repl[c] != repl[a]]
        same = [c for c in others if repl[c] == repl[a]]

        def pick(pool, k):
            pool = [c for c in pool if c not in taken]
            chosen = list(rng.choice(pool, size=min(k, len(pool)), replace=False)) if pool and k else []
            taken.update(chosen)
            return chosen

        # complements lean towards the opposite replenishment type (necessity <-> durable)
        n_same = cfg.complement_out // 2
        comp = pick(opposite, cfg.complement_out - n_same) + pick(same, n_same)
        for d in comp:
            edges.append(Edge(a, str(d), Relation.COMPLEMENT, 1.0))
        for d in pick(same, cfg.substitute_out):
            edges.append(Edge(a, str(d), Relation.SUBSTITUTE, 1.0))
        for d in pick(others, cfg.audience_out):
            edges.append(Edge(a, str(d), Relation.AUDIENCE, 1.0))
    return CategoryGraph(edges)


def _build_catalog(cfg: WorldConfig, rng) -> tuple[Catalog, dict, dict[str, Replenishment]]:
    cats = cfg.category_names
    n = cfg.items_per_category
    n_fmcg = cfg.n_categories // 2
    perm = rng.permutation(cfg.n_categories)
    repl = {cats[c]: (Replenishment.FMCG if k < n_fmcg else Replenishment.DURABLE) for k, c in enumerate(perm)}
    n_boom, n_long = _planted_counts(n, 0.10, 0.40)
    n_prem, n_trial = _planted_counts(n, 0.20, 0.25)
    for name, count in (("booming", n_boom), ("premium", n_prem), ("trial", n_trial)):
        if count == 0:
            raise ValueError(f"infeasible config: role class {name} has no eligible items per category")
    centers = rng.normal(0.0, cfg.category_spread, size=(cfg.n_categories, cfg.embedding_dim))
    items, roles = [], {}
    for c, cat in enumerate(cats):
        fmcg = repl[cat] is Replenishment.FMCG
        scale = rng.uniform(800, 1200) * (6.0 if fmcg else 1.0)
        # sales rank r (0 = best seller) -> strictly decreasing zipf-like volume
        sales = [int(scale / (r + 1) ** cfg.sales_zipf) + (n - r) for r in range(n)]
        base_price = rng.uniform(300, 3000) if fmcg else rng.uniform(8000, 60000)
        price_levels = [max(1, int(base_price * math.exp(-1.0 + 2.0 * k / max(1, n - 1)))) + k for k in range(n)]
        price_rank = rng.permutation(n)  # price_rank[r] = price position of the r-th best seller
        dept, group = f"Dept{c % 5}", f"Group{c % 10}"
        emb = centers[c] + rng.normal(0.0, cfg.item_spread, size=(n, cfg.embedding_dim))
        for r in range(n):
            pop = Popularity.BOOMING if r < n_boom else (Popularity.LONG_TAIL if r >= n - n_long else Popularity.EVERGREEN)
            pk = int(price_rank[r])
            cost = Cost.TRIAL if pk < n_trial else (Cost.PREMIUM if pk >= n - n_prem else Cost.CORE)
            item_id = f"{cat}_i{r:03d}"
            items.append(Item(
                item_id=item_id,
                title=f"{cat} product {r:03d} {pop.value} {cost.value}",
                price=price_levels[pk],
                category_path=(dept, group, cat),
                sales_30d=sales[r],
                orders_total=max(0, sales[r] // 20),
                embedding=emb[r],
            ))
            roles[item_id] = (pop, repl[cat], cost)
    return Catalog(items), roles, repl


def _draw(rng: np.random.Generator, cum: np.ndarray) -> int:
    """Index sampled from unnormalised cumulative weights."""
    return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(cum) - 1)


def generate_world(cfg: WorldConfig) -> World:
    root = np.random.SeedSequence(cfg.seed)
    cat_seed, graph_seed, user_seed = root.spawn(3)
    catalog, item_roles, repl = _build_catalog(cfg, np.random.default_rng(cat_seed))
    cats = cfg.category_names
    graph = _build_graph(cfg, cats, repl, np.random.default_rng(graph_seed))

    # (category, cost) -> candidate items with cumulative sampling weights
    tmp: dict[tuple[str, Cost], list[tuple[str, float]]] = {}
    for it in catalog.values():
        tmp.setdefault((it.category, item_roles[it.item_id][2]), []).append(
            (it.item_id, float(it.sales_30d) ** cfg.popularity_exponent)
        )
    cells = {key: ([i for i, _ in pairs], np.cumsum([w for _, w in pairs])) for key, pairs in tmp.items()}
    for k, (r, c) in enumerate(ROLE_CLASSES):
        if not any(repl[cat] is r and (cat, c) in cells for cat in cats):
            raise ValueError(f"infeasible config: role class {class_name(k)} has no eligible items")
    by_repl = {r: [c for c in cats if repl[c] is r] for r in Replenishment}
    trans_cum = np.cumsum(np.asarray(cfg.transitions, dtype=np.float64), axis=1)
    base_b = np.asarray(cfg.behavior_probs, dtype=np.float64)
    boosted_b = base_b.copy()
    boosted_b[2] *= cfg.terminal_purchase_boost
    b_cum = {False: np.cumsum(base_b), True: np.cumsum(boosted_b)}

    # direct options per (source, wanted replenishment); routine steps and reactivations weigh relations differently
    def options(stay: float, weights: dict[str, float]):
        rw = {Relation.parse(k): v for k, v in weights.items()}
        out: dict[tuple[str, Replenishment], tuple[list[str], np.ndarray]] = {}
        for src in cats:
            for want in Replenishment:
                opts, ws = [], []
                if repl[src] is want and stay > 0:
                    opts.append(src)
                    ws.append(stay)
                for dst, e in graph.out_edges(src).items():
                    if repl[dst] is want and rw.get(e.relation, 0.0) > 0:
                        opts.append(dst)
                        ws.append(rw[e.relation])
                if opts:
                    out[(src, want)] = (opts, np.cumsum(ws))
        return out

    direct = options(cfg.stay_weight, cfg.relation_weights)
    react_direct = options(cfg.reactivation_stay_weight, cfg.reactivation_relation_weights)

    def step_category(rng, table, source: str, visited: list[str], want: Replenishment) -> str:
        hit = table.get((source, want))
        if hit is not None:
            return hit[0][_draw(rng, hit[1])]
        # two-hop fallback through anything visited, then a blind jump
        opts = sorted({d for v in visited for d in graph.out_edges(v) if repl[d] is want})
        pool = opts or by_repl[want]
        return pool[int(rng.integers(len(pool)))]

    # (category, cost) -> items with reactivation weights: popularity-class preference shared uniformly within the class
    pop_order = (Popularity.BOOMING, Popularity.EVERGREEN, Popularity.LONG_TAIL)
    react_cells: dict[tuple[str, Cost], tuple[list[str], np.ndarray]] = {}
    for key, (ids, _) in cells.items():
        by_pop = {p: [i for i in ids if item_roles[i][0] is p] for p in pop_order}
        ws = [
            cfg.reactivation_popularity[pop_order.index(item_roles[i][0])] / len(by_pop[item_roles[i][0]])
            for i in ids
        ]
        if sum(ws) <= 0:
            ws = [1.0] * len(ids)
        react_cells[key] = (ids, np.cumsum(ws))

    sequences, users = [], {}
    user_seeds = user_seed.spawn(cfg.n_users)
    window_start = cfg.now_ts - cfg.delta_t_days * SECONDS_PER_DAY
    n_classes = len(ROLE_CLASSES)
    terminal = set(cfg.terminal_classes)
    lo_lapse, hi_lapse = cfg.lapse_extra_days
    for u in range(cfg.n_users):
        rng = np.random.default_rng(user_seeds[u])
        user_id = f"u{u:05d}"
        dormant = bool(rng.random() < cfg.dormant_fraction)
        lo, hi = cfg.dormant_len if dormant else cfg.active_len
        n_hist = int(rng.integers(lo, hi + 1))
        total = n_hist + cfg.future_steps
        home = cats[int(rng.integers(len(cats)))]
        # the walk starts in the home category's own replenishment type
        k = class_index(repl[home], ROLE_CLASSES[int(rng.integers(n_classes))][1])
        react = [step > 0 and rng.random() < cfg.lapse_prob for step in range(n_hist)]
        react.append(dormant)
        react.extend([False] * (cfg.future_steps - 1))
        gaps = rng.exponential(cfg.mean_gap_days * SECONDS_PER_DAY, size=total)
        for step in range(1, total):
            if react[step]:
                gaps[step] += (cfg.delta_t_days + rng.uniform(lo_lapse, hi_lapse)) * SECONDS_PER_DAY
        offsets = np.cumsum(gaps[:n_hist])
        end = cfg.now_ts - rng.uniform(0, SECONDS_PER_DAY)
        hist_ts = [max(0, int(end - (offsets[-1] - o))) for o in offsets]
        future_ts = cfg.now_ts + np.cumsum(gaps[n_hist:])
        classes, items, behs, visited = [], [], [], [home]
        visits: dict[str, int] = {}
        last_cat = home
        for step in range(total):
            if step > 0:
                k = _draw(rng, trans_cum[k])
            want, cost = ROLE_CLASSES[k]
            if react[step]:
                # dict order is first visit, so ties go to the earliest category
                anchor = max(visits, key=visits.__getitem__) if visits else home
                cat = step_category(rng, react_direct, anchor, visited, want)
                ids, cum = react_cells[(cat, cost)]
                item = ids[_draw(rng, cum)]
                beh = Behavior.PURCHASE
            else:
                source = last_cat if rng.random() < cfg.wander_prob else home
                cat = step_category(rng, direct, source, visited, want)
                ids, cum = cells[(cat, cost)]
                item = ids[_draw(rng, cum)]
                beh = Behavior(_draw(rng, b_cum[k in terminal]))
            classes.append(k)
            items.append(item)
            behs.append(beh)
            last_cat = cat
            visits[cat] = visits.get(cat, 0) + 1
            if cat not in visited:
                visited.append(cat)
        inters = []
        for step in range(n_hist):
            b = behs[step]
            if dormant and b is Behavior.PURCHASE and hist_ts[step] >= window_start:
                b = Behavior.CLICK
            inters.append(Interaction(items[step], b, hist_ts[step]))
        seq = UserSequence(user_id, tuple(inters), profile_text=f"home_dept={catalog[items[0]].category_path[0]}")
        sequences.append(seq)
        users[user_id] = UserTruth(
            user_id=user_id,
            home=home,
            dormant=dormant,
            classes=classes[:n_hist],
            next_items=items[n_hist:],
            next_classes=classes[n_hist:],
            next_behaviors=behs[n_hist:],
            next_ts=[int(t) for t in future_ts],
            reactivations=[j for j, r in enumerate(react) if r],
        )
    truth = WorldTruth(users, item_roles, repl)
    return World(cfg, catalog, sequences, graph, truth)
