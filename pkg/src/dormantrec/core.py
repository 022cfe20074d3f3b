"""Domain types, interaction-log ingestion and dormancy classification."""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86_400


class Behavior(enum.IntEnum):
    # ordering is for display only; nothing scores on it
    VIEW = 0
    CLICK = 1
    PURCHASE = 2

    @classmethod
    def parse(cls, text: str) -> "Behavior":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown behavior {text!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Interaction:
    item_id: str
    behavior: Behavior
    ts: int

    def __post_init__(self):
        if not self.item_id:
            raise ValueError("item_id must be non-empty")
        if self.ts < 0:
            raise ValueError(f"negative timestamp {self.ts}")


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    interactions: tuple[Interaction, ...]
    profile_text: str = ""

    def __post_init__(self):
        ts = [x.ts for x in self.interactions]
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise ValueError(f"interactions of {self.user_id} are not time-sorted")

    def __len__(self) -> int:
        return len(self.interactions)

    def __iter__(self) -> Iterator[Interaction]:
        return iter(self.interactions)

    @property
    def item_ids(self) -> list[str]:
        return [x.item_id for x in self.interactions]

    def with_interactions(self, interactions: Iterable[Interaction]) -> "UserSequence":
        return UserSequence(self.user_id, tuple(interactions), self.profile_text)


@dataclass(frozen=True, eq=False)
class Item:
    item_id: str
    title: str
    price: int
    category_path: tuple[str, str, str]
    sales_30d: int
    orders_total: int
    embedding: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.price <= 0:
            raise ValueError(f"item {self.item_id}: price must be positive")
        if len(self.category_path) != 3 or not all(self.category_path):
            raise ValueError(f"item {self.item_id}: category path needs 3 non-empty levels")
        if self.sales_30d < 0 or self.orders_total < 0:
            raise ValueError(f"item {self.item_id}: negative sales/orders")

    @property
    def category(self) -> str:
        """Leaf category; the unit used by interest profiles and the category graph."""
        return self.category_path[-1]

    @property
    def category_text(self) -> str:
        return " > ".join(self.category_path)

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "title": self.title,
            "price": self.price,
            "category": list(self.category_path),
            "sales_30d": self.sales_30d,
            "orders_total": self.orders_total,
            "embedding": [float(v) for v in self.embedding],
        }

    @classmethod
    def from_json(cls, rec: Mapping) -> "Item":
        return cls(
            item_id=str(rec["item_id"]),
            title=str(rec["title"]),
            price=int(rec["price"]),
            category_path=tuple(str(c) for c in rec["category"]),
            sales_30d=int(rec["sales_30d"]),
            orders_total=int(rec["orders_total"]),
            embedding=np.asarray(rec["embedding"], dtype=np.float64),
        )


class Catalog(Mapping[str, Item]):
    """Item table keyed by id. All embeddings share one dimension."""

    def __init__(self, items: Iterable[Item]):
        self._items: dict[str, Item] = {}
        dim = None
        for item in items:
            if item.item_id in self._items:
                raise ValueError(f"duplicate item id {item.item_id}")
            if dim is None:
                dim = item.embedding.shape[0]
            elif item.embedding.shape != (dim,):
                raise ValueError(f"item {item.item_id}: embedding dimension {item.embedding.shape} != {dim}")
            self._items[item.item_id] = item
        self.dim = dim or 0

    def __getitem__(self, item_id: str) -> Item:
        return self._items[item_id]

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    @property
    def ids(self) -> list[str]:
        return list(self._items)

    def embeddings(self) -> np.ndarray:
        return np.stack([it.embedding for it in self._items.values()]) if self._items else np.zeros((0, 0))

    def categories(self) -> list[str]:
        return sorted({it.category for it in self._items.values()})

    def subset(self, ids: Iterable[str]) -> "Catalog":
        return Catalog(self._items[i] for i in ids)

    def to_jsonl(self) -> Iterator[str]:
        for item in self._items.values():
            yield json.dumps(item.to_json(), sort_keys=True)

    @classmethod
    def from_jsonl(cls, lines: Iterable[str]) -> "Catalog":
        return cls(Item.from_json(json.loads(line)) for line in lines if line.strip())


@dataclass
class DormancyConfig:
    now_ts: int
    delta_t_days: int = 30

    def __post_init__(self):
        if self.delta_t_days <= 0:
            raise ValueError("delta_t_days must be positive")

    @property
    def window_start(self) -> int:
        return self.now_ts - self.delta_t_days * SECONDS_PER_DAY


@dataclass
class IngestReport:
    n_lines: int = 0
    n_kept: int = 0
    n_views_dropped: int = 0
    unknown_items: int = 0
    rejects: list[tuple[int, str]] = field(default_factory=list)

    @property
    def reject_count(self) -> int:
        return len(self.rejects)


def parse_interaction_record(line: str) -> tuple[str, Interaction]:
    rec = json.loads(line)
    if not isinstance(rec, dict):
        raise ValueError("record is not an object")
    user_id = rec["user_id"]
    if not isinstance(user_id, str) or not user_id:
        raise ValueError("bad user_id")
    ts = rec["ts"]
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise ValueError("ts must be an integer")
    return user_id, Interaction(str(rec["item_id"]), Behavior.parse(rec["behavior"]), ts)


def ingest_interactions(
    lines: Iterable[str],
    catalog: Mapping[str, Item],
    keep_view_rate: float = 0.2,
    seed: int = 0,
) -> tuple[list[UserSequence], IngestReport]:
    """Parse line-delimited interaction records into per-user sequences.

    Malformed lines and records pointing at unknown items are counted in the
    report (with 1-based line numbers) and skipped. Views survive with
    probability ``keep_view_rate``; one uniform draw is consumed per valid view
    record, in stream order, so the outcome depends only on input order and seed.
    Users come out in order of first appearance; each sequence is stably sorted
    by timestamp.
    """
    if not 0.0 <= keep_view_rate <= 1.0:
        raise ValueError("keep_view_rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    report = IngestReport()
    per_user: dict[str, list[Interaction]] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        report.n_lines += 1
        try:
            user_id, inter = parse_interaction_record(line)
        except (ValueError, KeyError, TypeError) as exc:
            report.rejects.append((lineno, f"malformed: {exc}"))
            continue
        if inter.item_id not in catalog:
            report.unknown_items += 1
            report.rejects.append((lineno, f"unknown item {inter.item_id}"))
            continue
        if inter.behavior is Behavior.VIEW and rng.random() >= keep_view_rate:
            report.n_views_dropped += 1
            continue
        per_user.setdefault(user_id, []).append(inter)
        report.n_kept += 1
    if report.rejects:
        log.info("ingest: %d rejected records", report.reject_count)
    seqs = [UserSequence(u, tuple(sorted(xs, key=lambda x: x.ts))) for u, xs in per_user.items()]
    return seqs, report


def sequences_to_jsonl(seqs: Iterable[UserSequence]) -> Iterator[str]:
    for seq in seqs:
        for x in seq:
            yield json.dumps(
                {"user_id": seq.user_id, "item_id": x.item_id, "behavior": x.behavior.label, "ts": x.ts},
                sort_keys=True,
            )


def classify_dormant(seq: UserSequence, cfg: DormancyConfig) -> bool:
    start = cfg.window_start
    return not any(
        x.behavior is Behavior.PURCHASE and start <= x.ts <= cfg.now_ts for x in seq.interactions
    )


def truncate_sequence(seq: UserSequence, max_len: int = 128) -> UserSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if len(seq) <= max_len:
        return seq
    return seq.with_interactions(seq.interactions[-max_len:])


def filter_high_quality(catalog: Catalog, min_orders: int = 5) -> Catalog:
    """Items whose lifetime order count strictly exceeds ``min_orders``."""
    if min_orders < 0:
        raise ValueError("min_orders must be >= 0")
    return catalog.subset(i for i, it in catalog.items() if it.orders_total > min_orders)
