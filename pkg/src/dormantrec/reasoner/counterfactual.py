"""Candidate target roles and counterfactual role interventions."""
from __future__ import annotations

import enum
import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..codebook import Sid
from ..core import Behavior, DormancyConfig, Item, SECONDS_PER_DAY, UserSequence
from ..graph import CategoryGraph
from ..roles import (
    ANY_ANCHOR,
    CategoryStats,
    ContextualRole,
    FunctionalRole,
    InterestProfile,
    RoleTrajectory,
    compute_interest_profile,
    item_role,
)
from .records import PromptRecord, Task, ThinkContent, format_history, template


class EmptyCandidateRoles(ValueError):
    """No candidate role to intervene on; use the factual reasoning prompt instead."""


class Provenance(enum.Enum):
    TRAJECTORY = "TrajectoryObserved"
    GLOBAL = "GlobalFrequent"


class GlobalRoleTable:
    """Conversion counts per anchor-free functional role."""

    def __init__(self, counts: Mapping[FunctionalRole, int] | None = None):
        self.counts: Counter = Counter()
        self._ranked: list[FunctionalRole] | None = None
        for role, n in (counts or {}).items():
            self.add(role, n)

    def add(self, role: FunctionalRole, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counts must be non-negative")
        self.counts[role.abstract()] += n
        self._ranked = None

    def frequency(self, role: FunctionalRole) -> int:
        return self.counts.get(role.abstract(), 0)

    def top(self, g: int) -> list[FunctionalRole]:
        if self._ranked is None:
            self._ranked = sorted(self.counts, key=lambda r: (-self.counts[r], r.sort_key()))
        return self._ranked[: max(g, 0)]

    def __len__(self) -> int:
        return len(self.counts)

    def to_jsonl(self) -> Iterable[str]:
        for role in sorted(self.counts, key=FunctionalRole.sort_key):
            yield json.dumps({"role": role.to_json(), "count": self.counts[role]}, sort_keys=True)

    @classmethod
    def from_jsonl(cls, lines: Iterable[str]) -> "GlobalRoleTable":
        t = cls()
        for line in lines:
            if line.strip():
                rec = json.loads(line)
                t.add(FunctionalRole.from_json(rec["role"]), int(rec["count"]))
        return t


def conversion_events(seq: UserSequence, dormancy_days: int) -> Iterable[int]:
    """Positions of purchases preceded by a logged stretch of ``dormancy_days`` without any purchase."""
    gap = dormancy_days * SECONDS_PER_DAY
    xs = seq.interactions
    last = None
    for k, x in enumerate(xs):
        if x.behavior is Behavior.PURCHASE:
            start = x.ts - gap
            if xs[0].ts <= start and (last is None or last < start):
                yield k
            last = x.ts


def build_global_role_table(
    sequences: Sequence[UserSequence],
    catalog: Mapping[str, Item],
    stats: CategoryStats,
    g: CategoryGraph,
    dormancy: DormancyConfig,
) -> GlobalRoleTable:
    """Count the roles of items bought when a user came back from a dormant stretch.

    The role of each converting item is taken against the profile of the
    history before it.
    """
    table = GlobalRoleTable()
    for seq in sequences:
        for k in conversion_events(seq, dormancy.delta_t_days):
            prefix = seq.with_interactions(seq.interactions[:k])
            profile = compute_interest_profile(prefix, catalog)
            table.add(item_role(catalog[seq.interactions[k].item_id], profile, g, stats))
    return table


def anchor_role(role: FunctionalRole, profile: InterestProfile, g: CategoryGraph) -> FunctionalRole:
    """Bind an anchor-free role to the user's best profiled category with an outgoing edge of that relation."""
    if role.rel is None or role.rel.anchor != ANY_ANCHOR:
        return role
    for cat in profile.categories:
        if any(e.relation is role.rel.relation for e in g.out_edges(cat).values()):
            return role.with_rel(ContextualRole(cat, role.rel.relation))
    return role


def build_candidate_roles(
    trajectory: RoleTrajectory,
    global_table: GlobalRoleTable,
    top_g: int = 10,
    profile: InterestProfile | None = None,
    g: CategoryGraph | None = None,
) -> list[tuple[FunctionalRole, Provenance]]:
    """Union of trajectory roles and the ``top_g`` globally frequent roles, first occurrence wins.

    Global roles are anchored to this user when a profile and graph are given.
    """
    if top_g < 0:
        raise ValueError("top_g must be >= 0")
    out: dict[FunctionalRole, Provenance] = {}
    for r in trajectory.roles:
        out.setdefault(r, Provenance.TRAJECTORY)
    for r in global_table.top(top_g):
        if profile is not None and g is not None:
            r = anchor_role(r, profile, g)
        out.setdefault(r, Provenance.GLOBAL)
    return list(out.items())


@dataclass(frozen=True)
class UserContext:
    user_id: str
    profile_text: str
    history: tuple[tuple[Behavior, Sid], ...]
    profile: InterestProfile
    key_roles: tuple[tuple[Sid, FunctionalRole], ...]

    @property
    def history_text(self) -> str:
        return format_history(self.history)


@dataclass(frozen=True)
class CounterfactualQuery:
    context: UserContext
    role: FunctionalRole
    provenance: Provenance
    weight: float

    def think(self) -> ThinkContent:
        return ThinkContent(self.context.profile, self.context.key_roles, self.role)

    def to_record(self, target_behavior: str = "purchase") -> PromptRecord:
        """Reasoning prompt with the target role fixed to the intervened one.

        The think span is supplied in the prompt, so the completion only has
        to name the item.
        """
        base = template(Task.FR_COT).render(
            target_behavior=target_behavior,
            profile=self.context.profile_text,
            history=self.context.history_text,
            think=self.think().to_text(),
            sid="",
        )
        think_span = base.target
        return PromptRecord(Task.FR_COT, base.instruction, f"{base.prompt}\n{think_span}", "")

    def key(self) -> str:
        body = json.dumps(
            {"user": self.context.user_id, "history": self.context.history_text, "role": self.role.to_text()},
            sort_keys=True,
        )
        return hashlib.sha256(body.encode()).hexdigest()


def intervened_role(rec: PromptRecord) -> FunctionalRole:
    """Target role carried by a counterfactual prompt."""
    span = rec.prompt[rec.prompt.rindex("<think>") + len("<think>") : rec.prompt.rindex("</think>")]
    return ThinkContent.parse(span).target_role


def sample_counterfactuals(
    context: UserContext,
    candidates: Sequence[tuple[FunctionalRole, Provenance]],
    n: int,
    seed: int,
    global_table: GlobalRoleTable | None = None,
) -> list[CounterfactualQuery]:
    """Draw ``n`` intervened roles with probability proportional to (global frequency + 1).

    Draws are without replacement until every candidate has been used, then
    with replacement. Each query carries its normalized sampling weight.
    """
    if not candidates:
        raise EmptyCandidateRoles("no candidate roles; fall back to the factual reasoning prompt")
    if n < 1:
        raise ValueError("n must be >= 1")
    table = global_table or GlobalRoleTable()
    w = np.array([table.frequency(r) + 1.0 for r, _ in candidates])
    p = w / w.sum()
    rng = np.random.default_rng(seed)
    first = rng.choice(len(candidates), size=min(n, len(candidates)), replace=False, p=p)
    rest = rng.choice(len(candidates), size=n - len(first), replace=True, p=p) if n > len(first) else []
    picks = [int(i) for i in first] + [int(i) for i in rest]
    return [CounterfactualQuery(context, candidates[i][0], candidates[i][1], float(p[i])) for i in picks]
