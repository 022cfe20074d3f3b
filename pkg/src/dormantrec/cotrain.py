"""Closed loop: reason, execute, collect feedback, reflect, refine.

Each round serves a fresh slice of the dormant cohort. The backbone is
fine-tuned at the start of a round on the feedback gathered in earlier rounds
only, and the mock reasoner refines by adding the observed items to its
oracle table.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .backbone.data import Example, build_guidance, encode_examples
from .backbone.model import Backbone
from .backbone.search import beam_search
from .backbone.train import train
from .codebook import Sid
from .pipeline import Prepared
from .reasoner.mock import reason_user
from .reasoner.records import PromptRecord, build_reflection_record
from .roles import FunctionalRole, InterestProfile, assign_contextual_role

log = logging.getLogger(__name__)


class FeedbackSource(enum.Enum):
    SYNTHETIC_ENV = "SyntheticEnv"   # the environment's next item, exposed or not
    LOG_REPLAY = "LogReplay"         # the logged next item, kept only when it was exposed

    @classmethod
    def parse(cls, text: str) -> "FeedbackSource":
        for m in cls:
            if text in (m.value, m.name):
                return m
        raise ValueError(f"unknown feedback source {text!r}")


@dataclass
class LoopConfig:
    rounds: int = 3
    users_per_round: int = 0        # 0 splits the dormant cohort evenly over the rounds
    reasoner_beam: int = 25
    backbone_beam: int = 64
    feedback: FeedbackSource = FeedbackSource.SYNTHETIC_ENV
    finetune: bool = True
    finetune_epochs: int = 4
    finetune_lr: float = 3e-3
    replay_feedback: bool = True    # fine-tune on all earlier feedback, not only the last round's
    ks: tuple[int, ...] = (1, 10)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.feedback, str):
            self.feedback = FeedbackSource.parse(self.feedback)
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.users_per_round < 0:
            raise ValueError("users_per_round must be >= 0")
        if self.reasoner_beam < 1 or self.backbone_beam < 1:
            raise ValueError("beam widths must be >= 1")
        if any(k < 1 or k > self.backbone_beam for k in self.ks):
            raise ValueError("every reported K must lie in [1, backbone_beam]")


@dataclass(frozen=True)
class FeedbackEvent:
    user_id: str
    exposed: tuple[Sid, ...]
    truth: str | None               # chosen item, None when the replayed log gives nothing usable


@dataclass
class RoundReport:
    round: int
    n_users: int
    n_queries: int
    n_reasoner_candidates: int
    n_feedback: int                 # events carrying a ground-truth item
    n_reflections: int
    n_oracle_updates: int
    n_finetune_examples: int
    hit_rate: dict[int, float]      # HI@K over events with a ground-truth item

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "hit_rate"}
        out["hit_rate"] = {f"@{k}": round(v, 6) for k, v in sorted(self.hit_rate.items())}
        return out


@dataclass
class LoopState:
    prep: Prepared
    model: Backbone
    cohorts: list[list[str]]
    round: int = 0
    pending: list[Example] = field(default_factory=list)      # feedback not yet trained on
    seen: list[Example] = field(default_factory=list)         # feedback already trained on
    events: list[list[FeedbackEvent]] = field(default_factory=list)
    reflections: list[PromptRecord] = field(default_factory=list)
    reports: list[RoundReport] = field(default_factory=list)


def split_cohorts(user_ids: Sequence[str], cfg: LoopConfig) -> list[list[str]]:
    """Disjoint per-round user slices drawn by a seeded shuffle."""
    ids = sorted(user_ids)
    if not ids:
        raise ValueError("the dormant cohort is empty")
    order = [ids[i] for i in np.random.default_rng(cfg.seed).permutation(len(ids))]
    size = cfg.users_per_round or len(order) // cfg.rounds
    if size == 0:
        raise ValueError(f"{len(order)} dormant users cannot fill {cfg.rounds} rounds")
    return [order[r * size : (r + 1) * size] for r in range(cfg.rounds)]


def init_state(prep: Prepared, model: Backbone, cfg: LoopConfig) -> LoopState:
    return LoopState(prep, model, split_cohorts(prep.dormant, cfg))


def _truth(prep: Prepared, user_id: str, exposed: Sequence[Sid], source: FeedbackSource) -> str | None:
    item = prep.world.truth.users[user_id].next_items[0]
    if source is FeedbackSource.LOG_REPLAY and prep.sid_map[item] not in exposed:
        return None
    return item


def _role_for(prep: Prepared, profile: InterestProfile, item_id: str) -> FunctionalRole:
    rel = assign_contextual_role(prep.catalog[item_id].category, profile, prep.graph)
    return FunctionalRole(*prep.intrinsic[item_id], rel)


def _finetune(state: LoopState, cfg: LoopConfig) -> int:
    fresh = state.pending
    state.pending = []
    if not cfg.finetune or not fresh:
        return 0
    batch = state.seen + fresh if cfg.replay_feedback else fresh
    state.seen = state.seen + fresh
    mcfg = replace(state.model.cfg, lr=cfg.finetune_lr, epochs=cfg.finetune_epochs, seed=cfg.seed + state.round)
    state.model = train(encode_examples(batch, mcfg), mcfg, init=state.model).model
    return len(batch)


def run_round(state: LoopState, cfg: LoopConfig) -> RoundReport:
    """One pass of reason -> guide -> search -> feedback -> reflect -> refine for the next cohort."""
    if state.round >= len(state.cohorts):
        raise ValueError(f"no cohort left for round {state.round}")
    cohort = state.cohorts[state.round]
    if not cohort:
        raise ValueError(f"round {state.round} has an empty dormant cohort")
    prep = state.prep
    n_trained = _finetune(state, cfg)
    rcfg = replace(prep.cfg.reason, beam=cfg.reasoner_beam)
    top_n = state.model.cfg.guidance_n
    labels, outputs, examples = [], [], []
    n_queries = 0
    for u in cohort:
        seq = prep.sequences[u]
        lab = prep.label(seq)
        out, queries = reason_user(prep.reasoner, lab, prep.sid_map, prep.graph, prep.global_table, rcfg)
        labels.append(lab)
        outputs.append(out)
        n_queries += len(queries)
        examples.append(Example(u, seq.profile_text, prep.history(seq), None, build_guidance(out.sids, top_n)))
    hyps = beam_search(state.model, encode_examples(examples, state.model.cfg), cfg.backbone_beam)
    events, n_refl, n_updates = [], 0, 0
    hits = {k: 0 for k in cfg.ks}
    for u, lab, out, ex, hs in zip(cohort, labels, outputs, examples, hyps, strict=True):
        exposed = tuple(h.sid for h in hs)
        truth = _truth(prep, u, exposed, cfg.feedback)
        events.append(FeedbackEvent(u, exposed, truth))
        if truth is None:
            continue
        sid = prep.sid_map[truth]
        for k in cfg.ks:
            hits[k] += sid in exposed[:k]
        state.reflections.append(build_reflection_record(lab.seq, prep.sid_map, out.sids, exposed, truth))
        n_refl += 1
        prep.oracle.add(_role_for(prep, lab.profile, truth), truth)
        n_updates += 1
        state.pending.append(replace(ex, target=sid))
    n_fb = sum(e.truth is not None for e in events)
    report = RoundReport(
        round=state.round,
        n_users=len(cohort),
        n_queries=n_queries,
        n_reasoner_candidates=sum(len(o) for o in outputs),
        n_feedback=n_fb,
        n_reflections=n_refl,
        n_oracle_updates=n_updates,
        n_finetune_examples=n_trained,
        hit_rate={k: (hits[k] / n_fb if n_fb else 0.0) for k in cfg.ks},
    )
    log.info("round %d: %s", state.round, report.to_json())
    state.events.append(events)
    state.reports.append(report)
    state.round += 1
    return report


def run_loop(prep: Prepared, model: Backbone, cfg: LoopConfig) -> LoopState:
    """All rounds in order. The caller's model and oracle table are left untouched."""
    oracle = prep.oracle.copy()
    prep = replace(prep, oracle=oracle, reasoner=prep.reasoner.with_oracle(oracle))
    state = init_state(prep, model, cfg)
    for _ in range(cfg.rounds):
        run_round(state, cfg)
    return state


def series(state: LoopState, k: int) -> list[float]:
    return [r.hit_rate[k] for r in state.reports]


def report_lines(state: LoopState) -> Iterable[str]:
    for r in state.reports:
        yield json.dumps(r.to_json(), sort_keys=True)
