"""End-to-end experiment: world -> codebook -> graph -> roles -> reasoner -> backbone -> metrics."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .backbone.data import Example, GuidanceFeatures, NO_GUIDANCE, build_guidance, encode_examples
from .backbone.model import Backbone, BackboneConfig
from .backbone.search import BeamHypothesis, beam_search
from .backbone.train import evaluate_loss, train
from .codebook import Codebook, Sid, assign_catalog, sids_to_items, train_codebook
from .core import Catalog, UserSequence, classify_dormant
from .evalkit import (
    EvalInstance,
    MetricReport,
    evaluate,
    exposure_ratio_buckets,
    hit_item_at_k,
    hit_sid_at_k,
    interaction_counts,
    ood_split,
    popularity_baseline,
)
from .graph import CategoryGraph, MiningParams, mine_graph
from .reasoner.counterfactual import GlobalRoleTable, build_global_role_table, conversion_events
from .reasoner.mock import MockReasoner, OracleTable, ReasonConfig, ReasonerOutput, reason_user
from .roles import CategoryStats, RoleThresholds, UserRoles, assign_intrinsic_roles, label_user
from .synthworld import World, WorldConfig, generate_world

log = logging.getLogger(__name__)


@dataclass
class CodebookParams:
    levels: int = 3
    size: int = 16
    iters: int = 25


def desk_backbone() -> BackboneConfig:
    return BackboneConfig(
        d_model=64, n_layers=2, n_heads=4, max_items=12, lr=3e-3, batch_size=256, epochs=2, min_lr_ratio=0.05
    )


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    codebook: CodebookParams = field(default_factory=CodebookParams)
    graph_source: str = "planted"         # "mined" from the logs or the generator's "planted" graph
    mining: MiningParams = field(default_factory=MiningParams)
    thresholds: RoleThresholds = field(default_factory=RoleThresholds)
    max_key_items: int = 16
    reason: ReasonConfig = field(default_factory=ReasonConfig)
    backbone: BackboneConfig = field(default_factory=desk_backbone)
    train_positions: int = 6             # next-item targets per user; 0 = every position
    warm_epochs: int = 3
    warm_lr: float = 3e-3
    eval_beam: int = 100
    exposure_k: int = 100
    seed: int = 0

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            seed=seed,
            world=replace(self.world, seed=seed),
            reason=replace(self.reason, seed=seed),
            backbone=replace(self.backbone, seed=seed),
        )


@dataclass
class Prepared:
    cfg: ExperimentConfig
    world: World
    codebook: Codebook
    sid_map: dict[str, Sid]
    sid_items: dict[Sid, list[str]]
    graph: CategoryGraph
    stats: CategoryStats
    intrinsic: dict
    labels: dict[str, UserRoles]
    oracle: OracleTable
    global_table: GlobalRoleTable
    popularity: Mapping[str, int]
    reasoner: MockReasoner
    dormant: list[str]
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def catalog(self) -> Catalog:
        return self.world.catalog

    @property
    def sequences(self) -> dict[str, UserSequence]:
        return {s.user_id: s for s in self.world.sequences}

    def label(self, seq: UserSequence) -> UserRoles:
        return label_user(
            seq, self.catalog, self.stats, self.graph, max_key_items=self.cfg.max_key_items, intrinsic=self.intrinsic
        )

    def history(self, seq: UserSequence) -> tuple:
        return tuple((self.sid_map[x.item_id], x.behavior) for x in seq)

    def reason(self, seq: UserSequence) -> ReasonerOutput:
        out, _ = reason_user(self.reasoner, self.label(seq), self.sid_map, self.graph, self.global_table, self.cfg.reason)
        return out


class _Timer:
    def __init__(self, sink: dict[str, float], name: str):
        self.sink, self.name = sink, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.name] = self.sink.get(self.name, 0.0) + time.perf_counter() - self.t0


def prepare(cfg: ExperimentConfig) -> Prepared:
    timings: dict[str, float] = {}
    with _Timer(timings, "world"):
        world = generate_world(cfg.world)
    return assemble(cfg, world, timings=timings)


def build_codebook(cfg: ExperimentConfig, catalog: Catalog) -> Codebook:
    return train_codebook(
        catalog.embeddings(), L=cfg.codebook.levels, K=cfg.codebook.size, iters=cfg.codebook.iters, seed=cfg.seed
    )


def choose_graph(cfg: ExperimentConfig, world: World) -> CategoryGraph:
    if cfg.graph_source == "planted":
        return world.graph
    if cfg.graph_source == "mined":
        return mine_graph(world.sequences, world.catalog, cfg.mining)
    raise ValueError(f"unknown graph_source {cfg.graph_source!r}")


def assemble(
    cfg: ExperimentConfig,
    world: World,
    codebook: Codebook | None = None,
    graph: CategoryGraph | None = None,
    oracle: OracleTable | None = None,
    global_table: GlobalRoleTable | None = None,
    timings: dict[str, float] | None = None,
) -> Prepared:
    """Derive every shared artifact from a world; any artifact passed in is used as is."""
    timings = {} if timings is None else timings
    with _Timer(timings, "codebook"):
        cb = codebook or build_codebook(cfg, world.catalog)
        sid_map, _ = assign_catalog(cb, world.catalog)
    with _Timer(timings, "graph"):
        graph = graph if graph is not None else choose_graph(cfg, world)
    with _Timer(timings, "roles"):
        stats = CategoryStats.build(world.catalog, cfg.thresholds)
        intrinsic = {i: assign_intrinsic_roles(it, stats) for i, it in world.catalog.items()}
        labels = {
            s.user_id: label_user(s, world.catalog, stats, graph, max_key_items=cfg.max_key_items, intrinsic=intrinsic)
            for s in world.sequences
        }
        if oracle is None:
            oracle = OracleTable.from_labels(labels.values())
        if global_table is None:
            global_table = build_global_role_table(world.sequences, world.catalog, stats, graph, cfg.world.dormancy())
    counts = interaction_counts(world.sequences)
    popularity = {i: counts.get(i, 0) for i in world.catalog}
    reasoner = MockReasoner(world.catalog, sid_map, graph, intrinsic, oracle, popularity)
    dormancy = cfg.world.dormancy()
    dormant = [s.user_id for s in world.sequences if len(s) and classify_dormant(s, dormancy)]
    return Prepared(
        cfg, world, cb, sid_map, sids_to_items(sid_map), graph, stats, intrinsic, labels, oracle, global_table,
        popularity, reasoner, dormant, timings,
    )


def next_item_examples(prep: Prepared, seqs: Sequence[UserSequence], positions: int) -> list[Example]:
    """(prefix -> next logged item) pairs; ``positions`` most recent targets per user, 0 for all."""
    out = []
    for seq in seqs:
        hist = prep.history(seq)
        start = 1 if positions <= 0 else max(1, len(seq) - positions)
        for j in range(start, len(seq)):
            out.append(Example(seq.user_id, seq.profile_text, hist[:j], hist[j][0]))
    return out


def conversion_examples(prep: Prepared, seqs: Sequence[UserSequence]) -> list[Example]:
    """Prefix -> purchase pairs for every purchase that ended a dormant stretch in the logs.

    Each example carries reasoner guidance computed from its prefix alone.
    """
    out = []
    top_n = prep.cfg.backbone.guidance_n
    days = prep.cfg.world.delta_t_days
    for seq in seqs:
        hist = prep.history(seq)
        for j in conversion_events(seq, days):
            if j == 0:
                continue
            prefix = seq.with_interactions(seq.interactions[:j])
            guide = build_guidance(prep.reason(prefix).sids, top_n)
            out.append(Example(seq.user_id, seq.profile_text, hist[:j], hist[j][0], guide))
    return out


def eval_examples(
    prep: Prepared, seqs: Sequence[UserSequence], targets: Sequence[str], guidance: Sequence[GuidanceFeatures] | None
) -> list[Example]:
    out = []
    for k, (seq, item) in enumerate(zip(seqs, targets, strict=True)):
        g = NO_GUIDANCE if guidance is None else guidance[k]
        out.append(Example(seq.user_id, seq.profile_text, prep.history(seq), prep.sid_map[item], g))
    return out


def to_instances(examples: Sequence[Example], results: Sequence[Sequence[BeamHypothesis]]) -> list[EvalInstance]:
    return [
        EvalInstance(e.user_id, tuple(s for s, _ in e.history), e.target, tuple(h.sid for h in hyps))
        for e, hyps in zip(examples, results, strict=True)
    ]


def exposed_items(prep: Prepared, instances: Sequence[EvalInstance], k: int) -> list[str]:
    out = []
    for inst in instances:
        for sid in inst.candidates[:k]:
            out.extend(prep.sid_items.get(sid, ()))
    return out


@dataclass
class Models:
    base: Backbone
    unguided: Backbone
    guided: Backbone
    base_losses: list[float]
    unguided_losses: list[float]
    guided_losses: list[float]


def train_models(prep: Prepared) -> Models:
    """Pre-train on every logged transition, then fine-tune twice on conversion prefixes.

    The two fine-tuning runs share data, schedule and seed; only the guided
    one sees the reasoner's features.
    """
    cfg = prep.cfg
    seqs = list(prep.world.sequences)
    with _Timer(prep.timings, "examples"):
        data = encode_examples(next_item_examples(prep, seqs, cfg.train_positions), cfg.backbone, use_guidance=False)
    with _Timer(prep.timings, "train"):
        base = train(data, cfg.backbone)
    with _Timer(prep.timings, "guidance"):
        warm = conversion_examples(prep, seqs)
    if not warm:
        raise ValueError("the logs contain no conversion purchases to fine-tune on")
    warm_cfg = replace(cfg.backbone, lr=cfg.warm_lr, epochs=cfg.warm_epochs)
    with _Timer(prep.timings, "warm_start"):
        plain = train(encode_examples(warm, warm_cfg, use_guidance=False), warm_cfg, init=base.model)
        guided = train(encode_examples(warm, warm_cfg), warm_cfg, init=base.model)
    return Models(
        base.model, plain.model, guided.model, base.epoch_losses, plain.epoch_losses, guided.epoch_losses
    )


@dataclass
class ExperimentResult:
    report: dict
    prep: Prepared
    models: Models
    unguided: list[EvalInstance]
    guided: list[EvalInstance]
    reasoner: list[EvalInstance]
    metrics: dict[str, MetricReport] = field(default_factory=dict)


def _round(x: float) -> float:
    return round(float(x), 6)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Train both backbones, then score dormant users' first withheld item three ways."""
    prep = prepare(cfg)
    return score_models(prep, train_models(prep))


def dormant_outputs(prep: Prepared) -> dict[str, ReasonerOutput]:
    by_id = prep.sequences
    with _Timer(prep.timings, "guidance"):
        return {u: prep.reason(by_id[u]) for u in prep.dormant}


def score_models(
    prep: Prepared, models: Models, outputs: Mapping[str, ReasonerOutput] | None = None
) -> ExperimentResult:
    """Metrics for popularity, unguided and guided retrieval of each dormant user's next item.

    ``outputs`` holds precomputed reasoner results per dormant user; missing
    ones are computed here.
    """
    cfg = prep.cfg
    by_id = prep.sequences
    seqs = [by_id[u] for u in prep.dormant]
    targets = [prep.world.truth.users[u].next_items[0] for u in prep.dormant]
    outputs = dict(outputs or {})
    missing = [u for u in prep.dormant if u not in outputs]
    if missing:
        with _Timer(prep.timings, "guidance"):
            outputs.update((u, prep.reason(by_id[u])) for u in missing)
    guidance = [build_guidance(outputs[u].sids, cfg.backbone.guidance_n) for u in prep.dormant]
    plain_ex = eval_examples(prep, seqs, targets, None)
    guided_ex = eval_examples(prep, seqs, targets, guidance)
    plain_data = encode_examples(plain_ex, cfg.backbone, use_guidance=False)
    guided_data = encode_examples(guided_ex, cfg.backbone)
    with _Timer(prep.timings, "search"):
        plain = to_instances(plain_ex, beam_search(models.unguided, plain_data, cfg.eval_beam))
        guided = to_instances(guided_ex, beam_search(models.guided, guided_data, cfg.eval_beam))
    pop_items = popularity_baseline(prep.world.sequences, len(prep.catalog))
    pop_sids = list(dict.fromkeys(prep.sid_map[i] for i in pop_items))[: cfg.eval_beam]
    pop = [inst.with_candidates(pop_sids) for inst in plain]
    ks = (1, 10, 100)
    reports = {
        "popularity": evaluate(pop, ks),
        "unguided": evaluate(plain, ks, loss=evaluate_loss(models.unguided, plain_data)),
        "guided": evaluate(guided, ks, loss=evaluate_loss(models.guided, guided_data)),
    }
    for r in reports.values():
        r.check()
    _, ood_plain = ood_split(plain)
    _, ood_guided = ood_split(guided)
    buckets = exposure_ratio_buckets(
        exposed_items(prep, guided, cfg.exposure_k), exposed_items(prep, plain, cfg.exposure_k), prep.popularity
    )
    reasoner_only = [inst.with_candidates(g.candidates) for inst, g in zip(plain, guidance)]
    report = {
        "seed": cfg.seed,
        "n_users": len(prep.world.sequences),
        "n_dormant": len(seqs),
        "n_graph_edges": len(prep.graph),
        "metrics": {k: r.to_json() for k, r in reports.items()},
        "reasoner_hit@10": _round(hit_item_at_k(reasoner_only, 10)),
        "ood": {
            "n": len(ood_plain),
            "unguided_hs1@10": _round(hit_sid_at_k(ood_plain, 1, 10)) if ood_plain else None,
            "guided_hs1@10": _round(hit_sid_at_k(ood_guided, 1, 10)) if ood_guided else None,
        },
        "exposure": [b.to_json() for b in buckets],
        "train_loss": [_round(x) for x in models.base_losses],
        "unguided_warm_loss": [_round(x) for x in models.unguided_losses],
        "guided_warm_loss": [_round(x) for x in models.guided_losses],
    }
    return ExperimentResult(report, prep, models, plain, guided, reasoner_only, reports)
