"""Instruction-tuning corpus built from the logs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from ..codebook import Sid
from ..core import Item, UserSequence
from ..graph import CategoryGraph
from ..roles import CategoryStats, FunctionalRole, assign_contextual_role, assign_intrinsic_roles, label_user
from .counterfactual import conversion_events
from .records import PromptRecord, build_alignment_records, build_frcot_record, build_stepwise_records


@dataclass
class CorpusStats:
    n_alignment: int = 0
    n_conversions: int = 0
    n_repeat_skipped: int = 0      # conversions whose item already sits in the prefix
    n_reasoning: int = 0


def conversion_records(
    sequences: Sequence[UserSequence],
    catalog: Mapping[str, Item],
    sid_map: Mapping[str, Sid],
    stats: CategoryStats,
    graph: CategoryGraph,
    dormancy_days: int,
    max_key_items: int = 16,
    intrinsic: Mapping | None = None,
    tally: CorpusStats | None = None,
) -> list[PromptRecord]:
    """FR-CoT and step-wise records for every logged purchase that ended a dormant stretch.

    The prefix before the purchase is the history; its profile and key-item
    trajectory fill the reasoning span.
    """
    tally = tally if tally is not None else CorpusStats()
    out: list[PromptRecord] = []
    for seq in sequences:
        for j in conversion_events(seq, dormancy_days):
            if j == 0:
                continue
            tally.n_conversions += 1
            prefix = seq.with_interactions(seq.interactions[:j])
            target = seq.interactions[j].item_id
            if target in prefix.item_ids:
                tally.n_repeat_skipped += 1
                continue
            lab = label_user(prefix, catalog, stats, graph, max_key_items=max_key_items, intrinsic=intrinsic)
            item = catalog[target]
            base = intrinsic[target] if intrinsic is not None else assign_intrinsic_roles(item, stats)
            role = FunctionalRole(*base, assign_contextual_role(item.category, lab.profile, graph))
            out.append(build_frcot_record(prefix, sid_map, lab.profile, lab.trajectory, target, role))
            out.extend(build_stepwise_records(prefix, sid_map, catalog, lab.trajectory, target, role))
    tally.n_reasoning += len(out)
    return out


def build_corpus(
    sequences: Sequence[UserSequence],
    catalog: Mapping[str, Item],
    sid_map: Mapping[str, Sid],
    stats: CategoryStats,
    graph: CategoryGraph,
    dormancy_days: int,
    max_key_items: int = 16,
    intrinsic: Mapping | None = None,
) -> tuple[list[PromptRecord], CorpusStats]:
    tally = CorpusStats()
    align = build_alignment_records(catalog, sid_map)
    tally.n_alignment = len(align)
    reasoning = conversion_records(
        sequences, catalog, sid_map, stats, graph, dormancy_days, max_key_items, intrinsic, tally
    )
    return align + reasoning, tally
