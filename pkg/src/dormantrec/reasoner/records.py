"""Instruction-tuning records: templates, builders and a structural parser.

Each template is a set of format strings with named slots. The same
template compiles to an anchored regex, so anything rendered by a template
can be parsed back into its slot values.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, Mapping, Sequence

from ..codebook import Sid, find_sids
from ..core import Behavior, Item, UserSequence
from ..roles import FunctionalRole, InterestProfile, RoleTrajectory


class Task(enum.Enum):
    ITEM_INDEXING = "ItemIndexing"
    ITEM_PROFILE_TITLE = "ItemProfileTitle"
    ITEM_PROFILE_CATEGORY = "ItemProfileCategory"
    STANDARD_NEXT_ITEM = "StandardNextItem"
    FR_COT = "FrCot"
    SUB_KEY_ITEMS = "SubKeyItems"
    SUB_ROLE_INTERPRET = "SubRoleInterpret"
    SUB_JOINT_REASON = "SubJointReason"
    REFLECTION = "Reflection"


@dataclass(frozen=True)
class PromptRecord:
    task: Task
    instruction: str
    prompt: str
    target: str

    def to_json(self) -> dict:
        return {"task": self.task.value, "instruction": self.instruction, "prompt": self.prompt, "target": self.target}

    def to_line(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, rec: Mapping) -> "PromptRecord":
        return cls(Task(rec["task"]), rec["instruction"], rec["prompt"], rec["target"])


_SLOT = re.compile(r"\{(\w+)\}")


def _compile(fmt: str) -> re.Pattern:
    parts, seen, pos = [], set(), 0
    for m in _SLOT.finditer(fmt):
        parts.append(re.escape(fmt[pos : m.start()]))
        name = m.group(1)
        parts.append(f"(?P={name})" if name in seen else f"(?P<{name}>.*?)")
        seen.add(name)
        pos = m.end()
    parts.append(re.escape(fmt[pos:]))
    return re.compile("".join(parts), re.DOTALL)


@dataclass(frozen=True)
class Template:
    task: Task
    variant: str
    instruction: str
    prompt: str
    target: str

    @cached_property
    def slots(self) -> set[str]:
        return {m.group(1) for f in (self.instruction, self.prompt, self.target) for m in _SLOT.finditer(f)}

    @cached_property
    def _patterns(self) -> tuple[re.Pattern, re.Pattern, re.Pattern]:
        return _compile(self.instruction), _compile(self.prompt), _compile(self.target)

    def render(self, **values: str) -> PromptRecord:
        missing = self.slots - values.keys()
        if missing:
            raise KeyError(f"{self.task.value}: unfilled slots {sorted(missing)}")
        return PromptRecord(
            self.task, self.instruction.format(**values), self.prompt.format(**values), self.target.format(**values)
        )

    def match(self, rec: PromptRecord) -> dict[str, str] | None:
        if rec.task is not self.task:
            return None
        values: dict[str, str] = {}
        for pattern, text in zip(self._patterns, (rec.instruction, rec.prompt, rec.target)):
            m = pattern.fullmatch(text)
            if m is None:
                return None
            for k, v in m.groupdict().items():
                if values.setdefault(k, v) != v:
                    return None
        return values


_EXPERT = "You are an e-commerce recommendation specialist."

TEMPLATES: tuple[Template, ...] = (
    Template(
        Task.ITEM_INDEXING,
        "",
        "You translate catalog metadata into discrete Semantic ID (SID) tokens for an e-commerce platform.",
        "Produce the Semantic ID (SID) token of the product described below.\n"
        "Title: {title}\nPrice: {price}\nCategory Path: {category_path}\n"
        "Reply with the SID token alone.",
        "{sid}",
    ),
    Template(
        Task.ITEM_PROFILE_TITLE,
        "",
        "You turn an internal Semantic ID (SID) token back into the product title as it appears in the catalog.",
        "Write the catalog title of the product identified by this SID.\nSID: {sid}\nTitle:",
        "{title}",
    ),
    Template(
        Task.ITEM_PROFILE_CATEGORY,
        "",
        "You decode the product category from a Semantic ID (SID) token.",
        'Give the category path of the product identified by this SID, written as '
        '"Level-1 Category > Level-2 Category > Level-3 Category".\nSID: {sid}\nCategory Path:',
        "{category_path}",
    ),
    Template(
        Task.STANDARD_NEXT_ITEM,
        "sid",
        f"{_EXPERT}\nTask: from the user's profile and interaction history, predict the next item "
        "for the user's {target_behavior} action. Prefer an item the user has not interacted with yet.",
        "User interactions are listed as (behavior, item SID) pairs.\n"
        "Profile: {profile}\nHistory: {history}\n"
        "Reply with one item SID token that does not occur in the history.",
        "{sid}",
    ),
    Template(
        Task.STANDARD_NEXT_ITEM,
        "title",
        f"{_EXPERT}\nTask: from the user's profile and interaction history, predict the next item "
        "for the user's {target_behavior} action. Prefer an item the user has not interacted with yet.",
        "User interactions are listed as (behavior, item SID) pairs.\n"
        "Profile: {profile}\nHistory: {history}\n"
        "Reply with the title of one item that does not occur in the history.",
        "{title}",
    ),
    Template(
        Task.FR_COT,
        "",
        f"{_EXPERT} Predict the SID of the item behind the user's next {{target_behavior}}.\n"
        "Reason inside <think> tags in this order:\n"
        "Profile Anchoring: list the user's core categories.\n"
        "Functional Role Analysis: give the functional role of each key item in the history.\n"
        "Intent Evolution Inference: infer the role the next item should play.\n"
        "Decision Alignment: pick the SID that fills that role.\n"
        "Close the tags, then output the SID on its own. It must not repeat a history item.",
        "User Profile: {profile}\nInteraction Sequence: {history}\n"
        "Which functional need do the recent key items point to, and which item serves it?\n"
        "Give your reasoning, then the SID.",
        "<think>{think}</think>{sid}",
    ),
    Template(
        Task.SUB_KEY_ITEMS,
        "",
        "You analyse e-commerce behavior logs. Pick the history items that best explain the user's "
        "next {target_behavior}: items tied to core preferences or to a recent change in demand.\n"
        "List the chosen SIDs in interaction order, one SID per line.",
        "User Profile: {profile}\nInteraction History: {history}\n"
        "Select the Key Items from the interaction history using the profile:",
        "{key_items}",
    ),
    Template(
        Task.SUB_ROLE_INTERPRET,
        "",
        f"{_EXPERT} Label the functional role of every key item from its sales level, price level "
        "and replenishment type plus its relation to the user's core categories.\n"
        "Write one line per key item: SID | pop=..., repl=..., cost=..., rel=<relation> of <category>.",
        "User Information: {profile}\nInteraction Sequence: {history}\nKey Items: {key_items}\n"
        "Label the functional roles of these key items:",
        "{roles}",
    ),
    Template(
        Task.SUB_JOINT_REASON,
        "",
        f"{_EXPERT} Given the key items, their functional roles and the role the next item should play, "
        "predict the item behind the user's next {target_behavior}.",
        "User Profile: {profile}\nInteraction History: {history}\nKey Items: {key_items}\n"
        "Key Item Roles: {roles}\nTarget Role: {target_role}\n"
        "Reply with the SID of the next item.",
        "{sid}",
    ),
    Template(
        Task.REFLECTION,
        "",
        f"{_EXPERT} Two recommenders proposed candidates for this user. "
        "Work out which item the user actually engaged with next.",
        "User Profile: {profile}\nInteraction History: {history}\n"
        "Reasoner Candidates: {reasoner_candidates}\nBackbone Candidates: {backbone_candidates}\n"
        "Reply with the SID of the item the user chose.",
        "{sid}",
    ),
)

_BY_KEY = {(t.task, t.variant): t for t in TEMPLATES}


def template(task: Task, variant: str = "") -> Template:
    return _BY_KEY[(task, variant)]


# slot codecs ---------------------------------------------------------------

NONE_TEXT = "none"


def format_history(pairs: Iterable[tuple[Behavior, Sid]]) -> str:
    return ", ".join(f"({b.label}, {sid.to_text()})" for b, sid in pairs) or NONE_TEXT


_PAIR_RE = re.compile(r"\((\w+), (<sid_begin>.*?<sid_end>)\)")


def parse_history(text: str) -> list[tuple[Behavior, Sid]]:
    if text == NONE_TEXT:
        return []
    pairs = [(Behavior.parse(b), Sid.parse(s)) for b, s in _PAIR_RE.findall(text)]
    if format_history(pairs) != text:
        raise ValueError("history text does not parse cleanly")
    return pairs


def format_sid_list(sids: Sequence[Sid], sep: str) -> str:
    return sep.join(s.to_text() for s in sids) or NONE_TEXT


def parse_sid_list(text: str) -> list[Sid]:
    if text.strip() == NONE_TEXT:
        return []
    sids, bad = find_sids(text)
    if bad:
        raise ValueError(f"{bad} malformed sids in list")
    return sids


def format_role_lines(pairs: Sequence[tuple[Sid, FunctionalRole]]) -> str:
    return "\n".join(f"{sid.to_text()} | {role.to_text()}" for sid, role in pairs) or NONE_TEXT


def parse_role_lines(text: str, sep: str = "\n") -> list[tuple[Sid, FunctionalRole]]:
    if text.strip() == NONE_TEXT:
        return []
    out = []
    for line in text.split(sep):
        sid, _, role = line.partition(" | ")
        out.append((Sid.parse(sid), FunctionalRole.parse(role)))
    return out


@dataclass(frozen=True)
class ThinkContent:
    """Structured reasoning: interest profile, key items with roles, then the target role."""

    profile: InterestProfile
    key_roles: tuple[tuple[Sid, FunctionalRole], ...]
    target_role: FunctionalRole

    def to_text(self) -> str:
        keys = format_role_lines(self.key_roles)
        return (
            f"Step 1 - Interest profile: {self.profile.to_text()}\n"
            f"Step 2 - Key items and roles:\n{keys}\n"
            f"Step 3 - Target role: {self.target_role.to_text()}"
        )

    @classmethod
    def parse(cls, text: str) -> "ThinkContent":
        m = _THINK_RE.fullmatch(text)
        if m is None:
            raise ValueError("think content does not follow the three-step layout")
        return cls(
            InterestProfile.parse(m.group("profile")),
            tuple(parse_role_lines(m.group("keys"))),
            FunctionalRole.parse(m.group("target")),
        )


_THINK_RE = re.compile(
    r"Step 1 - Interest profile: (?P<profile>[^\n]*)\n"
    r"Step 2 - Key items and roles:\n(?P<keys>.*?)\n"
    r"Step 3 - Target role: (?P<target>[^\n]*)",
    re.DOTALL,
)


# parsing -------------------------------------------------------------------


@dataclass(frozen=True)
class ParsedRecord:
    task: Task
    variant: str
    slots: dict[str, str]


def parse_record(rec: PromptRecord) -> ParsedRecord:
    for t in TEMPLATES:
        if t.task is rec.task:
            slots = t.match(rec)
            if slots is not None:
                return ParsedRecord(rec.task, t.variant, slots)
    raise ValueError(f"{rec.task.value} record does not match any template")


def parse_frcot_target(target: str) -> tuple[ThinkContent, Sid]:
    if target.count("<think>") != 1 or target.count("</think>") != 1:
        raise ValueError("target needs exactly one think span")
    m = re.fullmatch(r"<think>(.*)</think>(.*)", target, re.DOTALL)
    if m is None:
        raise ValueError("target must open with the think span")
    return ThinkContent.parse(m.group(1)), Sid.parse(m.group(2))


# builders ------------------------------------------------------------------


def _sid(sid_map: Mapping[str, Sid], item_id: str) -> Sid:
    try:
        return sid_map[item_id]
    except KeyError:
        raise KeyError(f"item {item_id} has no semantic id") from None


def history_pairs(seq: UserSequence, sid_map: Mapping[str, Sid]) -> list[tuple[Behavior, Sid]]:
    return [(x.behavior, _sid(sid_map, x.item_id)) for x in seq]


def build_alignment_records(catalog: Mapping[str, Item], sid_map: Mapping[str, Sid]) -> list[PromptRecord]:
    out = []
    for item in catalog.values():
        sid = _sid(sid_map, item.item_id).to_text()
        path = item.category_text
        out.append(template(Task.ITEM_INDEXING).render(title=item.title, price=str(item.price), category_path=path, sid=sid))
        out.append(template(Task.ITEM_PROFILE_TITLE).render(sid=sid, title=item.title))
        out.append(template(Task.ITEM_PROFILE_CATEGORY).render(sid=sid, category_path=path))
    return out


def _key_roles(trajectory: RoleTrajectory, sid_map: Mapping[str, Sid]) -> list[tuple[Sid, FunctionalRole]]:
    return [(_sid(sid_map, i), r) for i, r in trajectory.entries]


def build_think(
    profile: InterestProfile, trajectory: RoleTrajectory, sid_map: Mapping[str, Sid], target_role: FunctionalRole
) -> ThinkContent:
    return ThinkContent(profile, tuple(_key_roles(trajectory, sid_map)), target_role)


def build_frcot_record(
    seq: UserSequence,
    sid_map: Mapping[str, Sid],
    profile: InterestProfile,
    trajectory: RoleTrajectory,
    target_item: str,
    target_role: FunctionalRole,
    target_behavior: str = "purchase",
) -> PromptRecord:
    if target_item in seq.item_ids:
        raise ValueError(f"target {target_item} already appears in the history of {seq.user_id}")
    think = build_think(profile, trajectory, sid_map, target_role)
    return template(Task.FR_COT).render(
        target_behavior=target_behavior,
        profile=seq.profile_text,
        history=format_history(history_pairs(seq, sid_map)),
        think=think.to_text(),
        sid=_sid(sid_map, target_item).to_text(),
    )


def build_stepwise_records(
    seq: UserSequence,
    sid_map: Mapping[str, Sid],
    catalog: Mapping[str, Item],
    trajectory: RoleTrajectory,
    target_item: str,
    target_role: FunctionalRole,
    target_behavior: str = "purchase",
) -> list[PromptRecord]:
    """Key-item extraction, role labelling and joint reasoning, plus the two plain next-item tasks."""
    common = {
        "target_behavior": target_behavior,
        "profile": seq.profile_text,
        "history": format_history(history_pairs(seq, sid_map)),
    }
    key_roles = _key_roles(trajectory, sid_map)
    key_sids = [s for s, _ in key_roles]
    sid = _sid(sid_map, target_item).to_text()
    return [
        template(Task.SUB_KEY_ITEMS).render(**common, key_items=format_sid_list(key_sids, "\n")),
        template(Task.SUB_ROLE_INTERPRET).render(
            **common, key_items=format_sid_list(key_sids, " "), roles=format_role_lines(key_roles)
        ),
        template(Task.SUB_JOINT_REASON).render(
            **common,
            key_items=format_sid_list(key_sids, " "),
            roles="; ".join(r.to_text() for r in trajectory.roles) or NONE_TEXT,
            target_role=target_role.to_text(),
            sid=sid,
        ),
        template(Task.STANDARD_NEXT_ITEM, "sid").render(**common, sid=sid),
        template(Task.STANDARD_NEXT_ITEM, "title").render(**common, title=catalog[target_item].title),
    ]


def build_reflection_record(
    seq: UserSequence,
    sid_map: Mapping[str, Sid],
    reasoner_candidates: Sequence[Sid],
    backbone_candidates: Sequence[Sid],
    truth_item: str,
) -> PromptRecord:
    return template(Task.REFLECTION).render(
        profile=seq.profile_text,
        history=format_history(history_pairs(seq, sid_map)),
        reasoner_candidates=format_sid_list(reasoner_candidates, " "),
        backbone_candidates=format_sid_list(backbone_candidates, " "),
        sid=_sid(sid_map, truth_item).to_text(),
    )


def recover_item_ids(
    rec: PromptRecord, catalog: Mapping[str, Item], sid_map: Mapping[str, Sid]
) -> list[str]:
    """Catalog items consistent with an alignment record (several when sids collide)."""
    parsed = parse_record(rec)
    s = parsed.slots
    if parsed.task is Task.ITEM_INDEXING:
        return [
            i for i, it in catalog.items()
            if it.title == s["title"] and str(it.price) == s["price"] and it.category_text == s["category_path"]
        ]
    sid = Sid.parse(s["sid"])
    ids = [i for i, v in sid_map.items() if v == sid]
    if parsed.task is Task.ITEM_PROFILE_TITLE:
        return [i for i in ids if catalog[i].title == s["title"]]
    if parsed.task is Task.ITEM_PROFILE_CATEGORY:
        return [i for i in ids if catalog[i].category_text == s["category_path"]]
    raise ValueError(f"{parsed.task.value} is not an alignment record")


def write_records(records: Iterable[PromptRecord]) -> Iterator[str]:
    for r in records:
        yield r.to_line()


def read_records(lines: Iterable[str]) -> list[PromptRecord]:
    return [PromptRecord.from_json(json.loads(line)) for line in lines if line.strip()]
