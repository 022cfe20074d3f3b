"""Command-line entry point: one subcommand per pipeline stage, all sharing one config file."""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
import tempfile
from typing import Callable, Iterable

from .backbone.search import beam_search, inference_lines
from .backbone.data import build_guidance, encode_examples
from .backbone.train import load_checkpoint, save_checkpoint
from .codebook import Codebook, assign_catalog, write_sid_map
from .config import RunConfig, build, load_config, to_dict
from .core import Catalog, UserSequence, ingest_interactions
from .cotrain import report_lines, run_loop
from .evalkit import dump_report
from .graph import CategoryGraph, mine_graph
from .pipeline import (
    Models,
    Prepared,
    assemble,
    build_codebook,
    dormant_outputs,
    eval_examples,
    score_models,
    train_models,
)
from .reasoner.counterfactual import GlobalRoleTable
from .reasoner.dataset import build_corpus
from .reasoner.mock import OracleTable, cache_line, read_cache, reason_user
from .reasoner.records import read_records, write_records
from .roles import role_dump_lines
from .synthworld import World, WorldConfig, WorldTruth, generate_world

log = logging.getLogger("dormantrec")

CHECKPOINTS = ("base", "unguided", "guided")


class MissingInput(FileNotFoundError):
    def __init__(self, path: str):
        super().__init__(f"missing input: {path}")
        self.path = path


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- file helpers

@contextlib.contextmanager
def atomic_path(path: str):
    """Yield a temp path beside ``path``; it replaces ``path`` only if the block succeeds."""
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_lines(path: str, lines: Iterable[str]) -> int:
    n = 0
    with atomic_path(path) as tmp, open(tmp, "w") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")
            n += 1
    return n


def write_text(path: str, text: str) -> None:
    with atomic_path(path) as tmp, open(tmp, "w") as fh:
        fh.write(text)


def read_lines(path: str) -> list[str]:
    with open(path) as fh:
        return fh.read().splitlines()


def require(*paths: str) -> None:
    for p in paths:
        if not os.path.exists(p):
            raise MissingInput(p)


# ---------------------------------------------------------------- artifact loading

def profile_lines(sequences: Iterable[UserSequence]) -> Iterable[str]:
    for s in sequences:
        yield json.dumps({"user_id": s.user_id, "profile_text": s.profile_text}, sort_keys=True)


def load_world(rc: RunConfig) -> World:
    p = rc.paths
    require(p.world_config, p.catalog, p.interactions, p.profiles, p.truth, p.planted_graph)
    with open(p.world_config) as fh:
        wcfg = build(WorldConfig, json.load(fh), "world")
    catalog = Catalog.from_jsonl(read_lines(p.catalog))
    seqs, report = ingest_interactions(read_lines(p.interactions), catalog, keep_view_rate=1.0)
    if report.rejects:
        line, why = report.rejects[0]
        raise ValueError(f"{p.interactions}:{line}: {why}")
    by_id = {s.user_id: s for s in seqs}
    ordered = []
    for line in read_lines(p.profiles):
        if line.strip():
            rec = json.loads(line)
            seq = by_id.get(rec["user_id"], UserSequence(rec["user_id"], ()))
            ordered.append(dataclasses.replace(seq, profile_text=rec["profile_text"]))
    graph = CategoryGraph.from_jsonl(read_lines(p.planted_graph))
    truth = WorldTruth.from_jsonl(read_lines(p.truth))
    return World(wcfg, catalog, ordered, graph, truth)


def with_world_config(rc: RunConfig, world: World) -> RunConfig:
    """The world on disk is authoritative for world parameters (dormancy window, clock)."""
    exp = dataclasses.replace(rc.experiment, world=world.config)
    return dataclasses.replace(rc, experiment=exp)


def load_graph(rc: RunConfig) -> CategoryGraph:
    path = rc.graph_path()
    require(path)
    return CategoryGraph.from_jsonl(read_lines(path))


def load_prepared(rc: RunConfig, with_roles: bool = True) -> tuple[RunConfig, Prepared]:
    world = load_world(rc)
    rc = with_world_config(rc, world)
    require(rc.paths.codebook)
    codebook = Codebook.load(rc.paths.codebook)
    graph = load_graph(rc)
    oracle = global_table = None
    if with_roles:
        require(rc.paths.oracle, rc.paths.global_roles)
        oracle = OracleTable.from_jsonl(read_lines(rc.paths.oracle))
        global_table = GlobalRoleTable.from_jsonl(read_lines(rc.paths.global_roles))
    return rc, assemble(rc.experiment, world, codebook, graph, oracle, global_table)


def checkpoint_path(rc: RunConfig, name: str) -> str:
    return os.path.join(rc.paths.checkpoints, f"{name}.pt")


def load_models(rc: RunConfig) -> Models:
    paths = [checkpoint_path(rc, n) for n in CHECKPOINTS]
    losses_path = os.path.join(rc.paths.checkpoints, "losses.json")
    require(*paths, losses_path)
    with open(losses_path) as fh:
        losses = json.load(fh)
    base, plain, guided = (load_checkpoint(p) for p in paths)
    return Models(base, plain, guided, losses["base"], losses["unguided"], losses["guided"])


def cached_outputs(rc: RunConfig) -> dict | None:
    if os.path.exists(rc.paths.reasoner):
        return read_cache(read_lines(rc.paths.reasoner))
    return None


# ---------------------------------------------------------------- subcommands

def cmd_gen_world(rc: RunConfig, args) -> dict:
    world = generate_world(rc.experiment.world)
    p = rc.paths
    write_text(p.world_config, json.dumps(to_dict(world.config), sort_keys=True, indent=2) + "\n")
    write_lines(p.catalog, world.catalog.to_jsonl())
    n = write_lines(p.interactions, world.interaction_lines())
    write_lines(p.profiles, profile_lines(world.sequences))
    write_lines(p.truth, world.truth.to_jsonl())
    write_lines(p.planted_graph, world.graph.to_jsonl())
    return {"items": len(world.catalog), "users": len(world.sequences), "interactions": n, "edges": len(world.graph)}


def cmd_build_codebook(rc: RunConfig, args) -> dict:
    require(rc.paths.catalog)
    catalog = Catalog.from_jsonl(read_lines(rc.paths.catalog))
    cb = build_codebook(rc.experiment, catalog)
    sid_map, collisions = assign_catalog(cb, catalog)
    with atomic_path(rc.paths.codebook) as tmp:
        cb.save(tmp)
    write_lines(rc.paths.sids, write_sid_map(sid_map))
    summary = {
        "residual_energy": [round(e, 8) for e in cb.residual_energy],
        "collisions": collisions.n_collisions,
        "collision_histogram": {str(k): v for k, v in collisions.histogram().items()},
    }
    write_text(os.path.join(rc.paths.reports, "codebook.json"), dump_report(summary))
    return summary


def cmd_mine_graph(rc: RunConfig, args) -> dict:
    world = load_world(rc)
    graph = mine_graph(world.sequences, world.catalog, rc.experiment.mining)
    write_lines(rc.paths.mined_graph, graph.to_jsonl())
    return {"edges": len(graph)}


def cmd_label_roles(rc: RunConfig, args) -> dict:
    rc, prep = load_prepared(rc, with_roles=False)
    n = write_lines(rc.paths.roles, role_dump_lines(prep.labels[s.user_id] for s in prep.world.sequences))
    write_lines(rc.paths.oracle, prep.oracle.to_jsonl())
    write_lines(rc.paths.global_roles, prep.global_table.to_jsonl())
    return {"labelled_interactions": n, "global_roles": len(prep.global_table)}


def cmd_emit_sft(rc: RunConfig, args) -> dict:
    rc, prep = load_prepared(rc, with_roles=False)
    records, tally = build_corpus(
        prep.world.sequences, prep.catalog, prep.sid_map, prep.stats, prep.graph,
        rc.experiment.world.delta_t_days, rc.experiment.max_key_items, prep.intrinsic,
    )
    write_lines(os.path.join(rc.paths.datasets, "sft.jsonl"), write_records(records))
    return dataclasses.asdict(tally) | {"records": len(records)}


def cmd_reason(rc: RunConfig, args) -> dict:
    rc, prep = load_prepared(rc)
    by_id = prep.sequences
    outputs, queries = [], []
    for u in prep.dormant:
        out, qs = reason_user(prep.reasoner, prep.label(by_id[u]), prep.sid_map, prep.graph, prep.global_table, rc.experiment.reason)
        outputs.append(cache_line(u, out, rc.experiment.world.now_ts))
        queries.extend(json.dumps({"user_id": u, **q.to_record().to_json()}, sort_keys=True) for q in qs)
    write_lines(rc.paths.reasoner, outputs)
    write_lines(rc.paths.queries, queries)
    return {"users": len(outputs), "queries": len(queries)}


def cmd_train_backbone(rc: RunConfig, args) -> dict:
    rc, prep = load_prepared(rc)
    models = train_models(prep)
    for name in CHECKPOINTS:
        save_checkpoint(getattr(models, name), checkpoint_path(rc, name))
    losses = {"base": models.base_losses, "unguided": models.unguided_losses, "guided": models.guided_losses}
    write_text(os.path.join(rc.paths.checkpoints, "losses.json"), json.dumps(losses, sort_keys=True) + "\n")
    return {k: round(v[-1], 6) for k, v in losses.items()}


def cmd_infer(rc: RunConfig, args) -> dict:
    rc, prep = load_prepared(rc)
    models = load_models(rc)
    outputs = cached_outputs(rc) or dormant_outputs(prep)
    by_id = prep.sequences
    seqs = [by_id[u] for u in prep.dormant]
    targets = [prep.world.truth.users[u].next_items[0] for u in prep.dormant]
    cfg = rc.experiment
    guidance = [build_guidance(outputs[u].sids, cfg.backbone.guidance_n) for u in prep.dormant]
    for name, model, guide in (("unguided", models.unguided, None), ("guided", models.guided, guidance)):
        examples = eval_examples(prep, seqs, targets, guide)
        data = encode_examples(examples, cfg.backbone, use_guidance=guide is not None)
        hyps = beam_search(model, data, cfg.eval_beam)
        write_lines(os.path.join(rc.paths.inference, f"{name}.jsonl"), inference_lines(prep.dormant, hyps))
    return {"users": len(seqs), "beam": cfg.eval_beam}


def cmd_evaluate(rc: RunConfig, args) -> dict:
    rc, prep = load_prepared(rc)
    result = score_models(prep, load_models(rc), cached_outputs(rc))
    write_text(os.path.join(rc.paths.reports, "metrics.json"), dump_report(result.report))
    for name, report in result.metrics.items():
        print(report.table(name))
        print()
    return {"users": result.report["n_dormant"]}


def cmd_cotrain(rc: RunConfig, args) -> dict:
    rc, prep = load_prepared(rc)
    model = load_checkpoint(checkpoint_path(rc, args.start))
    state = run_loop(prep, model, rc.loop)
    write_lines(os.path.join(rc.paths.reports, "cotrain.jsonl"), report_lines(state))
    sft = os.path.join(rc.paths.datasets, "sft.jsonl")
    base = read_records(read_lines(sft)) if os.path.exists(sft) else []
    write_lines(os.path.join(rc.paths.datasets, "sft_with_reflection.jsonl"), write_records(base + state.reflections))
    return {"rounds": len(state.reports), "reflections": len(state.reflections)}


COMMANDS: dict[str, tuple[Callable, str]] = {
    "gen-world": (cmd_gen_world, "generate a synthetic world with planted roles and graph"),
    "build-codebook": (cmd_build_codebook, "train the residual codebook and assign item sids"),
    "mine-graph": (cmd_mine_graph, "mine the category relation graph from the logs"),
    "label-roles": (cmd_label_roles, "label functional roles and build the role tables"),
    "emit-sft": (cmd_emit_sft, "write the instruction-tuning records"),
    "reason": (cmd_reason, "run the mock reasoner for dormant users"),
    "train-backbone": (cmd_train_backbone, "pre-train and warm-start the backbones"),
    "infer": (cmd_infer, "beam-search candidates for dormant users"),
    "evaluate": (cmd_evaluate, "score popularity, unguided and guided retrieval"),
    "cotrain": (cmd_cotrain, "run the reason/execute/feedback/reflect loop"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out-dir", default=".", help="directory that relative artifact paths resolve against")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--log-level", default="INFO")
    parser = _Parser(prog="dormantrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "cotrain":
            p.add_argument("--start", choices=CHECKPOINTS, default="base", help="checkpoint the loop starts from")
    return parser


def _error_line(exc: BaseException, command: str | None) -> str:
    rec = {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc).replace("\n", " ")}
    path = getattr(exc, "path", None) or getattr(exc, "filename", None)
    if path:
        rec["path"] = os.fspath(path)
    return json.dumps(rec, sort_keys=True)


def main(argv: list[str] | None = None) -> int:
    command = None
    try:
        args = make_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(
            stream=sys.stderr, level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s"
        )
        rc = load_config(args.config, args.set, args.seed)
        rc = dataclasses.replace(rc, paths=rc.paths.resolve(args.out_dir))
        summary = COMMANDS[command][0](rc, args)
        log.info("%s done: %s", command, json.dumps(summary, sort_keys=True))
        return 0
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # every failure leaves exactly one parseable line
        if os.environ.get("DORMANTREC_TRACEBACK"):
            logging.getLogger("dormantrec").exception("failure")
        print(_error_line(exc, command), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
