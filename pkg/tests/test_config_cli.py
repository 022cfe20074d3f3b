import json
import os

import pytest

from dormantrec.cli import atomic_path, main, write_lines
from dormantrec.config import ConfigError, RunConfig, apply_override, load_config, to_dict
from dormantrec.cotrain import FeedbackSource

TINY = """\
seed: 3
experiment:
  world: {n_categories: 8, items_per_category: 20, n_users: 240}
  codebook: {size: 8, iters: 10}
  backbone: {d_model: 16, n_layers: 1, n_heads: 2, max_items: 8, epochs: 1, batch_size: 64}
  warm_epochs: 1
  eval_beam: 20
  exposure_k: 20
loop: {rounds: 2, users_per_round: 8, backbone_beam: 16, finetune_epochs: 1}
"""

STAGES = ("gen-world", "build-codebook", "label-roles", "emit-sft", "reason", "train-backbone", "infer", "evaluate")


def run(capsys, *argv):
    code = main([*argv, "--log-level", "WARNING"])
    out, err = capsys.readouterr()
    return code, out, err


def error_record(err):
    lines = [ln for ln in err.splitlines() if ln.strip()]
    assert len(lines) == 1
    return json.loads(lines[0])


def snapshot(root):
    files = {}
    for d, _, names in os.walk(root):
        for n in names:
            p = os.path.join(d, n)
            with open(p, "rb") as fh:
                files[os.path.relpath(p, root)] = fh.read()
    return files


# ---------------------------------------------------------------- config

def test_defaults_and_seed_propagation():
    rc = load_config(seed=7)
    assert rc.seed == 7
    assert rc.experiment.seed == rc.experiment.world.seed == rc.experiment.backbone.seed == rc.loop.seed == 7
    assert isinstance(rc, RunConfig)


def test_dotted_overrides_parse_as_yaml():
    rc = load_config(overrides=["experiment.backbone.d_model=32", "loop.feedback=LogReplay", "experiment.graph_source=mined"])
    assert rc.experiment.backbone.d_model == 32
    assert rc.loop.feedback is FeedbackSource.LOG_REPLAY
    assert rc.graph_path() == rc.paths.mined_graph


def test_partial_section_keeps_other_defaults():
    full = load_config()
    rc = load_config(overrides=["experiment.backbone.d_model=32"])
    assert rc.experiment.backbone.min_lr_ratio == full.experiment.backbone.min_lr_ratio
    assert rc.experiment.backbone.epochs == full.experiment.backbone.epochs


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="experiment.backbone.width"):
        load_config(overrides=["experiment.backbone.width=3"])
    with pytest.raises(ConfigError, match="key=value"):
        apply_override({}, "no-equals")


def test_config_round_trips_through_yaml(tmp_path):
    import yaml

    rc = load_config(overrides=["experiment.eval_beam=50"], seed=4)
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(to_dict(rc)))
    assert load_config(str(path)) == rc


def test_shipped_config_loads():
    here = os.path.dirname(__file__)
    rc = load_config(os.path.join(here, "..", "configs", "default.yaml"))
    assert rc == load_config(seed=rc.seed)


def test_paths_resolve_against_out_dir():
    p = load_config().paths.resolve("/x")
    assert p.catalog == "/x/world/catalog.jsonl"
    assert p.graph == ""


# ---------------------------------------------------------------- atomic writes

def test_failed_write_leaves_target_untouched(tmp_path):
    target = tmp_path / "a.jsonl"
    target.write_text("old\n")

    def lines():
        yield "new"
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        write_lines(str(target), lines())
    assert target.read_text() == "old\n"
    assert os.listdir(tmp_path) == ["a.jsonl"]


def test_atomic_path_creates_directories(tmp_path):
    target = tmp_path / "deep" / "x.txt"
    with atomic_path(str(target)) as tmp:
        with open(tmp, "w") as fh:
            fh.write("ok")
        assert not target.exists()
    assert target.read_text() == "ok"


# ---------------------------------------------------------------- subcommands

def test_missing_catalog_names_the_path(tmp_path, capsys):
    code, _, err = run(capsys, "build-codebook", "--out-dir", str(tmp_path))
    assert code != 0
    rec = error_record(err)
    assert rec["status"] == "error" and rec["command"] == "build-codebook"
    assert rec["path"] == os.path.join(str(tmp_path), "world/catalog.jsonl")
    assert rec["path"] in rec["message"]


def test_bad_usage_is_one_json_line(capsys):
    code, _, err = run(capsys, "not-a-command")
    assert code != 0
    assert error_record(err)["error"] == "UsageError"


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(capsys, "gen-world", "--config", str(tmp_path / "nope.yaml"))
    assert code != 0
    assert error_record(err)["path"].endswith("nope.yaml")


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    out = root / "out"
    for stage in STAGES:
        assert main([stage, "--config", str(cfg), "--out-dir", str(out), "--log-level", "WARNING"]) == 0, stage
    return cfg, out


def test_pipeline_writes_declared_outputs(pipeline_dir):
    _, out = pipeline_dir
    for rel in (
        "world/catalog.jsonl", "codebook/codebook.npz", "codebook/sids.jsonl", "roles/oracle.jsonl",
        "datasets/sft.jsonl", "reasoner/outputs.jsonl", "checkpoints/guided.pt",
        "inference/guided.jsonl", "reports/metrics.json",
    ):
        assert (out / rel).stat().st_size > 0, rel
    assert not [n for n in snapshot(out) if os.path.basename(n).startswith(".tmp-")]


def test_evaluate_twice_gives_identical_reports(pipeline_dir, capsys):
    cfg, out = pipeline_dir
    first = (out / "reports/metrics.json").read_bytes()
    before = snapshot(out)
    code, text, _ = run(capsys, "evaluate", "--config", str(cfg), "--out-dir", str(out))
    assert code == 0
    assert "HI" in text and "guided" in text
    after = snapshot(out)
    assert (out / "reports/metrics.json").read_bytes() == first
    assert after == before


def test_cotrain_subcommand(pipeline_dir, capsys):
    cfg, out = pipeline_dir
    inputs = {k: v for k, v in snapshot(out).items() if not k.startswith(("reports", "datasets"))}
    code, _, _ = run(capsys, "cotrain", "--config", str(cfg), "--out-dir", str(out))
    assert code == 0
    rounds = [json.loads(ln) for ln in (out / "reports/cotrain.jsonl").read_text().splitlines()]
    assert len(rounds) == 2
    sft = (out / "datasets/sft.jsonl").read_text().splitlines()
    both = (out / "datasets/sft_with_reflection.jsonl").read_text().splitlines()
    assert len(both) == len(sft) + sum(r["n_reflections"] for r in rounds)
    assert {k: v for k, v in snapshot(out).items() if k in inputs} == inputs


def test_world_regeneration_is_idempotent(pipeline_dir, capsys):
    cfg, out = pipeline_dir
    before = {k: v for k, v in snapshot(out).items() if k.startswith("world")}
    assert run(capsys, "gen-world", "--config", str(cfg), "--out-dir", str(out))[0] == 0
    assert {k: v for k, v in snapshot(out).items() if k.startswith("world")} == before
