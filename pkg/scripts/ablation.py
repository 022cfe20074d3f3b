"""One-seed ablations: each variant is a list of config overrides applied to the defaults."""
import argparse
import json

from dormantrec.config import load_config
from dormantrec.pipeline import run_experiment

VARIANTS = {
    "default": [],
    "mined-graph": ["experiment.graph_source=mined"],
    "one-query": ["experiment.reason.n_queries=1"],
    "top-g-3": ["experiment.reason.top_g=3"],
    "guidance-5": ["experiment.backbone.guidance_n=5"],
    "flat-world": ["experiment.world.lapse_prob=0.0"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--only", nargs="*", help="variant names to run")
    args = ap.parse_args()
    for name, overrides in VARIANTS.items():
        if args.only and name not in args.only:
            continue
        cfg = load_config(overrides=overrides, seed=args.seed).experiment
        report = run_experiment(cfg).report
        m = report["metrics"]
        row = {
            "variant": name,
            "pop_hi10": m["popularity"]["HI"]["@10"],
            "plain_hi1": m["unguided"]["HI"]["@1"],
            "guided_hi1": m["guided"]["HI"]["@1"],
            "plain_hi10": m["unguided"]["HI"]["@10"],
            "guided_hi10": m["guided"]["HI"]["@10"],
            "reasoner_hi10": report["reasoner_hit@10"],
            "edges": report["n_graph_edges"],
        }
        print(json.dumps(row), flush=True)


if __name__ == "__main__":
    main()
