"""Multi-seed planted-recovery run: popularity vs unguided vs guided on the default world."""
import argparse
import json
import time

from dormantrec.config import load_config
from dormantrec.pipeline import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", help="write one JSON report per line here")
    args = ap.parse_args()

    rows = []
    print(f"{'seed':>4} {'pop@10':>7} {'plain@10':>8} {'plain@1':>7} {'guided@1':>8} {'ood u/g':>13} {'tail':>6} {'sec':>5}")
    for seed in args.seeds:
        cfg = load_config(args.config, args.set, seed).experiment
        start = time.perf_counter()
        report = run_experiment(cfg).report
        sec = time.perf_counter() - start
        m = report["metrics"]
        ood = report["ood"]
        tail = min(report["exposure"], key=lambda b: b["bucket"])["ratio"]
        print(
            f"{seed:>4} {m['popularity']['HI']['@10']:>7.4f} {m['unguided']['HI']['@10']:>8.4f} "
            f"{m['unguided']['HI']['@1']:>7.4f} {m['guided']['HI']['@1']:>8.4f} "
            f"{ood['unguided_hs1@10']!s:>6}/{ood['guided_hs1@10']!s:<6} {tail!s:>6} {sec:>5.0f}",
            flush=True,
        )
        rows.append(report)
    if args.out:
        with open(args.out, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
