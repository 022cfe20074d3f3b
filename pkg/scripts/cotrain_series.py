"""Per-round HI@K of the closed loop for several seeds."""
import argparse
import dataclasses
import time

from dormantrec.config import load_config
from dormantrec.cotrain import run_loop, series
from dormantrec.pipeline import prepare, train_models


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--start", choices=("base", "unguided", "guided"), default="base")
    args = ap.parse_args()

    for seed in args.seeds:
        rc = load_config(args.config, args.set, seed)
        start = time.perf_counter()
        prep = prepare(rc.experiment)
        model = getattr(train_models(prep), args.start)
        state = run_loop(prep, model, rc.loop)
        cells = " ".join(
            f"HI@{k} " + "/".join(f"{v:.4f}" for v in series(state, k)) for k in rc.loop.ks
        )
        counts = [dataclasses.astuple(r)[1:8] for r in state.reports]
        print(f"seed {seed}: {cells}  ({time.perf_counter() - start:.0f}s)", flush=True)
        print(f"    users/queries/cands/feedback/reflections/oracle/finetune per round: {counts}")


if __name__ == "__main__":
    main()
