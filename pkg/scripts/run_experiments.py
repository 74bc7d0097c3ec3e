"""Run (or re-read from cache) the experiment-scale acceptance criteria.

    python3 scripts/run_experiments.py            # criteria 7-11
    python3 scripts/run_experiments.py --only 7 10
    python3 scripts/run_experiments.py --artifacts /tmp/art --distill-iters 200

Products are cached under ./artifacts (or $FLASHDISTILL_ARTIFACTS).
"""

import argparse
import dataclasses
import json
import sys
import time

import torch

from flashdistill.experiments import CRITERIA, ArtifactCache, ExperimentConfig, run_criterion


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--only", type=int, nargs="*", default=sorted(CRITERIA))
    p.add_argument("--artifacts", default=None)
    p.add_argument("--threads", type=int, default=1)
    for f in dataclasses.fields(ExperimentConfig):
        if f.name != "seeds":
            p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=None)
    p.add_argument("--seeds", type=int, nargs="*", default=None)
    args = p.parse_args()
    torch.set_num_threads(args.threads)

    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(ExperimentConfig)
                 if getattr(args, f.name) is not None}
    if "seeds" in overrides:
        overrides["seeds"] = tuple(overrides["seeds"])
    cfg = ExperimentConfig(**overrides)
    start = time.time()
    cache = ArtifactCache(args.artifacts, log=lambda m: print(f"[{time.time() - start:7.0f}s] {m}", flush=True))
    failed = 0
    for n in args.only:
        res = run_criterion(n, cfg, cache)
        print(f"{'PASS' if res.passed else 'FAIL'}  criterion {n:>2}  {res.title}: {res.detail}  [{res.seconds:.0f}s]", flush=True)
        failed += not res.passed
    print(json.dumps({"config": dataclasses.asdict(cfg), "failed": failed}, default=list))
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
