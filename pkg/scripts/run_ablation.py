"""Full configuration against the -cvpm, -svc and -attention ablations."""
import argparse
import json
import sys

import torch

from gsfuse.data import SyntheticSpec
from gsfuse.experiments import ABLATIONS, ablation, ablation_verdict
from gsfuse.trainer import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--iterations", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", nargs="+", default=list(ABLATIONS), choices=list(ABLATIONS))
    p.add_argument("--json", help="write results here")
    a = p.parse_args()
    torch.set_num_threads(1)

    def progress(tr, res):
        if tr.iteration % 250 == 0:
            print(f"  it {tr.iteration:5d} loss {res.loss:.4f}", file=sys.stderr, flush=True)

    results = ablation(a.runs, SyntheticSpec(seed=a.seed), TrainConfig(total_iterations=a.iterations, seed=a.seed),
                       progress)
    for r in results.values():
        print(r.line())
    if "full" in results and len(results) == 4:
        ok, within, above = ablation_verdict(results)
        print(f"full within 0.1 dB of every ablation: {within}; strictly above {above} of 3; verdict {'PASS' if ok else 'FAIL'}")
    if a.json:
        with open(a.json, "w") as f:
            json.dump({n: vars(r) for n, r in results.items()}, f, indent=2, default=str)


if __name__ == "__main__":
    main()
