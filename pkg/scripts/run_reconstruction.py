"""Scaled reconstruction of the synthetic scene with held-out evaluation."""
import argparse
import sys

import torch

from gsfuse.data import SyntheticSpec
from gsfuse.experiments import reconstruct
from gsfuse.trainer import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--iterations", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussians", type=int, default=150)
    p.add_argument("--cameras", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    a = p.parse_args()
    torch.set_num_threads(1)

    def progress(tr, res):
        if tr.iteration % 250 == 0:
            print(f"  it {tr.iteration:5d} loss {res.loss:.4f} gaussians {int(tr.model.alive.sum())}",
                  file=sys.stderr, flush=True)

    spec = SyntheticSpec(seed=a.seed, gaussians=a.gaussians, cameras=a.cameras, size=a.size)
    r = reconstruct("full", spec, TrainConfig(total_iterations=a.iterations, seed=a.seed), progress=progress)
    print(r.line())


if __name__ == "__main__":
    main()
