"""Dual-flow vs merged evaluation on many random blocks; prints the worst deviation per kernel size."""

import argparse

import numpy as np
import torch

from hsiseg.cbrn import EVAL
from hsiseg.dualflow import merged_unit, random_block


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--blocks", type=int, default=100)
    parser.add_argument("--inputs", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--float32", action="store_true")
    args = parser.parse_args()

    dtype = torch.float32 if args.float32 else torch.float64
    g = torch.Generator().manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    worst = {1: 0.0, 3: 0.0}
    for i in range(args.blocks):
        c_in, c_out = (int(v) for v in rng.integers(1, 33, size=2))
        k = (1, 3)[i % 2]
        block = random_block(c_in, c_out, k, g, dtype=dtype)
        unit = merged_unit(block)
        z = torch.randn(args.inputs, c_in, 8, 8, generator=g, dtype=dtype)
        with torch.no_grad():
            worst[k] = max(worst[k], (block(z, EVAL) - unit(z, EVAL)).abs().max().item())
    for k, v in worst.items():
        print(f"kernel {k}x{k}: max |dual - merged| = {v:.3e}")


if __name__ == "__main__":
    main()
