"""Desk-scale forgetting experiment: every method on the seeded benchmark, then a comparison report.

    python scripts/run_forgetting_experiment.py --out runs/forgetting
    python scripts/run_forgetting_experiment.py --methods hsi,finetune --epochs 5 --n-train 50

Incremental methods share one stage-0 checkpoint (trained by the first of them).
"""

import argparse
import logging
import time
from pathlib import Path

from hsiseg.baselines import METHODS, get_variant
from hsiseg.checkpoint import load_checkpoint
from hsiseg.report import write_report
from hsiseg.stagerunner import default_protocol, run_protocol
from hsiseg.synthdata import BenchmarkConfig, make_benchmark
from hsiseg.training import set_determinism


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--methods", default=",".join(METHODS))
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--n-train", type=int, default=200)
    parser.add_argument("--n-test", type=int, default=80)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/forgetting")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    set_determinism()

    bc = BenchmarkConfig(master_seed=args.seed, n_train=args.n_train, n_test=args.n_test)
    bench = make_benchmark(bc)
    out = Path(args.out)
    stage0 = None
    reports = []
    for method in args.methods.split(","):
        start = time.perf_counter()
        cfg = default_protocol(bench, method, epochs=args.epochs, seed=args.seed, output_dir=str(out / method))
        joint = get_variant(method).joint
        rep = run_protocol(cfg, bench.test, stage0=None if joint else stage0,
                           full_train=bench.full_train(bc) if joint else None,
                           benchmark_hash=bench.config_hash)
        if not joint and stage0 is None:
            stage0 = load_checkpoint(out / method / "stage_0.ckpt")
        reports.append(rep)
        print(f"{method:<14} {time.perf_counter() - start:7.1f}s  mean Dice {rep.final.mean_dice:.4f}  "
              + "  ".join(f"S{c} {v:.4f}" for c, v in rep.final.category_dice.items()), flush=True)
    print(write_report(reports, out / "report"))


if __name__ == "__main__":
    main()
