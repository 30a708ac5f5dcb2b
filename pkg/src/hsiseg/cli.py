"""Command-line front door.

Subcommands: init, generate-data, run, evaluate, verify-merge, report.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import config as cfgmod
from .baselines import METHODS, get_variant
from .checkpoint import CheckpointError, load_checkpoint, network_from_checkpoint
from .dualflow import merged_unit, random_block
from .stagerunner import ProtocolConfig, ScheduleParams, StageSpec, evaluate_checkpoint, run_protocol
from .synthdata import load_dataset, read_benchmark, write_benchmark
from .training import set_determinism

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MERGE_TOL = 1e-5

log = logging.getLogger("hsiseg")


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_config(path) -> tuple[cfgmod.ExperimentConfig, bytes]:
    if path is None:
        return cfgmod.ExperimentConfig(), cfgmod.dumps(cfgmod.ExperimentConfig()).encode()
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc}", EXIT_CONFIG) from exc
    try:
        return cfgmod.loads(raw.decode()), raw
    except cfgmod.ConfigError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc


def cmd_init(args) -> int:
    out = Path(args.out or "config.yaml")
    if out.exists():
        raise CLIError(f"{out} already exists", EXIT_CONFIG)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(cfgmod.dumps(cfgmod.ExperimentConfig()))
    print(out)
    return EXIT_OK


def cmd_generate_data(args) -> int:
    cfg, _ = _load_config(args.config)
    if args.seed is not None:
        cfg.data.master_seed = args.seed
    out = Path(args.out or cfg.data.dir)
    manifest, wrote = write_benchmark(cfg.data.benchmark(), out)
    print(f"{'wrote' if wrote else 'unchanged'} {manifest}")
    return EXIT_OK


def protocol_from_config(cfg: cfgmod.ExperimentConfig, bench, method: str, out_dir) -> ProtocolConfig:
    tr = cfg.training
    stages = [StageSpec(t, t, [t + 1], bench.train[t], bench.val[t], tr.epochs, tr.batch_size, tr.lr, cfg.seed)
              for t in range(len(bench.train))]
    sc = cfg.schedule
    return ProtocolConfig(
        stages=stages,
        method=method,
        schedule=ScheduleParams(sc.lambda0, sc.k, sc.alpha0, sc.eta, sc.decay),
        network=cfg.network.build(),
        output_dir=str(out_dir),
        seed=cfg.seed,
        hd_percentile=cfg.metrics.hd_percentile,
        spacing=cfg.metrics.spacing,
    )


def cmd_run(args) -> int:
    cfg, raw = _load_config(args.config)
    method = args.method or cfg.method
    try:
        get_variant(method)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc
    if args.seed is not None:
        cfg.seed = args.seed
    run_dir = Path(args.out) if args.out else Path(cfg.out_dir) / method
    if (run_dir / "report.json").exists():
        raise CLIError(f"{run_dir} already holds a completed run", EXIT_CONFIG)
    try:
        bench = read_benchmark(cfg.data.dir)
    except (FileNotFoundError, KeyError, OSError) as exc:
        raise CLIError(f"benchmark not available: {exc}", EXIT_DATA) from exc

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_bytes(raw)
    (run_dir / "invocation.json").write_text(json.dumps(
        {"method": method, "seed": cfg.seed, "benchmark_hash": bench.config_hash}, indent=2, sort_keys=True) + "\n")
    protocol = protocol_from_config(cfg, bench, method, run_dir)
    full = bench_full_train(cfg, bench) if get_variant(method).joint else None
    set_determinism()
    try:
        report = run_protocol(protocol, bench.test, full_train=full, benchmark_hash=bench.config_hash)
    except FloatingPointError as exc:
        raise CLIError(f"numerical failure: {exc}", EXIT_NUMERIC) from exc
    print(f"{method}: mean Dice {report.final.mean_dice:.4f} -> {run_dir}")
    return EXIT_OK


def bench_full_train(cfg, bench):
    return bench.full_train(cfg.data.benchmark())


def cmd_evaluate(args) -> int:
    if not args.checkpoint or not args.data:
        raise CLIError("evaluate needs --checkpoint and --data", EXIT_CONFIG)
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CLIError(str(exc), EXIT_DATA) from exc
    data = Path(args.data)
    try:
        test = read_benchmark(data).test if data.is_dir() else load_dataset(data)
    except (FileNotFoundError, KeyError, OSError) as exc:
        raise CLIError(f"cannot read dataset {data}: {exc}", EXIT_DATA) from exc
    try:
        rep = evaluate_checkpoint(ckpt, test, ckpt.extra.get("method", ""))
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_DATA) from exc
    text = rep.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(f"mean Dice {rep.mean_dice:.4f}, mean HD {rep.mean_hd}")
    return EXIT_OK


def verify_blocks(blocks: dict, n_inputs: int = 100, seed: int = 0, corrupt: float = 0.0,
                  size: int = 8) -> list[dict]:
    """Max |dual eval - merged eval| per block over ``n_inputs`` random inputs."""
    g = torch.Generator().manual_seed(seed)
    rows = []
    for path, block in blocks.items():
        unit = merged_unit(block)
        if corrupt:
            with torch.no_grad():
                unit.conv.weight.add_(corrupt)
        dtype = block.weight_p.dtype
        worst = 0.0
        with torch.no_grad():
            for _ in range(n_inputs):
                z = torch.randn(1, block.weight_p.shape[1], size, size, generator=g, dtype=dtype)
                worst = max(worst, (unit(z, "eval") - block(z, "eval")).abs().max().item())
        rows.append({"layer": path, "max_abs_dev": worst, "pass": worst <= MERGE_TOL})
    return rows


def cmd_verify_merge(args) -> int:
    if args.checkpoint:
        try:
            ckpt = load_checkpoint(args.checkpoint)
        except CheckpointError as exc:
            raise CLIError(str(exc), EXIT_DATA) from exc
        if ckpt.form != "dual":
            raise CLIError(f"{args.checkpoint} is not a dual-form checkpoint", EXIT_DATA)
        net = network_from_checkpoint(ckpt).double()
        blocks = {p: u for p, u in net.units.items() if u.dual}
    else:
        g = torch.Generator().manual_seed(args.seed or 0)
        blocks = {f"random{i}_k{k}": random_block(c_in, c_out, k, g)
                  for i, (c_in, c_out, k) in enumerate([(1, 4, 3), (4, 8, 3), (8, 8, 1), (8, 3, 1)])}
    rows = verify_blocks(blocks, args.n_inputs, args.seed or 0, args.corrupt)
    worst = max(r["max_abs_dev"] for r in rows)
    ok = all(r["pass"] for r in rows)
    lines = [f"{'layer':<16} {'max |dev|':>12}  status"]
    lines += [f"{r['layer']:<16} {r['max_abs_dev']:>12.3e}  {'ok' if r['pass'] else 'FAIL'}" for r in rows]
    lines.append(f"overall max |dev| = {worst:.3e} (tolerance {MERGE_TOL:g}): {'PASS' if ok else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_report(args) -> int:
    from .report import load_runs, write_report

    if not args.runs:
        raise CLIError("report needs at least one run directory", EXIT_CONFIG)
    try:
        runs = load_runs(args.runs)
    except FileNotFoundError as exc:
        raise CLIError(str(exc), EXIT_DATA) from exc
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_DATA) from exc
    out = Path(args.out or "report")
    table = write_report(runs, out)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsiseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a full-defaults config template")
    p.add_argument("--out")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("generate-data", help="render the synthetic benchmark")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="overrides data.master_seed")
    p.add_argument("--out", help="overrides data.dir")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("run", help="run the incremental protocol for one method")
    p.add_argument("--config")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="score a checkpoint on a test split")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="benchmark directory or split archive")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify-merge", help="compare dual-flow and merged evaluation paths")
    p.add_argument("--checkpoint", help="dual-form checkpoint; random blocks when omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-inputs", type=int, default=100)
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_merge)

    p = sub.add_parser("report", help="comparison table and plots over finished runs")
    p.add_argument("runs", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
