"""Side-by-side comparison of finished runs: markdown table, JSON and a Dice-vs-stage plot."""

from __future__ import annotations

import json
from pathlib import Path

from .stagerunner import RunReport

STRUCTURES = (1, 2, 3)
COLUMNS = ("Mean",) + tuple(f"S{c}" for c in STRUCTURES)


def load_runs(run_dirs) -> list[RunReport]:
    reports = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        if not path.exists():
            raise FileNotFoundError(f"{d} has no report.json (run not completed)")
        reports.append(RunReport.from_dict(json.loads(path.read_text())))
    hashes = {r.benchmark_hash for r in reports}
    if len(hashes) > 1:
        raise ValueError("runs were produced on different benchmarks: " + ", ".join(sorted(hashes)))
    return reports


def _fmt(v, scale=1.0):
    return "n/a" if v is None else f"{v * scale:.2f}"


def table_rows(report: RunReport) -> tuple[list, list]:
    fin = report.final
    dice = [fin.mean_dice] + [fin.category_dice.get(c) for c in STRUCTURES]
    hd = [fin.mean_hd] + [fin.category_hd.get(c) for c in STRUCTURES]
    return dice, hd


def render_table(reports: list[RunReport]) -> str:
    header = "| Method | " + " | ".join(f"Dice {c}" for c in COLUMNS) + " | " + \
        " | ".join(f"HD {c}" for c in COLUMNS) + " |"
    sep = "|" + "---|" * (1 + 2 * len(COLUMNS))
    lines = [header, sep]
    for r in reports:
        dice, hd = table_rows(r)
        cells = [_fmt(v, 100.0) for v in dice] + [_fmt(v) for v in hd]
        lines.append(f"| {r.method} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def comparison(reports: list[RunReport]) -> dict:
    out = {"benchmark_hash": reports[0].benchmark_hash, "columns": list(COLUMNS), "methods": {}}
    for r in reports:
        dice, hd = table_rows(r)
        out["methods"][r.method] = {
            "dice": dict(zip(COLUMNS, dice)),
            "hd": dict(zip(COLUMNS, hd)),
            "dice_by_stage": [m.mean_dice for m in r.stage_metrics],
            "param_counts": r.param_counts,
        }
    return out


def plot_dice_curves(reports: list[RunReport], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for r in reports:
        ys = [m.mean_dice for m in r.stage_metrics]
        ax.plot(range(len(ys)), ys, marker="o", label=r.method)
    ax.set_xlabel("stage")
    ax.set_ylabel("mean Dice (structures seen so far)")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # no Software tag so reruns are byte-identical
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def write_report(reports: list[RunReport], out_dir) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(reports)
    (out / "table.md").write_text(table)
    (out / "comparison.json").write_text(json.dumps(comparison(reports), indent=2, sort_keys=True) + "\n")
    plot_dice_curves(reports, out / "dice_vs_stage.png")
    return table
