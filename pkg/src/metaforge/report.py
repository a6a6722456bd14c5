"""Report rendering: delimited table, aligned text, JSON, and figures.

This is the only module that touches matplotlib, and only through the Agg
backend, so report generation works headless and the rest of the library
never pays the import.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .dataio import FormatError
from .evalkit import RunReport, aggregate, render_table

CSV_COLUMNS = ["task", "method", "encoder_mode", "trials", "train_size",
               "wall_seconds", "nmse_mean", "nmse_variance"]


def collect_reports(paths: list[Path]) -> tuple[list[RunReport], list[Path]]:
    """Gather RunReports from run directories or run_report.json files.

    Returns the reports plus any train_log.jsonl files found next to them.
    """
    reports: list[RunReport] = []
    logs: list[Path] = []
    for p in paths:
        report_file = p / "run_report.json" if p.is_dir() else p
        if not report_file.exists():
            raise FormatError(f"no run report at {report_file}")
        try:
            payload = json.loads(report_file.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"{report_file} is not valid JSON: {e}") from e
        if isinstance(payload, dict):
            payload = [payload]
        for entry in payload:
            try:
                reports.append(RunReport.from_dict(entry))
            except TypeError as e:
                raise FormatError(f"{report_file}: bad report entry: {e}") from e
        log = report_file.parent / "train_log.jsonl"
        if log.exists():
            logs.append(log)
    return reports, logs


def _nmse_figure(agg: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = agg["rows"]
    tasks = sorted({r["task"] for r in rows})
    methods = sorted({(r["method"], r["encoder_mode"]) for r in rows})
    fig, ax = plt.subplots(figsize=(max(6, 2 * len(tasks)), 4))
    width = 0.8 / max(1, len(methods))
    for j, (method, enc) in enumerate(methods):
        xs, ys, errs = [], [], []
        for i, task in enumerate(tasks):
            match = [r for r in rows
                     if r["task"] == task and r["method"] == method
                     and r["encoder_mode"] == enc]
            if not match:
                continue
            xs.append(i + j * width)
            ys.append(match[0]["nmse_mean"])
            errs.append(match[0]["nmse_variance"])
        ax.bar(xs, ys, width=width, yerr=errs, capsize=3, label=f"{method} ({enc})")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(tasks))])
    ax.set_xticklabels(tasks)
    ax.set_ylabel("NMSE (mean, whisker = variance)")
    ax.set_title("NMSE by task and method")
    ax.axhline(1.0, color="grey", linestyle=":", linewidth=1)
    if methods:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _curves_figure(logs: list[Path], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for log in logs:
        epochs, losses = [], []
        for line in log.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            epochs.append(row["epoch"])
            losses.append(row["mean_query_loss"])
        if epochs:
            ax.plot(epochs, losses, label=log.parent.name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean query loss")
    ax.set_title("Training curves")
    if logs:
        ax.legend(fontsize=8)
    else:
        ax.text(0.5, 0.5, "no training logs found", ha="center", va="center",
                transform=ax.transAxes)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(run_paths: list[Path], out_dir: Path) -> list[Path]:
    """Aggregate reports and write JSON, CSV, text, and figure files."""
    reports, logs = collect_reports(run_paths)
    agg = aggregate(reports)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    jpath = out_dir / "report.json"
    jpath.write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(jpath)

    cpath = out_dir / "report.csv"
    with open(cpath, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in agg["rows"]:
            writer.writerow({k: row[k] for k in CSV_COLUMNS})
    written.append(cpath)

    tpath = out_dir / "report.txt"
    tpath.write_text(render_table(agg), encoding="utf-8")
    written.append(tpath)

    fig1 = out_dir / "nmse_comparison.png"
    _nmse_figure(agg, fig1)
    written.append(fig1)

    fig2 = out_dir / "training_curves.png"
    _curves_figure(logs, fig2)
    written.append(fig2)

    return written
