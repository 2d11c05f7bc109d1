"""FLOPs-to-target comparison tables and plottable series from metrics files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from eslm.metrics import RunMetrics, eval_events, flops_to_target, read_metrics


@dataclass
class RunSummary:
    name: str
    flops_to_target: float | None
    final_val_loss: float | None
    mean_selected_frac: float | None
    final_flops: float
    steps: int


def run_name(path) -> str:
    path = Path(path)
    return path.parent.name if path.name == "metrics.jsonl" else path.stem


def summarize(records: list[RunMetrics], name: str, target_loss: float) -> RunSummary:
    evals = eval_events(records)
    train = [r for r in records if r.event == "train"]
    return RunSummary(
        name=name,
        flops_to_target=flops_to_target(records, target_loss),
        final_val_loss=evals[-1].val_loss if evals else None,
        mean_selected_frac=float(np.mean([r.selected_frac for r in train])) if train else None,
        final_flops=records[-1].flops_cum if records else 0.0,
        steps=max((r.step for r in records), default=0),
    )


def load_runs(paths) -> dict[str, list[RunMetrics]]:
    runs: dict[str, list[RunMetrics]] = {}
    for p in paths:
        name = run_name(p)
        base, i = name, 2
        while name in runs:
            name = f"{base}#{i}"
            i += 1
        runs[name] = read_metrics(p)
    return runs


def default_target(runs: dict[str, list[RunMetrics]]) -> float:
    """Final validation loss of the first run."""
    first = next(iter(runs.values()))
    evals = eval_events(first)
    if not evals:
        raise ValueError("first run has no eval events; pass an explicit target")
    return evals[-1].val_loss


def format_table(summaries: list[RunSummary], target_loss: float) -> str:
    base = summaries[0].flops_to_target if summaries else None
    header = f"{'run':<28} {'flops_to_target':>16} {'vs_first':>9} {'final_val_loss':>15} {'mean_sel_frac':>14} {'steps':>7}"
    lines = [f"target val_loss <= {target_loss:.6g}", header, "-" * len(header)]
    for s in summaries:
        ftt = "not reached" if s.flops_to_target is None else f"{s.flops_to_target:.4e}"
        rel = f"{s.flops_to_target / base:.4f}" if s.flops_to_target is not None and base else "-"
        fvl = "-" if s.final_val_loss is None else f"{s.final_val_loss:.4f}"
        sel = "-" if s.mean_selected_frac is None else f"{s.mean_selected_frac:.4f}"
        lines.append(f"{s.name:<28} {ftt:>16} {rel:>9} {fvl:>15} {sel:>14} {s.steps:>7}")
    return "\n".join(lines) + "\n"


def series_csv(runs: dict[str, list[RunMetrics]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "step", "flops_cum", "val_loss", "alpha"])
    for name, records in runs.items():
        for r in eval_events(records):
            w.writerow([name, r.step, repr(r.flops_cum), repr(r.val_loss), repr(r.alpha)])
    return buf.getvalue()


def report(paths, target_loss: float | None = None) -> tuple[str, str, list[RunSummary]]:
    """Return (table text, series CSV, summaries) for the given metrics files."""
    if not paths:
        raise ValueError("report needs at least one metrics file")
    runs = load_runs(paths)
    target = default_target(runs) if target_loss is None else target_loss
    summaries = [summarize(recs, name, target) for name, recs in runs.items()]
    return format_table(summaries, target), series_csv(runs), summaries
