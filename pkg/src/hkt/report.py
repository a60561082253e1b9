"""Comparison tables over completed run directories."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .experiment import (MANIFEST, config_from_run, data_key, load_data, median_inference_seconds,
                         read_manifest)
from .plotting import render_figures
from .train import accuracy_native, read_metrics

log = logging.getLogger(__name__)

ROW_ORDER = ("parent", "solo", "kd", "hkt")
CSV_COLUMNS = ("method", "runs", "val_acc_mean", "val_acc_std", "param_count", "infer_us_per_sample",
               "best_accuracy", "fewest_params", "fastest")


class IncompleteRun(Exception):
    pass


@dataclass
class RunSummary:
    run_dir: Path
    method: str
    seed: int
    param_count: int
    val_acc_native: float
    val_acc_fused: float | None
    infer_us: float
    curve: list = field(default_factory=list)


@dataclass
class MethodRow:
    method: str
    runs: int
    acc_mean: float
    acc_std: float
    param_count: str
    infer_us: float
    winners: set = field(default_factory=set)


@dataclass
class Report:
    rows: list
    runs: list
    skipped: list
    files: dict = field(default_factory=dict)

    def markdown(self) -> str:
        return render_markdown(self.rows, self.runs, self.skipped)


def _float(text):
    return float(text) if text not in ("", None) else None


def expand_run_dirs(dirs) -> list:
    """Run directories, with compare outputs replaced by the runs they list."""
    out = []
    for d in map(Path, dirs):
        manifest = d / MANIFEST
        if manifest.is_file():
            m = read_manifest(manifest)
            if m.get("mode") == "compare" and m.get("runs"):
                if (d / "parent" / MANIFEST).is_file():
                    out.append(d / "parent")
                out.extend(d / r for r in m["runs"].split(","))
                continue
        out.append(d)
    return out


def summarize_run(run_dir, repeats: int = 5, data_cache: dict | None = None) -> RunSummary:
    """Headline numbers for one training run; raises IncompleteRun with the reason.

    Accuracy is measured by evaluating the run's exported checkpoint on the
    regenerated validation set, not copied from the manifest.
    """
    run_dir = Path(run_dir)
    if not (run_dir / MANIFEST).is_file():
        raise IncompleteRun("no manifest")
    m = read_manifest(run_dir)
    if m.get("status") != "complete":
        raise IncompleteRun(f"status is {m.get('status', 'missing')!r}")
    if "best_val_acc_native" not in m or "checkpoint" not in m:
        raise IncompleteRun(f"mode {m.get('mode')!r} is not a training run")
    ckpt = run_dir / m["checkpoint"]
    if not ckpt.is_file():
        raise IncompleteRun(f"checkpoint {ckpt.name} is missing")
    net = load_checkpoint(ckpt)
    cfg = config_from_run(run_dir)
    key = data_key(cfg)
    cache = data_cache if data_cache is not None else {}
    if key not in cache:
        cache[key] = load_data(cfg)[1]
    val = cache[key]
    acc = accuracy_native(net, val)
    seconds = median_inference_seconds(net, val.inputs, repeats)
    curve = [(int(r["step"]), float(r["val_acc_native"]))
             for r in read_metrics(run_dir / "metrics.csv") if r["val_acc_native"]]
    return RunSummary(run_dir, m.get("method", "?"), int(m.get("seed", 0)), net.param_count(), acc,
                      _float(m.get("final_val_acc_fused")), seconds / len(val) * 1e6, curve)


def collect_runs(dirs, repeats: int = 5):
    """(summaries, skipped) where skipped holds (directory, reason) pairs."""
    runs, skipped, cache = [], [], {}
    for d in expand_run_dirs(dirs):
        try:
            runs.append(summarize_run(d, repeats, cache))
        except IncompleteRun as exc:
            log.warning("skipping %s: %s", d, exc)
            skipped.append((str(d), str(exc)))
    return runs, skipped


def aggregate(runs) -> list:
    """One row per method (parent first) with winner flags per column."""
    methods = sorted({r.method for r in runs},
                     key=lambda m: (ROW_ORDER.index(m) if m in ROW_ORDER else len(ROW_ORDER), m))
    rows = []
    for method in methods:
        group = [r for r in runs if r.method == method]
        accs = np.array([r.val_acc_native for r in group])
        counts = sorted({r.param_count for r in group})
        rows.append(MethodRow(
            method=method, runs=len(group), acc_mean=float(accs.mean()),
            acc_std=float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
            param_count="/".join(map(str, counts)),
            infer_us=float(np.mean([r.infer_us for r in group])),
        ))
    if rows:
        best = max(r.acc_mean for r in rows)
        fewest = min(int(r.param_count.split("/")[0]) for r in rows)
        fastest = min(r.infer_us for r in rows)
        for r in rows:
            if r.acc_mean == best:
                r.winners.add("accuracy")
            if int(r.param_count.split("/")[0]) == fewest:
                r.winners.add("params")
            if r.infer_us == fastest:
                r.winners.add("time")
    return rows


def _mark(text: str, win: bool) -> str:
    return f"**{text}**" if win else text


def render_markdown(rows, runs=(), skipped=()) -> str:
    lines = [
        "| method | runs | native val acc (mean ± std) | params | inference us/sample |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r.method} | {r.runs} | {_mark(f'{r.acc_mean:.4f} ± {r.acc_std:.4f}', 'accuracy' in r.winners)} "
            f"| {_mark(r.param_count, 'params' in r.winners)} | {_mark(f'{r.infer_us:.3f}', 'time' in r.winners)} |"
        )
    seeds = sorted({r.seed for r in runs if r.method != "parent"})
    methods = [r.method for r in rows if r.method != "parent"]
    if len(seeds) > 1 and len(methods) > 1:
        by = {(r.method, r.seed): r.val_acc_native for r in runs}
        lines += ["", "| seed | " + " | ".join(methods) + " |", "|---" * (len(methods) + 1) + "|"]
        for s in seeds:
            cells = [f"{by[(m, s)]:.4f}" if (m, s) in by else "-" for m in methods]
            lines.append(f"| {s} | " + " | ".join(cells) + " |")
    for d, reason in skipped:
        lines.append(f"\nskipped {d}: {reason}")
    return "\n".join(lines) + "\n"


def write_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.method, r.runs, repr(r.acc_mean), repr(r.acc_std), r.param_count, repr(r.infer_us),
                        int("accuracy" in r.winners), int("params" in r.winners), int("time" in r.winners)])
    return path


def build_report(dirs, out_dir=None, figures: bool = True, repeats: int = 5) -> Report:
    """Summarise ``dirs``; with ``out_dir`` also write report.md, report.csv and figures."""
    runs, skipped = collect_runs(dirs, repeats)
    report = Report(aggregate(runs), runs, skipped)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.md").write_text(report.markdown())
        report.files["markdown"] = str(out_dir / "report.md")
        report.files["csv"] = str(write_csv(report.rows, out_dir / "report.csv"))
        if figures and runs:
            report.files.update(render_figures(report, out_dir))
    return report
