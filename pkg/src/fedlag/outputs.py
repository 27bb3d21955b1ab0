"""Result files: metrics.csv, gc_trace.json, summary.json, sweep.csv.

Everything here is written with LF endings, dot decimals, and repr floats,
so a rerun of the same experiment produces byte-identical metrics and
traces. Wall-clock timing therefore stays out of metrics.csv unless the
caller explicitly opts in; real timing always lands in summary.json.
"""

import csv
import json
import subprocess
from pathlib import Path

METRICS_HEADER = [
    "round", "mean_acc", "std_acc", "mean_loss", "global_loss",
    "selected_layers", "wall_ms",
]

SWEEP_HEADER = ["label", "mean_acc", "std_acc", "mean_loss", "global_loss", "pd"]


def _fmt(value):
    return repr(float(value))


def accuracy_deficit(reference_acc, acc):
    """How far `acc` falls short of the reference (0 when it matches)."""
    return reference_acc - acc


def write_metrics_csv(path, records, timing=False):
    """One row per round. wall_ms is 0 unless timing was requested."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in records:
            writer.writerow([
                r.round_index,
                _fmt(r.mean_acc),
                _fmt(r.std_acc),
                _fmt(r.mean_loss),
                _fmt(r.global_loss),
                ";".join(str(lid) for lid in r.selected),
                int(round(r.wall_ms)) if timing else 0,
            ])


def write_gc_trace(path, records, include_cosines=False):
    """JSON array of per-round conflict reports (rounds with >= 2 clients)."""
    trace = [
        r.report.to_json(include_cosines=include_cosines)
        for r in records
        if r.report is not None
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(trace, f, indent=2, sort_keys=True)
        f.write("\n")


def git_stamp():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def summarize(result):
    from . import __version__

    final = result.final
    summary = {
        "final": {
            "round": final.round_index,
            "mean_acc": final.mean_acc,
            "std_acc": final.std_acc,
            "mean_loss": final.mean_loss,
            "global_loss": final.global_loss,
            "selected_layers": list(final.selected),
        },
        "rounds_run": len(result.records),
        "config": result.cfg.echo,
        "backend": result.backend,
        "version": __version__,
        "git": git_stamp(),
        "total_wall_s": result.total_wall_s,
    }
    if result.probes:
        agree = [p.agree_fraction for p in result.probes]
        summary["probe"] = {
            "rounds": len(result.probes),
            "mean_sign_agreement": sum(agree) / len(agree),
            "lemma2_observed_mean": sum(p.lemma2_observed for p in result.probes)
            / len(result.probes),
            "lemma2_predicted_mean": sum(p.lemma2_predicted for p in result.probes)
            / len(result.probes),
        }
    return summary


def write_summary(path, result):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(summarize(result), f, indent=2, sort_keys=True)
        f.write("\n")


def write_sweep_csv(path, rows):
    """Comparison table; pd is the reference (fedlag) accuracy minus the row's."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow([
                row["label"],
                _fmt(row["mean_acc"]),
                _fmt(row["std_acc"]),
                _fmt(row["mean_loss"]),
                _fmt(row["global_loss"]),
                _fmt(row["pd"]),
            ])


def write_run_outputs(out_dir, result, timing=False):
    """Standard artifact set for one run; returns the directory Path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", result.records, timing=timing)
    if result.cfg.output.write_gc_trace:
        write_gc_trace(
            out / "gc_trace.json",
            result.records,
            include_cosines=result.cfg.output.write_cosines,
        )
    write_summary(out / "summary.json", result)
    return out
