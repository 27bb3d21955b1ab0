"""File writers: metrics CSV, conflict trace, sweep table, summary."""

import json
from decimal import Decimal

import pytest

from fedlag.conflict import ConflictReport
from fedlag.outputs import (
    METRICS_HEADER,
    SWEEP_HEADER,
    accuracy_deficit,
    git_stamp,
    write_gc_trace,
    write_metrics_csv,
    write_sweep_csv,
)
from fedlag.simulate import RoundRecord


def _record(r, selected=(), wall_ms=3, with_report=True):
    report = None
    if with_report:
        report = ConflictReport(
            round_index=r, xi=-0.1, k=len(selected),
            scores={0: 2, 1: 0}, selected=tuple(selected),
            cosines={0: [[1.0, -0.5], [-0.5, 1.0]], 1: [[1.0, 0.2], [0.2, 1.0]]},
        )
    return RoundRecord(
        round_index=r, participants=(0, 1), mean_acc=0.5 + r, std_acc=0.25,
        mean_loss=1.5, global_loss=2.0, selected=tuple(selected),
        report=report, wall_ms=wall_ms, evaluated=True,
    )


def test_metrics_csv_golden_bytes(tmp_path):
    p = tmp_path / "metrics.csv"
    write_metrics_csv(p, [_record(0), _record(1, selected=(0, 2))])
    want = (
        "round,mean_acc,std_acc,mean_loss,global_loss,selected_layers,wall_ms\n"
        "0,0.5,0.25,1.5,2.0,,0\n"
        "1,1.5,0.25,1.5,2.0,0;2,0\n"
    )
    assert p.read_text() == want


def test_metrics_csv_timing_column_is_opt_in(tmp_path):
    p = tmp_path / "metrics.csv"
    write_metrics_csv(p, [_record(0, wall_ms=17)], timing=True)
    assert p.read_text().splitlines()[1].endswith(",17")
    write_metrics_csv(p, [_record(0, wall_ms=17)], timing=False)
    assert p.read_text().splitlines()[1].endswith(",0")


def test_metrics_header_is_pinned():
    assert METRICS_HEADER == [
        "round", "mean_acc", "std_acc", "mean_loss", "global_loss",
        "selected_layers", "wall_ms",
    ]
    assert SWEEP_HEADER == ["label", "mean_acc", "std_acc", "mean_loss",
                            "global_loss", "pd"]


def test_gc_trace_schema(tmp_path):
    p = tmp_path / "gc_trace.json"
    write_gc_trace(p, [_record(0), _record(1, selected=(0,))])
    doc = json.loads(p.read_text())
    assert isinstance(doc, list) and len(doc) == 2
    assert set(doc[0]) == {"round", "xi", "k", "layers"}
    assert doc[1]["layers"][0] == {"layer_id": 0, "gc": 2, "selected": True}


def test_gc_trace_cosines_flag(tmp_path):
    p = tmp_path / "gc_trace.json"
    write_gc_trace(p, [_record(0)], include_cosines=True)
    doc = json.loads(p.read_text())
    assert doc[0]["cosines"]["0"][0][1] == -0.5


def test_gc_trace_skips_reportless_rounds(tmp_path):
    p = tmp_path / "gc_trace.json"
    write_gc_trace(p, [_record(0, with_report=False), _record(1)])
    assert [row["round"] for row in json.loads(p.read_text())] == [1]


def test_accuracy_deficit_anchor():
    # reference minus setting; checked in exact decimal and in float
    assert Decimal("85.21") - Decimal("72.81") == Decimal("12.40")
    pd = accuracy_deficit(85.21, 72.81)
    assert pd == pytest.approx(12.40, abs=1e-12)
    assert round(pd, 2) == 12.40
    assert accuracy_deficit(0.7, 0.9) == pytest.approx(-0.2)


def test_sweep_csv_layout(tmp_path):
    p = tmp_path / "sweep.csv"
    rows = [
        {"label": "fedlag", "mean_acc": 0.8, "std_acc": 0.1, "mean_loss": 0.5,
         "global_loss": 0.9, "pd": 0.0},
        {"label": "k_0", "mean_acc": 0.7, "std_acc": 0.2, "mean_loss": 0.6,
         "global_loss": 1.0, "pd": 0.1},
    ]
    write_sweep_csv(p, rows)
    lines = p.read_text().splitlines()
    assert lines[0] == "label,mean_acc,std_acc,mean_loss,global_loss,pd"
    assert lines[1].startswith("fedlag,0.8,")
    assert lines[2].startswith("k_0,0.7,")


def test_git_stamp_returns_string():
    assert isinstance(git_stamp(), str) and git_stamp()
