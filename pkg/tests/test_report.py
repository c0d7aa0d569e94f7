"""Report emission from a trial log: CSV aggregation, verdict JSON and SVG charts."""

from __future__ import annotations

import json
import math
import re

import pytest

from mupdit.errors import ConfigError
from mupdit.report import CSV_COLUMNS, emit_report, parse_csv, render_svg, rows_to_csv, summary_rows, sweep_records
from mupdit.transfer import TrialLog

WIDTHS = (32, 64, 128)
LRS = tuple(2.0**e for e in range(-12, -7))


def _loss(n, j, seed):
    # a bowl whose minimum sits at index 2 for every width
    return 0.1 + 0.01 * (j - 2) ** 2 + 0.001 * seed + 1.0 / n


def _write_log(path, diverged=((128, 2),), seeds=(0, 1), scheme="mup"):
    log = TrialLog(path)
    for n in WIDTHS:
        for j, lr in enumerate(LRS):
            for s in seeds:
                bad = (n, j) in diverged and s == 0
                log.append(
                    {
                        "config_hash": f"{scheme}-{n}-{j}",
                        "seed": s,
                        "axis": "width",
                        "axis_point": n,
                        "hp_name": "eta",
                        "hp_value": lr,
                        "scheme": scheme,
                        "final_loss": None if bad else _loss(n, j, s),
                        "diverged": bad,
                    }
                )
    return path


def test_counts_rows_and_curves(tmp_path):
    b = emit_report(_write_log(tmp_path / "log.jsonl"), tmp_path / "out")
    rows = parse_csv(b.csv_path.read_text())
    assert len(rows) == 15
    assert b.csv_path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert [p.name for p in b.svg_paths] == ["loss_mup_width_eta.svg"]
    svg = b.svg_paths[0].read_text()
    colors = set(re.findall(r'<polyline[^>]*stroke="([^"]+)"', svg))
    assert len(colors) == 3
    assert all(f"width={n}" in svg for n in WIDTHS)


def test_diverged_cell_is_a_gap(tmp_path):
    b = emit_report(_write_log(tmp_path / "log.jsonl"), tmp_path / "out")
    row = next(r for r in parse_csv(b.csv_path.read_text()) if r["axis_point"] == 128 and r["hp_value"] == LRS[2])
    assert math.isinf(row["seed_mean_loss"]) and row["diverged_count"] == 1 and row["n_seeds"] == 2
    svg = b.svg_paths[0].read_text()
    # width 128 is drawn third: its five points split into two 2-point segments
    color = re.findall(r'<line [^>]*stroke="([^"]+)"', svg)[2]
    segs = re.findall(rf'<polyline[^>]*stroke="{color}"[^>]*points="([^"]+)"', svg)
    assert [len(s.split()) for s in segs] == [2, 2]
    assert len(re.findall(rf'<circle[^>]*fill="{color}"', svg)) == 4


def test_verdict_json(tmp_path):
    b = emit_report(_write_log(tmp_path / "log.jsonl"), tmp_path / "out")
    v = json.loads(b.verdict_paths[0].read_text())
    assert v["axis_points"] == list(WIDTHS) and v["tolerance"] == 1
    # the diverged optimum at 128 pushes its argmin one step, still within tolerance
    assert v["argmin_indices"][:2] == [2, 2] and v["argmin_indices"][2] in (1, 3)
    assert v["pass"] is True and v["scheme"] == "mup"


def test_reemission_is_byte_identical(tmp_path):
    log = _write_log(tmp_path / "log.jsonl")
    a = emit_report(log, tmp_path / "a")
    b = emit_report(log, tmp_path / "b")
    for pa, pb in zip([a.csv_path, *a.verdict_paths, *a.svg_paths], [b.csv_path, *b.verdict_paths, *b.svg_paths]):
        assert pa.read_bytes() == pb.read_bytes()


def test_report_depends_on_log_content_not_order(tmp_path):
    log = _write_log(tmp_path / "log.jsonl")
    lines = log.read_text().splitlines(keepends=True)
    shuffled = tmp_path / "shuffled.jsonl"
    shuffled.write_text("".join(reversed(lines)))
    a = emit_report(log, tmp_path / "a")
    b = emit_report(shuffled, tmp_path / "b")
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    assert a.svg_paths[0].read_bytes() == b.svg_paths[0].read_bytes()


def test_empty_or_missing_log_is_config_error(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(ConfigError):
        emit_report(tmp_path / "empty.jsonl", tmp_path / "out")
    with pytest.raises(ConfigError):
        emit_report(tmp_path / "absent.jsonl", tmp_path / "out")


def test_search_records_are_not_grid_rows():
    recs = [{"axis": "search", "axis_point": 0, "hp_name": "search", "hp_value": 0.0, "seed": 0}]
    assert sweep_records(recs) == []


def test_alias_duplicates_counted_once():
    r = {"axis": "width", "axis_point": 32, "hp_name": "eta", "hp_value": 0.1, "seed": 0, "scheme": "mup", "final_loss": 1.0, "diverged": False}
    assert len(sweep_records([r, dict(r, config_hash="x")])) == 1


def test_no_svg_for_single_value_grid(tmp_path):
    log = TrialLog(tmp_path / "log.jsonl")
    for n in (32, 64):
        log.append({"config_hash": str(n), "seed": 0, "axis": "width", "axis_point": n, "hp_name": "eta", "hp_value": 0.1, "scheme": "sp", "final_loss": 0.5, "diverged": False})
    b = emit_report(log, tmp_path / "out")
    assert b.svg_paths == [] and len(b.verdict_paths) == 1


def test_csv_round_trip_keeps_inf():
    rows = summary_rows(
        [
            {"axis": "batch", "axis_point": 8, "hp_name": "eta", "hp_value": 0.5, "seed": 0, "scheme": "mup", "final_loss": None, "diverged": True},
            {"axis": "batch", "axis_point": 8, "hp_name": "eta", "hp_value": 0.25, "seed": 0, "scheme": "mup", "final_loss": 0.3, "diverged": False},
        ]
    )
    text = rows_to_csv(rows)
    assert parse_csv(text) == rows and "inf" in text


def test_render_svg_handles_all_diverged():
    rows = [{"axis": "width", "axis_point": 32, "hp_name": "eta", "hp_value": v, "seed_mean_loss": math.inf} for v in (0.1, 0.2)]
    svg = render_svg(rows, "t")
    assert svg.startswith("<svg") and "<polyline" not in svg
