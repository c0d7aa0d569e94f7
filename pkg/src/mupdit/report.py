"""CSV, verdict JSON and SVG charts from a trial log.

Every output is a pure function of the log file: rows are sorted, floats are
written with ``repr`` and the SVG is rendered from the parsed CSV rows, so
re-emitting over an unchanged log is byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError
from .transfer import TrialLog, aggregate, fold_verdict

CSV_COLUMNS = ("scheme", "axis", "axis_point", "hp_name", "hp_value", "seed_mean_loss", "n_seeds", "diverged_count")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


@dataclass
class ReportBundle:
    csv_path: Path
    verdict_paths: list[Path] = field(default_factory=list)
    svg_paths: list[Path] = field(default_factory=list)
    verdicts: dict[str, dict] = field(default_factory=dict)


def sweep_records(lines: Iterable[dict]) -> list[dict]:
    """Labelled sweep records, one per (scheme, axis, point, hp, value, seed)."""
    seen, out = set(), []
    for r in lines:
        # random-search trials carry axis "search" and have no grid to fold
        if r.get("axis") in (None, "search"):
            continue
        key = (r.get("scheme"), r["axis"], int(r["axis_point"]), r["hp_name"], float(r["hp_value"]), int(r["seed"]))
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


def _groups(records: Sequence[dict]) -> dict[tuple[str, str, str], list[dict]]:
    out: dict[tuple[str, str, str], list[dict]] = {}
    for r in records:
        out.setdefault((str(r.get("scheme")), r["axis"], r["hp_name"]), []).append(r)
    return out


def summary_rows(records: Sequence[dict]) -> list[dict]:
    rows = []
    for (scheme, axis, hp), rs in sorted(_groups(records).items()):
        for (_, point, value), (mean, n, div) in sorted(aggregate(rs).items()):
            rows.append(
                {
                    "scheme": scheme,
                    "axis": axis,
                    "axis_point": point,
                    "hp_name": hp,
                    "hp_value": value,
                    "seed_mean_loss": mean,
                    "n_seeds": n,
                    "diverged_count": div,
                }
            )
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for r in rows:
        wr.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(
            {
                "scheme": r["scheme"],
                "axis": r["axis"],
                "axis_point": int(r["axis_point"]),
                "hp_name": r["hp_name"],
                "hp_value": float(r["hp_value"]),
                "seed_mean_loss": float(r["seed_mean_loss"]),
                "n_seeds": int(r["n_seeds"]),
                "diverged_count": int(r["diverged_count"]),
            }
        )
    return rows


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(rows: Sequence[dict], title: str, width: int = 480, height: int = 320) -> str:
    """Loss against log2(hp), one polyline per axis point; diverged cells leave gaps."""
    points = sorted({r["axis_point"] for r in rows})
    xs = [math.log2(r["hp_value"]) for r in rows if r["hp_value"] > 0]
    ys = [math.log10(r["seed_mean_loss"]) for r in rows if math.isfinite(r["seed_mean_loss"]) and r["seed_mean_loss"] > 0]
    left, right, top, bottom = 60, 110, 30, 40
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13" font-family="sans-serif">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
    ]
    for e in range(math.ceil(x0), math.floor(x1) + 1):
        out.append(f'<text x="{_fmt(sx(e))}" y="{top + ph + 15}" text-anchor="middle" font-size="10" font-family="sans-serif">{e}</text>')
    for i in range(5):
        v = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{left - 5}" y="{_fmt(sy(v) + 3)}" text-anchor="end" font-size="10" font-family="sans-serif">{10**v:.3g}</text>')
    hp = rows[0]["hp_name"] if rows else "hp"
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11" font-family="sans-serif">log2({hp})</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="11" font-family="sans-serif" transform="rotate(-90 14 {top + ph / 2:.1f})">final loss</text>')
    for k, p in enumerate(points):
        color = PALETTE[k % len(PALETTE)]
        series = sorted((r for r in rows if r["axis_point"] == p), key=lambda r: r["hp_value"])
        segment: list[str] = []
        segments = []
        for r in series:
            loss = r["seed_mean_loss"]
            if math.isfinite(loss) and loss > 0:
                segment.append(f"{_fmt(sx(math.log2(r['hp_value'])))},{_fmt(sy(math.log10(loss)))}")
            elif segment:
                segments.append(segment)
                segment = []
        if segment:
            segments.append(segment)
        for seg in segments:
            if len(seg) > 1:
                out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(seg)}"/>')
            for xy in seg:
                cx, cy = xy.split(",")
                out.append(f'<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>')
        ly = top + 12 + 16 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}" font-size="11" font-family="sans-serif">{series[0]["axis"] if series else ""}={p}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(log: str | os.PathLike | TrialLog, out: str | os.PathLike, tolerance: int = 1) -> ReportBundle:
    """Write ``summary.csv``, one verdict JSON per sweep and SVG charts into ``out``."""
    if not isinstance(log, TrialLog):
        path = Path(log)
        if not path.exists():
            raise ConfigError(f"trial log {path} does not exist")
        log = TrialLog(path)
    records = sweep_records(log.lines)
    if not records:
        raise ConfigError("trial log holds no sweep trials")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = rows_to_csv(summary_rows(records))
    bundle = ReportBundle(out / "summary.csv")
    bundle.csv_path.write_text(csv_text)

    rows = parse_csv(csv_text)
    groups: dict[tuple[str, str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["scheme"], r["axis"], r["hp_name"]), []).append(r)
    for (scheme, axis, hp), grows in sorted(groups.items()):
        stem = f"{scheme}_{axis}_{hp}"
        recs = [r for r in records if (str(r.get("scheme")), r["axis"], r["hp_name"]) == (scheme, axis, hp)]
        points = sorted({r["axis_point"] for r in grows})
        values = sorted({r["hp_value"] for r in grows})
        try:
            v = fold_verdict(recs, axis, points, hp, values, tolerance).to_dict()
        except ConfigError as e:
            # incomplete grid: report it rather than guess
            v = {"axis": axis, "axis_points": points, "hp_name": hp, "hp_values": values, "argmin_indices": None, "tolerance": tolerance, "pass": False, "reason": str(e)}
        v["scheme"] = scheme
        bundle.verdicts[stem] = v
        vp = out / f"verdict_{stem}.json"
        vp.write_text(json.dumps(v, indent=1, sort_keys=True) + "\n")
        bundle.verdict_paths.append(vp)
        per_point = {p: sum(1 for r in grows if r["axis_point"] == p) for p in points}
        if min(per_point.values()) >= 2:
            sp = out / f"loss_{stem}.svg"
            sp.write_text(render_svg(grows, f"{scheme}: final loss vs {hp} across {axis}"))
            bundle.svg_paths.append(sp)
    return bundle
