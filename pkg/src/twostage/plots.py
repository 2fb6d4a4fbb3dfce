"""SVG line charts from run logs.

Every series is drawn as a ``<polyline>`` that also carries its data in
``data-x`` / ``data-y`` attributes (JSON lists), so plots can be checked
without rasterizing them.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from xml.sax.saxutils import quoteattr

import numpy as np

log = logging.getLogger(__name__)

WIDTH, HEIGHT = 640, 400
MARGIN = 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def read_log(path):
    """Parse a JSONL log. Returns ``(records, skipped)``; malformed lines are counted and skipped."""
    records, skipped = [], 0
    text = Path(path).read_text() if Path(path).exists() else ""
    for line in text.splitlines():
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            skipped += 1
            continue
        if not isinstance(rec, dict):
            skipped += 1
            continue
        records.append(rec)
    if skipped:
        log.warning("%s: skipped %d malformed lines", path, skipped)
    return records, skipped


def _bounds(series):
    xs = [x for _, sx, _ in series for x in sx]
    ys = [y for _, _, sy in series for y in sy]
    if not xs:
        return 0.0, 1.0, 0.0, 1.0
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    return x0, x1, y0, y1


def line_chart(series, title: str, xlabel: str, ylabel: str) -> str:
    """``series`` is a list of ``(name, xs, ys)``. Returns the SVG document."""
    x0, x1, y0, y1 = _bounds(series)
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def px(x):
        return MARGIN + (x - x0) / (x1 - x0) * pw

    def py(y):
        return HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
           f'<g class="axes" stroke="black">'
           f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}"/>'
           f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}"/></g>',
           f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>',
           f'<text x="15" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 15 {HEIGHT / 2})">{_esc(ylabel)}</text>']
    for v, anchor, (x, y) in ((x0, "middle", (px(x0), HEIGHT - MARGIN + 15)),
                              (x1, "middle", (px(x1), HEIGHT - MARGIN + 15)),
                              (y0, "end", (MARGIN - 5, py(y0))), (y1, "end", (MARGIN - 5, py(y1)))):
        out.append(f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" font-size="10">{v:.4g}</text>')
    for i, (name, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}" '
                   f'data-series={quoteattr(name)} data-x={quoteattr(json.dumps(list(xs)))} '
                   f'data-y={quoteattr(json.dumps(list(ys)))}/>')
        out.append(f'<text x="{WIDTH - MARGIN + 5}" y="{MARGIN + 14 * i}" font-size="10" '
                   f'fill="{color}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return quoteattr(str(text))[1:-1]


def extract_series(svg: str) -> dict:
    """Recover ``{name: (xs, ys)}`` from the data attributes of a chart."""
    import xml.etree.ElementTree as ET

    root = ET.fromstring(svg)
    out = {}
    for el in root.iter("{http://www.w3.org/2000/svg}polyline"):
        out[el.get("data-series")] = (json.loads(el.get("data-x")), json.loads(el.get("data-y")))
    return out


def _run_key(rec) -> str:
    mode = rec.get("reward_mode")
    seed = rec.get("seed")
    return f"{rec.get('stage', '?')}" + (f" {mode}" if mode else "") + (f" seed {seed}" if seed is not None else "")


def _group(records, record_type, field):
    groups: dict = {}
    for rec in records:
        if rec.get("record") != record_type or field not in rec:
            continue
        v = rec[field]
        if isinstance(v, (int, float)) and np.isfinite(v):
            xs, ys = groups.setdefault(_run_key(rec), ([], []))
            xs.append(rec.get("iteration", len(xs)))
            ys.append(float(v))
    return [(k, xs, ys) for k, (xs, ys) in groups.items()]


def terrain_chart(records) -> str:
    return line_chart(_group(records, "iteration", "mean_level"), "Terrain difficulty",
                      "iteration", "mean terrain level")


def reward_chart(records) -> str:
    return line_chart(_group(records, "iteration", "reward"), "Mean reward per step", "iteration", "reward")


def _traces(records):
    return [r for r in records if r.get("record") == "trace"]


def velocity_chart(records) -> str:
    tr = _traces(records)
    steps = [r["step"] for r in tr]
    series = []
    if tr:
        for j, axis in enumerate(("vx", "vy", "yaw rate")):
            series.append((f"commanded {axis}", steps, [r["command"][j] for r in tr]))
            series.append((f"achieved {axis}", steps, [r["velocity"][j] for r in tr]))
    return line_chart(series, "Commanded vs achieved velocity", "control step", "velocity")


def contact_chart(records) -> str:
    tr = _traces(records)
    steps = [r["step"] for r in tr]
    feet = len(tr[0]["foot_forces"]) if tr else 0
    series = [(f"foot {k}", steps, [r["foot_forces"][k] for r in tr]) for k in range(feet)]
    return line_chart(series, "Foot contact forces", "control step", "contact force [N]")


def emit_plots(log_path, out_dir) -> dict:
    """Write terrain, reward, velocity and contact-force charts. Returns paths and the skip count."""
    records, skipped = read_log(log_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    charts = {"terrain_level": terrain_chart, "reward": reward_chart, "velocity": velocity_chart,
              "contact_forces": contact_chart}
    paths = {}
    for name, fn in charts.items():
        path = out_dir / f"{name}.svg"
        path.write_text(fn(records))
        paths[name] = str(path)
    return {"plots": paths, "records": len(records), "skipped": skipped}
