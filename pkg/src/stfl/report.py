"""CSV, plain-text and SVG renderings of experiment results."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from stfl.evaluation import SCHEME_ORDER, format_pm

_FLOAT = "{:.6f}"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return _FLOAT.format(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], config_digest: str | None = None) -> None:
    buf = io.StringIO()
    if config_digest:
        buf.write(f"# config_digest={config_digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def rounds_header(client_ids: Sequence[int]) -> list[str]:
    return ["round"] + [f"client_loss_{c}" for c in client_ids] + ["val_dice", "val_iou", "digest", "chain"]


def round_row(rec) -> list:
    return ([rec.round_index] + [float(rec.client_losses[c]) for c in sorted(rec.client_losses)]
            + [rec.val_dice, rec.val_iou, rec.digest, rec.chain])


METRIC_HEADER = ["scheme", "dataset_type", "n_clients", "metric", "mean", "ci", "n_trials", "best_of_mean_curve"]
IMPROVEMENT_HEADER = ["dataset_type", "noise_pattern", "scheme", "pct_mean", "pct_best", "n_pairs"]


def best_of_mean_curve(curves: Sequence[Sequence[float]]) -> float | None:
    """Maximum over rounds of the trial-averaged validation curve."""
    curves = [c for c in curves if len(c)]
    if not curves:
        return None
    n = min(len(c) for c in curves)
    return float(np.mean([c[:n] for c in curves], axis=0).max())


def metric_rows(table: list[dict], curves: dict | None = None) -> list[list]:
    curves = curves or {}
    return [[r["scheme"], r["dataset_type"], r["n_clients"], r["metric"], r["mean"], r["ci"], r["n_trials"],
             best_of_mean_curve(curves.get((r["scheme"], r["dataset_type"], r["n_clients"], r["metric"]), []))]
            for r in table]


def render_table(table: list[dict]) -> str:
    """Human-readable pivot: one line per (n_clients, metric, dataset_type), one column per scheme."""
    schemes = sorted({r["scheme"] for r in table}, key=lambda s: SCHEME_ORDER.index(s) if s in SCHEME_ORDER else 99)
    cells = {(r["n_clients"], r["metric"], r["dataset_type"], r["scheme"]): r for r in table}
    keys = sorted({(r["n_clients"], r["metric"], r["dataset_type"]) for r in table},
                  key=lambda k: (k[0], k[1] != "dice", k[2]))
    width = 17
    lines = [f"{'clients':<8}{'metric':<7}{'dataset':<16}" + "".join(f"{s:>{width}}" for s in schemes)]
    for n, metric, dt in keys:
        vals = []
        for s in schemes:
            r = cells.get((n, metric, dt, s))
            vals.append(format_pm(r["mean"], r["ci"]) if r else "-")
        lines.append(f"{n:<8}{metric.upper() if metric == 'iou' else metric.capitalize():<7}{dt:<16}"
                     + "".join(f"{v:>{width}}" for v in vals))
    return "\n".join(lines) + "\n"


def improvement_svg(rows: list[dict], width: int = 720, height: int = 320) -> str:
    """Grouped bar chart of pct_mean: one panel per dataset type, groups by noise pattern."""
    panels = sorted({r["dataset_type"] for r in rows})
    schemes = sorted({r["scheme"] for r in rows}, key=lambda s: SCHEME_ORDER.index(s) if s in SCHEME_ORDER else 99)
    colors = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"]
    vals = [r["pct_mean"] for r in rows if np.isfinite(r["pct_mean"])] or [0.0]
    lo, hi = min(0.0, min(vals)), max(0.0, max(vals))
    span = (hi - lo) or 1.0
    pw = width / max(len(panels), 1)
    top, bottom = 30, height - 40
    y = lambda v: bottom - (v - lo) / span * (bottom - top)  # noqa: E731
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">']
    by = defaultdict(dict)
    for r in rows:
        by[(r["dataset_type"], r["noise_pattern"])][r["scheme"]] = r["pct_mean"]
    for pi, panel in enumerate(panels):
        x0 = pi * pw + 40
        out.append(f'<text x="{x0 + (pw - 60) / 2:.1f}" y="16" text-anchor="middle">{escape(panel)}</text>')
        out.append(f'<line x1="{x0:.1f}" x2="{x0 + pw - 50:.1f}" y1="{y(0):.1f}" y2="{y(0):.1f}" stroke="#333"/>')
        noises = sorted({k[1] for k in by if k[0] == panel})
        gw = (pw - 60) / max(len(noises), 1)
        bw = gw * 0.8 / max(len(schemes), 1)
        for ni, noise in enumerate(noises):
            gx = x0 + ni * gw + gw * 0.1
            for si, s in enumerate(schemes):
                v = by[(panel, noise)].get(s)
                if v is None or not np.isfinite(v):
                    continue
                y1, y2 = sorted((y(0), y(v)))
                out.append(f'<rect x="{gx + si * bw:.1f}" y="{y1:.1f}" width="{bw:.1f}" height="{max(y2 - y1, 0.5):.1f}" '
                           f'fill="{colors[si % len(colors)]}"><title>{escape(s)}: {v:.1f}%</title></rect>')
            out.append(f'<text x="{gx + gw * 0.4:.1f}" y="{bottom + 14}" text-anchor="middle">{escape(noise)}</text>')
    for si, s in enumerate(schemes):
        lx = 40 + si * 150
        out.append(f'<rect x="{lx}" y="{height - 16}" width="10" height="10" fill="{colors[si % len(colors)]}"/>')
        out.append(f'<text x="{lx + 14}" y="{height - 7}">{escape(s)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
