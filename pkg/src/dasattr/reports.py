"""CSV tables and self-contained SVG charts for experiment results."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def scores_csv(results) -> str:
    """Long-format scores for one or more AttributionResults."""
    rows = []
    for res in results:
        ranks = res.ranks()
        for j, tid in enumerate(res.target_ids):
            for i, nid in enumerate(res.train_ids):
                rows.append((int(tid), int(nid), res.method, res.lam, res.scores[j, i], int(ranks[j, i])))
    return to_csv(("target_id", "train_id", "method", "lambda", "score", "rank"), rows)


def lds_csv(reports: dict) -> str:
    rows = []
    for method, rep in reports.items():
        val, gen = rep.group("val"), rep.group("gen")
        rows.append((method, rep.lam, rep.mean, rep.sem,
                     val.mean if len(val.rho) else math.nan,
                     gen.mean if len(gen.rho) else math.nan,
                     len(rep.rho), int(rep.degenerate.sum())))
    return to_csv(("method", "lambda", "lds_mean", "lds_sem", "lds_val", "lds_gen", "targets",
                   "degenerate"), rows)


def sweep_csv(sweeps: dict) -> str:
    rows = [(m, lam, v) for m, table in sweeps.items() for lam, v in table.items()]
    return to_csv(("method", "lambda", "heldout_lds"), rows)


def counterfactual_csv(reports: dict) -> str:
    rows = [(m, r.top_k, r.mean_l2, r.mean_cosine, len(r.l2)) for m, r in reports.items()]
    return to_csv(("method", "top_k", "mean_l2", "mean_cosine", "targets"), rows)


def output_function_csv(rep) -> str:
    rows = [(j, a, b, c) for j, (a, b, c) in enumerate(zip(rep.l2, rep.loss_diff, rep.output_diff))]
    table = to_csv(("pair", "l2", "loss_diff", "output_diff"), rows)
    summary = to_csv(("signal", "pearson_with_l2", "degenerate"),
                     [("output_diff", rep.pearson_output, rep.degenerate),
                      ("loss_diff", rep.pearson_loss, rep.degenerate)])
    return table, summary


def bar_chart(labels, values, errors=None, title: str = "", ylabel: str = "",
              width: int = 640, height: int = 360) -> str:
    """Vertical bars with optional symmetric error bars, as standalone SVG."""
    values = np.asarray(values, dtype=np.float64)
    errors = np.zeros_like(values) if errors is None else np.asarray(errors, dtype=np.float64)
    finite = np.isfinite(values)
    lo = min(0.0, float(np.min((values - errors)[finite]))) if finite.any() else 0.0
    hi = max(0.0, float(np.max((values + errors)[finite]))) if finite.any() else 1.0
    if hi == lo:
        hi = lo + 1.0
    left, right, top, bottom = 60, 20, 40, 80
    pw, ph = width - left - right, height - top - bottom

    def y(v):
        return top + ph * (hi - v) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{y(0):.2f}" x2="{left + pw}" y2="{y(0):.2f}" stroke="black"/>']
    for tick in np.linspace(lo, hi, 5):
        out.append(f'<text x="{left - 4}" y="{y(tick) + 4:.2f}" text-anchor="end">{tick:.3g}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    slot = pw / max(len(values), 1)
    for i, (label, v, e) in enumerate(zip(labels, values, errors)):
        cx = left + slot * (i + 0.5)
        if np.isfinite(v):
            y0, y1 = sorted((y(0), y(v)))
            out.append(f'<rect x="{cx - slot * 0.35:.2f}" y="{y0:.2f}" width="{slot * 0.7:.2f}" '
                       f'height="{y1 - y0:.2f}" fill="#4c72b0"/>')
            if e > 0:
                out.append(f'<line x1="{cx:.2f}" y1="{y(v - e):.2f}" x2="{cx:.2f}" y2="{y(v + e):.2f}" '
                           f'stroke="black"/>')
        ly = top + ph + 12
        out.append(f'<text x="{cx:.2f}" y="{ly}" text-anchor="end" '
                   f'transform="rotate(-35 {cx:.2f} {ly})">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def lds_chart(reports: dict, title: str = "LDS") -> str:
    names = list(reports)
    return bar_chart(names, [reports[m].mean for m in names], [reports[m].sem for m in names],
                     title=title, ylabel="mean LDS")


def counterfactual_chart(reports: dict, title: str = "Counterfactual removal") -> str:
    names = list(reports)
    l2 = [reports[m].mean_l2 for m in names]
    sem = [reports[m].l2.std(ddof=1) / np.sqrt(len(reports[m].l2)) if len(reports[m].l2) > 1 else 0.0
           for m in names]
    return bar_chart(names, l2, sem, title=title, ylabel="mean L2 after retraining")
