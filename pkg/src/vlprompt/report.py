"""Markdown/CSV tables and self-contained SVG plots from result records."""
import csv
import io
import math
from collections import defaultdict
from xml.sax.saxutils import escape

import numpy as np

from .exceptions import ConfigError, PlotError

MISSING = "—"

# layout -> (row methods or None for all present, regimes shown)
LAYOUTS = {
    "base_table": (None, ("base",)),
    "novel_table": (None, ("novel",)),
    "ensemble_table": (("prol", "ensemble_ss", "ensemble_ms"), ("base", "novel")),
    "ss_table": (("robust_prol", "rpol_ss16", "rpol_ss24", "rpol_ss32"), ("base", "novel")),
    "sota_table": (("prol", "man_prol", "co_prol"), ("base", "novel")),
}
SHIFT_ORDER = ("in_dist", "v2_resample", "rendition", "corruption", "sketch", "adv_filtered")


def _shift_rank(tag):
    kind = tag.split(":", 1)[0]
    return (SHIFT_ORDER.index(kind) if kind in SHIFT_ORDER else len(SHIFT_ORDER), tag)


def cell_means(records):
    """Mean accuracy over seeds per (method, shift, regime, n_classes)."""
    acc = defaultdict(list)
    for r in records:
        acc[(r.method, r.shift, r.regime, r.n_classes)].append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def rank_marks(values):
    """``'best'``/``'second'``/None per value; ties share a mark, None entries are skipped."""
    present = sorted({v for v in values if v is not None}, reverse=True)
    marks = []
    for v in values:
        if v is None or not present:
            marks.append(None)
        elif v == present[0]:
            marks.append("best")
        elif len(present) > 1 and v == present[1]:
            marks.append("second")
        else:
            marks.append(None)
    return marks


def _fmt(v, mark):
    if v is None:
        return MISSING
    text = f"{100 * v:.2f}"
    if mark == "best":
        return f"**{text}**"
    if mark == "second":
        return f"<u>{text}</u>"
    return text


def tabulate(records, layout, methods=None, shifts=None):
    """Return ``(markdown, csv_text, warnings)`` for one table layout.

    Columns are (regime, n_classes, shift); each column marks its best value
    in bold and the runner-up underlined. Missing cells print as a dash and
    are listed in ``warnings``.
    """
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown layout {layout!r}; expected one of {sorted(LAYOUTS)}")
    row_methods, regimes = LAYOUTS[layout]
    means = cell_means(records)
    if methods is None:
        methods = list(row_methods) if row_methods else sorted({r.method for r in records})
    if shifts is None:
        shifts = sorted({r.shift for r in records}, key=_shift_rank) or ["in_dist"]
    sizes = sorted({r.n_classes for r in records if r.regime in regimes}) or [None]
    columns = [(g, n, s) for g in regimes for n in sizes for s in shifts]
    grid = [[means.get((m, s, g, n)) if n is not None else None for (g, n, s) in columns] for m in methods]
    warnings = [f"missing cell: method={m} shift={s} regime={g} n_classes={n}"
                for m, row in zip(methods, grid) for (g, n, s), v in zip(columns, row) if v is None]
    marks = [[None] * len(columns) for _ in methods]
    for j in range(len(columns)):
        for i, mk in enumerate(rank_marks([row[j] for row in grid])):
            marks[i][j] = mk

    def label(col):
        g, n, s = col
        return f"{s} ({g}" + (f", {n}" if n is not None else "") + ")"

    lines = ["| method | " + " | ".join(label(c) for c in columns) + " |",
             "|---|" + "---:|" * len(columns)]
    for m, row, mk in zip(methods, grid, marks):
        lines.append(f"| {m} | " + " | ".join(_fmt(v, k) for v, k in zip(row, mk)) + " |")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [label(c) for c in columns])
    for m, row in zip(methods, grid):
        w.writerow([m] + ["" if v is None else f"{v:.6f}" for v in row])
    return "\n".join(lines) + "\n", buf.getvalue(), warnings


# ---------------------------------------------------------------- SVG

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")
W, H, LEFT, RIGHT, TOP, BOTTOM = 640, 420, 70, 160, 30, 55


def padded_range(values, pad=0.05):
    lo, hi = min(values), max(values)
    span = hi - lo
    if span == 0:
        span = abs(lo) if lo else 1.0
        return lo - pad * span, hi + pad * span
    return lo - pad * span, hi + pad * span


def _num(v):
    return f"{v:.2f}"


def svg_lines(series, xlabel, ylabel, title):
    """``series`` maps a name to a list of (x, y); one polyline with markers per series."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise PlotError("nothing to plot")
    if not all(math.isfinite(x) and math.isfinite(y) for x, y in pts):
        raise PlotError("non-finite value in plot data")
    x0, x1 = padded_range([x for x, _ in pts])
    y0, y1 = padded_range([y for _, y in pts])
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.2f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{_num(sx(xv))}" y="{TOP + ph + 16}" text-anchor="middle" font-size="10">{xv:.3g}</text>')
        out.append(f'<text x="{LEFT - 6}" y="{_num(sy(yv) + 3)}" text-anchor="end" font-size="10">{yv:.3g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.2f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.2f})">{escape(ylabel)}</text>')
    for i, (name, s) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        s = sorted(s)
        if len(s) > 1:
            path = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in s)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in s:
            out.append(f'<circle cx="{_num(sx(x))}" cy="{_num(sy(y))}" r="3" fill="{color}"/>')
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{W - RIGHT + 12}" y1="{ly}" x2="{W - RIGHT + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 38}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(data, style, path=None, shift="in_dist", regime="base"):
    """Render ``accuracy_vs_nclasses`` from result records or ``loss_curves`` from LossCurve rows."""
    if not data:
        raise PlotError("no records to plot")
    if style == "accuracy_vs_nclasses":
        series = defaultdict(list)
        for (m, s, g, n), v in sorted(cell_means(data).items()):
            if s == shift and g == regime:
                series[m].append((n, 100 * v))
        svg = svg_lines(series, "number of classes", "accuracy (%)", f"{shift}, {regime} classes")
    elif style == "loss_curves":
        series = {}
        for c in data:
            vals = [float(v) for v in c.losses]
            series[f"{c.method} l={c.n_context} {c.split} s{c.seed}"] = [(e + 1, v) for e, v in enumerate(vals)]
        svg = svg_lines(series, "epoch", "loss", "prompt learning loss")
    else:
        raise PlotError(f"unknown plot style {style!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(svg)
    return svg


# ---------------------------------------------------------------- trend checks

TREND_SHIFTS = ("corruption", "sketch", "rendition")


def _trend_columns(records):
    tags = sorted({r.shift for r in records}, key=_shift_rank)
    cols = []
    for kind in TREND_SHIFTS:
        match = [t for t in tags if t.split(":", 1)[0] == kind]
        if match:
            cols.append(match[0])
    return cols


def trend_checks(records):
    """Directional comparisons between prompt learning and in-context learning.

    Returns ``[(name, passed, cells)]`` where ``cells`` lists
    ``(shift, held, detail)`` for every shift that enters the check. Means are
    taken over seeds.
    """
    means = cell_means(records)
    cols = _trend_columns(records)
    n_of = {r.regime: r.n_classes for r in records}

    def acc(method, shift, regime):
        return means.get((method, shift, regime, n_of.get(regime)))

    def pct(v):
        return "n/a" if v is None else f"{100 * v:.2f}"

    def compare(regime, chain, strict):
        cells = []
        for s in cols:
            vals = [acc(m, s, regime) for m in chain]
            held = all(v is not None for v in vals) and all(
                (a > b) if st else (a >= b) for a, b, st in zip(vals, vals[1:], strict))
            cells.append((s, held, " vs ".join(f"{m} {pct(v)}" for m, v in zip(chain, vals))))
        return cells

    out = []
    a = compare("base", ("prol", "icl_rice", "icl_random"), (True, True))
    out.append(("base: prol > icl_rice > icl_random on at least 2 of 3 shifts", sum(h for _, h, _ in a) >= 2, a))
    b = compare("novel", ("icl_rice", "prol"), (True,))
    out.append(("novel: icl_rice > prol on at least 2 of 3 shifts", sum(h for _, h, _ in b) >= 2, b))
    c1 = compare("base", ("robust_prol", "prol"), (False,))
    out.append(("base: robust_prol >= prol on at least 2 of 3 shifts", sum(h for _, h, _ in c1) >= 2, c1))
    c2 = []
    for s in cols:
        r, p = acc("robust_prol", s, "novel"), acc("prol", s, "novel")
        held = r is not None and p is not None and r - p >= 0.05
        gap = "n/a" if not held and (r is None or p is None) else f"{100 * (r - p):+.2f} points"
        c2.append((s, held, f"robust_prol {pct(r)} vs prol {pct(p)} ({gap})"))
    out.append(("novel: robust_prol beats prol by >= 5 points on every shift",
                len(c2) == len(TREND_SHIFTS) and all(h for _, h, _ in c2), c2))
    return out


def trend_report(records):
    """Markdown summary of :func:`trend_checks`; failing cells are flagged. Returns ``(text, all_passed)``."""
    checks = trend_checks(records)
    seeds = sorted({r.seed for r in records})
    lines = ["# Trend report", "",
             f"Mean accuracy over seeds {seeds} ({len(seeds)} seeds); "
             f"n_test per cell: {sorted({r.n_test for r in records})}.", ""]
    for regime in ("base", "novel"):
        md, _, _ = tabulate([r for r in records if r.regime == regime], f"{regime}_table",
                            methods=["prol", "robust_prol", "icl_rice", "icl_random"],
                            shifts=_trend_columns(records))
        lines += [f"## {regime.capitalize()} classes", "", md]
    lines += ["## Checks", ""]
    for name, passed, cells in checks:
        lines.append(f"- {'PASS' if passed else '**FAIL**'}: {name}")
        for shift, held, detail in cells:
            lines.append(f"  - {shift}: {detail}" + ("" if held else "  **(flagged)**"))
    ok = all(p for _, p, _ in checks)
    lines += ["", f"Overall: {'all checks hold' if ok else 'some checks fail; flagged cells above'}.", ""]
    return "\n".join(lines), ok
