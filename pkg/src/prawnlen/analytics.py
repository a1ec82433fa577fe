"""Growth analytics over accepted length measurements.

Lengths are grouped by pond and day of culture (DOC), summarised as box
plot statistics, fitted with a straight trend line through the daily
medians, and rendered to a deterministic SVG report with CSV companions.
All lengths here are in millimetres.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DegenerateX, EmptyReport, FormatError

SOURCES = ("CV", "CV_tracked", "FeedTraySample", "CastNet")
MEASUREMENT_FIELDS = ("pond_id", "doc", "source", "length_mm")


@dataclass(frozen=True)
class Measurement:
    pond_id: str
    doc: int
    length_mm: float
    source: str = "CV"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if not (self.length_mm > 0 and math.isfinite(self.length_mm)):
            raise ValueError(f"length_mm must be positive, got {self.length_mm!r}")
        if self.doc < 0:
            raise ValueError(f"doc must be >= 0, got {self.doc!r}")


def quartiles(values):
    """Min, Q1, median, Q3, max by linear interpolation of order statistics."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("quartiles of an empty sample")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(v[0]), float(q1), float(med), float(q3), float(v[-1])


@dataclass(frozen=True)
class DailySummary:
    pond_id: str
    source: str
    doc: int
    n: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    whisker_lo: float
    whisker_hi: float

    @classmethod
    def of(cls, pond_id, source, doc, values):
        lo, q1, med, q3, hi = quartiles(values)
        spread = 1.5 * (q3 - q1)
        return cls(pond_id, source, doc, len(values), lo, q1, med, q3, hi,
                   max(lo, q1 - spread), min(hi, q3 + spread))


def summarize_by_doc(ms, source=None):
    """Box plot statistics per ``(pond, source, doc)`` group.

    ``source`` may be a single source name or a collection of them; groups
    come back ordered by pond, source order and DOC.
    """
    wanted = None if source is None else ({source} if isinstance(source, str) else set(source))
    groups = {}
    for m in ms:
        if wanted is None or m.source in wanted:
            groups.setdefault((m.pond_id, m.source, m.doc), []).append(m.length_mm)
    keys = sorted(groups, key=lambda k: (k[0], SOURCES.index(k[1]), k[2]))
    return [DailySummary.of(p, s, d, groups[p, s, d]) for p, s, d in keys]


@dataclass(frozen=True)
class TrendLine:
    slope: float
    intercept: float
    r2: float
    n: int = 0

    def __call__(self, doc):
        return self.intercept + self.slope * np.asarray(doc, dtype=np.float64)


def fit_trend(points):
    """Ordinary least squares line through ``(doc, median_mm)`` points.

    Raises
    ------
    DegenerateX
        If fewer than two distinct DOC values are present.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x, y = p[:, 0], p[:, 1]
    if len(np.unique(x)) < 2:
        raise DegenerateX("a trend needs at least two distinct DOC values")
    dx, dy = x - x.mean(), y - y.mean()
    slope = float(dx @ dy / (dx @ dx))
    intercept = float(y.mean() - slope * x.mean())
    ss_res = float(np.sum((y - intercept - slope * x) ** 2))
    ss_tot = float(dy @ dy)
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return TrendLine(slope, intercept, r2, len(x))


def trend_from_summaries(summaries):
    return fit_trend([(s.doc, s.median) for s in summaries])


class Histogram(NamedTuple):
    edges: np.ndarray
    counts: np.ndarray
    median: float

    @property
    def n(self):
        return int(self.counts.sum())


def length_histogram(ms, doc=None, bin_width_mm=5.0):
    """Counts in ``bin_width_mm`` bins from the sample minimum up to its maximum.

    ``ms`` may hold Measurement records (filtered to ``doc`` when given)
    or bare lengths. The maximum falls in the last bin.
    """
    if not bin_width_mm > 0:
        raise ValueError("bin_width_mm must be positive")
    vals = [m.length_mm if isinstance(m, Measurement) else float(m)
            for m in ms if doc is None or not isinstance(m, Measurement) or m.doc == doc]
    v = np.asarray(vals, dtype=np.float64)
    if v.size == 0:
        return Histogram(np.zeros(0), np.zeros(0, dtype=np.int64), float("nan"))
    lo, hi = float(v.min()), float(v.max())
    n_bins = max(1, int(math.ceil((hi - lo) / bin_width_mm)))
    if lo + n_bins * bin_width_mm <= hi:
        n_bins += 1
    edges = lo + bin_width_mm * np.arange(n_bins + 1)
    idx = np.minimum(((v - lo) // bin_width_mm).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return Histogram(edges, counts, float(np.median(v)))


# -- measurements CSV ---------------------------------------------------------

def write_measurements(ms, fh=None):
    out = fh if fh is not None else io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(MEASUREMENT_FIELDS)
    for m in ms:
        w.writerow([m.pond_id, m.doc, m.source, f"{m.length_mm:.3f}"])
    return out.getvalue() if fh is None else None


def read_measurements(text):
    """Parse a measurements CSV into :class:`Measurement` records.

    Raises
    ------
    FormatError
        On a missing column or an unparsable row.
    """
    reader = csv.DictReader(io.StringIO(text))
    missing = set(MEASUREMENT_FIELDS) - set(reader.fieldnames or ())
    if missing:
        raise FormatError(f"measurements CSV lacks columns {sorted(missing)}")
    out = []
    for line, row in enumerate(reader, start=2):
        try:
            out.append(Measurement(row["pond_id"], int(row["doc"]), float(row["length_mm"]), row["source"]))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"line {line}: {exc}") from None
    return out


# -- report -------------------------------------------------------------------

def _f(x, nd=2):
    s = f"{x:.{nd}f}"
    return "0" if s.strip("-0.") == "" else s.rstrip("0").rstrip(".")


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


_COLOURS = {"CV": "#1f77b4", "CV_tracked": "#2ca02c", "FeedTraySample": "#ff7f0e", "CastNet": "#d62728"}
_PANEL_W, _PANEL_H, _PAD = 420, 260, 40


class _Axes:
    def __init__(self, x0, y0, xlim, ylim):
        self.x0, self.y0 = x0, y0
        self.xlo, self.xhi = xlim if xlim[1] > xlim[0] else (xlim[0] - 1, xlim[0] + 1)
        self.ylo, self.yhi = ylim if ylim[1] > ylim[0] else (ylim[0] - 1, ylim[0] + 1)

    def x(self, v):
        return self.x0 + _PAD + (v - self.xlo) / (self.xhi - self.xlo) * (_PANEL_W - 2 * _PAD)

    def y(self, v):
        return self.y0 + _PANEL_H - _PAD - (v - self.ylo) / (self.yhi - self.ylo) * (_PANEL_H - 2 * _PAD)

    def frame(self, title, xlabel, ylabel):
        l, r = self.x0 + _PAD, self.x0 + _PANEL_W - _PAD
        t, b = self.y0 + _PAD, self.y0 + _PANEL_H - _PAD
        return [
            f'<rect x="{_f(l)}" y="{_f(t)}" width="{_f(r - l)}" height="{_f(b - t)}" fill="none" stroke="#444"/>',
            f'<text x="{_f((l + r) / 2)}" y="{_f(t - 10)}" text-anchor="middle" font-size="13">{_esc(title)}</text>',
            f'<text x="{_f((l + r) / 2)}" y="{_f(b + 28)}" text-anchor="middle" font-size="11">{_esc(xlabel)}</text>',
            f'<text x="{_f(l - 28)}" y="{_f((t + b) / 2)}" text-anchor="middle" font-size="11" '
            f'transform="rotate(-90 {_f(l - 28)} {_f((t + b) / 2)})">{_esc(ylabel)}</text>',
            f'<text x="{_f(l)}" y="{_f(b + 14)}" font-size="10">{_f(self.xlo, 1)}</text>',
            f'<text x="{_f(r)}" y="{_f(b + 14)}" text-anchor="end" font-size="10">{_f(self.xhi, 1)}</text>',
            f'<text x="{_f(l - 4)}" y="{_f(b)}" text-anchor="end" font-size="10">{_f(self.ylo, 1)}</text>',
            f'<text x="{_f(l - 4)}" y="{_f(t + 8)}" text-anchor="end" font-size="10">{_f(self.yhi, 1)}</text>',
        ]


def _limits(vals, pad=0.05):
    lo, hi = min(vals), max(vals)
    d = (hi - lo) * pad or 1.0
    return lo - d, hi + d


def _scatter_panel(x0, y0, pond, ms, trends):
    docs = [m.doc for m in ms]
    ax = _Axes(x0, y0, _limits(docs), _limits([m.length_mm for m in ms]))
    out = ax.frame(f"Pond {pond}: length vs DOC", "DOC (days)", "length (mm)")
    for m in ms:
        out.append(f'<circle cx="{_f(ax.x(m.doc))}" cy="{_f(ax.y(m.length_mm))}" r="2" '
                   f'fill="{_COLOURS[m.source]}" fill-opacity="0.5"/>')
    for k, (source, tl) in enumerate(sorted(trends.items(), key=lambda kv: SOURCES.index(kv[0]))):
        xs = (ax.xlo, ax.xhi)
        out.append(f'<line x1="{_f(ax.x(xs[0]))}" y1="{_f(ax.y(tl(xs[0])))}" x2="{_f(ax.x(xs[1]))}" '
                   f'y2="{_f(ax.y(tl(xs[1])))}" stroke="{_COLOURS[source]}" stroke-width="1.5"/>')
        out.append(f'<text x="{_f(x0 + _PAD + 6)}" y="{_f(y0 + _PAD + 14 + 13 * k)}" font-size="10" '
                   f'fill="{_COLOURS[source]}">{_esc(source)}: {_f(tl.slope, 3)} mm/day, '
                   f'R2 {_f(tl.r2, 3)}</text>')
    return out


def _box_panel(x0, y0, pond, summaries):
    docs = sorted({s.doc for s in summaries})
    sources = [s for s in SOURCES if any(d.source == s for d in summaries)]
    lo, hi = _limits([s.min for s in summaries] + [s.max for s in summaries])
    ax = _Axes(x0, y0, (-0.5, len(docs) - 0.5), (lo, hi))
    out = ax.frame(f"Pond {pond}: daily distribution", "DOC", "length (mm)")
    slot = 0.8 / max(1, len(sources))
    for s in summaries:
        centre = docs.index(s.doc) - 0.4 + slot * (sources.index(s.source) + 0.5)
        xl, xr, xc = ax.x(centre - slot * 0.4), ax.x(centre + slot * 0.4), ax.x(centre)
        c = _COLOURS[s.source]
        out += [
            f'<line x1="{_f(xc)}" y1="{_f(ax.y(s.whisker_lo))}" x2="{_f(xc)}" y2="{_f(ax.y(s.q1))}" stroke="{c}"/>',
            f'<line x1="{_f(xc)}" y1="{_f(ax.y(s.q3))}" x2="{_f(xc)}" y2="{_f(ax.y(s.whisker_hi))}" stroke="{c}"/>',
            f'<rect x="{_f(xl)}" y="{_f(ax.y(s.q3))}" width="{_f(xr - xl)}" '
            f'height="{_f(ax.y(s.q1) - ax.y(s.q3))}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>',
            f'<line x1="{_f(xl)}" y1="{_f(ax.y(s.median))}" x2="{_f(xr)}" y2="{_f(ax.y(s.median))}" '
            f'stroke="#000" stroke-width="1.5"/>',
        ]
    for k, d in enumerate(docs):
        out.append(f'<text x="{_f(ax.x(k))}" y="{_f(y0 + _PANEL_H - _PAD + 14)}" text-anchor="middle" '
                   f'font-size="9">{d}</text>')
    return out


def _hist_panel(x0, y0, pond, ms, bin_width_mm):
    docs = sorted({m.doc for m in ms})
    hists = [length_histogram([m for m in ms if m.doc == d], bin_width_mm=bin_width_mm) for d in docs]
    lo = min(float(h.edges[0]) for h in hists)
    hi = max(float(h.edges[-1]) for h in hists)
    ax = _Axes(x0, y0, (lo, hi), (-0.5, len(docs) - 0.5))
    out = ax.frame(f"Pond {pond}: length distribution by DOC", "length (mm)", "DOC")
    row_h = (_PANEL_H - 2 * _PAD) / max(1, len(docs))
    for k, (d, h) in enumerate(zip(docs, hists)):
        base = ax.y(k) + row_h * 0.4
        peak = max(1, int(h.counts.max()))
        for c, e0, e1 in zip(h.counts, h.edges[:-1], h.edges[1:]):
            if c == 0:
                continue
            bh = row_h * 0.8 * c / peak
            out.append(f'<rect x="{_f(ax.x(e0))}" y="{_f(base - bh)}" width="{_f(ax.x(e1) - ax.x(e0))}" '
                       f'height="{_f(bh)}" fill="#888" fill-opacity="0.6"/>')
        xm = ax.x(h.median)
        out.append(f'<line x1="{_f(xm)}" y1="{_f(base - row_h * 0.8)}" x2="{_f(xm)}" y2="{_f(base)}" '
                   f'stroke="#000" stroke-dasharray="2,2"/>')
        out.append(f'<text x="{_f(x0 + _PAD - 4)}" y="{_f(base)}" text-anchor="end" font-size="9">{d}</text>')
    return out


class ReportBundle(NamedTuple):
    svg: str
    summaries_csv: str
    trend_csv: str

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in (("report.svg", self.svg), ("summaries.csv", self.summaries_csv),
                           ("trend.csv", self.trend_csv)):
            (out / name).write_bytes(text.encode("utf-8"))
        return out


def pond_trends(summaries):
    """Trend line per ``(pond, source)`` wherever two or more DOCs exist."""
    groups = {}
    for s in summaries:
        groups.setdefault((s.pond_id, s.source), []).append(s)
    out = {}
    for key in sorted(groups, key=lambda k: (k[0], SOURCES.index(k[1]))):
        try:
            out[key] = trend_from_summaries(groups[key])
        except DegenerateX:
            continue
    return out


def render_report(ms, rejections=None, bin_width_mm=5.0):
    """Build the SVG report and the summary/trend CSVs.

    Parameters
    ----------
    ms : sequence of Measurement
    rejections : mapping, optional
        ``pond_id -> (n_rejected, n_total)`` instance counts, shown as a
        rejection-rate line per pond.

    Raises
    ------
    EmptyReport
        If ``ms`` holds no measurement.
    """
    ms = sorted(ms, key=lambda m: (m.pond_id, m.doc, SOURCES.index(m.source), m.length_mm))
    if not ms:
        raise EmptyReport("no accepted measurements to report")
    rejections = rejections or {}
    summaries = summarize_by_doc(ms)
    trends = pond_trends(summaries)
    ponds = sorted({m.pond_id for m in ms})

    section_h = _PANEL_H + 30
    width, height = 3 * _PANEL_W, 30 + section_h * len(ponds)
    svg = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f'<rect width="{width}" height="{height}" fill="#fff"/>',
        f'<text x="10" y="20" font-size="15">Prawn length report: {len(ms)} measurements, '
        f'{len(ponds)} pond(s)</text>',
    ]
    for k, pond in enumerate(ponds):
        y0 = 30 + k * section_h
        pm = [m for m in ms if m.pond_id == pond]
        ps = [s for s in summaries if s.pond_id == pond]
        line = f"Pond {pond}: {len(pm)} measurements over {len({m.doc for m in pm})} DOC(s)"
        if pond in rejections:
            rej, total = rejections[pond]
            rate = rej / total if total else 0.0
            line += f"; depth gate rejected {rej} of {total} instances ({_f(100 * rate, 1)}%)"
        svg.append(f'<g id="pond-{_esc(pond)}">')
        svg.append(f'<text x="10" y="{_f(y0 + 14)}" font-size="12">{_esc(line)}</text>')
        svg += _scatter_panel(0, y0 + 10, pond, pm, {s: t for (p, s), t in trends.items() if p == pond})
        svg += _box_panel(_PANEL_W, y0 + 10, pond, ps)
        svg += _hist_panel(2 * _PANEL_W, y0 + 10, pond, pm, bin_width_mm)
        svg.append("</g>")
    svg.append("</svg>")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pond_id", "source", "doc", "n", "min", "q1", "median", "q3", "max", "whisker_lo", "whisker_hi"])
    for s in summaries:
        w.writerow([s.pond_id, s.source, s.doc, s.n] +
                   [f"{v:.3f}" for v in (s.min, s.q1, s.median, s.q3, s.max, s.whisker_lo, s.whisker_hi)])
    tbuf = io.StringIO()
    tw = csv.writer(tbuf, lineterminator="\n")
    tw.writerow(["pond_id", "source", "slope_mm_per_day", "intercept_mm", "r2", "n_docs", "rejection_rate"])
    for (pond, source), tl in trends.items():
        rej = rejections.get(pond)
        rate = "" if rej is None or not rej[1] else f"{rej[0] / rej[1]:.4f}"
        tw.writerow([pond, source, f"{tl.slope:.6f}", f"{tl.intercept:.6f}", f"{tl.r2:.6f}", tl.n, rate])
    return ReportBundle("\n".join(svg) + "\n", buf.getvalue(), tbuf.getvalue())
