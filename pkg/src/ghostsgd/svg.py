"""Hand-written SVG charts. Output bytes depend only on the input numbers."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["LineChart", "band_plot", "peak_plot", "grid_plot", "emit_plots", "GRID_METRICS", "RUNS_PER_PAGE"]

COLORS = {"baseline": "#1f5fa8", "ghost": "#c8431c"}
GRID_METRICS = ("train_loss", "test_loss", "test_acc")
RUNS_PER_PAGE = 15


def _n(v: float) -> str:
    return f"{v:.2f}"


class LineChart:
    """One panel: axes box, ticks, polylines and optional bands, in a w×h region."""

    def __init__(self, x0, y0, w, h, xlim, ylim, title="", pad=(34, 8, 22, 18)):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.left, self.right, self.bottom, self.top = pad
        lo, hi = ylim
        if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
            lo, hi = (lo - 0.5, lo + 0.5) if math.isfinite(lo) else (0.0, 1.0)
        self.xlim, self.ylim = xlim, (lo, hi)
        self.title = title
        self.parts: list[str] = []

    def px(self, x: float) -> float:
        a, b = self.xlim
        return self.x0 + self.left + (x - a) / ((b - a) or 1.0) * (self.w - self.left - self.right)

    def py(self, y: float) -> float:
        a, b = self.ylim
        return self.y0 + self.h - self.bottom - (y - a) / (b - a) * (self.h - self.top - self.bottom)

    def _segments(self, xs, ys):
        seg = []
        for x, y in zip(xs, ys):
            if math.isfinite(y):
                seg.append(f"{_n(self.px(x))},{_n(self.py(y))}")
            elif seg:
                yield seg
                seg = []
        if seg:
            yield seg

    def line(self, xs, ys, color, width=1.5):
        for seg in self._segments(xs, ys):
            self.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}" '
                              f'points="{" ".join(seg)}"/>')

    def band(self, xs, lo, hi, color, opacity=0.2):
        upper = [f"{_n(self.px(x))},{_n(self.py(y))}" for x, y in zip(xs, hi)]
        lower = [f"{_n(self.px(x))},{_n(self.py(y))}" for x, y in zip(reversed(xs), reversed(lo))]
        self.parts.append(f'<polygon fill="{color}" fill-opacity="{opacity}" stroke="none" '
                          f'points="{" ".join(upper + lower)}"/>')

    def marker(self, x, y, color, r=3.0):
        self.parts.append(f'<circle cx="{_n(self.px(x))}" cy="{_n(self.py(y))}" r="{r}" fill="{color}"/>')

    def render(self, ticks=True) -> str:
        x1, y1 = self.px(self.xlim[0]), self.py(self.ylim[0])
        x2, y2 = self.px(self.xlim[1]), self.py(self.ylim[1])
        out = [f'<rect x="{_n(x1)}" y="{_n(y2)}" width="{_n(x2 - x1)}" height="{_n(y1 - y2)}" '
               f'fill="none" stroke="#444" stroke-width="0.8"/>']
        if self.title:
            out.append(f'<text x="{_n((x1 + x2) / 2)}" y="{_n(self.y0 + 12)}" font-size="11" '
                       f'text-anchor="middle">{escape(self.title)}</text>')
        if ticks:
            for frac in (0.0, 0.5, 1.0):
                yv = self.ylim[0] + frac * (self.ylim[1] - self.ylim[0])
                out.append(f'<text x="{_n(x1 - 3)}" y="{_n(self.py(yv) + 3)}" font-size="8" '
                           f'text-anchor="end">{yv:.3g}</text>')
                xv = self.xlim[0] + frac * (self.xlim[1] - self.xlim[0])
                out.append(f'<text x="{_n(self.px(xv))}" y="{_n(y1 + 11)}" font-size="8" '
                           f'text-anchor="middle">{xv:.4g}</text>')
        return "\n".join(out + self.parts)


def _document(width, height, body: list[str]) -> str:
    return ("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")


def _limits(arrays) -> tuple[float, float]:
    vals = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays] or [np.zeros(1)])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    return float(vals.min()), float(vals.max())


def _legend(x, y, arms) -> list[str]:
    out = []
    for i, arm in enumerate(arms):
        yy = y + 14 * i
        out.append(f'<line x1="{x}" y1="{yy}" x2="{x + 18}" y2="{yy}" stroke="{COLORS[arm]}" stroke-width="2"/>')
        out.append(f'<text x="{x + 22}" y="{yy + 4}" font-size="10">{arm}</text>')
    return out


def band_plot(band: dict) -> str:
    """Mean test loss per arm with a ±1σ band."""
    arms = [a for a in ("baseline", "ghost") if band.get(a, {}).get("mean")]
    series = []
    for a in arms:
        m, s = np.asarray(band[a]["mean"]), np.asarray(band[a]["sd"])
        series += [m - s, m + s]
    n = max((len(band[a]["mean"]) for a in arms), default=1)
    chart = LineChart(0, 0, 560, 340, (1, max(n, 2)), _limits(series), "mean test loss ±1σ",
                      pad=(50, 16, 30, 24))
    for a in arms:
        m, s = np.asarray(band[a]["mean"]), np.asarray(band[a]["sd"])
        xs = list(range(1, len(m) + 1))
        chart.band(xs, m - s, m + s, COLORS[a])
        chart.line(xs, m, COLORS[a], 1.8)
    return _document(560, 340, [chart.render()] + _legend(440, 40, arms) +
                     ['<text x="280" y="335" font-size="10" text-anchor="middle">epoch</text>'])


def peak_plot(per_run: list[dict], shift_mean, reference) -> str:
    """Paired peak epochs: one line per run from its baseline peak to its ghost peak."""
    pairs = [(r["run_id"], r.get("peak_baseline"), r.get("peak_ghost")) for r in per_run]
    pairs = [p for p in pairs if p[1] is not None and p[2] is not None]
    lo, hi = _limits([[p[1] for p in pairs] + [p[2] for p in pairs]])
    chart = LineChart(0, 0, 420, 360, (0, 1), (lo - 1, hi + 1), "first test-loss peak (epoch)",
                      pad=(50, 50, 40, 24))
    for _, b, g in pairs:
        color = "#2a8a3a" if b > g else "#888888"
        chart.line([0, 1], [b, g], color, 1.0)
        chart.marker(0, b, COLORS["baseline"], 2.5)
        chart.marker(1, g, COLORS["ghost"], 2.5)
    mean_txt = "n/a" if shift_mean is None else f"{shift_mean:.3g}"
    body = [chart.render(ticks=False)]
    for frac in (0.0, 0.5, 1.0):
        yv = chart.ylim[0] + frac * (chart.ylim[1] - chart.ylim[0])
        body.append(f'<text x="{_n(chart.px(0) - 4)}" y="{_n(chart.py(yv) + 3)}" font-size="8" '
                    f'text-anchor="end">{yv:.3g}</text>')
    body += [
        f'<text x="{_n(chart.px(0))}" y="350" font-size="10" text-anchor="middle">baseline</text>',
        f'<text x="{_n(chart.px(1))}" y="350" font-size="10" text-anchor="middle">ghost</text>',
        f'<text x="210" y="332" font-size="10" text-anchor="middle">mean shift {mean_txt} '
        f'(published {reference:g}), {len(pairs)} paired runs</text>',
    ]
    return _document(420, 360, body)


def grid_plot(results, metric: str, run_ids: list[int], cols: int = 5) -> str:
    """Small multiples of one metric, one panel per run, both arms overlaid."""
    rows = max(1, math.ceil(len(run_ids) / cols))
    pw, ph = 180, 130
    by = {(r.run_id, r.arm): r for r in results}
    vals = [getattr(r, metric) for r in results if r.run_id in run_ids]
    ylim = _limits(vals)
    body = []
    for k, rid in enumerate(run_ids):
        x0, y0 = (k % cols) * pw, (k // cols) * ph
        n = max((len(getattr(by[(rid, a)], metric)) for a in ("baseline", "ghost") if (rid, a) in by), default=2)
        chart = LineChart(x0, y0, pw, ph, (1, max(n, 2)), ylim, f"run {rid}")
        for arm in ("baseline", "ghost"):
            r = by.get((rid, arm))
            if r is not None:
                ys = getattr(r, metric)
                chart.line(range(1, len(ys) + 1), ys, COLORS[arm], 1.0)
        body.append(chart.render())
    width, height = cols * pw, rows * ph + 20
    body.append(f'<text x="{width / 2}" y="{height - 5}" font-size="11" '
                f'text-anchor="middle">{metric.replace("_", " ")} per run (blue baseline, red ghost)</text>')
    return _document(width, height, body)


def emit_plots(summary: dict, results, out_dir) -> dict[str, Path]:
    """Band and peak charts plus ceil(runs/15) grid pages for each metric."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    docs = {
        "band": band_plot(summary["band"]),
        "peaks": peak_plot(summary["per_run"], summary.get("paired_shift_mean"), summary["published_shift"]),
    }
    run_ids = sorted({r.run_id for r in results})
    pages = [run_ids[i:i + RUNS_PER_PAGE] for i in range(0, len(run_ids), RUNS_PER_PAGE)]
    for metric in GRID_METRICS:
        for p, ids in enumerate(pages, start=1):
            docs[f"grid_{metric}_p{p}"] = grid_plot(results, metric, ids)
    for name, text in docs.items():
        path = out / f"{name}.svg"
        path.write_text(text)
        written[name] = path
    return written
