"""CSV, SVG and manifest emission for benchmark bundles.

Output files (all optional parts depend on what the bundle holds):

``manifest.json``
    config hash, resolved config, seeds, Riccati optimum, status.
``convergence.csv``
    ``iter,cost_mean,cost_min,cost_max,subopt_mean,subopt_min,subopt_max,repetitions``
``mesh_sweep.csv``
    ``intervals,n_scaled,n_unscaled,n_reference,cstar_scaled,cstar_unscaled``
``convergence.svg`` / ``mesh_sweep.svg``
    simple polyline charts, suboptimality on a log axis.

Numbers are written with ``repr`` (CSV) or fixed precision (SVG) so the
bytes depend only on the bundle.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .bench import ReportBundle
from .pg import SweepTable

FORMATS = ("csv", "svg", "both")
CONVERGENCE_COLUMNS = "iter,cost_mean,cost_min,cost_max,subopt_mean,subopt_min,subopt_max,repetitions"
SWEEP_COLUMNS = "intervals,n_scaled,n_unscaled,n_reference,cstar_scaled,cstar_unscaled"

W, H = 640, 400
ML, MR, MT, MB = 70, 20, 30, 50


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def convergence_rows(bundle: ReportBundle) -> list[str]:
    C = bundle.stacked()
    rows = [CONVERGENCE_COLUMNS]
    if C.size == 0:
        return rows
    ref = bundle.cstar
    with np.errstate(all="ignore"):
        for n in range(C.shape[1]):
            col = C[:, n]
            col = col[np.isfinite(col)]
            if col.size == 0:
                continue
            s = col - ref
            rows.append(
                ",".join(
                    [str(n), _fmt(col.mean()), _fmt(col.min()), _fmt(col.max()),
                     _fmt(s.mean()), _fmt(s.min()), _fmt(s.max()), str(col.size)]
                )
            )
    return rows


def sweep_rows(sweep: SweepTable | None) -> list[str]:
    rows = [SWEEP_COLUMNS]
    if sweep is None:
        return rows
    ref = "" if sweep.n_reference is None else str(sweep.n_reference)
    for r in sweep.rows:
        rows.append(
            f"{'' if r.intervals is None else r.intervals},{'' if r.n_scaled is None else r.n_scaled},"
            f"{'' if r.n_unscaled is None else r.n_unscaled},{ref},{_fmt(r.cstar_scaled)},{_fmt(r.cstar_unscaled)}"
        )
    return rows


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------


def _axes(title: str, xlabel: str, ylabel: str, xticks, yticks) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{ML}" y1="{H - MB}" x2="{W - MR}" y2="{H - MB}" stroke="black"/>',
        f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{H - MB}" stroke="black"/>',
        f'<text x="{(ML + W - MR) / 2:.1f}" y="{H - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="15" y="{(MT + H - MB) / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {(MT + H - MB) / 2:.1f})">{ylabel}</text>',
    ]
    for px, label in xticks:
        out.append(f'<line x1="{px:.2f}" y1="{H - MB}" x2="{px:.2f}" y2="{H - MB + 5}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{H - MB + 18}" text-anchor="middle" font-size="11">{label}</text>')
    for py, label in yticks:
        out.append(f'<line x1="{ML - 5}" y1="{py:.2f}" x2="{ML}" y2="{py:.2f}" stroke="black"/>')
        out.append(f'<text x="{ML - 8}" y="{py + 4:.2f}" text-anchor="end" font-size="11">{label}</text>')
    return out


def _scale(lo: float, hi: float, a: float, b: float):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _points(xs, ys) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def convergence_svg(bundle: ReportBundle, floor: float = 1e-12) -> str:
    """Suboptimality (log axis) against iteration with a min/max band."""
    C = bundle.stacked()
    if C.size == 0 or bundle.cstar is None:
        return "\n".join(_axes("Convergence", "iteration", "suboptimality", [], []) + ["</svg>"]) + "\n"
    S = np.maximum(C - bundle.cstar, floor)
    with np.errstate(all="ignore"):
        mean, lo, hi = np.nanmean(S, axis=0), np.nanmin(S, axis=0), np.nanmax(S, axis=0)
    it = np.arange(S.shape[1])
    y_lo = math.floor(math.log10(float(np.nanmin(lo))))
    y_hi = math.ceil(math.log10(float(np.nanmax(hi))))
    if y_hi == y_lo:
        y_hi += 1
    fx = _scale(0, max(it[-1], 1), ML, W - MR)
    fy = _scale(y_lo, y_hi, H - MB, MT)
    step = max(1, (y_hi - y_lo + 5) // 6)
    yticks = [(fy(e), f"1e{e}") for e in range(y_lo, y_hi + 1, step)]
    nx = max(it[-1], 1)
    xticks = [(fx(v), str(v)) for v in sorted({int(round(nx * f)) for f in (0, 0.25, 0.5, 0.75, 1.0)})]
    out = _axes("Convergence", "iteration", "suboptimality", xticks, yticks)
    xs = [fx(v) for v in it]
    band = _points(xs + xs[::-1], [fy(math.log10(v)) for v in hi] + [fy(math.log10(v)) for v in lo[::-1]])
    out.append(f'<polygon points="{band}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>')
    out.append(
        f'<polyline points="{_points(xs, [fy(math.log10(v)) for v in mean])}" fill="none" stroke="#08519c" stroke-width="1.5"/>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def sweep_svg(sweep: SweepTable | None) -> str:
    """Iteration counts against the number of policy intervals (log2 axis)."""
    rows = [] if sweep is None else [r for r in sweep.rows if r.intervals]
    if not rows:
        return "\n".join(_axes("Mesh sweep", "intervals", "iterations to tolerance", [], []) + ["</svg>"]) + "\n"
    xs = [math.log2(r.intervals) for r in rows]
    vals = [v for r in rows for v in (r.n_scaled, r.n_unscaled) if v is not None]
    if sweep.n_reference is not None:
        vals.append(sweep.n_reference)
    ymax = max(vals) if vals else 1
    fx = _scale(min(xs), max(xs), ML + 20, W - MR - 20)
    fy = _scale(0, ymax * 1.05, H - MB, MT)
    xticks = [(fx(x), str(r.intervals)) for x, r in zip(xs, rows)]
    yticks = [(fy(v), str(int(v))) for v in np.linspace(0, ymax, 5).round()]
    out = _axes("Mesh sweep", "intervals", "iterations to tolerance", xticks, yticks)
    for attr, colour in (("n_scaled", "#08519c"), ("n_unscaled", "#cb181d")):
        pts = [(fx(x), fy(getattr(r, attr))) for x, r in zip(xs, rows) if getattr(r, attr) is not None]
        if pts:
            out.append(
                f'<polyline points="{_points(*zip(*pts))}" fill="none" stroke="{colour}" stroke-width="1.5"/>'
            )
            out.extend(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{colour}"/>' for px, py in pts)
    if sweep.n_reference is not None:
        y = fy(sweep.n_reference)
        out.append(
            f'<line x1="{ML}" y1="{y:.2f}" x2="{W - MR}" y2="{y:.2f}" stroke="gray" stroke-dasharray="4 3"/>'
        )
    out.append(f'<text x="{W - MR - 5}" y="{MT + 12}" text-anchor="end" font-size="11" fill="#08519c">scaled</text>')
    out.append(f'<text x="{W - MR - 5}" y="{MT + 26}" text-anchor="end" font-size="11" fill="#cb181d">unscaled</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def _write(path: Path, text: str) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def write_manifest(bundle: ReportBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return _write(out / "manifest.json", json.dumps(bundle.manifest(), sort_keys=True, indent=2) + "\n")


def emit_report(bundle: ReportBundle, out_dir, format: str = "both") -> list[Path]:
    """Write the bundle into ``out_dir``; returns the written paths in a fixed order."""
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [write_manifest(bundle, out)]
        if bundle.dry_run:
            return written
        if format in ("csv", "both"):
            written.append(_write(out / "convergence.csv", "\n".join(convergence_rows(bundle)) + "\n"))
            written.append(_write(out / "mesh_sweep.csv", "\n".join(sweep_rows(bundle.sweep)) + "\n"))
        if format in ("svg", "both"):
            written.append(_write(out / "convergence.svg", convergence_svg(bundle)))
            written.append(_write(out / "mesh_sweep.svg", sweep_svg(bundle.sweep)))
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc.strerror}") from exc
    return written


__all__ = [
    "CONVERGENCE_COLUMNS",
    "FORMATS",
    "SWEEP_COLUMNS",
    "convergence_rows",
    "convergence_svg",
    "emit_report",
    "sweep_rows",
    "sweep_svg",
    "write_manifest",
]
