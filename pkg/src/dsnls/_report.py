"""Experiment report containers and artifact writers (JSON, CSV, SVG)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class Verdict:
    passed: bool
    criterion: str
    detail: str = ""

    def to_json(self):
        return {"passed": bool(self.passed), "criterion": self.criterion, "detail": self.detail}


@dataclass
class Series:
    t: np.ndarray
    value: np.ndarray
    stderr: np.ndarray | None = None

    def to_rows(self):
        se = self.stderr if self.stderr is not None else np.full(len(self.t), math.nan)
        return list(zip(self.t.tolist(), self.value.tolist(), np.asarray(se).tolist()))


@dataclass
class ExperimentReport:
    name: str
    config: dict
    series: dict = field(default_factory=dict)  # name -> Series
    scalars: dict = field(default_factory=dict)  # name -> (value, stderr)
    verdicts: dict = field(default_factory=dict)  # name -> Verdict
    sample_counts: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def add_series(self, name, t, value, stderr=None):
        self.series[name] = Series(np.asarray(t, float), np.asarray(value, float),
                                   None if stderr is None else np.asarray(stderr, float))

    def add_scalar(self, name, value, stderr=float("nan")):
        self.scalars[name] = (float(value), float(stderr))

    def add_verdict(self, name, passed, criterion, detail=""):
        self.verdicts[name] = Verdict(bool(passed), criterion, detail)

    @property
    def all_passed(self) -> bool:
        return all(v.passed for v in self.verdicts.values())

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "config": self.config,
            "scalars": {k: {"value": v, "stderr": s} for k, (v, s) in self.scalars.items()},
            "verdicts": {k: v.to_json() for k, v in self.verdicts.items()},
            "series": {k: {"n": len(s.t)} for k, s in self.series.items()},
            "sample_counts": self.sample_counts,
            "wall_clock_s": self.wall_clock,
            "all_passed": self.all_passed,
        }

    def summary_lines(self) -> list[str]:
        lines = [f"experiment: {self.name}"]
        for k, (v, s) in self.scalars.items():
            se = "" if math.isnan(s) else f" +/- {s:.3g}"
            lines.append(f"  {k:38s} {v:.6g}{se}")
        for k, v in self.verdicts.items():
            mark = "PASS" if v.passed else "FAIL"
            lines.append(f"  [{mark}] {k}: {v.criterion}" + (f" ({v.detail})" if v.detail else ""))
        return lines

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as f:
            json.dump(self.to_json(), f, indent=2, default=_json_default)
            f.write("\n")
        for name, s in self.series.items():
            write_series_csv(out / f"series_{name}.csv", s)
            svg_line_plot(out / f"plot_{name}.svg", s.t, s.value, title=name)
        return out / "report.json"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if o == math.inf:
        return "inf"
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_series_csv(path, series: Series):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)  # RFC 4180 quoting via the csv module
        w.writerow(["t", "value", "stderr"])
        for row in series.to_rows():
            w.writerow(row)


def write_jsonl(path, rows):
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, default=_json_default))
            f.write("\n")


def write_trajectory_csv(path, traj):
    """Columns (t, k, Re u_k, Im u_k) for every snapshot and mode."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "k", "re_u_k", "im_u_k"])
        for t, c in zip(traj.times, traj.coeffs):
            for k in range(c.size):
                w.writerow([t, k + 1, c[k].real, c[k].imag])


def svg_line_plot(path, x, y, title="", width=640, height=400):
    """Minimal dependency-free SVG line plot."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    mL, mR, mT, mB = 60, 15, 30, 40
    iw, ih = width - mL - mR, height - mT - mB
    if x.size == 0:
        x = np.array([0.0, 1.0])
        y = np.array([0.0, 0.0])
    x0, x1 = float(x.min()), float(x.max())
    y0, y1 = float(y.min()), float(y.max())
    if x1 - x0 < 1e-300:
        x1 = x0 + 1.0
    if y1 - y0 < 1e-300:
        y1 = y0 + 1.0

    def sx(v):
        return mL + (v - x0) / (x1 - x0) * iw

    def sy(v):
        return mT + (1.0 - (v - y0) / (y1 - y0)) * ih

    pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" '
        f'font-family="monospace" font-size="13">{title}</text>',
        f'<line x1="{mL}" y1="{mT}" x2="{mL}" y2="{height - mB}" stroke="black"/>',
        f'<line x1="{mL}" y1="{height - mB}" x2="{width - mR}" y2="{height - mB}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = x0 + frac * (x1 - x0)
        yv = y0 + frac * (y1 - y0)
        parts.append(
            f'<text x="{sx(xv):.0f}" y="{height - mB + 16}" text-anchor="middle" '
            f'font-family="monospace" font-size="10">{xv:.3g}</text>'
        )
        parts.append(
            f'<text x="{mL - 6}" y="{sy(yv) + 3:.0f}" text-anchor="end" '
            f'font-family="monospace" font-size="10">{yv:.3g}</text>'
        )
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f6fb2" stroke-width="1.5"/>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
