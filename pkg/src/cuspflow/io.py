"""Run-directory persistence: field dumps, trace CSVs, manifests and SVG plots."""
from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import MissingArtifactError
from .flow import TRACE_COLUMNS, FlowTrace
from .reports import plain
from .torus import TorusSpec


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> Path:
    path = Path(path)
    _atomic_write(path, (json.dumps(plain(obj), indent=2, sort_keys=True) + "\n").encode())
    return path


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_field(path, field: np.ndarray, spec: TorusSpec, field_name: str, time: float | None = None) -> list[Path]:
    """Raw little-endian f64 dump (y outer, x inner) plus ``<path>.json`` sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(field, dtype="<f8")
    if arr.shape != spec.shape:
        raise ValueError(f"field shape {arr.shape} does not match grid {spec.shape}")
    _atomic_write(path, arr.tobytes())
    side = path.with_name(path.name + ".json")
    write_json(side, {"nx": spec.nx, "ny": spec.ny, "tau_re": spec.tau.real, "tau_im": spec.tau.imag,
                      "offset": spec.offset, "field_name": field_name, "time": time})
    return [path, side]


def read_field(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = read_json(path.with_name(path.name + ".json"))
    arr = np.fromfile(path, dtype="<f8")
    return arr.reshape(meta["ny"], meta["nx"]), meta


def trace_path(out_dir, beta_index: int) -> Path:
    return Path(out_dir) / f"trace_beta{beta_index}.csv"


def field_path(out_dir, beta_index: int, t_index: int, prefix: str = "phi") -> Path:
    return Path(out_dir) / f"{prefix}_b{beta_index}_t{t_index}.f64"


def write_trace_csv(path, trace: FlowTrace) -> Path:
    """Trace records in the fixed column order; floats written with ``repr`` (round-trip exact)."""
    path = Path(path)
    lines = [",".join(TRACE_COLUMNS)]
    for r in trace.records:
        lines.append(",".join(repr(float(r[c])) for c in TRACE_COLUMNS))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
    return path


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != TRACE_COLUMNS:
        raise ValueError(f"{path}: unexpected header {tuple(rows[0].keys())}")
    return [{k: float(v) for k, v in r.items()} for r in rows]


def require(paths: Iterable) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise MissingArtifactError(missing)


class RunDirectory:
    """Single writer for one output directory; every file it writes is indexed.

    ``finalize`` writes ``manifest.json`` last via rename, so a crash leaves the
    previous (or no) manifest and a set of complete individual files.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        if not os.access(self.root, os.W_OK):
            raise PermissionError(f"output directory {self.root} is not writable")
        self.files: list[str] = []

    def _index(self, paths):
        for p in paths:
            rel = str(Path(p).relative_to(self.root))
            if rel not in self.files:
                self.files.append(rel)

    def json(self, name: str, obj) -> Path:
        p = write_json(self.root / name, obj)
        self._index([p])
        return p

    def field(self, name: str, arr, spec, field_name, time=None) -> list[Path]:
        ps = write_field(self.root / name, arr, spec, field_name, time)
        self._index(ps)
        return ps

    def trace(self, beta_index: int, trace: FlowTrace, spec: TorusSpec | None = None,
              dump_fields: bool = True) -> list[Path]:
        ps = [write_trace_csv(trace_path(self.root, beta_index), trace)]
        if dump_fields and spec is not None:
            for i, (r, f) in enumerate(zip(trace.records, trace.fields)):
                ps += write_field(field_path(self.root, beta_index, i), f, spec, "phi", r["t"])
        self._index(ps)
        return ps

    def text(self, name: str, content: str) -> Path:
        p = self.root / name
        _atomic_write(p, content.encode())
        self._index([p])
        return p

    def finalize(self, manifest: dict, name: str = "manifest.json") -> Path:
        manifest = dict(manifest)
        manifest["file_index"] = sorted(self.files)
        return write_json(self.root / name, manifest)


# --- SVG -------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def svg_line_plot(series: Sequence[tuple[str, Sequence[float], Sequence[float]]], title: str = "",
                  xlabel: str = "t", ylabel: str = "", logy: bool = False,
                  width: int = 640, height: int = 400) -> str:
    """Standalone SVG with one polyline per ``(label, x, y)`` series."""
    ml, mr, mt, mb = 70, 150, 30, 45
    pw, ph = width - ml - mr, height - mt - mb
    pts = []
    for label, x, y in series:
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        if logy:
            y = np.where(y > 0, np.log10(np.where(y > 0, y, 1.0)), np.nan)
        ok = np.isfinite(x) & np.isfinite(y)
        pts.append((label, x[ok], y[ok]))
    allx = np.concatenate([p[1] for p in pts]) if pts else np.zeros(0)
    ally = np.concatenate([p[2] for p in pts]) if pts else np.zeros(0)
    if allx.size == 0:
        allx, ally = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(5):
        xv = x0 + k * (x1 - x0) / 4
        yv = y0 + k * (y1 - y0) / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 15}" text-anchor="middle">{_fmt(xv)}</text>')
        ylab = _fmt(10**yv) if logy else _fmt(yv)
        out.append(f'<text x="{ml - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end">{ylab}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2}" transform="rotate(-90 14 {mt + ph / 2})" '
               f'text-anchor="middle">{ylabel}</text>')
    if title:
        out.append(f'<text x="{ml + pw / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>')
    for i, (label, x, y) in enumerate(pts):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = mt + 14 * i + 10
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 30}" y2="{ly}" stroke="{color}"/>')
        out.append(f'<text x="{ml + pw + 35}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
