"""
CSV formats: rasters (``x, y, value...`` row-major by (y, x)), region
assignments (``cell_x, cell_y, region_id``) and regional observations
(``region_id, value...``).

Every written file starts with one comment line naming the tool version,
config hash and seed. Readers skip lines starting with ``#``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import FineGrid, RegionSet

TOOL = "mvdisagg"


class FormatError(ValueError):
    """Malformed input file; the message carries file and line."""

    def __init__(self, path, line, message):
        self.path, self.line = str(path), line
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {message}")


def header_line(config_hash: str, seed: int) -> str:
    return f"# {TOOL} {__version__} config={config_hash} seed={seed}"


def fmt(v) -> str:
    """Shortest round-tripping text for a number; NaN becomes ``NA``."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "NA"
    return repr(v)


def write_csv(path, columns, rows, header: str, comments=()) -> Path:
    """Write ``rows`` under ``header`` (and optional extra ``# `` lines).
    Output is a pure function of the arguments."""
    buf = io.StringIO()
    buf.write(header + "\n")
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def _read_table(path, na_token: str = "NA"):
    """Header names, data rows as float arrays, and the file line of each
    row."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(path, 0, "file not found")
    names, rows, lines = None, [], []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (rec[0].lstrip().startswith("#")):
                continue
            rec = [c.strip() for c in rec]
            if names is None:
                names = rec
                if len(set(names)) != len(names):
                    raise FormatError(path, lineno, "duplicate column names")
                continue
            if len(rec) != len(names):
                raise FormatError(path, lineno, f"expected {len(names)} fields, got {len(rec)}")
            vals = []
            for name, c in zip(names, rec):
                if c == na_token or c == "":
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(c))
                except ValueError:
                    raise FormatError(path, lineno, f"column {name!r}: not a number: {c!r}") from None
            rows.append(vals)
            lines.append(lineno)
    if names is None:
        raise FormatError(path, 0, "no header row")
    if not rows:
        raise FormatError(path, 0, "no data rows")
    return names, np.array(rows, dtype=float), np.array(lines)


def _axis(values, path, name):
    u = np.unique(values)
    if u.size == 1:
        return u, 1.0
    d = np.diff(u)
    step = float(np.median(d))
    if np.any(np.abs(d - step) > 1e-6 * step):
        raise FormatError(path, 0, f"{name} coordinates are not evenly spaced")
    return u, step


def _grid_from_coords(xy, lines, path, xname="x", yname="y") -> tuple[FineGrid, np.ndarray]:
    """Infer the raster and map every row to its flat cell index."""
    if not np.all(np.isfinite(xy)):
        bad = lines[np.flatnonzero(~np.all(np.isfinite(xy), axis=1))[0]]
        raise FormatError(path, bad, "missing coordinate")
    ux, dx = _axis(xy[:, 0], path, xname)
    uy, dy = _axis(xy[:, 1], path, yname)
    if ux.size == 1:
        dx = dy
    if uy.size == 1:
        dy = dx
    grid = FineGrid(ux.size, uy.size, float(ux[0]), float(uy[0]), dx, dy)
    i = np.rint((xy[:, 0] - grid.x0) / dx).astype(int)
    j = np.rint((xy[:, 1] - grid.y0) / dy).astype(int)
    idx = j * grid.nx + i
    order = np.argsort(idx, kind="stable")
    dup = np.flatnonzero(np.diff(idx[order]) == 0)
    if dup.size:
        raise FormatError(path, lines[order[dup[0] + 1]], "duplicate coordinate")
    if idx.size != grid.n_cells:
        raise FormatError(path, 0, f"incomplete raster: {idx.size} rows for a {grid.nx} x {grid.ny} grid")
    return grid, idx


@dataclass(frozen=True)
class RasterCsv:
    grid: FineGrid
    columns: tuple
    values: np.ndarray  # (n_cells, n_columns), row-major by (y, x)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise KeyError(f"raster has no column {name!r} (columns: {', '.join(self.columns)})") from None


def read_raster(path, na_token: str = "NA") -> RasterCsv:
    names, data, lines = _read_table(path, na_token)
    if names[:2] != ["x", "y"]:
        raise FormatError(path, 0, "first two columns must be x, y")
    if len(names) < 3:
        raise FormatError(path, 0, "no value columns")
    grid, idx = _grid_from_coords(data[:, :2], lines, path)
    values = np.empty((grid.n_cells, len(names) - 2))
    values[idx] = data[:, 2:]
    return RasterCsv(grid, tuple(names[2:]), values)


def raster_rows(grid: FineGrid, values) -> list:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[0] != grid.n_cells:
        values = values.T
    pts = grid.points
    return [(pts[c, 0], pts[c, 1], *values[c]) for c in range(grid.n_cells)]


def write_raster(path, grid: FineGrid, columns, values, header: str, comments=()) -> Path:
    return write_csv(path, ["x", "y", *columns], raster_rows(grid, values), header, comments)


def read_regions(path) -> RegionSet:
    names, data, lines = _read_table(path)
    if names != ["cell_x", "cell_y", "region_id"]:
        raise FormatError(path, 0, "columns must be cell_x, cell_y, region_id")
    grid, idx = _grid_from_coords(data[:, :2], lines, path, "cell_x", "cell_y")
    ids = data[:, 2]
    bad = np.flatnonzero(~np.isfinite(ids) | (ids != np.round(ids)) | (ids < -1))
    if bad.size:
        raise FormatError(path, lines[bad[0]], "region_id must be an integer >= -1")
    a = np.empty(grid.n_cells, dtype=int)
    a[idx] = ids.astype(int)
    try:
        return RegionSet(grid, a)
    except ValueError as exc:
        raise FormatError(path, 0, str(exc)) from None


def write_regions(path, regions: RegionSet, header: str) -> Path:
    pts = regions.grid.points
    rows = [(pts[c, 0], pts[c, 1], int(r)) for c, r in enumerate(regions.cell_assignment)]
    return write_csv(path, ["cell_x", "cell_y", "region_id"], rows, header)


def read_obs(path, na_token: str = "NA") -> tuple[list, np.ndarray]:
    """Variable names and values ``(M, N)`` ordered by region id."""
    names, data, lines = _read_table(path, na_token)
    if names[0] != "region_id" or len(names) < 2:
        raise FormatError(path, 0, "columns must be region_id followed by one column per variable")
    ids = data[:, 0]
    if not np.all(np.isfinite(ids)) or np.any(ids != np.round(ids)):
        raise FormatError(path, 0, "region_id must be an integer")
    ids = ids.astype(int)
    order = np.argsort(ids, kind="stable")
    if not np.array_equal(ids[order], np.arange(ids.size)):
        raise FormatError(path, 0, f"region ids must be exactly 0..{ids.size - 1}, each once")
    vals = data[order, 1:]
    bad = np.flatnonzero(~np.all(np.isfinite(vals), axis=1))
    if bad.size:
        raise FormatError(path, lines[order[bad[0]]], "missing observation")
    return names[1:], vals.T.copy()


def write_obs(path, variables, Y, header: str) -> Path:
    Y = np.atleast_2d(Y)
    rows = [(i, *Y[:, i]) for i in range(Y.shape[1])]
    return write_csv(path, ["region_id", *variables], rows, header)


def grids_aligned(a: FineGrid, b: FineGrid, rtol: float = 1e-6) -> bool:
    tol = rtol * min(a.dx, a.dy)
    return (a.nx == b.nx and a.ny == b.ny and abs(a.x0 - b.x0) <= tol and abs(a.y0 - b.y0) <= tol
            and abs(a.dx - b.dx) <= tol and abs(a.dy - b.dy) <= tol)
