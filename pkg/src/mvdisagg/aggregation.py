"""
Regions on a fine grid and the change-of-support projection matrix.

A region is a set of fine-grid cells. The projection matrix ``A`` maps the
values of a field at mesh nodes to regional averages; its rows are
non-negative and sum to one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh_fem import Mesh

log = logging.getLogger(__name__)


class EmptyRegionError(ValueError):
    def __init__(self, region_id: int, what: str = "mesh nodes"):
        self.region_id = region_id
        super().__init__(f"region {region_id} contains no {what}")


@dataclass(frozen=True)
class FineGrid:
    """Regular raster of cells; ``x0, y0`` is the centre of the first cell.
    Cells are ordered row-major by (y, x)."""

    nx: int
    ny: int
    x0: float
    y0: float
    dx: float
    dy: float | None = None

    def __post_init__(self):
        if self.dy is None:
            object.__setattr__(self, "dy", self.dx)
        if self.nx < 1 or self.ny < 1 or not (self.dx > 0 and self.dy > 0):
            raise ValueError(f"invalid grid {self}")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def xs(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.y0 + self.dy * np.arange(self.ny)

    @property
    def points(self) -> np.ndarray:
        xx, yy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([xx.ravel(), yy.ravel()])

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """Outer cell edges."""
        return (self.x0 - self.dx / 2, self.x0 + (self.nx - 0.5) * self.dx,
                self.y0 - self.dy / 2, self.y0 + (self.ny - 0.5) * self.dy)

    @property
    def center_bounds(self) -> tuple[float, float, float, float]:
        return (self.x0, self.x0 + (self.nx - 1) * self.dx,
                self.y0, self.y0 + (self.ny - 1) * self.dy)

    @classmethod
    def unit_square_points(cls, n: int) -> "FineGrid":
        """``n x n`` equally spaced points covering ``[0, 1]^2`` including
        its boundary."""
        return cls(n, n, 0.0, 0.0, 1.0 / (n - 1))

    def refine(self, factor: int) -> "FineGrid":
        """Split every cell into ``factor x factor`` sub-cells."""
        dx, dy = self.dx / factor, self.dy / factor
        return FineGrid(self.nx * factor, self.ny * factor,
                        self.x0 - self.dx / 2 + dx / 2, self.y0 - self.dy / 2 + dy / 2, dx, dy)

    def locate(self, xy: np.ndarray) -> np.ndarray:
        """Flat index of the cell containing each point, -1 outside."""
        xy = np.atleast_2d(xy)
        i = np.floor((xy[:, 0] - self.x0) / self.dx + 0.5).astype(int)
        j = np.floor((xy[:, 1] - self.y0) / self.dy + 0.5).astype(int)
        ok = (i >= 0) & (i < self.nx) & (j >= 0) & (j < self.ny)
        return np.where(ok, j * self.nx + i, -1)


@dataclass(frozen=True)
class RegionSet:
    grid: FineGrid
    cell_assignment: np.ndarray  # region id per cell, -1 = outside the domain

    def __post_init__(self):
        a = np.asarray(self.cell_assignment, dtype=int)
        object.__setattr__(self, "cell_assignment", a)
        if a.shape != (self.grid.n_cells,):
            raise ValueError(f"assignment has {a.size} entries, grid has {self.grid.n_cells} cells")
        if a.size and a.min() < -1:
            raise ValueError("region ids must be >= 0 (or -1 for outside)")
        counts = np.bincount(a[a >= 0], minlength=self.n_regions)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise EmptyRegionError(int(empty[0]), "cells")

    @property
    def n_regions(self) -> int:
        a = self.cell_assignment
        return int(a.max()) + 1 if a.size and a.max() >= 0 else 0

    @property
    def cell_counts(self) -> np.ndarray:
        a = self.cell_assignment
        return np.bincount(a[a >= 0], minlength=self.n_regions)

    def cells(self, region_id: int) -> np.ndarray:
        return np.flatnonzero(self.cell_assignment == region_id)

    def relabel(self, perm) -> "RegionSet":
        """Region ``i`` becomes region ``perm[i]``."""
        perm = np.asarray(perm)
        a = self.cell_assignment
        return RegionSet(self.grid, np.where(a >= 0, perm[np.maximum(a, 0)], -1))


def mesh_membership(mesh: Mesh, regions: RegionSet) -> np.ndarray:
    """Region id of every mesh node (-1 outside all regions).

    A node on the edge between cells belongs to the adjacent cell whose
    region id is lowest.
    """
    g = regions.grid
    xy = mesh.node_coords
    fx = (xy[:, 0] - g.x0) / g.dx + 0.5
    fy = (xy[:, 1] - g.y0) / g.dy + 0.5
    eps = 1e-9
    best = np.full(xy.shape[0], np.iinfo(int).max)
    for ix in (np.floor(fx - eps), np.floor(fx + eps)):
        for iy in (np.floor(fy - eps), np.floor(fy + eps)):
            i, j = ix.astype(int), iy.astype(int)
            ok = (i >= 0) & (i < g.nx) & (j >= 0) & (j < g.ny)
            rid = np.full(xy.shape[0], -1)
            rid[ok] = regions.cell_assignment[j[ok] * g.nx + i[ok]]
            take = rid >= 0
            best[take] = np.minimum(best[take], rid[take])
    best[best == np.iinfo(int).max] = -1
    return best


def p1_weights(mesh: Mesh, xy: np.ndarray) -> sp.csr_matrix:
    """Piecewise-linear basis values ``psi_k(s)`` at the points ``xy``
    (one row per point). Raises if a point lies outside the mesh."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    x0, y0 = mesh.origin
    u = (xy[:, 0] - x0) / mesh.h
    v = (xy[:, 1] - y0) / mesh.h
    tol = 1e-9
    outside = (u < -tol) | (v < -tol) | (u > mesh.nx - 1 + tol) | (v > mesh.ny - 1 + tol)
    if np.any(outside):
        k = int(np.flatnonzero(outside)[0])
        raise ValueError(f"point {tuple(xy[k])} lies outside the mesh {mesh.extent}")
    i = np.clip(np.floor(u).astype(int), 0, mesh.nx - 2)
    j = np.clip(np.floor(v).astype(int), 0, mesh.ny - 2)
    a = np.clip(u - i, 0.0, 1.0)
    b = np.clip(v - j, 0.0, 1.0)
    ll = j * mesh.nx + i
    lr, ul, ur = ll + 1, ll + mesh.nx, ll + mesh.nx + 1
    lower = a >= b  # triangle (ll, lr, ur)
    w_ll = np.where(lower, 1.0 - a, 1.0 - b)
    w_mid = np.where(lower, a - b, b - a)
    mid = np.where(lower, lr, ul)
    w_ur = np.where(lower, b, a)
    n = xy.shape[0]
    rows = np.repeat(np.arange(n), 3)
    cols = np.column_stack([ll, mid, ur]).ravel()
    vals = np.column_stack([w_ll, w_mid, w_ur]).ravel()
    W = sp.csr_matrix((vals, (rows, cols)), shape=(n, mesh.n_nodes))
    W.eliminate_zeros()
    return W


PROJECTION_MODES = ("uniform", "subgrid", "interp")


def build_projection(mesh: Mesh, regions: RegionSet, mode: str = "uniform", s: int = 8,
                     empty_fallback: bool = False) -> sp.csr_matrix:
    """
    Projection matrix ``A`` (``n_regions x n_nodes``).

    Modes
    -----
    uniform
        ``A_ik = 1 / n_i`` over the ``n_i`` mesh nodes lying in region ``i``.
    subgrid
        ``|R_ik| / |R_i|`` estimated from ``s x s`` sample points per cell,
        each credited to its nearest mesh node.
    interp
        average over the region's cell centres of the piecewise-linear
        basis functions.

    With ``empty_fallback`` a region without any mesh node (uniform mode) is
    given weight one on the node nearest its cell centroid.
    """
    N, G = regions.n_regions, mesh.n_nodes
    if mode == "uniform":
        member = mesh_membership(mesh, regions)
        rows, cols = [], []
        counts = np.bincount(member[member >= 0], minlength=N)
        for rid in np.flatnonzero(counts == 0):
            if not empty_fallback:
                raise EmptyRegionError(int(rid))
            centroid = regions.grid.points[regions.cells(rid)].mean(axis=0)
            node = _nearest_node(mesh, centroid[None, :])[0]
            log.info("region %d has no mesh node; using node %d", rid, node)
            rows.append(np.array([rid]))
            cols.append(np.array([node]))
        inside = np.flatnonzero(member >= 0)
        rows.append(member[inside])
        cols.append(inside)
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        n_i = np.bincount(rows, minlength=N)
        A = sp.csr_matrix((1.0 / n_i[rows], (rows, cols)), shape=(N, G))
    elif mode == "subgrid":
        if s < 1:
            raise ValueError("subgrid resolution must be >= 1")
        g = regions.grid
        cells = np.flatnonzero(regions.cell_assignment >= 0)
        off = (np.arange(s) + 0.5) / s - 0.5
        ox, oy = np.meshgrid(off * g.dx, off * g.dy)
        centers = g.points[cells]
        pts = (centers[:, None, :] + np.column_stack([ox.ravel(), oy.ravel()])[None]).reshape(-1, 2)
        rid = np.repeat(regions.cell_assignment[cells], s * s)
        node = _nearest_node(mesh, pts)
        A = sp.csr_matrix((np.ones(rid.size), (rid, node)), shape=(N, G))
        A.sum_duplicates()
        A = sp.diags(1.0 / np.asarray(A.sum(axis=1)).ravel()) @ A
    elif mode == "interp":
        cells = np.flatnonzero(regions.cell_assignment >= 0)
        W = p1_weights(mesh, regions.grid.points[cells])
        rid = regions.cell_assignment[cells]
        S = sp.csr_matrix((np.ones(cells.size), (rid, np.arange(cells.size))), shape=(N, cells.size))
        A = sp.diags(1.0 / regions.cell_counts) @ S @ W
    else:
        raise ValueError(f"unknown projection mode {mode!r}")
    A = sp.csr_matrix(A)
    A.sort_indices()
    return A


def _nearest_node(mesh: Mesh, xy: np.ndarray) -> np.ndarray:
    x0, y0 = mesh.origin
    i = np.clip(np.floor((xy[:, 0] - x0) / mesh.h + 0.5), 0, mesh.nx - 1).astype(int)
    j = np.clip(np.floor((xy[:, 1] - y0) / mesh.h + 0.5), 0, mesh.ny - 1).astype(int)
    return j * mesh.nx + i


def aggregate_field(field, regions: RegionSet) -> np.ndarray:
    """Arithmetic mean of ``field`` (one value per fine cell) per region."""
    field = np.asarray(field, dtype=float)
    a = regions.cell_assignment
    if field.shape[0] != a.size:
        raise ValueError(f"field has {field.shape[0]} values, grid has {a.size} cells")
    inside = a >= 0
    sums = np.bincount(a[inside], weights=field[inside], minlength=regions.n_regions)
    return sums / regions.cell_counts


def average_covariates(rasters, regions: RegionSet) -> np.ndarray:
    """Regional means of each covariate column with an intercept column
    prepended. ``rasters`` is ``(n_cells,)`` or ``(n_cells, p)``; ``None``
    gives the intercept only."""
    N = regions.n_regions
    if rasters is None:
        return np.ones((N, 1))
    X = np.asarray(rasters, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    a = regions.cell_assignment
    if X.shape[0] != a.size:
        raise ValueError(f"covariate raster has {X.shape[0]} cells, grid has {a.size}")
    bad = np.flatnonzero((a >= 0) & ~np.all(np.isfinite(X), axis=1))
    if bad.size:
        listed = ", ".join(str(c) for c in bad[:10])
        more = f" (+{bad.size - 10} more)" if bad.size > 10 else ""
        raise ValueError(f"missing covariate values in region cells: {listed}{more}")
    cols = [aggregate_field(X[:, c], regions) for c in range(X.shape[1])]
    return np.column_stack([np.ones(N)] + cols)
