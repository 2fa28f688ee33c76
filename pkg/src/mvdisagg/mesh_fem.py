"""
Regular lattice meshes, P1 finite-element matrices and the SPDE precision
of a Matern (nu = 1) Gaussian field in two dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import kv

#: Matern smoothness. Fixed, the SPDE uses alpha = nu + d/2 = 2.
NU = 1.0

_TOL = 1e-9


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    """Full rectangular lattice; node ``k = j * nx + i`` sits at
    ``origin + (i * h, j * h)``."""

    nx: int
    ny: int
    h: float
    origin: tuple[float, float]
    interior_mask: np.ndarray
    domain: tuple[float, float, float, float]
    n_ext: int = 0

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def node_coords(self) -> np.ndarray:
        ii, jj = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        x = self.origin[0] + ii.ravel() * self.h
        y = self.origin[1] + jj.ravel() * self.h
        return np.column_stack([x, y])

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, x0 + (self.nx - 1) * self.h, y0, y0 + (self.ny - 1) * self.h)

    def triangles(self) -> np.ndarray:
        """Node triples of the triangulation; every cell is split along the
        diagonal from its lower-left to its upper-right corner."""
        ii, jj = np.meshgrid(np.arange(self.nx - 1), np.arange(self.ny - 1))
        ll = (jj * self.nx + ii).ravel()
        lr, ul, ur = ll + 1, ll + self.nx, ll + self.nx + 1
        lower = np.column_stack([ll, lr, ur])
        upper = np.column_stack([ll, ur, ul])
        return np.vstack([lower, upper])


@dataclass(frozen=True)
class FemMatrices:
    C: sp.csc_matrix  # lumped mass, diagonal
    G: sp.csc_matrix  # stiffness
    GCG: sp.csc_matrix = field(repr=False, default=None)

    @property
    def mass(self) -> np.ndarray:
        return self.C.diagonal()


@dataclass(frozen=True)
class MaternParams:
    sigma2: float
    rho: float
    nu: float = NU

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.rho > 0):
            raise ValueError(f"Matern parameters must be positive, got {self}")
        if self.nu != NU:
            raise ValueError("only nu = 1 is supported")


def build_lattice_mesh(domain, h: float, ext: float = 0.0) -> Mesh:
    """
    Lattice covering ``domain = (xmin, xmax, ymin, ymax)`` grown by ``ext``
    on every side.

    The spacing is the largest value <= ``h`` that divides the domain width
    exactly, so the left/right/bottom domain edges are lattice lines. The top
    edge is covered (a node row lies on or just above it).
    """
    xmin, xmax, ymin, ymax = map(float, domain)
    width, height = xmax - xmin, ymax - ymin
    if not (h > 0) or not math.isfinite(h):
        raise MeshError(f"mesh spacing must be positive, got {h}")
    if not (width > 0 and height > 0):
        raise MeshError(f"degenerate domain {domain}")
    if not (ext >= 0):
        raise MeshError(f"extension width must be >= 0, got {ext}")

    n_cells_x = max(1, math.ceil(width / h - _TOL))
    hh = width / n_cells_x
    n_cells_y = max(1, math.ceil(height / hh - _TOL))
    n_ext = math.ceil(ext / hh - _TOL) if ext > 0 else 0

    nx = n_cells_x + 1 + 2 * n_ext
    ny = n_cells_y + 1 + 2 * n_ext
    origin = (xmin - n_ext * hh, ymin - n_ext * hh)

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    x = origin[0] + ii.ravel() * hh
    y = origin[1] + jj.ravel() * hh
    tol = 1e-9 * hh
    interior = (x >= xmin - tol) & (x <= xmax + tol) & (y >= ymin - tol) & (y <= ymax + tol)
    return Mesh(nx, ny, hh, origin, interior, (xmin, xmax, ymin, ymax), n_ext)


def assemble_fem(mesh: Mesh) -> FemMatrices:
    """Lumped mass ``C`` and stiffness ``G`` of the P1 basis on ``mesh``."""
    tri = mesh.triangles()
    xy = mesh.node_coords
    p = xy[tri]  # (T, 3, 2)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    # gradient of barycentric coordinate a is rot90 of the opposite edge / 2A
    opp = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    local = np.einsum("tad,tbd->tab", opp, opp) / (4.0 * area)[:, None, None]

    n = mesh.n_nodes
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    G = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    G.sum_duplicates()
    G.eliminate_zeros()
    G = ((G + G.T) * 0.5).tocsc()

    mass = np.bincount(tri.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    C = sp.diags(mass, format="csc")
    GCG = (G @ sp.diags(1.0 / mass) @ G).tocsc()
    return FemMatrices(C=C, G=G, GCG=GCG)


def matern_to_spde(p: MaternParams) -> tuple[float, float]:
    kappa = math.sqrt(8.0 * p.nu) / p.rho
    tau = 1.0 / (kappa * math.sqrt(p.sigma2) * math.sqrt(4.0 * math.pi))
    return kappa, tau


def spde_to_matern(kappa: float, tau: float) -> MaternParams:
    rho = math.sqrt(8.0 * NU) / kappa
    sigma2 = 1.0 / (4.0 * math.pi * kappa**2 * tau**2)
    return MaternParams(sigma2=sigma2, rho=rho)


def spde_precision(fem: FemMatrices, kappa: float, tau: float) -> sp.csc_matrix:
    """``tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G)``."""
    if not (kappa > 0 and tau > 0):
        raise ValueError(f"kappa and tau must be positive, got {kappa}, {tau}")
    k2 = kappa * kappa
    Q = (k2 * k2) * fem.C + (2.0 * k2) * fem.G + fem.GCG
    return (tau * tau * Q).tocsc()


def matern_correlation(d, rho: float) -> np.ndarray:
    """Matern nu = 1 correlation ``(kappa d) K_1(kappa d)`` with
    ``kappa = sqrt(8) / rho``."""
    d = np.asarray(d, dtype=float)
    x = (math.sqrt(8.0) / rho) * d
    out = np.ones_like(x)
    pos = x > 0
    out[pos] = x[pos] * kv(1.0, x[pos])
    return out


def matern_covariance(d, sigma2: float, rho: float) -> np.ndarray:
    return sigma2 * matern_correlation(d, rho)


def default_extension(domain, range_guess: float | None = None) -> float:
    xmin, xmax, ymin, ymax = domain
    diag = math.hypot(xmax - xmin, ymax - ymin)
    ext = 0.25 * diag
    if range_guess is not None:
        ext = max(ext, 2.0 * range_guess)
    return ext
