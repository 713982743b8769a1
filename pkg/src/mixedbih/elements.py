"""Reference elements, quadrature, Piola maps and interpolation.

Reference triangle has vertices (0, 0), (1, 0), (0, 1).  Local edges are
numbered opposite their vertex and traversed counter-clockwise::

    e0 = (1, 2),  e1 = (2, 0),  e2 = (0, 1)

so the outward normal of an edge is the clockwise rotation of its tangent.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np
from numpy.polynomial import legendre
from scipy.special import roots_jacobi

LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])
REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

MAX_QUAD_DEGREE = 20
SUPPORTED_DG = (0, 1, 2, 3)
SUPPORTED_RT = (1, 2, 3, 4)


class ElementError(ValueError):
    pass


@dataclass(frozen=True)
class QuadRule:
    """Quadrature on the reference triangle.

    ``points`` holds reference (x, y) coordinates; ``barycentric`` the
    matching barycentric triples.  Weights sum to the reference area 1/2.
    """

    points: np.ndarray
    weights: np.ndarray
    exact_degree: int

    @property
    def barycentric(self):
        x, y = self.points.T
        return np.column_stack([1.0 - x - y, x, y])


@lru_cache(maxsize=None)
def quad_rule(degree: int) -> QuadRule:
    """Positive rule on the reference triangle exact to ``degree``.

    Degree 0 and 1 use the centroid.  Higher degrees use a collapsed
    (conical) Gauss--Jacobi product rule.
    """
    if degree < 0 or degree > MAX_QUAD_DEGREE:
        raise ElementError(f"unsupported quadrature degree {degree}")
    if degree <= 1:
        return QuadRule(np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5]), 1)
    m = (degree + 2) // 2
    # collapsed direction carries the (1 - s) Jacobian
    xs, ws = roots_jacobi(m, 1.0, 0.0)
    xt, wt = legendre.leggauss(m)
    s = 0.5 * (xs + 1.0)
    ws = ws / 4.0
    t = 0.5 * (xt + 1.0)
    wt = wt / 2.0
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws, wt)
    pts = np.column_stack([S.ravel(), ((1.0 - S) * T).ravel()])
    return QuadRule(pts, W.ravel(), 2 * m - 1)


@lru_cache(maxsize=None)
def edge_rule(degree: int):
    """Gauss--Legendre points and weights on [0, 1]."""
    m = max(1, (degree + 2) // 2)
    x, w = legendre.leggauss(m)
    return 0.5 * (x + 1.0), 0.5 * w


def monomial_integral(a: int, b: int) -> float:
    """Exact integral of x^a y^b over the reference triangle."""
    return factorial(a) * factorial(b) / factorial(a + b + 2)


def _monomials(degree):
    return [(a, d - a) for d in range(degree + 1) for a in range(d, -1, -1)]


def _eval_monomials(exps, pts):
    x, y = pts[:, 0], pts[:, 1]
    return np.column_stack([x**a * y**b for a, b in exps])


def _eval_monomial_grads(exps, pts):
    x, y = pts[:, 0], pts[:, 1]
    gx, gy = [], []
    for a, b in exps:
        gx.append(a * x ** max(a - 1, 0) * y**b if a > 0 else np.zeros_like(x))
        gy.append(b * x**a * y ** max(b - 1, 0) if b > 0 else np.zeros_like(y))
    return np.column_stack(gx), np.column_stack(gy)


# ----------------------------------------------------------------------------
# DG(k): Lagrange basis on the equispaced lattice


def dg_dim(k: int) -> int:
    return (k + 1) * (k + 2) // 2


@lru_cache(maxsize=None)
def dg_nodes(k: int) -> np.ndarray:
    """Lattice nodes ordered vertices, edge interiors (e0, e1, e2), interior."""
    if k not in SUPPORTED_DG:
        raise ElementError(f"unsupported DG order {k}")
    if k == 0:
        return np.array([[1.0 / 3.0, 1.0 / 3.0]])
    nodes = [REF_VERTICES[i] for i in range(3)]
    for a, b in LOCAL_EDGES:
        for j in range(1, k):
            t = j / k
            nodes.append((1 - t) * REF_VERTICES[a] + t * REF_VERTICES[b])
    for j in range(1, k):
        for i in range(1, k - j):
            nodes.append(np.array([i / k, j / k]))
    return np.array(nodes)


@lru_cache(maxsize=None)
def _dg_coeffs(k):
    exps = _monomials(k)
    V = _eval_monomials(exps, dg_nodes(k))
    return exps, np.linalg.inv(V)


def eval_dg_basis(k: int, points) -> np.ndarray:
    """Values of the DG(k) basis, shape (npoints, nbasis)."""
    if k not in SUPPORTED_DG:
        raise ElementError(f"unsupported DG order {k}")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    exps, C = _dg_coeffs(k)
    return _eval_monomials(exps, points) @ C


def eval_dg_grad(k: int, points):
    """Reference gradients of the DG(k) basis, shape (npoints, nbasis, 2)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    exps, C = _dg_coeffs(k)
    gx, gy = _eval_monomial_grads(exps, points)
    return np.stack([gx @ C, gy @ C], axis=-1)


# ----------------------------------------------------------------------------
# RT(k1): nodal basis dual to edge Legendre moments and interior moments


def rt_dim(k1: int) -> int:
    return k1 * (k1 + 2)


def rt_interior_dim(k1: int) -> int:
    return k1 * (k1 - 1)


_EDGE_NORMALS = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])  # unnormalised


def _rt_prime(k1, pts):
    """Spanning set P_{k1-1}^2 + x * homogeneous P_{k1-1}; values and divs."""
    exps = _monomials(k1 - 1)
    top = [e for e in exps if e[0] + e[1] == k1 - 1]
    x, y = pts[:, 0], pts[:, 1]
    P = _eval_monomials(exps, pts)
    gx, gy = _eval_monomial_grads(exps, pts)
    n = len(pts)
    vals, divs = [], []
    for j in range(len(exps)):
        vals.append(np.column_stack([P[:, j], np.zeros(n)]))
        divs.append(gx[:, j])
        vals.append(np.column_stack([np.zeros(n), P[:, j]]))
        divs.append(gy[:, j])
    for a, b in top:
        q = x**a * y**b
        vals.append(np.column_stack([x * q, y * q]))
        # div(x q) = 2 q + x.grad q = (2 + deg) q
        divs.append((2 + a + b) * q)
    return np.stack(vals, axis=1), np.stack(divs, axis=1)


def rt_ref_dofs(k1: int, func) -> np.ndarray:
    """Apply the reference DoF functionals to ``func``.

    ``func(pts)`` returns vector values with shape (npts, ..., 2).  Edge
    moments come first (k1 per edge, edges e0, e1, e2), then interior
    moments against (x^a y^b, 0) and (0, x^a y^b), a + b <= k1 - 2.
    """
    s, w = edge_rule(2 * k1 + 2)
    out = []
    for e, (a, b) in enumerate(LOCAL_EDGES):
        pts = np.outer(1 - s, REF_VERTICES[a]) + np.outer(s, REF_VERTICES[b])
        vals = func(pts)
        # n_unit * arclength == unnormalised normal * dt on this parametrisation
        flux = np.tensordot(vals, _EDGE_NORMALS[e], axes=([-1], [0]))
        for m in range(k1):
            Pm = legendre.legval(2 * s - 1, np.eye(k1)[m])
            out.append(np.tensordot(w * Pm, flux, axes=(0, 0)))
    if k1 >= 2:
        q = quad_rule(2 * k1)
        vals = func(q.points)
        mons = _eval_monomials(_monomials(k1 - 2), q.points)
        for j in range(mons.shape[1]):
            for c in range(2):
                out.append(np.tensordot(q.weights * mons[:, j], vals[..., c], axes=(0, 0)))
    return np.array(out)


@lru_cache(maxsize=None)
def _rt_coeffs(k1):
    if k1 not in SUPPORTED_RT:
        raise ElementError(f"unsupported RT order {k1}")

    def prime(pts):
        return _rt_prime(k1, pts)[0]

    D = rt_ref_dofs(k1, prime)  # D[i, j] = dof_i(prime_j)
    return np.linalg.inv(D)


def eval_rt_basis(k1: int, points):
    """Reference RT(k1) basis values (npts, nbasis, 2) and divergences (npts, nbasis)."""
    if k1 not in SUPPORTED_RT:
        raise ElementError(f"unsupported RT order {k1}")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    C = _rt_coeffs(k1)
    V, D = _rt_prime(k1, points)
    vals = np.einsum("pjc,jb->pbc", V, C)
    divs = D @ C
    return vals, divs


def rt_edge_factors(k1: int, edge_dirs: np.ndarray) -> np.ndarray:
    """Per-cell local->global sign for each local RT basis function.

    ``edge_dirs`` (ncells, 3) is +1 where the global edge orientation
    (low -> high vertex) matches the counter-clockwise traversal.  Moment m
    on such an edge picks up dir**(m + 1); interior functions keep sign 1.
    """
    ncell = edge_dirs.shape[0]
    f = np.ones((ncell, rt_dim(k1)))
    for e in range(3):
        for m in range(k1):
            f[:, e * k1 + m] = edge_dirs[:, e] ** (m + 1)
    return f


# ----------------------------------------------------------------------------
# Affine geometry and the contravariant Piola map


def cell_geometry(vertices, cells):
    """Jacobians (ncell, 2, 2), determinants and origins of the affine maps."""
    p = vertices[cells]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    return J, det, p[:, 0]


def piola_push(J, det, ref_vals, ref_divs, factors=None):
    """Map reference RT values to physical cells.

    Parameters
    ----------
    J, det : (ncell, 2, 2), (ncell,)
    ref_vals : (npts, nbasis, 2)
    ref_divs : (npts, nbasis)
    factors : (ncell, nbasis), optional
        Local-to-global orientation signs.

    Returns
    -------
    vals : (ncell, npts, nbasis, 2)
    divs : (ncell, npts, nbasis)
    """
    J = np.asarray(J, dtype=float).reshape(-1, 2, 2)
    det = np.asarray(det, dtype=float).reshape(-1)
    if np.any(det <= 0):
        raise ElementError("Piola map needs positively oriented cells")
    vals = np.einsum("cij,pbj->cpbi", J, ref_vals) / det[:, None, None, None]
    divs = ref_divs[None, :, :] / det[:, None, None]
    if factors is not None:
        vals = vals * factors[:, None, :, None]
        divs = divs * factors[:, None, :]
    return vals, divs


def trace_constant(k: int, mesh) -> float:
    """h * max over boundary cells of (k+1)(k+2)|dT| / (2|T|)."""
    J, det, _ = cell_geometry(mesh.vertices, mesh.cells)
    p = mesh.vertices[mesh.cells]
    perim = sum(np.linalg.norm(p[:, (i + 1) % 3] - p[:, i], axis=1) for i in range(3))
    area = 0.5 * det
    touching = mesh.boundary_cells()
    ratio = (k + 1) * (k + 2) * perim[touching] / (2.0 * area[touching])
    return float(mesh.h * ratio.max())


def trace_constant_unscaled(k: int, mesh) -> float:
    """max over boundary cells of (k+1)(k+2)|dT| / (2|T|), without the h factor."""
    return trace_constant(k, mesh) / mesh.h


# ----------------------------------------------------------------------------
# Global spaces


class FESpace:
    """DG(k) or RT(k1) space on a mesh.

    ``dofmap`` maps each cell to its ordered global DoFs; for RT the edge
    moments are numbered edge-major (edge * k1 + m) and are followed by the
    cell-interior moments.  ``factors`` holds the local-to-global signs.
    ``constrained``/``values`` describe strongly imposed DoFs and are filled
    by :func:`mixedbih.assembly.apply_strong_bc`.
    """

    def __init__(self, mesh, family, order):
        self.mesh = mesh
        self.family = family
        self.order = order
        nc = mesh.ncells
        if family == "DG":
            if order not in SUPPORTED_DG:
                raise ElementError(f"unsupported DG order {order}")
            nloc = dg_dim(order)
            self.ndof = nc * nloc
            self.dofmap = np.arange(self.ndof).reshape(nc, nloc)
            self.factors = np.ones((nc, nloc))
        elif family == "RT":
            if order not in SUPPORTED_RT:
                raise ElementError(f"unsupported RT order {order}")
            k1 = order
            nint = rt_interior_dim(k1)
            self.n_edge_dofs = mesh.nedges * k1
            self.ndof = self.n_edge_dofs + nc * nint
            edge_part = (mesh.cell_edges[:, :, None] * k1 + np.arange(k1)).reshape(nc, 3 * k1)
            int_part = self.n_edge_dofs + np.arange(nc * nint).reshape(nc, nint)
            self.dofmap = np.hstack([edge_part, int_part])
            self.factors = rt_edge_factors(k1, mesh.cell_edge_dirs)
        else:
            raise ElementError(f"unknown family {family!r}")
        self.constrained = np.zeros(self.ndof, dtype=bool)
        self.values = np.zeros(self.ndof)

    @property
    def nloc(self):
        return self.dofmap.shape[1]

    def edge_dofs(self, edges):
        edges = np.asarray(edges, dtype=np.int64)
        return edges[:, None] * self.order + np.arange(self.order)

    def copy(self):
        out = FESpace.__new__(FESpace)
        out.__dict__.update(self.__dict__)
        out.constrained = self.constrained.copy()
        out.values = self.values.copy()
        return out

    def __repr__(self):
        return f"FESpace({self.family}{self.order}, ndof={self.ndof})"


def dg_space(mesh, k):
    return FESpace(mesh, "DG", k)


def rt_space(mesh, k1):
    return FESpace(mesh, "RT", k1)


def physical_points(mesh, ref_points, cells=None):
    """Physical images (ncell, npts, 2) of reference points."""
    J, det, x0 = cell_geometry(mesh.vertices, mesh.cells if cells is None else mesh.cells[cells])
    return x0[:, None, :] + np.einsum("cij,pj->cpi", J, ref_points)


def evaluate(space, coeffs, ref_points):
    """Evaluate a discrete function at reference points of every cell.

    Returns (ncell, npts) for DG, and (values (ncell, npts, 2),
    divergences (ncell, npts)) for RT.
    """
    local = coeffs[space.dofmap]
    if space.family == "DG":
        return local @ eval_dg_basis(space.order, ref_points).T
    J, det, _ = cell_geometry(space.mesh.vertices, space.mesh.cells)
    rv, rd = eval_rt_basis(space.order, ref_points)
    local = local * space.factors
    # push forward the combination rather than each basis function
    vref = np.einsum("pbi,cb->cpi", rv, local)
    vals = np.einsum("cij,cpj->cpi", J, vref) / det[:, None, None]
    divs = (local @ rd.T) / det[:, None]
    return vals, divs


def interp_dg(space, f, degree=14):
    """Cellwise L2 projection of the scalar field ``f(x, y)`` onto DG(k)."""
    q = quad_rule(degree)
    phi = eval_dg_basis(space.order, q.points)
    M = (phi * q.weights[:, None]).T @ phi
    X = physical_points(space.mesh, q.points)
    fv = f(X[..., 0], X[..., 1])
    rhs = (fv * q.weights) @ phi
    coeffs = np.linalg.solve(M, rhs.T).T
    out = np.empty(space.ndof)
    out[space.dofmap] = coeffs
    return out


def rt_edge_moments(space, F, edges=None, degree=14):
    """Global edge DoFs: int_e F.n_g P_m(2s-1) ds, s running low -> high vertex."""
    mesh = space.mesh
    edges = np.arange(mesh.nedges) if edges is None else np.asarray(edges, dtype=np.int64)
    k1 = space.order
    s, w = edge_rule(degree)
    p0 = mesh.vertices[mesh.edges[edges, 0]]
    p1 = mesh.vertices[mesh.edges[edges, 1]]
    X = p0[:, None, :] + s[None, :, None] * (p1 - p0)[:, None, :]
    n, length = mesh.edge_normals(edges)
    Fx, Fy = F(X[..., 0], X[..., 1])
    flux = Fx * n[:, 0:1] + Fy * n[:, 1:2]
    P = np.stack([legendre.legval(2 * s - 1, np.eye(k1)[m]) for m in range(k1)])
    return (flux * w * length[:, None]) @ P.T


def interp_rt(space, F, degree=14):
    """Canonical RT interpolant of the vector field ``F(x, y) -> (Fx, Fy)``."""
    mesh = space.mesh
    k1 = space.order
    out = np.empty(space.ndof)
    out[: space.n_edge_dofs] = rt_edge_moments(space, F, degree=degree).ravel()
    nint = rt_interior_dim(k1)
    if nint:
        J, det, x0 = cell_geometry(mesh.vertices, mesh.cells)
        Jinv = np.linalg.inv(J)

        def pulled(pts):
            X = x0[:, None, :] + np.einsum("cij,pj->cpi", J, pts)
            Fx, Fy = F(X[..., 0], X[..., 1])
            Fv = np.stack([Fx, Fy], axis=-1)
            ref = np.einsum("cij,cpj->cpi", Jinv, Fv) * det[:, None, None]
            return np.moveaxis(ref, 0, 1)  # (npts, ncell, 2)

        q = quad_rule(max(degree, 2 * k1))
        vals = pulled(q.points)
        mons = _eval_monomials(_monomials(k1 - 2), q.points)
        cols = []
        for j in range(mons.shape[1]):
            for c in range(2):
                cols.append((q.weights * mons[:, j]) @ vals[..., c])
        out[space.n_edge_dofs:] = np.column_stack(cols).ravel()
    return out
