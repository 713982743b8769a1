"""Assembly of the three-field saddle-point system.

Unknowns are ordered ``[u; v; alpha]`` with u in DG(k) and v, alpha in
RT(k+1).  The block matrix is::

    [ A11   0    B1^T ]
    [ 0     A22  B2^T ]
    [ B1    B2   0    ]

with A11 = c1 M_DG, A22 = c0 M_RT + (div, div) (+ Nitsche terms on Gamma_1),
B1[i, j] = (div beta_i, phi_j) and B2 the RT mass matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .elements import (
    LOCAL_EDGES,
    REF_VERTICES,
    FESpace,
    cell_geometry,
    dg_space,
    edge_rule,
    eval_dg_basis,
    eval_rt_basis,
    quad_rule,
    rt_edge_moments,
    rt_space,
    trace_constant,
)
from .mesh import Mesh2D

DATA_DEGREE = 14


def assembly_degree(k: int) -> int:
    """Cell quadrature degree for DG(k) x RT(k+1) element matrices."""
    return 2 * (k + 2)


class InadmissibleSpec(ValueError):
    """Raised for coefficient/boundary combinations that are not well posed."""


@dataclass
class ProblemSpec:
    """Coefficients, polynomial order and data of one problem instance.

    Parameters
    ----------
    c0, c1 : float
        Nonnegative coefficients in ``Delta^2 u - c0 Delta u + c1 u = f``.
    k : int
        DG order; the RT spaces have order k + 1.
    lam : float, optional
        Nitsche penalty, defaulted from the trace constant when Gamma_1 is
        present.
    case : object, optional
        Manufactured solution providing ``u, grad, lap, grad_lap, bilap``.
    f : callable, optional
        Raw source ``f(x, y)`` used with homogeneous boundary data.
    nitsche : bool
        Impose v.n on Gamma_1 weakly (default) or strongly.
    """

    c0: float = 0.0
    c1: float = 0.0
    k: int = 0
    lam: float | None = None
    case: object = None
    f: object = None
    nitsche: bool = True

    def __post_init__(self):
        if self.c0 < 0 or self.c1 < 0:
            raise InadmissibleSpec(f"coefficients must be nonnegative (c0={self.c0}, c1={self.c1})")
        if self.case is not None and self.f is not None:
            raise InadmissibleSpec("give either a manufactured case or a raw source, not both")

    def check(self, mesh: Mesh2D):
        """Reject partitions for which the continuous problem is not well posed."""
        classes = set(np.unique(mesh.gamma[mesh.boundary_edges]).tolist())
        if -1 in classes:
            raise InadmissibleSpec("boundary is not fully labelled")
        if 2 in classes and (self.c0 == 0 or self.c1 == 0):
            raise InadmissibleSpec("Gamma_2 requires c0 > 0 and c1 > 0")
        if not classes & {0, 1} and self.c1 == 0:
            raise InadmissibleSpec("Gamma_0 and Gamma_1 both empty requires c1 > 0")
        if self.lam is not None and self.lam <= 0:
            raise InadmissibleSpec(f"Nitsche penalty must be positive, got {self.lam}")

    def penalty(self, mesh: Mesh2D) -> float:
        if self.lam is not None:
            return float(self.lam)
        return 3.0 * trace_constant(self.k, mesh) + 2.0

    # data fields; homogeneous when no manufactured case is attached
    def source(self, x, y):
        if self.case is not None:
            return self.case.bilap(x, y) - self.c0 * self.case.lap(x, y) + self.c1 * self.case.u(x, y)
        if self.f is not None:
            return self.f(x, y) + 0.0 * x
        return np.zeros_like(x)

    def _field(self, name, x, y):
        if self.case is None:
            return np.zeros_like(x)
        return getattr(self.case, name)(x, y)

    def u_data(self, x, y):
        return self._field("u", x, y)

    def lap_data(self, x, y):
        return self._field("lap", x, y)

    def v_data(self, x, y):
        if self.case is None:
            return np.zeros_like(x), np.zeros_like(x)
        return self.case.grad(x, y)

    def alpha_data(self, x, y):
        if self.case is None:
            return np.zeros_like(x), np.zeros_like(x)
        gx, gy = self.case.grad(x, y)
        lx, ly = self.case.grad_lap(x, y)
        return lx - self.c0 * gx, ly - self.c0 * gy


@dataclass
class BlockSystem:
    """Assembled (and optionally constraint-eliminated) block system."""

    mesh: Mesh2D
    spec: ProblemSpec
    spaces: tuple
    A11: sp.csr_matrix
    A22: sp.csr_matrix
    B1: sp.csr_matrix
    B2: sp.csr_matrix
    rhs: np.ndarray
    constrained: np.ndarray
    lifted: np.ndarray
    A: sp.csr_matrix = field(default=None, repr=False)

    @property
    def offsets(self):
        nu, nv = self.spaces[0].ndof, self.spaces[1].ndof
        return np.array([0, nu, nu + nv, nu + 2 * nv])

    @property
    def ndof(self) -> int:
        return int(self.offsets[-1])

    @property
    def structural_nnz(self) -> int:
        """Nonzeros of the unconstrained monolithic pattern when the zero
        (u, v), (v, u) and (alpha, alpha) blocks are stored too; their
        couplings mirror B1 and A22."""
        return int(self.A11.nnz + 2 * self.A22.nnz + 4 * self.B1.nnz + 2 * self.B2.nnz)

    def split(self, x):
        o = self.offsets
        return x[o[0]:o[1]], x[o[1]:o[2]], x[o[2]:o[3]]

    def to_coo_text(self, path):
        """Write the assembled matrix as 1-based ``row col value`` lines."""
        A = self.A.tocoo()
        with open(path, "w") as fh:
            fh.write(f"% {A.shape[0]} {A.shape[1]} {A.nnz}\n")
            np.savetxt(fh, np.column_stack([A.row + 1, A.col + 1, A.data]), fmt="%d %d %.17g")


# ----------------------------------------------------------------------------
# element kernels


def _scatter(rows, cols, vals, shape):
    nr, nc = rows.shape[1], cols.shape[1]
    I = np.repeat(rows, nc, axis=1).ravel()
    J = np.tile(cols, (1, nr)).ravel()
    return sp.coo_matrix((vals.ravel(), (I, J)), shape=shape).tocsr()


def _check_spaces(U: FESpace, V: FESpace):
    if U.family != "DG" or V.family != "RT" or V.order != U.order + 1:
        raise ValueError(f"mismatched spaces {U} / {V}: expected DG(k) and RT(k+1)")
    if U.mesh is not V.mesh and U.mesh.ncells != V.mesh.ncells:
        raise ValueError("spaces live on different meshes")


def dg_mass(U: FESpace) -> sp.csr_matrix:
    mesh = U.mesh
    _, det, _ = cell_geometry(mesh.vertices, mesh.cells)
    q = quad_rule(assembly_degree(U.order))
    phi = eval_dg_basis(U.order, q.points)
    Mref = (phi * q.weights[:, None]).T @ phi
    vals = np.abs(det)[:, None, None] * Mref
    return _scatter(U.dofmap, U.dofmap, vals, (U.ndof, U.ndof))


def _rt_cell_tables(V: FESpace, degree):
    mesh = V.mesh
    J, det, _ = cell_geometry(mesh.vertices, mesh.cells)
    q = quad_rule(degree)
    rv, rd = eval_rt_basis(V.order, q.points)
    return J, det, q, rv, rd


def rt_matrices(V: FESpace, c0=1.0, with_mass=True):
    """RT mass matrix and c0*mass + div-div, assembled in one pass.

    Returns ``(M, A22)``; with ``with_mass=False`` only the second is built.
    """
    J, det, q, rv, rd = _rt_cell_tables(V, assembly_degree(V.order - 1))
    w = q.weights
    # reference tensors T_ab[i, j] = sum_q w phi_i[a] phi_j[b]
    T = np.einsum("q,qia,qjb->abij", w, rv, rv)
    G = np.einsum("cki,ckj->cij", J, J)  # J^T J
    Mloc = np.einsum("cab,abij->cij", G, T) / det[:, None, None]
    Dref = (rd * w[:, None]).T @ rd
    sgn = V.factors[:, :, None] * V.factors[:, None, :]
    Mloc *= sgn
    Dloc = Dref[None] / det[:, None, None] * sgn
    shape = (V.ndof, V.ndof)
    A22 = _scatter(V.dofmap, V.dofmap, c0 * Mloc + Dloc, shape)
    if not with_mass:
        return None, A22
    return _scatter(V.dofmap, V.dofmap, Mloc, shape), A22


def assemble_a(spec: ProblemSpec, spaces, weight=None):
    """A11 (c1 or ``weight`` times DG mass) and A22 without Nitsche terms."""
    U, V = spaces[0], spaces[1]
    _check_spaces(U, V)
    coef = spec.c1 if weight is None else weight
    A11 = coef * dg_mass(U)
    _, A22 = rt_matrices(V, spec.c0, with_mass=False)
    return A11, A22


def assemble_b(spaces):
    """B1 (div beta against DG) and B2 (RT mass), alpha rows."""
    U, V, W = spaces
    _check_spaces(U, W)
    J, det, q, rv, rd = _rt_cell_tables(W, assembly_degree(W.order - 1))
    phi = eval_dg_basis(U.order, q.points)
    Bref = (rd * q.weights[:, None]).T @ phi  # (nrt, ndg), det cancels
    # sign of det is positive for CCW cells, so the Piola factor cancels exactly
    B1loc = np.broadcast_to(Bref, (len(det),) + Bref.shape) * W.factors[:, :, None]
    B1 = _scatter(W.dofmap, U.dofmap, B1loc, (W.ndof, U.ndof))
    B2, _ = rt_matrices(W, 0.0)
    return B1, B2


# ----------------------------------------------------------------------------
# boundary terms


def _boundary_tables(V: FESpace, edges, degree):
    """Traces of the RT basis on boundary edges.

    Returns physical points X (E, q, 2), weights*length (E, q), outward unit
    normal (E, 2), basis values (E, q, nb, 2), divergences (E, q, nb) and the
    global DoFs (E, nb) of the adjacent cell.
    """
    mesh = V.mesh
    cells, loc = mesh.edge_local_index(edges)
    J, det, x0 = cell_geometry(mesh.vertices, mesh.cells[cells])
    s, w = edge_rule(degree)
    nq = len(s)
    nb = V.nloc
    ref_pts = np.empty((len(edges), nq, 2))
    rv = np.empty((len(edges), nq, nb, 2))
    rd = np.empty((len(edges), nq, nb))
    for le, (a, b) in enumerate(LOCAL_EDGES):
        pts = np.outer(1 - s, REF_VERTICES[a]) + np.outer(s, REF_VERTICES[b])
        vals, divs = eval_rt_basis(V.order, pts)
        sel = loc == le
        ref_pts[sel] = pts
        rv[sel] = vals
        rd[sel] = divs
    X = x0[:, None, :] + np.einsum("eij,eqj->eqi", J, ref_pts)
    f = V.factors[cells]
    vals = np.einsum("eij,eqbj->eqbi", J, rv) / det[:, None, None, None] * f[:, None, :, None]
    divs = rd / det[:, None, None] * f[:, None, :]
    a_idx = np.array([LOCAL_EDGES[le][0] for le in range(3)])[loc]
    b_idx = np.array([LOCAL_EDGES[le][1] for le in range(3)])[loc]
    P = mesh.vertices[mesh.cells[cells]]
    t = P[np.arange(len(cells)), b_idx] - P[np.arange(len(cells)), a_idx]
    length = np.linalg.norm(t, axis=1)
    normal = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
    return X, w[None, :] * length[:, None], normal, vals, divs, V.dofmap[cells]


def _edges_in(mesh, classes):
    bnd = mesh.boundary_edges
    return bnd[np.isin(mesh.gamma[bnd], list(classes))]


def assemble_nitsche(spec: ProblemSpec, V: FESpace):
    """Nitsche additions to A22 and f2 on Gamma_1 edges."""
    mesh = V.mesh
    edges = _edges_in(mesh, {1}) if spec.nitsche else np.empty(0, dtype=np.int64)
    if len(edges) == 0:
        return sp.csr_matrix((V.ndof, V.ndof)), np.zeros(V.ndof)
    lam = spec.penalty(mesh)
    if lam <= 0:
        raise InadmissibleSpec(f"Nitsche penalty must be positive, got {lam}")
    h = mesh.h
    X, wl, n, vals, divs, dofs = _boundary_tables(V, edges, max(DATA_DEGREE, 2 * V.order + 2))
    vn = np.einsum("eqbi,ei->eqb", vals, n)
    Dn = np.einsum("eq,eqi,eqj->eij", wl, divs, vn)  # int div phi_i (phi_j.n)
    Nn = np.einsum("eq,eqi,eqj->eij", wl, vn, vn)
    loc = -Dn - Dn.transpose(0, 2, 1) + (lam / h) * Nn
    A = _scatter(dofs, dofs, loc, (V.ndof, V.ndof))
    gx, gy = spec.v_data(X[..., 0], X[..., 1])
    gv = gx * n[:, None, 0] + gy * n[:, None, 1]
    rloc = np.einsum("eq,eqb->eb", wl * gv, -divs + (lam / h) * vn)
    f2 = np.bincount(dofs.ravel(), rloc.ravel(), minlength=V.ndof)
    return A, f2


def assemble_rhs(spec: ProblemSpec, spaces):
    """Load vector f1 and natural boundary lifts f2, g."""
    U, V, W = spaces
    mesh = U.mesh
    J, det, x0 = cell_geometry(mesh.vertices, mesh.cells)
    q = quad_rule(DATA_DEGREE)
    phi = eval_dg_basis(U.order, q.points)
    X = x0[:, None, :] + np.einsum("cij,pj->cpi", J, q.points)
    fv = spec.source(X[..., 0], X[..., 1])
    f1loc = (fv * q.weights * np.abs(det)[:, None]) @ phi
    f1 = np.bincount(U.dofmap.ravel(), f1loc.ravel(), minlength=U.ndof)

    f2 = np.zeros(V.ndof)
    g = np.zeros(W.ndof)
    if spec.case is None:
        return f1, f2, g
    for target, classes, data in ((f2, {0, 2}, spec.lap_data), (g, {0, 1}, spec.u_data)):
        edges = _edges_in(mesh, classes)
        if len(edges) == 0:
            continue
        Xb, wl, n, vals, _, dofs = _boundary_tables(V, edges, DATA_DEGREE)
        vn = np.einsum("eqbi,ei->eqb", vals, n)
        loc = np.einsum("eq,eqb->eb", wl * data(Xb[..., 0], Xb[..., 1]), vn)
        target += np.bincount(dofs.ravel(), loc.ravel(), minlength=V.ndof)
    return f1, f2, g


# ----------------------------------------------------------------------------
# strong constraints


def strong_classes(spec: ProblemSpec):
    """Gamma classes on which v and alpha are constrained strongly."""
    v_classes = {3} if spec.nitsche else {1, 3}
    return v_classes, {2, 3}


def apply_strong_bc(space: FESpace, classes, data) -> FESpace:
    """Return a copy of ``space`` with edge DoFs on ``classes`` fixed to the
    edge moments of the vector field ``data``."""
    out = space.copy()
    edges = _edges_in(space.mesh, classes)
    if len(edges):
        dofs = space.edge_dofs(edges).ravel()
        out.constrained[dofs] = True
        vals = rt_edge_moments(space, data, edges, degree=DATA_DEGREE).ravel()
        if not np.all(np.isfinite(vals)):
            raise ValueError("boundary data not evaluable on a constrained edge")
        out.values[dofs] = vals
    return out


def eliminate(A: sp.csr_matrix, rhs, constrained, lifted):
    """Symmetric elimination: identity rows/columns, lift moved to the rhs."""
    if not constrained.any():
        return A.tocsr(), rhs.copy()
    free = (~constrained).astype(float)
    D = sp.diags(free)
    b = free * (rhs - A @ lifted) + lifted
    Ae = (D @ A @ D + sp.diags(constrained.astype(float))).tocsr()
    Ae.eliminate_zeros()
    return Ae, b


def block_matrix(A11, A22, B1, B2):
    return sp.bmat([[A11, None, B1.T], [None, A22, B2.T], [B1, B2, None]], format="csr")


def make_spaces(mesh: Mesh2D, k: int):
    return dg_space(mesh, k), rt_space(mesh, k + 1), rt_space(mesh, k + 1)


def assemble_system(mesh: Mesh2D, spec: ProblemSpec, weight=None, constrain=True) -> BlockSystem:
    """Assemble the full system (the auxiliary operator when ``weight`` is set).

    With ``constrain=False`` the raw operator is returned: no strong
    constraints are imposed and no Nitsche terms are added.
    """
    if weight is not None and weight <= 0:
        raise InadmissibleSpec(f"auxiliary weight must be positive, got {weight}")
    spec.check(mesh)
    U, V, W = make_spaces(mesh, spec.k)
    A11, A22 = assemble_a(spec, (U, V, W), weight=weight)
    B1, B2 = assemble_b((U, V, W))
    f1, f2, g = assemble_rhs(spec, (U, V, W))
    if constrain:
        An, fn = assemble_nitsche(spec, V)
        A22 = (A22 + An).tocsr()
        f2 = f2 + fn
        vc, ac = strong_classes(spec)
        V = apply_strong_bc(V, vc, spec.v_data)
        W = apply_strong_bc(W, ac, spec.alpha_data)
    rhs = np.concatenate([f1, f2, g])
    constrained = np.concatenate([U.constrained, V.constrained, W.constrained])
    lifted = np.concatenate([U.values, V.values, W.values])
    A = block_matrix(A11, A22, B1, B2)
    A, rhs = eliminate(A, rhs, constrained, lifted)
    return BlockSystem(mesh, spec, (U, V, W), A11, A22, B1, B2, rhs, constrained, lifted, A)


def assemble_auxiliary(mesh: Mesh2D, spec: ProblemSpec, weight: float) -> BlockSystem:
    """True system with A11 replaced by ``weight`` times the DG mass matrix."""
    return assemble_system(mesh, spec, weight=weight)
