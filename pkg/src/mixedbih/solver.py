"""Flexible GMRES with a monolithic multigrid V-cycle preconditioner.

Relaxation is two GMRES steps preconditioned by additive Schwarz over
vertex-star (Vanka) patches; the coarsest level is solved by dense LU.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import BlockSystem, ProblemSpec, assemble_system
from .elements import (
    _eval_monomials,
    _monomials,
    cell_geometry,
    edge_rule,
    eval_dg_basis,
    eval_rt_basis,
    dg_nodes,
    quad_rule,
    rt_interior_dim,
)
from .mesh import Mesh2D, build_mesh, label_boundary, refine_uniform, star_patches

log = logging.getLogger(__name__)

COARSEST_N = 4


class SolverError(RuntimeError):
    pass


@dataclass
class SolveReport:
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    wall_time: float = 0.0


# ----------------------------------------------------------------------------
# Krylov


def _as_operator(A):
    if callable(A):
        return A
    return lambda x: A @ x


def fgmres(apply_A, apply_M, b, x0=None, tol_abs=1e-8, tol_rel=1e-8, maxit=100):
    """Right-preconditioned flexible GMRES, modified Gram-Schmidt, no restart.

    ``apply_M`` may change between iterations.  Stops when the residual norm
    drops below ``max(tol_abs, tol_rel * ||r0||)``; pass zero tolerances to
    run exactly ``maxit`` steps.
    """
    t0 = time.perf_counter()
    A = _as_operator(apply_A)
    M = (lambda r: r) if apply_M is None else _as_operator(apply_M)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    report = SolveReport(residual_history=[beta])
    target = max(tol_abs, tol_rel * beta)
    if beta == 0.0 or beta <= target:
        report.converged, report.reason = True, "absolute" if beta <= tol_abs else "relative"
        report.wall_time = time.perf_counter() - t0
        return x, report

    Vs = [r / beta]
    Zs = []
    H = np.zeros((maxit + 1, maxit))
    cs = np.zeros(maxit)
    sn = np.zeros(maxit)
    g = np.zeros(maxit + 1)
    g[0] = beta
    j = -1
    for j in range(maxit):
        z = M(Vs[j])
        Zs.append(z)
        w = A(z)
        for i in range(j + 1):
            H[i, j] = w @ Vs[i]
            w -= H[i, j] * Vs[i]
        H[j + 1, j] = np.linalg.norm(w)
        for i in range(j):
            hi, hi1 = H[i, j], H[i + 1, j]
            H[i, j] = cs[i] * hi + sn[i] * hi1
            H[i + 1, j] = -sn[i] * hi + cs[i] * hi1
        hnext = H[j + 1, j]
        rho = np.hypot(H[j, j], hnext)
        if rho == 0.0:
            report.reason = "breakdown"
            j -= 1
            break
        cs[j], sn[j] = H[j, j] / rho, hnext / rho
        H[j, j] = rho
        H[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]
        res = abs(g[j + 1])
        report.residual_history.append(res)
        report.iterations = j + 1
        if res <= target:
            report.converged = True
            report.reason = "absolute" if res <= tol_abs else "relative"
            break
        if hnext <= 1e-300 * beta:
            # lucky breakdown: the Krylov space is invariant, solution is exact
            report.converged = True
            report.reason = "breakdown"
            break
        Vs.append(w / hnext)
    else:
        report.reason = "maxit"
    m = j + 1
    if m > 0:
        y = sla.solve_triangular(H[:m, :m], g[:m])
        for i in range(m):
            x += y[i] * Zs[i]
    report.wall_time = time.perf_counter() - t0
    return x, report


def direct_solve(system, b=None):
    """Sparse LU (SuperLU with column pivoting) of a general square system."""
    A = system.A if isinstance(system, BlockSystem) else system
    rhs = system.rhs if b is None and isinstance(system, BlockSystem) else b
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"singular matrix: {exc}") from exc
    x = lu.solve(np.asarray(rhs, dtype=float))
    if not np.all(np.isfinite(x)):
        raise SolverError("singular matrix: non-finite solution")
    return x


# ----------------------------------------------------------------------------
# transfer


def _coarse_ref_coords(coarse: Mesh2D, parent, X):
    """Reference coordinates in the parent cells of physical points X (N, q, 2)."""
    J, det, x0 = cell_geometry(coarse.vertices, coarse.cells[parent])
    Jinv = np.linalg.inv(J)
    return np.einsum("nij,nqj->nqi", Jinv, X - x0[:, None, :]), J, det


def _coarse_rt_at(cspace, parent, X):
    """Physical values (N, q, nb, 2) of the coarse RT basis of cells ``parent``."""
    xi, J, det = _coarse_ref_coords(cspace.mesh, parent, X)
    N, q, _ = xi.shape
    rv, _ = eval_rt_basis(cspace.order, xi.reshape(-1, 2))
    rv = rv.reshape(N, q, -1, 2)
    vals = np.einsum("nij,nqbj->nqbi", J, rv) / det[:, None, None, None]
    return vals * cspace.factors[parent][:, None, :, None]


def prolongation_dg(cspace, fspace):
    """Natural embedding DG_k(coarse) -> DG_k(fine) through the nodal basis."""
    fine = fspace.mesh
    parent = fine.parent_cell
    nodes = dg_nodes(fspace.order)
    J, _, x0 = cell_geometry(fine.vertices, fine.cells)
    X = x0[:, None, :] + np.einsum("cij,pj->cpi", J, nodes)
    xi, _, _ = _coarse_ref_coords(cspace.mesh, parent, X)
    nd = nodes.shape[0]
    vals = eval_dg_basis(cspace.order, xi.reshape(-1, 2)).reshape(len(parent), nd, nd)
    rows = np.repeat(fspace.dofmap, nd, axis=1).ravel()
    cols = np.tile(cspace.dofmap[parent], (1, nd)).ravel()
    P = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(fspace.ndof, cspace.ndof)).tocsr()
    P.data[np.abs(P.data) < 1e-14] = 0.0
    P.eliminate_zeros()
    return P


def prolongation_rt(cspace, fspace):
    """Natural embedding RT(coarse) -> RT(fine): fine DoFs of coarse basis functions.

    Each fine edge takes its values from one coarse cell containing it, so no
    row is assembled twice.
    """
    fine = fspace.mesh
    k1 = fspace.order
    parent = fine.parent_cell
    nb = cspace.nloc
    rows, cols, vals = [], [], []

    # edge moments against Legendre polynomials, global orientation
    s, w = edge_rule(2 * k1 + 2)
    e_cell = fine.edge_cells[:, 0]
    ep = parent[e_cell]
    p0 = fine.vertices[fine.edges[:, 0]]
    p1 = fine.vertices[fine.edges[:, 1]]
    X = p0[:, None, :] + s[None, :, None] * (p1 - p0)[:, None, :]
    n, length = fine.edge_normals()
    phi = _coarse_rt_at(cspace, ep, X)
    flux = np.einsum("eqbi,ei->eqb", phi, n)
    Pm = np.stack([legendre.legval(2 * s - 1, np.eye(k1)[m]) for m in range(k1)])  # (k1, q)
    mom = np.einsum("mq,q,e,eqb->emb", Pm, w, length, flux)
    rows.append(np.repeat(fspace.edge_dofs(np.arange(fine.nedges)), nb, axis=1).ravel())
    cols.append(np.tile(cspace.dofmap[ep], (1, k1)).ravel())
    vals.append(mom.ravel())

    nint = rt_interior_dim(k1)
    if nint:
        q = quad_rule(2 * k1)
        J, det, x0 = cell_geometry(fine.vertices, fine.cells)
        Xc = x0[:, None, :] + np.einsum("cij,pj->cpi", J, q.points)
        phi = _coarse_rt_at(cspace, parent, Xc)
        ref = np.einsum("cij,cqbj->cqbi", np.linalg.inv(J), phi) * det[:, None, None, None]
        mons = _eval_monomials(_monomials(k1 - 2), q.points)
        # interior moments ordered monomial-major, component-minor
        mom = np.einsum("q,qj,cqbi->cjib", q.weights, mons, ref).reshape(fine.ncells, nint, nb)
        rows.append(np.repeat(fspace.dofmap[:, 3 * k1:], nb, axis=1).ravel())
        cols.append(np.tile(cspace.dofmap[parent], (1, nint)).ravel())
        vals.append(mom.ravel())
    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(fspace.ndof, cspace.ndof),
    ).tocsr()
    P.data[np.abs(P.data) < 1e-13] = 0.0
    P.eliminate_zeros()
    return P


def prolongation(coarse_spaces, fine_spaces):
    """Block-diagonal P = diag(DG embedding, RT embedding, RT embedding)."""
    Pu = prolongation_dg(coarse_spaces[0], fine_spaces[0])
    Pv = prolongation_rt(coarse_spaces[1], fine_spaces[1])
    return sp.block_diag([Pu, Pv, Pv], format="csr")


# ----------------------------------------------------------------------------
# Vanka relaxation


@dataclass
class PatchGroup:
    """Patches of one size sharing a small set of distinct inverses."""

    dofs: np.ndarray  # (npatch, m)
    which: np.ndarray  # (npatch,) index into inverses
    inverses: np.ndarray  # (ninv, m, m)


class Vanka:
    """Additive Schwarz over star patches: r -> sum_i R_i^T A_ii^{-1} R_i r.

    Congruent patches produce bitwise identical blocks on the canonical
    meshes, so each distinct block is inverted once.  Constrained DoFs
    (identity rows) are solved exactly.
    """

    def __init__(self, A, patches, constrained):
        A = sp.csr_matrix(A)
        self.n = A.shape[0]
        self.constrained = constrained
        self.npatches = len(patches)
        by_size = {}
        for p in patches:
            by_size.setdefault(len(p.dofs), []).append(p)
        self.groups = []
        for m, plist in sorted(by_size.items()):
            dofs = np.array([p.dofs for p in plist])
            keys = {}
            which = np.empty(len(plist), dtype=np.int64)
            blocks = []
            for i, p in enumerate(plist):
                blk = A[p.dofs][:, p.dofs].toarray()
                key = blk.tobytes()
                idx = keys.get(key)
                if idx is None:
                    idx = keys[key] = len(blocks)
                    blocks.append((p.vertex, blk))
                which[i] = idx
            inverses = np.empty((len(blocks), m, m))
            for j, (vertex, blk) in enumerate(blocks):
                try:
                    lu = sla.lu_factor(blk, check_finite=False)
                except (ValueError, np.linalg.LinAlgError) as exc:
                    raise SolverError(f"singular patch block at vertex {vertex}") from exc
                inv = sla.lu_solve(lu, np.eye(m))
                if np.any(np.diag(lu[0]) == 0) or not np.all(np.isfinite(inv)):
                    raise SolverError(f"singular patch block at vertex {vertex}")
                inverses[j] = inv
            self.groups.append(PatchGroup(dofs, which, inverses))
        self.ninverses = sum(len(g.inverses) for g in self.groups)

    def __call__(self, r):
        out = np.zeros(self.n)
        for g in self.groups:
            R = r[g.dofs]  # (npatch, m)
            Y = np.empty_like(R)
            if len(g.inverses) == 1:
                Y = R @ g.inverses[0].T
            else:
                for j in range(len(g.inverses)):
                    sel = g.which == j
                    Y[sel] = R[sel] @ g.inverses[j].T
            out += np.bincount(g.dofs.ravel(), Y.ravel(), minlength=self.n)
        out[self.constrained] = r[self.constrained]
        return out


def vanka_apply(level, r):
    return level.vanka(r)


# ----------------------------------------------------------------------------
# hierarchy


@dataclass
class Level:
    system: BlockSystem
    A: sp.csr_matrix
    constrained: np.ndarray
    P: sp.csr_matrix = None  # prolongation from the next coarser level
    vanka: Vanka = None
    coarse_lu: tuple = None


@dataclass
class MGHierarchy:
    levels: list  # coarse -> fine
    relax_steps: int = 2

    @property
    def nlevels(self):
        return len(self.levels)

    @property
    def finest(self):
        return self.levels[-1]


FINEST_INVERSE_H = ("1/h", "h^-1", "h-1")
LEVEL_INVERSE_H = ("level-1/h", "level-h^-1")


def level_weight(weight, n, finest_n):
    """Auxiliary A11 weight on a level with 1/h = n.

    Numbers are used on every level.  ``'1/h'`` means the finest level's
    1/h, held fixed on all levels; ``'level-1/h'`` means each level's own.
    """
    if weight is None:
        return None
    if isinstance(weight, str):
        key = weight.strip().lower()
        if key in FINEST_INVERSE_H:
            return float(finest_n)
        if key in LEVEL_INVERSE_H:
            return float(n)
        return float(key)
    return float(weight)


def build_hierarchy(domain, partition, spec: ProblemSpec, finest_n, weight=None, coarsest_n=COARSEST_N):
    """Rediscretized levels n = coarsest_n, 2 coarsest_n, ..., finest_n.

    With ``weight`` set the level operators are auxiliary operators (A11 =
    weight * DG mass); see :func:`level_weight` for the accepted values.
    """
    if weight is None and spec.c1 == 0:
        # A11 vanishes, so u constant on a vertex star is a null vector of
        # every interior patch block
        raise SolverError("c1 = 0 makes the Vanka patches singular; set an auxiliary weight")
    if finest_n < coarsest_n:
        raise SolverError(f"finest n={finest_n} is below the coarsest n={coarsest_n}")
    ratio = finest_n // coarsest_n
    if finest_n % coarsest_n or ratio & (ratio - 1):
        raise SolverError(f"finest n={finest_n} is not a power-of-two multiple of {coarsest_n}")
    mesh = label_boundary(build_mesh(domain, coarsest_n), partition)
    meshes = [mesh]
    while mesh.n < finest_n:
        mesh = refine_uniform(mesh)
        meshes.append(mesh)
    levels = []
    for i, m in enumerate(meshes):
        S = assemble_system(m, spec, weight=level_weight(weight, m.n, finest_n))
        lvl = Level(system=S, A=S.A, constrained=S.constrained)
        if i == 0:
            lvl.coarse_lu = sla.lu_factor(S.A.toarray(), check_finite=False)
        else:
            lvl.P = prolongation(levels[-1].system.spaces, S.spaces)
            patches = star_patches(m, S.spaces, S.constrained)
            lvl.vanka = Vanka(S.A, patches, S.constrained)
        levels.append(lvl)
    # release parent links kept by refinement
    for m in meshes:
        m.parent = None
    return MGHierarchy(levels)


def relax(level: Level, x, b, steps=2):
    """``steps`` GMRES iterations on (A, b) from x, right-preconditioned by Vanka."""
    A = level.A
    r = b - A @ x
    if not np.any(r):
        return x
    dx, _ = fgmres(A, level.vanka, r, tol_abs=0.0, tol_rel=0.0, maxit=steps)
    return x + dx


def v_cycle(hierarchy: MGHierarchy, index, x, b):
    """One V-cycle on level ``index`` (0 = coarsest)."""
    lvl = hierarchy.levels[index]
    if index == 0:
        return sla.lu_solve(lvl.coarse_lu, b, check_finite=False)
    x = relax(lvl, x, b, hierarchy.relax_steps)
    r = b - lvl.A @ x
    r[lvl.constrained] = 0.0
    coarse = hierarchy.levels[index - 1]
    rc = lvl.P.T @ r
    rc[coarse.constrained] = 0.0
    ec = v_cycle(hierarchy, index - 1, np.zeros_like(rc), rc)
    x = x + lvl.P @ ec
    return relax(lvl, x, b, hierarchy.relax_steps)


def mg_preconditioner(hierarchy: MGHierarchy):
    def apply(r):
        return v_cycle(hierarchy, hierarchy.nlevels - 1, np.zeros_like(r), r)

    return apply


def mg_solve(system: BlockSystem, hierarchy: MGHierarchy, tol_abs=1e-8, tol_rel=1e-8, maxit=100):
    """FGMRES on the true system, one V-cycle of ``hierarchy`` per iteration.

    The initial guess carries the lifted boundary values, so the residual
    vanishes on constrained DoFs from the start.
    """
    x0 = np.where(system.constrained, system.rhs, 0.0)
    return fgmres(system.A, mg_preconditioner(hierarchy), system.rhs, x0, tol_abs, tol_rel, maxit)
