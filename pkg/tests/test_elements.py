import math

import numpy as np
import pytest
import sympy

from mixedbih.assembly import ProblemSpec, assemble_b, assemble_system, make_spaces, rt_matrices
from mixedbih.elements import (
    LOCAL_EDGES,
    REF_VERTICES,
    ElementError,
    cell_geometry,
    dg_nodes,
    dg_space,
    eval_dg_basis,
    eval_dg_grad,
    eval_rt_basis,
    evaluate,
    interp_dg,
    interp_rt,
    physical_points,
    piola_push,
    quad_rule,
    rt_dim,
    rt_space,
    trace_constant,
    trace_constant_unscaled,
)
from mixedbih.mesh import build_mesh, build_unit_square_right, label_boundary

from conftest import ALL_G0


def gauss_triangle(m):
    """Independent collapsed Gauss--Legendre rule on the reference triangle."""
    x, w = np.polynomial.legendre.leggauss(m)
    s, ws = 0.5 * (x + 1), 0.5 * w
    S, T = np.meshgrid(s, s, indexing="ij")
    W = np.outer(ws, ws) * (1 - S)
    return np.column_stack([S.ravel(), ((1 - S) * T).ravel()]), W.ravel()


def edge_points(le, s):
    a, b = LOCAL_EDGES[le]
    return np.outer(1 - s, REF_VERTICES[a]) + np.outer(s, REF_VERTICES[b])


# ----------------------------------------------------------------------------
# quadrature


def test_quad_degree1_is_centroid():
    q = quad_rule(1)
    np.testing.assert_allclose(q.points, [[1 / 3, 1 / 3]])
    np.testing.assert_allclose(q.weights, [0.5])


@pytest.mark.parametrize("degree", range(0, 15))
def test_quad_monomial_exactness(degree):
    q = quad_rule(degree)
    assert q.exact_degree >= degree
    assert np.all(q.weights > 0)
    assert q.weights.sum() == pytest.approx(0.5, abs=1e-14)
    np.testing.assert_allclose(q.barycentric.sum(axis=1), 1.0)
    x, y = q.points.T
    for a in range(q.exact_degree + 1):
        for b in range(q.exact_degree + 1 - a):
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            assert q.weights @ (x**a * y**b) == pytest.approx(exact, abs=1e-13)


def test_quad_rejects_bad_degree():
    with pytest.raises(ElementError):
        quad_rule(-1)


# ----------------------------------------------------------------------------
# DG basis


def test_dg_k0_constant():
    pts = np.random.default_rng(0).random((7, 2)) * 0.5
    np.testing.assert_array_equal(eval_dg_basis(0, pts), np.ones((7, 1)))


def test_dg_k1_lagrange_at_vertices():
    np.testing.assert_allclose(eval_dg_basis(1, REF_VERTICES), np.eye(3), atol=1e-14)


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_dg_nodal_property(k):
    nodes = dg_nodes(k)
    assert len(nodes) == (k + 1) * (k + 2) // 2
    np.testing.assert_allclose(eval_dg_basis(k, nodes), np.eye(len(nodes)), atol=1e-12)


def test_dg_k2_gram_matches_symbolic():
    xs, ys = sympy.symbols("x y")
    nodes = [tuple(sympy.Rational(int(round(6 * c)), 6) for c in p) for p in dg_nodes(2)]
    mons = [xs**a * ys**b for d in range(3) for a in range(d + 1) for b in [d - a]]
    V = sympy.Matrix([[m.subs({xs: p[0], ys: p[1]}) for m in mons] for p in nodes])
    C = V.inv()
    basis = [sum(C[j, i] * mons[j] for j in range(6)) for i in range(6)]
    G = sympy.zeros(6, 6)
    for i in range(6):
        for j in range(i, 6):
            val = sympy.integrate(sympy.integrate(basis[i] * basis[j], (ys, 0, 1 - xs)), (xs, 0, 1))
            G[i, j] = G[j, i] = val
    q = quad_rule(4)
    phi = eval_dg_basis(2, q.points)
    np.testing.assert_allclose((phi * q.weights[:, None]).T @ phi, np.array(G, dtype=float), atol=1e-14)


def test_dg_rejects_unsupported_order():
    with pytest.raises(ElementError):
        eval_dg_basis(7, [[0.2, 0.2]])


# ----------------------------------------------------------------------------
# RT basis


def test_rt1_divergence_constant_and_unit_flux():
    pts, _ = gauss_triangle(6)
    vals, divs = eval_rt_basis(1, pts)
    assert vals.shape == (len(pts), 3, 2)
    np.testing.assert_allclose(divs, np.broadcast_to(divs[0], divs.shape), atol=1e-13)
    # area 1/2 times a constant divergence equals the unit edge flux
    np.testing.assert_allclose(0.5 * divs[0], np.ones(3), atol=1e-13)


@pytest.mark.parametrize("k1", [1, 2, 3])
def test_rt_duality_identity(k1):
    # DoF functionals evaluated by an independent rule and explicit normals
    s, w = np.polynomial.legendre.leggauss(12)
    s, w = 0.5 * (s + 1), 0.5 * w
    rows = []
    for le, (a, b) in enumerate(LOCAL_EDGES):
        t = REF_VERTICES[b] - REF_VERTICES[a]
        nl = np.array([t[1], -t[0]])  # outward normal times edge length
        vals, _ = eval_rt_basis(k1, edge_points(le, s))
        flux = vals @ nl
        for m in range(k1):
            rows.append((w * np.polynomial.legendre.Legendre.basis(m)(2 * s - 1)) @ flux)
    pts, wt = gauss_triangle(12)
    vals, _ = eval_rt_basis(k1, pts)
    for d in range(k1 - 1):
        for a in range(d, -1, -1):
            mon = pts[:, 0] ** a * pts[:, 1] ** (d - a)
            for c in range(2):
                rows.append((wt * mon) @ vals[:, :, c])
    D = np.array(rows)
    assert D.shape == (rt_dim(k1), rt_dim(k1))
    np.testing.assert_allclose(D, np.eye(rt_dim(k1)), atol=1e-12)


# ----------------------------------------------------------------------------
# Piola map


def test_piola_identity():
    pts = np.array([[0.2, 0.3], [0.1, 0.1]])
    rv, rd = eval_rt_basis(2, pts)
    vals, divs = piola_push(np.eye(2), 1.0, rv, rd)
    np.testing.assert_allclose(vals[0], rv)
    np.testing.assert_allclose(divs[0], rd)


@pytest.mark.parametrize("scale", [0.5, 3.0])
def test_piola_scaling_preserves_divergence_integral(scale):
    pts, w = gauss_triangle(6)
    rv, rd = eval_rt_basis(2, pts)
    J = scale * np.eye(2)
    vals, divs = piola_push(J, scale**2, rv, rd)
    np.testing.assert_allclose(divs[0], rd / scale**2)
    np.testing.assert_allclose(scale**2 * (w @ divs[0]), w @ rd, atol=1e-13)


def test_piola_rejects_negative_orientation():
    rv, rd = eval_rt_basis(1, [[0.2, 0.2]])
    with pytest.raises(ElementError):
        piola_push(np.diag([1.0, -1.0]), -1.0, rv, rd)


def _to_ref(mesh, cell, X):
    J, det, x0 = cell_geometry(mesh.vertices, mesh.cells[[cell]])
    return np.linalg.solve(J[0], (X - x0[0]).T).T


@pytest.mark.parametrize("k1", [1, 2, 3])
def test_normal_trace_continuous_across_shared_edge(k1):
    mesh = build_unit_square_right(2)
    V = rt_space(mesh, k1)
    interior = np.setdiff1d(np.arange(mesh.nedges), mesh.boundary_edges)
    s = np.linspace(0.05, 0.95, 7)
    for e in interior:
        p0, p1 = mesh.vertices[mesh.edges[e]]
        X = p0 + s[:, None] * (p1 - p0)
        n, _ = mesh.edge_normals(np.array([e]))
        cells = np.nonzero((mesh.cell_edges == e).any(axis=1))[0]
        assert len(cells) == 2
        for dof in V.edge_dofs([e])[0]:
            traces = []
            for c in cells:
                coeffs = np.zeros(V.ndof)
                coeffs[dof] = 1.0
                ref = _to_ref(mesh, c, X)
                rv, rd = eval_rt_basis(k1, ref)
                J, det, _ = cell_geometry(mesh.vertices, mesh.cells[[c]])
                loc = coeffs[V.dofmap[c]] * V.factors[c]
                vals = (J[0] @ np.einsum("pbi,b->pi", rv, loc).T).T / det[0]
                traces.append(vals @ n[0])
            np.testing.assert_allclose(traces[0], traces[1], atol=1e-12)


# ----------------------------------------------------------------------------
# interpolation


def _dg_l2_error(space, coeffs, f):
    q = quad_rule(14)
    _, det, _ = cell_geometry(space.mesh.vertices, space.mesh.cells)
    X = physical_points(space.mesh, q.points)
    diff = evaluate(space, coeffs, q.points) - f(X[..., 0], X[..., 1])
    return math.sqrt(np.sum(q.weights * np.abs(det)[:, None] * diff**2))


def _rt_hdiv_error(space, coeffs, F, divF):
    q = quad_rule(14)
    _, det, _ = cell_geometry(space.mesh.vertices, space.mesh.cells)
    X = physical_points(space.mesh, q.points)
    vals, divs = evaluate(space, coeffs, q.points)
    Fx, Fy = F(X[..., 0], X[..., 1])
    e = (vals[..., 0] - Fx) ** 2 + (vals[..., 1] - Fy) ** 2 + (divs - divF(X[..., 0], X[..., 1])) ** 2
    return math.sqrt(np.sum(q.weights * np.abs(det)[:, None] * e))


@pytest.mark.parametrize("k", [0, 1, 2])
def test_interp_dg_reproduces_constants(k):
    V = dg_space(build_unit_square_right(4), k)
    assert _dg_l2_error(V, interp_dg(V, lambda x, y: 1.0 + 0 * x), lambda x, y: 1.0 + 0 * x) < 1e-13


def test_interp_dg_reproduces_linear():
    V = dg_space(build_unit_square_right(4), 1)
    assert _dg_l2_error(V, interp_dg(V, lambda x, y: x), lambda x, y: x) < 1e-12


def test_interp_dg_rate():
    f = lambda x, y: np.sin(2 * np.pi * x) * np.cos(3 * np.pi * y)  # noqa: E731
    errs = [_dg_l2_error(V, interp_dg(V, f), f) for V in (dg_space(build_unit_square_right(n), 0) for n in (16, 32))]
    assert errs[0] / errs[1] == pytest.approx(2.0, abs=0.1)


def test_interp_rt_reproduces_constant_and_linear():
    mesh = build_unit_square_right(4)
    V = rt_space(mesh, 1)
    F = lambda x, y: (1.0 + 0 * x, 0 * x)  # noqa: E731
    assert _rt_hdiv_error(V, interp_rt(V, F), F, lambda x, y: 0 * x) < 1e-13
    V2 = rt_space(mesh, 2)
    G = lambda x, y: (2 * x, 2 * y)  # noqa: E731
    assert _rt_hdiv_error(V2, interp_rt(V2, G), G, lambda x, y: 4.0 + 0 * x) < 1e-12


def test_interp_rt_rate():
    F = lambda x, y: (  # noqa: E731
        2 * np.pi * np.cos(2 * np.pi * x) * np.cos(3 * np.pi * y),
        -3 * np.pi * np.sin(2 * np.pi * x) * np.sin(3 * np.pi * y),
    )
    divF = lambda x, y: -13 * np.pi**2 * np.sin(2 * np.pi * x) * np.cos(3 * np.pi * y)  # noqa: E731
    errs = []
    for n in (16, 32):
        V = rt_space(build_unit_square_right(n), 1)
        errs.append(_rt_hdiv_error(V, interp_rt(V, F), F, divF))
    assert errs[0] / errs[1] == pytest.approx(2.0, abs=0.1)


@pytest.mark.parametrize("k1", [1, 2, 3])
def test_divergence_of_interpolant_matches_cell_flux(k1):
    mesh = build_mesh("lshape", 4)
    V = rt_space(mesh, k1)
    F = lambda x, y: (np.sin(x) * np.exp(y), x**2 * y**3 + np.cos(y))  # noqa: E731
    coeffs = interp_rt(V, F)
    q = quad_rule(14)
    _, det, _ = cell_geometry(mesh.vertices, mesh.cells)
    _, divs = evaluate(V, coeffs, q.points)
    lhs = np.sum(divs * q.weights, axis=1) * det
    s, w = np.polynomial.legendre.leggauss(12)
    s, w = 0.5 * (s + 1), 0.5 * w
    rhs = np.zeros(mesh.ncells)
    P = mesh.vertices[mesh.cells]
    for le, (a, b) in enumerate(LOCAL_EDGES):
        t = P[:, b] - P[:, a]
        nl = np.column_stack([t[:, 1], -t[:, 0]])  # outward for CCW cells, scaled by length
        X = P[:, a, None, :] + s[None, :, None] * t[:, None, :]
        Fx, Fy = F(X[..., 0], X[..., 1])
        rhs += (Fx * nl[:, :1] + Fy * nl[:, 1:]) @ w
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# ----------------------------------------------------------------------------
# divergence containment, trace inequality, Helmholtz dimensions


@pytest.mark.parametrize("k", [0, 1, 2])
def test_divergence_lies_in_dg(k, rng):
    mesh = build_mesh("square", 4)
    V = rt_space(mesh, k + 1)
    q = quad_rule(10)
    phi = eval_dg_basis(k, q.points)
    for _ in range(50):
        _, divs = evaluate(V, rng.standard_normal(V.ndof), q.points)
        coef, *_ = np.linalg.lstsq(phi, divs.T, rcond=None)
        resid = np.abs(phi @ coef - divs.T).max()
        assert resid <= 1e-12 * max(1.0, np.abs(divs).max())


@pytest.mark.parametrize("domain,n", [("square", 8), ("lshape", 8)])
@pytest.mark.parametrize("k", [0, 1, 2])
def test_inverse_trace_inequality(domain, n, k, rng):
    mesh = build_mesh(domain, n)
    U = dg_space(mesh, k)
    gamma = trace_constant_unscaled(k, mesh)
    q = quad_rule(2 * k)
    _, det, _ = cell_geometry(mesh.vertices, mesh.cells)
    s, w = np.polynomial.legendre.leggauss(k + 2)
    s, w = 0.5 * (s + 1), 0.5 * w
    edges = mesh.boundary_edges
    cells, loc = mesh.edge_local_index(edges)
    lengths = np.linalg.norm(np.diff(mesh.vertices[mesh.edges[edges]], axis=1)[:, 0], axis=1)
    phi_e = np.stack([eval_dg_basis(k, edge_points(le, s)) for le in range(3)])[loc]  # (E, q, nb)
    phi = eval_dg_basis(k, q.points)
    for _ in range(100):
        c = rng.standard_normal(U.ndof)
        vol = np.sum(((c[U.dofmap] @ phi.T) ** 2 * q.weights) * det[:, None])
        tr = np.einsum("eqb,eb->eq", phi_e, c[U.dofmap[cells]])
        bnd = np.sum((tr**2 @ w) * lengths)
        assert bnd <= gamma * vol


def _curl_cg_columns(mesh, k1):
    """RT coefficient vectors of curl(phi) for the nodal CG(k1) basis.

    Built by a per-cell least-squares fit, so a small residual also checks
    curl CG(k1) is contained in RT(k1)."""
    V = rt_space(mesh, k1)
    nodes = dg_nodes(k1)
    X = physical_points(mesh, nodes)
    keys = np.round(X.reshape(-1, 2) * 10**9).astype(np.int64)
    _, gid = np.unique(keys, axis=0, return_inverse=True)
    gid = gid.reshape(mesh.ncells, -1)
    q = quad_rule(2 * k1)
    grads = eval_dg_grad(k1, q.points)
    gx, gy = grads[..., 0], grads[..., 1]
    rv, _ = eval_rt_basis(k1, q.points)
    J, det, _ = cell_geometry(mesh.vertices, mesh.cells)
    cols = np.full((V.ndof, gid.max() + 1), np.nan)
    worst = 0.0
    for c in range(mesh.ncells):
        Jinv = np.linalg.inv(J[c])
        # physical gradient = J^{-T} ref gradient; curl = (d/dy, -d/dx)
        px = Jinv[0, 0] * gx + Jinv[1, 0] * gy
        py = Jinv[0, 1] * gx + Jinv[1, 1] * gy
        target = np.stack([py, -px], axis=-1)  # (q, nloc, 2)
        basis = np.einsum("ij,qbj->qbi", J[c], rv) / det[c] * V.factors[c][None, :, None]
        A = basis.transpose(0, 2, 1).reshape(-1, basis.shape[1])
        Bt = target.transpose(0, 2, 1).reshape(-1, target.shape[1])
        sol, *_ = np.linalg.lstsq(A, Bt, rcond=None)
        worst = max(worst, np.abs(A @ sol - Bt).max())
        for j, g in enumerate(gid[c]):
            col = cols[V.dofmap[c], g]
            known = ~np.isnan(col)
            assert np.allclose(col[known], sol[known, j], atol=1e-10)
            cols[V.dofmap[c], g] = sol[:, j]
    return np.nan_to_num(cols), worst


@pytest.mark.parametrize("k", [0, 1, 2])
@pytest.mark.parametrize("n", [2, 4])
def test_helmholtz_dimensions(k, n):
    mesh = build_unit_square_right(n)
    U, V, _ = make_spaces(mesh, k)
    C, worst = _curl_cg_columns(mesh, k + 1)
    assert worst < 1e-10
    B1, _ = assemble_b((U, V, V))
    M, _ = rt_matrices(V)
    G = np.linalg.solve(M.toarray(), B1.toarray())  # discrete gradients of DG(k)
    rc, rg = np.linalg.matrix_rank(C), np.linalg.matrix_rank(G)
    assert rc == C.shape[1] - 1  # constants are curl-free
    assert rg == U.ndof
    assert rc + rg == V.ndof
    assert np.linalg.matrix_rank(np.hstack([C, G])) == V.ndof


# ----------------------------------------------------------------------------
# trace constant and reference counts


def test_trace_constant_right_mesh():
    mesh = build_unit_square_right(16)
    assert trace_constant(2, mesh) == pytest.approx(6 * 2 * (2 + math.sqrt(2)), rel=1e-12)
    assert trace_constant(2, mesh) == pytest.approx(40.97, abs=0.01)
    assert trace_constant(0, mesh) == pytest.approx(2 * (2 + math.sqrt(2)), rel=1e-12)
    assert trace_constant(0, mesh) == pytest.approx(6.83, abs=0.01)


@pytest.mark.parametrize("k", [0, 1, 2])
def test_trace_constant_scale_invariant(k):
    assert trace_constant(k, build_unit_square_right(8)) == pytest.approx(
        trace_constant(k, build_unit_square_right(16)), rel=1e-12
    )


REFERENCE_N = {
    64: (33024, 107008, 221952),
    128: (131584, 427008, 886272),
    256: (525312, 1705984, 3542016),
    512: (2099200, 6819840, 14161920),
}
REFERENCE_NNZ_64 = (352768, 2762752, 10179072)


@pytest.mark.parametrize("n", [64, 128])
@pytest.mark.parametrize("k", [0, 1, 2])
def test_reference_dimension_from_spaces(n, k):
    U, V, W = make_spaces(build_unit_square_right(n), k)
    assert U.ndof + V.ndof + W.ndof == REFERENCE_N[n][k]


@pytest.mark.parametrize("n", sorted(REFERENCE_N))
@pytest.mark.parametrize("k", [0, 1, 2])
def test_reference_dimension_closed_form(n, k):
    ncells, nedges = 2 * n * n, 3 * n * n + 2 * n
    k1 = k + 1
    N = ncells * (k + 1) * (k + 2) // 2 + 2 * (nedges * k1 + ncells * k1 * (k1 - 1))
    assert N == REFERENCE_N[n][k]


@pytest.mark.parametrize("k", [0, 1, 2])
def test_reference_nnz(k):
    mesh = label_boundary(build_unit_square_right(64), ALL_G0)
    raw = assemble_system(mesh, ProblemSpec(c0=1.0, c1=1.0, k=k), constrain=False)
    assert raw.structural_nnz == REFERENCE_NNZ_64[k]
    assert raw.A.nnz + 2 * raw.B1.nnz + raw.A22.nnz == REFERENCE_NNZ_64[k]
