"""Structured triangular meshes of the unit square and the L-shaped domain.

All entity numberings are canonical: vertices, edges and cells are sorted
lexicographically by (y, x) of their vertex sums, and every cell lists its
lowest-numbered vertex first followed by the others counter-clockwise.
Coordinates on power-of-two grids are dyadic, so congruent cells produce
bitwise identical element data wherever they sit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAMMA_CLASSES = (0, 1, 2, 3)

SQUARE_SEGMENTS = ("N", "S", "E", "W")
# L-shape sides, counter-clockwise, named by their start vertex
LSHAPE_CORNERS = np.array(
    [[0.0, 0.0], [1.0, 0.0], [1.0, 0.5], [0.5, 0.5], [0.5, 1.0], [0.0, 1.0]]
)
LSHAPE_SEGMENTS = ("L0", "L1", "L2", "L3", "L4", "L5")


class MeshError(ValueError):
    pass


class Mesh2D:
    """Conforming triangular mesh with edge connectivity and boundary labels.

    Attributes
    ----------
    vertices : (V, 2) float array
    cells : (C, 3) int array, counter-clockwise
    edges : (E, 2) int array, low -> high vertex index
    cell_edges : (C, 3) int array, edge opposite each local vertex
    cell_edge_dirs : (C, 3) int array of +-1, +1 when the global edge
        orientation agrees with counter-clockwise traversal of the cell
    edge_cells : (E, 2) int array, adjacent cells (-1 for none)
    segment : (E,) object array of boundary segment names ('' interior)
    gamma : (E,) int array of boundary classes (-1 interior / unlabelled)
    """

    def __init__(self, vertices, cells, domain, n, level=0, parent=None, parent_cell=None):
        self.vertices = vertices
        self.cells = cells
        self.domain = domain
        self.n = n
        self.level = level
        self.parent = parent
        self.parent_cell = parent_cell
        self._build_edges()
        self.segment = self._name_segments()
        self.gamma = np.full(len(self.edges), -1, dtype=np.int64)
        self.gamma_partition = None

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def nvertices(self):
        return len(self.vertices)

    @property
    def ncells(self):
        return len(self.cells)

    @property
    def nedges(self):
        return len(self.edges)

    def _build_edges(self):
        c = self.cells
        loc = np.array([[1, 2], [2, 0], [0, 1]])
        a = c[:, loc[:, 0]].ravel()
        b = c[:, loc[:, 1]].ravel()
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        pairs = np.column_stack([lo, hi])
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        inv = inv.ravel()
        mid = self.vertices[uniq[:, 0]] + self.vertices[uniq[:, 1]]
        order = np.lexsort((mid[:, 0], mid[:, 1]))
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        self.edges = uniq[order]
        self.cell_edges = rank[inv].reshape(-1, 3)
        self.cell_edge_dirs = np.where(a < b, 1, -1).reshape(-1, 3)
        ec = np.full((len(self.edges), 2), -1, dtype=np.int64)
        cell_ids = np.repeat(np.arange(len(c)), 3)
        flat = self.cell_edges.ravel()
        first = np.ones(len(flat), dtype=bool)
        order2 = np.argsort(flat, kind="stable")
        fs = flat[order2]
        dup = np.r_[False, fs[1:] == fs[:-1]]
        first[order2[dup]] = False
        ec[flat[first], 0] = cell_ids[first]
        ec[flat[~first], 1] = cell_ids[~first]
        self.edge_cells = ec

    @property
    def boundary_edges(self):
        return np.flatnonzero(self.edge_cells[:, 1] < 0)

    def boundary_cells(self):
        """Cells with at least one boundary vertex (closure touches the boundary)."""
        bverts = np.unique(self.edges[self.boundary_edges])
        mask = np.isin(self.cells, bverts).any(axis=1)
        return np.flatnonzero(mask)

    def edge_local_index(self, edges):
        """(cell, local edge index) of the first adjacent cell for each edge."""
        cells = self.edge_cells[edges, 0]
        loc = np.argmax(self.cell_edges[cells] == np.asarray(edges)[:, None], axis=1)
        return cells, loc

    def edge_normals(self, edges=None):
        """Unit global normals (clockwise rotation of the low->high tangent) and lengths."""
        e = self.edges if edges is None else self.edges[edges]
        t = self.vertices[e[:, 1]] - self.vertices[e[:, 0]]
        length = np.linalg.norm(t, axis=1)
        n = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
        return n, length

    def outward_sign(self, edges):
        """+1 where the global normal of a boundary edge points out of the domain."""
        cells, loc = self.edge_local_index(edges)
        return self.cell_edge_dirs[cells, loc]

    def _name_segments(self):
        seg = np.full(len(self.edges), "", dtype=object)
        bnd = self.boundary_edges
        mid = 0.5 * (self.vertices[self.edges[bnd, 0]] + self.vertices[self.edges[bnd, 1]])
        tol = 1e-12
        if self.domain == "square":
            x, y = mid.T
            names = np.where(
                np.abs(y - 1) < tol,
                "N",
                np.where(np.abs(y) < tol, "S", np.where(np.abs(x - 1) < tol, "E", "W")),
            )
        else:
            names = np.empty(len(bnd), dtype=object)
            for i, name in enumerate(LSHAPE_SEGMENTS):
                p0 = LSHAPE_CORNERS[i]
                p1 = LSHAPE_CORNERS[(i + 1) % 6]
                d = p1 - p0
                rel = mid - p0
                cross = rel[:, 0] * d[1] - rel[:, 1] * d[0]
                s = rel @ d / (d @ d)
                on = (np.abs(cross) < tol) & (s > 0) & (s < 1)
                names[on] = name
        seg[bnd] = names
        return seg

    def segments(self):
        return SQUARE_SEGMENTS if self.domain == "square" else LSHAPE_SEGMENTS

    def vertex_cells(self):
        """CSR-style (indptr, indices) map from vertices to incident cells."""
        return _incidence(self.cells, self.nvertices)

    def vertex_edges(self):
        return _incidence(self.edges, self.nvertices)

    def children(self):
        """(C_parent, 4) array of fine cells for each cell of the parent mesh."""
        if self.parent is None:
            raise MeshError("mesh has no parent")
        order = np.argsort(self.parent_cell, kind="stable")
        return order.reshape(-1, 4)

    def with_labels(self, partition):
        return label_boundary(self, partition)

    def dump(self, path):
        """Write the debugging text format (VERTICES / CELLS / BOUNDARY)."""
        with open(path, "w") as fh:
            fh.write("VERTICES\n")
            for i, (x, y) in enumerate(self.vertices):
                fh.write(f"{i} {x!r} {y!r}\n")
            fh.write("CELLS\n")
            for c in self.cells:
                fh.write(f"{c[0]} {c[1]} {c[2]}\n")
            fh.write("BOUNDARY\n")
            for e in self.boundary_edges:
                g = self.gamma[e]
                fh.write(f"{e} {'gamma%d' % g if g >= 0 else self.segment[e]}\n")

    def __repr__(self):
        return (
            f"Mesh2D(domain={self.domain!r}, n={self.n}, cells={self.ncells}, "
            f"vertices={self.nvertices}, edges={self.nedges})"
        )


def _incidence(conn, nv):
    rows = conn.ravel()
    ids = np.repeat(np.arange(len(conn)), conn.shape[1])
    order = np.argsort(rows, kind="stable")
    indptr = np.zeros(nv + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    return np.cumsum(indptr), ids[order]


def _canonical(vertices, cells):
    """Renumber to the canonical ordering; returns (vertices, cells, cell_perm)."""
    vorder = np.lexsort((vertices[:, 0], vertices[:, 1]))
    vrank = np.empty_like(vorder)
    vrank[vorder] = np.arange(len(vorder))
    v = vertices[vorder]
    c = vrank[cells]
    p = v[c]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 2, 0] - p[:, 0, 0]
    ) * (p[:, 1, 1] - p[:, 0, 1])
    c = np.where((area2 < 0)[:, None], c[:, [0, 2, 1]], c)
    # rotate so the lowest index leads, keeping orientation
    shift = np.argmin(c, axis=1)
    idx = (shift[:, None] + np.arange(3)[None, :]) % 3
    c = np.take_along_axis(c, idx, axis=1)
    s = v[c].sum(axis=1)
    corder = np.lexsort((s[:, 0], s[:, 1]))
    return v, c[corder], corder


def build_unit_square_right(n: int) -> Mesh2D:
    """Unit square, n x n squares, each cut by its top-left/bottom-right diagonal."""
    if n < 1:
        raise MeshError("n must be >= 1")
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    verts = np.column_stack([i.ravel(), j.ravel()]).astype(float) / n
    vid = lambda a, b: b * (n + 1) + a
    a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    a, b = a.ravel(), b.ravel()
    bl, br, tl, tr = vid(a, b), vid(a + 1, b), vid(a, b + 1), vid(a + 1, b + 1)
    cells = np.concatenate([np.column_stack([bl, br, tl]), np.column_stack([br, tr, tl])])
    v, c, _ = _canonical(verts, cells)
    return Mesh2D(v, c, "square", n)


def build_lshape_crossed(n: int) -> Mesh2D:
    """L-shaped domain [0,1]^2 minus (1/2,1]^2, squares of side 1/n cut by both diagonals."""
    if n < 2 or n % 2:
        raise MeshError("L-shape needs an even n >= 2")
    half = n // 2
    keep = [(a, b) for b in range(n) for a in range(n) if a < half or b < half]
    corner = {}
    verts = []

    def vid(x2, y2):
        # coordinates in units of 1/(2n)
        key = (x2, y2)
        if key not in corner:
            corner[key] = len(verts)
            verts.append((x2 / (2.0 * n), y2 / (2.0 * n)))
        return corner[key]

    cells = []
    for a, b in keep:
        bl, br = vid(2 * a, 2 * b), vid(2 * a + 2, 2 * b)
        tl, tr = vid(2 * a, 2 * b + 2), vid(2 * a + 2, 2 * b + 2)
        c = vid(2 * a + 1, 2 * b + 1)
        cells += [(bl, br, c), (br, tr, c), (tr, tl, c), (tl, bl, c)]
    v, c, _ = _canonical(np.array(verts), np.array(cells))
    return Mesh2D(v, c, "lshape", n)


def build_lshape_refined(n: int) -> Mesh2D:
    """L-shape mesh obtained from the crossed n=2 mesh by uniform refinement.

    Same cell count as ``build_lshape_crossed(n)`` but the interior pattern
    is that of a midpoint-refined hierarchy, so every level is nested in the
    next.  This is the default L-shape family used by the studies.
    """
    if n < 2 or n & (n - 1):
        raise MeshError("refined L-shape needs n a power of two >= 2")
    mesh = build_lshape_crossed(2)
    while mesh.n < n:
        mesh = refine_uniform(mesh)
    return Mesh2D(mesh.vertices, mesh.cells, "lshape", n)


MESH_BUILDERS = {
    "square": build_unit_square_right,
    "lshape": build_lshape_refined,
    "lshape-crossed": build_lshape_crossed,
}


def build_mesh(domain: str, n: int) -> Mesh2D:
    """Mesh of ``domain`` ('square', 'lshape' or 'lshape-crossed') with h = 1/n."""
    try:
        builder = MESH_BUILDERS[domain]
    except KeyError:
        raise MeshError(f"unknown domain {domain!r}") from None
    return builder(n)


def refine_uniform(mesh: Mesh2D) -> Mesh2D:
    """Split every cell into four through edge midpoints; labels are inherited."""
    nv = mesh.nvertices
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    verts = np.vstack([mesh.vertices, mids])
    c = mesh.cells
    m0, m1, m2 = (nv + mesh.cell_edges[:, i] for i in range(3))  # opposite v0, v1, v2
    children = np.concatenate(
        [
            np.column_stack([c[:, 0], m2, m1]),
            np.column_stack([m2, c[:, 1], m0]),
            np.column_stack([m1, m0, c[:, 2]]),
            np.column_stack([m0, m1, m2]),
        ]
    )
    parent = np.tile(np.arange(mesh.ncells), 4)
    v, cc, corder = _canonical(verts, children)
    fine = Mesh2D(v, cc, mesh.domain, 2 * mesh.n, mesh.level + 1, mesh, parent[corder])
    if mesh.gamma_partition is not None:
        fine = label_boundary(fine, mesh.gamma_partition)
    return fine


def label_boundary(mesh: Mesh2D, partition: dict) -> Mesh2D:
    """Return a copy of ``mesh`` with Gamma classes on every boundary edge.

    ``partition`` maps each named segment to a class in {0, 1, 2, 3}.
    """
    names = set(mesh.segments())
    extra = set(partition) - names
    if extra:
        raise MeshError(f"unknown boundary segment(s) {sorted(extra)} for {mesh.domain}")
    missing = names - set(partition)
    if missing:
        raise MeshError(f"unlabelled boundary segment(s) {sorted(missing)}")
    for name, g in partition.items():
        if g not in GAMMA_CLASSES:
            raise MeshError(f"segment {name}: invalid class {g!r}")
    out = Mesh2D.__new__(Mesh2D)
    out.__dict__.update(mesh.__dict__)
    gamma = np.full(mesh.nedges, -1, dtype=np.int64)
    for e in mesh.boundary_edges:
        gamma[e] = partition[mesh.segment[e]]
    out.gamma = gamma
    out.gamma_partition = dict(partition)
    return out


def parse_gamma(value) -> int:
    """Accept 0..3, 'gamma2', 'Gamma2', 'G2'."""
    if isinstance(value, (int, np.integer)):
        g = int(value)
    else:
        s = str(value).strip().lower()
        for prefix in ("gamma", "g"):
            if s.startswith(prefix):
                s = s[len(prefix):]
                break
        g = int(s)
    if g not in GAMMA_CLASSES:
        raise MeshError(f"invalid boundary class {value!r}")
    return g


def nest_hierarchy(meshes):
    """Given meshes of doubling n on the same domain, set parent/parent_cell links.

    Fine cells are located in the coarse mesh by their centroids.
    """
    for coarse, fine in zip(meshes[:-1], meshes[1:]):
        if fine.n != 2 * coarse.n:
            raise MeshError("hierarchy levels must double n")
        fine.parent = coarse
        fine.parent_cell = locate_cells(coarse, fine.vertices[fine.cells].mean(axis=1))
    return meshes


def locate_cells(mesh: Mesh2D, points, tol=1e-12):
    """Index of the cell containing each point (brute force over a bucket grid)."""
    points = np.asarray(points, dtype=float)
    p = mesh.vertices[mesh.cells]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
    Jinv = np.linalg.inv(J)
    lo = p.min(axis=1)
    hi = p.max(axis=1)
    nb = mesh.n
    # bucket cells by the grid squares their bounding boxes overlap
    bucket = {}
    ia0 = np.floor(lo * nb + tol).astype(int)
    ia1 = np.ceil(hi * nb - tol).astype(int)
    for c in range(mesh.ncells):
        for a in range(ia0[c, 0], ia1[c, 0]):
            for b in range(ia0[c, 1], ia1[c, 1]):
                bucket.setdefault((a, b), []).append(c)
    out = np.full(len(points), -1, dtype=np.int64)
    sq = np.clip(np.floor(points * nb).astype(int), 0, nb - 1)
    for i, (pt, (a, b)) in enumerate(zip(points, sq)):
        for c in bucket.get((a, b), ()):
            xi = Jinv[c] @ (pt - p[c, 0])
            if xi[0] >= -tol and xi[1] >= -tol and xi.sum() <= 1 + tol:
                out[i] = c
                break
    if np.any(out < 0):
        raise MeshError("point outside mesh")
    return out


@dataclass(frozen=True)
class StarPatch:
    """Unconstrained system DoFs in the topological star of one vertex."""

    vertex: int
    dofs: np.ndarray


def star_patches(mesh: Mesh2D, spaces, constrained=None):
    """One Vanka patch per vertex: u DoFs of incident cells, v and alpha DoFs
    on incident edges and in the interiors of incident cells.

    ``spaces`` are the (DG, RT, RT) spaces in system order; ``constrained``
    is a boolean mask over the system (defaults to the spaces' own masks).
    Patches left empty by constraints are dropped.
    """
    U, V, W = spaces
    nu, nv = U.ndof, V.ndof
    if constrained is None:
        constrained = np.concatenate([U.constrained, V.constrained, W.constrained])
    k1 = V.order
    vc_ptr, vc = mesh.vertex_cells()
    ve_ptr, ve = mesh.vertex_edges()
    patches = []
    for vtx in range(mesh.nvertices):
        cells = vc[vc_ptr[vtx]:vc_ptr[vtx + 1]]
        edges = ve[ve_ptr[vtx]:ve_ptr[vtx + 1]]
        rt = np.concatenate([(edges[:, None] * k1 + np.arange(k1)).ravel(), V.dofmap[cells, 3 * k1:].ravel()])
        dofs = np.concatenate([U.dofmap[cells].ravel(), nu + rt, nu + nv + rt])
        dofs = np.sort(dofs[~constrained[dofs]])
        if len(dofs):
            patches.append(StarPatch(vtx, dofs))
    return patches
