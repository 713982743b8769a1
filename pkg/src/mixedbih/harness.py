"""Manufactured solutions, error norms, convergence studies and benchmarks."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import DATA_DEGREE, InadmissibleSpec, ProblemSpec, _boundary_tables, _edges_in, assemble_system
from .elements import cell_geometry, evaluate, physical_points, quad_rule
from .mesh import SQUARE_SEGMENTS, LSHAPE_SEGMENTS, build_mesh, label_boundary, parse_gamma

log = logging.getLogger(__name__)

PI = math.pi


# ----------------------------------------------------------------------------
# manufactured solutions


def _sin_part(a):
    """sin(a pi t) and its first four derivatives."""
    w = a * PI
    return [
        lambda t: np.sin(w * t),
        lambda t: w * np.cos(w * t),
        lambda t: -(w**2) * np.sin(w * t),
        lambda t: -(w**3) * np.cos(w * t),
        lambda t: w**4 * np.sin(w * t),
    ]


def _cos_part(a):
    w = a * PI
    return [
        lambda t: np.cos(w * t),
        lambda t: -w * np.sin(w * t),
        lambda t: -(w**2) * np.cos(w * t),
        lambda t: w**3 * np.sin(w * t),
        lambda t: w**4 * np.cos(w * t),
    ]


def _power_part(p):
    """t**p and its first four derivatives (t >= 0)."""
    coefs = [1.0]
    for j in range(4):
        coefs.append(coefs[-1] * (p - j))
    return [lambda t, c=c, j=j: c * np.power(t, p - j) for j, c in enumerate(coefs)]


def _add(f, g):
    return [lambda t, a=a, b=b: a(t) + b(t) for a, b in zip(f, g)]


@dataclass
class ManufacturedCase:
    """Separable exact solution u = X(x) Y(y).

    ``X`` and ``Y`` hold callables for the function and its first four
    derivatives; all other fields follow by the product rule.
    """

    name: str
    X: list
    Y: list
    c0: float = 0.0
    c1: float = 0.0

    def u(self, x, y):
        return self.X[0](x) * self.Y[0](y)

    def grad(self, x, y):
        return self.X[1](x) * self.Y[0](y), self.X[0](x) * self.Y[1](y)

    def lap(self, x, y):
        return self.X[2](x) * self.Y[0](y) + self.X[0](x) * self.Y[2](y)

    def grad_lap(self, x, y):
        X, Y = self.X, self.Y
        return X[3](x) * Y[0](y) + X[1](x) * Y[2](y), X[2](x) * Y[1](y) + X[0](x) * Y[3](y)

    def bilap(self, x, y):
        X, Y = self.X, self.Y
        return X[4](x) * Y[0](y) + 2 * X[2](x) * Y[2](y) + X[0](x) * Y[4](y)

    # derived fields of the three-field system
    def v(self, x, y):
        return self.grad(x, y)

    def alpha(self, x, y):
        gx, gy = self.grad(x, y)
        lx, ly = self.grad_lap(x, y)
        return lx - self.c0 * gx, ly - self.c0 * gy

    def div_alpha(self, x, y):
        return self.bilap(x, y) - self.c0 * self.lap(x, y)

    def f(self, x, y):
        return self.bilap(x, y) - self.c0 * self.lap(x, y) + self.c1 * self.u(x, y)


def make_case(name: str, c0: float = 0.0, c1: float = 0.0) -> ManufacturedCase:
    """``u1ex = sin(2 pi x) cos(3 pi y)`` or
    ``u2ex = (sin(2 pi x) + x^(9/2)) (cos(3 pi y) + y^(17/4))``."""
    if name == "u1ex":
        return ManufacturedCase(name, _sin_part(2), _cos_part(3), c0, c1)
    if name == "u2ex":
        return ManufacturedCase(
            name, _add(_sin_part(2), _power_part(4.5)), _add(_cos_part(3), _power_part(4.25)), c0, c1
        )
    raise ValueError(f"unknown manufactured case {name!r}")


# ----------------------------------------------------------------------------
# errors


@dataclass
class ErrorReport:
    h: float
    R_uv: float
    R_alpha: float
    R_uv_plain: float
    raw: dict = field(default_factory=dict)


def _relative(err2, norm2):
    """sqrt(err2 / norm2); the absolute error when the exact field vanishes."""
    return math.sqrt(err2 / norm2) if norm2 > 0 else math.sqrt(err2)


def compute_errors(system, x, case: ManufacturedCase) -> ErrorReport:
    """Relative errors of (u, v) in L2 x H(div) and of alpha in H(div).

    When Gamma_1 carries Nitsche terms the (u, v) error is additionally
    reported in the strengthened norm with h ||div e||^2 + ||e.n||^2 / h on
    Gamma_1; ``R_uv`` is then the strengthened value.  Its denominator is
    the strengthened norm of the exact pair, whose normal-trace term is
    zero since the exact v satisfies the boundary data.
    """
    mesh = system.mesh
    U, V, W = system.spaces
    uh, vh, ah = system.split(x)
    q = quad_rule(DATA_DEGREE)
    _, det, _ = cell_geometry(mesh.vertices, mesh.cells)
    wq = q.weights[None, :] * np.abs(det)[:, None]
    X = physical_points(mesh, q.points)
    xs, ys = X[..., 0], X[..., 1]

    def integrate(f):
        return float(np.sum(wq * f))

    ue = case.u(xs, ys)
    eu = integrate((evaluate(U, uh, q.points) - ue) ** 2)
    nu = integrate(ue**2)

    vv, vd = evaluate(V, vh, q.points)
    gx, gy = case.grad(xs, ys)
    lap = case.lap(xs, ys)
    ev = integrate((vv[..., 0] - gx) ** 2 + (vv[..., 1] - gy) ** 2)
    evd = integrate((vd - lap) ** 2)
    nv = integrate(gx**2 + gy**2)
    nvd = integrate(lap**2)

    av, ad = evaluate(W, ah, q.points)
    ax, ay = case.alpha(xs, ys)
    dva = case.div_alpha(xs, ys)
    ea = integrate((av[..., 0] - ax) ** 2 + (av[..., 1] - ay) ** 2) + integrate((ad - dva) ** 2)
    na = integrate(ax**2 + ay**2) + integrate(dva**2)

    plain_e = eu + ev + evd
    plain_n = nu + nv + nvd
    raw = dict(u=math.sqrt(eu), v=math.sqrt(ev), div_v=math.sqrt(evd), alpha=math.sqrt(ea))
    strong_e, strong_n = plain_e, plain_n
    edges = _edges_in(mesh, {1})
    if len(edges) and system.spec.nitsche:
        h = mesh.h
        Xb, wl, n, vals, divs, dofs = _boundary_tables(V, edges, DATA_DEGREE)
        loc = vh[dofs]  # basis traces already carry the orientation signs
        bv = np.einsum("eqbi,eb->eqi", vals, loc)
        bd = np.einsum("eqb,eb->eq", divs, loc)
        bx, by = case.grad(Xb[..., 0], Xb[..., 1])
        bl = case.lap(Xb[..., 0], Xb[..., 1])
        en = (bv[..., 0] - bx) * n[:, None, 0] + (bv[..., 1] - by) * n[:, None, 1]
        strong_e += h * np.sum(wl * (bd - bl) ** 2) + np.sum(wl * en**2) / h
        # the normal-trace term measures the mismatch with the boundary data,
        # which vanishes for the exact pair
        strong_n += h * np.sum(wl * bl**2)
    return ErrorReport(
        h=mesh.h,
        R_uv=_relative(strong_e, strong_n),
        R_alpha=_relative(ea, na),
        R_uv_plain=_relative(plain_e, plain_n),
        raw=raw,
    )



# ----------------------------------------------------------------------------
# configuration


class ConfigError(ValueError):
    pass


@dataclass
class StudyConfig:
    """Flat description of a convergence study or solver benchmark."""

    domain: str = "square"
    partition: dict = field(default_factory=dict)
    c0: float = 0.0
    c1: float = 0.0
    k_list: list = field(default_factory=lambda: [0])
    h_list: list = field(default_factory=list)  # values of 1/h
    case: str = "u1ex"
    lam: float | None = None
    solver: str = "direct"
    weight_list: list = field(default_factory=list)
    tol: float = 1e-8
    maxit: int = 100
    nitsche: bool = True

    def problem(self, k):
        return ProblemSpec(
            c0=self.c0, c1=self.c1, k=k, lam=self.lam, case=make_case(self.case, self.c0, self.c1),
            nitsche=self.nitsche,
        )

    def mesh(self, n):
        return label_boundary(build_mesh(self.domain, n), self.partition)


def _parse_inverse_h(tok):
    tok = tok.strip()
    if tok.startswith("2^"):
        return 2 ** int(tok[2:])
    if tok.startswith("1/"):
        tok = tok[2:]
    return int(tok)


def _split(value):
    return [t for t in (s.strip() for s in value.split(",")) if t]


def _parse_bool(value):
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_config(text: str) -> StudyConfig:
    """Parse ``key=value`` lines; '#' starts a comment.

    Keys: domain, bc.<segment>, c0, c1, k, h_list, case, lambda, solver,
    weight_list, tol, maxit, nitsche.
    """
    cfg = StudyConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("bc."):
                cfg.partition[key[3:]] = parse_gamma(value)
            elif key == "domain":
                cfg.domain = value
            elif key in ("c0", "c1", "tol"):
                setattr(cfg, key, float(value))
            elif key == "k":
                cfg.k_list = [int(t) for t in _split(value)]
            elif key == "h_list":
                cfg.h_list = [_parse_inverse_h(t) for t in _split(value)]
            elif key == "case":
                cfg.case = value
            elif key == "lambda":
                cfg.lam = None if value.lower() in ("", "default", "auto") else float(value)
            elif key == "solver":
                cfg.solver = value.lower()
            elif key == "weight_list":
                cfg.weight_list = [t if "h" in t.lower() else float(t) for t in _split(value)]
            elif key == "maxit":
                cfg.maxit = int(value)
            elif key == "nitsche":
                cfg.nitsche = _parse_bool(value)
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    if cfg.solver not in ("direct", "mg"):
        raise ConfigError(f"solver must be 'direct' or 'mg', got {cfg.solver!r}")
    if cfg.case not in ("u1ex", "u2ex"):
        raise ConfigError(f"unknown case {cfg.case!r}")
    if not cfg.partition:
        segs = SQUARE_SEGMENTS if cfg.domain == "square" else LSHAPE_SEGMENTS
        cfg.partition = {s: 0 for s in segs}
    return cfg


def load_config(path) -> StudyConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# ----------------------------------------------------------------------------
# studies


def _rate(prev, cur):
    if prev is None or prev <= 0 or cur <= 0:
        return float("nan")
    return math.log2(prev / cur)


def solve_system(system, cfg: StudyConfig, weight=None):
    """Solve with the configured solver; returns (x, iterations, converged, seconds)."""
    from .solver import build_hierarchy, direct_solve, mg_solve

    if cfg.solver == "direct":
        t0 = time.perf_counter()
        x = direct_solve(system)
        return x, 0, True, time.perf_counter() - t0
    H = build_hierarchy(cfg.domain, cfg.partition, system.spec, system.mesh.n, weight=weight)
    x, rep = mg_solve(system, H, tol_abs=cfg.tol, tol_rel=cfg.tol, maxit=cfg.maxit)
    return x, rep.iterations, rep.converged, rep.wall_time


def _dump_path(base, k, n, multi):
    if not multi:
        return base
    root, dot, ext = str(base).rpartition(".")
    if not dot:
        return f"{base}_k{k}_n{n}"
    return f"{root}_k{k}_n{n}.{ext}"


def convergence_study(cfg: StudyConfig, dump_matrix=None):
    """Rows (one per k and 1/h) with relative errors and observed rates."""
    rows = []
    multi = len(cfg.k_list) * len(cfg.h_list) > 1
    weight = cfg.weight_list[0] if cfg.weight_list else None
    for k in cfg.k_list:
        prev = None
        for n in cfg.h_list:
            spec = cfg.problem(k)
            mesh = cfg.mesh(n)
            system = assemble_system(mesh, spec)
            if dump_matrix:
                system.to_coo_text(_dump_path(dump_matrix, k, n, multi))
            x, its, ok, secs = solve_system(system, cfg, weight)
            err = compute_errors(system, x, spec.case)
            rows.append(
                dict(
                    k=k,
                    inv_h=n,
                    N=system.ndof,
                    nnz=system.structural_nnz,
                    R_uv=err.R_uv,
                    R_alpha=err.R_alpha,
                    rate_uv=_rate(prev and prev.R_uv, err.R_uv),
                    rate_alpha=_rate(prev and prev.R_alpha, err.R_alpha),
                    R_uv_plain=err.R_uv_plain,
                    rate_uv_plain=_rate(prev and prev.R_uv_plain, err.R_uv_plain),
                    iterations=its,
                    converged=ok,
                    solver=cfg.solver,
                    wall_time=secs,
                )
            )
            log.info("k=%d 1/h=%d N=%d R_uv=%.6g R_alpha=%.6g", k, n, system.ndof, err.R_uv, err.R_alpha)
            prev = err
    return rows


def mg_benchmark(cfg: StudyConfig, dump_matrix=None):
    """Iteration counts and solve times; one row per k, 1/h and weight."""
    from .solver import build_hierarchy, direct_solve, mg_solve

    rows = []
    weights = cfg.weight_list or [None]
    multi = len(cfg.k_list) * len(cfg.h_list) > 1
    for k in cfg.k_list:
        for n in cfg.h_list:
            spec = cfg.problem(k)
            system = assemble_system(cfg.mesh(n), spec)
            if dump_matrix:
                system.to_coo_text(_dump_path(dump_matrix, k, n, multi))
            for w in weights:
                t0 = time.perf_counter()
                if cfg.solver == "direct":
                    setup = 0.0
                    direct_solve(system)
                    its, ok, secs = 0, True, time.perf_counter() - t0
                else:
                    H = build_hierarchy(cfg.domain, cfg.partition, spec, n, weight=w)
                    setup = time.perf_counter() - t0
                    _, rep = mg_solve(system, H, tol_abs=cfg.tol, tol_rel=cfg.tol, maxit=cfg.maxit)
                    its, ok, secs = rep.iterations, rep.converged, rep.wall_time
                rows.append(
                    dict(
                        k=k,
                        inv_h=n,
                        N=system.ndof,
                        solver=cfg.solver,
                        weight="" if w is None else w,
                        iterations=its,
                        converged=ok,
                        setup_time=setup,
                        wall_time=secs,
                    )
                )
                log.info("k=%d 1/h=%d weight=%s iterations=%d converged=%s", k, n, w, its, ok)
    return rows


CSV_SCHEMA = 1
CONVERGE_COLUMNS = [
    "k", "1/h", "N", "R_uv", "R_alpha", "rate_uv", "rate_alpha",
    "iterations", "solver", "wall_time", "R_uv_plain", "rate_uv_plain", "nnz", "converged",
]
BENCH_COLUMNS = ["k", "1/h", "N", "solver", "weight", "iterations", "converged", "setup_time", "wall_time"]


_ROW_KEYS = {"1/h": "inv_h"}


def write_csv(rows, columns, path):
    """Header row plus one line per result; a leading comment carries the schema version."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# mixedbih schema {CSV_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row.get(_ROW_KEYS.get(c, c), "")) for c in columns})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.10g}"
    return v
