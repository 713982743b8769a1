import functools
import math

import numpy as np
import pytest

from mixedbih.harness import StudyConfig, convergence_study
from mixedbih.mesh import LSHAPE_SEGMENTS, SQUARE_SEGMENTS

CASE_A = {"E": 0, "W": 0, "N": 3, "S": 3}
CASE_B = {"E": 0, "W": 0, "S": 2, "N": 3}
CASE_C = {s: 0 for s in LSHAPE_SEGMENTS}
CASE_D = {"E": 0, "W": 1, "S": 1, "N": 3}
ALL_G0 = {s: 0 for s in SQUARE_SEGMENTS}
CLAMPED = {s: 1 for s in SQUARE_SEGMENTS}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# Experiment definitions shared by the harness and acceptance tests:
# (domain, partition, c0, c1, lambda, multigrid weight)
EXPERIMENTS = {
    "A": ("square", CASE_A, 0.0, 1.0, None, None),
    "B": ("square", CASE_B, 2.0, 4.0, None, None),
    "C": ("lshape", CASE_C, 0.0, 0.0, None, "1/h"),
    "D": ("square", CASE_D, 0.0, 0.0, 125.0, "1/h"),
}


@functools.lru_cache(maxsize=None)
def study_row(name, k, n, solver="direct", case="u1ex", tol=1e-10):
    """One convergence-study row, cached for the whole session."""
    domain, part, c0, c1, lam, weight = EXPERIMENTS[name]
    cfg = StudyConfig(
        domain=domain, partition=dict(part), c0=c0, c1=c1, lam=lam, k_list=[k], h_list=[n],
        case=case, solver=solver, weight_list=[weight] if weight and solver == "mg" else [], tol=tol,
    )
    return convergence_study(cfg)[0]


def rate(name, key, k, n_coarse, n_fine, **kw):
    return math.log2(study_row(name, k, n_coarse, **kw)[key] / study_row(name, k, n_fine, **kw)[key])
