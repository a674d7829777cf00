import numpy as np
import pytest

from spatial_lda.covariance import CovParams, build_cov
from spatial_lda.estimation import LabeledDataset
from spatial_lda.gausscore import RngStream, cholesky, sample_mvn
from spatial_lda.geometry import build_grid, pairwise_distances


def simulate(u=6, r=5.0, n1=30, n2=30, signal=10, seed=0, nugget=0.2, sigma2=1.0, nu=0.5):
    """Small helper mirroring the simulation design: mean 1 on the first sites of class 1."""
    sites = build_grid(u)
    dist = pairwise_distances(sites)
    f = cholesky(build_cov(dist, CovParams(sigma2, nugget, r, nu)))
    mu1 = np.zeros(sites.p)
    mu1[:signal] = 1.0
    s = RngStream(seed)
    y1 = sample_mvn(mu1, f, s.child("c1"), n1)
    y2 = sample_mvn(np.zeros(sites.p), f, s.child("c2"), n2)
    return LabeledDataset(y1, y2, sites), dist, mu1


@pytest.fixture
def small_scenario():
    return simulate(u=4, r=3.0, n1=20, n2=20, signal=4, seed=3)


# one PASS/FAIL line per acceptance criterion, shown in the terminal summary
ACCEPTANCE: dict = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
