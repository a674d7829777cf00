import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from conftest import simulate
from spatial_lda.covariance import CovParams, TaperSpec, build_cov
from spatial_lda.estimation import (
    EstimationError,
    LabeledDataset,
    ScadSpec,
    StratificationError,
    class_means,
    cv_table,
    default_init,
    default_lambda_grid,
    fit_mle,
    gls_system,
    lambda_max,
    loglik,
    lse_direction,
    mle_theta,
    one_step_pmle,
    penalized_Q,
    pooled_variances,
    preg_from_trace,
    q_constant,
    scad_deriv,
    scad_penalty,
    select_lambda_cv,
    step1_beta,
    step3_beta_gls,
    step_theta,
    stratified_folds,
    transform_Z,
    univariate_scad,
    _q_rows,
    _scad_obj,
)
from spatial_lda.geometry import SiteSet, pairwise_distances


def _tiny(n1, n2, p, seed):
    gen = np.random.default_rng(seed)
    coords = gen.uniform(0, 3, size=(p, 2))
    sites = SiteSet(2, coords, tuple(str(k) for k in range(p)))
    data = LabeledDataset(gen.standard_normal((n1, p)) + 0.5, gen.standard_normal((n2, p)), sites)
    return data, pairwise_distances(sites)


def _dense_pieces(zt, sigma):
    """Literal (n-1)p objects: I~, J~ = J_{n-1} (x) I_p and Sigma-dot = (I~ - J~/n) diag(Sigma)."""
    m, p = zt.Z.shape
    n = zt.n
    It = np.eye(m * p)
    Jt = np.kron(np.ones((m, m)), np.eye(p))
    D = np.kron(np.eye(m), sigma)
    return It, Jt, (It - Jt / n) @ D


# ---------------------------------------------------------------------------
# data helpers


def test_class_means_cases():
    v = np.array([1.0, 2.0, 3.0])
    d = LabeledDataset(np.vstack([v, v]), np.zeros((2, 3)))
    mu1, mu2, ybar = class_means(d)
    assert np.array_equal(mu1, v)
    a = np.random.default_rng(0).standard_normal((3, 4))
    mu1, mu2, ybar = class_means(LabeledDataset(a, -a))
    assert np.allclose(ybar, 0.0, atol=1e-15)
    y1 = np.random.default_rng(1).standard_normal((4, 3))
    y2 = np.random.default_rng(2).standard_normal((5, 3))
    mu1, mu2, ybar = class_means(LabeledDataset(y1, y2))
    naive1 = np.array([sum(y1[:, j]) / 4 for j in range(3)])
    naive = np.array([(sum(y1[:, j]) + sum(y2[:, j])) / 9 for j in range(3)])
    assert np.allclose(mu1, naive1, rtol=1e-15)
    assert np.allclose(ybar, naive, rtol=1e-15)


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ValueError):
        LabeledDataset(np.array([[np.nan, 1.0]]), np.ones((2, 2)))
    with pytest.raises(ValueError):
        LabeledDataset(np.ones((1, 3)), np.ones((2, 3))).require_training()


def test_pooled_variance_divisor():
    y1 = np.array([[0.0], [2.0]])
    y2 = np.array([[1.0], [3.0], [5.0]])
    assert pooled_variances(LabeledDataset(y1, y2))[0] == pytest.approx((2 + 8) / 3)


# ---------------------------------------------------------------------------
# loglik


def test_loglik_zero_residuals_unit_variance():
    d = LabeledDataset(np.ones((2, 1)), np.ones((2, 1)))
    dist = pairwise_distances(SiteSet(1, [[0.0]], ("a",)))
    ll = loglik(CovParams(1.0, 0.0, 1.0), np.ones(1), np.ones(1), d, dist)
    assert ll == pytest.approx(-2 * math.log(2 * math.pi), rel=1e-14)


def test_loglik_quadratic_homogeneity():
    data, dist = _tiny(3, 3, 4, 5)
    mu1, mu2, _ = class_means(data)
    theta = CovParams(1.0, 0.9999999, 1.0)
    base = loglik(theta, mu1, mu2, data, dist)
    scaled = LabeledDataset(2 * data.class1, 2 * data.class2, data.sites)
    ll2 = loglik(theta, 2 * mu1, 2 * mu2, scaled, dist)
    const = -0.5 * data.p * data.n * math.log(2 * math.pi) - 0.5 * data.n * build_cov(dist, theta).toarray().diagonal().prod() ** 0
    f = np.linalg.slogdet(build_cov(dist, theta).toarray())[1]
    quad = -2 * (base + 0.5 * data.p * data.n * math.log(2 * math.pi) + 0.5 * data.n * f)
    quad2 = -2 * (ll2 + 0.5 * data.p * data.n * math.log(2 * math.pi) + 0.5 * data.n * f)
    assert quad2 == pytest.approx(4 * quad, rel=1e-10)
    del const


@pytest.mark.parametrize("seed", range(3))
def test_loglik_matches_dense_inverse(seed):
    data, dist = _tiny(3, 3, 4, seed)
    theta = CovParams(1.3, 0.25, 1.7)
    mu1, mu2, _ = class_means(data)
    mu1 = mu1 + 0.1
    sig = build_cov(dist, theta).toarray()
    inv = np.linalg.inv(sig)
    _, logdet = np.linalg.slogdet(sig)
    quad = sum((y - mu1) @ inv @ (y - mu1) for y in data.class1) + sum((y - mu2) @ inv @ (y - mu2) for y in data.class2)
    oracle = -0.5 * 6 * 4 * math.log(2 * math.pi) - 0.5 * 6 * logdet - 0.5 * quad
    assert loglik(theta, mu1, mu2, data, dist) == pytest.approx(oracle, abs=1e-8)


# ---------------------------------------------------------------------------
# Z transform and Q


def test_transform_z_rows_and_sum():
    data, _ = _tiny(2, 2, 3, 1)
    zt = transform_Z(data)
    _, _, ybar = class_means(data)
    assert zt.Z.shape == (3, 3)
    assert np.allclose(zt.Z.sum(axis=0), ybar - data.class2[-1], atol=1e-14)
    with pytest.raises(ValueError):
        transform_Z(LabeledDataset(np.ones((1, 3)), np.ones((2, 3))))
    same = LabeledDataset(np.ones((3, 2)), np.ones((4, 2)))
    assert np.array_equal(transform_Z(same).Z, np.zeros((6, 2)))


def test_transform_z_matches_naive_rows():
    data, _ = _tiny(3, 4, 5, 2)
    zt = transform_Z(data)
    ybar = np.vstack([data.class1, data.class2]).mean(axis=0)
    rows = [data.class1[i] - ybar for i in range(3)] + [data.class2[i] - ybar for i in range(3)]
    assert np.allclose(zt.Z, np.array(rows), rtol=0, atol=1e-15)
    assert np.array_equal(zt.x, np.r_[[4 / 7] * 3, [-3 / 7] * 3])


def test_curvature_identity():
    for n1, n2 in [(2, 2), (3, 5), (30, 30), (11, 4)]:
        data = LabeledDataset(np.zeros((n1, 3)), np.ones((n2, 3)))
        zt = transform_Z(data)
        sx = zt.x.sum()
        assert zt.sxx + sx * sx == pytest.approx(n1 * n2 / (n1 + n2), rel=1e-14)


@pytest.mark.parametrize("n", [3, 4, 5])
@pytest.mark.parametrize("p", [2, 3])
def test_block_inverse_identity(n, p):
    m = n - 1
    It = np.eye(m * p)
    Jt = np.kron(np.ones((m, m)), np.eye(p))
    assert np.abs((It - Jt / n) @ (It + Jt) - It).max() <= 1e-12


@pytest.mark.parametrize("n1,n2,p", [(2, 1 + 1, 2), (2, 2, 3), (3, 2, 2), (3, 3, 3)])
def test_determinant_identity(n1, n2, p):
    data, dist = _tiny(n1, n2, p, n1 * 10 + p)
    zt = transform_Z(data)
    sig = build_cov(dist, CovParams(1.4, 0.3, 2.0)).toarray()
    _, _, sdot = _dense_pieces(zt, sig)
    n = zt.n
    lhs = np.linalg.slogdet(sdot)[1]
    rhs = -p * math.log(n) + (n - 1) * np.linalg.slogdet(sig)[1]
    assert math.exp(lhs - rhs) == pytest.approx(1.0, rel=1e-8)


@pytest.mark.parametrize("seed", range(4))
def test_penalized_Q_equals_literal_density(seed):
    gen = np.random.default_rng(seed)
    n1, n2, p = [(3, 3, 4), (2, 3, 3), (3, 2, 4), (2, 2, 2)][seed]
    data, dist = _tiny(n1, n2, p, seed + 40)
    zt = transform_Z(data)
    theta = CovParams(0.8 + gen.uniform(), gen.uniform(0, 0.6), 0.5 + 2 * gen.uniform())
    beta = gen.standard_normal(p)
    spec = ScadSpec(0.3, 3.7)
    sig = build_cov(dist, theta).toarray()
    _, _, sdot = _dense_pieces(zt, sig)
    N = (zt.n - 1) * p
    r = (zt.Z - np.outer(zt.x, beta)).ravel()
    logdens = -0.5 * N * math.log(2 * math.pi) - 0.5 * np.linalg.slogdet(sdot)[1] - 0.5 * r @ np.linalg.solve(sdot, r)
    pen = zt.n * sum(scad_penalty(b, spec) for b in beta)
    assert penalized_Q(theta, beta, zt, dist, spec=spec) == pytest.approx(logdens - pen, abs=1e-8)


def test_efficient_quadratic_identity():
    data, dist = _tiny(3, 3, 3, 9)
    zt = transform_Z(data)
    sig = build_cov(dist, CovParams(1.0, 0.2, 1.3)).toarray()
    It, Jt, _ = _dense_pieces(zt, sig)
    beta = np.array([0.3, -0.2, 1.0])
    rows = _q_rows(zt, beta)
    inv = np.linalg.inv(sig)
    fast = sum(r @ inv @ r for r in rows)
    r = (zt.Z - np.outer(zt.x, beta)).ravel()
    literal = r @ np.kron(np.eye(zt.n - 1), inv) @ (It + Jt) @ r
    assert fast == pytest.approx(literal, rel=1e-10)


def test_Q_zero_noise_identity_covariance():
    # rows of each class equal to their class mean, so Z = X beta with beta = ybar1 - ybar2
    p = 3
    mu1 = np.array([1.0, -2.0, 0.5])
    data = LabeledDataset(np.tile(mu1, (3, 1)), np.zeros((3, p)))
    zt = transform_Z(data)
    dist = pairwise_distances(SiteSet(1, [[0.0], [100.0], [200.0]], ("a", "b", "c")))
    theta = CovParams(1.0, 0.999999999999, 1e-3)
    beta = mu1
    spec = ScadSpec(0.1)
    q = penalized_Q(theta, beta, zt, dist, spec=spec)
    assert q == pytest.approx(q_constant(6, p) - 6 * np.sum(scad_penalty(beta, spec)), abs=1e-9)


# ---------------------------------------------------------------------------
# SCAD


def test_scad_penalty_examples():
    assert scad_penalty(0.2, ScadSpec(0.5, 3.7)) == pytest.approx(0.1)
    assert scad_penalty(10.0, ScadSpec(0.5, 3.7)) == pytest.approx(0.5875)
    assert scad_penalty(1.0, ScadSpec(0.5, 3.7)) == pytest.approx(-(1 - 2 * 3.7 * 0.5 + 0.25) / (2 * 2.7), rel=1e-14)
    assert scad_penalty(1.0, ScadSpec(0.5, 3.7)) == pytest.approx(0.4537037, abs=1e-7)
    assert scad_penalty(-0.2, ScadSpec(0.5)) == scad_penalty(0.2, ScadSpec(0.5))


@settings(max_examples=200, deadline=None)
@given(lam=st.floats(1e-3, 10), a=st.floats(2.01, 10))
def test_scad_continuity_at_branch_points(lam, a):
    spec = ScadSpec(lam, a)
    for t in (lam, a * lam):
        eps = 1e-12 * max(1.0, t)
        left = scad_penalty(t - eps, spec)
        right = scad_penalty(t + eps, spec)
        at = scad_penalty(t, spec)
        scale = max(1.0, lam * lam * a)
        assert abs(left - at) <= 1e-12 * scale + lam * eps * 2
        assert abs(right - at) <= 1e-12 * scale + lam * eps * 2
    # exact branch values at the joins
    assert scad_penalty(lam, spec) == pytest.approx(lam * lam, rel=1e-12)
    mid_at_alam = -((a * lam) ** 2 - 2 * a * lam * a * lam + lam * lam) / (2 * (a - 1))
    assert mid_at_alam == pytest.approx((a + 1) * lam * lam / 2, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(lam=st.floats(1e-3, 5), a=st.floats(2.01, 8))
def test_scad_deriv_nonnegative_nonincreasing(lam, a):
    t = np.linspace(1e-6, 3 * a * lam, 2000)
    d = scad_deriv(t, ScadSpec(lam, a))
    assert np.all(d >= 0)
    assert np.all(np.diff(d) <= 1e-15)


def test_univariate_scad_examples():
    s = ScadSpec(1.0, 3.7)
    assert univariate_scad(0.5, 1.0, s) == 0.0
    assert univariate_scad(10.0, 1.0, s) == 10.0
    assert univariate_scad(1.5, 1.0, s) == pytest.approx(0.5, abs=1e-12)
    assert univariate_scad(-1.5, 1.0, s) == pytest.approx(-0.5, abs=1e-12)
    # middle branch for unit weight
    z = 3.0
    assert univariate_scad(z, 1.0, s) == pytest.approx(((3.7 - 1) * z - 3.7) / 1.7, rel=1e-12)
    with pytest.raises(ValueError):
        univariate_scad(1.0, 0.0, s)


def _grid_argmin(z, w, lam, a):
    grid = np.arange(-200000, 200001) * 1e-4
    obj = 0.5 * w * (grid - z) ** 2 + scad_penalty(grid, ScadSpec(lam, a))
    best = obj.min()
    # refine every grid local minimum whose value is close to the best
    idx = np.flatnonzero((obj[1:-1] <= obj[:-2]) & (obj[1:-1] <= obj[2:])) + 1
    idx = idx[obj[idx] <= best + 1e-6]
    cands = []
    u = abs(z)
    for k in idx:
        g = grid[k]
        res = minimize_scalar(lambda t: 0.5 * w * (t - z) ** 2 + scad_penalty(t, ScadSpec(lam, a)),
                              bounds=(g - 2e-4, g + 2e-4), method="bounded", options={"xatol": 1e-12})
        cands.append((res.fun, abs(res.x), res.x))
        cands.append((0.5 * w * (g - z) ** 2 + scad_penalty(g, ScadSpec(lam, a)), abs(g), g))
    del u
    return min(cands)


def test_univariate_scad_against_grid_search_1000_cases():
    gen = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(1000):
        z = gen.uniform(-10, 10)
        w = math.exp(gen.uniform(math.log(0.05), math.log(5)))
        lam = gen.uniform(0.01, 3)
        a = gen.uniform(2.1, 6)
        got = univariate_scad(z, w, ScadSpec(lam, a))
        fun, _, x = _grid_argmin(z, w, lam, a)
        err = abs(got - x)
        if err > 1e-4:
            # distinct global minimizers only if objective values tie
            mine = 0.5 * w * (got - z) ** 2 + scad_penalty(got, ScadSpec(lam, a))
            assert mine <= fun + 1e-12, (z, w, lam, a, got, x)
        worst = max(worst, err)
    assert worst <= 1e-4


@settings(max_examples=300, deadline=None)
@given(z=st.floats(-20, 20), w=st.floats(0.01, 10), lam=st.floats(0.0, 5), a=st.floats(2.05, 8))
def test_scalar_fast_path_matches_vectorized(z, w, lam, a):
    from spatial_lda.estimation import _univariate_scad_scalar

    s = ScadSpec(lam, a)
    fast = _univariate_scad_scalar(z, w, lam, a)
    slow = univariate_scad(z, w, s)
    f1 = _scad_obj(abs(fast), abs(z), w, lam, a)
    f2 = _scad_obj(abs(slow), abs(z), w, lam, a)
    assert f1 == pytest.approx(f2, rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# step 1


def test_step1_zero_data_and_unpenalized():
    data = LabeledDataset(np.zeros((3, 4)), np.zeros((3, 4)))
    zt = transform_Z(data)
    assert np.array_equal(step1_beta(zt, ScadSpec(0.5)), np.zeros(4))
    data, _ = _tiny(4, 5, 3, 11)
    zt = transform_Z(data)
    b = step1_beta(zt, ScadSpec(0.0))
    # normal equations of (Z - X b)'(Z - X b) with X = x (x) I_p
    X = np.kron(zt.x[:, None], np.eye(3))
    ls, *_ = np.linalg.lstsq(X, zt.Z.ravel(), rcond=None)
    assert np.allclose(b, ls, atol=1e-12)
    assert np.allclose(b, lse_direction(zt), atol=1e-15)


def test_step1_matches_generic_objective():
    data, _ = _tiny(5, 4, 3, 12)
    zt = transform_Z(data)
    spec = ScadSpec(0.2)
    b = step1_beta(zt, spec)

    def R(beta):
        r = zt.Z - np.outer(zt.x, beta)
        return float((r * r).sum()) + zt.n * float(np.sum(scad_penalty(beta, spec)))

    for j in range(3):
        for eps in (1e-3, -1e-3, 0.05, -0.05):
            pert = b.copy()
            pert[j] += eps
            assert R(pert) >= R(b) - 1e-12


def test_lambda_max_zeroes_step1():
    data, _ = _tiny(6, 6, 5, 13)
    zt = transform_Z(data)
    lm = lambda_max(zt)
    assert np.all(step1_beta(zt, ScadSpec(lm * 1.0000001)) == 0)
    assert np.any(step1_beta(zt, ScadSpec(lm * 0.99)) != 0)
    g = default_lambda_grid(zt, 20)
    assert g.size == 20 and g[0] == pytest.approx(lm) and g[-1] == pytest.approx(0.01 * lm)


# ---------------------------------------------------------------------------
# step 3


@pytest.mark.parametrize("seed", range(3))
def test_step3_unpenalized_is_mean_difference(seed):
    data, dist = _tiny(3, 3, 4, seed + 70)
    zt = transform_Z(data)
    theta = CovParams(1.1, 0.3, 1.5)
    b = step3_beta_gls(zt, theta, dist, spec=ScadSpec(0.0))
    mu1, mu2, _ = class_means(data)
    assert np.allclose(b, mu1 - mu2, rtol=0, atol=1e-8)
    # brute-force: dense quadratic maximization of Q over beta on the literal (n-1)p system
    sig = build_cov(dist, theta).toarray()
    _, _, sdot = _dense_pieces(zt, sig)
    X = np.kron(zt.x[:, None], np.eye(4))
    Si = np.linalg.inv(sdot)
    dense = np.linalg.solve(X.T @ Si @ X, X.T @ Si @ zt.Z.ravel())
    assert np.allclose(b, dense, rtol=0, atol=1e-8)


def test_step3_curvature_matches_dense_hessian():
    data, dist = _tiny(3, 4, 3, 80)
    zt = transform_Z(data)
    theta = CovParams(0.9, 0.2, 1.0)
    sig = build_cov(dist, theta).toarray()
    _, _, sdot = _dense_pieces(zt, sig)
    X = np.kron(zt.x[:, None], np.eye(3))
    H = X.T @ np.linalg.inv(sdot) @ X
    assert np.allclose(H, (zt.n1 * zt.n2 / zt.n) * np.linalg.inv(sig), rtol=1e-10)
    sys = gls_system(zt, theta, dist)
    assert sys.curvature == pytest.approx(zt.n1 * zt.n2 / zt.n, rel=1e-14)


def test_step3_huge_lambda_gives_zero():
    data, dist = _tiny(4, 4, 4, 81)
    zt = transform_Z(data)
    lam = 10 * 3.7 * np.abs(lse_direction(zt)).max() + 10
    b = step3_beta_gls(zt, CovParams(1.0, 0.2, 1.0), dist, spec=ScadSpec(lam))
    assert np.array_equal(b, np.zeros(4))


def test_step3_is_coordinatewise_optimal():
    data, dist, _ = simulate(u=4, r=3.0, seed=9, signal=4)
    zt = transform_Z(data)
    theta = CovParams(1.0, 0.2, 3.0)
    spec = ScadSpec(0.15)
    b = step3_beta_gls(zt, theta, dist, spec=spec)

    def negQ(beta):
        return -penalized_Q(theta, beta, zt, dist, spec=spec)

    base = negQ(b)
    for j in range(b.size):
        for eps in (1e-4, -1e-4, 1e-2, -1e-2, 0.3, -0.3):
            pert = b.copy()
            pert[j] += eps
            assert negQ(pert) >= base - 1e-7


# ---------------------------------------------------------------------------
# theta estimation


def test_mle_rejects_fewer_than_three_sites():
    data, dist = _tiny(3, 3, 2, 1)
    with pytest.raises(ValueError):
        mle_theta(data, dist)


def test_mle_profiled_and_full_simplex_agree(small_scenario):
    data, dist, _ = small_scenario
    a = mle_theta(data, dist)
    b = mle_theta(data, dist, profile_variance=False)
    assert a.converged
    assert a.objective >= b.objective - 1e-6
    assert np.allclose(a.params.as_vector(), b.params.as_vector(), rtol=2e-3)


def test_mle_objective_is_the_loglik(small_scenario):
    data, dist, _ = small_scenario
    est = mle_theta(data, dist)
    mu1, mu2, _ = class_means(data)
    ll = loglik(est.params, mu1, mu2, data, dist)
    const = -0.5 * data.p * data.n * math.log(2 * math.pi)
    assert ll - const == pytest.approx(est.objective, rel=1e-10)
    # a local maximum: nearby parameters are not better
    for k in range(3):
        v = est.params.as_vector().copy()
        for f in (0.98, 1.02):
            w = v.copy()
            w[k] *= f
            assert loglik(CovParams(*w, 0.5), mu1, mu2, data, dist) <= ll + 1e-9


def test_step_theta_ascent_from_truth():
    data, dist, mu1 = simulate(u=5, r=4.0, seed=4)
    zt = transform_Z(data)
    truth = CovParams(1.0, 0.2, 4.0)
    beta = mu1
    est = step_theta(zt, beta, dist, init=truth)
    assert penalized_Q(est.params, beta, zt, dist) >= penalized_Q(truth, beta, zt, dist)


def test_mle_monte_carlo_recovery_p16():
    truth = np.array([1.0, 0.2, 3.0])
    est = []
    for seed in range(20):
        data, dist, _ = simulate(u=4, r=3.0, seed=1000 + seed, signal=4)
        est.append(mle_theta(data, dist).params.as_vector())
    est = np.array(est)
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    assert np.all(np.abs(est.mean(axis=0) - truth) <= 3 * se), (est.mean(axis=0), se)


def test_step_theta_monte_carlo_recovery_p16():
    truth = np.array([1.0, 0.2, 3.0])
    est = []
    for seed in range(20):
        data, dist, mu1 = simulate(u=4, r=3.0, seed=2000 + seed, signal=4)
        zt = transform_Z(data)
        est.append(step_theta(zt, mu1, dist).params.as_vector())
    est = np.array(est)
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    assert np.all(np.abs(est.mean(axis=0) - truth) <= 3 * se), (est.mean(axis=0), se)


# ---------------------------------------------------------------------------
# one-step fit


def test_fit_mean_identities(small_scenario):
    data, dist, _ = small_scenario
    fit = one_step_pmle(data, dist, ScadSpec(0.1))
    assert np.abs((fit.mu1_hat - fit.mu2_hat) - fit.delta_hat).max() <= 1e-12
    assert np.abs(fit.tau1 * fit.mu1_hat + fit.tau2 * fit.mu2_hat - fit.ybar).max() <= 1e-12
    assert np.array_equal(fit.support, np.flatnonzero(fit.delta_hat))
    assert set(fit.trace) == {"step1", "step2", "step3", "step4"}
    pre = preg_from_trace(fit)
    assert np.array_equal(pre.delta_hat, fit.trace["step1"]["beta"])
    assert pre.theta_hat == fit.trace["step2"]["theta"]
    mle = fit_mle(data, dist)
    mu1, mu2, _ = class_means(data)
    assert np.allclose(mle.mu1_hat, mu1, atol=1e-12) and np.allclose(mle.mu2_hat, mu2, atol=1e-12)


def test_zero_difference_gives_empty_support():
    empty = 0
    for seed in range(20):
        data, dist, _ = simulate(u=6, r=5.0, seed=3000 + seed, signal=0)
        fit = one_step_pmle(data, dist, ScadSpec(0.5))
        empty += fit.support.size == 0
    assert empty >= 18


def test_wide_taper_fit_matches_untapered():
    data, dist, _ = simulate(u=4, r=3.0, seed=5, signal=4)
    a = one_step_pmle(data, dist, ScadSpec(0.1))
    b = one_step_pmle(data, dist, ScadSpec(0.1), TaperSpec(1e6))
    for x, y in [(a.delta_hat, b.delta_hat), (a.mu1_hat, b.mu1_hat), (a.mu2_hat, b.mu2_hat)]:
        assert np.abs(x - y).max() <= 1e-6
    assert abs(a.theta_hat.sigma2 - b.theta_hat.sigma2) <= 1e-6
    assert abs(a.theta_hat.nugget - b.theta_hat.nugget) <= 1e-6
    # the likelihood is flat in the range, so the 1e-5 relative change in
    # Sigma moves r-hat by about 1e-5; it converges as the width grows
    gaps = []
    for w in (1e4, 1e6, 1e8):
        c = one_step_pmle(data, dist, ScadSpec(0.1), TaperSpec(w))
        gaps.append(abs(c.theta_hat.range - a.theta_hat.range))
    assert gaps[0] > gaps[2]
    assert gaps[2] <= 1e-5


def test_stage_errors_are_labelled():
    data, dist, _ = simulate(u=4, r=3.0, seed=5, signal=4)
    bad = LabeledDataset(data.class1[:, :2], data.class2[:, :2])
    d2 = pairwise_distances(SiteSet(2, [[0, 0], [1, 0]], ("a", "b")))
    with pytest.raises(EstimationError) as info:
        one_step_pmle(bad, d2, ScadSpec(0.1))
    assert info.value.stage == "step2"


# ---------------------------------------------------------------------------
# cross-validation


def test_stratified_folds():
    folds = stratified_folds(30, 30, 10, 0)
    assert len(folds) == 10
    assert sorted(np.concatenate([f[0] for f in folds]).tolist()) == list(range(30))
    assert all(len(f[0]) == 3 and len(f[1]) == 3 for f in folds)
    with pytest.raises(StratificationError):
        stratified_folds(5, 30, 10, 0)


def test_single_lambda_grid():
    data, dist, _ = simulate(u=4, r=3.0, seed=6, signal=4)
    lam, _ = select_lambda_cv(data, dist, [0.3], folds=5)
    assert lam == 0.3


def test_cv_prefers_signal_over_huge_lambda():
    data, dist, _ = simulate(u=4, r=3.0, seed=7, signal=4, n1=20, n2=20)
    lam, table = select_lambda_cv(data, dist, [0.0, 1e6], folds=5, rng=1)
    assert lam == 0.0
    assert table.pmle_error[1] == pytest.approx(0.5, abs=0.05)


def test_cv_ties_go_to_larger_lambda():
    data, dist, _ = simulate(u=4, r=3.0, seed=8, signal=4)
    table = cv_table(data, dist, [1e6, 2e6], folds=5)
    assert table.best("pmle") == 2e6


def test_default_init():
    data, dist, _ = simulate(u=4, r=3.0, seed=8, signal=4)
    init = default_init(data, dist)
    assert init.nugget == 0.2
    assert init.range == pytest.approx(np.median(dist.offdiag()))


@pytest.mark.slow
def test_estimates_shrink_as_n_grows():
    # medians of ||theta_hat - theta0|| and ||delta_hat - delta0|| over 20
    # replications must shrink by at least 25%; n grows 8-fold so that the
    # expected n^(-1/2) shrinkage (to about 0.35) clears the Monte-Carlo noise
    truth = CovParams(1.0, 0.2, 5.0)
    errs = {}
    for n in (100, 800):
        th, de = [], []
        for seed in range(20):
            data, dist, mu1 = simulate(u=6, r=5.0, n1=n // 2, n2=n // 2, seed=5000 + 7 * seed + n)
            fit = one_step_pmle(data, dist, ScadSpec(0.1))
            th.append(np.linalg.norm(fit.theta_hat.as_vector() - truth.as_vector()))
            de.append(np.linalg.norm(fit.delta_hat - mu1))
        errs[n] = (np.median(th), np.median(de))
    assert errs[800][0] <= 0.75 * errs[100][0], errs
    assert errs[800][1] <= 0.75 * errs[100][1], errs
