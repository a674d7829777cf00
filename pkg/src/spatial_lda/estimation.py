"""Maximum likelihood and one-step penalized maximum likelihood estimation.

Sign convention: ``delta = mu1 - mu2`` everywhere. The centered design codes
are ``+tau2`` for class-1 rows and ``-tau1`` for class-2 rows, so that
``mu1 = ybar + tau2 * delta`` and ``mu2 = ybar - tau1 * delta``.

Covariance parameters are fitted by Nelder-Mead. By default the variance is
profiled out in closed form (the likelihood is maximized over sigma2 exactly
for every (c, r)), which leaves a 2-d simplex over (logit c, log r); pass
``profile_variance=False`` to search all of (log sigma2, logit c, log r).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .covariance import NO_TAPER, CovParams, TaperSpec, build_cov, correlation_matrix
from .gausscore import FactorizationError, RngStream, cholesky, trace_quad
from .geometry import DistanceMatrix, SiteSet

LOG_2PI = math.log(2.0 * math.pi)


class EstimationError(RuntimeError):
    """A fitting stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class StratificationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class LabeledDataset:
    class1: np.ndarray
    class2: np.ndarray
    sites: SiteSet | None = None

    def __post_init__(self):
        y1 = np.array(self.class1, dtype=float, ndmin=2)
        y2 = np.array(self.class2, dtype=float, ndmin=2)
        if y1.shape[1] != y2.shape[1]:
            raise ValueError(f"classes have different feature counts {y1.shape[1]} and {y2.shape[1]}")
        if self.sites is not None and self.sites.p != y1.shape[1]:
            raise ValueError(f"{y1.shape[1]} features but {self.sites.p} sites")
        if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y2))):
            raise ValueError("dataset contains non-finite values")
        y1.setflags(write=False)
        y2.setflags(write=False)
        object.__setattr__(self, "class1", y1)
        object.__setattr__(self, "class2", y2)

    @property
    def n1(self) -> int:
        return self.class1.shape[0]

    @property
    def n2(self) -> int:
        return self.class2.shape[0]

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    @property
    def p(self) -> int:
        return self.class1.shape[1]

    @property
    def tau1(self) -> float:
        return self.n1 / self.n

    @property
    def tau2(self) -> float:
        return self.n2 / self.n

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All rows (class 1 first) and their labels in {1, 2}."""
        x = np.vstack([self.class1, self.class2])
        y = np.r_[np.ones(self.n1, dtype=int), np.full(self.n2, 2, dtype=int)]
        return x, y

    def require_training(self):
        if self.n1 < 2 or self.n2 < 2:
            raise ValueError(f"need at least 2 observations per class, got n1={self.n1}, n2={self.n2}")

    def subset(self, idx1, idx2) -> "LabeledDataset":
        return LabeledDataset(self.class1[idx1], self.class2[idx2], self.sites)


def class_means(data: LabeledDataset):
    """(mu1, mu2, ybar): per-class sample means and the pooled grand mean."""
    mu1 = data.class1.mean(axis=0)
    mu2 = data.class2.mean(axis=0)
    ybar = (data.n1 * mu1 + data.n2 * mu2) / data.n
    return mu1, mu2, ybar


def pooled_variances(data: LabeledDataset) -> np.ndarray:
    """Per-feature pooled within-class variance (divisor n - 2)."""
    mu1, mu2, _ = class_means(data)
    ss = ((data.class1 - mu1) ** 2).sum(axis=0) + ((data.class2 - mu2) ** 2).sum(axis=0)
    return ss / (data.n - 2)


def default_init(data: LabeledDataset, dist: DistanceMatrix, nu: float = 0.5) -> CovParams:
    """sigma2 from the pooled feature variance, c = 0.2, r = median distance."""
    data.require_training()
    s2 = float(np.mean(pooled_variances(data)))
    r0 = float(np.median(dist.offdiag())) if dist.p > 1 else 1.0
    return CovParams(max(s2, 1e-8), 0.2, r0, nu)


# ---------------------------------------------------------------------------
# Gaussian likelihoods in theta


def _residuals(data: LabeledDataset, mu1, mu2) -> np.ndarray:
    return np.vstack([data.class1 - mu1, data.class2 - mu2])


def loglik(theta: CovParams, mu1, mu2, data: LabeledDataset, dist: DistanceMatrix, taper: TaperSpec = NO_TAPER) -> float:
    """Log-likelihood of both classes for means (mu1, mu2) and covariance Sigma(theta).

    Raises FactorizationError when Sigma(theta) is not positive definite.
    """
    f = cholesky(build_cov(dist, theta, taper))
    n, p = data.n, data.p
    quad = trace_quad(f, _residuals(data, mu1, mu2))
    return -0.5 * p * n * LOG_2PI - 0.5 * n * f.logdet - 0.5 * quad


@dataclass(frozen=True)
class ThetaEstimate:
    params: CovParams
    objective: float
    converged: bool
    nfev: int


class _GaussianObjective:
    """-(m/2) log|Sigma| - 1/2 sum_i r_i' Sigma^{-1} r_i for fixed residual rows.

    Additive constants are dropped; ``value`` is what the optimizers maximize.
    """

    def __init__(self, rows: np.ndarray, m: float, dist: DistanceMatrix, taper: TaperSpec, nu: float):
        self.rows = rows
        self.m = m
        self.dist = dist
        self.taper = taper
        self.nu = nu

    def value(self, theta: CovParams) -> float:
        try:
            f = cholesky(theta.sigma2 * correlation_matrix(self.dist, theta, self.taper))
        except FactorizationError:
            return -math.inf
        return -0.5 * self.m * f.logdet - 0.5 * trace_quad(f, self.rows)

    def profile(self, nugget: float, rng: float) -> tuple[float, float]:
        """Maximize over sigma2 in closed form; returns (value, sigma2_hat)."""
        probe = CovParams(1.0, nugget, rng, self.nu)
        try:
            f = cholesky(correlation_matrix(self.dist, probe, self.taper))
        except FactorizationError:
            return -math.inf, math.nan
        p = self.dist.p
        t = trace_quad(f, self.rows)
        s2 = t / (self.m * p)
        if not s2 > 0:
            return -math.inf, math.nan
        return -0.5 * self.m * (p * math.log(s2) + f.logdet) - 0.5 * self.m * p, s2


def _log_range_box(dist: DistanceMatrix) -> tuple[float, float]:
    """Search box for log r: 1e-3 x site spacing up to 1e3 x the largest distance.

    Beyond it the correlation matrix is numerically the identity or the
    all-ones matrix, and tapered likelihoods can drift there without bound.
    """
    if dist.p < 2:
        return -50.0, 50.0
    return math.log(1e-3 * dist.nearest_neighbor_spacing()), math.log(1e3 * float(dist.values.max()))


def _maximize(obj: _GaussianObjective, init: CovParams, profile_variance: bool = True,
              max_iter: int = 2000, tol: float = 1e-8) -> ThetaEstimate:
    nu = init.nu
    x0 = init.to_free()
    lo, hi = _log_range_box(obj.dist)
    x0[2] = min(max(x0[2], lo), hi)

    if profile_variance:
        def neg(x):
            c = 1.0 / (1.0 + math.exp(-x[0])) if x[0] > -700 else 0.0
            if c >= 1.0 or not lo <= x[1] <= hi:
                return math.inf
            v, _ = obj.profile(c, math.exp(x[1]))
            return -v
        start = x0[1:]
    else:
        def neg(x):
            if np.any(np.abs(x) > 700) or not lo <= x[2] <= hi:
                return math.inf
            try:
                theta = CovParams.from_free(x, nu)
            except ValueError:
                return math.inf
            return -obj.value(theta)
        start = x0

    if not np.isfinite(neg(start)):
        raise FactorizationError(-1, "initial covariance parameters give a non-PD matrix")
    simplex = np.vstack([start] + [start + 0.25 * e for e in np.eye(start.size)])
    res = minimize(
        neg, start, method="Nelder-Mead",
        options={"maxiter": max_iter, "maxfev": 4 * max_iter, "xatol": 1e-6, "fatol": tol,
                 "initial_simplex": simplex},
    )
    x = res.x
    if profile_variance:
        c = 1.0 / (1.0 + math.exp(-x[0])) if x[0] > -700 else 0.0
        r = math.exp(x[1])
        val, s2 = obj.profile(c, r)
        params = CovParams(s2, min(c, 1 - 1e-15), r, nu)
    else:
        params = CovParams.from_free(x, nu)
        val = obj.value(params)
    return ThetaEstimate(params, float(val), bool(res.success), int(res.nfev))


def mle_theta(data: LabeledDataset, dist: DistanceMatrix, nu: float = 0.5, taper: TaperSpec = NO_TAPER,
              init: CovParams | None = None, profile_variance: bool = True, max_iter: int = 2000) -> ThetaEstimate:
    """Profile MLE of theta with the means fixed at the class sample means."""
    data.require_training()
    if data.p < 3:
        raise ValueError(f"nugget and range are not identifiable with p={data.p} < 3 sites")
    if init is None:
        init = default_init(data, dist, nu)
    elif init.nu != nu:
        init = CovParams(init.sigma2, init.nugget, init.range, nu)
    mu1, mu2, _ = class_means(data)
    obj = _GaussianObjective(_residuals(data, mu1, mu2), data.n, dist, taper, nu)
    return _maximize(obj, init, profile_variance, max_iter)


# ---------------------------------------------------------------------------
# centered representation and SCAD machinery


@dataclass(frozen=True)
class ZTransform:
    Z: np.ndarray
    x: np.ndarray
    n1: int
    n2: int
    ybar: np.ndarray

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    @property
    def tau1(self) -> float:
        return self.n1 / self.n

    @property
    def tau2(self) -> float:
        return self.n2 / self.n

    @property
    def sxx(self) -> float:
        """sum_i x_i^2 = n1 tau2^2 + (n2 - 1) tau1^2."""
        return float(self.x @ self.x)


def transform_Z(data: LabeledDataset) -> ZTransform:
    """Rows Y_1i - ybar, then Y_2i - ybar with the last class-2 row dropped."""
    data.require_training()
    _, _, ybar = class_means(data)
    Z = np.vstack([data.class1 - ybar, data.class2[:-1] - ybar])
    x = np.r_[np.full(data.n1, data.tau2), np.full(data.n2 - 1, -data.tau1)]
    return ZTransform(Z, x, data.n1, data.n2, ybar)


@dataclass(frozen=True)
class ScadSpec:
    lam: float
    a: float = 3.7

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.a > 2:
            raise ValueError(f"SCAD a must be > 2, got {self.a}")


def scad_penalty(beta, spec: ScadSpec):
    t = np.abs(np.asarray(beta, dtype=float))
    lam, a = spec.lam, spec.a
    mid = -(t * t - 2 * a * lam * t + lam * lam) / (2 * (a - 1))
    out = np.where(t <= lam, lam * t, np.where(t <= a * lam, mid, (a + 1) * lam * lam / 2))
    return float(out) if out.ndim == 0 else out


def scad_deriv(beta, spec: ScadSpec):
    """p'_lambda(t) at t = |beta|."""
    t = np.abs(np.asarray(beta, dtype=float))
    lam, a = spec.lam, spec.a
    out = np.where(t <= lam, lam, np.where(t <= a * lam, (a * lam - t) / (a - 1), 0.0))
    return float(out) if out.ndim == 0 else out


def univariate_scad(z, weight, spec: ScadSpec):
    """Global minimizer of 1/2 * weight * (b - z)^2 + p_lambda(|b|).

    Candidates are the stationary points of each SCAD branch clipped to the
    branch, plus the branch endpoints; the cheapest one wins (ties go to the
    smaller magnitude). This stays exact when weight < 1/(a-1) and the
    objective is not convex.
    """
    z = np.asarray(z, dtype=float)
    w = np.broadcast_to(np.asarray(weight, dtype=float), z.shape)
    if np.any(w <= 0):
        raise ValueError("weight must be positive")
    lam, a = spec.lam, spec.a
    u = np.abs(z)
    if lam == 0:
        out = z.copy()
        return float(out) if out.ndim == 0 else out
    kink = 1.0 / (a - 1.0)
    t1 = np.clip(u - lam / w, 0.0, lam)
    denom = w - kink
    with np.errstate(divide="ignore", invalid="ignore"):
        t2 = np.where(denom != 0, (w * u - a * lam * kink) / denom, lam)
    t2 = np.clip(np.nan_to_num(t2, nan=lam), lam, a * lam)
    t3 = np.maximum(u, a * lam)
    cands = np.stack([np.zeros_like(u), t1, np.full_like(u, lam), t2, np.full_like(u, a * lam), t3])
    obj = 0.5 * w * (cands - u) ** 2 + scad_penalty(cands, spec)
    best = obj.min(axis=0)
    # smallest magnitude among (near-)ties
    tol = 1e-14 * np.maximum(1.0, np.abs(best))
    masked = np.where(obj <= best + tol, cands, np.inf)
    t = masked.min(axis=0)
    out = np.sign(z) * t
    return float(out) if out.ndim == 0 else out


def _scad_obj(t, u, w, lam, a):
    if t <= lam:
        pen = lam * t
    elif t <= a * lam:
        pen = -(t * t - 2 * a * lam * t + lam * lam) / (2 * (a - 1))
    else:
        pen = (a + 1) * lam * lam / 2
    return 0.5 * w * (t - u) ** 2 + pen


def _univariate_scad_scalar(z: float, w: float, lam: float, a: float) -> float:
    """Scalar fast path of univariate_scad used inside coordinate descent.

    Same candidates as the vectorized solver; each candidate's branch is
    known, so its penalty is written out directly.
    """
    if lam == 0.0:
        return z
    u = abs(z)
    if u <= lam and u * w <= lam:
        # objective is nondecreasing on [0, inf): zero is the minimizer
        return 0.0
    alam = a * lam
    flat = (a + 1.0) * lam * lam / 2.0
    t1 = min(max(u - lam / w, 0.0), lam)
    denom = w - 1.0 / (a - 1.0)
    t2 = (w * u - alam / (a - 1.0)) / denom if denom != 0 else lam
    t2 = min(max(t2, lam), alam)
    t3 = max(u, alam)
    hw = 0.5 * w
    best_t, best = 0.0, hw * u * u
    for t, pen in ((t1, lam * t1), (lam, lam * lam),
                   (t2, -(t2 * t2 - 2.0 * alam * t2 + lam * lam) / (2.0 * (a - 1.0))),
                   (alam, flat), (t3, flat)):
        v = hw * (t - u) ** 2 + pen
        if v < best - 1e-14 * max(1.0, abs(best)):
            best_t, best = t, v
    return best_t if z >= 0 else -best_t


def lse_direction(zt: ZTransform) -> np.ndarray:
    """m_j = sum_i x_i Z_ij / sum_i x_i^2 (unpenalized step-1 solution)."""
    return zt.x @ zt.Z / zt.sxx


def step1_weight(zt: ZTransform) -> float:
    """Curvature of R(beta)/n per coordinate, written as 1/2 * w * (b - m)^2."""
    return 2.0 * zt.sxx / zt.n


def step1_beta(zt: ZTransform, spec: ScadSpec) -> np.ndarray:
    """Minimize (Z - X b)'(Z - X b) + n sum_j p_lambda(|b_j|).

    The design is a scalar per row, so the problem separates by coordinate.
    """
    return np.atleast_1d(univariate_scad(lse_direction(zt), step1_weight(zt), spec))


def lambda_max(zt: ZTransform) -> float:
    """Smallest lambda for which step 1 returns all zeros (convex case)."""
    return float(np.max(np.abs(lse_direction(zt))) * step1_weight(zt))


def default_lambda_grid(zt: ZTransform, num: int = 20, ratio: float = 0.01) -> np.ndarray:
    lmax = lambda_max(zt)
    if lmax <= 0:
        return np.zeros(1)
    return np.geomspace(lmax, ratio * lmax, num)


def _q_rows(zt: ZTransform, beta) -> np.ndarray:
    """Rows r_1..r_{n-1} plus s = sum_i r_i, with r_i = Z_i - x_i beta."""
    r = zt.Z - np.outer(zt.x, beta)
    return np.vstack([r, r.sum(axis=0)])


def q_constant(n: int, p: int) -> float:
    """Normalizing constant of the (n-1)p-dimensional Gaussian density of Z."""
    return -0.5 * (n - 1) * p * LOG_2PI + 0.5 * p * math.log(n)


def penalized_Q(theta: CovParams, beta, zt: ZTransform, dist: DistanceMatrix, taper: TaperSpec = NO_TAPER,
                spec: ScadSpec | None = None) -> float:
    f = cholesky(build_cov(dist, theta, taper))
    n, p = zt.n, zt.p
    quad = trace_quad(f, _q_rows(zt, np.asarray(beta, dtype=float)))
    pen = 0.0 if spec is None else n * float(np.sum(scad_penalty(beta, spec)))
    return q_constant(n, p) - 0.5 * (n - 1) * f.logdet - 0.5 * quad - pen


def step_theta(zt: ZTransform, beta, dist: DistanceMatrix, taper: TaperSpec = NO_TAPER,
               init: CovParams | None = None, nu: float = 0.5, profile_variance: bool = True,
               max_iter: int = 2000) -> ThetaEstimate:
    """Maximize penalized_Q over theta with beta fixed (the penalty is constant)."""
    if zt.p < 3:
        raise ValueError(f"nugget and range are not identifiable with p={zt.p} < 3 sites")
    rows = _q_rows(zt, np.asarray(beta, dtype=float))
    if init is None:
        s2 = float(np.mean(rows[:-1] ** 2)) * zt.n / (zt.n - 1)
        r0 = float(np.median(dist.offdiag()))
        init = CovParams(max(s2, 1e-8), 0.2, r0, nu)
    obj = _GaussianObjective(rows, zt.n - 1, dist, taper, init.nu)
    return _maximize(obj, init, profile_variance, max_iter)


@dataclass(frozen=True)
class GlsSystem:
    """The beta-dependent part of -Q/n as 1/2 (b - d)' A (b - d) / n + penalty.

    ``A = (n1 n2 / n) Sigma^{-1}`` and ``d`` solves A d = Sigma^{-1} v with
    v = sum_i x_i Z_i + (sum_i x_i) sum_i Z_i.
    """

    precision: np.ndarray
    curvature: float
    target: np.ndarray


def gls_system(zt: ZTransform, theta: CovParams, dist: DistanceMatrix, taper: TaperSpec = NO_TAPER) -> GlsSystem:
    f = cholesky(build_cov(dist, theta, taper))
    prec = f.inverse()
    prec = 0.5 * (prec + prec.T)
    sx = float(zt.x.sum())
    v = zt.x @ zt.Z + sx * zt.Z.sum(axis=0)
    curv = zt.sxx + sx * sx
    return GlsSystem(prec, curv, v / curv)


def _gls_objective(sys: GlsSystem, n: int, spec: ScadSpec, beta) -> float:
    r = beta - sys.target
    return 0.5 * sys.curvature / n * float(r @ sys.precision @ r) + float(np.sum(scad_penalty(beta, spec)))


def _branch_newton(sys: GlsSystem, n: int, spec: ScadSpec, beta):
    """Exact minimizer with every coordinate held on its current SCAD branch.

    On a fixed branch pattern (zero, linear, concave middle, flat) the
    objective is quadratic in the nonzero coordinates, so the coordinate
    descent fixed point solves one linear system. When that solution lies
    outside the pattern the step toward it is cut at the first branch
    boundary it meets. Returns None when no step is possible.
    """
    act = np.flatnonzero(beta)
    if act.size == 0:
        return None
    lam, a = spec.lam, spec.a
    c = sys.curvature / n
    t = np.abs(beta[act])
    sgn = np.sign(beta[act])
    lin = t <= lam
    mid = (t > lam) & (t <= a * lam)
    H = c * sys.precision[np.ix_(act, act)] - np.diag(mid / (a - 1.0))
    rhs = c * (sys.precision[act] @ sys.target) - lam * sgn * lin - a * lam * sgn * mid / (a - 1.0)
    try:
        b = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError:
        return None
    # signed interval of each coordinate's branch; the step may end on its edge
    lo_abs = np.where(lin, 0.0, np.where(mid, lam, a * lam))
    hi_abs = np.where(lin, lam, np.where(mid, a * lam, np.inf))
    cur = beta[act]
    lo = np.where(sgn > 0, lo_abs, -hi_abs)
    hi = np.where(sgn > 0, hi_abs, -lo_abs)
    move = b - cur
    with np.errstate(divide="ignore", invalid="ignore"):
        limit = np.where(move > 0, (hi - cur) / move, np.where(move < 0, (lo - cur) / move, np.inf))
    alpha = min(1.0, float(limit.min()))
    if not alpha > 0:
        return None
    step = cur + alpha * move
    if alpha < 1.0:
        edge = int(np.argmin(limit))
        step[edge] = hi[edge] if move[edge] > 0 else lo[edge]
    out = np.zeros_like(beta)
    out[act] = step
    return out


def _scad_coordinate_descent(sys: GlsSystem, n: int, spec: ScadSpec, start, tol: float = 1e-8,
                             max_sweeps: int = 500):
    """Cyclic coordinate descent, accelerated by branch-wise Newton steps.

    After each sweep that is not yet converged, the exact minimizer on the
    current branch pattern is tried and kept when it lowers the objective.
    Convergence is always judged by a sweep moving no coordinate by more
    than ``tol``.
    """
    prec = sys.precision
    diag = np.diag(prec).copy()
    w = sys.curvature * diag / n
    beta = np.array(start, dtype=float)
    # grad = Sigma^{-1} (beta - d)
    grad = prec @ (beta - sys.target)
    p = beta.size
    lam, a = spec.lam, spec.a
    for sweep in range(1, max_sweeps + 1):
        biggest = 0.0
        for j in range(p):
            bj = beta[j]
            z = bj - grad[j] / diag[j]
            new = _univariate_scad_scalar(float(z), float(w[j]), lam, a)
            step = new - bj
            if step != 0.0:
                beta[j] = new
                grad += prec[j] * step  # symmetric: row j is column j, contiguous
                if abs(step) > biggest:
                    biggest = abs(step)
        if biggest < tol:
            return beta, sweep, True
        cand = _branch_newton(sys, n, spec, beta)
        if cand is not None and _gls_objective(sys, n, spec, cand) < _gls_objective(sys, n, spec, beta):
            beta = cand
            grad = prec @ (beta - sys.target)
    return beta, max_sweeps, False


def step3_beta_gls(zt: ZTransform, theta: CovParams, dist: DistanceMatrix, taper: TaperSpec = NO_TAPER,
                   spec: ScadSpec = ScadSpec(0.0), start=None) -> np.ndarray:
    """Maximize penalized_Q over beta with theta fixed, by cyclic coordinate descent."""
    beta, _, _ = _step3(zt, theta, dist, taper, spec, start)
    return beta


def _step3(zt, theta, dist, taper, spec, start=None):
    sys = gls_system(zt, theta, dist, taper)
    if spec.lam == 0:
        return sys.target.copy(), 0, True
    if start is None:
        start = step1_beta(zt, spec)
    return _scad_coordinate_descent(sys, zt.n, spec, start)


# ---------------------------------------------------------------------------
# fits


@dataclass(frozen=True)
class FitResult:
    method: str
    delta_hat: np.ndarray
    theta_hat: CovParams | None
    ybar: np.ndarray
    tau1: float
    tau2: float
    lambda_used: float | None = None
    taper: TaperSpec = NO_TAPER
    scad_a: float = 3.7
    trace: dict = field(default_factory=dict)

    @property
    def mu1_hat(self) -> np.ndarray:
        return self.ybar + self.tau2 * self.delta_hat

    @property
    def mu2_hat(self) -> np.ndarray:
        return self.ybar - self.tau1 * self.delta_hat

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.delta_hat)

    @property
    def converged(self) -> bool:
        return all(st.get("converged", True) for st in self.trace.values())


def _stage(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except EstimationError:
        raise
    except (FactorizationError, ValueError, np.linalg.LinAlgError) as exc:
        raise EstimationError(stage, str(exc)) from exc


def fit_mle(data: LabeledDataset, dist: DistanceMatrix, nu: float = 0.5, taper: TaperSpec = NO_TAPER,
            init: CovParams | None = None) -> FitResult:
    mu1, mu2, ybar = class_means(data)
    est = _stage("mle", mle_theta, data, dist, nu, taper, init)
    if not est.converged:
        warnings.warn("theta optimization did not converge", RuntimeWarning, stacklevel=2)
    trace = {"mle": {"theta": est.params, "objective": est.objective, "converged": est.converged, "nfev": est.nfev}}
    return FitResult("mle", mu1 - mu2, est.params, ybar, data.tau1, data.tau2, None, taper, trace=trace)


def one_step_pmle(data: LabeledDataset, dist: DistanceMatrix, spec: ScadSpec, taper: TaperSpec = NO_TAPER,
                  init: CovParams | None = None, nu: float | None = None, zt: ZTransform | None = None) -> FitResult:
    """Steps 1-4 once each: beta0 (penalized LS), theta0, beta1 (penalized GLS), theta1.

    The trace keeps every stage, so the PREG classifier (beta0, theta0) can
    be recovered with :func:`preg_from_trace`.
    """
    if zt is None:
        zt = _stage("transform", transform_Z, data)
    if nu is None:
        nu = init.nu if init is not None else 0.5
    if init is None:
        init = _stage("init", default_init, data, dist, nu)
    elif init.nu != nu:
        init = CovParams(init.sigma2, init.nugget, init.range, nu)
    trace = {}
    beta0 = _stage("step1", step1_beta, zt, spec)
    trace["step1"] = {"beta": beta0, "nonzero": int(np.count_nonzero(beta0))}
    th0 = _stage("step2", step_theta, zt, beta0, dist, taper, init)
    trace["step2"] = {"theta": th0.params, "objective": th0.objective, "converged": th0.converged, "nfev": th0.nfev}
    beta1, sweeps, ok = _stage("step3", _step3, zt, th0.params, dist, taper, spec, beta0)
    trace["step3"] = {"beta": beta1, "nonzero": int(np.count_nonzero(beta1)), "sweeps": sweeps, "converged": ok}
    th1 = _stage("step4", step_theta, zt, beta1, dist, taper, th0.params)
    trace["step4"] = {"theta": th1.params, "objective": th1.objective, "converged": th1.converged, "nfev": th1.nfev}
    return FitResult("pmle", beta1, th1.params, zt.ybar, zt.tau1, zt.tau2, spec.lam, taper, spec.a, trace)


def preg_from_trace(fit: FitResult) -> FitResult:
    """The classifier built from (beta0, theta0) of a one-step fit."""
    st1, st2 = fit.trace["step1"], fit.trace["step2"]
    trace = {"step1": st1, "step2": st2}
    return FitResult("preg", st1["beta"], st2["theta"], fit.ybar, fit.tau1, fit.tau2,
                     fit.lambda_used, fit.taper, fit.scad_a, trace)


# ---------------------------------------------------------------------------
# lambda selection


def stratified_folds(n1: int, n2: int, folds: int, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-fold held-out indices (class-1 rows, class-2 rows)."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if min(n1, n2) < folds:
        raise StratificationError(
            f"cannot stratify n1={n1}, n2={n2} into {folds} folds: some fold would hold a single class")
    if n1 - math.ceil(n1 / folds) < 2 or n2 - math.ceil(n2 / folds) < 2:
        raise StratificationError("training folds would hold fewer than 2 rows of a class")
    gen = rng.generator() if isinstance(rng, RngStream) else np.random.default_rng(rng)
    p1 = gen.permutation(n1)
    p2 = gen.permutation(n2)
    return [(np.sort(p1[k::folds]), np.sort(p2[k::folds])) for k in range(folds)]


def _complement(n: int, idx: np.ndarray) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    mask[idx] = False
    return np.flatnonzero(mask)


@dataclass(frozen=True)
class CVTable:
    """Held-out error per lambda (rows follow ``grid``) for PMLE and PREG."""

    grid: np.ndarray
    pmle_error: np.ndarray
    preg_error: np.ndarray
    fold_errors: np.ndarray  # (folds, len(grid), 2)

    def best(self, method: str = "pmle") -> float:
        err = self.pmle_error if method == "pmle" else self.preg_error
        lo = err.min()
        # ties go to the larger lambda
        cands = self.grid[np.isclose(err, lo, rtol=0, atol=1e-12)]
        return float(cands.max())

    def rows(self):
        for lam, e1, e2 in zip(self.grid, self.pmle_error, self.preg_error):
            yield {"lambda": float(lam), "pmle_error": float(e1), "preg_error": float(e2)}


def cv_table(data: LabeledDataset, dist: DistanceMatrix, grid, folds: int = 10, rng=0,
             taper: TaperSpec = NO_TAPER, nu: float = 0.5, a: float = 3.7,
             classify_taper: TaperSpec = NO_TAPER) -> CVTable:
    from .classify import build_model, empirical_error

    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("lambda grid is empty")
    order = np.argsort(-grid, kind="stable")
    parts = stratified_folds(data.n1, data.n2, folds, rng)
    errs = np.full((folds, grid.size, 2), np.nan)
    for k, (h1, h2) in enumerate(parts):
        train = data.subset(_complement(data.n1, h1), _complement(data.n2, h2))
        test = data.subset(h1, h2)
        zt = transform_Z(train)
        init = default_init(train, dist, nu)
        for g in order:
            try:
                fit = one_step_pmle(train, dist, ScadSpec(grid[g], a), taper, init, nu, zt=zt)
            except EstimationError:
                errs[k, g, :] = 1.0
                continue
            # warm start the next (smaller) lambda
            init = fit.trace["step2"]["theta"]
            errs[k, g, 0] = empirical_error(build_model(fit, dist, classify_taper), test)
            errs[k, g, 1] = empirical_error(build_model(preg_from_trace(fit), dist, classify_taper), test)
    mean = errs.mean(axis=0)
    return CVTable(grid, mean[:, 0], mean[:, 1], errs)


def select_lambda_cv(data: LabeledDataset, dist: DistanceMatrix, grid=None, folds: int = 10, rng=0,
                     method: str = "pmle", **kwargs) -> tuple[float, CVTable]:
    """lambda minimizing the stratified k-fold misclassification rate."""
    if grid is None:
        grid = default_lambda_grid(transform_Z(data))
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 1:
        return float(grid[0]), CVTable(grid, np.zeros(1), np.zeros(1), np.zeros((0, 1, 2)))
    table = cv_table(data, dist, grid, folds, rng, **kwargs)
    return table.best(method), table


def auto_taper(dist: DistanceMatrix, dim: int, threshold: int = 400) -> TaperSpec:
    """No taper up to ``threshold`` sites, else w = p^(1/(2d)) * site spacing."""
    if dist.p <= threshold:
        return NO_TAPER
    return forced_taper(dist, dim)


def forced_taper(dist: DistanceMatrix, dim: int) -> TaperSpec:
    return TaperSpec(dist.p ** (1.0 / (2 * dim)) * dist.nearest_neighbor_spacing())
