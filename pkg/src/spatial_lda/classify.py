"""Linear discriminant rules, baselines and error rates.

Every rule scores ``delta(x) = (x - (mu1 + mu2)/2)' W`` with a fixed weight
vector W and assigns class 1 iff the score is strictly positive. For the
spatial methods W = Sigma~^{-1} delta_hat with Sigma~ the (tapered) fitted
covariance; for the independence rules W_j = delta_j / var_j on the retained
features and 0 elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .covariance import NO_TAPER, CovMatrix, CovParams, TaperSpec, build_cov
from .estimation import FitResult, LabeledDataset, class_means, pooled_variances, stratified_folds, _complement
from .gausscore import SpdFactor, cholesky, solve
from .geometry import DistanceMatrix

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class DiscriminantModel:
    method: str
    mu1: np.ndarray
    mu2: np.ndarray
    subset: np.ndarray
    factor: SpdFactor | None = None
    variances: np.ndarray | None = None
    scoring: str = "full"
    theta: CovParams | None = None
    taper: TaperSpec = NO_TAPER
    degenerate: bool = False
    flags: tuple = ()

    def __post_init__(self):
        if (self.factor is None) == (self.variances is None):
            raise ValueError("exactly one of factor or variances must be given")
        if len(self.subset) == 0:
            raise ValueError("feature subset is empty")
        if self.scoring not in ("full", "subset"):
            raise ValueError(f"unknown scoring mode {self.scoring!r}")
        object.__setattr__(self, "subset", np.asarray(self.subset, dtype=int))
        object.__setattr__(self, "_w", self._weights())

    @property
    def p(self) -> int:
        return self.mu1.size

    @property
    def delta(self) -> np.ndarray:
        return self.mu1 - self.mu2

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.mu1 + self.mu2)

    @property
    def weights(self) -> np.ndarray:
        return self._w

    def _weights(self) -> np.ndarray:
        d = self.delta
        w = np.zeros(self.p)
        s = self.subset
        if self.variances is not None:
            w[s] = d[s] / self.variances[s]
        elif self.scoring == "full":
            dz = np.zeros(self.p)
            dz[s] = d[s]
            w = solve(self.factor, dz)
        else:
            sub = self.factor.reconstruct()[np.ix_(s, s)]
            w[s] = solve(cholesky(sub), d[s])
        return w


def discriminant_score(x, model: DiscriminantModel):
    """Score of one p-vector, or of every row of an (m, p) array."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.p:
        raise ValueError(f"dimension mismatch: model has p={model.p}, input has {x.shape[-1]}")
    out = (x - model.midpoint) @ model.weights
    return float(out) if out.ndim == 0 else out


def classify(x, model: DiscriminantModel):
    """Label 1 iff the score is > 0, else 2 (ties go to class 2)."""
    s = discriminant_score(x, model)
    out = np.where(np.asarray(s) > 0, 1, 2)
    return int(out) if out.ndim == 0 else out


def true_model(mu1, mu2, sigma: CovMatrix) -> DiscriminantModel:
    mu1 = np.asarray(mu1, dtype=float)
    return DiscriminantModel("true", mu1, np.asarray(mu2, dtype=float), np.arange(mu1.size),
                             factor=cholesky(sigma), theta=sigma.params, taper=sigma.taper)


def build_model(fit: FitResult, dist: DistanceMatrix, taper: TaperSpec = NO_TAPER,
                scoring: str = "full") -> DiscriminantModel:
    """Plug-in rule from a fit; Sigma~ = Sigma(theta_hat) tapered with ``taper``.

    An empty support (all of delta_hat shrunk to zero) gives a degenerate
    model that scores every point 0, flagged ``degenerate``.
    """
    if fit.theta_hat is None:
        raise ValueError(f"fit {fit.method!r} carries no covariance parameters")
    p = fit.delta_hat.size
    support = fit.support if fit.method in ("pmle", "preg") else np.arange(p)
    degenerate = support.size == 0
    if degenerate:
        support = np.arange(p)
    cov = build_cov(dist, fit.theta_hat, taper)
    return DiscriminantModel(fit.method, fit.mu1_hat, fit.mu2_hat, support, factor=cholesky(cov),
                             scoring=scoring, theta=fit.theta_hat, taper=taper, degenerate=degenerate,
                             flags=("empty-support",) if degenerate else ())


def _floored_variances(data: LabeledDataset):
    var = pooled_variances(data)
    low = var < VARIANCE_FLOOR
    if np.any(low):
        var = np.where(low, VARIANCE_FLOOR, var)
    return var, bool(np.any(low))


def fit_nb(data: LabeledDataset) -> DiscriminantModel:
    """Independence rule: class means and pooled per-feature variances."""
    data.require_training()
    mu1, mu2, _ = class_means(data)
    var, floored = _floored_variances(data)
    return DiscriminantModel("nb", mu1, mu2, np.arange(data.p), variances=var,
                             flags=("variance-floor",) if floored else ())


def t_statistics(data: LabeledDataset) -> np.ndarray:
    """Two-sample t statistics (Ybar1 - Ybar2) / sqrt(s1^2/n1 + s2^2/n2)."""
    mu1, mu2, _ = class_means(data)
    v1 = data.class1.var(axis=0, ddof=1)
    v2 = data.class2.var(axis=0, ddof=1)
    se = np.sqrt(np.maximum(v1 / data.n1 + v2 / data.n2, VARIANCE_FLOOR))
    return (mu1 - mu2) / se


def fair_candidates(p: int, n: int) -> list[int]:
    top = min(p, n)
    out = []
    m = 1
    while m < top:
        out.append(m)
        m *= 2
    out.append(top)
    return out


def _fair_model(data: LabeledDataset, m: int) -> DiscriminantModel:
    t = t_statistics(data)
    keep = np.sort(np.argsort(-np.abs(t), kind="stable")[:m])
    nb = fit_nb(data)
    return DiscriminantModel("fair", nb.mu1, nb.mu2, keep, variances=nb.variances, flags=nb.flags)


def fair_bound_count(data: LabeledDataset) -> int:
    """Feature count maximizing the FAIR error-bound criterion.

    With T_(1), T_(2), ... the t statistics sorted by decreasing |T| and
    lam_m the largest eigenvalue of the pooled within-class sample
    correlation matrix of the top m features, the count maximizes

        [sum_{j<=m} T_(j)^2 + m (n1 - n2) / n]^2 / (lam_m [n m / (n1 n2) + sum_{j<=m} T_(j)^2]).
    """
    t = t_statistics(data)
    order = np.argsort(-np.abs(t), kind="stable")
    mu1, mu2, _ = class_means(data)
    resid = np.vstack([data.class1 - mu1, data.class2 - mu2])
    cov = resid.T @ resid / (data.n - 2)
    sd = np.sqrt(np.maximum(np.diag(cov), VARIANCE_FLOOR))
    corr = cov / np.outer(sd, sd)
    n1, n2, n = data.n1, data.n2, data.n
    cum = np.cumsum(t[order] ** 2)
    best_m, best = 1, -math.inf
    for m in range(1, data.p + 1):
        idx = order[:m]
        lam = float(np.linalg.eigvalsh(corr[np.ix_(idx, idx)])[-1])
        num = (cum[m - 1] + m * (n1 - n2) / n) ** 2
        val = num / (lam * (n * m / (n1 * n2) + cum[m - 1]))
        if val > best:
            best_m, best = m, val
    return best_m


def fit_fair(data: LabeledDataset, m: int | None = None, rng=0, folds: int = 10,
             rule: str = "bound") -> DiscriminantModel:
    """Independence rule on the m features with the largest |t|.

    Without ``m`` the count comes from ``rule``: ``"bound"`` maximizes the
    FAIR error-bound criterion (:func:`fair_bound_count`); ``"cv"`` picks it
    by stratified k-fold CV over {1, 2, 4, ..., min(p, n)}, ties going to
    the smaller count.
    """
    data.require_training()
    if m is None and rule == "bound":
        m = fair_bound_count(data)
    elif m is None and rule == "cv":
        cands = fair_candidates(data.p, data.n)
        err = np.zeros(len(cands))
        for h1, h2 in stratified_folds(data.n1, data.n2, folds, rng):
            train = data.subset(_complement(data.n1, h1), _complement(data.n2, h2))
            test = data.subset(h1, h2)
            t = t_statistics(train)
            order = np.argsort(-np.abs(t), kind="stable")
            nb = fit_nb(train)
            for k, mk in enumerate(cands):
                model = DiscriminantModel("fair", nb.mu1, nb.mu2, np.sort(order[:mk]), variances=nb.variances)
                err[k] += empirical_error(model, test)
        m = cands[int(np.argmin(err))]
    elif m is None:
        raise ValueError(f"unknown FAIR rule {rule!r}")
    if not 1 <= m <= data.p:
        raise ValueError(f"m must lie in 1..{data.p}, got {m}")
    return _fair_model(data, m)


@dataclass(frozen=True)
class ErrorReport:
    w1: float
    w2: float
    w: float
    psi1: float
    psi2: float
    cp: float
    w_opt: float


def theoretical_errors(model: DiscriminantModel, true_mu1, true_mu2, true_sigma: CovMatrix) -> ErrorReport:
    """Conditional and overall misclassification rates of a fixed linear rule
    when the classes are N(true_mu_k, true_sigma)."""
    mu1 = np.asarray(true_mu1, dtype=float)
    mu2 = np.asarray(true_mu2, dtype=float)
    sig = true_sigma.toarray() if isinstance(true_sigma, CovMatrix) else np.asarray(true_sigma, dtype=float)
    if mu1.size != model.p or sig.shape != (model.p, model.p):
        raise ValueError("dimension mismatch between model and true parameters")
    f = cholesky(sig)
    delta = mu1 - mu2
    cp = float(delta @ solve(f, delta))
    w_opt = float(norm.sf(math.sqrt(max(cp, 0.0)) / 2))
    w = model.weights
    scale = math.sqrt(max(float(w @ sig @ w), 0.0))
    if scale == 0.0 or not np.any(w):
        return ErrorReport(0.5, 0.5, 0.5, math.nan, math.nan, cp, w_opt)
    psi1 = float((mu1 - model.midpoint) @ w) / scale
    psi2 = float((mu2 - model.midpoint) @ w) / scale
    w1 = float(norm.sf(psi1))
    w2 = float(norm.cdf(psi2))
    return ErrorReport(w1, w2, 0.5 * (w1 + w2), psi1, psi2, cp, w_opt)


def empirical_error(model: DiscriminantModel, test: LabeledDataset) -> float:
    """Fraction of rows of both classes assigned to the wrong class."""
    wrong = 0
    if test.n1:
        wrong += int(np.count_nonzero(classify(test.class1, model) != 1))
    if test.n2:
        wrong += int(np.count_nonzero(classify(test.class2, model) != 2))
    total = test.n1 + test.n2
    return wrong / total if total else math.nan


def confusion(model: DiscriminantModel, test: LabeledDataset) -> np.ndarray:
    """2x2 counts, rows = true class, columns = predicted class."""
    out = np.zeros((2, 2), dtype=int)
    for k, rows in ((0, test.class1), (1, test.class2)):
        if rows.shape[0]:
            lab = classify(rows, model)
            out[k, 0] = int(np.count_nonzero(lab == 1))
            out[k, 1] = int(np.count_nonzero(lab == 2))
    return out
