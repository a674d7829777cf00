"""Fit PMLE-LDA on one simulated 6x6 grid and compare it with the baselines.

Run with:  python demos/quickstart.py
"""

import numpy as np

from spatial_lda.classify import build_model, empirical_error, fit_fair, fit_nb, theoretical_errors, true_model
from spatial_lda.estimation import select_lambda_cv, default_lambda_grid, fit_mle, transform_Z, ScadSpec, one_step_pmle
from spatial_lda.experiments import Scenario, simulate_dataset
from spatial_lda.gausscore import RngStream

sc = Scenario(u=6, r=5.0)  # p = 36 sites, exponential covariance, sigma2 = 1, nugget 0.2
root = RngStream(7)
train = simulate_dataset(sc, "train", root.child("train"))
test = simulate_dataset(sc, "test", root.child("test"))
print(f"p={sc.p}  train {train.n1}/{train.n2}  test {test.n1}/{test.n2}")

# lambda by 10-fold CV, then the one-step penalized fit
grid = default_lambda_grid(transform_Z(train))
lam, table = select_lambda_cv(train, sc.dist, grid, folds=10, rng=root.child("cv"))
fit = one_step_pmle(train, sc.dist, ScadSpec(lam))
print(f"lambda={lam:.4g}  selected {fit.support.size} features, true signal at 0..9: "
      f"{np.intersect1d(fit.support, np.arange(10)).size} recovered")
print(f"theta_hat: sigma2={fit.theta_hat.sigma2:.3f} nugget={fit.theta_hat.nugget:.3f} range={fit.theta_hat.range:.3f}")

models = {
    "true": true_model(sc.mu1, sc.mu2, sc.gen_cov),
    "mle": build_model(fit_mle(train, sc.dist), sc.dist),
    "pmle": build_model(fit, sc.dist),
    "nb": fit_nb(train),
    "fair": fit_fair(train),
}
print(f"{'method':6s} {'test acc':>9s} {'theory W':>9s}")
for name, m in models.items():
    w = theoretical_errors(m, sc.mu1, sc.mu2, sc.gen_cov).w
    print(f"{name:6s} {1 - empirical_error(m, test):9.3f} {w:9.3f}")
