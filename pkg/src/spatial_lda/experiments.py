"""Simulation scenarios, replications and study aggregation.

A scenario is a u x u lattice with exponential (or Gaussian) spatial noise,
class-1 mean 1 on the first ``signal_count`` sites and class-2 mean 0.
Each replication draws a fresh training set and test set from streams keyed
by (base_seed, rep_index), so results never depend on the worker layout.
"""

from __future__ import annotations

import csv
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .classify import build_model, empirical_error, fit_fair, fit_nb, true_model
from .covariance import CovParams, TaperSpec, build_cov, family_nu
from .estimation import (
    LabeledDataset,
    auto_taper,
    cv_table,
    default_lambda_grid,
    fit_mle,
    forced_taper,
    one_step_pmle,
    preg_from_trace,
    transform_Z,
    ScadSpec,
)
from .gausscore import RngStream, cholesky, sample_mvn
from .geometry import build_grid, pairwise_distances

BASE_METHODS = ("true", "mle", "preg", "pmle", "nb", "fair")
TAPERED = ("mle_t", "preg_t", "pmle_t")
ALL_METHODS = BASE_METHODS + TAPERED
METRICS = ("accuracy", "sigma2", "sigma", "nugget", "range", "selectedN", "correctN", "lambda")


class StudyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scenario:
    u: int = 6
    r: float = 5.0
    sigma2: float = 1.0
    nugget: float = 0.2
    gen_family: str = "exp"
    assumed_family: str = "exp"
    n1: int = 30
    n2: int = 30
    n1_test: int = 100
    n2_test: int = 100
    signal_count: int = 10
    signal_value: float = 1.0
    dim: int = 2
    spacing: float = 1.0
    taper_width: float | None = None
    folds: int = 10
    lambda_grid_size: int = 20
    scad_a: float = 3.7

    def __post_init__(self):
        if not 0 <= self.signal_count <= self.p:
            raise ValueError(f"signal_count must lie in 0..{self.p}")
        CovParams(self.sigma2, self.nugget, self.r, family_nu(self.gen_family))
        family_nu(self.assumed_family)

    @property
    def p(self) -> int:
        return self.u ** self.dim

    @cached_property
    def sites(self):
        return build_grid(self.u, self.dim, self.spacing)

    @cached_property
    def dist(self):
        return pairwise_distances(self.sites)

    @property
    def gen_params(self) -> CovParams:
        return CovParams(self.sigma2, self.nugget, self.r, family_nu(self.gen_family))

    @property
    def assumed_nu(self) -> float:
        return family_nu(self.assumed_family)

    @cached_property
    def gen_cov(self):
        return build_cov(self.dist, self.gen_params)

    @cached_property
    def gen_factor(self):
        return cholesky(self.gen_cov)

    @property
    def signal(self) -> np.ndarray:
        return np.arange(self.signal_count)

    @property
    def mu1(self) -> np.ndarray:
        m = np.zeros(self.p)
        m[: self.signal_count] = self.signal_value
        return m

    @property
    def mu2(self) -> np.ndarray:
        return np.zeros(self.p)

    def estimation_taper(self, tapered: bool) -> TaperSpec:
        if tapered:
            return TaperSpec(self.taper_width) if self.taper_width else forced_taper(self.dist, self.dim)
        return auto_taper(self.dist, self.dim)

    def classify_taper(self) -> TaperSpec:
        return auto_taper(self.dist, self.dim)

    def label(self) -> dict:
        return {"u": self.u, "p": self.p, "r": self.r, "gen_family": self.gen_family,
                "assumed_family": self.assumed_family}


def simulate_dataset(sc: Scenario, role: str, rng: RngStream) -> LabeledDataset:
    """Class-k rows drawn from N(mu_k, Sigma_gen); ``role`` picks train or test sizes."""
    if role == "train":
        n1, n2 = sc.n1, sc.n2
    elif role == "test":
        n1, n2 = sc.n1_test, sc.n2_test
    else:
        raise ValueError(f"role must be 'train' or 'test', got {role!r}")
    f = sc.gen_factor
    y1 = sample_mvn(sc.mu1, f, rng.child("class1"), n1) if n1 else np.zeros((0, sc.p))
    y2 = sample_mvn(sc.mu2, f, rng.child("class2"), n2) if n2 else np.zeros((0, sc.p))
    return LabeledDataset(y1, y2, sc.sites)


def _selection(sc: Scenario, idx) -> tuple[float, float]:
    idx = np.asarray(idx, dtype=int)
    return float(idx.size), float(np.intersect1d(idx, sc.signal).size)


def _theta_cols(theta: CovParams | None) -> dict:
    if theta is None:
        return {}
    return {"sigma2": theta.sigma2, "sigma": math.sqrt(theta.sigma2), "nugget": theta.nugget, "range": theta.range}


def _check_methods(methods) -> tuple:
    methods = tuple(methods)
    bad = [m for m in methods if m not in ALL_METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; choose from {ALL_METHODS}")
    return methods


def run_replication(sc: Scenario, methods=BASE_METHODS, lambda_policy: str = "cv", rep_index: int = 0,
                    base_seed: int = 0, fixed_lambda: float | None = None) -> dict:
    """One train/test draw and per-method metrics.

    Returns ``{"rep": i, "methods": {name: {metric: value, ..., "error": msg|None}}}``.
    Per-method failures are recorded and do not stop the replication.
    """
    methods = _check_methods(methods)
    if lambda_policy not in ("cv", "fixed"):
        raise ValueError("lambda_policy must be 'cv' or 'fixed'")
    if lambda_policy == "fixed" and fixed_lambda is None:
        raise ValueError("fixed lambda policy needs fixed_lambda")
    root = RngStream(base_seed).child(rep_index)
    train = simulate_dataset(sc, "train", root.child("train"))
    test = simulate_dataset(sc, "test", root.child("test"))
    dist, nu = sc.dist, sc.assumed_nu
    ctaper = sc.classify_taper()
    out: dict = {}

    def record(name, fn):
        try:
            out[name] = {**fn(), "error": None}
        except Exception as exc:  # noqa: BLE001 - failures are data here
            out[name] = {"error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc(limit=3)}

    if "true" in methods:
        def _true():
            m = true_model(sc.mu1, sc.mu2, sc.gen_cov)
            return {"accuracy": 1 - empirical_error(m, test)}
        record("true", _true)

    for tapered in (False, True):
        sfx = "_t" if tapered else ""
        etaper = sc.estimation_taper(tapered)
        # tapered variants also classify with their taper
        ctaper = etaper if tapered else sc.classify_taper()
        if "mle" + sfx in methods:
            def _mle():
                fit = fit_mle(train, dist, nu, etaper)
                m = build_model(fit, dist, ctaper)
                return {"accuracy": 1 - empirical_error(m, test), **_theta_cols(fit.theta_hat)}
            record("mle" + sfx, _mle)
        want = [k for k in ("pmle", "preg") if k + sfx in methods]
        if not want:
            continue
        try:
            if lambda_policy == "cv":
                zt = transform_Z(train)
                grid = default_lambda_grid(zt, sc.lambda_grid_size)
                table = cv_table(train, dist, grid, sc.folds, root.child("cv" + sfx), etaper, nu, sc.scad_a, ctaper)
                lams = {k: table.best(k) for k in want}
            else:
                lams = {k: float(fixed_lambda) for k in want}
        except Exception as exc:  # noqa: BLE001
            for k in want:
                out[k + sfx] = {"error": f"lambda selection: {type(exc).__name__}: {exc}"}
            continue
        fits = {}
        for k in want:
            def _pen(k=k):
                lam = lams[k]
                if lam not in fits:
                    fits[lam] = one_step_pmle(train, dist, ScadSpec(lam, sc.scad_a), etaper, nu=nu)
                fit = fits[lam] if k == "pmle" else preg_from_trace(fits[lam])
                m = build_model(fit, dist, ctaper)
                sel, cor = _selection(sc, fit.support)
                return {"accuracy": 1 - empirical_error(m, test), **_theta_cols(fit.theta_hat),
                        "selectedN": sel, "correctN": cor, "lambda": lam}
            record(k + sfx, _pen)

    if "nb" in methods:
        def _nb():
            return {"accuracy": 1 - empirical_error(fit_nb(train), test)}
        record("nb", _nb)
    if "fair" in methods:
        def _fair():
            m = fit_fair(train, rng=root.child("fair"), folds=sc.folds)
            sel, cor = _selection(sc, m.subset)
            return {"accuracy": 1 - empirical_error(m, test), "selectedN": sel, "correctN": cor}
        record("fair", _fair)
    return {"rep": rep_index, "methods": {k: out[k] for k in methods if k in out}}


def _mean_sd(values):
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan, 0
    sd = float(v.std(ddof=1)) if v.size > 1 else math.nan
    return float(v.mean()), sd, int(v.size)


@dataclass
class StudyReport:
    scenario: Scenario
    methods: tuple
    rows: list
    base_seed: int
    lambda_policy: str = "cv"

    @property
    def reps(self) -> int:
        return len(self.rows)

    def values(self, method: str, metric: str) -> np.ndarray:
        out = []
        for row in self.rows:
            res = row["methods"].get(method, {})
            if res.get("error") is None and metric in res:
                out.append(res[metric])
        return np.asarray(out, dtype=float)

    def failures(self, method: str) -> int:
        return sum(1 for row in self.rows if row["methods"].get(method, {}).get("error") is not None)

    def stat(self, method: str, metric: str) -> tuple[float, float, int]:
        """(mean, sd with n-1 divisor, count) over successful replications."""
        return _mean_sd(self.values(method, metric))

    def mean(self, method: str, metric: str = "accuracy") -> float:
        return self.stat(method, metric)[0]

    def summary_rows(self) -> list[dict]:
        rows = []
        for m in self.methods:
            row = {**self.scenario.label(), "method": m, "reps": self.reps, "failures": self.failures(m)}
            for metric in METRICS:
                mean, sd, _ = self.stat(m, metric)
                row[f"{metric}_mean"] = mean
                row[f"{metric}_sd"] = sd
            rows.append(row)
        return rows


def _rep_task(args):
    sc, methods, lambda_policy, i, seed, fixed_lambda = args
    return run_replication(sc, methods, lambda_policy, i, seed, fixed_lambda)


def max_parallelism(requested: int | None = None) -> int:
    cap = os.environ.get("SPATIAL_LDA_THREADS")
    n = requested if requested else (os.cpu_count() or 1)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, int(n))


def run_study(sc: Scenario, methods=BASE_METHODS, reps: int = 30, base_seed: int = 0, parallelism: int = 1,
              lambda_policy: str = "cv", fixed_lambda: float | None = None, max_failure_rate: float = 0.2) -> StudyReport:
    """Run ``reps`` replications and aggregate them.

    Raises StudyError when more than ``max_failure_rate`` of the replications
    failed for any method.
    """
    if reps < 2:
        raise ValueError("a study needs at least 2 replications")
    methods = _check_methods(methods)
    tasks = [(sc, methods, lambda_policy, i, base_seed, fixed_lambda) for i in range(reps)]
    workers = max_parallelism(parallelism)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_rep_task, tasks))
    else:
        rows = [_rep_task(t) for t in tasks]
    rows.sort(key=lambda r: r["rep"])
    report = StudyReport(sc, methods, rows, base_seed, lambda_policy)
    for m in methods:
        if report.failures(m) > max_failure_rate * reps:
            raise StudyError(f"method {m!r} failed in {report.failures(m)} of {reps} replications")
    return report


# ---------------------------------------------------------------------------
# output


def write_csv(reports, path) -> None:
    """One row per (scenario, method): mean and sd of every metric, replication count."""
    rows = [row for rep in reports for row in rep.summary_rows()]
    if not rows:
        raise ValueError("no reports to write")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _cell(mean, sd, digits=3):
    if not np.isfinite(mean):
        return "-"
    sd_txt = f"{sd:.2f}" if np.isfinite(sd) else "-"
    return f"{mean:.{digits}f}({sd_txt})"


def format_table(reports, metric: str = "accuracy", digits: int = 3) -> str:
    """Aligned text table: one row per scenario, one column per method.

    Cells read ``mean(sd)``; means are rounded to ``digits`` places and
    standard deviations to 2.
    """
    reports = list(reports)
    if not reports:
        return ""
    methods = list(dict.fromkeys(m for rep in reports for m in rep.methods))
    header = ["scenario"] + [m.upper() for m in methods]
    lines = []
    for rep in reports:
        sc = rep.scenario
        name = f"p={sc.p} r={sc.r:g}"
        if sc.gen_family != sc.assumed_family:
            name += f" gen={sc.gen_family}/fit={sc.assumed_family}"
        cells = [name]
        for m in methods:
            if m in rep.methods:
                mean, sd, _ = rep.stat(m, metric)
                cells.append(_cell(mean, sd, digits))
            else:
                cells.append("-")
        lines.append(cells)
    widths = [max(len(str(r[k])) for r in [header] + lines) for k in range(len(header))]
    fmt = lambda cells: "  ".join(str(c).rjust(w) if k else str(c).ljust(w) for k, (c, w) in enumerate(zip(cells, widths)))
    out = [f"{metric} mean(sd) over replications", fmt(header), "-" * (sum(widths) + 2 * (len(widths) - 1))]
    out += [fmt(r) for r in lines]
    return "\n".join(out)
