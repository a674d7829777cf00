"""Command-line interface: ``spatial-lda simulate|fit|predict|evaluate|study``.

Exit codes: 0 success, 1 runtime or fit failure, 2 usage, schema or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .classify import classify, discriminant_score, fit_fair, fit_nb, theoretical_errors
from .covariance import NO_TAPER, CovarianceError, CovParams, TaperSpec, build_cov, family_nu
from .estimation import (
    EstimationError,
    ScadSpec,
    StratificationError,
    auto_taper,
    default_init,
    fit_mle,
    one_step_pmle,
    preg_from_trace,
    select_lambda_cv,
    transform_Z,
    default_lambda_grid,
)
from .gausscore import RngStream
from .geometry import SiteError, load_sites, pairwise_distances, write_sites
from .io import SchemaError, load_model, model_from_fit, model_from_independence, read_data_csv, save_model, write_dataset

FAMILY_CHOICES = ("exp", "matern32", "matern52", "gauss")


class UsageError(ValueError):
    pass


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _taper_arg(text: str, dist, dim) -> TaperSpec:
    if text == "none":
        return NO_TAPER
    if text == "auto":
        return auto_taper(dist, dim)
    try:
        return TaperSpec(float(text))
    except (ValueError, CovarianceError):
        raise UsageError(f"--taper-width must be auto, none or a positive number, got {text!r}") from None


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    sc = ex.Scenario(u=args.u, r=args.r, sigma2=args.sigma2, nugget=args.nugget, gen_family=args.gen_family,
                     n1=args.n1, n2=args.n2, n1_test=args.n1_test, n2_test=args.n2_test, dim=2)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_sites(sc.sites, out / "sites.csv")
    for i in range(args.reps):
        root = RngStream(args.seed).child(i)
        write_dataset(out / f"rep{i + 1:03d}_train.csv", ex.simulate_dataset(sc, "train", root.child("train")), sc.sites)
        write_dataset(out / f"rep{i + 1:03d}_test.csv", ex.simulate_dataset(sc, "test", root.child("test")), sc.sites)
    print(f"scenario: u={sc.u} p={sc.p} r={sc.r:g} sigma2={sc.sigma2:g} nugget={sc.nugget:g} "
          f"family={sc.gen_family} train={sc.n1}/{sc.n2} test={sc.n1_test}/{sc.n2_test}")
    print(f"wrote sites.csv and {args.reps} train/test pairs to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    sites = load_sites(args.sites)
    data = read_data_csv(args.data, sites.ids, require_labels=True).dataset(sites)
    data.require_training()
    dist = pairwise_distances(sites)
    taper = _taper_arg(args.taper_width, dist, sites.dim)
    nu = family_nu(args.family)
    diag: dict = {"n1": data.n1, "n2": data.n2, "p": data.p}
    if args.method == "nb":
        mf = model_from_independence(fit_nb(data), data, sites, diag)
    elif args.method == "fair":
        model = fit_fair(data, m=args.fair_m, rng=RngStream(args.seed).child("fair"), folds=args.folds)
        diag["retained"] = int(model.subset.size)
        mf = model_from_independence(model, data, sites, diag)
    elif args.method == "mle":
        fit = fit_mle(data, dist, nu, taper)
        diag["trace"] = _trace_summary(fit.trace)
        mf = model_from_fit(fit, sites, taper, diag)
    else:
        if args.lam == "auto":
            grid = default_lambda_grid(transform_Z(data), args.grid_size)
            lam, table = select_lambda_cv(data, dist, grid, args.folds, RngStream(args.seed).child("cv"),
                                          method=args.method, taper=taper, nu=nu, classify_taper=taper)
            rows = list(table.rows())
            diag["cv"] = rows
            print("cv table (lambda, pmle_error, preg_error):")
            for row in rows:
                print(f"  {row['lambda']:.6g}  {row['pmle_error']:.4f}  {row['preg_error']:.4f}")
        else:
            try:
                lam = float(args.lam)
            except ValueError:
                raise UsageError(f"--lambda must be auto or a number, got {args.lam!r}") from None
        fit = one_step_pmle(data, dist, ScadSpec(lam, args.scad_a), taper, default_init(data, dist, nu), nu)
        if args.method == "preg":
            fit = preg_from_trace(fit)
        diag["trace"] = _trace_summary(fit.trace)
        mf = model_from_fit(fit, sites, taper, diag)
        print(f"lambda: {lam:.6g}")
    save_model(mf, args.out)
    print(f"method: {mf.method}")
    print(f"selected features: {len(mf.delta_index) if mf.method in ('pmle', 'preg') else len(mf.subset)} of {mf.p}")
    if mf.theta is not None:
        t = mf.theta
        print(f"theta: sigma2={t['sigma2']:.6g} nugget={t['nugget']:.6g} range={t['range']:.6g} family={t['family']}")
    print(f"model written to {args.out}")
    return 0


def _trace_summary(trace: dict) -> dict:
    out = {}
    for stage, info in trace.items():
        s = {}
        for k, v in info.items():
            if isinstance(v, CovParams):
                s[k] = {"sigma2": v.sigma2, "nugget": v.nugget, "range": v.range}
            elif isinstance(v, np.ndarray):
                continue
            elif isinstance(v, (bool, np.bool_)):
                s[k] = bool(v)
            elif isinstance(v, (int, np.integer)):
                s[k] = int(v)
            elif isinstance(v, (float, np.floating)):
                s[k] = float(v)
        out[stage] = s
    return out


# ---------------------------------------------------------------------------
# predict / evaluate


def cmd_predict(args) -> int:
    mf = load_model(args.model)
    table = read_data_csv(args.data, mf.site_ids)
    model = mf.to_model()
    scores = discriminant_score(table.X, model) if table.X.shape[0] else np.zeros(0)
    labels = np.where(np.asarray(scores) > 0, 1, 2)
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "score", "label"])
        for i, s, lab in zip(table.ids, np.atleast_1d(scores), labels):
            w.writerow([i, repr(float(s)), int(lab)])
    print(f"wrote {len(table.ids)} predictions to {args.out}")
    return 0


def _read_predictions(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"id", "label"} <= set(rows[0]):
        raise SchemaError(f"{path}: prediction file needs id and label columns")
    return {r["id"]: int(r["label"]) for r in rows}


def _report(truth: np.ndarray, pred: np.ndarray) -> dict:
    cm = np.zeros((2, 2), dtype=int)
    for t, p in zip(truth, pred):
        cm[t - 1, p - 1] += 1
    n1, n2 = cm[0].sum(), cm[1].sum()
    total = n1 + n2
    return {
        "n": int(total),
        "accuracy": float(np.trace(cm) / total) if total else math.nan,
        "error_class1": float(cm[0, 1] / n1) if n1 else math.nan,
        "error_class2": float(cm[1, 0] / n2) if n2 else math.nan,
        "confusion": cm.tolist(),
    }


def _true_params(path, mf):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        mu1 = np.asarray(obj["mu1"], dtype=float)
        mu2 = np.asarray(obj["mu2"], dtype=float)
    except KeyError as exc:
        raise SchemaError(f"{path}: missing {exc}") from None
    if "sigma" in obj:
        sigma = np.asarray(obj["sigma"], dtype=float)
    elif "theta" in obj:
        t = obj["theta"]
        params = CovParams(t["sigma2"], t["nugget"], t["range"], family_nu(t.get("family", "exp")))
        sigma = build_cov(pairwise_distances(mf.sites()), params).toarray()
    else:
        raise SchemaError(f"{path}: needs either 'sigma' (matrix) or 'theta' (family, sigma2, nugget, range)")
    return mu1, mu2, sigma


def cmd_evaluate(args) -> int:
    mf = None
    if args.pred and args.truth:
        pred = _read_predictions(args.pred)
        with Path(args.truth).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
        has_id = len(header) > 1 and header[1] == "id"
        truth_map = {(r[1] if has_id else str(k + 1)): int(r[0]) for k, r in enumerate(rows)}
        if set(truth_map) != set(pred):
            raise SchemaError("prediction ids and truth ids differ")
        ids = list(truth_map)
        report = _report(np.array([truth_map[i] for i in ids]), np.array([pred[i] for i in ids]))
    elif args.model and args.data:
        mf = load_model(args.model)
        table = read_data_csv(args.data, mf.site_ids, require_labels=True)
        model = mf.to_model()
        lab = classify(table.X, model) if table.X.shape[0] else np.zeros(0, dtype=int)
        report = _report(table.labels, np.atleast_1d(lab))
    else:
        raise UsageError("give either --pred and --truth, or --model and --data")
    print(f"accuracy: {report['accuracy']:.6f} (n={report['n']})")
    print(f"error class 1: {report['error_class1']:.6f}")
    print(f"error class 2: {report['error_class2']:.6f}")
    cm = report["confusion"]
    print("confusion (rows true 1/2, columns predicted 1/2):")
    print(f"  {cm[0][0]} {cm[0][1]}\n  {cm[1][0]} {cm[1][1]}")
    if args.theory:
        if not args.true_params:
            raise UsageError("--theory needs --true-params")
        if mf is None:
            if not args.model:
                raise UsageError("--theory needs --model")
            mf = load_model(args.model)
        mu1, mu2, sigma = _true_params(args.true_params, mf)
        er = theoretical_errors(mf.to_model(), mu1, mu2, sigma)
        print(f"W1={er.w1:.6f} W2={er.w2:.6f} W={er.w:.6f} Cp={er.cp:.6f} W_OPT={er.w_opt:.6f}")
    return 0


# ---------------------------------------------------------------------------
# study

STUDY_KEYS = {"u", "r", "methods", "reps", "seed", "parallelism", "gen_family", "assumed_family", "n1", "n2",
              "n1_test", "n2_test", "sigma2", "nugget", "lambda_policy", "lambda", "folds", "out_csv", "out_table"}


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def validate_study_config(cfg) -> list[str]:
    """Every problem with a study config, so they can be reported at once."""
    errs = []
    if not isinstance(cfg, dict):
        return ["config must be a JSON object"]
    for k in sorted(set(cfg) - STUDY_KEYS):
        errs.append(f"unknown key {k!r}")
    for key in ("u", "r"):
        if key not in cfg:
            errs.append(f"missing required key {key!r}")
    for u in _as_list(cfg.get("u", [])):
        if not (isinstance(u, int) and not isinstance(u, bool) and u >= 1):
            errs.append(f"u must be a positive integer, got {u!r}")
    for r in _as_list(cfg.get("r", [])):
        if not (isinstance(r, (int, float)) and not isinstance(r, bool) and r > 0):
            errs.append(f"r must be a positive number, got {r!r}")
    methods = cfg.get("methods", list(ex.BASE_METHODS))
    if not isinstance(methods, list) or not methods:
        errs.append("methods must be a nonempty list")
    else:
        for m in methods:
            if m not in ex.ALL_METHODS:
                errs.append(f"unknown method {m!r} (choose from {', '.join(ex.ALL_METHODS)})")
    reps = cfg.get("reps", 30)
    if not (isinstance(reps, int) and reps >= 2):
        errs.append(f"reps must be an integer >= 2, got {reps!r}")
    for key in ("seed",):
        if key in cfg and not isinstance(cfg[key], int):
            errs.append(f"{key} must be an integer")
    for key in ("parallelism", "n1", "n2", "n1_test", "n2_test", "folds"):
        if key in cfg and not (isinstance(cfg[key], int) and cfg[key] >= 1):
            errs.append(f"{key} must be a positive integer, got {cfg[key]!r}")
    for key in ("gen_family", "assumed_family"):
        if key in cfg and cfg[key] not in FAMILY_CHOICES:
            errs.append(f"{key} must be one of {FAMILY_CHOICES}, got {cfg[key]!r}")
    if "nugget" in cfg and not (isinstance(cfg["nugget"], (int, float)) and 0 <= cfg["nugget"] < 1):
        errs.append("nugget must lie in [0, 1)")
    if "sigma2" in cfg and not (isinstance(cfg["sigma2"], (int, float)) and cfg["sigma2"] > 0):
        errs.append("sigma2 must be positive")
    pol = cfg.get("lambda_policy", "cv")
    if pol not in ("cv", "fixed"):
        errs.append(f"lambda_policy must be cv or fixed, got {pol!r}")
    elif pol == "fixed" and not isinstance(cfg.get("lambda"), (int, float)):
        errs.append("lambda_policy fixed needs a numeric 'lambda'")
    return errs


def study_scenarios(cfg) -> list:
    extra = {k: cfg[k] for k in ("gen_family", "assumed_family", "n1", "n2", "n1_test", "n2_test", "sigma2",
                                 "nugget", "folds") if k in cfg}
    return [ex.Scenario(u=u, r=float(r), **extra) for u in _as_list(cfg["u"]) for r in _as_list(cfg["r"])]


def cmd_study(args) -> int:
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    else:
        if args.u is None or args.r is None:
            raise UsageError("give --config or at least --u and --r")
        cfg = {"u": args.u, "r": args.r}
        for key in ("methods", "reps", "seed", "parallelism", "gen_family", "assumed_family"):
            v = getattr(args, key)
            if v is not None:
                cfg[key] = v
    errs = validate_study_config(cfg)
    if errs:
        raise UsageError("invalid study config:\n  " + "\n  ".join(errs))
    policy = cfg.get("lambda_policy", "cv")
    reports = []
    for sc in study_scenarios(cfg):
        reports.append(ex.run_study(sc, cfg.get("methods", list(ex.BASE_METHODS)), cfg.get("reps", 30),
                                    cfg.get("seed", 0), cfg.get("parallelism", 1), policy, cfg.get("lambda")))
    out_csv = args.out_csv or cfg.get("out_csv") or "study.csv"
    out_table = args.out_table or cfg.get("out_table") or "study.txt"
    ex.write_csv(reports, out_csv)
    text = ex.format_table(reports)
    Path(out_table).write_text(text + "\n", encoding="utf-8")
    print(text)
    print(f"wrote {out_csv} and {out_table}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spatial-lda", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write simulated train/test CSVs and a sites CSV")
    s.add_argument("--u", type=int, required=True)
    s.add_argument("--r", type=_positive_float, required=True)
    s.add_argument("--n1", type=int, default=30)
    s.add_argument("--n2", type=int, default=30)
    s.add_argument("--n1-test", type=int, default=100)
    s.add_argument("--n2-test", type=int, default=100)
    s.add_argument("--reps", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--gen-family", choices=("exp", "gauss"), default="exp")
    s.add_argument("--sigma2", type=_positive_float, default=1.0)
    s.add_argument("--nugget", type=float, default=0.2)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a classifier and write a model file")
    f.add_argument("--data", required=True)
    f.add_argument("--sites", required=True)
    f.add_argument("--method", choices=("pmle", "preg", "mle", "nb", "fair"), default="pmle")
    f.add_argument("--lambda", dest="lam", default="auto")
    f.add_argument("--taper-width", default="auto")
    f.add_argument("--family", choices=FAMILY_CHOICES, default="exp")
    f.add_argument("--folds", type=int, default=10)
    f.add_argument("--grid-size", type=int, default=20)
    f.add_argument("--scad-a", type=float, default=3.7)
    f.add_argument("--fair-m", type=int, default=None)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="score and label rows of a data CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="accuracy, per-class error and confusion counts")
    e.add_argument("--pred")
    e.add_argument("--truth")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--theory", action="store_true")
    e.add_argument("--true-params")
    e.set_defaults(func=cmd_evaluate)

    st = sub.add_parser("study", help="run a simulation study")
    st.add_argument("--config")
    st.add_argument("--u", type=int, nargs="+")
    st.add_argument("--r", type=float, nargs="+")
    st.add_argument("--methods", nargs="+")
    st.add_argument("--reps", type=int)
    st.add_argument("--seed", type=int)
    st.add_argument("--parallelism", type=int)
    st.add_argument("--gen-family", choices=FAMILY_CHOICES)
    st.add_argument("--assumed-family", choices=FAMILY_CHOICES)
    st.add_argument("--out-csv")
    st.add_argument("--out-table")
    st.set_defaults(func=cmd_study)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # argparse exits with status 2 on usage errors
    try:
        return args.func(args)
    except EstimationError as exc:
        print(f"error: fit failed {exc}", file=sys.stderr)
        return 1
    except (UsageError, SchemaError, SiteError, CovarianceError, StratificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ex.StudyError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
