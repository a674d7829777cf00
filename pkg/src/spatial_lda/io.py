"""Data CSV and JSON model-file formats.

Data CSV: first column ``label`` (1 or 2, may be blank for unlabeled rows),
an optional ``id`` column, then one column per site named by the site id.
Feature columns are matched to sites by id, never by position.

Model file: JSON with an explicit ``schema_version``; floats are written with
``repr`` precision so a save/load round trip is lossless.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classify import DiscriminantModel, build_model
from .covariance import CovParams, TaperSpec, family_name, family_nu
from .estimation import FitResult, LabeledDataset
from .geometry import SiteSet, pairwise_distances

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """Input file does not match the expected layout."""


# ---------------------------------------------------------------------------
# data CSV


@dataclass(frozen=True)
class FeatureTable:
    ids: list
    X: np.ndarray
    labels: np.ndarray | None  # None when the label column is absent or blank everywhere

    def dataset(self, sites: SiteSet | None = None) -> LabeledDataset:
        if self.labels is None:
            raise SchemaError("rows carry no class labels")
        return LabeledDataset(self.X[self.labels == 1], self.X[self.labels == 2], sites)


def write_data_csv(path, sites: SiteSet, class1, class2, with_id: bool = False) -> None:
    rows = [(1, r) for r in np.atleast_2d(class1)] + [(2, r) for r in np.atleast_2d(class2)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + (["id"] if with_id else []) + list(sites.ids))
        for k, (lab, row) in enumerate(rows, start=1):
            if row.size == 0:
                continue
            w.writerow([lab] + ([k] if with_id else []) + [repr(float(v)) for v in row])


def write_dataset(path, data: LabeledDataset, sites: SiteSet) -> None:
    write_data_csv(path, sites, data.class1, data.class2)


def read_data_csv(path, site_ids, require_labels: bool = False) -> FeatureTable:
    """Read a data CSV and order its feature columns by ``site_ids``."""
    path = Path(path)
    site_ids = [str(s) for s in site_ids]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row") from None
        body = [(reader.line_num, row) for row in reader if row and any(c.strip() for c in row)]
    if not header or header[0] != "label":
        raise SchemaError(f"{path}: first column must be 'label'")
    has_id = len(header) > 1 and header[1] == "id"
    feat = header[2:] if has_id else header[1:]
    if len(set(feat)) != len(feat):
        raise SchemaError(f"{path}: duplicate feature column names")
    missing = [s for s in site_ids if s not in feat]
    extra = [c for c in feat if c not in set(site_ids)]
    if missing or extra:
        msg = []
        if missing:
            msg.append(f"missing site columns {missing[:5]}{'...' if len(missing) > 5 else ''}")
        if extra:
            msg.append(f"columns with no matching site {extra[:5]}{'...' if len(extra) > 5 else ''}")
        raise SchemaError(f"{path}: " + "; ".join(msg))
    off = 2 if has_id else 1
    col = {c: k + off for k, c in enumerate(feat)}
    order = [col[s] for s in site_ids]
    X = np.zeros((len(body), len(site_ids)))
    labels, ids = [], []
    for k, (line, row) in enumerate(body):
        if len(row) != len(header):
            raise SchemaError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        lab = row[0].strip()
        if lab == "":
            labels.append(0)
        elif lab in ("1", "2"):
            labels.append(int(lab))
        else:
            raise SchemaError(f"{path}:{line}: label must be 1 or 2, got {lab!r}")
        ids.append(row[1].strip() if has_id else str(k + 1))
        try:
            X[k] = [float(row[j]) for j in order]
        except ValueError as exc:
            raise SchemaError(f"{path}:{line}: {exc}") from None
    labels = np.asarray(labels, dtype=int)
    if labels.size and np.all(labels == 0):
        lab_out = None
    elif np.any(labels == 0):
        raise SchemaError(f"{path}: some rows are labeled and some are not")
    else:
        lab_out = labels
    if require_labels and lab_out is None and len(body):
        raise SchemaError(f"{path}: class labels are required")
    if not np.all(np.isfinite(X)):
        raise SchemaError(f"{path}: non-finite feature values")
    return FeatureTable(ids, X, lab_out)


# ---------------------------------------------------------------------------
# model file


def _taper_width(t: TaperSpec):
    return t.width if t.active else None


@dataclass
class ModelFile:
    method: str
    site_ids: list
    site_coords: list
    dim: int
    delta_index: list  # 1-based
    delta_value: list
    ybar: list
    tau1: float
    tau2: float
    subset: list  # 1-based feature indices used for scoring
    theta: dict | None = None  # {"family", "nu", "sigma2", "nugget", "range"}
    variances: list | None = None
    estimation_taper: float | None = None
    classify_taper: float | None = None
    scoring: str = "full"
    lam: float | None = None
    diagnostics: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        p = len(self.site_ids)
        if len(self.ybar) != p or len(self.site_coords) != p:
            raise SchemaError("site list, coordinates and ybar lengths disagree")
        if len(self.delta_index) != len(self.delta_value):
            raise SchemaError("delta index/value lists differ in length")
        for k in list(self.delta_index) + list(self.subset):
            if not 1 <= int(k) <= p:
                raise SchemaError(f"feature index {k} outside 1..{p}")
        if (self.theta is None) == (self.variances is None):
            raise SchemaError("a model carries exactly one of theta or variances")

    @property
    def p(self) -> int:
        return len(self.site_ids)

    @property
    def delta(self) -> np.ndarray:
        d = np.zeros(self.p)
        d[np.asarray(self.delta_index, dtype=int) - 1] = self.delta_value
        return d

    @property
    def params(self) -> CovParams | None:
        if self.theta is None:
            return None
        t = self.theta
        return CovParams(t["sigma2"], t["nugget"], t["range"], family_nu(t["family"]))

    def sites(self) -> SiteSet:
        return SiteSet(self.dim, np.asarray(self.site_coords, dtype=float).reshape(self.p, self.dim),
                       tuple(self.site_ids))

    def to_model(self) -> DiscriminantModel:
        ybar = np.asarray(self.ybar, dtype=float)
        d = self.delta
        mu1 = ybar + self.tau2 * d
        mu2 = ybar - self.tau1 * d
        subset = np.asarray(self.subset, dtype=int) - 1
        if self.variances is not None:
            return DiscriminantModel(self.method, mu1, mu2, subset, variances=np.asarray(self.variances, dtype=float))
        fit = FitResult(self.method, d, self.params, ybar, self.tau1, self.tau2, self.lam,
                        TaperSpec(self.estimation_taper))
        model = build_model(fit, pairwise_distances(self.sites()), TaperSpec(self.classify_taper), self.scoring)
        if not np.array_equal(model.subset, subset):
            # the support is recomputed from delta; only a degenerate fit can disagree
            raise SchemaError("stored subset disagrees with the support of delta")
        return model

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "method": self.method,
            "theta": self.theta,
            "delta": {"index": list(map(int, self.delta_index)), "value": list(map(float, self.delta_value))},
            "ybar": list(map(float, self.ybar)),
            "tau1": float(self.tau1),
            "tau2": float(self.tau2),
            "variances": None if self.variances is None else list(map(float, self.variances)),
            "subset": list(map(int, self.subset)),
            "taper": {"estimation": self.estimation_taper, "classification": self.classify_taper},
            "scoring": self.scoring,
            "lambda": self.lam,
            "sites": {"dim": self.dim, "ids": list(self.site_ids), "coords": self.site_coords},
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelFile":
        try:
            version = obj["schema_version"]
            if version != SCHEMA_VERSION:
                raise SchemaError(f"unsupported model schema version {version}")
            return cls(
                method=obj["method"], site_ids=list(obj["sites"]["ids"]), site_coords=obj["sites"]["coords"],
                dim=int(obj["sites"]["dim"]), delta_index=obj["delta"]["index"], delta_value=obj["delta"]["value"],
                ybar=obj["ybar"], tau1=obj["tau1"], tau2=obj["tau2"], subset=obj["subset"], theta=obj["theta"],
                variances=obj["variances"], estimation_taper=obj["taper"]["estimation"],
                classify_taper=obj["taper"]["classification"], scoring=obj.get("scoring", "full"),
                lam=obj.get("lambda"), diagnostics=obj.get("diagnostics", {}), schema_version=version,
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed model file: missing or invalid field {exc}") from None


def _coords(sites: SiteSet) -> list:
    return [list(map(float, c)) for c in np.asarray(sites.coords, dtype=float)]


def model_from_fit(fit: FitResult, sites: SiteSet, classify_taper: TaperSpec, diagnostics=None) -> ModelFile:
    d = fit.delta_hat
    nz = np.flatnonzero(d)
    support = nz if (fit.method in ("pmle", "preg") and nz.size) else np.arange(d.size)
    th = fit.theta_hat
    theta = {"family": family_name(th.nu), "nu": th.nu if np.isfinite(th.nu) else None,
             "sigma2": th.sigma2, "nugget": th.nugget, "range": th.range}
    return ModelFile(fit.method, list(sites.ids), _coords(sites), sites.dim, list(nz + 1), list(d[nz]),
                     list(fit.ybar), fit.tau1, fit.tau2, list(support + 1), theta=theta,
                     estimation_taper=_taper_width(fit.taper), classify_taper=_taper_width(classify_taper),
                     lam=fit.lambda_used, diagnostics=diagnostics or {})


def model_from_independence(model: DiscriminantModel, data: LabeledDataset, sites: SiteSet,
                            diagnostics=None) -> ModelFile:
    d = model.delta
    nz = np.flatnonzero(d)
    ybar = data.tau1 * model.mu1 + data.tau2 * model.mu2
    return ModelFile(model.method, list(sites.ids), _coords(sites), sites.dim, list(nz + 1), list(d[nz]),
                     list(ybar), data.tau1, data.tau2, list(model.subset + 1), variances=list(model.variances),
                     diagnostics=diagnostics or {})


def save_model(mf: ModelFile, path) -> None:
    Path(path).write_text(json.dumps(mf.to_json(), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> ModelFile:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    return ModelFile.from_json(obj)
