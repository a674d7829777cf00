"""Spatial site configurations and pairwise distances."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform


class SiteError(ValueError):
    """Invalid site configuration or sites file."""


@dataclass(frozen=True)
class SiteSet:
    """The p feature locations.

    ``coords`` is a (p, dim) float array, ``ids`` a tuple of unique strings.
    """

    dim: int
    coords: np.ndarray
    ids: tuple

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float, ndmin=2)
        if coords.ndim != 2 or coords.shape[1] != self.dim:
            raise SiteError(f"coords must have shape (p, {self.dim}), got {coords.shape}")
        if self.dim not in (1, 2, 3):
            raise SiteError(f"dim must be 1, 2 or 3, got {self.dim}")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != coords.shape[0]:
            raise SiteError(f"{len(ids)} ids for {coords.shape[0]} sites")
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise SiteError(f"duplicate site id {dup!r}")
        if coords.shape[0] > 1 and pdist(coords).min() <= 0:
            raise SiteError("duplicated site coordinates (zero pairwise distance)")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "ids", ids)

    @property
    def p(self) -> int:
        return self.coords.shape[0]

    def __len__(self):
        return self.p

    def index_of(self, site_ids) -> np.ndarray:
        """Positions of ``site_ids`` within this set (raises on unknown ids)."""
        lookup = {s: k for k, s in enumerate(self.ids)}
        try:
            return np.array([lookup[str(s)] for s in site_ids], dtype=int)
        except KeyError as exc:
            raise SiteError(f"unknown site id {exc.args[0]!r}") from None


@dataclass(frozen=True)
class DistanceMatrix:
    """Dense symmetric matrix of Euclidean distances, zero diagonal."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float, ndmin=2)
        if v.shape[0] != v.shape[1]:
            raise SiteError(f"distance matrix must be square, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def p(self) -> int:
        return self.values.shape[0]

    def offdiag(self) -> np.ndarray:
        """Upper-triangular off-diagonal distances as a flat array."""
        return self.values[np.triu_indices(self.p, k=1)]

    def nearest_neighbor_spacing(self) -> float:
        """Median over sites of the distance to the closest other site."""
        if self.p < 2:
            return 1.0
        d = self.values + np.diag(np.full(self.p, np.inf))
        return float(np.median(d.min(axis=1)))


def build_grid(u: int, dim: int = 2, spacing: float = 1.0) -> SiteSet:
    """Regular lattice with ``u**dim`` sites.

    Numbering is column-major starting at the lower-left corner: the first
    coordinate is the slowest index, so on a 4x4 grid site 1 is (0, 0),
    site 2 is (0, 1) and site 5 is (1, 0). Ids are the 1-based site numbers.
    """
    if int(u) != u or u < 1:
        raise SiteError(f"grid side u must be a positive integer, got {u}")
    if dim not in (1, 2, 3):
        raise SiteError(f"dim must be 1, 2 or 3, got {dim}")
    if not spacing > 0:
        raise SiteError(f"spacing must be positive, got {spacing}")
    axes = [np.arange(int(u), dtype=float) * spacing] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.column_stack([m.ravel() for m in mesh])
    ids = tuple(str(k + 1) for k in range(coords.shape[0]))
    return SiteSet(dim, coords, ids)


def pairwise_distances(sites: SiteSet) -> DistanceMatrix:
    if sites.p == 1:
        return DistanceMatrix(np.zeros((1, 1)))
    return DistanceMatrix(squareform(pdist(sites.coords)))


def load_sites(path, format: str = "csv") -> SiteSet:
    """Read a sites CSV with header ``id,x,y`` or ``id,x,y,z`` (or ``id,x``)."""
    if format != "csv":
        raise SiteError(f"unsupported sites format {format!r}")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SiteError(f"{path}: empty sites file") from None
        allowed = (["id", "x"], ["id", "x", "y"], ["id", "x", "y", "z"])
        if header not in allowed:
            raise SiteError(f"{path}: header must be id,x[,y[,z]], got {','.join(header)}")
        dim = len(header) - 1
        ids, coords = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SiteError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                coords.append([float(c) for c in row[1:]])
            except ValueError:
                raise SiteError(f"{path}:{lineno}: non-numeric coordinate in {row!r}") from None
            ids.append(row[0].strip())
    if not ids:
        raise SiteError(f"{path}: no sites")
    return SiteSet(dim, np.array(coords), tuple(ids))


def write_sites(sites: SiteSet, path) -> None:
    names = ["x", "y", "z"][: sites.dim]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *names])
        for sid, pt in zip(sites.ids, sites.coords):
            w.writerow([sid, *(repr(float(v)) for v in pt)])
