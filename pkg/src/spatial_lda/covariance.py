"""Matérn covariance family, Wendland taper and covariance-matrix assembly.

The Matérn correlation is used without the sqrt(2 nu) rescaling of the
distance,

    rho(h) = 2^(1 - nu) / Gamma(nu) * (h / r)^nu * K_nu(h / r),

so nu = 1/2 is exp(-h/r) and the closed forms for nu = 3/2, 5/2 are
(1 + x) e^-x and (1 + x + x^2/3) e^-x with x = h / r. ``nu = inf`` is the
Gaussian kernel exp(-h^2 / r^2).

The nugget enters as gamma(0) = sigma2 and gamma(h) = sigma2 (1 - c) rho(h)
for h > 0, so every covariance matrix has sigma2 on its diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln, kv

from .geometry import DistanceMatrix

FAMILIES = {"exp": 0.5, "matern32": 1.5, "matern52": 2.5, "gauss": math.inf}
CLOSED_FORM_NU = (0.5, 1.5, 2.5, math.inf)

# Fraction of nonzeros below which tapered matrices are stored sparse.
SPARSE_DENSITY = 0.30


class CovarianceError(ValueError):
    pass


def family_nu(family) -> float:
    """Smoothness for a family name (``exp``, ``matern32``, ``matern52``,
    ``gauss``) or ``matern:<nu>`` for a general positive smoothness."""
    if isinstance(family, (int, float)):
        nu = float(family)
    elif family in FAMILIES:
        nu = FAMILIES[family]
    elif isinstance(family, str) and family.startswith("matern:"):
        nu = float(family.split(":", 1)[1])
    else:
        raise CovarianceError(f"unknown covariance family {family!r}")
    if not nu > 0:
        raise CovarianceError(f"smoothness must be positive, got {nu}")
    return nu


def family_name(nu: float) -> str:
    for name, v in FAMILIES.items():
        if v == nu:
            return name
    return f"matern:{nu!r}"


@dataclass(frozen=True)
class CovParams:
    sigma2: float
    nugget: float
    range: float
    nu: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise CovarianceError(f"sigma2 must be > 0, got {self.sigma2}")
        if not 0 <= self.nugget < 1:
            raise CovarianceError(f"nugget must lie in [0, 1), got {self.nugget}")
        if not (np.isfinite(self.range) and self.range > 0):
            raise CovarianceError(f"range must be > 0, got {self.range}")
        if not self.nu > 0:
            raise CovarianceError(f"smoothness must be > 0, got {self.nu}")

    @property
    def family(self) -> str:
        return family_name(self.nu)

    def to_free(self) -> np.ndarray:
        """Unconstrained coordinates (log sigma2, logit c, log r)."""
        c = min(max(self.nugget, 1e-12), 1 - 1e-12)
        return np.array([math.log(self.sigma2), math.log(c / (1 - c)), math.log(self.range)])

    @classmethod
    def from_free(cls, x, nu: float = 0.5) -> "CovParams":
        x = np.asarray(x, dtype=float)
        c = 1.0 / (1.0 + math.exp(-x[1])) if x[1] > -700 else 0.0
        return cls(math.exp(x[0]), min(c, 1 - 1e-15), math.exp(x[2]), nu)

    def as_vector(self) -> np.ndarray:
        return np.array([self.sigma2, self.nugget, self.range])

    def with_sigma2(self, sigma2: float) -> "CovParams":
        return replace(self, sigma2=float(sigma2))


@dataclass(frozen=True)
class TaperSpec:
    """Taper width ``w``; ``None`` means no taper."""

    width: float | None = None

    def __post_init__(self):
        if self.width is not None and not self.width > 0:
            raise CovarianceError(f"taper width must be > 0, got {self.width}")

    @property
    def active(self) -> bool:
        return self.width is not None and np.isfinite(self.width)


NO_TAPER = TaperSpec(None)


def correlation(h, nu: float, r: float):
    """Matérn correlation rho(h) for h >= 0 (rho(0) = 1)."""
    h = np.asarray(h, dtype=float)
    x = h / r
    if nu == 0.5:
        return np.exp(-x)
    if nu == 1.5:
        return (1.0 + x) * np.exp(-x)
    if nu == 2.5:
        return (1.0 + x + x * x / 3.0) * np.exp(-x)
    if math.isinf(nu):
        return np.exp(-x * x)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        logk = (1.0 - nu) * math.log(2.0) - gammaln(nu)
        out = np.exp(logk + nu * np.log(x)) * kv(nu, x)
    out = np.where(x == 0, 1.0, out)
    # kv underflows to 0 far out; x^nu overflow gives nan there
    return np.where(np.isfinite(out), out, 0.0)


def _dcorr_drange(h, nu: float, r: float):
    x = np.asarray(h, dtype=float) / r
    if nu == 0.5:
        return x * np.exp(-x) / r
    if nu == 1.5:
        return x * x * np.exp(-x) / r
    if nu == 2.5:
        return x * x * (1.0 + x) * np.exp(-x) / (3.0 * r)
    if math.isinf(nu):
        return 2.0 * x * x * np.exp(-x * x) / r
    # d/dx [x^nu K_nu(x)] = -x^nu K_{nu-1}(x) and dx/dr = -x/r
    logk = (1.0 - nu) * math.log(2.0) - gammaln(nu)
    return np.exp(logk + (nu + 1.0) * np.log(x)) * kv(nu - 1.0, x) / r


def matern(h, params: CovParams):
    """Covariance gamma(h); accepts scalars or arrays of lags."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise CovarianceError("distances must be nonnegative")
    val = params.sigma2 * (1.0 - params.nugget) * correlation(h, params.nu, params.range)
    out = np.where(h == 0, params.sigma2, val)
    return float(out) if out.ndim == 0 else out


def matern_grad(h, params: CovParams) -> np.ndarray:
    """Partial derivatives (d/d sigma2, d/dc, d/dr) of gamma at lag h > 0.

    For array input the result has a trailing axis of length 3.
    """
    h = np.asarray(h, dtype=float)
    if np.any(h <= 0):
        raise CovarianceError("gradient is undefined at zero lag (nugget jump)")
    rho = correlation(h, params.nu, params.range)
    g = np.stack(
        [
            (1.0 - params.nugget) * rho,
            -params.sigma2 * rho,
            params.sigma2 * (1.0 - params.nugget) * _dcorr_drange(h, params.nu, params.range),
        ],
        axis=-1,
    )
    return g


def taper_weight(h, w: float):
    """Wendland taper [(1 - h/w)_+]^2."""
    if not w > 0:
        raise CovarianceError(f"taper width must be > 0, got {w}")
    t = np.clip(1.0 - np.asarray(h, dtype=float) / w, 0.0, None)
    out = t * t
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CovMatrix:
    """Assembled covariance; ``values`` is a dense array or a CSR matrix."""

    values: object
    params: CovParams
    taper: TaperSpec = NO_TAPER

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.values)

    def toarray(self) -> np.ndarray:
        return self.values.toarray() if self.is_sparse else self.values

    def scaled(self, alpha: float) -> "CovMatrix":
        return CovMatrix(self.values * alpha, self.params.with_sigma2(self.params.sigma2 * alpha), self.taper)


def correlation_matrix(dist: DistanceMatrix, params: CovParams, taper: TaperSpec = NO_TAPER) -> np.ndarray:
    """Dense Sigma(theta) / sigma2, taper included."""
    h = dist.values
    m = (1.0 - params.nugget) * correlation(h, params.nu, params.range)
    if taper.active:
        m = m * taper_weight(h, taper.width)
    np.fill_diagonal(m, 1.0)
    return m


def build_cov(dist: DistanceMatrix, params: CovParams, taper: TaperSpec = NO_TAPER) -> CovMatrix:
    m = params.sigma2 * correlation_matrix(dist, params, taper)
    if taper.active and dist.p > 1 and np.count_nonzero(m) < SPARSE_DENSITY * m.size:
        return CovMatrix(sp.csr_matrix(m), params, taper)
    return CovMatrix(m, params, taper)
