"""Gaussian and Gaussian-mixture primitives.

Components cache their Cholesky factor, log-determinant, and precision at
construction and are immutable afterwards; every density computation runs
in log space. Linear-space densities are floored at exp(LOG_FLOOR) so
downstream ratios never divide by an exact zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

from .errors import (
    DegenerateCovarianceError,
    DensityUnderflowError,
    DimensionMismatchError,
    UnnormalizedMixtureError,
)

__all__ = [
    "LOG_FLOOR",
    "GaussianComponent",
    "GaussianMixture",
    "RandomProblemConfig",
    "gaussian_product",
    "gaussian_product_log",
    "mixture_moments",
    "random_gm",
    "gm_from_dict",
    "gm_to_dict",
    "load_gm",
    "save_gm",
]

LOG_FLOOR = -700.0
_LOG_2PI = float(np.log(2.0 * np.pi))

# Construction-time guards.
_SYM_RTOL = 1e-12
_MAX_CONDITION = 1e12
_NORM_TOL = 1e-10


def _check_covariance(cov: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Validate an SPD covariance; return (chol_lower, log_det, precision)."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DegenerateCovarianceError(f"covariance must be square, got shape {cov.shape}")
    scale = max(1.0, float(np.abs(cov).max()))
    if float(np.abs(cov - cov.T).max()) > _SYM_RTOL * scale:
        raise DegenerateCovarianceError("covariance is not symmetric within 1e-12 relative")
    cov = 0.5 * (cov + cov.T)
    eigs = np.linalg.eigvalsh(cov)
    if eigs[0] <= 0.0:
        raise DegenerateCovarianceError(f"covariance not positive definite (min eig {eigs[0]:.3e})")
    if eigs[-1] / eigs[0] > _MAX_CONDITION:
        raise DegenerateCovarianceError(
            f"covariance condition number {eigs[-1] / eigs[0]:.3e} exceeds {_MAX_CONDITION:.0e}"
        )
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - eig check should catch first
        raise DegenerateCovarianceError("Cholesky factorization failed") from exc
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    prec = cho_solve((chol, True), np.eye(cov.shape[0]))
    prec = 0.5 * (prec + prec.T)
    return chol, log_det, prec


@dataclass(frozen=True)
class GaussianComponent:
    """One weighted Gaussian: weight * N(mean, cov), with cached factorization."""

    weight: float
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(repr=False, default=None)
    log_det: float = field(repr=False, default=None)
    prec: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        chol, log_det, prec = _check_covariance(self.cov)
        cov = chol @ chol.T
        if mean.shape[0] != cov.shape[0]:
            raise DimensionMismatchError(
                f"mean has dim {mean.shape[0]} but covariance is {cov.shape[0]}x{cov.shape[0]}"
            )
        if not np.isfinite(self.weight) or self.weight < 0.0:
            raise ValueError(f"component weight must be finite and >= 0, got {self.weight}")
        for name, value in (
            ("mean", mean), ("cov", cov), ("chol", chol), ("log_det", log_det), ("prec", prec),
        ):
            object.__setattr__(self, name, value)
        for arr in (self.mean, self.cov, self.chol, self.prec):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        """Log N(x; mean, cov) for x of shape (d,) or (n, d). Weight not included."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[1] != self.dim:
            raise DimensionMismatchError(f"points have dim {pts.shape[1]}, component has {self.dim}")
        y = solve_triangular(self.chol, (pts - self.mean).T, lower=True)
        quad = np.einsum("ij,ij->j", y, y)
        out = -0.5 * (self.dim * _LOG_2PI + self.log_det + quad)
        return float(out[0]) if single else out

    def pdf(self, x: np.ndarray) -> np.ndarray:
        lp = self.logpdf(x)
        return np.exp(np.maximum(lp, LOG_FLOOR))


class GaussianMixture:
    """Weighted sum of Gaussian components sharing one dimension.

    Weights may be unnormalized where an operation explicitly allows it;
    ``is_normalized`` / ``normalized()`` make the state explicit.
    """

    def __init__(self, components):
        components = tuple(components)
        if not components:
            raise ValueError("mixture needs at least one component")
        dim = components[0].dim
        for c in components:
            if c.dim != dim:
                raise DimensionMismatchError("all components must share one dimension")
        self.components = components
        self.dim = dim
        self.weights = np.array([c.weight for c in components])
        self.weights.setflags(write=False)
        wsum = float(self.weights.sum())
        if wsum <= 0.0:
            raise ValueError("mixture weights sum to zero")
        self.weight_sum = wsum
        with np.errstate(divide="ignore"):
            self._log_weights = np.where(self.weights > 0.0, np.log(self.weights), -np.inf)
        self.means = np.stack([c.mean for c in components])
        self.covs = np.stack([c.cov for c in components])
        for arr in (self.means, self.covs, self._log_weights):
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, weights, means, covs) -> "GaussianMixture":
        return cls([GaussianComponent(w, m, c) for w, m, c in zip(weights, means, covs)])

    def __len__(self) -> int:
        return len(self.components)

    def __repr__(self) -> str:
        return f"GaussianMixture(dim={self.dim}, n_components={len(self)})"

    @property
    def is_normalized(self) -> bool:
        return abs(self.weight_sum - 1.0) <= _NORM_TOL

    def normalized(self) -> "GaussianMixture":
        if self.is_normalized:
            return self
        return GaussianMixture.from_arrays(self.weights / self.weight_sum, self.means, self.covs)

    def _require_normalized(self, op: str):
        if not self.is_normalized:
            raise UnnormalizedMixtureError(
                f"{op} requires a normalized mixture (weights sum to {self.weight_sum:.6g})"
            )

    def component_logpdfs(self, x: np.ndarray) -> np.ndarray:
        """(M, n) matrix of per-component log N(x_s; mu_q, Sigma_q), weights excluded."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        if pts.shape[1] != self.dim:
            raise DimensionMismatchError(f"points have dim {pts.shape[1]}, mixture has {self.dim}")
        out = np.empty((len(self), pts.shape[0]))
        for q, c in enumerate(self.components):
            out[q] = c.logpdf(pts)
        return out

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        """Stable log of the mixture density at x, shape (d,) -> scalar or (n, d) -> (n,)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        comp = self.component_logpdfs(x)
        out = logsumexp(comp + self._log_weights[:, None], axis=0)
        return float(out[0]) if single else out

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(np.maximum(self.logpdf(x), LOG_FLOOR))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n points: categorical over weights, then the chosen Gaussian."""
        self._require_normalized("sample")
        if n < 0:
            raise ValueError("sample count must be >= 0")
        if n == 0:
            return np.empty((0, self.dim))
        idx = rng.choice(len(self), size=n, p=self.weights / self.weight_sum)
        z = rng.standard_normal((n, self.dim))
        chols = np.stack([c.chol for c in self.components])
        return self.means[idx] + np.einsum("nij,nj->ni", chols[idx], z)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        return mixture_moments(self)

    def log_derivatives(
        self, x: np.ndarray, floor: float | None = LOG_FLOOR
    ) -> tuple[float, np.ndarray, np.ndarray]:
        """(log p(x), gradient, Hessian) of the log mixture density at one point.

        grad = sum_q r_q Sigma_q^-1 (mu_q - x) with responsibilities r_q;
        Hessian assembled from per-component terms. Raises
        DensityUnderflowError when log p(x) < floor (floor=None accepts any
        finite value; useful for optimizers that legitimately probe far tails).
        """
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.dim:
            raise DimensionMismatchError(f"point has dim {x.shape[0]}, mixture has {self.dim}")
        comp_log = self.component_logpdfs(x[None, :])[:, 0] + self._log_weights
        log_p = float(logsumexp(comp_log))
        if not np.isfinite(log_p) or (floor is not None and log_p < floor):
            raise DensityUnderflowError(f"mixture density underflowed at x={x}")
        r = np.exp(comp_log - log_p)
        precs = np.stack([c.prec for c in self.components])
        y = np.einsum("qij,qj->qi", precs, self.means - x)
        grad = r @ y
        hess = (
            np.einsum("q,qi,qj->ij", r, y, y)
            - np.einsum("q,qij->ij", r, precs)
            - np.outer(grad, grad)
        )
        return log_p, grad, 0.5 * (hess + hess.T)


def gaussian_product_log(a: GaussianComponent, b: GaussianComponent) -> tuple[GaussianComponent, float]:
    """Product of two Gaussian densities as (unit-weight Gaussian, log zbar).

    N_a(x) N_b(x) = zbar * N(x; mu_ab, Sigma_ab) with
    Sigma_ab = (Sigma_a^-1 + Sigma_b^-1)^-1 and zbar = N(mu_a; mu_b, Sigma_a + Sigma_b).
    Callers multiply w_a * w_b * zbar for the product weight.
    """
    if a.dim != b.dim:
        raise DimensionMismatchError("product requires equal dimensions")
    s = a.cov + b.cov
    try:
        chol_s = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError("covariance sum is singular") from exc
    # Sigma_ab = Sigma_a (Sigma_a + Sigma_b)^-1 Sigma_b avoids explicit precisions.
    sinv_b = cho_solve((chol_s, True), b.cov)
    cov = a.cov @ sinv_b
    cov = 0.5 * (cov + cov.T)
    mean = b.cov @ cho_solve((chol_s, True), a.mean) + a.cov @ cho_solve((chol_s, True), b.mean)
    diff = solve_triangular(chol_s, a.mean - b.mean, lower=True)
    log_det_s = 2.0 * float(np.sum(np.log(np.diag(chol_s))))
    log_zbar = -0.5 * (a.dim * _LOG_2PI + log_det_s + float(diff @ diff))
    return GaussianComponent(1.0, mean, cov), log_zbar


def gaussian_product(a: GaussianComponent, b: GaussianComponent) -> tuple[GaussianComponent, float]:
    """Like gaussian_product_log but returns zbar in linear space."""
    comp, log_zbar = gaussian_product_log(a, b)
    return comp, float(np.exp(max(log_zbar, LOG_FLOOR)))


def mixture_moments(gm: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of a normalized mixture (moment matching)."""
    gm._require_normalized("mixture_moments")
    w = gm.weights / gm.weight_sum
    mean = w @ gm.means
    cov = np.einsum("q,qij->ij", w, gm.covs) + np.einsum("q,qi,qj->ij", w, gm.means, gm.means)
    cov -= np.outer(mean, mean)
    return mean, 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class RandomProblemConfig:
    """Generator settings for synthetic mixture problems.

    Covariances are drawn as W ~ Wishart(dof, scale * I), giving expected
    covariance dof * scale * I. Set ``normalize_by_dof`` to use W / dof
    instead; the raw-draw default keeps component overlap high enough for
    the sampling engines at benchmark budgets.
    """

    dim: int = 2
    components: tuple[int, int] = (10, 11)
    mean_low: float = -14.0
    mean_high: float = 14.0
    wishart_dof: int = 10
    wishart_scale: float = 0.75
    normalize_by_dof: bool = False

    def __post_init__(self):
        if self.wishart_dof < self.dim:
            raise ValueError("Wishart dof must be >= dim")
        if not self.mean_low < self.mean_high:
            raise ValueError("mean box must have low < high")
        lo, hi = self.components
        if not (1 <= lo <= hi):
            raise ValueError("component count range must satisfy 1 <= low <= high")


def wishart_sample(dof: int, dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """One draw W ~ Wishart(dof, scale * I) via the Bartlett decomposition."""
    a = np.zeros((dim, dim))
    for i in range(dim):
        a[i, i] = np.sqrt(rng.chisquare(dof - i))
        for j in range(i):
            a[i, j] = rng.standard_normal()
    l = np.sqrt(scale) * a
    return l @ l.T


def random_gm(cfg: RandomProblemConfig, rng: np.random.Generator) -> GaussianMixture:
    """Random mixture: uniform count, uniform means in the box, uniform weights
    renormalized, covariances from the configured Wishart convention."""
    lo, hi = cfg.components
    m = int(rng.integers(lo, hi + 1))
    means = rng.uniform(cfg.mean_low, cfg.mean_high, size=(m, cfg.dim))
    weights = rng.uniform(0.0, 1.0, size=m)
    weights = weights / weights.sum()
    divisor = cfg.wishart_dof if cfg.normalize_by_dof else 1.0
    covs = [
        wishart_sample(cfg.wishart_dof, cfg.dim, cfg.wishart_scale, rng) / divisor
        for _ in range(m)
    ]
    return GaussianMixture.from_arrays(weights, means, covs)


def gm_to_dict(gm: GaussianMixture) -> dict:
    return {
        "dim": gm.dim,
        "components": [
            {"weight": float(c.weight), "mean": c.mean.tolist(), "cov": c.cov.tolist()}
            for c in gm.components
        ],
    }


def gm_from_dict(obj: dict) -> tuple[GaussianMixture, float]:
    """Parse the GM JSON schema; returns (normalized mixture, original weight sum)."""
    try:
        dim = int(obj["dim"])
        comps = obj["components"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed GM object: {exc}") from exc
    components = []
    for i, c in enumerate(comps):
        try:
            components.append(GaussianComponent(float(c["weight"]), c["mean"], c["cov"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed GM component {i}: {exc}") from exc
    gm = GaussianMixture(components)
    if gm.dim != dim:
        raise DimensionMismatchError(f"declared dim {dim} but components have dim {gm.dim}")
    return gm.normalized(), gm.weight_sum


def load_gm(path) -> tuple[GaussianMixture, float]:
    with open(path) as fh:
        return gm_from_dict(json.load(fh))


def save_gm(gm: GaussianMixture, path):
    with open(path, "w") as fh:
        json.dump(gm_to_dict(gm), fh, indent=2)
        fh.write("\n")
