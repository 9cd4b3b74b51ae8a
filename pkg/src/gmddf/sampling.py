"""Importance-sampling machinery for quotient-mixand moment estimation.

A WeightedSampleSet stores points with unnormalized weights (optionally
rescaled by a log factor for range safety) plus the cached log densities
needed to reweight without touching the underlying mixtures again. The
omega search for conservative fusion draws its samples exactly once and
only reweights afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import EstimateUnreliableError, UnnormalizedMixtureError
from .gaussians import GaussianComponent, GaussianMixture
from .quotient import QuotientMixand, foci_fuse

__all__ = [
    "WeightedSampleSet",
    "WepObjective",
    "ProposalConfig",
    "ess",
    "importance_moments",
    "ingis_proposal",
    "heavy_tail_proposal",
    "wep_log_eval",
    "wep_eval",
    "optimize_omega",
    "chernoff_estimate",
    "minimax_estimate",
]

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def ess(weights) -> float:
    """Effective sample size N/(1 + cv^2) of unnormalized importance weights,
    with cv^2 the coefficient of variation sum((w - wbar)^2)/((N-1) wbar^2)."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.shape[0] < 2:
        raise ValueError("ESS needs at least two weights")
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    wbar = w.mean()
    if wbar == 0.0:
        raise ValueError("all importance weights are zero")
    n = w.shape[0]
    cv2 = float(np.sum((w - wbar) ** 2) / ((n - 1) * wbar * wbar))
    return n / (1.0 + cv2)


@dataclass(frozen=True)
class WeightedSampleSet:
    """Importance samples with weights; true weight = weights * exp(log_scale)."""

    points: np.ndarray
    weights: np.ndarray
    log_scale: float = 0.0
    log_proposal: np.ndarray | None = None
    log_p_i: np.ndarray | None = None
    log_p_j: np.ndarray | None = None
    numerator_logpdfs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights length mismatch")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        for name, arr in (("points", pts), ("weights", w)):
            object.__setattr__(self, name, arr)
        for name in ("log_proposal", "log_p_i", "log_p_j"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float).reshape(-1)
                if arr.shape[0] != pts.shape[0]:
                    raise ValueError(f"{name} length mismatch")
                object.__setattr__(self, name, arr)
        if self.numerator_logpdfs is not None:
            cache = np.asarray(self.numerator_logpdfs, dtype=float)
            if cache.shape[1] != pts.shape[0]:
                raise ValueError("numerator cache column count must match sample count")
            object.__setattr__(self, "numerator_logpdfs", cache)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def ess(self) -> float:
        return ess(self.weights)

    def normalized_weights(self) -> np.ndarray:
        total = self.weights.sum()
        if total <= 0.0:
            raise ValueError("all importance weights are zero")
        return self.weights / total

    def wep_log_weights(self, omega: float) -> np.ndarray:
        """Reweight the cached densities for a new exponent; no new evaluations."""
        if self.log_p_i is None or self.log_p_j is None or self.log_proposal is None:
            raise ValueError("sample set does not carry cached p_i/p_j/proposal values")
        return omega * self.log_p_i + (1.0 - omega) * self.log_p_j - self.log_proposal

    def at_omega(self, omega: float) -> "WeightedSampleSet":
        log_theta = self.wep_log_weights(omega)
        shift = float(log_theta.max())
        return WeightedSampleSet(
            points=self.points,
            weights=np.exp(log_theta - shift),
            log_scale=shift,
            log_proposal=self.log_proposal,
            log_p_i=self.log_p_i,
            log_p_j=self.log_p_j,
            numerator_logpdfs=self.numerator_logpdfs,
        )


@dataclass(frozen=True)
class WepObjective:
    """Conservative-fusion rule: 'chernoff' or 'minimax' (with optional pinned kappa)."""

    rule: str = "minimax"
    kappa: float | None = None

    def __post_init__(self):
        if self.rule not in ("chernoff", "minimax"):
            raise ValueError(f"unknown WEP rule {self.rule!r}")
        if self.kappa is not None and not np.isfinite(self.kappa):
            raise ValueError("kappa must be finite")


@dataclass(frozen=True)
class ProposalConfig:
    """Per-mixand proposal family for direct local sampling."""

    kind: str = "ingis"  # ingis | lagis | heavy-tail
    n_samples: int = 500
    alpha: float = 5.0
    scales: tuple[float, ...] | None = None
    scale_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("ingis", "lagis", "heavy-tail"):
            raise ValueError(f"unknown proposal kind {self.kind!r}")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be > 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.scales is not None:
            if any(s < 1.0 for s in self.scales):
                raise ValueError("heavy-tail scales must be >= 1")
            if self.scale_weights is not None:
                if len(self.scale_weights) != len(self.scales):
                    raise ValueError("scale weight count mismatch")
                if abs(sum(self.scale_weights) - 1.0) > 1e-9:
                    raise ValueError("scale weights must sum to 1")


def importance_moments(target_logpdf, proposal: GaussianMixture, n_samples: int, rng):
    """Zeroth/first/second moments of an unnormalized target via importance sampling.

    Returns (w_star, mu_star, sigma_star, sample_set): w_star is the sample
    mean of target/proposal (the target's unnormalized mass), mu_star and
    sigma_star are self-normalized. sigma_star is symmetrized and its
    eigenvalues floored at 1e-10.
    """
    if not proposal.is_normalized:
        raise UnnormalizedMixtureError("proposal must be normalized")
    x = proposal.sample(n_samples, rng)
    log_q = proposal.logpdf(x)
    log_t = np.asarray(target_logpdf(x), dtype=float).reshape(-1)
    log_theta = log_t - log_q
    shift = float(np.max(log_theta))
    if not np.isfinite(shift):
        raise EstimateUnreliableError("all importance weights underflowed", ess=0.0)
    w = np.exp(log_theta - shift)
    sample_ess = ess(w)
    sset = WeightedSampleSet(points=x, weights=w, log_scale=shift, log_proposal=log_q)
    if sample_ess < 2.0:
        raise EstimateUnreliableError(
            f"effective sample size {sample_ess:.3f} < 2", ess=sample_ess
        )
    w_star = float(np.exp(shift) * w.mean())
    wsum = w.sum()
    mu = (w @ x) / wsum
    centered = x - mu
    cov = (centered.T * w) @ centered / wsum
    cov = 0.5 * (cov + cov.T)
    eigs, vecs = np.linalg.eigh(cov)
    cov = (vecs * np.maximum(eigs, 1e-10)) @ vecs.T
    return w_star, mu, 0.5 * (cov + cov.T), sset


def ingis_proposal(m: QuotientMixand, alpha: float) -> GaussianMixture:
    """Inflated naive Gaussian: numerator mean with the largest-determinant
    covariance among the two parent components and alpha * I."""
    if alpha <= 0.0:
        raise ValueError("alpha must be > 0")
    if m.src_i is None or m.src_j is None:
        raise ValueError("mixand lacks source component references")
    dim = m.numerator.dim
    candidates = [m.src_i.cov, m.src_j.cov, alpha * np.eye(dim)]
    dets = [np.linalg.det(c) for c in candidates]
    cov = candidates[int(np.argmax(dets))]
    return GaussianMixture([GaussianComponent(1.0, m.numerator.mean, cov)])


def heavy_tail_proposal(mean, cov, scales, weights=None) -> GaussianMixture:
    """Scale mixture sum_c beta_c N(mean, xi_c * cov) with xi_c >= 1."""
    scales = [float(s) for s in scales]
    if any(s < 1.0 for s in scales):
        raise ValueError("scales must be >= 1")
    if weights is None:
        weights = [1.0 / len(scales)] * len(scales)
    if len(weights) != len(scales) or abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("weights must match scales and sum to 1")
    cov = np.asarray(cov, dtype=float)
    return GaussianMixture(
        [GaussianComponent(b, mean, xi * cov) for b, xi in zip(weights, scales)]
    )


def wep_log_eval(p_i: GaussianMixture, p_j: GaussianMixture, omega: float, x) -> np.ndarray:
    """Log of the unnormalized weighted exponential product p_i^omega p_j^(1-omega)."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    return omega * p_i.logpdf(x) + (1.0 - omega) * p_j.logpdf(x)


def wep_eval(p_i, p_j, omega, x) -> np.ndarray:
    return np.exp(wep_log_eval(p_i, p_j, omega, x))


def chernoff_estimate(sset: WeightedSampleSet, omega: float) -> float:
    """Sampled Chernoff objective: the plain sum of reweighted theta values."""
    return float(np.exp(logsumexp(sset.wep_log_weights(omega))))


def minimax_estimate(sset: WeightedSampleSet, omega: float, kappa: float) -> float:
    """Sampled minimax information-loss objective (additive constant dropped):
    omega * kappa + log sum theta."""
    return float(omega * kappa + logsumexp(sset.wep_log_weights(omega)))


def estimate_kappa(sset: WeightedSampleSet) -> float:
    """IS estimate of integral p_i p_j log(p_j / p_i) using the cached densities."""
    log_f = sset.log_p_i + sset.log_p_j - sset.log_proposal
    shift = float(log_f.max())
    return float(np.exp(shift) * np.mean(np.exp(log_f - shift) * (sset.log_p_j - sset.log_p_i)))


def golden_section_iterations(tol: float) -> int:
    return int(math.ceil(math.log(tol) / math.log(_INVPHI)))


def optimize_omega(
    p_i: GaussianMixture,
    p_j: GaussianMixture,
    rule: WepObjective,
    n_samples: int,
    rng,
    tol: float = 1e-3,
    proposal_omega: float = 0.5,
) -> tuple[float, WeightedSampleSet]:
    """Sample-once stochastic search for the conservative-fusion exponent.

    Draws one sample set from the pairwise precision-blend proposal at
    proposal_omega, caches per-sample log densities, then golden-section
    searches omega in [0, 1], reweighting the cached values at each probe.
    Returns (omega_star, sample set reweighted at omega_star).
    """
    if isinstance(rule, str):
        rule = WepObjective(rule)
    if n_samples < 100:
        raise ValueError("omega optimization needs at least 100 samples")
    if not 0.0 < tol <= 0.1:
        raise ValueError("tol must lie in (0, 0.1]")
    proposal = foci_fuse(p_i, p_j, proposal_omega)
    x = proposal.sample(n_samples, rng)
    base = WeightedSampleSet(
        points=x,
        weights=np.ones(n_samples),
        log_proposal=proposal.logpdf(x),
        log_p_i=p_i.logpdf(x),
        log_p_j=p_j.logpdf(x),
    )
    if rule.rule == "minimax":
        kappa = rule.kappa if rule.kappa is not None else estimate_kappa(base)

        def objective(om: float) -> float:
            return float(om * kappa + logsumexp(base.wep_log_weights(om)))

    else:

        def objective(om: float) -> float:
            # log of the Chernoff sum: same minimizer, safe range.
            return float(logsumexp(base.wep_log_weights(om)))

    a, b = 0.0, 1.0
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = objective(c), objective(d)
    if not (np.isfinite(fc) or np.isfinite(fd)):
        raise ValueError("WEP objective is non-finite at both initial bracket points")
    for _ in range(golden_section_iterations(tol)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = objective(d)
    omega_star = 0.5 * (a + b)
    return omega_star, base.at_omega(omega_star)
