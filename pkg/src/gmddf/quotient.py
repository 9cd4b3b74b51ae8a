"""Fusion posterior as a mixture of Gaussian-over-common-information quotients.

The product of two mixtures divided by a common-information density expands
exactly into M^i * M^j quotient mixands, each a unit Gaussian numerator
scaled by an analytic pre-weight and divided by the shared denominator.
Closed-form baselines (moment-matched denominator, pairwise covariance
intersection, naive Bayes) and the component-wise weight upper bound used
for pruning live here as well.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import logsumexp

from .errors import (
    DegenerateCovarianceError,
    DimensionMismatchError,
    EmptyResultError,
)
from .gaussians import (
    LOG_FLOOR,
    GaussianComponent,
    GaussianMixture,
    gaussian_product_log,
    mixture_moments,
)

__all__ = [
    "ExactCommonInfo",
    "WepCommonInfo",
    "QuotientMixand",
    "QuotientPosterior",
    "expand_quotient",
    "gaussian_quotient_log",
    "weight_upper_bound",
    "log_weight_upper_bound",
    "prune_by_bound",
    "mmgd_fuse",
    "foci_fuse",
    "naive_bayes_fuse",
]

logger = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))


class ExactCommonInfo:
    """Common information known explicitly as a normalized mixture."""

    def __init__(self, gm: GaussianMixture):
        gm._require_normalized("ExactCommonInfo")
        self.gm = gm
        self.dim = gm.dim

    def log_density(self, x) -> np.ndarray:
        return self.gm.logpdf(x)

    def log_derivatives(self, x):
        return self.gm.log_derivatives(x, floor=None)


class WepCommonInfo:
    """Estimated common information [p_i]^(1-omega) [p_j]^omega.

    Never materialized as a mixture (a mixture raised to a real power is
    not a mixture); it is a pointwise-evaluable density only.
    """

    def __init__(self, p_i: GaussianMixture, p_j: GaussianMixture, omega: float):
        if not 0.0 <= omega <= 1.0:
            raise ValueError(f"omega must lie in [0, 1], got {omega}")
        if p_i.dim != p_j.dim:
            raise DimensionMismatchError("mixtures must share one dimension")
        self.p_i = p_i
        self.p_j = p_j
        self.omega = float(omega)
        self.dim = p_i.dim

    def log_density(self, x) -> np.ndarray:
        return (1.0 - self.omega) * self.p_i.logpdf(x) + self.omega * self.p_j.logpdf(x)

    def log_derivatives(self, x):
        li, gi, hi = self.p_i.log_derivatives(x, floor=None)
        lj, gj, hj = self.p_j.log_derivatives(x, floor=None)
        a, b = 1.0 - self.omega, self.omega
        return a * li + b * lj, a * gi + b * gj, a * hi + b * hj


@dataclass(frozen=True)
class QuotientMixand:
    """One fused mixand: pre_weight * N(x; mu_vr, Sigma_vr) / u(x)."""

    v: int
    r: int
    numerator: GaussianComponent
    log_pre_weight: float
    common: object
    src_i: GaussianComponent = field(repr=False, default=None)
    src_j: GaussianComponent = field(repr=False, default=None)

    @property
    def pre_weight(self) -> float:
        return float(np.exp(max(self.log_pre_weight, LOG_FLOOR)))

    def log_density(self, x) -> np.ndarray:
        """Log of the unnormalized mixand N(x)/u(x); u floored at exp(LOG_FLOOR)."""
        log_u = np.maximum(self.common.log_density(x), LOG_FLOOR)
        return self.numerator.logpdf(x) - log_u

    def density(self, x) -> np.ndarray:
        return np.exp(np.maximum(self.log_density(x), LOG_FLOOR))


def mixand_eval(m: QuotientMixand, x) -> np.ndarray:
    """Unnormalized quotient density at x, computed in log space."""
    return m.density(x)


class QuotientPosterior:
    """Exact fusion posterior: sum of pre-weighted quotient mixands.

    Evaluating sum_vr pre_weight * m_vr(x) reproduces p_i(x) p_j(x) / u(x)
    exactly (up to the global normalization the caller applies).
    """

    def __init__(self, mixands, p_i: GaussianMixture, p_j: GaussianMixture, common):
        mixands = tuple(mixands)
        if not mixands:
            raise EmptyResultError("posterior has no mixands")
        self.mixands = mixands
        self.p_i = p_i
        self.p_j = p_j
        self.common = common
        self.log_pre_weights = np.array([m.log_pre_weight for m in mixands])
        self.log_pre_weights.setflags(write=False)
        self.dim = p_i.dim

    def __len__(self) -> int:
        return len(self.mixands)

    def numerator_logpdfs(self, x) -> np.ndarray:
        """(M, n) log values of every mixand's numerator Gaussian at x."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty((len(self), pts.shape[0]))
        for z, m in enumerate(self.mixands):
            out[z] = m.numerator.logpdf(pts)
        return out

    def log_density(self, x) -> np.ndarray:
        """Log of the unnormalized posterior sum_vr pre_weight * m_vr(x)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        num = logsumexp(self.numerator_logpdfs(pts) + self.log_pre_weights[:, None], axis=0)
        log_u = np.maximum(self.common.log_density(pts), LOG_FLOOR)
        out = num - log_u
        return float(out[0]) if single else out

    def subset(self, indices) -> "QuotientPosterior":
        return QuotientPosterior(
            [self.mixands[i] for i in indices], self.p_i, self.p_j, self.common
        )


def expand_quotient(p_i: GaussianMixture, p_j: GaussianMixture, u) -> QuotientPosterior:
    """All-pairs expansion of p_i * p_j / u into quotient mixands."""
    if p_i.dim != p_j.dim or p_i.dim != u.dim:
        raise DimensionMismatchError("p_i, p_j, and u must share one dimension")
    mixands = []
    for v, ci in enumerate(p_i.components):
        for r, cj in enumerate(p_j.components):
            num, log_zbar = gaussian_product_log(ci, cj)
            log_w = float(np.log(ci.weight) + np.log(cj.weight) + log_zbar)
            mixands.append(
                QuotientMixand(
                    v=v, r=r, numerator=num, log_pre_weight=log_w,
                    common=u, src_i=ci, src_j=cj,
                )
            )
    return QuotientPosterior(mixands, p_i, p_j, u)


def gaussian_quotient_log(num: GaussianComponent, den: GaussianComponent):
    """Resolve N(x; num)/N(x; den) into (Gaussian, log scale), or None.

    Returns None when the precision difference is not positive definite (the
    quotient does not integrate). Otherwise
    N_num(x)/N_den(x) = exp(log_c) * N(x; mu_q, Sigma_q) pointwise.
    """
    prec = num.prec - den.prec
    prec = 0.5 * (prec + prec.T)
    try:
        chol_p = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        return None
    cov = cho_solve((chol_p, True), np.eye(prec.shape[0]))
    cov = 0.5 * (cov + cov.T)
    mean = cho_solve((chol_p, True), num.prec @ num.mean - den.prec @ den.mean)
    try:
        comp = GaussianComponent(1.0, mean, cov)
    except DegenerateCovarianceError:
        return None
    # Scale from pointwise evaluation at the quotient mean.
    log_c = float(
        num.logpdf(mean) - den.logpdf(mean) + 0.5 * (num.dim * _LOG_2PI + comp.log_det)
    )
    return comp, log_c


def log_weight_upper_bound(m: QuotientMixand) -> float:
    """Log of the component-wise bound on the mixand's unnormalized mass.

    For each common-information component t, m_vr(x) <= ratio_t(x)/w_t
    pointwise, so integral(m_vr) <= min_t integral(ratio_t)/w_t whenever
    the component-wise Gaussian quotient exists. +inf when no component
    yields a finite integral (the mixand cannot be pruned by this bound).
    """
    if not isinstance(m.common, ExactCommonInfo):
        raise TypeError("weight bound requires exact (mixture) common information")
    best = np.inf
    for t, ct in enumerate(m.common.gm.components):
        if ct.weight <= 0.0:
            continue
        quot = gaussian_quotient_log(m.numerator, GaussianComponent(1.0, ct.mean, ct.cov))
        if quot is None:
            continue
        _, log_c = quot
        best = min(best, log_c - float(np.log(ct.weight)))
    return best


def weight_upper_bound(m: QuotientMixand) -> float:
    """Linear-space bound on integral(m_vr); may be +inf."""
    lb = log_weight_upper_bound(m)
    return float(np.inf) if np.isinf(lb) else float(np.exp(lb))


def _log_density_peak_bound(gm: GaussianMixture) -> float:
    """Log of sum_t w_t * peak(N_t), an upper bound on the mixture density."""
    peaks = np.array(
        [
            np.log(c.weight) - 0.5 * (c.dim * _LOG_2PI + c.log_det)
            for c in gm.components
            if c.weight > 0.0
        ]
    )
    return float(logsumexp(peaks))


def log_mass_lower_bound(m: QuotientMixand) -> float:
    """Guaranteed log lower bound on the mixand's unnormalized mass:
    integral(N/u) >= pre_weight / max_x u(x)."""
    if not isinstance(m.common, ExactCommonInfo):
        raise TypeError("mass lower bound requires exact common information")
    return m.log_pre_weight - _log_density_peak_bound(m.common.gm)


def prune_by_bound(q: QuotientPosterior, threshold: float) -> QuotientPosterior:
    """Drop mixands whose bounded mass is a negligible fraction of the total.

    A mixand is pruned when its upper-bounded mass falls below threshold
    times the largest guaranteed mass lower bound over all mixands. Since
    the total mass is at least that reference, every pruned mixand provably
    holds less than a threshold fraction of the posterior. Mixands with an
    infinite (uninformative) bound are always kept.
    """
    if not isinstance(q.common, ExactCommonInfo):
        raise TypeError("bound pruning requires exact common information")
    if threshold < 0.0:
        raise ValueError("threshold must be >= 0")
    if threshold == 0.0:
        return q
    log_bounds = np.array(
        [m.log_pre_weight + log_weight_upper_bound(m) for m in q.mixands]
    )
    log_u_peak = _log_density_peak_bound(q.common.gm)
    ref = float(q.log_pre_weights.max()) - log_u_peak
    cut = ref + float(np.log(threshold))
    keep = [
        i for i, lb in enumerate(log_bounds) if (not np.isfinite(lb)) or lb >= cut
    ]
    if not keep:
        raise EmptyResultError("bound pruning removed every mixand; lower the threshold")
    if len(keep) == len(q):
        return q
    return q.subset(keep)


def _normalized_gm(log_weights, components) -> GaussianMixture:
    log_weights = np.asarray(log_weights, dtype=float)
    w = np.exp(log_weights - logsumexp(log_weights))
    return GaussianMixture(
        [GaussianComponent(wi, c.mean, c.cov) for wi, c in zip(w, components) if wi > 0.0]
    )


def naive_bayes_fuse(p_i: GaussianMixture, p_j: GaussianMixture) -> GaussianMixture:
    """Renormalized product p_i * p_j, ignoring any common information."""
    if p_i.dim != p_j.dim:
        raise DimensionMismatchError("mixtures must share one dimension")
    log_ws, comps = [], []
    for ci in p_i.components:
        for cj in p_j.components:
            comp, log_zbar = gaussian_product_log(ci, cj)
            log_ws.append(np.log(ci.weight) + np.log(cj.weight) + log_zbar)
            comps.append(comp)
    return _normalized_gm(log_ws, comps)


def foci_fuse(p_i: GaussianMixture, p_j: GaussianMixture, omega: float) -> GaussianMixture:
    """Pairwise precision-blend approximation of the weighted exponential product."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    if p_i.dim != p_j.dim:
        raise DimensionMismatchError("mixtures must share one dimension")
    log_ws, comps = [], []
    for ci in p_i.components:
        for cj in p_j.components:
            prec = omega * ci.prec + (1.0 - omega) * cj.prec
            chol_p = np.linalg.cholesky(prec)
            cov = cho_solve((chol_p, True), np.eye(p_i.dim))
            mean = cho_solve(
                (chol_p, True), omega * ci.prec @ ci.mean + (1.0 - omega) * cj.prec @ cj.mean
            )
            comps.append(GaussianComponent(1.0, mean, 0.5 * (cov + cov.T)))
            log_ws.append(omega * np.log(ci.weight) + (1.0 - omega) * np.log(cj.weight))
    return _normalized_gm(log_ws, comps)


def mmgd_fuse(p_i: GaussianMixture, p_j: GaussianMixture, p_c: GaussianMixture) -> GaussianMixture:
    """Moment-matched Gaussian denominator baseline for exact fusion."""
    gm, n_clamped = _mmgd_fuse_counted(p_i, p_j, p_c)
    if n_clamped:
        logger.warning("mmgd_fuse clamped %d indefinite quotient components", n_clamped)
    return gm


def _mmgd_fuse_counted(p_i, p_j, p_c) -> tuple[GaussianMixture, int]:
    if p_i.dim != p_j.dim or p_i.dim != p_c.dim:
        raise DimensionMismatchError("mixtures must share one dimension")
    mean_c, cov_c = mixture_moments(p_c)
    den = GaussianComponent(1.0, mean_c, cov_c)
    log_ws, comps = [], []
    n_clamped = 0
    for ci in p_i.components:
        for cj in p_j.components:
            num, log_zbar = gaussian_product_log(ci, cj)
            log_pre = np.log(ci.weight) + np.log(cj.weight) + log_zbar
            quot = gaussian_quotient_log(num, den)
            if quot is None:
                clamped = _clamp_quotient(num, den)
                if clamped is None:
                    continue
                quot = clamped
                n_clamped += 1
            comp, log_c = quot
            comps.append(comp)
            log_ws.append(log_pre + log_c)
    if not comps:
        raise EmptyResultError("every quotient component was indefinite")
    return _normalized_gm(log_ws, comps), n_clamped


def _clamp_quotient(num: GaussianComponent, den: GaussianComponent):
    """Indefinite quotient precision: clamp eigenvalues to 1e-6 of the largest."""
    prec = num.prec - den.prec
    prec = 0.5 * (prec + prec.T)
    eigs, vecs = np.linalg.eigh(prec)
    if eigs[-1] <= 0.0:
        return None
    floor = 1e-6 * eigs[-1]
    prec = (vecs * np.maximum(eigs, floor)) @ vecs.T
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = np.linalg.solve(prec, num.prec @ num.mean - den.prec @ den.mean)
    comp = GaussianComponent(1.0, mean, cov)
    log_c = float(
        num.logpdf(mean) - den.logpdf(mean) + 0.5 * (num.dim * _LOG_2PI + comp.log_det)
    )
    return comp, log_c
