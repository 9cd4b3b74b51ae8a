"""Mixture learning from weighted samples, plus mixture compression.

Weighted EM condenses an importance-weighted sample set into a mixture by
iterating responsibility and moment updates; the single-shot variant fixes
the responsibilities from the true posterior's numerator Gaussians (the
shared denominator cancels out of them), so one E-step and one M-step
suffice. Compression is greedy moment-preserving pair merging driven by a
log-determinant dissimilarity upper bound.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import logsumexp

from .errors import EmptyResultError
from .gaussians import GaussianComponent, GaussianMixture
from .quotient import QuotientPosterior
from .sampling import WeightedSampleSet

__all__ = [
    "wem_fit",
    "sswem_fit",
    "runnalls_compress",
    "prune_small_weights",
]

logger = logging.getLogger(__name__)

_COLLAPSE_FLOOR = 1e-12
_COV_EIG_FLOOR = 1e-8
_PARAM_TOL = 1e-6


def _floored_cov(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    eigs, vecs = np.linalg.eigh(cov)
    if eigs[0] >= _COV_EIG_FLOOR:
        return cov
    return (vecs * np.maximum(eigs, _COV_EIG_FLOOR)) @ vecs.T


def _m_step(points: np.ndarray, gamma: np.ndarray):
    """Weighted moment updates; returns (weights, means, covs, kept mask)."""
    nbar = gamma.sum(axis=1)
    keep = nbar >= _COLLAPSE_FLOOR
    weights, means, covs = [], [], []
    for z in np.flatnonzero(keep):
        mu = gamma[z] @ points / nbar[z]
        centered = points - mu
        cov = (centered.T * gamma[z]) @ centered / nbar[z]
        weights.append(nbar[z])
        means.append(mu)
        covs.append(_floored_cov(cov))
    return np.array(weights), means, covs, keep


def _weighted_log_likelihood(gm: GaussianMixture, points: np.ndarray, theta: np.ndarray) -> float:
    return float(theta @ gm.logpdf(points))


def _wem_single(points, theta, init: GaussianMixture, max_steps: int):
    """One weighted-EM run from a given initial mixture.

    Returns (mixture, log-likelihood history, flags).
    """
    gm = init.normalized()
    flags: list[str] = []
    history = [_weighted_log_likelihood(gm, points, theta)]
    for _ in range(max_steps):
        log_resp = gm.component_logpdfs(points) + gm._log_weights[:, None]
        norm = logsumexp(log_resp, axis=0)
        if not np.all(np.isfinite(norm)):
            raise EmptyResultError("every component underflowed at some sample")
        gamma = np.exp(log_resp - norm) * theta
        weights, means, covs, keep = _m_step(points, gamma)
        if not keep.all():
            flags.append(f"dropped {int((~keep).sum())} collapsed components")
        if weights.size == 0:
            raise EmptyResultError("all components collapsed")
        prev = gm
        gm = GaussianMixture.from_arrays(weights / weights.sum(), means, covs)
        history.append(_weighted_log_likelihood(gm, points, theta))
        if len(gm) == len(prev) and _params_converged(prev, gm):
            break
    return gm, history, flags


def _params_converged(a: GaussianMixture, b: GaussianMixture) -> bool:
    for old, new in ((a.weights, b.weights), (a.means, b.means), (a.covs, b.covs)):
        rel = np.abs(new - old) / (np.abs(old) + 1e-12)
        if rel.max() >= _PARAM_TOL:
            return False
    return True


def _kmeanspp_init(points, theta, n_components, rng) -> GaussianMixture:
    n = points.shape[0]
    resampled = points[rng.choice(n, size=min(n, 2048), p=theta)]
    centers = [resampled[rng.integers(len(resampled))]]
    for _ in range(n_components - 1):
        d2 = np.min(
            [np.sum((resampled - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0.0:
            centers.append(resampled[rng.integers(len(resampled))])
            continue
        centers.append(resampled[rng.choice(len(resampled), p=d2 / total)])
    centers = np.array(centers)
    assign = np.argmin(
        ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1
    )
    weights, means, covs = [], [], []
    overall = np.cov(points.T, aweights=theta) + _COV_EIG_FLOOR * np.eye(points.shape[1])
    for z in range(n_components):
        mask = assign == z
        wz = theta[mask].sum()
        if wz < _COLLAPSE_FLOOR:
            weights.append(1e-6)
            means.append(centers[z])
            covs.append(overall.copy())
            continue
        mu = theta[mask] @ points[mask] / wz
        centered = points[mask] - mu
        cov = (centered.T * theta[mask]) @ centered / wz
        weights.append(wz)
        means.append(mu)
        covs.append(_floored_cov(np.atleast_2d(cov)))
    w = np.array(weights)
    return GaussianMixture.from_arrays(w / w.sum(), means, covs)


def wem_fit(
    sset: WeightedSampleSet,
    n_components: int,
    init: GaussianMixture | None = None,
    max_steps: int = 100,
    rng: np.random.Generator | None = None,
    restarts: int = 3,
) -> GaussianMixture:
    """Weighted EM condensation of an importance-weighted sample set.

    With an explicit ``init`` a single run is performed from it; otherwise
    k-means++-style seeding on resampled points is used with ``restarts``
    runs, keeping the best weighted log-likelihood.
    """
    theta = sset.normalized_weights()
    points = sset.points
    if init is not None:
        if len(init) != n_components:
            raise ValueError("init must have n_components components")
        gm, _, _ = _wem_single(points, theta, init, max_steps)
        return gm
    if rng is None:
        raise ValueError("wem_fit needs an rng when no init is given")
    best, best_ll = None, -np.inf
    for _ in range(max(1, restarts)):
        seed_gm = _kmeanspp_init(points, theta, n_components, rng)
        gm, history, _ = _wem_single(points, theta, seed_gm, max_steps)
        if history[-1] > best_ll:
            best, best_ll = gm, history[-1]
    return best


def sswem_fit(sset: WeightedSampleSet, q: QuotientPosterior) -> GaussianMixture:
    """Single-shot weighted EM against the true posterior's numerators.

    The responsibilities use only the cached numerator Gaussian values and
    analytic pre-weights; the common-information density cancels out of the
    ratio and is never evaluated. One constrained E-step, one M-step.
    """
    if sset.numerator_logpdfs is None:
        raise ValueError("sample set lacks cached numerator log values")
    if sset.numerator_logpdfs.shape[0] != len(q):
        raise ValueError("numerator cache does not match posterior mixand count")
    theta = sset.normalized_weights()
    log_num = q.log_pre_weights[:, None] + sset.numerator_logpdfs
    norm = logsumexp(log_num, axis=0)
    if not np.all(np.isfinite(norm)):
        raise EmptyResultError("posterior numerators underflowed at some sample")
    gamma = np.exp(log_num - norm) * theta
    weights, means, covs, keep = _m_step(sset.points, gamma)
    if weights.size == 0:
        raise EmptyResultError("all responsibilities underflowed")
    if not keep.all():
        logger.debug("sswem_fit dropped %d empty components", int((~keep).sum()))
    return GaussianMixture.from_arrays(weights / weights.sum(), means, covs)


def _merged_pairs_cost(w, mu, cov, log_dets):
    """Runnalls dissimilarity for all pairs: B(i,j) = 0.5[(wi+wj) logdet(Pij)
    - wi logdet(Pi) - wj logdet(Pj)] with the moment-matched merged Pij."""
    n = w.shape[0]
    wi = w[:, None]
    wj = w[None, :]
    wsum = wi + wj
    fi = (wi / wsum)[..., None]
    fj = (wj / wsum)[..., None]
    delta = mu[:, None, :] - mu[None, :, :]
    merged = (
        fi[..., None] * cov[:, None, :, :]
        + fj[..., None] * cov[None, :, :, :]
        + (fi * fj)[..., None] * delta[..., :, None] * delta[..., None, :]
    )
    _, merged_logdet = np.linalg.slogdet(merged)
    cost = 0.5 * (wsum * merged_logdet - wi * log_dets[None, :].T - wj * log_dets[None, :])
    np.fill_diagonal(cost, np.inf)
    return cost


def _merge_pair(w, mu, cov, i, j):
    wsum = w[i] + w[j]
    fi, fj = w[i] / wsum, w[j] / wsum
    mean = fi * mu[i] + fj * mu[j]
    delta = mu[i] - mu[j]
    merged = fi * cov[i] + fj * cov[j] + fi * fj * np.outer(delta, delta)
    return wsum, mean, 0.5 * (merged + merged.T)


def runnalls_compress(gm: GaussianMixture, m_max: int) -> GaussianMixture:
    """Greedy moment-preserving reduction to at most m_max components."""
    if m_max < 1:
        raise ValueError("m_max must be >= 1")
    if len(gm) <= m_max:
        return gm
    w = gm.weights.copy()
    mu = gm.means.copy()
    cov = gm.covs.copy()
    _, log_dets = np.linalg.slogdet(cov)
    cost = _merged_pairs_cost(w, mu, cov, log_dets)
    active = np.ones(len(gm), dtype=bool)
    n_active = len(gm)
    while n_active > m_max:
        flat = np.argmin(cost)
        i, j = np.unravel_index(flat, cost.shape)
        w[i], mu[i], cov[i] = _merge_pair(w, mu, cov, i, j)
        _, log_dets_i = np.linalg.slogdet(cov[i])
        log_dets[i] = log_dets_i
        active[j] = False
        cost[j, :] = np.inf
        cost[:, j] = np.inf
        idx = np.flatnonzero(active)
        wi, wsum = w[i], w[i] + w[idx]
        fi = (wi / wsum)[:, None, None]
        fj = (w[idx] / wsum)[:, None, None]
        delta = mu[i] - mu[idx]
        merged = fi * cov[i] + fj * cov[idx] + (fi * fj) * delta[:, :, None] * delta[:, None, :]
        _, merged_logdet = np.linalg.slogdet(merged)
        row = 0.5 * (wsum * merged_logdet - wi * log_dets[i] - w[idx] * log_dets[idx])
        cost[i, idx] = row
        cost[idx, i] = row
        cost[i, i] = np.inf
        n_active -= 1
    idx = np.flatnonzero(active)
    return GaussianMixture.from_arrays(w[idx], mu[idx], cov[idx])


def prune_small_weights(gm: GaussianMixture, eps: float) -> GaussianMixture:
    """Drop components with weight < eps, renormalize the survivors."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    if eps == 0.0:
        return gm
    keep = gm.weights >= eps
    if not keep.any():
        raise EmptyResultError("weight pruning removed every component")
    if keep.all():
        return gm
    w = gm.weights[keep]
    idx = np.flatnonzero(keep)
    return GaussianMixture.from_arrays(w / w.sum(), gm.means[idx], gm.covs[idx])
