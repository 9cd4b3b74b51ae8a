"""Mode finding and curvature extraction for quotient mixands.

Each mixand's negative log density g(x) = -log N(x; mu_vr, Sigma_vr) + log u(x)
is minimized with a damped Newton iteration started at the numerator mean.
The mode and inverse Hessian define one Gaussian of the Laplace proposal
mixture; the same quantities power the sampling-free mixture baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import logsumexp

from .errors import DivergenceError
from .gaussians import GaussianComponent, GaussianMixture
from .quotient import ExactCommonInfo, QuotientMixand, QuotientPosterior, gaussian_quotient_log

__all__ = [
    "LaplaceOptions",
    "LaplaceComponent",
    "laplace_mixand",
    "laplace_components",
    "laplace_gm_proposal",
    "laplace_moment_estimate",
    "laplace_mixture_baseline",
]

logger = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LaplaceOptions:
    grad_tol: float = 1e-8
    max_iters: int = 100
    multi_start: bool = False
    # Iterates farther than this many numerator standard deviations from the
    # start are treated as divergence.
    divergence_radius_sigmas: float = 100.0


@dataclass(frozen=True)
class LaplaceComponent:
    """Converged (or safeguarded) Laplace fit of one quotient mixand."""

    mode: np.ndarray
    cov: np.ndarray
    log_value: float  # log m(mode), the mixand's unnormalized log density
    log_pre_weight: float
    iterations: int
    grad_norm: float
    converged: bool
    fallback_cov: bool = False
    mode_ambiguous: bool = False

    @property
    def log_zeroth_moment(self) -> float:
        """Laplace mass estimate: m(mode) * (2 pi)^(d/2) * det(cov)^(1/2)."""
        d = self.mode.shape[0]
        sign, log_det = np.linalg.slogdet(self.cov)
        return self.log_value + 0.5 * (d * _LOG_2PI + log_det)


def _g_derivatives(m: QuotientMixand, x: np.ndarray):
    """Value, gradient, Hessian of g(x) = -log numerator(x) + log u(x)."""
    log_u, grad_u, hess_u = m.common.log_derivatives(x)
    diff = x - m.numerator.mean
    val = -float(m.numerator.logpdf(x)) + float(log_u)
    grad = m.numerator.prec @ diff + grad_u
    hess = m.numerator.prec + hess_u
    return val, grad, 0.5 * (hess + hess.T)


def _spd_solve(hess: np.ndarray, grad: np.ndarray, lam: float):
    """Solve (H + lam I) s = -grad, raising lam until the shift is SPD."""
    dim = hess.shape[0]
    scale = max(float(np.abs(hess).max()), 1e-12)
    for _ in range(80):
        try:
            chol = np.linalg.cholesky(hess + lam * np.eye(dim))
            return cho_solve((chol, True), -grad), lam
        except np.linalg.LinAlgError:
            lam = max(2.0 * lam, 1e-6 * scale)
    return None, lam


def _minimize_from(m: QuotientMixand, x0: np.ndarray, opts: LaplaceOptions):
    """Damped Newton descent of g from x0; returns (x, g, grad_norm, iters, converged)."""
    radius = opts.divergence_radius_sigmas * float(np.sqrt(np.trace(m.numerator.cov)))
    x = np.asarray(x0, dtype=float).copy()
    trace = [x.copy()]
    val, grad, hess = _g_derivatives(m, x)
    lam = 0.0
    iters = 0
    for iters in range(1, opts.max_iters + 1):
        gnorm = float(np.linalg.norm(grad))
        if gnorm < opts.grad_tol:
            return x, val, gnorm, iters - 1, True
        step, lam = _spd_solve(hess, grad, lam)
        if step is None:
            return x, val, gnorm, iters - 1, False
        moved = False
        for _ in range(50):
            x_new = x + step
            if float(np.linalg.norm(x_new - trace[0])) > radius:
                raise DivergenceError(
                    f"iterate left trust region (radius {radius:.3g}) after {iters} steps",
                    trace=trace,
                )
            val_new, grad_new, hess_new = _g_derivatives(m, x_new)
            if val_new < val:
                x, val, grad, hess = x_new, val_new, grad_new, hess_new
                trace.append(x.copy())
                lam = lam / 4.0 if lam > 1e-12 else 0.0
                moved = True
                break
            lam = max(2.0 * lam, 1e-6 * max(float(np.abs(hess).max()), 1e-12))
            step, lam = _spd_solve(hess, grad, lam)
            if step is None:
                break
        if not moved:
            # Stationary within damping limits (flat objective or saddle plateau).
            return x, val, float(np.linalg.norm(grad)), iters, float(np.linalg.norm(grad)) < opts.grad_tol
    return x, val, float(np.linalg.norm(grad)), opts.max_iters, False


def _start_points(m: QuotientMixand, opts: LaplaceOptions):
    starts = [m.numerator.mean]
    if opts.multi_start and isinstance(m.common, ExactCommonInfo):
        for comp in m.common.gm.components:
            quot = gaussian_quotient_log(m.numerator, GaussianComponent(1.0, comp.mean, comp.cov))
            if quot is not None:
                starts.append(quot[0].mean)
    return starts


def laplace_mixand(m: QuotientMixand, opts: LaplaceOptions | None = None) -> LaplaceComponent:
    """Fit one mixand: minimize g, then take the inverse Hessian at the mode.

    A flat or indefinite Hessian at convergence falls back to the numerator
    covariance (flagged, not fatal). With multi_start, additional starts at
    each common-information component's quotient mean are tried; a distinct
    second mode within 1 nat of the best marks the fit mode-ambiguous.
    """
    opts = opts or LaplaceOptions()
    results = []
    for x0 in _start_points(m, opts):
        results.append(_minimize_from(m, x0, opts))
    results.sort(key=lambda t: t[1])
    x_hat, g_val, grad_norm, iters, converged = results[0]
    ambiguous = False
    sep = 1e-3 * float(np.sqrt(np.trace(m.numerator.cov)))
    for other in results[1:]:
        if other[1] - g_val <= 1.0 and float(np.linalg.norm(other[0] - x_hat)) > sep:
            ambiguous = True
            break
    _, _, hess = _g_derivatives(m, x_hat)
    fallback = False
    try:
        chol = np.linalg.cholesky(hess)
        cov = cho_solve((chol, True), np.eye(hess.shape[0]))
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] <= 0.0:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        cov = np.asarray(m.numerator.cov).copy()
        fallback = True
    if not converged:
        logger.debug(
            "laplace_mixand (%d,%d): not converged after %d iters (grad %.2e)",
            m.v, m.r, iters, grad_norm,
        )
    return LaplaceComponent(
        mode=x_hat,
        cov=cov,
        log_value=-g_val,
        log_pre_weight=m.log_pre_weight,
        iterations=iters,
        grad_norm=grad_norm,
        converged=converged,
        fallback_cov=fallback,
        mode_ambiguous=ambiguous,
    )


def laplace_components(
    q: QuotientPosterior,
    opts: LaplaceOptions | None = None,
    on_divergence: str = "raise",
) -> list[LaplaceComponent]:
    """Fit every mixand; divergence is collected and reported with indices.

    on_divergence="fallback" substitutes the naive fit (numerator mean and
    covariance) for diverged mixands instead of raising; such components
    come back flagged converged=False / fallback_cov=True. Divergence is
    how structurally non-integrable mixands (no finite weight bound)
    usually surface.
    """
    if on_divergence not in ("raise", "fallback"):
        raise ValueError("on_divergence must be 'raise' or 'fallback'")
    fits, diverged = [], []
    for idx, m in enumerate(q.mixands):
        try:
            fits.append(laplace_mixand(m, opts))
        except DivergenceError as exc:
            if on_divergence == "fallback":
                fits.append(_naive_fit(m))
            diverged.append((idx, exc))
    if diverged and on_divergence == "raise":
        indices = [i for i, _ in diverged]
        raise DivergenceError(
            f"laplace optimization diverged for mixands {indices}",
            trace=[exc.trace for _, exc in diverged],
        )
    return fits


def _naive_fit(m: QuotientMixand) -> LaplaceComponent:
    mode = np.asarray(m.numerator.mean, dtype=float).copy()
    return LaplaceComponent(
        mode=mode,
        cov=np.asarray(m.numerator.cov).copy(),
        log_value=float(m.log_density(mode)),
        log_pre_weight=m.log_pre_weight,
        iterations=0,
        grad_norm=np.inf,
        converged=False,
        fallback_cov=True,
    )


def laplace_gm_proposal(
    q: QuotientPosterior,
    opts: LaplaceOptions | None = None,
    fits: list[LaplaceComponent] | None = None,
) -> GaussianMixture:
    """Proposal mixture N(mode, cov) per mixand, weighted by the analytic
    pre-weights (renormalized)."""
    fits = fits if fits is not None else laplace_components(q, opts)
    log_w = np.array([f.log_pre_weight for f in fits])
    w = np.exp(log_w - logsumexp(log_w))
    comps = [
        GaussianComponent(wi, f.mode, f.cov) for wi, f in zip(w, fits) if wi > 0.0
    ]
    return GaussianMixture(comps)


def laplace_moment_estimate(
    m: QuotientMixand, opts: LaplaceOptions | None = None, fit: LaplaceComponent | None = None
):
    """Sampling-free moment estimate of one mixand.

    Returns (w_star, mu_star, sigma_star): the pre-weight times the Laplace
    mass estimate, the mode, and the inverse Hessian. Biased for skewed
    mixands; exact when the quotient is Gaussian.
    """
    fit = fit if fit is not None else laplace_mixand(m, opts)
    w_star = float(np.exp(fit.log_pre_weight + fit.log_zeroth_moment))
    return w_star, fit.mode, fit.cov


def laplace_mixture_baseline(
    q: QuotientPosterior,
    opts: LaplaceOptions | None = None,
    fits: list[LaplaceComponent] | None = None,
) -> GaussianMixture:
    """Mixture of per-mixand Laplace Gaussians weighted by estimated mass."""
    fits = fits if fits is not None else laplace_components(q, opts)
    log_w = np.array([f.log_pre_weight + f.log_zeroth_moment for f in fits])
    w = np.exp(log_w - logsumexp(log_w))
    comps = [GaussianComponent(wi, f.mode, f.cov) for wi, f in zip(w, fits) if wi > 0.0]
    return GaussianMixture(comps)
