"""Fusion pipelines and channel-filter node state.

The two sampling engines share the quotient expansion: direct local
sampling estimates each mixand's moments from its own proposal and sample
set, while indirect global sampling draws one set over the whole posterior
and assigns it to mixands with single-shot weighted EM. Closed-form
baselines and a dispatching ``fuse`` wrapper with a uniform report format
round out the module.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import EstimateUnreliableError, IncompatibleMethodError
from .gaussians import GaussianComponent, GaussianMixture, gm_to_dict
from .laplace import LaplaceOptions, laplace_components, laplace_gm_proposal, laplace_mixand, laplace_mixture_baseline
from .learning import runnalls_compress, sswem_fit
from .quotient import (
    ExactCommonInfo,
    QuotientMixand,
    QuotientPosterior,
    WepCommonInfo,
    _mmgd_fuse_counted,
    expand_quotient,
    foci_fuse,
    log_weight_upper_bound,
    naive_bayes_fuse,
    prune_by_bound,
)
from .sampling import (
    ProposalConfig,
    WeightedSampleSet,
    WepObjective,
    heavy_tail_proposal,
    importance_moments,
    ingis_proposal,
    optimize_omega,
    wep_log_eval,
)

__all__ = [
    "FusionMethod",
    "FusionReport",
    "NodeState",
    "dls",
    "igs_wep",
    "igs_exact",
    "fuse",
    "channel_update",
    "local_update",
]

# Relative bound threshold for mid-fusion pruning of exact-posterior mixands.
EXACT_PRUNE_THRESHOLD = 1e-10
# Default search budget for resolving omega when only a rule is given.
OMEGA_SEARCH_SAMPLES = 5000
OMEGA_SEARCH_TOL = 1e-3


@dataclass(frozen=True)
class FusionMethod:
    """Tagged method choice: dls, igs, mmgd, foci, naive-bayes, or laplace."""

    kind: str
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    n_samples: int = 1000
    compress_to: int | None = None

    def __post_init__(self):
        if self.kind not in ("dls", "igs", "mmgd", "foci", "naive-bayes", "laplace"):
            raise ValueError(f"unknown fusion method {self.kind!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.compress_to is not None and self.compress_to < 1:
            raise ValueError("compress_to must be >= 1")


@dataclass
class FusionReport:
    """Outcome of one fusion call; flags are the only degraded-result channel."""

    method: str
    gm: GaussianMixture
    omega: float | None = None
    ess_per_mixand: list[float] = field(default_factory=list)
    wall_ms: float = 0.0
    flags: list[str] = field(default_factory=list)
    kld_vs_truth: float | None = None

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "omega": self.omega,
            "ess_per_mixand": [float(e) for e in self.ess_per_mixand],
            "wall_ms": float(self.wall_ms),
            "flags": list(self.flags),
            "gm": gm_to_dict(self.gm),
        }
        if self.kld_vs_truth is not None:
            out["kld_vs_truth"] = float(self.kld_vs_truth)
        return out


def _auto_heavy_tail_scales(m: QuotientMixand, base_cov: np.ndarray, n_scales: int = 5):
    """Largest scale tied to the component-wise bound covariance when available."""
    xi_max = 9.0
    if isinstance(m.common, ExactCommonInfo):
        best, best_cov = np.inf, None
        from .quotient import gaussian_quotient_log

        for comp in m.common.gm.components:
            if comp.weight <= 0.0:
                continue
            quot = gaussian_quotient_log(m.numerator, GaussianComponent(1.0, comp.mean, comp.cov))
            if quot is None:
                continue
            _, log_c = quot
            val = log_c - float(np.log(comp.weight))
            if val < best:
                best, best_cov = val, quot[0].cov
        if best_cov is not None:
            d = base_cov.shape[0]
            ratio = (np.linalg.det(best_cov) / max(np.linalg.det(base_cov), 1e-300)) ** (1.0 / d)
            xi_max = float(np.clip(ratio, 2.0, 100.0))
    return tuple(np.geomspace(1.0, xi_max, n_scales))


def _build_proposal(m: QuotientMixand, cfg: ProposalConfig, opts: LaplaceOptions | None = None):
    if cfg.kind == "ingis":
        return ingis_proposal(m, cfg.alpha)
    fit = laplace_mixand(m, opts)
    if cfg.kind == "lagis":
        return GaussianMixture([GaussianComponent(1.0, fit.mode, fit.cov)])
    scales = cfg.scales if cfg.scales is not None else _auto_heavy_tail_scales(m, fit.cov)
    return heavy_tail_proposal(fit.mode, fit.cov, scales, cfg.scale_weights)


def dls(
    q: QuotientPosterior,
    proposal: ProposalConfig,
    rng: np.random.Generator,
    laplace_opts: LaplaceOptions | None = None,
):
    """Direct local sampling: per-mixand proposal, sample set, and moments.

    Returns (mixture, per-mixand ESS list, flags). Mixands whose estimates
    are unreliable (ESS < 2) are flagged and skipped; if they carry more
    than half of the pre-weight mass the whole fusion fails.
    """
    streams = rng.spawn(len(q))
    pre = np.exp(q.log_pre_weights - logsumexp(q.log_pre_weights))
    log_ws, means, covs = [], [], []
    ess_list, flags = [], []
    flagged_mass = 0.0
    for idx, (m, sub) in enumerate(zip(q.mixands, streams)):
        prop = _build_proposal(m, proposal, laplace_opts)
        try:
            _, mu, cov, sset = importance_moments(m.log_density, prop, proposal.n_samples, sub)
        except EstimateUnreliableError as exc:
            flags.append(f"mixand {idx} ess {exc.ess:.2f} < 2")
            ess_list.append(float(exc.ess))
            flagged_mass += pre[idx]
            continue
        ess_list.append(sset.ess)
        log_zeroth = sset.log_scale + float(np.log(sset.weights.mean()))
        log_ws.append(m.log_pre_weight + log_zeroth)
        means.append(mu)
        covs.append(cov)
    if flagged_mass > 0.5:
        raise EstimateUnreliableError(
            f"unreliable mixands hold {flagged_mass:.2f} of pre-weight mass",
            ess=min(ess_list) if ess_list else 0.0,
        )
    log_ws = np.array(log_ws)
    w = np.exp(log_ws - logsumexp(log_ws))
    gm = GaussianMixture.from_arrays(w[w > 0], [mm for mm, wi in zip(means, w) if wi > 0],
                                     [cc for cc, wi in zip(covs, w) if wi > 0])
    return gm, ess_list, flags


def _igs_wep_detailed(p_i, p_j, rule, n_samples, rng, tol=OMEGA_SEARCH_TOL):
    omega, sset = optimize_omega(p_i, p_j, rule, n_samples, rng, tol=tol)
    common = WepCommonInfo(p_i, p_j, omega)
    q = expand_quotient(p_i, p_j, common)
    sset = replace(sset, numerator_logpdfs=q.numerator_logpdfs(sset.points))
    gm = sswem_fit(sset, q)
    return gm, omega, sset


def igs_wep(
    p_i: GaussianMixture,
    p_j: GaussianMixture,
    rule: WepObjective,
    n_samples: int,
    rng: np.random.Generator,
    tol: float = OMEGA_SEARCH_TOL,
) -> tuple[GaussianMixture, float]:
    """Indirect global sampling for conservative fusion: one omega search,
    one sample set, single-shot weighted EM assignment."""
    gm, omega, _ = _igs_wep_detailed(p_i, p_j, rule, n_samples, rng, tol)
    return gm, omega


def igs_exact(
    p_i: GaussianMixture,
    p_j: GaussianMixture,
    p_c: GaussianMixture,
    n_samples: int,
    rng: np.random.Generator,
    prune_threshold: float = EXACT_PRUNE_THRESHOLD,
    laplace_opts: LaplaceOptions | None = None,
    posterior: QuotientPosterior | None = None,
    proposal: GaussianMixture | None = None,
) -> GaussianMixture:
    """Indirect global sampling for exact fusion via the Laplace proposal.

    The posterior is bound-pruned before mode finding; one global sample
    set is weighted by the full posterior density and condensed with
    single-shot weighted EM.
    """
    if posterior is None:
        posterior = expand_quotient(p_i, p_j, ExactCommonInfo(p_c))
        posterior = prune_by_bound(posterior, prune_threshold)
    if proposal is None:
        fits = laplace_components(posterior, laplace_opts, on_divergence="fallback")
        proposal = laplace_gm_proposal(posterior, fits=fits)
    x = proposal.sample(n_samples, rng)
    log_theta = posterior.log_density(x) - proposal.logpdf(x)
    shift = float(log_theta.max())
    sset = WeightedSampleSet(
        points=x,
        weights=np.exp(log_theta - shift),
        log_scale=shift,
        log_proposal=proposal.logpdf(x),
        numerator_logpdfs=posterior.numerator_logpdfs(x),
    )
    return sswem_fit(sset, posterior)


def _resolve_omega(p_i, p_j, common, rng, n_samples=OMEGA_SEARCH_SAMPLES, tol=OMEGA_SEARCH_TOL):
    """Turn a rule into a concrete WepCommonInfo (passes existing ones through)."""
    if isinstance(common, WepCommonInfo):
        return common, None
    if isinstance(common, WepObjective):
        omega, sset = optimize_omega(p_i, p_j, common, n_samples, rng, tol=tol)
        return WepCommonInfo(p_i, p_j, omega), sset
    raise IncompatibleMethodError(
        f"method requires conservative-fusion common info, got {type(common).__name__}"
    )


def fuse(
    p_i: GaussianMixture,
    p_j: GaussianMixture,
    common,
    method: FusionMethod,
    rng: np.random.Generator,
) -> FusionReport:
    """Dispatch one fusion problem to the requested engine.

    ``common`` is an ExactCommonInfo, a WepCommonInfo (fixed omega), or a
    WepObjective rule (omega optimized first). Incompatible pairings raise
    IncompatibleMethodError.
    """
    start = time.perf_counter()
    report = FusionReport(method=method.kind, gm=None)
    exact = isinstance(common, ExactCommonInfo)

    if method.kind == "naive-bayes":
        report.gm = naive_bayes_fuse(p_i, p_j)
    elif method.kind == "mmgd":
        if not exact:
            raise IncompatibleMethodError("mmgd requires an exact common-information mixture")
        gm, n_clamped = _mmgd_fuse_counted(p_i, p_j, common.gm)
        if n_clamped:
            report.flags.append(f"mmgd clamped {n_clamped} indefinite components")
        report.gm = gm
    elif method.kind == "foci":
        if exact:
            raise IncompatibleMethodError("foci applies to conservative fusion only")
        wep, _ = _resolve_omega(p_i, p_j, common, rng)
        report.omega = wep.omega
        report.gm = foci_fuse(p_i, p_j, wep.omega)
    elif method.kind == "laplace":
        if exact:
            posterior = prune_by_bound(expand_quotient(p_i, p_j, common), EXACT_PRUNE_THRESHOLD)
        else:
            wep, _ = _resolve_omega(p_i, p_j, common, rng)
            report.omega = wep.omega
            posterior = expand_quotient(p_i, p_j, wep)
        fits = laplace_components(posterior, on_divergence="fallback")
        n_fallback = sum(1 for f in fits if f.fallback_cov)
        if n_fallback:
            report.flags.append(f"laplace fell back on {n_fallback} mixands")
        report.gm = laplace_mixture_baseline(posterior, fits=fits)
    elif method.kind == "dls":
        if exact:
            posterior = prune_by_bound(expand_quotient(p_i, p_j, common), EXACT_PRUNE_THRESHOLD)
        else:
            wep, _ = _resolve_omega(p_i, p_j, common, rng)
            report.omega = wep.omega
            posterior = expand_quotient(p_i, p_j, wep)
        gm, ess_list, flags = dls(posterior, method.proposal, rng)
        report.gm = gm
        report.ess_per_mixand = ess_list
        report.flags.extend(flags)
    elif method.kind == "igs":
        if exact:
            posterior = prune_by_bound(expand_quotient(p_i, p_j, common), EXACT_PRUNE_THRESHOLD)
            fits = laplace_components(posterior, on_divergence="fallback")
            n_fallback = sum(1 for f in fits if f.fallback_cov)
            if n_fallback:
                report.flags.append(f"laplace fell back on {n_fallback} mixands")
            proposal = laplace_gm_proposal(posterior, fits=fits)
            report.gm = igs_exact(
                p_i, p_j, common.gm, method.n_samples, rng,
                posterior=posterior, proposal=proposal,
            )
        else:
            if isinstance(common, WepCommonInfo):
                # Fixed omega: skip the search but keep the IGS pipeline.
                q = expand_quotient(p_i, p_j, common)
                proposal = foci_fuse(p_i, p_j, 0.5)
                x = proposal.sample(method.n_samples, rng)
                log_theta = wep_log_eval(p_i, p_j, common.omega, x) - proposal.logpdf(x)
                shift = float(log_theta.max())
                sset = WeightedSampleSet(
                    points=x,
                    weights=np.exp(log_theta - shift),
                    log_scale=shift,
                    log_proposal=proposal.logpdf(x),
                    numerator_logpdfs=q.numerator_logpdfs(x),
                )
                report.gm = sswem_fit(sset, q)
                report.omega = common.omega
                report.ess_per_mixand = [sset.ess]
            else:
                gm, omega, sset = _igs_wep_detailed(p_i, p_j, common, method.n_samples, rng)
                report.gm = gm
                report.omega = omega
                report.ess_per_mixand = [sset.ess]

    if method.compress_to is not None and len(report.gm) > method.compress_to:
        report.gm = runnalls_compress(report.gm, method.compress_to)
    report.wall_ms = (time.perf_counter() - start) * 1e3
    return report


@dataclass(frozen=True)
class NodeState:
    """One agent: local belief plus per-neighbor common-information mixtures."""

    node_id: str
    belief: GaussianMixture
    channels: dict

    def __post_init__(self):
        self.belief._require_normalized("NodeState belief")
        for gm in self.channels.values():
            gm._require_normalized("NodeState channel")
        object.__setattr__(self, "channels", dict(self.channels))

    @classmethod
    def with_prior(cls, node_id: str, prior: GaussianMixture, neighbors) -> "NodeState":
        return cls(node_id, prior, {nb: prior for nb in neighbors})


def local_update(node: NodeState, likelihood: GaussianMixture) -> NodeState:
    """Condition the belief on an independent local likelihood (channels unchanged)."""
    return NodeState(node.node_id, naive_bayes_fuse(node.belief, likelihood), node.channels)


def channel_update(
    node: NodeState,
    neighbor: str,
    received: GaussianMixture,
    method: FusionMethod,
    rng: np.random.Generator,
    compress_to: int | None = None,
) -> tuple[NodeState, FusionReport]:
    """Fuse a neighbor's belief through the channel filter.

    The stored channel mixture is the common information divided out; after
    fusion both the belief and that channel become the fused result.
    """
    if neighbor not in node.channels:
        raise KeyError(f"no channel initialized for neighbor {neighbor!r}")
    common = ExactCommonInfo(node.channels[neighbor])
    report = fuse(node.belief, received, common, method, rng)
    fused = report.gm
    if compress_to is not None and len(fused) > compress_to:
        fused = runnalls_compress(fused, compress_to).normalized()
    channels = dict(node.channels)
    channels[neighbor] = fused
    return NodeState(node.node_id, fused, channels), report
