"""Ground-truth grids, KLD scoring, the random-problem benchmark, and the
per-mixand ESS comparison harness.

Grid truths are desk-scale oracles (dim <= 3): tabulate an unnormalized log
density over a box, normalize by the cell sum, and score approximations by
discrete KLD with the approximation floored to dodge log-of-zero in pruned
regions. The benchmark regenerates random fusion problems, runs each method
at each budget on seed-derived streams, and emits CSV + JSON rows.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import GmddfError
from .fusion import (
    EXACT_PRUNE_THRESHOLD,
    FusionMethod,
    _igs_wep_detailed,
    dls,
    igs_exact,
)
from .gaussians import GaussianMixture, RandomProblemConfig, random_gm
from .laplace import laplace_components, laplace_gm_proposal, laplace_mixture_baseline
from .learning import wem_fit
from .quotient import (
    ExactCommonInfo,
    WepCommonInfo,
    _mmgd_fuse_counted,
    expand_quotient,
    foci_fuse,
    log_weight_upper_bound,
    naive_bayes_fuse,
    prune_by_bound,
)
from .rng import as_seedseq, substream
from .sampling import (
    ProposalConfig,
    WepObjective,
    importance_moments,
    optimize_omega,
    wep_log_eval,
)
from .fusion import _build_proposal

__all__ = [
    "GridDensity",
    "grid_truth",
    "default_bounds",
    "kld_grid",
    "BenchConfig",
    "BenchReport",
    "run_benchmark",
    "ess_harness",
    "CSV_COLUMNS",
    "rows_to_csv",
    "summarize_rows",
]

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "trial", "seed", "mode", "method", "budget",
    "kld_nats", "wall_ms", "omega", "ess_min", "ess_median", "flags",
]

_KLD_FLOOR_LOG = float(np.log(1e-300))


@dataclass(frozen=True)
class GridDensity:
    """Normalized density tabulated on a regular box grid."""

    bounds: tuple
    shape: tuple
    log_values: np.ndarray
    cell_volume: float
    boundary_mass: float

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def points(self) -> np.ndarray:
        axes = [
            np.linspace(lo, hi, n) for (lo, hi), n in zip(self.bounds, self.shape)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        p = np.exp(self.log_values) * self.cell_volume
        pts = self.points()
        mean = p @ pts
        centered = pts - mean
        cov = (centered.T * p) @ centered
        return mean, 0.5 * (cov + cov.T)


def default_bounds(gms, n_sigmas: float = 5.0):
    """Box spanning every component mean +- n_sigmas component std, per dim."""
    gms = list(gms)
    dim = gms[0].dim
    lo = np.full(dim, np.inf)
    hi = np.full(dim, -np.inf)
    for gm in gms:
        stds = np.sqrt(np.einsum("qii->qi", gm.covs))
        lo = np.minimum(lo, (gm.means - n_sigmas * stds).min(axis=0))
        hi = np.maximum(hi, (gm.means + n_sigmas * stds).max(axis=0))
    return tuple((float(a), float(b)) for a, b in zip(lo, hi))


def grid_truth(logpdf, bounds, res, chunk: int = 65536) -> GridDensity:
    """Tabulate and normalize an unnormalized log density on a regular grid."""
    bounds = tuple(bounds)
    if len(bounds) > 3:
        raise ValueError("grid truth supports dim <= 3")
    shape = tuple([res] * len(bounds)) if np.isscalar(res) else tuple(res)
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, shape)]
    cell = float(np.prod([ax[1] - ax[0] for ax in axes]))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    log_vals = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        log_vals[start:start + chunk] = logpdf(pts[start:start + chunk])
    log_norm = logsumexp(log_vals) + np.log(cell)
    if not np.isfinite(log_norm):
        raise GmddfError("grid density has zero total mass")
    log_vals = log_vals - log_norm
    interior = np.ones(shape, dtype=bool)
    interior[tuple(slice(1, -1) for _ in shape)] = False
    boundary_mass = float(np.exp(logsumexp(log_vals.reshape(shape)[interior])) * cell)
    if boundary_mass > 0.01:
        logger.warning("grid boundary holds %.2f%% of the mass; widen the bounds",
                       100.0 * boundary_mass)
    return GridDensity(
        bounds=bounds, shape=shape, log_values=log_vals,
        cell_volume=cell, boundary_mass=boundary_mass,
    )


def kld_grid_detailed(truth: GridDensity, logpdf) -> tuple[float, int]:
    """Discrete KLD in nats plus the count of floored approximation cells."""
    pts = truth.points()
    log_q = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], 65536):
        log_q[start:start + 65536] = logpdf(pts[start:start + 65536])
    clamped = int(np.sum(log_q < _KLD_FLOOR_LOG))
    log_q = np.maximum(log_q, _KLD_FLOOR_LOG)
    p = np.exp(truth.log_values) * truth.cell_volume
    kld = float(p @ (truth.log_values - log_q))
    return max(kld, -1e-9), clamped


def kld_grid(truth: GridDensity, logpdf) -> float:
    return kld_grid_detailed(truth, logpdf)[0]


@dataclass(frozen=True)
class BenchConfig:
    """Random-problem benchmark settings (defaults regenerate the 2-D study)."""

    trials: int = 20
    seed: int = 0
    modes: tuple = ("exact", "wep")
    pi_cfg: RandomProblemConfig = field(default_factory=RandomProblemConfig)
    pj_cfg: RandomProblemConfig = field(default_factory=RandomProblemConfig)
    pc_cfg: RandomProblemConfig = field(
        default_factory=lambda: RandomProblemConfig(
            components=(40, 41), mean_low=-20.0, mean_high=20.0
        )
    )
    dls_budgets: tuple = (10, 50, 100, 200)
    igs_budgets: tuple = (100, 500, 1000, 2000)
    rule: str = "minimax"
    omega_samples: int = 5000
    include_iswem: bool = True
    iswem_samples: int = 5000
    wem_max_steps: int = 50
    wem_restarts: int = 3
    ingis_alpha: float = 5.0
    grid_res: int = 400
    n_sigmas: float = 5.0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        bad = set(self.modes) - {"exact", "wep"}
        if bad:
            raise ValueError(f"unknown benchmark modes {sorted(bad)}")


@dataclass
class BenchReport:
    config: dict
    rows: list

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "rows": self.rows}, indent=2)


def _row(trial, seed, mode, method, budget, kld, wall_ms, omega, ess_list, flags):
    ess_arr = np.asarray(ess_list, dtype=float) if ess_list else np.array([])
    return {
        "trial": int(trial),
        "seed": int(seed),
        "mode": mode,
        "method": method,
        "budget": int(budget),
        "kld_nats": float(kld),
        "wall_ms": float(wall_ms),
        "omega": None if omega is None else float(omega),
        "ess_min": float(ess_arr.min()) if ess_arr.size else None,
        "ess_median": float(np.median(ess_arr)) if ess_arr.size else None,
        "flags": ";".join(flags),
    }


def _error_row(trial, seed, mode, method, budget, exc):
    row = _row(trial, seed, mode, method, budget, float("nan"), 0.0, None, [], [f"error: {exc}"])
    return row


def _run_exact_trial(cfg: BenchConfig, trial: int, root) -> list:
    p_i = random_gm(cfg.pi_cfg, substream(root, trial, 0))
    p_j = random_gm(cfg.pj_cfg, substream(root, trial, 1))
    p_c = random_gm(cfg.pc_cfg, substream(root, trial, 2))
    truth = grid_truth(
        lambda x: p_i.logpdf(x) + p_j.logpdf(x) - p_c.logpdf(x),
        default_bounds([p_i, p_j, p_c], cfg.n_sigmas),
        cfg.grid_res,
    )
    rows = []
    posterior = prune_by_bound(
        expand_quotient(p_i, p_j, ExactCommonInfo(p_c)), EXACT_PRUNE_THRESHOLD
    )

    try:
        start = time.perf_counter()
        gm_mmgd, n_clamped = _mmgd_fuse_counted(p_i, p_j, p_c)
        wall = (time.perf_counter() - start) * 1e3
        flags = [f"clamped {n_clamped}"] if n_clamped else []
        rows.append(_row(trial, cfg.seed, "exact", "mmgd", 0,
                         kld_grid(truth, gm_mmgd.logpdf), wall, None, [], flags))
    except GmddfError as exc:
        rows.append(_error_row(trial, cfg.seed, "exact", "mmgd", 0, exc))

    start = time.perf_counter()
    fits = laplace_components(posterior, on_divergence="fallback")
    lap_flags = []
    n_fallback = sum(1 for f in fits if f.fallback_cov)
    if n_fallback:
        lap_flags.append(f"laplace fell back on {n_fallback} mixands")
    gm_lap = laplace_mixture_baseline(posterior, fits=fits)
    wall = (time.perf_counter() - start) * 1e3
    rows.append(_row(trial, cfg.seed, "exact", "laplace", 0,
                     kld_grid(truth, gm_lap.logpdf), wall, None, [], lap_flags))
    proposal = laplace_gm_proposal(posterior, fits=fits)

    for b_idx, budget in enumerate(cfg.dls_budgets):
        rng = substream(root, trial, 10 + b_idx)
        prop_cfg = ProposalConfig(kind="ingis", n_samples=budget, alpha=cfg.ingis_alpha)
        try:
            start = time.perf_counter()
            gm, ess_list, flags = dls(posterior, prop_cfg, rng)
            wall = (time.perf_counter() - start) * 1e3
            rows.append(_row(trial, cfg.seed, "exact", "dls", budget,
                             kld_grid(truth, gm.logpdf), wall, None, ess_list, flags))
        except GmddfError as exc:
            rows.append(_error_row(trial, cfg.seed, "exact", "dls", budget, exc))

    for b_idx, budget in enumerate(cfg.igs_budgets):
        rng = substream(root, trial, 20 + b_idx)
        try:
            start = time.perf_counter()
            gm = igs_exact(p_i, p_j, p_c, budget, rng, posterior=posterior, proposal=proposal)
            wall = (time.perf_counter() - start) * 1e3
            rows.append(_row(trial, cfg.seed, "exact", "igs", budget,
                             kld_grid(truth, gm.logpdf), wall, None, [], []))
        except GmddfError as exc:
            rows.append(_error_row(trial, cfg.seed, "exact", "igs", budget, exc))
    return rows


def _run_wep_trial(cfg: BenchConfig, trial: int, root) -> list:
    p_i = random_gm(cfg.pi_cfg, substream(root, trial, 0))
    p_j = random_gm(cfg.pj_cfg, substream(root, trial, 1))
    rule = WepObjective(cfg.rule)
    omega_ref, sset_ref = optimize_omega(
        p_i, p_j, rule, cfg.omega_samples, substream(root, trial, 3)
    )
    truth = grid_truth(
        lambda x: wep_log_eval(p_i, p_j, omega_ref, x),
        default_bounds([p_i, p_j], cfg.n_sigmas),
        cfg.grid_res,
    )
    rows = []

    start = time.perf_counter()
    gm_foci = foci_fuse(p_i, p_j, omega_ref)
    wall = (time.perf_counter() - start) * 1e3
    rows.append(_row(trial, cfg.seed, "wep", "foci", 0,
                     kld_grid(truth, gm_foci.logpdf), wall, omega_ref, [], []))

    start = time.perf_counter()
    gm_nb = naive_bayes_fuse(p_i, p_j)
    wall = (time.perf_counter() - start) * 1e3
    rows.append(_row(trial, cfg.seed, "wep", "naive-bayes", 0,
                     kld_grid(truth, gm_nb.logpdf), wall, None, [], []))

    wep = WepCommonInfo(p_i, p_j, omega_ref)
    posterior = expand_quotient(p_i, p_j, wep)
    for b_idx, budget in enumerate(cfg.dls_budgets):
        rng = substream(root, trial, 10 + b_idx)
        prop_cfg = ProposalConfig(kind="ingis", n_samples=budget, alpha=cfg.ingis_alpha)
        try:
            start = time.perf_counter()
            gm, ess_list, flags = dls(posterior, prop_cfg, rng)
            wall = (time.perf_counter() - start) * 1e3
            rows.append(_row(trial, cfg.seed, "wep", "dls", budget,
                             kld_grid(truth, gm.logpdf), wall, omega_ref, ess_list, flags))
        except GmddfError as exc:
            rows.append(_error_row(trial, cfg.seed, "wep", "dls", budget, exc))

    for b_idx, budget in enumerate(cfg.igs_budgets):
        rng = substream(root, trial, 20 + b_idx)
        try:
            start = time.perf_counter()
            gm, omega, sset = _igs_wep_detailed(p_i, p_j, rule, budget, rng)
            wall = (time.perf_counter() - start) * 1e3
            rows.append(_row(trial, cfg.seed, "wep", "igs", budget,
                             kld_grid(truth, gm.logpdf), wall, omega, [sset.ess], []))
        except GmddfError as exc:
            rows.append(_error_row(trial, cfg.seed, "wep", "igs", budget, exc))

    if cfg.include_iswem:
        rng = substream(root, trial, 30)
        try:
            start = time.perf_counter()
            n_comp = len(p_i) * len(p_j)
            gm = wem_fit(sset_ref, n_comp, max_steps=cfg.wem_max_steps,
                         rng=rng, restarts=cfg.wem_restarts)
            wall = (time.perf_counter() - start) * 1e3
            rows.append(_row(trial, cfg.seed, "wep", "iswem", cfg.iswem_samples,
                             kld_grid(truth, gm.logpdf), wall, omega_ref,
                             [sset_ref.ess], []))
        except GmddfError as exc:
            rows.append(_error_row(trial, cfg.seed, "wep", "iswem", cfg.iswem_samples, exc))
    return rows


def _run_trial(args) -> list:
    cfg, trial = args
    root = as_seedseq(cfg.seed)
    rows = []
    if "exact" in cfg.modes:
        rows.extend(_run_exact_trial(cfg, trial, root))
    if "wep" in cfg.modes:
        rows.extend(_run_wep_trial(cfg, trial, root))
    return rows


def run_benchmark(cfg: BenchConfig, workers: int = 1) -> BenchReport:
    """Run all trials; failures are recorded as error rows, not raised.

    Per-trial streams are derived from (seed, trial), so the report is
    identical for any worker count.
    """
    tasks = [(cfg, t) for t in range(cfg.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_trial = list(pool.map(_run_trial, tasks))
    else:
        per_trial = [_run_trial(t) for t in tasks]
    rows = [row for trial_rows in per_trial for row in trial_rows]
    rows.sort(key=lambda r: (r["trial"], r["mode"], r["method"], r["budget"]))
    return BenchReport(config=asdict(cfg), rows=rows)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def rows_to_csv(rows, columns=None) -> str:
    columns = columns or CSV_COLUMNS
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def summarize_rows(rows) -> list:
    """Median KLD and wall time per (mode, method, budget), NaN rows excluded."""
    groups = {}
    for row in rows:
        key = (row["mode"], row["method"], row["budget"])
        groups.setdefault(key, []).append(row)
    out = []
    for (mode, method, budget), grp in sorted(groups.items()):
        klds = [r["kld_nats"] for r in grp if np.isfinite(r["kld_nats"])]
        walls = [r["wall_ms"] for r in grp]
        out.append(
            {
                "mode": mode,
                "method": method,
                "budget": budget,
                "n": len(grp),
                "n_failed": sum(1 for r in grp if not np.isfinite(r["kld_nats"])),
                "median_kld_nats": float(np.median(klds)) if klds else float("nan"),
                "median_wall_ms": float(np.median(walls)) if walls else float("nan"),
            }
        )
    return out


ESS_COLUMNS_BASE = ["mixand", "v", "r", "true_log_weight", "bound_log_weight"]


def ess_harness(
    p_i: GaussianMixture,
    p_j: GaussianMixture,
    p_c: GaussianMixture,
    proposals: dict,
    rng: np.random.Generator,
    grid_res: int = 400,
    n_sigmas: float = 5.0,
) -> list:
    """Per-mixand ESS fractions, grid-true weights, and bound values.

    ``proposals`` maps a family name to a ProposalConfig; every family is
    run on every mixand with its own derived stream. Returns one dict per
    mixand with ess_frac_<name> and sampled_log_weight_<name> columns.
    """
    posterior = expand_quotient(p_i, p_j, ExactCommonInfo(p_c))
    bounds = default_bounds([p_i, p_j, p_c], n_sigmas)
    axes = [np.linspace(lo, hi, grid_res) for lo, hi in bounds]
    cell = float(np.prod([ax[1] - ax[0] for ax in axes]))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])

    log_masses = np.empty(len(posterior))
    for z, m in enumerate(posterior.mixands):
        log_masses[z] = logsumexp(m.log_density(pts)) + np.log(cell)
    log_unnorm = posterior.log_pre_weights + log_masses
    log_total = logsumexp(log_unnorm)

    rows = []
    streams = {name: rng.spawn(len(posterior)) for name in proposals}
    for z, m in enumerate(posterior.mixands):
        row = {
            "mixand": z,
            "v": m.v,
            "r": m.r,
            "true_log_weight": float(log_unnorm[z] - log_total),
            "bound_log_weight": float(m.log_pre_weight + log_weight_upper_bound(m)
                                      - log_total),
        }
        for name, cfg in proposals.items():
            sub = streams[name][z]
            try:
                prop = _build_proposal(m, cfg)
                _, _, _, sset = importance_moments(m.log_density, prop, cfg.n_samples, sub)
                row[f"ess_frac_{name}"] = float(sset.ess / cfg.n_samples)
                log_zeroth = sset.log_scale + float(np.log(sset.weights.mean()))
                row[f"sampled_log_weight_{name}"] = float(
                    m.log_pre_weight + log_zeroth - log_total
                )
            except GmddfError as exc:
                row[f"ess_frac_{name}"] = 0.0
                row[f"sampled_log_weight_{name}"] = float("nan")
                logger.debug("ess_harness %s mixand %d failed: %s", name, z, exc)
        rows.append(row)
    return rows
