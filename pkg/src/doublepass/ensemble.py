"""Monte Carlo sweeps over noise realizations and spin sizes.

A scan runs one task (finite-difference bound, particle-filter estimation,
or full-vs-projection filter comparison) over a grid of F values with a
fixed number of noise realizations each, aggregates per-F statistics,
fits a power law on log-log axes, and attaches the closed-form shotnoise
and Heisenberg reference curves.  Trajectory i of F_values[j] always draws
from stream_index j * realizations + i of the master seed, so no stream is
reused and any single trajectory can be replayed in isolation.

Failed trajectories (filter divergence, unresolved finite differences,
non-finite outputs) are excluded and counted; more than 1% of them aborts
the scan.  The bias-convergence sweep over prior widths D reuses the same
machinery at fixed F with B_true = 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from . import estimation as est
from .filters import CouplingParams, FilterDivergenceError, run_filter, simulate_truth_record
from .sde import NoiseStream

SCAN_TASKS = ("crb", "particle", "compare_filters")
# fraction of failed trajectories that invalidates a whole scan
FAILURE_ABORT_FRACTION = 0.01
# |pi| threshold (fraction of F) above which filter agreement is scored
COMPARE_MASK_LEVEL = 0.05
# sqrt(D) of the scaling-scan prior, in units of the shotnoise scale
PRIOR_WIDTH_SHOTNOISE_UNITS = 40.0


class ScanAbortedError(RuntimeError):
    """Too many trajectories failed for the aggregate to be trusted."""


@dataclass(frozen=True)
class ScanConfig:
    """One Monte Carlo sweep: task, F grid, couplings schedule, seeding.

    The couplings at each F follow M = K = c / (t_final F^alpha).  D is the
    particle-filter prior half-width squared; None scales the prior with F
    (sqrt(D) = 40x the shotnoise scale) so the grid resolves the posterior
    at every F with the same particle count.
    """

    F_values: Tuple[float, ...]
    realizations: int
    c: float = est.SCHEDULE_C
    alpha: float = est.SCHEDULE_ALPHA
    t_final: float = 1.0
    dt: float = 1e-3
    master_seed: int = 0
    task: str = "crb"
    gamma: float = 1.0
    B_true: float = 0.0
    Np: int = 10_000
    D: Optional[float] = None
    delta: float = 1e-4

    def __post_init__(self) -> None:
        if self.task not in SCAN_TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected {SCAN_TASKS}")
        if len(self.F_values) == 0:
            raise ValueError("F_values must be non-empty")
        if any(F <= 0 for F in self.F_values):
            raise ValueError("F_values must be positive")
        if self.realizations < 2:
            raise ValueError("realizations must be at least 2")
        if self.c <= 0.0 or self.t_final <= 0.0 or self.dt <= 0.0:
            raise ValueError("c, t_final, and dt must be positive")
        if self.gamma < 0.0:
            raise ValueError("gamma must be non-negative")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must fit in an unsigned 64-bit word")
        if self.Np < 2:
            raise ValueError("Np must be at least 2")
        if self.D is not None and self.D <= 0.0:
            raise ValueError("D must be positive")
        n = round(self.t_final / self.dt)
        if n < 1 or abs(n * self.dt - self.t_final) > 1e-6 * self.t_final:
            raise ValueError("t_final must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    def couplings(self, F: float) -> Tuple[float, float]:
        return est.coupling_schedule(F, self.c, self.alpha, self.t_final)

    def prior_D(self, F: float) -> float:
        if self.D is not None:
            return self.D
        width = PRIOR_WIDTH_SHOTNOISE_UNITS * est.shotnoise_bound(
            F, self.gamma, self.t_final
        )
        return width * width


@dataclass
class ScanResult:
    """Per-F statistics of one scan plus fit and reference curves.

    means/stds/n_ok are aligned with F_values; the fit triple is NaN when
    fewer than 3 finite positive mean points exist (for example the
    gamma=0 infinite-bound sentinel).  xi_means/xi_stds and b_means are
    filled by the particle task only.
    """

    config: ScanConfig
    F_values: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    n_ok: np.ndarray
    n_failed: int
    slope: float
    intercept: float
    r_squared: float
    shotnoise: np.ndarray
    heisenberg: np.ndarray
    manifest: dict
    xi_means: Optional[np.ndarray] = None
    xi_stds: Optional[np.ndarray] = None
    b_means: Optional[np.ndarray] = None


def fit_power_law(
    points: Iterable[Tuple[float, float]]
) -> Tuple[float, float, float]:
    """Least squares of log10(value) on log10(F).

    Returns (slope, intercept, r_squared); needs at least 3 points with
    positive F and value.
    """
    pts = list(points)
    if len(pts) < 3:
        raise ValueError("need at least 3 points for a power-law fit")
    F = np.array([p[0] for p in pts], dtype=float)
    v = np.array([p[1] for p in pts], dtype=float)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(v))):
        raise ValueError("points must be finite")
    if np.any(F <= 0.0) or np.any(v <= 0.0):
        raise ValueError("power-law fit needs positive F and values")
    x = np.log10(F)
    y = np.log10(v)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), float(r_squared)


def _one_trajectory(cfg: ScanConfig, j: int, i: int) -> Tuple[int, int, dict]:
    """Run trajectory i of F_values[j]; returns stats or an error marker."""
    F = cfg.F_values[j]
    stream_index = j * cfg.realizations + i
    ns = NoiseStream(cfg.master_seed, stream_index, cfg.dt)
    M, K = cfg.couplings(F)
    try:
        if cfg.task == "crb":
            crb_cfg = est.CrbConfig(
                F=F,
                M=M,
                K=K,
                B_center=cfg.B_true,
                t_final=cfg.t_final,
                dt=cfg.dt,
                delta=cfg.delta,
                gamma=cfg.gamma,
                n_realizations=cfg.realizations,
            )
            # displaced trajectories ride the same exogenous innovations;
            # sharing the record instead suppresses the amplified field
            # sensitivity that sets the scaling law
            value = est.crb_bound(crb_cfg, ns, share_dw=True)
            if math.isnan(value):
                return j, i, {"error": "bound is NaN"}
            return j, i, {"value": value}
        if cfg.task == "particle":
            pe = est.init_prior_grid(
                cfg.prior_D(F), cfg.Np, F,
                M=M, K=K, gamma=cfg.gamma, t_final=cfg.t_final,
            )
            p = CouplingParams(M, K, cfg.gamma)
            record = simulate_truth_record(
                p, cfg.B_true, F, ns, cfg.n_steps, model="projection"
            )
            run = est.run_particle_filter(pe, record)
            value = float(run.delta_b[-1])
            b_final = float(run.b_tilde[-1])
            if not (math.isfinite(value) and math.isfinite(b_final)):
                return j, i, {"error": "non-finite estimate"}
            return j, i, {"value": value, "b": b_final, "xi": run.xi_mean}
        # compare_filters: truth record through the reduced filter, scored
        # where the exact trajectory is away from zero crossings
        p = CouplingParams(M, K, cfg.gamma, cfg.gamma * cfg.B_true)
        record = simulate_truth_record(
            p, cfg.B_true, F, ns, cfg.n_steps, model="full"
        )
        proj = run_filter(record, "projection", p, F)
        mask = np.abs(record.pi_fz) > COMPARE_MASK_LEVEL * F
        if not np.any(mask):
            return j, i, {"error": "no samples above the comparison threshold"}
        rel = np.abs(proj.pi_fz[mask] - record.pi_fz[mask]) / np.abs(
            record.pi_fz[mask]
        )
        value = float(rel.max())
        if not math.isfinite(value):
            return j, i, {"error": "non-finite comparison"}
        return j, i, {"value": value}
    except (FilterDivergenceError, est.BoundUnresolvedError) as exc:
        return j, i, {"error": str(exc)}


def run_scan(cfg: ScanConfig, workers: int = 1) -> ScanResult:
    """Execute every (F, realization) trajectory and aggregate.

    workers > 1 fans trajectories out to a process pool; results are
    reduced in (F index, realization index) order either way, so the
    output is identical for any worker count.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    jobs = [
        (j, i)
        for j in range(len(cfg.F_values))
        for i in range(cfg.realizations)
    ]
    if workers == 1:
        raw = [_one_trajectory(cfg, j, i) for j, i in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(
                pool.map(
                    _one_trajectory,
                    [cfg] * len(jobs),
                    [j for j, _ in jobs],
                    [i for _, i in jobs],
                    chunksize=8,
                )
            )
    raw.sort(key=lambda r: (r[0], r[1]))

    n_f = len(cfg.F_values)
    per_f: list[list[dict]] = [[] for _ in range(n_f)]
    failures = []
    for j, i, out in raw:
        if "error" in out:
            failures.append(
                {
                    "F": cfg.F_values[j],
                    "stream_index": j * cfg.realizations + i,
                    "error": out["error"],
                }
            )
        else:
            per_f[j].append(out)
    total = len(jobs)
    if len(failures) > FAILURE_ABORT_FRACTION * total:
        raise ScanAbortedError(
            f"{len(failures)} of {total} trajectories failed, above the "
            f"{FAILURE_ABORT_FRACTION:.0%} abort threshold; first error: "
            f"{failures[0]['error']}"
        )

    means = np.full(n_f, np.nan)
    stds = np.full(n_f, np.nan)
    n_ok = np.zeros(n_f, dtype=int)
    is_particle = cfg.task == "particle"
    xi_means = np.full(n_f, np.nan) if is_particle else None
    xi_stds = np.full(n_f, np.nan) if is_particle else None
    b_means = np.full(n_f, np.nan) if is_particle else None
    for j in range(n_f):
        vals = np.array([o["value"] for o in per_f[j]], dtype=float)
        n_ok[j] = vals.size
        if vals.size:
            means[j] = vals.mean()
            # infinite bounds (gamma = 0 sentinel) have no meaningful spread
            if vals.size > 1 and np.all(np.isfinite(vals)):
                stds[j] = vals.std(ddof=1)
            elif vals.size == 1:
                stds[j] = 0.0
        if is_particle and vals.size:
            xis = np.array([o["xi"] for o in per_f[j]])
            bs = np.array([o["b"] for o in per_f[j]])
            xi_means[j] = xis.mean()
            xi_stds[j] = xis.std(ddof=1) if xis.size > 1 else 0.0
            b_means[j] = bs.mean()

    fit_pts = [
        (F, m)
        for F, m, n in zip(cfg.F_values, means, n_ok)
        if n > 0 and np.isfinite(m) and m > 0.0
    ]
    if len(fit_pts) >= 3:
        slope, intercept, r_squared = fit_power_law(fit_pts)
    else:
        slope = intercept = r_squared = float("nan")

    F_arr = np.asarray(cfg.F_values, dtype=float)
    if cfg.gamma > 0.0:
        sn = np.array(
            [est.shotnoise_bound(F, cfg.gamma, cfg.t_final) for F in F_arr]
        )
        hl = np.array(
            [est.heisenberg_bound(F, cfg.gamma, cfg.t_final) for F in F_arr]
        )
    else:
        sn = np.full(n_f, np.inf)
        hl = np.full(n_f, np.inf)

    manifest = {
        "kind": "scan",
        "config": asdict(cfg),
        "points": [
            [float(F), float(m), float(s), int(n)]
            for F, m, s, n in zip(F_arr, means, stds, n_ok)
        ],
        "fit": None
        if math.isnan(slope)
        else {"slope": slope, "intercept": intercept, "r_squared": r_squared},
        "reference": {
            "shotnoise": [float(x) for x in sn],
            "heisenberg": [float(x) for x in hl],
        },
        "n_failed": len(failures),
        "failures": failures,
    }
    if is_particle:
        manifest["xi"] = {
            "means": [float(x) for x in xi_means],
            "stds": [float(x) for x in xi_stds],
        }
        manifest["b_means"] = [float(x) for x in b_means]
        manifest["prior_D"] = [float(cfg.prior_D(F)) for F in cfg.F_values]

    return ScanResult(
        config=cfg,
        F_values=F_arr,
        means=means,
        stds=stds,
        n_ok=n_ok,
        n_failed=len(failures),
        slope=slope,
        intercept=intercept,
        r_squared=r_squared,
        shotnoise=sn,
        heisenberg=hl,
        manifest=manifest,
        xi_means=xi_means,
        xi_stds=xi_stds,
        b_means=b_means,
    )


def gaussian_fit(
    b_values: np.ndarray, weights: np.ndarray
) -> Tuple[float, float, float]:
    """Moment-matched normal fit of a grid posterior.

    Returns (mu, sigma, r_squared) where r_squared scores how well the
    matched normal mass profile reproduces the weights.
    """
    b = np.asarray(b_values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if b.shape != w.shape or b.ndim != 1 or b.size < 3:
        raise ValueError("need matching 1-d arrays of at least 3 points")
    total = float(w.sum())
    if total <= 0.0:
        raise ValueError("weights must carry positive mass")
    w = w / total
    mu = float(np.dot(w, b))
    var = max(float(np.dot(w, b * b)) - mu * mu, 0.0)
    sigma = math.sqrt(var)
    if sigma == 0.0:
        return mu, 0.0, 0.0
    model = np.exp(-0.5 * ((b - mu) / sigma) ** 2)
    model *= 1.0 / model.sum()
    ss_tot = float(np.sum((w - w.mean()) ** 2))
    ss_res = float(np.sum((w - model) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return mu, sigma, float(r_squared)


@dataclass
class BiasScanResult:
    """Estimator bias versus prior width at fixed F with B_true = 0."""

    F: float
    D_values: Tuple[float, ...]
    mean_abs_b: np.ndarray
    mean_delta_b: np.ndarray
    b_tilde: list  # per D, array of per-realization final estimates
    posteriors: list  # per D, (b_values, weights) of the first surviving run
    n_failed: int
    manifest: dict

    @property
    def bias_decreased(self) -> bool:
        """Ensemble-mean |B_tilde| smaller at the widest prior than the narrowest."""
        return bool(self.mean_abs_b[-1] < self.mean_abs_b[0])


def bias_convergence_scan(
    D_values: Sequence[float],
    F: float,
    realizations: int,
    Np: int = 10_000,
    t_final: float = 1.0,
    dt: float = 1e-3,
    master_seed: int = 0,
    gamma: float = 1.0,
    c: float = est.SCHEDULE_C,
    alpha: float = est.SCHEDULE_ALPHA,
) -> BiasScanResult:
    """Sweep the prior half-width squared D at fixed F with B_true = 0.

    The sweep is paired: realization i reuses stream_index i for every D,
    so each prior width digests the same measurement records and the only
    varying ingredient is the domain truncation.  Per D the sweep reports
    the ensemble mean of |B_tilde| and of delta_B at t_final and stores
    the first surviving run's final posterior; the widening prior should
    pull the mean bias down.
    """
    if len(D_values) < 2 or any(
        D_values[k + 1] <= D_values[k] for k in range(len(D_values) - 1)
    ):
        raise ValueError("D_values must be increasing with at least 2 entries")
    if realizations < 2:
        raise ValueError("realizations must be at least 2")
    M, K = est.coupling_schedule(F, c, alpha, t_final)
    p = CouplingParams(M, K, gamma)
    n_steps = int(round(t_final / dt))
    if n_steps < 1 or abs(n_steps * dt - t_final) > 1e-6 * t_final:
        raise ValueError("t_final must be an integer multiple of dt")

    mean_abs_b = np.empty(len(D_values))
    mean_delta_b = np.empty(len(D_values))
    b_per_d: list = []
    posteriors: list = []
    failures = []
    for d, D in enumerate(D_values):
        b_final = []
        db_final = []
        posterior = None
        for i in range(realizations):
            ns = NoiseStream(master_seed, i, dt)
            record = simulate_truth_record(p, 0.0, F, ns, n_steps, model="projection")
            pe = est.init_prior_grid(D, Np, F, M=M, K=K, gamma=gamma, t_final=t_final)
            try:
                run = est.run_particle_filter(pe, record)
            except FilterDivergenceError as exc:
                failures.append(
                    {"D": D, "stream_index": i, "error": str(exc)}
                )
                continue
            b_final.append(run.b_tilde[-1])
            db_final.append(run.delta_b[-1])
            if posterior is None:
                posterior = (
                    run.ensemble.b_values.copy(),
                    run.ensemble.weights.copy(),
                )
        if not b_final:
            raise ScanAbortedError(f"every realization failed at D={D}")
        b_arr = np.asarray(b_final)
        mean_abs_b[d] = np.abs(b_arr).mean()
        mean_delta_b[d] = np.mean(db_final)
        b_per_d.append(b_arr)
        posteriors.append(posterior)
    total = len(D_values) * realizations
    if len(failures) > FAILURE_ABORT_FRACTION * total:
        raise ScanAbortedError(
            f"{len(failures)} of {total} trajectories failed, above the "
            f"{FAILURE_ABORT_FRACTION:.0%} abort threshold"
        )
    manifest = {
        "kind": "bias_scan",
        "F": float(F),
        "D_values": [float(D) for D in D_values],
        "realizations": realizations,
        "Np": Np,
        "t_final": t_final,
        "dt": dt,
        "master_seed": master_seed,
        "gamma": gamma,
        "c": c,
        "alpha": alpha,
        "mean_abs_b": [float(x) for x in mean_abs_b],
        "mean_delta_b": [float(x) for x in mean_delta_b],
        "n_failed": len(failures),
        "failures": failures,
    }
    return BiasScanResult(
        F=F,
        D_values=tuple(float(D) for D in D_values),
        mean_abs_b=mean_abs_b,
        mean_delta_b=mean_delta_b,
        b_tilde=b_per_d,
        posteriors=posteriors,
        n_failed=len(failures),
        manifest=manifest,
    )
