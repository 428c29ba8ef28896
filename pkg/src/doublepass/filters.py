"""Conditional dynamics of the double-passed, continuously probed spin.

Three equivalent descriptions of the same conditional state are provided,
each driven by the innovations process dW = dZ - 2 sqrt(M) <F_z> dt of a
homodyne measurement record Z:

* full SSE on the ket (Ito form),

    dpsi = [ -i w_t Fy + i sqrt(KM) Fy (Fz + <Fz>) - (M/2)(Fz - <Fz>)^2
             - (K/2) Fy^2 ] psi dt
           + [ sqrt(M)(Fz - <Fz>) + i sqrt(K) Fy ] psi dW,

* adjoint (density-operator) filter with the matching Lindblad/update
  superoperators, which preserves purity from pure initial states,

* reduced projection filter on the Gaussian family (theta, xi),

    dtheta = [ w_t - (M/4) e^{-16 F xi} sin 2theta
               + 2 F sqrt(KM) sin theta ] dt
             - [ sqrt(M) e^{-8 F xi} cos theta + sqrt(K) ] dW,
    dxi    = (M/4) e^{-8 F xi} cos^2 theta dt,

together with a Stratonovich form of the SSE (Heun-integrated) that is used
only as a numerical cross-check of the Ito integration.  The M-proportional
terms realize the first-pass measurement back-action; the sqrt(KM) terms are
the coherent positive feedback from the second pass, which amplifies y-axis
rotations; w_t = gamma*B for magnetometry.

Truth-record generation evolves one of these filters at the true field with
an exogenous Wiener process as its innovations and emits the corresponding
record dZ = 2 sqrt(M) <F_z> dt + dV, which downstream filters then consume.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from . import sde, spin
from .spin import DensityMatrix, GaussianState, StateVector

NORM_FLOOR = 1e-6
# Euler stepping of the density-operator filter leaves a small negative
# eigenvalue skin of order (coupling * Var(Fz))^2 * dt per unit time; at
# practical dt this sits around 1e-3..1e-2 and shrinks with dt, while a
# genuinely unstable run crosses -0.1 quickly.  The abort threshold sits
# between the two regimes.
NEGATIVITY_ABORT = 5e-2
POSITIVITY_STRIDE = 1000

FILTER_KINDS = ("full_sse", "adjoint", "projection")


class FilterDivergenceError(RuntimeError):
    """Filter state lost normalization, positivity, or finiteness."""


@dataclass(frozen=True)
class CouplingParams:
    """Measurement and feedback strengths of the double-pass probe.

    M is the first-pass measurement strength, K the second-pass feedback
    strength (both in units of 1/t_final), gamma the gyromagnetic ratio and
    omega_fn the rotation rate about y: either a constant or a callable of
    time.  For magnetometry omega = gamma * B.
    """

    M: float
    K: float
    gamma: float = 1.0
    omega_fn: Union[float, Callable[[float], float]] = 0.0

    def __post_init__(self) -> None:
        for name in ("M", "K", "gamma"):
            val = getattr(self, name)
            if not np.isfinite(val):
                raise ValueError(f"{name} must be finite, got {val!r}")
        if self.M < 0.0 or self.K < 0.0:
            raise ValueError("M and K must be non-negative")

    def omega_at(self, t: float) -> float:
        if callable(self.omega_fn):
            return float(self.omega_fn(t))
        return float(self.omega_fn)

    @property
    def feedback(self) -> float:
        """Coherent feedback rate sqrt(K*M)."""
        return math.sqrt(self.K * self.M)

    def for_field(self, B: float) -> "CouplingParams":
        """Same couplings with constant rotation rate omega = gamma*B."""
        return CouplingParams(self.M, self.K, self.gamma, self.gamma * B)


@dataclass
class TrajectoryRecord:
    """Time series of one measurement record and one filter's response.

    All series share length n; times[k] = k*dt marks the step start and the
    stored pi_fz[k] is the filter expectation entering step k, so
    dW[k] = dZ[k] - 2 sqrt(M) pi_fz[k] dt holds identically.
    """

    times: np.ndarray
    dZ: np.ndarray
    dW: np.ndarray
    pi_fz: np.ndarray
    theta: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    seed_info: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.times)
        for name in ("dZ", "dW", "pi_fz"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"series {name} length differs from times")
        for name in ("theta", "xi"):
            series = getattr(self, name)
            if series is not None and len(series) != n:
                raise ValueError(f"series {name} length differs from times")

    @property
    def n_steps(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.meta["dt"])

    def innovations_residual(self) -> float:
        """Max deviation of dW from dZ - 2 sqrt(M) pi_fz dt (self-check)."""
        if self.n_steps == 0:
            return 0.0
        root_m = math.sqrt(float(self.meta["M"]))
        recon = self.dZ - 2.0 * root_m * self.pi_fz * self.dt
        return float(np.max(np.abs(self.dW - recon)))


@dataclass(frozen=True)
class _SseOps:
    """Precomputed operator bundle for one (F, M, K)."""

    F: float
    M: float
    K: float
    m: np.ndarray
    fy: np.ndarray
    a0: np.ndarray
    fy_s: sp.csr_matrix
    a0_s: sp.csr_matrix
    skm: float
    root_m: float
    root_k: float


@functools.lru_cache(maxsize=16)
def _sse_ops(F: float, M: float, K: float) -> _SseOps:
    ops = spin.build_collective_ops(F)
    m = ops.fz_diag.copy()
    m.setflags(write=False)
    skm = math.sqrt(K * M)
    # deterministic drift operator: i sqrt(KM) Fy Fz - (M/2) Fz^2 - (K/2) Fy^2
    a0 = 1j * skm * (ops.fy @ ops.fz) - 0.5 * M * np.diag((m * m).astype(complex))
    a0 = a0 - 0.5 * K * (ops.fy @ ops.fy)
    a0.setflags(write=False)
    return _SseOps(
        F=F,
        M=M,
        K=K,
        m=m,
        fy=ops.fy,
        a0=a0,
        fy_s=sp.csr_matrix(ops.fy),
        a0_s=sp.csr_matrix(a0),
        skm=skm,
        root_m=math.sqrt(M),
        root_k=math.sqrt(K),
    )


def _sse_terms(
    o: _SseOps, amps: np.ndarray, omega: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """Ito drift and diffusion vectors at a normalized ket, plus <F_z>."""
    y = o.fy @ amps
    mz = o.m * amps
    f = float(np.real(np.vdot(amps, mz)))
    drift = o.a0 @ amps + (1j * (o.skm * f - omega)) * y + (o.M * f) * mz
    drift -= (0.5 * o.M * f * f) * amps
    diff = o.root_m * (mz - f * amps) + (1j * o.root_k) * y
    return drift, diff, f


def sse_step(
    psi: StateVector, p: CouplingParams, t: float, dW: float, dt: float
) -> StateVector:
    """One Euler-Ito step of the full SSE, renormalized to unit norm.

    <F_z> in the drift and diffusion is evaluated on the pre-step state.
    """
    o = _sse_ops(psi.F, p.M, p.K)
    drift, diff, _ = _sse_terms(o, psi.amplitudes, p.omega_at(t))
    out = sde.euler_ito_step(psi.amplitudes, drift, diff, dt, dW)
    norm = np.linalg.norm(out)
    if norm < NORM_FLOOR:
        raise FilterDivergenceError(f"ket norm collapsed to {norm:.3e}; reduce dt")
    return StateVector(psi.F, out / norm)


@functools.lru_cache(maxsize=16)
def _adjoint_ops(F: float) -> tuple[np.ndarray, np.ndarray]:
    ops = spin.build_collective_ops(F)
    return ops.fz_diag.copy(), ops.fy


def _adjoint_terms(
    m: np.ndarray,
    fy: np.ndarray,
    rho: np.ndarray,
    p: CouplingParams,
    omega: float,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Drift and diffusion matrices of the adjoint filter, plus tr(Fz rho).

    Rotation, feedback, and the K-dissipator share one commutator: with
    comm = [Fy, rho] and anti = {Fz, rho},

        K D[Fy] rho = -(K/2) [Fy, comm],

    so all three fold into [Fy, G] with G = i sqrt(KM) anti - (K/2) comm
    - i w rho, leaving four dense matmuls per step.
    """
    fyr = fy @ rho
    rfy = rho @ fy
    comm = fyr - rfy
    anti = m[:, None] * rho + rho * m[None, :]  # {Fz, rho}
    tr_z = float(np.real(np.sum(m * np.diag(rho).real)))
    G = (1j * p.feedback) * anti - (0.5 * p.K) * comm - (1j * omega) * rho
    drift = fy @ G - G @ fy
    m2 = m * m
    drift += p.M * (
        m[:, None] * rho * m[None, :] - 0.5 * (m2[:, None] * rho + rho * m2[None, :])
    )
    diff = math.sqrt(p.M) * (anti - 2.0 * tr_z * rho) + (1j * math.sqrt(p.K)) * comm
    return drift, diff, tr_z


def adjoint_filter_step(
    rho: DensityMatrix, p: CouplingParams, t: float, dW: float, dt: float
) -> DensityMatrix:
    """One Euler-Ito step of the adjoint (density-operator) filter.

    The result is re-Hermitized and trace-renormalized; positivity is the
    caller's periodic check (see run_filter) since a full eigendecomposition
    per step would dominate the cost.
    """
    m, fy = _adjoint_ops(rho.F)
    drift, diff, _ = _adjoint_terms(m, fy, rho.rho, p, p.omega_at(t))
    out = rho.rho + drift * dt + diff * dW
    out = 0.5 * (out + out.conj().T)
    trace = float(np.real(np.trace(out)))
    if not np.isfinite(trace) or trace < NORM_FLOOR:
        raise FilterDivergenceError(f"trace collapsed to {trace:.3e}; reduce dt")
    return DensityMatrix(rho.F, out / trace)


def projection_step(
    g: GaussianState, p: CouplingParams, omega: float, dW: float, dt: float
) -> GaussianState:
    """One Euler-Ito step of the reduced two-parameter filter.

    dxi is drift-only and non-negative, so xi never decreases along a
    trajectory started at xi >= 0.
    """
    e8 = math.exp(-8.0 * g.F * g.xi)
    sin_t = math.sin(g.theta)
    cos_t = math.cos(g.theta)
    dtheta = (
        omega - 0.25 * p.M * e8 * e8 * math.sin(2.0 * g.theta)
        + 2.0 * g.F * p.feedback * sin_t
    ) * dt - (math.sqrt(p.M) * e8 * cos_t + math.sqrt(p.K)) * dW
    dxi = 0.25 * p.M * e8 * cos_t * cos_t * dt
    if not (np.isfinite(dtheta) and np.isfinite(dxi)):
        raise FilterDivergenceError("projection step produced NaN or Inf")
    return GaussianState(g.F, g.theta + dtheta, g.xi + dxi)


def projection_expect_fz(g: GaussianState) -> float:
    """Filtered <F_z> of the Gaussian family, -F sin(theta)."""
    return -g.F * math.sin(g.theta)


def simulate_truth_record(
    p: CouplingParams,
    B_true: float,
    F: float,
    ns: sde.NoiseStream,
    n_steps: int,
    model: str = "full",
) -> TrajectoryRecord:
    """Generate a measurement record from a truth state at field B_true.

    The truth evolves under its own filter (full SSE or projection) with the
    stream's Wiener increments as its innovations dV, and the emitted record
    is dZ = 2 sqrt(M) <F_z>_truth dt + dV.  The rotation rate is the constant
    gamma*B_true; p.omega_fn is ignored here.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    if model not in ("full", "projection"):
        raise ValueError(f"unknown truth model {model!r}")
    dt = ns.dt
    omega = p.gamma * B_true
    dV = ns.increments(n_steps)
    root_m = math.sqrt(p.M)
    pi = np.empty(n_steps)
    theta_series = None
    xi_series = None
    meta = {
        "F": F,
        "M": p.M,
        "K": p.K,
        "gamma": p.gamma,
        "B_true": B_true,
        "omega": omega,
        "dt": dt,
        "scheme": "euler_ito",
        "kind": f"truth_{model}",
    }
    if model == "full":
        o = _sse_ops(F, p.M, p.K)
        amps = spin.coherent_state_x(F).amplitudes
        renorm = 0.0
        for k in range(n_steps):
            drift, diff, f = _sse_terms(o, amps, omega)
            pi[k] = f
            amps = amps + drift * dt + diff * dV[k]
            norm = np.linalg.norm(amps)
            if not np.isfinite(norm) or norm < NORM_FLOOR:
                raise FilterDivergenceError(f"truth ket norm {norm:.3e}; reduce dt")
            renorm += abs(norm - 1.0)
            amps /= norm
        meta["renorm_total"] = renorm
        meta["pi_final"] = float(np.real(np.vdot(amps, o.m * amps)))
    else:
        g = GaussianState(F, 0.0, 0.0)
        theta_series = np.empty(n_steps)
        xi_series = np.empty(n_steps)
        for k in range(n_steps):
            theta_series[k] = g.theta
            xi_series[k] = g.xi
            pi[k] = projection_expect_fz(g)
            g = projection_step(g, p, omega, dV[k], dt)
        meta["pi_final"] = projection_expect_fz(g)
        meta["theta_final"] = g.theta
        meta["xi_final"] = g.xi
    dZ = 2.0 * root_m * pi * dt + dV
    return TrajectoryRecord(
        times=np.arange(n_steps) * dt,
        dZ=dZ,
        dW=dV,
        pi_fz=pi,
        theta=theta_series,
        xi=xi_series,
        seed_info={"master_seed": ns.master_seed, "stream_index": ns.stream_index},
        meta=meta,
    )


def run_filter(
    record: TrajectoryRecord,
    kind: str,
    p: CouplingParams,
    F: float,
    initial_state: Union[StateVector, DensityMatrix, GaussianState, None] = None,
) -> TrajectoryRecord:
    """Drive a filter over a stored measurement record.

    The filter starts from the x-polarized coherent state ((theta, xi) =
    (0, 0) for the projection kind) unless initial_state overrides it, and
    computes its own innovations dW = dZ - 2 sqrt(M) pi dt from its own
    filtered expectation.  Returns a new record carrying the filter's series.
    """
    if kind not in FILTER_KINDS:
        raise ValueError(f"unknown filter kind {kind!r}; expected {FILTER_KINDS}")
    dt = record.dt
    n = record.n_steps
    dZ = record.dZ
    root_m = math.sqrt(p.M)
    pi = np.empty(n)
    dW = np.empty(n)
    theta_series = None
    xi_series = None
    meta = {
        "F": F,
        "M": p.M,
        "K": p.K,
        "gamma": p.gamma,
        "dt": dt,
        "scheme": "euler_ito",
        "kind": kind,
    }

    if kind == "full_sse":
        o = _sse_ops(F, p.M, p.K)
        if initial_state is None:
            amps = spin.coherent_state_x(F).amplitudes
        elif isinstance(initial_state, StateVector):
            amps = initial_state.amplitudes.copy()
        else:
            raise ValueError("full_sse initial state must be a StateVector")
        renorm = 0.0
        for k in range(n):
            t = record.times[k]
            drift, diff, f = _sse_terms(o, amps, p.omega_at(t))
            pi[k] = f
            dW[k] = dZ[k] - 2.0 * root_m * f * dt
            amps = amps + drift * dt + diff * dW[k]
            norm = np.linalg.norm(amps)
            if not np.isfinite(norm) or norm < NORM_FLOOR:
                raise FilterDivergenceError(f"ket norm {norm:.3e}; reduce dt")
            renorm += abs(norm - 1.0)
            amps /= norm
        meta["renorm_total"] = renorm
        meta["pi_final"] = float(np.real(np.vdot(amps, o.m * amps)))
    elif kind == "adjoint":
        m, fy = _adjoint_ops(F)
        if initial_state is None:
            coh = spin.coherent_state_x(F).amplitudes
            rho = np.outer(coh, coh.conj())
        elif isinstance(initial_state, DensityMatrix):
            rho = initial_state.rho.copy()
        elif isinstance(initial_state, StateVector):
            rho = np.outer(
                initial_state.amplitudes, initial_state.amplitudes.conj()
            )
        else:
            raise ValueError("adjoint initial state must be a DensityMatrix or ket")
        renorm = 0.0
        for k in range(n):
            t = record.times[k]
            drift, diff, tr_z = _adjoint_terms(m, fy, rho, p, p.omega_at(t))
            pi[k] = tr_z
            dW[k] = dZ[k] - 2.0 * root_m * tr_z * dt
            rho = rho + drift * dt + diff * dW[k]
            rho = 0.5 * (rho + rho.conj().T)
            trace = float(np.real(np.trace(rho)))
            if not np.isfinite(trace) or trace < NORM_FLOOR:
                raise FilterDivergenceError(f"trace {trace:.3e}; reduce dt")
            renorm += abs(trace - 1.0)
            rho /= trace
            if (k + 1) % POSITIVITY_STRIDE == 0 or k == n - 1:
                low = float(np.linalg.eigvalsh(rho)[0])
                if low < -NEGATIVITY_ABORT:
                    raise FilterDivergenceError(
                        f"negativity {low:.3e} at step {k + 1}; reduce dt"
                    )
        meta["renorm_total"] = renorm
        meta["pi_final"] = float(np.real(np.sum(m * np.diag(rho).real)))
    else:
        if initial_state is None:
            g = GaussianState(F, 0.0, 0.0)
        elif isinstance(initial_state, GaussianState):
            g = initial_state
        else:
            raise ValueError("projection initial state must be a GaussianState")
        theta_series = np.empty(n)
        xi_series = np.empty(n)
        for k in range(n):
            t = record.times[k]
            theta_series[k] = g.theta
            xi_series[k] = g.xi
            f = projection_expect_fz(g)
            pi[k] = f
            dW[k] = dZ[k] - 2.0 * root_m * f * dt
            g = projection_step(g, p, p.omega_at(t), dW[k], dt)
        meta["pi_final"] = projection_expect_fz(g)
        meta["theta_final"] = g.theta
        meta["xi_final"] = g.xi

    return TrajectoryRecord(
        times=record.times.copy(),
        dZ=dZ.copy(),
        dW=dW,
        pi_fz=pi,
        theta=theta_series,
        xi=xi_series,
        seed_info=dict(record.seed_info),
        meta=meta,
    )


@functools.lru_cache(maxsize=16)
def _fx_dense(F: float) -> np.ndarray:
    return spin.build_collective_ops(F).fx


def _strat_drift(o: _SseOps, fx: np.ndarray, amps: np.ndarray, omega: float) -> np.ndarray:
    """Stratonovich drift of the SSE, from the Ito form by the standard
    conversion.

    The conversion leaves the rotation term alone, cancels the (M/2) Fz^2
    and (K/2) Fy^2 pieces down to a centered variance form, and folds the
    feedback into -(KM)^{1/2} Fx / 2 plus expectation-weighted terms; the
    scalar i sqrt(KM) <Fz Fy> piece contributes only a pure phase through
    its imaginary part.  Expectations are normalized here because the Heun
    predictor state is not unit norm.
    """
    nn = float(np.real(np.vdot(amps, amps)))
    y = o.fy @ amps
    mz = o.m * amps
    f = float(np.real(np.vdot(amps, mz))) / nn
    var = float(np.real(np.vdot(mz, mz))) / nn - f * f
    zy = complex(np.vdot(amps, o.m * y)) / nn
    drift = (-1j * omega) * y
    drift -= o.M * (((o.m - f) ** 2) * amps - var * amps)
    drift -= (0.5 * o.skm) * (fx @ amps)
    drift += (2j * o.skm * f) * y
    drift += (1j * o.skm * zy) * amps
    return drift


def _strat_diffusion(o: _SseOps, amps: np.ndarray) -> np.ndarray:
    nn = float(np.real(np.vdot(amps, amps)))
    mz = o.m * amps
    f = float(np.real(np.vdot(amps, mz))) / nn
    return o.root_m * (mz - f * amps) + (1j * o.root_k) * (o.fy @ amps)


def run_sse_generative(
    F: float,
    p: CouplingParams,
    dW_path: np.ndarray,
    dt: float,
    scheme: str = "euler_ito",
    seed_info: Optional[dict] = None,
) -> TrajectoryRecord:
    """Drive the SSE with an exogenous innovations path and emit its record.

    Generative mode: dW is supplied (so matched-noise comparisons across
    parameter sets reuse one path) and dZ = 2 sqrt(M) pi dt + dW is derived.
    scheme selects Euler-Ito or Heun-Stratonovich integration of the
    equivalent equation; both converge to the same trajectory as dt -> 0.
    """
    sde.SdeStepperConfig(dt=dt, scheme=scheme)
    o = _sse_ops(F, p.M, p.K)
    dW_path = np.asarray(dW_path, dtype=float)
    n = dW_path.size
    amps = spin.coherent_state_x(F).amplitudes
    pi = np.empty(n)
    renorm = 0.0
    if scheme == "euler_ito":
        for k in range(n):
            drift, diff, f = _sse_terms(o, amps, p.omega_at(k * dt))
            pi[k] = f
            amps = amps + drift * dt + diff * dW_path[k]
            norm = np.linalg.norm(amps)
            if not np.isfinite(norm) or norm < NORM_FLOOR:
                raise FilterDivergenceError(f"ket norm {norm:.3e}; reduce dt")
            renorm += abs(norm - 1.0)
            amps /= norm
    else:
        fx = _fx_dense(F)
        for k in range(n):
            omega = p.omega_at(k * dt)
            pi[k] = float(np.real(np.vdot(amps, o.m * amps)))
            amps = sde.heun_stratonovich_step(
                amps,
                lambda a: _strat_drift(o, fx, a, omega),
                lambda a: _strat_diffusion(o, a),
                dt,
                dW_path[k],
            )
            norm = np.linalg.norm(amps)
            if not np.isfinite(norm) or norm < NORM_FLOOR:
                raise FilterDivergenceError(f"ket norm {norm:.3e}; reduce dt")
            renorm += abs(norm - 1.0)
            amps /= norm
    root_m = math.sqrt(p.M)
    dZ = 2.0 * root_m * pi * dt + dW_path
    meta = {
        "F": F,
        "M": p.M,
        "K": p.K,
        "gamma": p.gamma,
        "omega": p.omega_at(0.0) if not callable(p.omega_fn) else "callable",
        "dt": dt,
        "scheme": scheme,
        "kind": f"sse_generative_{scheme}",
        "renorm_total": renorm,
        "pi_final": float(np.real(np.vdot(amps, o.m * amps))),
    }
    return TrajectoryRecord(
        times=np.arange(n) * dt,
        dZ=dZ,
        dW=dW_path.copy(),
        pi_fz=pi,
        seed_info=dict(seed_info or {}),
        meta=meta,
    )


class SseBatch:
    """Co-evolving bundle of SSE trajectories with per-column rotation rates.

    All columns share one operator bundle (one F, M, K) and the caller feeds
    each step's per-column innovations, which is what the finite-difference
    bound evaluation and matched-noise ensembles need.  Stepping cost per
    column is two sparse banded matmuls plus elementwise work.
    """

    def __init__(
        self, F: float, M: float, K: float, omegas: np.ndarray, dt: float
    ) -> None:
        sde.SdeStepperConfig(dt=dt)
        self._o = _sse_ops(F, M, K)
        self.omegas = np.asarray(omegas, dtype=float).copy()
        if self.omegas.ndim != 1 or self.omegas.size == 0:
            raise ValueError("omegas must be a non-empty 1-d array")
        self.dt = float(dt)
        amps0 = spin.coherent_state_x(F).amplitudes
        self.psi = np.repeat(amps0[:, None], self.omegas.size, axis=1)
        self.steps_taken = 0

    @property
    def n_columns(self) -> int:
        return self.omegas.size

    def fz_means(self) -> np.ndarray:
        """Per-column <F_z> of the current states."""
        prob = self.psi.real**2 + self.psi.imag**2
        return np.einsum("i,ij->j", self._o.m, prob)

    def step(self, dW: np.ndarray) -> np.ndarray:
        """Advance all columns by one Euler-Ito step; returns pre-step <F_z>."""
        o = self._o
        psi = self.psi
        dW = np.asarray(dW, dtype=float)
        if dW.shape != (self.n_columns,):
            raise ValueError("dW must supply one increment per column")
        y = o.fy_s @ psi
        a = o.a0_s @ psi
        prob = psi.real**2 + psi.imag**2
        f = np.einsum("i,ij->j", o.m, prob)
        mz = o.m[:, None] * psi
        drift = a + (1j * (o.skm * f - self.omegas)) * y + (o.M * f) * mz
        drift -= (0.5 * o.M * f * f) * psi
        diff = o.root_m * (mz - f * psi) + (1j * o.root_k) * y
        psi = psi + drift * self.dt + diff * dW
        norms = np.sqrt(np.einsum("ij,ij->j", psi.real, psi.real)
                        + np.einsum("ij,ij->j", psi.imag, psi.imag))
        if not np.all(np.isfinite(norms)) or np.min(norms) < NORM_FLOOR:
            raise FilterDivergenceError(
                f"batch norm collapse at step {self.steps_taken + 1}; reduce dt"
            )
        self.psi = psi / norms
        self.steps_taken += 1
        return f
