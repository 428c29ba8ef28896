"""Collective spin operators and Gaussian states on the symmetric subspace.

An ensemble of 2F spin-1/2 atoms prepared and probed symmetrically behaves
as a single spin of size F.  Everything here acts on the (2F+1)-dimensional
irreducible subspace in the F_z eigenbasis, ordered m = F, F-1, ..., -F, so
that F_z is diagonal and F_x, F_y are real/imaginary tridiagonal matrices.

The rotated and squeezed family used by the reduced (Gaussian) filter is

    |theta, xi> = R_y(theta) S(xi) |F, +F>_x

with R_y(theta) = exp(-i theta F_y) and S(xi) = exp(-2i xi (Fz Fy + Fy Fz))
acting on the spin coherent state polarised along +x.  For F >> 1 the family
is well approximated by a Gaussian wave packet in the F_z quadrature, which
is what makes the two-parameter filter work.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

DIM_CAP = 4001  # largest symmetric-subspace dimension we build


def _subspace_dim(F: float) -> int:
    """Validate the spin size and return the subspace dimension 2F+1."""
    if not np.isfinite(F) or F <= 0:
        raise ValueError(f"spin size must be a positive half-integer, got {F!r}")
    two_f = round(2.0 * F)
    if abs(2.0 * F - two_f) > 1e-9 or two_f < 1:
        raise ValueError(f"spin size must be a positive half-integer, got {F!r}")
    dim = two_f + 1
    if dim > DIM_CAP:
        raise ValueError(f"subspace dimension {dim} exceeds cap {DIM_CAP}")
    return dim


def m_values(F: float) -> np.ndarray:
    """Magnetic quantum numbers F, F-1, ..., -F in basis order."""
    dim = _subspace_dim(F)
    return F - np.arange(dim, dtype=float)


@dataclass(frozen=True)
class SpinOps:
    """Dense collective spin matrices for one value of F.

    Attributes
    ----------
    F : float
        Spin size (half-integer).
    fx, fy, fz : np.ndarray
        Cartesian spin components, complex128, shape (2F+1, 2F+1).
        fz is diagonal with entries F..-F; fx and fy are tridiagonal.
    """

    F: float
    fx: np.ndarray
    fy: np.ndarray
    fz: np.ndarray

    @property
    def dim(self) -> int:
        return self.fz.shape[0]

    @property
    def fz_diag(self) -> np.ndarray:
        """Diagonal of F_z as a real vector (fast path for expectations)."""
        return np.real(np.diag(self.fz))


@functools.lru_cache(maxsize=8)
def build_collective_ops(F: float) -> SpinOps:
    """Build the collective spin matrices for spin size F.

    The ladder operator F+ has matrix elements
    <F,m+1| F+ |F,m> = sqrt(F(F+1) - m(m+1)); fx and fy follow from
    fx = (F+ + F-)/2 and fy = (F+ - F-)/(2i).  Arrays are returned
    read-only so a cached instance can be shared across threads.
    """
    dim = _subspace_dim(F)
    m = m_values(F)
    # superdiagonal entry [k-1, k] couples m_k -> m_k + 1
    coup = np.sqrt(F * (F + 1.0) - m[1:] * (m[1:] + 1.0))
    fp = np.diag(coup.astype(complex), k=1)
    fm = fp.conj().T
    fx = (fp + fm) / 2.0
    fy = (fp - fm) / 2.0j
    fz = np.diag(m.astype(complex))
    for arr in (fx, fy, fz):
        arr.setflags(write=False)
    return SpinOps(F=F, fx=fx, fy=fy, fz=fz)


@dataclass
class StateVector:
    """Pure state over the F_z basis (amplitudes ordered m = F..-F)."""

    F: float
    amplitudes: np.ndarray

    def __post_init__(self) -> None:
        dim = _subspace_dim(self.F)
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (dim,):
            raise ValueError(
                f"amplitude vector has shape {amps.shape}, expected ({dim},)"
            )
        if not np.all(np.isfinite(amps)):
            raise ValueError("amplitudes contain NaN or Inf")
        self.amplitudes = amps

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        return StateVector(self.F, self.amplitudes / self.norm)


@dataclass
class DensityMatrix:
    """Mixed state on the symmetric subspace."""

    F: float
    rho: np.ndarray

    def __post_init__(self) -> None:
        dim = _subspace_dim(self.F)
        rho = np.asarray(self.rho, dtype=complex)
        if rho.shape != (dim, dim):
            raise ValueError(f"rho has shape {rho.shape}, expected ({dim}, {dim})")
        if not np.all(np.isfinite(rho)):
            raise ValueError("rho contains NaN or Inf")
        self.rho = rho

    def hermiticity_error(self) -> float:
        return float(np.max(np.abs(self.rho - self.rho.conj().T)))

    def trace_error(self) -> float:
        return abs(np.trace(self.rho) - 1.0)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh((self.rho + self.rho.conj().T) / 2.0)[0])

    def purity(self) -> float:
        return float(np.real(np.trace(self.rho @ self.rho)))


@dataclass(frozen=True)
class GaussianState:
    """Rotation angle and squeezing parameter of the two-parameter family."""

    F: float
    theta: float
    xi: float

    def __post_init__(self) -> None:
        _subspace_dim(self.F)
        if not (np.isfinite(self.theta) and np.isfinite(self.xi)):
            raise ValueError("theta and xi must be finite")
        # keep exp(8 F xi) representable for the analytic metric
        if 8.0 * self.F * abs(self.xi) > 700.0:
            raise ValueError(f"|xi|*F = {abs(self.xi) * self.F:.3g} too large")


def coherent_state_x(F: float) -> StateVector:
    """Spin coherent state polarised along +x, in the F_z basis.

    Amplitudes are binomial, c_k = 2^-F sqrt(C(2F, k)) with k = F - m,
    evaluated in log space so spins up to the dimension cap stay finite.
    """
    dim = _subspace_dim(F)
    two_f = dim - 1
    k = np.arange(dim, dtype=float)
    log_amp = (
        -two_f * 0.5 * np.log(2.0)
        + 0.5 * (gammaln(two_f + 1.0) - gammaln(k + 1.0) - gammaln(two_f - k + 1.0))
    )
    return StateVector(F, np.exp(log_amp).astype(complex))


@functools.lru_cache(maxsize=8)
def _fy_eig(F: float) -> tuple[np.ndarray, np.ndarray]:
    ops = build_collective_ops(F)
    w, v = np.linalg.eigh(ops.fy)
    w.setflags(write=False)
    v.setflags(write=False)
    return w, v


@functools.lru_cache(maxsize=8)
def _squeeze_generator_eig(F: float) -> tuple[np.ndarray, np.ndarray]:
    ops = build_collective_ops(F)
    gen = 2.0 * (ops.fz @ ops.fy + ops.fy @ ops.fz)
    w, v = np.linalg.eigh(gen)
    w.setflags(write=False)
    v.setflags(write=False)
    return w, v


def rotation_y_matrix(F: float, theta: float) -> np.ndarray:
    """Unitary R_y(theta) = exp(-i theta F_y)."""
    w, v = _fy_eig(F)
    return (v * np.exp(-1j * theta * w)) @ v.conj().T


def gaussian_state_ket(g: GaussianState) -> StateVector:
    """Explicit ket of |theta, xi> = R_y(theta) S(xi) |F,+F>_x.

    Both unitaries are applied through cached eigendecompositions of their
    Hermitian generators, so the result is exactly unitary for any finite
    parameters (no scaling-and-squaring overflow).
    """
    psi = coherent_state_x(g.F).amplitudes
    w, v = _squeeze_generator_eig(g.F)
    psi = v @ (np.exp(-1j * g.xi * w) * (v.conj().T @ psi))
    w, v = _fy_eig(g.F)
    psi = v @ (np.exp(-1j * g.theta * w) * (v.conj().T @ psi))
    return StateVector(g.F, psi)


def expectation(op: np.ndarray, state: StateVector | DensityMatrix) -> float:
    """Real expectation value of a Hermitian operator.

    Raises if the imaginary residue exceeds 1e-6, which catches both
    non-Hermitian operators and badly degraded states.
    """
    op = np.asarray(op)
    if isinstance(state, StateVector):
        if op.shape != (state.amplitudes.size,) * 2:
            raise ValueError("operator and state dimensions differ")
        raw = complex(np.vdot(state.amplitudes, op @ state.amplitudes))
    elif isinstance(state, DensityMatrix):
        if op.shape != state.rho.shape:
            raise ValueError("operator and state dimensions differ")
        raw = complex(np.trace(op @ state.rho))
    else:
        raise TypeError(f"unsupported state type {type(state).__name__}")
    if abs(raw.imag) > 1e-6:
        raise ValueError(f"imaginary residue {raw.imag:.3e} in expectation value")
    return raw.real


def variance(op: np.ndarray, state: StateVector | DensityMatrix) -> float:
    """Variance <op^2> - <op>^2 of a Hermitian operator."""
    op = np.asarray(op)
    mean = expectation(op, state)
    second = expectation(op @ op, state)
    return second - mean * mean


def tangent_inner_products_numeric(
    g: GaussianState, dpar: float = 1e-6
) -> tuple[float, float, complex]:
    """Central-difference tangent inner products (<v_t,v_t>, <v_x,v_x>, <v_x,v_t>).

    Builds the tangent kets v_theta and v_xi by central differences of the
    explicit ket map and returns their pairwise inner products.  Used by the
    test suite to validate the closed-form metric below without sharing any
    code with it.
    """
    if not (0.0 < dpar < 1e-2):
        raise ValueError("dpar must be a small positive step")

    def ket(theta: float, xi: float) -> np.ndarray:
        return gaussian_state_ket(GaussianState(g.F, theta, xi)).amplitudes

    v_theta = (ket(g.theta + dpar, g.xi) - ket(g.theta - dpar, g.xi)) / (2.0 * dpar)
    v_xi = (ket(g.theta, g.xi + dpar) - ket(g.theta, g.xi - dpar)) / (2.0 * dpar)
    return (
        float(np.real(np.vdot(v_theta, v_theta))),
        float(np.real(np.vdot(v_xi, v_xi))),
        complex(np.vdot(v_xi, v_theta)),
    )


def tangent_metric(g: GaussianState) -> tuple[float, float, float]:
    """Closed-form tangent inner products (<v_t,v_t>, <v_x,v_x>, <v_x,v_t>).

    Valid in the Gaussian regime; rejected outside xi*F <= 8 where the
    approximation has not been validated.
    """
    if g.xi * g.F > 8.0:
        raise ValueError(f"xi*F = {g.xi * g.F:.3g} outside validated range")
    theta_theta = 0.5 * g.F * np.exp(8.0 * g.F * g.xi)
    xi_xi = 8.0 * g.F * g.F
    return theta_theta, xi_xi, 0.0
