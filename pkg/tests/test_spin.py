"""Operator algebra, coherent/Gaussian states, and tangent-space geometry.

Analytic targets that have an independent derivation (rotation algebra,
binomial coherent state, Holstein-Primakoff values) are checked against
explicitly constructed matrix oracles, never against the module's own
formulas.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doublepass.spin import (
    DIM_CAP,
    DensityMatrix,
    GaussianState,
    StateVector,
    build_collective_ops,
    coherent_state_x,
    expectation,
    gaussian_state_ket,
    m_values,
    rotation_y_matrix,
    tangent_inner_products_numeric,
    tangent_metric,
    variance,
)

SPINS = (0.5, 1.0, 4.0, 10.0)


def rel_frob(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# ---------------------------------------------------------------- operators


def test_fz_diagonal() -> None:
    for F in SPINS:
        ops = build_collective_ops(F)
        np.testing.assert_allclose(np.diag(ops.fz), m_values(F), atol=0)
    np.testing.assert_array_equal(np.diag(build_collective_ops(1.0).fz).real, [1.0, 0.0, -1.0])


def test_commutators() -> None:
    """[fx, fy] = i fz and cyclic permutations, 1e-12 relative Frobenius."""
    for F in SPINS:
        ops = build_collective_ops(F)
        pairs = ((ops.fx, ops.fy, ops.fz), (ops.fy, ops.fz, ops.fx), (ops.fz, ops.fx, ops.fy))
        for a, b, c in pairs:
            assert rel_frob(a @ b - b @ a, 1j * c) < 1e-12


def test_casimir() -> None:
    for F in SPINS:
        ops = build_collective_ops(F)
        total = ops.fx @ ops.fx + ops.fy @ ops.fy + ops.fz @ ops.fz
        target = F * (F + 1.0) * np.eye(ops.dim)
        assert rel_frob(total, target) < 1e-10


def test_hermiticity() -> None:
    for F in SPINS:
        ops = build_collective_ops(F)
        for mat in (ops.fx, ops.fy, ops.fz):
            assert np.max(np.abs(mat - mat.conj().T)) == 0.0


def test_dimension() -> None:
    assert build_collective_ops(100.0).dim == 201
    assert m_values(0.5).shape == (2,)


def test_spin_size_validation() -> None:
    for bad in (0.3, -1.0, 0.0, float("nan"), float("inf")):
        with pytest.raises(ValueError):
            build_collective_ops(bad)
    # dimension cap rejected before any allocation
    with pytest.raises(ValueError, match="cap"):
        m_values((DIM_CAP + 1) / 2.0)


def test_operators_are_readonly() -> None:
    ops = build_collective_ops(1.0)
    with pytest.raises(ValueError):
        ops.fz[0, 0] = 5.0


@given(two_f=st.integers(min_value=1, max_value=30))
@settings(max_examples=30, deadline=None)
def test_ladder_structure_property(two_f: int) -> None:
    """fx couples only adjacent m with the standard ladder amplitudes."""
    F = two_f / 2.0
    ops = build_collective_ops(F)
    m = m_values(F)
    for k in range(ops.dim - 1):
        coup = 0.5 * np.sqrt(F * (F + 1.0) - m[k + 1] * (m[k + 1] + 1.0))
        assert abs(ops.fx[k, k + 1] - coup) < 1e-13
    off = np.abs(ops.fx) * (1.0 - np.eye(ops.dim, k=1)) * (1.0 - np.eye(ops.dim, k=-1))
    assert np.max(off) == 0.0


# ------------------------------------------------------------ coherent state


def test_coherent_state_expectations() -> None:
    ops = build_collective_ops(10.0)
    psi = coherent_state_x(10.0)
    assert abs(psi.norm - 1.0) < 1e-12
    assert abs(expectation(ops.fx, psi) - 10.0) < 1e-10
    assert abs(expectation(ops.fy, psi)) < 1e-12
    assert abs(expectation(ops.fz, psi)) < 1e-12
    assert abs(expectation(build_collective_ops(0.5).fx, coherent_state_x(0.5)) - 0.5) < 1e-14


def test_coherent_state_projection_noise() -> None:
    """Delta F_z = sqrt(F/2): variance of fz is 50 at F=100."""
    ops = build_collective_ops(100.0)
    psi = coherent_state_x(100.0)
    assert abs(variance(ops.fz, psi) - 50.0) < 1e-8
    assert abs(expectation(ops.fz @ ops.fz, psi) - 50.0) < 1e-8


def test_coherent_state_rotation_oracle() -> None:
    """Rotating |F,F>_z by pi/2 about y lands on the +x coherent state."""
    F = 10.0
    top = np.zeros(int(2 * F + 1), dtype=complex)
    top[0] = 1.0
    rotated = rotation_y_matrix(F, np.pi / 2.0) @ top
    np.testing.assert_allclose(rotated, coherent_state_x(F).amplitudes, atol=1e-12)


# -------------------------------------------------------------- gaussian kets


def test_gaussian_ket_identity_limit() -> None:
    ket = gaussian_state_ket(GaussianState(20.0, 0.0, 0.0))
    np.testing.assert_allclose(ket.amplitudes, coherent_state_x(20.0).amplitudes, atol=1e-12)


def test_gaussian_ket_quarter_rotation() -> None:
    ops = build_collective_ops(100.0)
    ket = gaussian_state_ket(GaussianState(100.0, np.pi / 2.0, 0.0))
    assert abs(expectation(ops.fz, ket) + 100.0) < 1e-9


def test_gaussian_ket_matches_exact_rotation() -> None:
    """At xi=0 the ket is exactly R_y(theta) applied to the coherent state."""
    for F, theta in ((20.0, 0.7), (20.0, -2.1), (3.5, 1.2)):
        ket = gaussian_state_ket(GaussianState(F, theta, 0.0)).amplitudes
        oracle = rotation_y_matrix(F, theta) @ coherent_state_x(F).amplitudes
        np.testing.assert_allclose(ket, oracle, atol=1e-9)


def test_gaussian_ket_squeezed_mean() -> None:
    # small squeezing shifts <F_z> from -F sin(theta) at O(1/F); measured
    # offset 1.2e-2 for these parameters
    ops = build_collective_ops(50.0)
    ket = gaussian_state_ket(GaussianState(50.0, 0.3, 1e-3))
    assert abs(expectation(ops.fz, ket) + 50.0 * np.sin(0.3)) < 0.1


@given(
    theta=st.floats(min_value=-np.pi, max_value=np.pi),
    xi=st.floats(min_value=0.0, max_value=2e-3),
)
@settings(max_examples=60, deadline=None)
def test_gaussian_ket_unit_norm(theta: float, xi: float) -> None:
    assert abs(gaussian_state_ket(GaussianState(12.0, theta, xi)).norm - 1.0) < 1e-9


def test_holstein_primakoff_coherent_point() -> None:
    """<F_y^2> = <F_z^2> = F/2 exactly on the coherent state."""
    ops = build_collective_ops(50.0)
    psi = coherent_state_x(50.0)
    assert abs(expectation(ops.fy @ ops.fy, psi) - 25.0) < 1e-9
    assert abs(expectation(ops.fz @ ops.fz, psi) - 25.0) < 1e-9


# ------------------------------------------------------------ tangent metric


def test_tangent_products_coherent_point() -> None:
    vtt, vxx, vxt = tangent_inner_products_numeric(GaussianState(50.0, 0.0, 0.0))
    assert abs(vtt - 25.0) / 25.0 < 1e-6
    assert abs(vxt) < 1e-6


def test_tangent_products_match_analytic() -> None:
    """Numeric tangent products within 5% of F e^{8 F xi}/2, 8 F^2, 0.

    The measured gaps at F=50 are 0.5% on the theta block (growth of the
    exponential) and exactly 1/(2F) on the xi block, both inside the
    validated 5% band.
    """
    for theta in (0.0, 0.4):
        for xi in (5e-4, 1e-3):
            g = GaussianState(50.0, theta, xi)
            vtt, vxx, vxt = tangent_inner_products_numeric(g)
            att, axx, _ = tangent_metric(g)
            assert abs(vtt - att) / att < 0.05
            assert abs(vxx - axx) / axx < 0.05
            assert abs(vxt) / np.sqrt(vtt * vxx) < 1e-6


def test_tangent_metric_guard() -> None:
    with pytest.raises(ValueError, match="validated range"):
        tangent_metric(GaussianState(50.0, 0.0, 0.2))


def test_tangent_step_validation() -> None:
    with pytest.raises(ValueError):
        tangent_inner_products_numeric(GaussianState(10.0, 0.0, 0.0), dpar=0.0)


# --------------------------------------------------------------- expectation


def test_expectation_trivials() -> None:
    ops = build_collective_ops(10.0)
    psi = coherent_state_x(10.0)
    assert abs(expectation(ops.fz, psi)) < 1e-12
    assert abs(expectation(ops.fx, psi) - 10.0) < 1e-10


def test_expectation_density_matrix_route() -> None:
    ops = build_collective_ops(4.0)
    psi = coherent_state_x(4.0)
    rho = DensityMatrix(4.0, np.outer(psi.amplitudes, psi.amplitudes.conj()))
    assert abs(expectation(ops.fx, rho) - expectation(ops.fx, psi)) < 1e-12
    assert abs(variance(ops.fz, rho) - variance(ops.fz, psi)) < 1e-12


def test_expectation_errors() -> None:
    ops = build_collective_ops(10.0)
    psi = coherent_state_x(10.0)
    with pytest.raises(ValueError, match="dimensions"):
        expectation(build_collective_ops(4.0).fz, psi)
    with pytest.raises(ValueError, match="imaginary residue"):
        expectation(1j * np.triu(ops.fx), psi)


# --------------------------------------------------------------- state types


def test_state_vector_validation() -> None:
    with pytest.raises(ValueError):
        StateVector(1.0, np.ones(2, dtype=complex))
    with pytest.raises(ValueError):
        StateVector(1.0, np.array([np.nan, 0.0, 0.0], dtype=complex))
    sv = StateVector(1.0, np.array([2.0, 0.0, 0.0], dtype=complex))
    assert abs(sv.normalized().norm - 1.0) < 1e-15


def test_density_matrix_diagnostics() -> None:
    psi = coherent_state_x(2.0).amplitudes
    rho = DensityMatrix(2.0, np.outer(psi, psi.conj()))
    assert rho.hermiticity_error() == 0.0
    assert rho.trace_error() < 1e-12
    assert rho.min_eigenvalue() > -1e-9
    assert abs(rho.purity() - 1.0) < 1e-12
    with pytest.raises(ValueError):
        DensityMatrix(2.0, np.zeros((3, 3), dtype=complex))


def test_gaussian_state_validation() -> None:
    with pytest.raises(ValueError):
        GaussianState(10.0, float("nan"), 0.0)
    with pytest.raises(ValueError, match="too large"):
        GaussianState(100.0, 0.0, 1.0)
