"""Double-passed collective spin measurement: filters, bounds, estimators.

The package simulates a collective atomic spin that is measured
continuously while the measured observable is fed back coherently to
amplify its own precession.  It provides the exact conditional dynamics
(ket and density-matrix forms), a two-parameter Gaussian projection of
them, finite-difference information bounds for field estimation, a
grid-based quantum particle filter, Monte Carlo sweep drivers, and a
batch command line with reproducible manifests.
"""

__version__ = "0.1.0"

from .ensemble import (
    BiasScanResult,
    ScanAbortedError,
    ScanConfig,
    ScanResult,
    bias_convergence_scan,
    fit_power_law,
    gaussian_fit,
    run_scan,
)
from .estimation import (
    SCHEDULE_ALPHA,
    SCHEDULE_C,
    BoundUnresolvedError,
    CrbConfig,
    ParticleEnsemble,
    coupling_schedule,
    crb_bound,
    estimate_field,
    heisenberg_bound,
    init_prior_grid,
    run_particle_filter,
    shotnoise_bound,
)
from .filters import (
    CouplingParams,
    FilterDivergenceError,
    TrajectoryRecord,
    run_filter,
    run_sse_generative,
    simulate_truth_record,
)
from .sde import VALID_SCHEMES, NoiseStream
from .spin import (
    DensityMatrix,
    GaussianState,
    SpinOps,
    StateVector,
    build_collective_ops,
    coherent_state_x,
)

__all__ = [
    "__version__",
    "BiasScanResult",
    "BoundUnresolvedError",
    "CouplingParams",
    "CrbConfig",
    "DensityMatrix",
    "FilterDivergenceError",
    "GaussianState",
    "NoiseStream",
    "ParticleEnsemble",
    "SCHEDULE_ALPHA",
    "SCHEDULE_C",
    "ScanAbortedError",
    "ScanConfig",
    "ScanResult",
    "SpinOps",
    "StateVector",
    "TrajectoryRecord",
    "VALID_SCHEMES",
    "bias_convergence_scan",
    "build_collective_ops",
    "coherent_state_x",
    "coupling_schedule",
    "crb_bound",
    "estimate_field",
    "fit_power_law",
    "gaussian_fit",
    "heisenberg_bound",
    "init_prior_grid",
    "run_filter",
    "run_particle_filter",
    "run_scan",
    "run_sse_generative",
    "shotnoise_bound",
    "simulate_truth_record",
]
