"""Spectral simulator and coupling diagnostics for the damped stochastic
cubic nonlinear Schroedinger equation on (0,1)."""

from .spectral import (
    SpectralSpace,
    SpectralField,
    eigenvalue,
    project_low,
    project_high,
    sobolev_norm,
    cubic_nonlinearity,
    lp_norm,
    zero_field,
    mode_field,
)
from .noise import (
    NoiseSpec,
    NoisePath,
    NoiseStream,
    make_noise_spec,
    noise_spec_from_b,
    sample_increment,
    sample_path,
    sigma_l_inverse_apply,
    stream,
)
from .integrator import (
    SolverConfig,
    Trajectory,
    step,
    simulate,
    simulate_synchronized,
    replay,
)
from .functionals import (
    FunctionalConstants,
    hamiltonian,
    hamiltonian_star,
    calibrate_c0,
    calibrate_c1,
    calibrate_constants,
    energy_E,
    coupling_J,
    l_weight,
    foias_prodi_series,
    field_with_hamiltonian,
)
from .coupling import (
    CouplingParams,
    L0Record,
    GirsanovAccumulator,
    EpochOutcome,
    CoupledRun,
    maximal_coupling_discrete,
    tv_discrete,
    girsanov_log_weight,
    couple_case_a,
    couple_case_b,
    advance_l0,
    run_coupled,
    run_coupled_ensemble,
)
from .experiments import wasserstein_bl, RunContext

__version__ = "0.1.0"
