//! Numerical study of Anderson-localized, time quasi-periodic solutions of
//! the nonlinear Maryland model
//!
//! ```text
//! i du/dt = (eps Delta + cot(pi(theta + j.alpha))) u + delta |u|^{2p} u
//! ```
//!
//! on finite truncations of the d-dimensional integer lattice. The crate
//! builds the linear spectral data (localized eigenpairs labelled by lattice
//! site), verifies the separation and transversality conditions that make the
//! small divisors controllable, and runs a Newton iteration coupled with a
//! frequency correction to produce time quasi-periodic solutions, together
//! with Green's-function probes of the linearized operators.

pub mod green;
pub mod lattice;
pub mod matching;
pub mod resonance;
pub mod rng;
pub mod solver;
pub mod spectrum;

pub use green::{
    classify_boxes, green_norm_and_decay, ldt_measure_bound, ldt_norm_threshold, ldt_probe,
    ldt_scale_sweep, neumann_verify, resolvent_reconstruct_check, BoxClassification, GreenError,
    GreenReport, LdtConfig, LdtProbeReport, LdtSweep, MonotonicityCheck, NeumannReport,
    ReconstructReport, SigmaWitness,
};
pub use lattice::{
    elementary_region_family, enumerate_region, l1_norm, linf_norm, torus_norm, Cut, LatticeError,
    ModeIndex, ModeSet, Region, Sign, Site, DEFAULT_MODE_CAP,
};
pub use resonance::{
    base_frequencies, check_first_melnikov, check_magnitude_bounds, check_omega_hypotheses,
    check_pair_separation, check_second_melnikov, melnikov_threshold, monte_carlo_failures,
    omega_scale_threshold, pair_separation_threshold, transversality_scan, McSummary,
    OmegaLadderRung, PredicateEntry, ResonanceError, SeparationReport, TransversalityReport,
    Witness,
};
pub use solver::{
    cwb_solve, decay_fit, evaluate_time_domain, linearized_operator, main_coefficients,
    newton_step, nonlinear_term, nonlinear_term_uv, q_update, residual, time_residual, Anchor,
    Coeffs, CoeffsData, DecayFit, NewtonState, OverlapTensor, Residual, ResonantSet,
    SolutionReport, SolverConfig, SolverError, TwoSectorOperator, OVERLAP_DROP_TOL,
};
pub use spectrum::{
    build_hamiltonian, center_equidistribution, check_symmetry, check_translation_covariance,
    cot_pi, diagonalize_and_relabel, diophantine_check, eigenvalue_profile, poisson_consistency,
    pole_free_grid, rellich_iterate, DiophantineReport, EigenSystem, EigenvalueProfile,
    MarylandParams, RellichTrace, SpectrumError, GOLDEN_RATIO_FREQ,
};
