//! Per-command pipelines. Each command validates its configuration, runs the
//! corresponding computation end to end, and writes self-describing JSON/CSV
//! artifacts (schema version, resolved config, thresholds) into the output
//! directory. All pipelines are deterministic for a fixed config and seed.

use crate::artifacts::{format_float, write_csv, write_json, SCHEMA_VERSION};
use crate::config::{ConfigError, ExperimentConfig};
use maryland_core::{
    base_frequencies, check_first_melnikov, check_magnitude_bounds, check_omega_hypotheses,
    check_pair_separation, check_second_melnikov, check_symmetry, check_translation_covariance,
    cot_pi, cwb_solve, diagonalize_and_relabel, diophantine_check, eigenvalue_profile,
    ldt_scale_sweep, melnikov_threshold, pole_free_grid, rng, time_residual, Anchor, Coeffs,
    EigenSystem, GreenError, LdtConfig, MarylandParams, PredicateEntry, Region, ResonanceError,
    ResonantSet, Site, SolutionReport, SolverConfig, SolverError, SpectrumError,
};
use rand::Rng;
use serde::Serialize;
use serde_json::Value;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("artifact I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("no artifacts found in {0}")]
    MissingArtifacts(PathBuf),
    #[error("corrupt artifact {path}: {message}")]
    CorruptArtifact { path: PathBuf, message: String },
    #[error("solver did not converge: {message}")]
    Convergence {
        message: String,
        history: Vec<f64>,
    },
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Io(_)
            | PipelineError::MissingArtifacts(_)
            | PipelineError::CorruptArtifact { .. } => crate::exit_codes::CONFIG_ERROR,
            PipelineError::Convergence { .. } => crate::exit_codes::CONVERGENCE_FAILURE,
            PipelineError::Invariant(_) => crate::exit_codes::INVARIANT_VIOLATION,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Config(e) => e.code(),
            PipelineError::Io(_) => "io",
            PipelineError::MissingArtifacts(_) => "missing-artifacts",
            PipelineError::CorruptArtifact { .. } => "corrupt-artifact",
            PipelineError::Convergence { .. } => "did-not-converge",
            PipelineError::Invariant(_) => "invariant-violation",
        }
    }

    /// Machine-readable failure payload for `failure.json`.
    pub fn failure_json(&self, command: &str) -> Value {
        let mut details = serde_json::Map::new();
        if let PipelineError::Convergence { history, .. } = self {
            details.insert(
                "residual_history".into(),
                Value::Array(history.iter().map(|&r| r.into()).collect()),
            );
        }
        serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "error": {
                "code": self.code(),
                "message": self.to_string(),
                "details": Value::Object(details),
            },
        })
    }
}

impl From<SpectrumError> for PipelineError {
    fn from(e: SpectrumError) -> Self {
        match e {
            SpectrumError::InvalidParams(m) => {
                PipelineError::Config(ConfigError::InvalidValue(m))
            }
            other => PipelineError::Invariant(other.to_string()),
        }
    }
}

impl From<ResonanceError> for PipelineError {
    fn from(e: ResonanceError) -> Self {
        match e {
            ResonanceError::InvalidScan(m) => {
                PipelineError::Config(ConfigError::InvalidValue(m))
            }
            other => PipelineError::Invariant(other.to_string()),
        }
    }
}

impl From<SolverError> for PipelineError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::DidNotConverge { ref history, .. } => PipelineError::Convergence {
                message: e.to_string(),
                history: history.clone(),
            },
            SolverError::NoProgress { previous, current } => PipelineError::Convergence {
                message: e.to_string(),
                history: vec![previous, current],
            },
            SolverError::IllConditioned { .. } => PipelineError::Convergence {
                message: e.to_string(),
                history: vec![],
            },
            SolverError::InvalidConfig(m) => {
                PipelineError::Config(ConfigError::InvalidValue(m))
            }
            other => PipelineError::Invariant(other.to_string()),
        }
    }
}

impl From<GreenError> for PipelineError {
    fn from(e: GreenError) -> Self {
        match e {
            GreenError::InvalidProbe(m) => PipelineError::Config(ConfigError::InvalidValue(m)),
            GreenError::Solver(inner) => inner.into(),
            other => PipelineError::Invariant(other.to_string()),
        }
    }
}

/// One hard-invariant line of an artifact.
#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub id: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckLine {
    fn new(id: &str, value: f64, tolerance: f64) -> Self {
        CheckLine {
            id: id.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

/// Predicate block: soft conditions reported with an overall status; their
/// failure never fails the command.
#[derive(Debug, Clone, Serialize)]
pub struct PredicateBlock {
    pub status: String,
    pub entries: Vec<PredicateEntry>,
}

impl PredicateBlock {
    fn new(entries: Vec<PredicateEntry>) -> Self {
        let status = if entries.iter().all(|e| e.holds) {
            "passed".to_string()
        } else {
            "failed".to_string()
        };
        PredicateBlock { status, entries }
    }
}

// Soft predicate failures warn on stderr; the command still succeeds and the
// artifact records which entries failed.
fn warn_if_failed(command: &str, block: &PredicateBlock) {
    if block.status == "failed" {
        let ids: Vec<&str> = block
            .entries
            .iter()
            .filter(|e| !e.holds)
            .map(|e| e.id.as_str())
            .collect();
        eprintln!(
            "{command}: warning: predicates failed: {}",
            ids.join(", ")
        );
    }
}

const HARD_EIGEN_TOL: f64 = 1e-8;
const HARD_SYMMETRY_TOL: f64 = 1e-10;
const GRID_POLE_MARGIN: f64 = 1e-3;

fn diagonalize(params: &MarylandParams, radius: i64) -> Result<EigenSystem, PipelineError> {
    let region = Region::centered_box(params.d, radius);
    Ok(diagonalize_and_relabel(params, &region)?)
}

fn betas_from_config(cfg: &ExperimentConfig) -> Vec<Site> {
    match &cfg.solver {
        Some(s) => s
            .anchors
            .iter()
            .map(|a| Site::new(a.beta.clone()))
            .collect(),
        None => vec![Site::origin(cfg.model.d)],
    }
}

fn spectrum_predicates(
    cfg: &ExperimentConfig,
    params: &MarylandParams,
    eigsys: &EigenSystem,
) -> PredicateBlock {
    let radius = cfg.model.radius;
    let dio = diophantine_check(&params.alpha, params.gamma, params.tau, 2 * radius);
    let dio_entry = PredicateEntry {
        id: "diophantine".into(),
        holds: dio.holds,
        threshold: params.gamma,
        worst_margin: dio.worst_margin,
        strict: false,
        witness: Some(maryland_core::Witness {
            n: vec![],
            j: dio.worst_site.clone(),
            j_prime: None,
            value: dio.worst_margin,
        }),
        range: format!("|j|_1 <= {}", dio.j_max),
        trivial_degenerate: 0,
    };
    let mut entries = vec![dio_entry, check_pair_separation(eigsys, radius)];
    entries.extend(check_magnitude_bounds(eigsys, radius));
    PredicateBlock::new(entries)
}

#[derive(Serialize)]
struct SpectrumArtifact<'a> {
    schema_version: &'static str,
    command: &'static str,
    config: &'a ExperimentConfig,
    params: &'a MarylandParams,
    site_count: usize,
    sites: Vec<Vec<i64>>,
    mu: Vec<f64>,
    matching_quality_min: f64,
    fallback_used: bool,
    hard_invariants: Vec<CheckLine>,
    predicates: &'a PredicateBlock,
}

#[derive(Serialize)]
struct SymmetryArtifact<'a> {
    schema_version: &'static str,
    command: &'static str,
    config: &'a ExperimentConfig,
    symmetry_defect: f64,
    covariance: Vec<CovarianceLine>,
    tolerance: f64,
    passed: bool,
}

#[derive(Serialize)]
struct CovarianceLine {
    shift: Vec<i64>,
    defect: f64,
}

/// Spectrum command: diagonalize, check hard invariants, profile `E(theta)`
/// against the potential, and report the soft predicates.
pub fn run_spectrum(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    let params = cfg.params();
    params.validate()?;
    let radius = cfg.model.radius;
    let eigsys = diagonalize(&params, radius)?;

    // Hard invariants: diagonalization quality and exact symmetries.
    let sym = check_symmetry(&params, &Region::centered_box(params.d, radius))?;
    let mut covariance = Vec::new();
    let mut worst_cov = 0.0f64;
    let mut rng = rng::substream(cfg.probes.seed, "covariance-shifts");
    for k in 0..4 {
        let shift: Vec<i64> = if k < 2 {
            // Unit shift along axis k mod d.
            (0..params.d)
                .map(|i| if i == k % params.d { 1 } else { 0 })
                .collect()
        } else {
            (0..params.d).map(|_| rng.random_range(-3..=3)).collect()
        };
        let defect = check_translation_covariance(&params, radius.min(8), &shift)?;
        worst_cov = worst_cov.max(defect);
        covariance.push(CovarianceLine { shift, defect });
    }
    let hard = vec![
        CheckLine::new("eigen-residual", eigsys.max_residual, HARD_EIGEN_TOL),
        CheckLine::new("gram-defect", eigsys.max_gram_defect, HARD_EIGEN_TOL),
        CheckLine::new("symmetry-defect", sym.max_defect, HARD_SYMMETRY_TOL),
        CheckLine::new("covariance-defect", worst_cov, HARD_SYMMETRY_TOL),
    ];

    let predicates = spectrum_predicates(cfg, &params, &eigsys);
    warn_if_failed("spectrum", &predicates);

    let artifact = SpectrumArtifact {
        schema_version: SCHEMA_VERSION,
        command: "spectrum",
        config: cfg,
        params: &params,
        site_count: eigsys.site_count(),
        sites: eigsys.sites.iter().map(|s| s.coords.clone()).collect(),
        mu: eigsys.mu.clone(),
        matching_quality_min: eigsys
            .matching_quality
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min),
        fallback_used: eigsys.fallback_used,
        hard_invariants: hard.clone(),
        predicates: &predicates,
    };
    let mut written = vec![write_json(out, "eigensystem.json", &artifact)?];

    // E(theta) profile over a pole-free grid.
    let grid = pole_free_grid(&params, radius, cfg.model.grid_points, GRID_POLE_MARGIN);
    let profile = eigenvalue_profile(&params, radius, &grid)?;
    let rows: Vec<Vec<String>> = profile
        .thetas
        .iter()
        .zip(&profile.e_values)
        .map(|(&t, &e)| {
            vec![
                format_float(t),
                format_float(e),
                format_float(cot_pi(t)),
                format_float((e - cot_pi(t)).abs()),
            ]
        })
        .collect();
    written.push(write_csv(
        out,
        "eigenvalue_profile.csv",
        &["theta", "e_value", "cot_pi_theta", "abs_deviation"],
        &rows,
    )?);

    let sym_artifact = SymmetryArtifact {
        schema_version: SCHEMA_VERSION,
        command: "spectrum",
        config: cfg,
        symmetry_defect: sym.max_defect,
        covariance,
        tolerance: HARD_SYMMETRY_TOL,
        passed: hard.iter().all(|c| c.passed),
    };
    written.push(write_json(out, "symmetry_report.json", &sym_artifact)?);

    if let Some(bad) = hard.iter().find(|c| !c.passed) {
        return Err(PipelineError::Invariant(format!(
            "{} = {:e} exceeds {:e}",
            bad.id, bad.value, bad.tolerance
        )));
    }
    Ok(written)
}

#[derive(Serialize)]
struct SeparationArtifact<'a> {
    schema_version: &'static str,
    command: &'static str,
    config: &'a ExperimentConfig,
    params: &'a MarylandParams,
    delta: f64,
    melnikov_threshold: f64,
    predicates: PredicateBlock,
    omega0: Vec<f64>,
    omega_ladder: Vec<maryland_core::OmegaLadderRung>,
    transversality: maryland_core::TransversalityReport,
    monte_carlo: maryland_core::McSummary,
}

/// Separation command: the eigenvalue separation, Melnikov, and
/// transversality predicates plus a Monte Carlo failure fraction.
pub fn run_separation(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    let params = cfg.params();
    params.validate()?;
    let radius = cfg.model.radius;
    let eigsys = diagonalize(&params, radius)?;
    let betas = betas_from_config(cfg);
    let delta = cfg.solver.as_ref().map(|s| s.delta).unwrap_or(1e-3);
    let threshold = melnikov_threshold(delta);
    let range = radius.min(6);

    let mut entries = spectrum_predicates(cfg, &params, &eigsys).entries;
    entries.extend(check_first_melnikov(&eigsys, &betas, range, threshold)?);
    entries.push(check_second_melnikov(&eigsys, &betas, range, threshold)?);
    let omega0 = base_frequencies(&eigsys, &betas)?;
    let (ladder, ladder_entries) =
        check_omega_hypotheses(&omega0, &eigsys, radius, 2.min(radius), 20.0)?;
    entries.extend(ladder_entries);

    let theta_grid = pole_free_grid(&params, radius, 64, GRID_POLE_MARGIN);
    let scan_sites: Vec<Site> = vec![
        Site::origin(params.d),
        Site::new(
            (0..params.d)
                .map(|i| if i == 0 { 1 } else { 0 })
                .collect::<Vec<i64>>(),
        ),
    ];
    // One combination coefficient per scanned site.
    let k: Vec<i64> = vec![1; scan_sites.len()];
    let transversality = maryland_core::transversality_scan(
        &params.alpha,
        &theta_grid,
        &k,
        &scan_sites,
    )?;
    let monte_carlo = maryland_core::monte_carlo_failures(
        &params,
        radius.min(6),
        &betas,
        range,
        delta,
        cfg.probes.mc_samples,
        cfg.probes.seed,
    )?;

    let predicates = PredicateBlock::new(entries);
    warn_if_failed("separation", &predicates);
    let witness_rows: Vec<Vec<String>> = predicates
        .entries
        .iter()
        .map(|e| {
            let (site, value) = match &e.witness {
                Some(w) => (format!("{:?}", w.j), format_float(w.value)),
                None => ("-".into(), "-".into()),
            };
            vec![
                e.id.clone(),
                e.holds.to_string(),
                format_float(e.threshold),
                format_float(e.worst_margin),
                site,
                value,
            ]
        })
        .collect();

    let artifact = SeparationArtifact {
        schema_version: SCHEMA_VERSION,
        command: "separation",
        config: cfg,
        params: &params,
        delta,
        melnikov_threshold: threshold,
        predicates,
        omega0,
        omega_ladder: ladder,
        transversality,
        monte_carlo,
    };
    let written = vec![
        write_json(out, "separation.json", &artifact)?,
        write_csv(
            out,
            "separation_witnesses.csv",
            &["predicate", "holds", "threshold", "worst_margin", "witness_site", "witness_value"],
            &witness_rows,
        )?,
    ];
    Ok(written)
}

#[derive(Serialize)]
struct SolutionArtifact<'a> {
    schema_version: &'static str,
    command: &'static str,
    config: &'a ExperimentConfig,
    params: &'a MarylandParams,
    preflight: PredicateBlock,
    report: &'a SolutionReport,
}

#[derive(Serialize)]
struct TimeResidualArtifact<'a> {
    schema_version: &'static str,
    command: &'static str,
    config: &'a ExperimentConfig,
    times: Vec<f64>,
    residuals: Vec<f64>,
    max_residual: f64,
}

fn solver_config(cfg: &ExperimentConfig) -> Result<SolverConfig, PipelineError> {
    let s = cfg.solver_section()?;
    let anchors: Vec<Anchor> = s
        .anchors
        .iter()
        .enumerate()
        .map(|(k, a)| {
            Ok(Anchor {
                beta: a.beta.clone(),
                a: a.a.ok_or(ConfigError::MissingAnchorAmplitude(k))?,
            })
        })
        .collect::<Result<_, ConfigError>>()?;
    let resonant = ResonantSet::new(anchors).map_err(PipelineError::from)?;
    let mut solver = SolverConfig::desk(resonant, s.delta);
    solver.p = s.p;
    solver.m_mult = s.m as i64;
    solver.tol = s.tol;
    solver.max_steps = s.max_r;
    solver.seed = cfg.probes.seed;
    Ok(solver)
}

fn preflight_predicates(cfg: &ExperimentConfig, eigsys: &EigenSystem) -> PredicateBlock {
    let params = &eigsys.params;
    let radius = cfg.model.radius;
    let mut entries = vec![check_pair_separation(eigsys, radius)];
    entries.extend(check_magnitude_bounds(eigsys, radius));
    if params.eps > 0.0 {
        // Localization quality of the interior labels.
        let sqrt_eps = params.eps.sqrt();
        let margin = 4i64;
        let mut worst_peak = 0.0f64;
        let mut worst_slope = f64::NEG_INFINITY;
        let mut interior = 0usize;
        for (i, site) in eigsys.sites.iter().enumerate() {
            if !eigsys.is_interior(site, margin) {
                continue;
            }
            interior += 1;
            worst_peak = worst_peak.max((eigsys.matching_quality[i] - 1.0).abs());
            if let Some(slope) = eigsys.decay_slope(site) {
                worst_slope = worst_slope.max(slope);
            }
        }
        entries.push(PredicateEntry {
            id: "interior-peak".into(),
            holds: interior > 0 && worst_peak < sqrt_eps,
            threshold: sqrt_eps,
            worst_margin: worst_peak,
            strict: true,
            witness: None,
            range: format!("interior labels, margin {margin}"),
            trivial_degenerate: 0,
        });
        let slope_threshold = -0.4 * params.eps.ln().abs();
        entries.push(PredicateEntry {
            id: "interior-decay-slope".into(),
            holds: interior > 0 && worst_slope <= slope_threshold,
            threshold: slope_threshold,
            worst_margin: worst_slope,
            strict: false,
            witness: None,
            range: format!("interior labels, margin {margin}"),
            trivial_degenerate: 0,
        });
    }
    PredicateBlock::new(entries)
}

fn solve_inner(
    cfg: &ExperimentConfig,
) -> Result<(EigenSystem, SolutionReport, PredicateBlock), PipelineError> {
    let params = cfg.params();
    params.validate()?;
    let eigsys = diagonalize(&params, cfg.model.radius)?;
    let preflight = preflight_predicates(cfg, &eigsys);
    warn_if_failed("solve", &preflight);
    let solver = solver_config(cfg)?;
    let report = cwb_solve(&eigsys, &solver)?;
    Ok((eigsys, report, preflight))
}

fn write_solution_artifacts(
    cfg: &ExperimentConfig,
    eigsys: &EigenSystem,
    report: &SolutionReport,
    preflight: &PredicateBlock,
    out: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    let params = &eigsys.params;
    let artifact = SolutionArtifact {
        schema_version: SCHEMA_VERSION,
        command: "solve",
        config: cfg,
        params,
        preflight: preflight.clone(),
        report,
    };
    let mut written = vec![write_json(out, "solution.json", &artifact)?];

    let decay_rows: Vec<Vec<String>> = report
        .decay
        .table
        .iter()
        .map(|&(rho, sum)| {
            vec![
                format_float(rho),
                format_float(sum),
                format_float(report.decay.budget),
            ]
        })
        .collect();
    written.push(write_csv(
        out,
        "decay.csv",
        &["rho", "weighted_sum", "budget"],
        &decay_rows,
    )?);

    // Time-domain residual at fresh deterministic sample times.
    let s = cfg.solver_section()?;
    let u = Coeffs::from_data(&report.u);
    let mut rng = rng::substream(cfg.probes.seed, "time-residual-artifact");
    let times: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 100.0).collect();
    let mut residuals = Vec::with_capacity(times.len());
    for &t in &times {
        residuals.push(time_residual(
            &u,
            &report.omega,
            eigsys,
            s.p,
            s.delta,
            &[t],
        )?);
    }
    let max_residual = residuals.iter().cloned().fold(0.0f64, f64::max);
    let tr = TimeResidualArtifact {
        schema_version: SCHEMA_VERSION,
        command: "solve",
        config: cfg,
        times,
        residuals,
        max_residual,
    };
    written.push(write_json(out, "time_residual.json", &tr)?);
    Ok(written)
}

/// Solve command: diagonalize, pre-flight predicates, Newton/Q iteration,
/// artifacts with full convergence history.
pub fn run_solve(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let (eigsys, report, preflight) = solve_inner(cfg)?;
    write_solution_artifacts(cfg, &eigsys, &report, &preflight, out)
}

#[derive(Serialize)]
struct LdtArtifact<'a> {
    schema_version: &'static str,
    command: &'static str,
    config: &'a ExperimentConfig,
    params: &'a MarylandParams,
    omega: Vec<f64>,
    sweep: &'a maryland_core::LdtSweep,
}

/// LDT command: solve first, then sweep the Green's-function predicates over
/// the configured scales around each anchor.
pub fn run_ldt(
    cfg: &ExperimentConfig,
    out: &Path,
    threads: usize,
) -> Result<Vec<PathBuf>, PipelineError> {
    let s = cfg.solver_section()?;
    let max_scale = cfg.probes.scales.iter().copied().max().unwrap_or(2);
    for anchor in &s.anchors {
        let extent = anchor.beta.iter().map(|x| x.abs()).max().unwrap_or(0);
        if extent + max_scale > cfg.model.radius {
            return Err(ConfigError::CapExceeded(format!(
                "anchor {:?} plus probe scale {max_scale} exceeds the box radius {}",
                anchor.beta, cfg.model.radius
            ))
            .into());
        }
    }

    let (eigsys, report, preflight) = solve_inner(cfg)?;
    let mut written = write_solution_artifacts(cfg, &eigsys, &report, &preflight, out)?;

    let u = Coeffs::from_data(&report.u);
    let j0_list: Vec<Vec<i64>> = s.anchors.iter().map(|a| a.beta.clone()).collect();
    let ldt_cfg = LdtConfig {
        p: s.p,
        delta: s.delta,
        sigma_samples: cfg.probes.sigma_samples,
        seed: cfg.probes.seed,
        c_tilde: None,
        sigma_band: None,
        sampled_columns: cfg.probes.sampled_columns,
        hilbert_schmidt: false,
        max_witnesses: 200,
        threads,
    };
    let sweep = ldt_scale_sweep(
        &u,
        &eigsys,
        &report.omega,
        &cfg.probes.scales,
        &j0_list,
        &ldt_cfg,
    )?;

    let artifact = LdtArtifact {
        schema_version: SCHEMA_VERSION,
        command: "ldt",
        config: cfg,
        params: &eigsys.params,
        omega: report.omega.clone(),
        sweep: &sweep,
    };
    written.push(write_json(out, "ldt.json", &artifact)?);

    let witness_rows: Vec<Vec<String>> = sweep
        .reports
        .iter()
        .flat_map(|r| {
            r.witnesses.iter().map(|w| {
                vec![
                    r.scale.to_string(),
                    format_float(w.sigma),
                    w.region.clone(),
                    w.predicate.clone(),
                    format_float(w.value),
                ]
            })
        })
        .collect();
    written.push(write_csv(
        out,
        "ldt_witnesses.csv",
        &["scale", "sigma", "region", "predicate", "value"],
        &witness_rows,
    )?);
    Ok(written)
}

// Report generation: consolidate whatever artifacts the directory holds.

fn load_artifact(dir: &Path, name: &str) -> Result<Option<Value>, PipelineError> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| PipelineError::CorruptArtifact {
            path: path.clone(),
            message: e.to_string(),
        })?;
    Ok(Some(value))
}

fn v_f64(v: &Value, path: &[&str]) -> Option<f64> {
    let mut cur = v;
    for key in path {
        cur = cur.get(key)?;
    }
    cur.as_f64()
}

fn v_str<'a>(v: &'a Value, path: &[&str]) -> Option<&'a str> {
    let mut cur = v;
    for key in path {
        cur = cur.get(key)?;
    }
    cur.as_str()
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format_float(x),
        None => "-".into(),
    }
}

// Integer-valued JSON fields keep their plain form in the report.
fn fmt_value(v: &Value, path: &[&str]) -> Option<String> {
    let mut cur = v;
    for key in path {
        cur = cur.get(key)?;
    }
    if let Some(i) = cur.as_i64() {
        return Some(i.to_string());
    }
    cur.as_f64().map(format_float)
}

struct ReportBuilder {
    md: String,
    rows: Vec<Vec<String>>,
}

impl ReportBuilder {
    fn line(&mut self, section: &str, key: &str, value: String) {
        self.md.push_str(&format!("- {key}: {value}\n"));
        self.rows.push(vec![section.into(), key.into(), value]);
    }

    fn heading(&mut self, text: &str) {
        self.md.push_str(&format!("\n## {text}\n\n"));
    }
}

fn predicate_section(b: &mut ReportBuilder, section: &str, block: &Value) {
    if let Some(status) = v_str(block, &["status"]) {
        b.line(section, "predicates", status.into());
    }
    if let Some(entries) = block.get("entries").and_then(|e| e.as_array()) {
        for e in entries {
            let id = v_str(e, &["id"]).unwrap_or("?");
            let holds = e.get("holds").and_then(|h| h.as_bool()).unwrap_or(false);
            let detail = format!(
                "{} (worst {}, threshold {})",
                if holds { "holds" } else { "FAILS" },
                fmt_opt(v_f64(e, &["worst_margin"])),
                fmt_opt(v_f64(e, &["threshold"])),
            );
            b.line(section, id, detail);
        }
    }
}

/// Report command: one consolidated markdown + CSV summary per run
/// directory.
pub fn run_report(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let eigensystem = load_artifact(dir, "eigensystem.json")?;
    let symmetry = load_artifact(dir, "symmetry_report.json")?;
    let separation = load_artifact(dir, "separation.json")?;
    let solution = load_artifact(dir, "solution.json")?;
    let time_res = load_artifact(dir, "time_residual.json")?;
    let ldt = load_artifact(dir, "ldt.json")?;
    if [&eigensystem, &symmetry, &separation, &solution, &time_res, &ldt]
        .iter()
        .all(|a| a.is_none())
    {
        return Err(PipelineError::MissingArtifacts(dir.to_path_buf()));
    }

    let mut b = ReportBuilder {
        md: String::from("# Run report\n"),
        rows: Vec::new(),
    };

    // Model parameters from whichever artifact carries them.
    let with_params = [&eigensystem, &separation, &solution, &ldt]
        .into_iter()
        .flatten()
        .next();
    if let Some(v) = with_params {
        b.heading("Model");
        for key in ["d", "eps", "theta", "gamma", "tau"] {
            if let Some(text) = fmt_value(v, &["params", key]) {
                b.line("model", key, text);
            }
        }
        if let Some(alpha) = v.get("params").and_then(|p| p.get("alpha")) {
            b.line("model", "alpha", alpha.to_string());
        }
        if let Some(r) = v_f64(v, &["config", "model", "radius"]) {
            b.line("model", "radius", format!("{}", r as i64));
        }
    }

    if let Some(v) = &eigensystem {
        b.heading("Spectrum");
        if let Some(n) = v_f64(v, &["site_count"]) {
            b.line("spectrum", "site_count", format!("{}", n as i64));
        }
        if let Some(checks) = v.get("hard_invariants").and_then(|c| c.as_array()) {
            for c in checks {
                let id = v_str(c, &["id"]).unwrap_or("?");
                let passed = c.get("passed").and_then(|p| p.as_bool()).unwrap_or(false);
                b.line(
                    "spectrum",
                    id,
                    format!(
                        "{} (value {}, tolerance {})",
                        if passed { "passed" } else { "FAILED" },
                        fmt_opt(v_f64(c, &["value"])),
                        fmt_opt(v_f64(c, &["tolerance"])),
                    ),
                );
            }
        }
        if let Some(p) = v.get("predicates") {
            predicate_section(&mut b, "spectrum", p);
        }
    }

    if let Some(v) = &symmetry {
        b.heading("Symmetry");
        b.line(
            "symmetry",
            "symmetry_defect",
            fmt_opt(v_f64(v, &["symmetry_defect"])),
        );
        if let Some(cov) = v.get("covariance").and_then(|c| c.as_array()) {
            for c in cov {
                let shift = c
                    .get("shift")
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| "?".into());
                b.line(
                    "symmetry",
                    &format!("covariance {shift}"),
                    fmt_opt(v_f64(c, &["defect"])),
                );
            }
        }
    }

    if let Some(v) = &separation {
        b.heading("Separation");
        b.line(
            "separation",
            "melnikov_threshold",
            fmt_opt(v_f64(v, &["melnikov_threshold"])),
        );
        if let Some(p) = v.get("predicates") {
            predicate_section(&mut b, "separation", p);
        }
        b.line(
            "separation",
            "mc_fraction_failed",
            fmt_opt(v_f64(v, &["monte_carlo", "fraction_failed"])),
        );
        b.line(
            "separation",
            "transversality_min_derivative_stack",
            fmt_opt(v_f64(v, &["transversality", "min_derivative_stack"])),
        );
    }

    if let Some(v) = &solution {
        b.heading("Solve");
        let converged = v
            .get("report")
            .and_then(|r| r.get("converged"))
            .and_then(|c| c.as_bool())
            .unwrap_or(false);
        b.line("solve", "converged", converged.to_string());
        for (key, path) in [
            ("steps", vec!["report", "steps"]),
            ("final_residual", vec!["report", "final_residual"]),
            ("quadratic_slope", vec!["report", "quadratic_slope"]),
            ("rho_star", vec!["report", "decay", "rho_star"]),
            ("decay_budget", vec!["report", "decay", "budget"]),
            ("time_domain_residual", vec!["report", "time_domain_residual"]),
            ("mirror_defect_max", vec!["report", "mirror_defect_max"]),
        ] {
            let text = fmt_value(v, &path).unwrap_or_else(|| "-".into());
            b.line("solve", key, text);
        }
        if let Some(p) = v.get("preflight") {
            predicate_section(&mut b, "solve", p);
        }
        if let Some(omega) = v
            .get("report")
            .and_then(|r| r.get("omega"))
        {
            b.line("solve", "omega", omega.to_string());
        }
    }

    if let Some(v) = &time_res {
        b.heading("Time-domain residual");
        b.line(
            "time_residual",
            "max_residual",
            fmt_opt(v_f64(v, &["max_residual"])),
        );
    }

    if let Some(v) = &ldt {
        b.heading("Green's-function probes");
        if let Some(reports) = v
            .get("sweep")
            .and_then(|s| s.get("reports"))
            .and_then(|r| r.as_array())
        {
            for r in reports {
                let scale = v_f64(r, &["scale"]).map(|s| s as i64).unwrap_or(0);
                b.line(
                    "ldt",
                    &format!("scale {scale} fail_fraction"),
                    fmt_opt(v_f64(r, &["fail_fraction"])),
                );
                b.line(
                    "ldt",
                    &format!("scale {scale} norm_threshold"),
                    fmt_opt(v_f64(r, &["norm_threshold"])),
                );
                b.line(
                    "ldt",
                    &format!("scale {scale} measure_bound"),
                    fmt_opt(v_f64(r, &["measure_bound"])),
                );
            }
        }
        if let Some(checks) = v
            .get("sweep")
            .and_then(|s| s.get("monotonicity"))
            .and_then(|m| m.as_array())
        {
            for c in checks {
                let prev = v_f64(c, &["scale_prev"]).map(|s| s as i64).unwrap_or(0);
                let next = v_f64(c, &["scale_next"]).map(|s| s as i64).unwrap_or(0);
                let monotone = c
                    .get("monotone")
                    .and_then(|m| m.as_bool())
                    .unwrap_or(false);
                b.line(
                    "ldt",
                    &format!("monotone {prev}->{next}"),
                    format!(
                        "{} (diff {}, allowance {})",
                        monotone,
                        fmt_opt(v_f64(c, &["diff"])),
                        fmt_opt(v_f64(c, &["allowance"])),
                    ),
                );
            }
        }
    }

    let md_path = dir.join("report.md");
    std::fs::write(&md_path, &b.md)?;
    let csv_path = write_csv(dir, "summary.csv", &["section", "key", "value"], &b.rows)?;
    Ok(vec![md_path, csv_path])
}
