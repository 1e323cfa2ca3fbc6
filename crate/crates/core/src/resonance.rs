//! Separation and non-resonance predicates for the labelled spectrum, the
//! frequency hypotheses entering the large-deviation probes, and the
//! cotangent transversality quantities.
//!
//! Every predicate scan returns a [`PredicateEntry`] carrying the decision,
//! the threshold, the worst margin, and a standalone witness; a failing
//! entry's witness re-evaluates to the reported margin without the scan.

use crate::lattice::{linf_norm, torus_norm, Region, Site};
use crate::rng::substream_indexed;
use crate::spectrum::{cot_pi, diagonalize_and_relabel, EigenSystem, MarylandParams, SpectrumError};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

/// Pole guard for transversality grids.
pub const TRANSVERSALITY_POLE_TOL: f64 = 1e-6;
/// Highest cot/tan derivative order propagated symbolically.
pub const MAX_DERIVATIVE_ORDER: usize = 6;

#[derive(Debug, Error)]
pub enum ResonanceError {
    #[error("grid point {theta_index} puts site {site_index} within {tol:e} of a pole")]
    PoleOnGrid {
        theta_index: usize,
        site_index: usize,
        tol: f64,
    },
    #[error("site {0:?} is not labelled in the eigensystem")]
    MissingSite(Vec<i64>),
    #[error("invalid scan configuration: {0}")]
    InvalidScan(String),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
}

/// Standalone reproduction data for a scanned index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Witness {
    /// Frequency multi-index, empty when the predicate has no n-component.
    pub n: Vec<i64>,
    pub j: Vec<i64>,
    pub j_prime: Option<Vec<i64>>,
    /// The scanned quantity at this index.
    pub value: f64,
}

/// One predicate's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredicateEntry {
    /// Predicate id: "pair-separation", "magnitude-lower", "magnitude-upper",
    /// "first-melnikov+", "first-melnikov-", "second-melnikov", "dio-omega",
    /// "melnikov-omega".
    pub id: String,
    pub holds: bool,
    pub threshold: f64,
    /// Margin is compared >= threshold (or > for strict predicates).
    pub worst_margin: f64,
    pub strict: bool,
    pub witness: Option<Witness>,
    /// Human-readable description of the scanned range.
    pub range: String,
    /// Indices with exact-zero margin from n = 0, j = j' duplication that are
    /// not in the exempt set; counted separately and excluded from `holds`.
    pub trivial_degenerate: usize,
}

impl PredicateEntry {
    fn decide(&mut self) {
        self.holds = if self.strict {
            self.worst_margin > self.threshold
        } else {
            self.worst_margin >= self.threshold
        };
    }
}

/// Collection of predicate outcomes for one instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationReport {
    pub entries: Vec<PredicateEntry>,
}

impl SeparationReport {
    pub fn entry(&self, id: &str) -> Option<&PredicateEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn all_hold(&self) -> bool {
        self.entries.iter().all(|e| e.holds)
    }
}

/// Threshold `pi gamma / ((2d)^tau N^tau)` of the eigenvalue pair separation.
pub fn pair_separation_threshold(params: &MarylandParams, n_scale: i64) -> f64 {
    PI * params.gamma
        / ((2.0 * params.d as f64).powf(params.tau) * (n_scale as f64).powf(params.tau))
}

/// First/second Melnikov threshold `2 delta^{1/8}`.
pub fn melnikov_threshold(delta: f64) -> f64 {
    2.0 * delta.powf(0.125)
}

/// Scale-dependent frequency threshold `exp(-N~^{1/K2})`.
pub fn omega_scale_threshold(n_tilde: i64, k2: f64) -> f64 {
    (-(n_tilde as f64).powf(1.0 / k2)).exp()
}

fn scanned_sites<'a>(eigsys: &'a EigenSystem, radius: i64) -> Vec<&'a Site> {
    eigsys
        .sites
        .iter()
        .filter(|s| linf_norm(&s.coords) <= radius)
        .collect()
}

/// Minimal gap `|mu_j - mu_j'|` over distinct labelled pairs with
/// `|j|, |j'| <= N`, against `pi gamma / ((2d)^tau N^tau)`.
pub fn check_pair_separation(eigsys: &EigenSystem, n_scale: i64) -> PredicateEntry {
    let sites = scanned_sites(eigsys, n_scale);
    let mut entry = PredicateEntry {
        id: "pair-separation".into(),
        holds: false,
        threshold: pair_separation_threshold(&eigsys.params, n_scale),
        worst_margin: f64::INFINITY,
        strict: false,
        witness: None,
        range: format!("unordered labelled pairs with |j|_inf <= {n_scale}"),
        trivial_degenerate: 0,
    };
    for (a, sa) in sites.iter().enumerate() {
        let mu_a = eigsys.mu_at(sa).expect("labelled");
        for sb in sites.iter().skip(a + 1) {
            let mu_b = eigsys.mu_at(sb).expect("labelled");
            let gap = (mu_a - mu_b).abs();
            if gap < entry.worst_margin {
                entry.worst_margin = gap;
                entry.witness = Some(Witness {
                    n: Vec::new(),
                    j: sa.coords.clone(),
                    j_prime: Some(sb.coords.clone()),
                    value: gap,
                });
            }
        }
    }
    entry.decide();
    entry
}

/// Magnitude window `1/(2N^{d+2}) <= |mu_j| <= 2N^{d+2}` over `|j| <= N`;
/// one entry per side.
pub fn check_magnitude_bounds(eigsys: &EigenSystem, n_scale: i64) -> Vec<PredicateEntry> {
    let power = (n_scale as f64).powi(eigsys.params.d as i32 + 2);
    let sites = scanned_sites(eigsys, n_scale);
    let range = format!("labelled sites with |j|_inf <= {n_scale}");

    let mut lower = PredicateEntry {
        id: "magnitude-lower".into(),
        holds: false,
        threshold: 0.5 / power,
        worst_margin: f64::INFINITY,
        strict: false,
        witness: None,
        range: range.clone(),
        trivial_degenerate: 0,
    };
    let mut upper = PredicateEntry {
        id: "magnitude-upper".into(),
        holds: false,
        threshold: 2.0 * power,
        worst_margin: 0.0,
        strict: false,
        witness: None,
        range,
        trivial_degenerate: 0,
    };
    for s in sites {
        let mu = eigsys.mu_at(s).expect("labelled").abs();
        if mu < lower.worst_margin {
            lower.worst_margin = mu;
            lower.witness = Some(Witness {
                n: Vec::new(),
                j: s.coords.clone(),
                j_prime: None,
                value: mu,
            });
        }
        if mu > upper.worst_margin {
            upper.worst_margin = mu;
            upper.witness = Some(Witness {
                n: Vec::new(),
                j: s.coords.clone(),
                j_prime: None,
                value: mu,
            });
        }
    }
    lower.decide();
    // Upper bound compares from the other side.
    upper.holds = upper.worst_margin <= upper.threshold;
    vec![lower, upper]
}

/// Read off `omega^{(0)} = (mu_{beta_1}, ..., mu_{beta_b})`.
pub fn base_frequencies(eigsys: &EigenSystem, betas: &[Site]) -> Result<Vec<f64>, ResonanceError> {
    betas
        .iter()
        .map(|b| {
            eigsys
                .mu_at(b)
                .ok_or_else(|| ResonanceError::MissingSite(b.coords.clone()))
        })
        .collect()
}

fn unit_vec(b: usize, k: usize, sign: i64) -> Vec<i64> {
    let mut v = vec![0i64; b];
    v[k] = sign;
    v
}

/// First Melnikov conditions: `|n.omega_0 + mu_j| >= threshold` off
/// `{(-e_k, beta_k)}` (entry "first-melnikov+") and `|-n.omega_0 + mu_j| >=
/// threshold` off `{(e_k, beta_k)}` (entry "first-melnikov-"), scanned over
/// `n in [-R,R]^b` and labelled `|j|_inf <= R`.
pub fn check_first_melnikov(
    eigsys: &EigenSystem,
    betas: &[Site],
    range: i64,
    threshold: f64,
) -> Result<Vec<PredicateEntry>, ResonanceError> {
    let omega0 = base_frequencies(eigsys, betas)?;
    let b = betas.len();
    let n_points = Region::centered_box(b, range).points();
    let sites = scanned_sites(eigsys, range);
    let mut entries = Vec::with_capacity(2);
    for (id, flip) in [("first-melnikov+", 1.0f64), ("first-melnikov-", -1.0f64)] {
        // Exempt resonances: (-e_k, beta_k) for the + variant, (e_k, beta_k)
        // for the - variant.
        let exempt: Vec<(Vec<i64>, &Site)> = (0..b)
            .map(|k| {
                let sign = if flip > 0.0 { -1 } else { 1 };
                (unit_vec(b, k, sign), &betas[k])
            })
            .collect();
        let mut entry = PredicateEntry {
            id: id.into(),
            holds: false,
            threshold,
            worst_margin: f64::INFINITY,
            strict: false,
            witness: None,
            range: format!("n in [-{range},{range}]^{b}, labelled |j|_inf <= {range}"),
            trivial_degenerate: 0,
        };
        for n in &n_points {
            let dot: f64 = n.iter().zip(&omega0).map(|(c, w)| *c as f64 * w).sum();
            for s in &sites {
                if exempt
                    .iter()
                    .any(|(en, es)| en == n && es.coords == s.coords)
                {
                    continue;
                }
                let value = (flip * dot + eigsys.mu_at(s).expect("labelled")).abs();
                if value < entry.worst_margin {
                    entry.worst_margin = value;
                    entry.witness = Some(Witness {
                        n: n.clone(),
                        j: s.coords.clone(),
                        j_prime: None,
                        value,
                    });
                }
            }
        }
        entry.decide();
        entries.push(entry);
    }
    Ok(entries)
}

/// Second Melnikov condition: `|n.omega_0 + mu_j - mu_j'| > threshold` over
/// `n in [-R,R]^b` and labelled `|j|_inf, |j'|_inf <= R`, off the exempt set
/// `{(-e_k + e_k', beta_k, beta_k')} union {(0, 0, 0)}`. Non-exempt indices
/// with `n = 0, j = j'` are exactly degenerate; they are counted as
/// `trivial_degenerate` and excluded from the margin.
pub fn check_second_melnikov(
    eigsys: &EigenSystem,
    betas: &[Site],
    range: i64,
    threshold: f64,
) -> Result<PredicateEntry, ResonanceError> {
    let omega0 = base_frequencies(eigsys, betas)?;
    let b = betas.len();
    let n_points = Region::centered_box(b, range).points();
    let sites = scanned_sites(eigsys, range);
    let zero_n = vec![0i64; b];
    let origin = vec![0i64; eigsys.params.d];

    let mut exempt: Vec<(Vec<i64>, Vec<i64>, Vec<i64>)> = Vec::new();
    for k in 0..b {
        for kp in 0..b {
            let mut n = vec![0i64; b];
            n[k] -= 1;
            n[kp] += 1;
            exempt.push((n, betas[k].coords.clone(), betas[kp].coords.clone()));
        }
    }
    exempt.push((zero_n.clone(), origin.clone(), origin));

    let mut entry = PredicateEntry {
        id: "second-melnikov".into(),
        holds: false,
        threshold,
        worst_margin: f64::INFINITY,
        strict: true,
        witness: None,
        range: format!("n in [-{range},{range}]^{b}, labelled |j|_inf, |j'|_inf <= {range}"),
        trivial_degenerate: 0,
    };
    for n in &n_points {
        let dot: f64 = n.iter().zip(&omega0).map(|(c, w)| *c as f64 * w).sum();
        for sj in &sites {
            for sjp in &sites {
                if exempt
                    .iter()
                    .any(|(en, ej, ejp)| en == n && *ej == sj.coords && *ejp == sjp.coords)
                {
                    continue;
                }
                if *n == zero_n && sj.coords == sjp.coords {
                    entry.trivial_degenerate += 1;
                    continue;
                }
                let value = (dot + eigsys.mu_at(sj).expect("labelled")
                    - eigsys.mu_at(sjp).expect("labelled"))
                .abs();
                if value < entry.worst_margin {
                    entry.worst_margin = value;
                    entry.witness = Some(Witness {
                        n: n.clone(),
                        j: sj.coords.clone(),
                        j_prime: Some(sjp.coords.clone()),
                        value,
                    });
                }
            }
        }
    }
    entry.decide();
    Ok(entry)
}

/// One rung of the dyadic frequency-hypothesis ladder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OmegaLadderRung {
    pub n_tilde: i64,
    pub threshold: f64,
    pub dio_margin: f64,
    pub dio_witness: Option<Witness>,
    pub dio_holds: bool,
    pub mel_margin: f64,
    pub mel_witness: Option<Witness>,
    pub mel_holds: bool,
}

/// Frequency hypotheses along a dyadic ladder of scales.
///
/// For each scale `N~` between `scale_floor` and `n_scale`:
/// `|n.omega| >= exp(-N~^{1/K2})` for `0 < |n|_inf <= 2 N~`, and
/// `|n.omega - mu_j + mu_j'| >= exp(-N~^{1/K2})` for `|n|_inf <= 2 N~`,
/// labelled `|j|, |j'| <= 3 N~`, `(n, j - j') != 0`. Returns the rungs plus
/// two summary entries ("dio-omega", "melnikov-omega").
pub fn check_omega_hypotheses(
    omega: &[f64],
    eigsys: &EigenSystem,
    n_scale: i64,
    scale_floor: i64,
    k2: f64,
) -> Result<(Vec<OmegaLadderRung>, Vec<PredicateEntry>), ResonanceError> {
    if scale_floor < 1 || scale_floor > n_scale {
        return Err(ResonanceError::InvalidScan(
            "require 1 <= scale_floor <= n_scale".into(),
        ));
    }
    let b = omega.len();
    let mut ladder_scales = Vec::new();
    let mut s = scale_floor;
    while s < n_scale {
        ladder_scales.push(s);
        s *= 2;
    }
    ladder_scales.push(n_scale);

    let mut rungs = Vec::new();
    for &nt in &ladder_scales {
        let threshold = omega_scale_threshold(nt, k2);
        let n_points = Region::centered_box(b, 2 * nt).points();
        let zero_n = vec![0i64; b];

        let mut dio_margin = f64::INFINITY;
        let mut dio_witness = None;
        for n in &n_points {
            if *n == zero_n {
                continue;
            }
            let value: f64 = n
                .iter()
                .zip(omega)
                .map(|(c, w)| *c as f64 * w)
                .sum::<f64>()
                .abs();
            if value < dio_margin {
                dio_margin = value;
                dio_witness = Some(Witness {
                    n: n.clone(),
                    j: Vec::new(),
                    j_prime: None,
                    value,
                });
            }
        }

        let sites = scanned_sites(eigsys, 3 * nt);
        let mut mel_margin = f64::INFINITY;
        let mut mel_witness = None;
        for n in &n_points {
            let dot: f64 = n.iter().zip(omega).map(|(c, w)| *c as f64 * w).sum();
            for sj in &sites {
                for sjp in &sites {
                    if *n == zero_n && sj.coords == sjp.coords {
                        continue;
                    }
                    let value = (dot - eigsys.mu_at(sj).expect("labelled")
                        + eigsys.mu_at(sjp).expect("labelled"))
                    .abs();
                    if value < mel_margin {
                        mel_margin = value;
                        mel_witness = Some(Witness {
                            n: n.clone(),
                            j: sj.coords.clone(),
                            j_prime: Some(sjp.coords.clone()),
                            value,
                        });
                    }
                }
            }
        }

        rungs.push(OmegaLadderRung {
            n_tilde: nt,
            threshold,
            dio_margin,
            dio_holds: dio_margin >= threshold,
            dio_witness,
            mel_margin,
            mel_holds: mel_margin >= threshold,
            mel_witness,
        });
    }

    let summarize = |id: &str, margins: Vec<(&OmegaLadderRung, f64, bool, &Option<Witness>)>| {
        // Worst rung by margin-to-threshold ratio.
        let worst = margins
            .iter()
            .min_by(|a, b| {
                (a.1 / a.0.threshold)
                    .partial_cmp(&(b.1 / b.0.threshold))
                    .unwrap()
            })
            .expect("nonempty ladder");
        PredicateEntry {
            id: id.into(),
            holds: margins.iter().all(|r| r.2),
            threshold: worst.0.threshold,
            worst_margin: worst.1,
            strict: false,
            witness: worst.3.clone(),
            range: format!(
                "dyadic ladder N~ in {:?}, |n|_inf <= 2N~, labelled |j|_inf <= 3N~",
                ladder_scales
            ),
            trivial_degenerate: 0,
        }
    };
    let dio_entry = summarize(
        "dio-omega",
        rungs
            .iter()
            .map(|r| (r, r.dio_margin, r.dio_holds, &r.dio_witness))
            .collect(),
    );
    let mel_entry = summarize(
        "melnikov-omega",
        rungs
            .iter()
            .map(|r| (r, r.mel_margin, r.mel_holds, &r.mel_witness))
            .collect(),
    );
    Ok((rungs, vec![dio_entry, mel_entry]))
}

/// Coefficient tables of the tan-derivative polynomials: entry `p` holds the
/// coefficients (constant term first) of `q_p` with
/// `d^p/dx^p tan(x) = q_p(tan x)`, built from `q_0 = t`,
/// `q_{p+1} = (1 + t^2) q_p'`.
pub fn tan_derivative_coeffs(order: usize) -> Vec<Vec<f64>> {
    let mut polys: Vec<Vec<f64>> = vec![vec![0.0, 1.0]];
    for _ in 0..order {
        let prev = polys.last().expect("seeded");
        // Derivative of prev.
        let mut deriv = vec![0.0; prev.len().saturating_sub(1).max(1)];
        for (k, c) in prev.iter().enumerate().skip(1) {
            deriv[k - 1] = c * k as f64;
        }
        // Multiply by (1 + t^2).
        let mut next = vec![0.0; deriv.len() + 2];
        for (k, c) in deriv.iter().enumerate() {
            next[k] += c;
            next[k + 2] += c;
        }
        polys.push(next);
    }
    polys
}

fn eval_poly(coeffs: &[f64], t: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * t + c;
    }
    acc
}

// Laplace cofactor expansion along the first row; independent of the product
// formula and of LU-based determinants.
fn cofactor_det(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[(0, 0)];
    }
    let mut det = 0.0;
    for col in 0..n {
        let minor = m.clone().remove_row(0).remove_column(col);
        let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * m[(0, col)] * cofactor_det(&minor);
    }
    det
}

/// Transversality quantities of the combination
/// `F(theta) = sum_l k_l cot(pi(theta + j_l . alpha))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransversalityReport {
    pub s: usize,
    /// Minimum of `|F|` over the grid.
    pub min_abs_f: f64,
    /// Minimum over the grid of `max_{1<=p<=s} |d^p F / d theta^p|`.
    pub min_derivative_stack: f64,
    /// Largest relative disagreement between the cofactor-expansion and
    /// Vandermonde-product evaluations of `det W`.
    pub max_det_rel_disagreement: f64,
    /// Per-grid-point samples `(theta, F, det_cofactor, det_product)`.
    pub samples: Vec<(f64, f64, f64, f64)>,
}

/// Evaluate `F`, its first `s` derivatives, and the derivative matrix
/// `W(p,q) = d^p/dtheta^p tan(pi(theta + 1/2 + j_q . alpha))` along the grid.
///
/// `det W` is computed two independent ways: cofactor expansion of the
/// assembled matrix, and the closed product formula
/// `pi^{s(s+1)/2} (prod_p p!) prod_q sec^2(pi x_q) prod_{p<q} (t_q - t_p)`
/// with `t_q = tan(pi x_q)`, `x_q = theta + 1/2 + j_q . alpha`.
pub fn transversality_scan(
    alpha: &[f64],
    theta_grid: &[f64],
    k: &[i64],
    sites: &[Site],
) -> Result<TransversalityReport, ResonanceError> {
    let s = sites.len();
    if s < 2 || s > MAX_DERIVATIVE_ORDER {
        return Err(ResonanceError::InvalidScan(format!(
            "require 2 <= s <= {MAX_DERIVATIVE_ORDER}, got {s}"
        )));
    }
    if k.len() != s {
        return Err(ResonanceError::InvalidScan(
            "combination vector length must match site count".into(),
        ));
    }
    if theta_grid.is_empty() {
        return Err(ResonanceError::InvalidScan("empty grid".into()));
    }
    let polys = tan_derivative_coeffs(s);
    let shifts: Vec<f64> = sites
        .iter()
        .map(|j| {
            j.coords
                .iter()
                .zip(alpha)
                .map(|(c, a)| *c as f64 * a)
                .sum::<f64>()
        })
        .collect();

    let factorial_prod: f64 = (1..=s).map(|p| (1..=p).product::<usize>() as f64).product();
    let pi_power = PI.powi((s * (s + 1) / 2) as i32);

    let mut min_abs_f = f64::INFINITY;
    let mut min_stack = f64::INFINITY;
    let mut max_rel = 0.0f64;
    let mut samples = Vec::with_capacity(theta_grid.len());

    for (ti, &theta) in theta_grid.iter().enumerate() {
        let ys: Vec<f64> = shifts.iter().map(|sh| theta + sh).collect();
        for (si, y) in ys.iter().enumerate() {
            if torus_norm(*y) < TRANSVERSALITY_POLE_TOL {
                return Err(ResonanceError::PoleOnGrid {
                    theta_index: ti,
                    site_index: si,
                    tol: TRANSVERSALITY_POLE_TOL,
                });
            }
        }
        // t_q = tan(pi(y_q + 1/2)) = -cot(pi y_q); sec^2 = 1 + t^2.
        let ts: Vec<f64> = ys.iter().map(|y| -cot_pi(*y)).collect();

        let f: f64 = k
            .iter()
            .zip(&ts)
            .map(|(kl, t)| *kl as f64 * (-*t))
            .sum();
        min_abs_f = min_abs_f.min(f.abs());

        // D(p) = d^p F / d theta^p = -pi^p sum_q k_q q_p(t_q), p = 1..s.
        let mut stack = 0.0f64;
        for p in 1..=s {
            let dp: f64 = -PI.powi(p as i32)
                * k.iter()
                    .zip(&ts)
                    .map(|(kq, t)| *kq as f64 * eval_poly(&polys[p], *t))
                    .sum::<f64>();
            stack = stack.max(dp.abs());
        }
        min_stack = min_stack.min(stack);

        let mut w = DMatrix::<f64>::zeros(s, s);
        for p in 1..=s {
            for q in 0..s {
                w[(p - 1, q)] = PI.powi(p as i32) * eval_poly(&polys[p], ts[q]);
            }
        }
        let det_cof = cofactor_det(&w);
        let mut det_prod = pi_power * factorial_prod;
        for t in &ts {
            det_prod *= 1.0 + t * t;
        }
        for p in 0..s {
            for q in (p + 1)..s {
                det_prod *= ts[q] - ts[p];
            }
        }
        let denom = det_cof.abs().max(det_prod.abs());
        if denom > 0.0 {
            max_rel = max_rel.max((det_cof - det_prod).abs() / denom);
        }
        samples.push((theta, f, det_cof, det_prod));
    }
    Ok(TransversalityReport {
        s,
        min_abs_f,
        min_derivative_stack: min_stack,
        max_det_rel_disagreement: max_rel,
        samples,
    })
}

/// Monte-Carlo summary of predicate failures over uniformly sampled phases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub delta: f64,
    pub epsilon: f64,
    pub fraction_failed: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub failures_by_predicate: BTreeMap<String, usize>,
}

/// Sample `theta` uniformly, run the separation and Melnikov predicates on
/// each draw, and report the failing fraction. A draw that lands a site phase
/// on a pole counts as failed under "singular-phase". Each sample has its own
/// derived seed, so the loop order never affects the outcome.
pub fn monte_carlo_failures(
    base: &MarylandParams,
    box_radius: i64,
    betas: &[Site],
    range: i64,
    delta: f64,
    n_samples: usize,
    seed: u64,
) -> Result<McSummary, ResonanceError> {
    let spatial_box = Region::centered_box(base.d, box_radius);
    let threshold = melnikov_threshold(delta);
    let mut failures_by_predicate: BTreeMap<String, usize> = BTreeMap::new();
    let mut failed = 0usize;
    for i in 0..n_samples {
        let mut rng = substream_indexed(seed, "resonance-theta", i as u64);
        let theta: f64 = rng.random();
        let params = MarylandParams {
            theta,
            ..base.clone()
        };
        let eigsys = match diagonalize_and_relabel(&params, &spatial_box) {
            Ok(e) => e,
            Err(SpectrumError::SingularPhase { .. }) => {
                failed += 1;
                *failures_by_predicate
                    .entry("singular-phase".into())
                    .or_default() += 1;
                continue;
            }
            Err(other) => return Err(other.into()),
        };
        let mut entries = vec![check_pair_separation(&eigsys, box_radius)];
        entries.extend(check_magnitude_bounds(&eigsys, box_radius));
        entries.extend(check_first_melnikov(&eigsys, betas, range, threshold)?);
        entries.push(check_second_melnikov(&eigsys, betas, range, threshold)?);
        let mut any = false;
        for e in &entries {
            if !e.holds {
                any = true;
                *failures_by_predicate.entry(e.id.clone()).or_default() += 1;
            }
        }
        if any {
            failed += 1;
        }
    }
    Ok(McSummary {
        delta,
        epsilon: base.eps,
        fraction_failed: failed as f64 / n_samples as f64,
        n_samples,
        seed,
        failures_by_predicate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::GOLDEN_RATIO_FREQ;

    const GOLDEN: f64 = GOLDEN_RATIO_FREQ;

    fn eigsys_1d(eps: f64, theta: f64, radius: i64) -> EigenSystem {
        let p = MarylandParams::new(1, eps, vec![GOLDEN], theta);
        diagonalize_and_relabel(&p, &Region::centered_box(1, radius)).unwrap()
    }

    #[test]
    fn tan_derivative_table_matches_hand_computation() {
        let polys = tan_derivative_coeffs(6);
        let expect: Vec<Vec<f64>> = vec![
            vec![0.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 2.0, 0.0, 2.0],
            vec![2.0, 0.0, 8.0, 0.0, 6.0],
            vec![0.0, 16.0, 0.0, 40.0, 0.0, 24.0],
            vec![16.0, 0.0, 136.0, 0.0, 240.0, 0.0, 120.0],
            vec![0.0, 272.0, 0.0, 1232.0, 0.0, 1680.0, 0.0, 720.0],
        ];
        assert_eq!(polys.len(), 7);
        for (got, want) in polys.iter().zip(&expect) {
            assert_eq!(got, want);
        }
        // Leading coefficient of q_p is p!.
        for (p, poly) in polys.iter().enumerate().skip(1) {
            let fact: f64 = (1..=p).product::<usize>() as f64;
            assert_eq!(*poly.last().unwrap(), fact);
        }
    }

    #[test]
    fn tan_derivatives_match_finite_differences() {
        let polys = tan_derivative_coeffs(3);
        let x = 0.37f64;
        let h = 1e-5;
        let tan_d1 = (x + h).tan() - (x - h).tan();
        let d1 = eval_poly(&polys[1], x.tan());
        assert!((tan_d1 / (2.0 * h) - d1).abs() < 1e-5);
        let tan_d2 = (x + h).tan() - 2.0 * x.tan() + (x - h).tan();
        let d2 = eval_poly(&polys[2], x.tan());
        assert!((tan_d2 / (h * h) - d2).abs() < 1e-3);
    }

    #[test]
    fn pair_separation_at_zero_hopping_matches_cot_oracle() {
        let eigsys = eigsys_1d(0.0, 0.3, 10);
        let entry = check_pair_separation(&eigsys, 10);
        // Direct closed-form minimum over cot values.
        let mut oracle = f64::INFINITY;
        for j in -10i64..=10 {
            for jp in (j + 1)..=10 {
                let a = cot_pi(0.3 + j as f64 * GOLDEN);
                let b = cot_pi(0.3 + jp as f64 * GOLDEN);
                oracle = oracle.min((a - b).abs());
            }
        }
        assert!((entry.worst_margin - oracle).abs() < 1e-9);
        // Frozen oracle value for this instance.
        assert!((entry.worst_margin - 0.109_779_446_037_690_24).abs() < 1e-9);
        assert!(entry.holds, "threshold {} margin {}", entry.threshold, entry.worst_margin);
    }

    #[test]
    fn pair_separation_rational_frequency_degenerates() {
        let p = MarylandParams::new(1, 0.0, vec![1.0 / 3.0], 0.11);
        let eigsys = diagonalize_and_relabel(&p, &Region::centered_box(1, 4)).unwrap();
        let entry = check_pair_separation(&eigsys, 4);
        assert!(!entry.holds);
        assert!(entry.worst_margin < 1e-10, "margin {}", entry.worst_margin);
        let w = entry.witness.as_ref().unwrap();
        let diff = (w.j[0] - w.j_prime.as_ref().unwrap()[0]).abs();
        assert_eq!(diff % 3, 0);
    }

    #[test]
    fn pair_separation_small_hopping_near_zero_hopping() {
        let free = check_pair_separation(&eigsys_1d(0.0, 0.3, 10), 10);
        let hopped = check_pair_separation(&eigsys_1d(0.02, 0.3, 10), 10);
        let drift = (free.worst_margin - hopped.worst_margin).abs();
        assert!(drift <= 4.0 * 0.02, "drift {drift}");
    }

    #[test]
    fn pair_separation_reflection_invariant() {
        // Reflecting the box relabels every site; the minimal gap is a
        // min over unordered pairs and must not move.
        let p = MarylandParams::new(1, 0.03, vec![GOLDEN], 0.29);
        let eigsys = diagonalize_and_relabel(&p, &Region::centered_box(1, 7)).unwrap();
        let refl = MarylandParams::new(1, 0.03, vec![1.0 - GOLDEN], 0.29);
        let eigsys_r = diagonalize_and_relabel(&refl, &Region::centered_box(1, 7)).unwrap();
        let a = check_pair_separation(&eigsys, 7);
        let b = check_pair_separation(&eigsys_r, 7);
        assert!((a.worst_margin - b.worst_margin).abs() < 1e-9);
    }

    #[test]
    fn magnitude_lower_bound_fails_near_half() {
        // theta placed so that site j = 1 has phase within 1/(4 pi N^3) of
        // 1/2, forcing |cot| below the lower threshold there.
        let n_scale = 3i64;
        let offset = 1.0 / (4.0 * PI * (n_scale as f64).powi(3));
        let theta = (0.5 - GOLDEN + offset).rem_euclid(1.0);
        let p = MarylandParams::new(1, 0.0, vec![GOLDEN], theta);
        let eigsys = diagonalize_and_relabel(&p, &Region::centered_box(1, n_scale)).unwrap();
        let entries = check_magnitude_bounds(&eigsys, n_scale);
        let lower = &entries[0];
        assert!(!lower.holds);
        assert_eq!(lower.witness.as_ref().unwrap().j, vec![1]);
        assert!(lower.worst_margin < lower.threshold);
    }

    #[test]
    fn magnitude_bounds_hold_away_from_half() {
        let eigsys = eigsys_1d(0.0, 0.3, 6);
        let entries = check_magnitude_bounds(&eigsys, 6);
        assert!(entries.iter().all(|e| e.holds));
        // Thresholds loosen monotonically with N.
        let p = &eigsys.params;
        assert!(0.5 / (6.0f64.powi(3)) < 0.5 / (3.0f64.powi(3)));
        assert!(2.0 * 6.0f64.powi(3) > 2.0 * 3.0f64.powi(3));
        let _ = p;
    }

    #[test]
    fn first_melnikov_exempt_index_is_exact_resonance() {
        let eigsys = eigsys_1d(0.05, 0.3, 6);
        let beta = Site::origin(1);
        let omega0 = base_frequencies(&eigsys, std::slice::from_ref(&beta)).unwrap();
        // (-e_1, beta_1): n.omega0 + mu = -mu + mu = 0 exactly in floats.
        let value = -omega0[0] + eigsys.mu_at(&beta).unwrap();
        assert_eq!(value, 0.0);

        let entries = check_first_melnikov(&eigsys, &[beta], 3, melnikov_threshold(1e-4)).unwrap();
        assert_eq!(entries.len(), 2);
        // The scan minimum is strictly positive: the exact resonance is exempt.
        for e in &entries {
            assert!(e.worst_margin > 0.0);
        }
    }

    #[test]
    fn first_melnikov_matches_brute_force() {
        let eigsys = eigsys_1d(0.04, 0.37, 4);
        let beta = Site::origin(1);
        let entries =
            check_first_melnikov(&eigsys, std::slice::from_ref(&beta), 3, 0.1).unwrap();
        let omega = eigsys.mu_at(&beta).unwrap();
        let mut oracle = f64::INFINITY;
        for n in -3i64..=3 {
            for j in -3i64..=3 {
                if n == -1 && j == 0 {
                    continue;
                }
                let v = (n as f64 * omega + eigsys.mu_at(&Site::new(vec![j])).unwrap()).abs();
                oracle = oracle.min(v);
            }
        }
        assert!((entries[0].worst_margin - oracle).abs() < 1e-12);
    }

    #[test]
    fn second_melnikov_counts_trivial_degenerates() {
        let eigsys = eigsys_1d(0.05, 0.3, 4);
        let beta = Site::origin(1);
        let entry =
            check_second_melnikov(&eigsys, std::slice::from_ref(&beta), 3, melnikov_threshold(1e-4))
                .unwrap();
        // n = 0, j = j' duplicates: 7 sites with |j| <= 3, minus the pair
        // (0, beta, beta) covered by k = k' exemption; (0,0,0) coincides with
        // it for beta = origin.
        assert_eq!(entry.trivial_degenerate, 6);
        assert!(entry.worst_margin > 0.0);
    }

    #[test]
    fn second_melnikov_matches_brute_force() {
        let eigsys = eigsys_1d(0.04, 0.37, 3);
        let beta = Site::new(vec![1]);
        let entry =
            check_second_melnikov(&eigsys, std::slice::from_ref(&beta), 2, 0.05).unwrap();
        let omega = eigsys.mu_at(&beta).unwrap();
        let mu = |j: i64| eigsys.mu_at(&Site::new(vec![j])).unwrap();
        let mut oracle = f64::INFINITY;
        for n in -2i64..=2 {
            for j in -2i64..=2 {
                for jp in -2i64..=2 {
                    let exempt_kk = n == 0 && j == 1 && jp == 1;
                    let exempt_zero = n == 0 && j == 0 && jp == 0;
                    let degenerate = n == 0 && j == jp;
                    if exempt_kk || exempt_zero || degenerate {
                        continue;
                    }
                    oracle = oracle.min((n as f64 * omega + mu(j) - mu(jp)).abs());
                }
            }
        }
        assert!((entry.worst_margin - oracle).abs() < 1e-12);
    }

    #[test]
    fn omega_hypotheses_ladder_reports_margins() {
        let eigsys = eigsys_1d(0.05, 0.3, 12);
        let beta = Site::origin(1);
        let omega = vec![eigsys.mu_at(&beta).unwrap() + 1e-3];
        let (rungs, entries) = check_omega_hypotheses(&omega, &eigsys, 4, 1, 32.0).unwrap();
        assert_eq!(rungs.len(), 3); // N~ = 1, 2, 4
        assert_eq!(entries.len(), 2);
        // dio margin at N~ >= 1 is |omega| itself for b = 1 (|n| >= 1 only
        // scales it up).
        for r in &rungs {
            assert!((r.dio_margin - omega[0].abs()).abs() < 1e-12);
        }
        // Thresholds grow with K2 toward e^{-1}, so the flag can only get
        // stricter as K2 increases.
        assert!(omega_scale_threshold(4, 8.0) < omega_scale_threshold(4, 64.0));
        assert!(omega_scale_threshold(4, 64.0) < (-1.0f64).exp() + 1e-9);
    }

    #[test]
    fn omega_melnikov_excludes_zero_pair_only() {
        let eigsys = eigsys_1d(0.05, 0.3, 6);
        let omega = vec![0.77];
        let (rungs, _) = check_omega_hypotheses(&omega, &eigsys, 2, 2, 16.0).unwrap();
        let rung = &rungs[0];
        // n = 0, j != j' pairs are scanned: the margin is at most the minimal
        // eigenvalue gap.
        let gap = check_pair_separation(&eigsys, 6).worst_margin;
        assert!(rung.mel_margin <= gap + 1e-12);
    }

    #[test]
    fn transversality_identical_shifts_vanish() {
        let sites = vec![Site::new(vec![2]), Site::new(vec![2])];
        let grid: Vec<f64> = (1..40).map(|i| i as f64 / 40.0).collect();
        let rep = transversality_scan(&[GOLDEN], &grid, &[1, -1], &sites).unwrap();
        assert!(rep.min_abs_f < 1e-12);
        for (_, f, det_c, det_p) in &rep.samples {
            assert!(f.abs() < 1e-12);
            assert!(det_c.abs() < 1e-6, "cofactor det {det_c}");
            assert!(det_p.abs() < 1e-30, "product det {det_p}");
        }
    }

    #[test]
    fn transversality_det_paths_agree() {
        // 100 random instances with s <= 4: the cofactor and product
        // evaluations of det W agree to 1e-8 relative.
        let mut rng = substream_indexed(20260818, "transversality", 0);
        for trial in 0..100 {
            let s = 2 + (trial % 3); // 2, 3, 4
            let mut sites = Vec::new();
            let mut used = std::collections::HashSet::new();
            while sites.len() < s {
                let j: i64 = rng.random_range(-12..=12);
                if used.insert(j) {
                    sites.push(Site::new(vec![j]));
                }
            }
            let k: Vec<i64> = (0..s)
                .map(|_| {
                    let v: i64 = rng.random_range(1..=3);
                    if rng.random::<bool>() {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let theta: f64 = rng.random();
            let grid: Vec<f64> = (0..5)
                .map(|i| (theta + i as f64 * 0.137).rem_euclid(1.0))
                .filter(|t| {
                    sites
                        .iter()
                        .all(|jsite| torus_norm(t + jsite.coords[0] as f64 * GOLDEN) > 1e-3)
                })
                .collect();
            if grid.is_empty() {
                continue;
            }
            let rep = transversality_scan(&[GOLDEN], &grid, &k, &sites).unwrap();
            assert!(
                rep.max_det_rel_disagreement <= 1e-8,
                "trial {trial}: disagreement {}",
                rep.max_det_rel_disagreement
            );
        }
    }

    #[test]
    fn transversality_stack_positive_for_s3() {
        let sites = vec![Site::new(vec![-1]), Site::new(vec![0]), Site::new(vec![2])];
        let grid: Vec<f64> = (1..200)
            .map(|i| i as f64 / 200.0)
            .filter(|t| {
                sites
                    .iter()
                    .all(|j| torus_norm(t + j.coords[0] as f64 * GOLDEN) > 1e-2)
            })
            .collect();
        let rep = transversality_scan(&[GOLDEN], &grid, &[1, -2, 1], &sites).unwrap();
        assert!(rep.min_derivative_stack > 0.0);
        assert!(rep.max_det_rel_disagreement <= 1e-8);
    }

    #[test]
    fn transversality_rejects_pole_on_grid() {
        let sites = vec![Site::new(vec![0]), Site::new(vec![1])];
        let err = transversality_scan(&[0.25], &[0.75], &[1, 1], &sites).unwrap_err();
        assert!(matches!(err, ResonanceError::PoleOnGrid { site_index: 1, .. }));
    }

    #[test]
    fn witness_reproduces_margin_standalone() {
        let eigsys = eigsys_1d(0.04, 0.37, 4);
        let beta = Site::origin(1);
        let entry =
            check_second_melnikov(&eigsys, std::slice::from_ref(&beta), 3, 10.0).unwrap();
        assert!(!entry.holds); // threshold 10 cannot hold
        let w = entry.witness.as_ref().unwrap();
        let omega = eigsys.mu_at(&beta).unwrap();
        let redo = (w.n[0] as f64 * omega + eigsys.mu_at(&Site::new(w.j.clone())).unwrap()
            - eigsys
                .mu_at(&Site::new(w.j_prime.clone().unwrap()))
                .unwrap())
        .abs();
        assert!((redo - entry.worst_margin).abs() < 1e-12);
        assert!(redo < entry.threshold);
    }

    #[test]
    fn zero_hopping_predicates_match_script_oracle() {
        // At eps = 0 every predicate is a closed-form cot expression; compare
        // the module output against a direct recomputation on 10 instances.
        let mut rng = substream_indexed(20260818, "eps0-oracle", 1);
        for _ in 0..10 {
            let theta: f64 = 0.05 + 0.9 * rng.random::<f64>();
            let p = MarylandParams::new(1, 0.0, vec![GOLDEN], theta);
            let spatial_box = Region::centered_box(1, 5);
            let sites: Vec<i64> = (-5..=5).collect();
            if sites
                .iter()
                .any(|j| torus_norm(theta + *j as f64 * GOLDEN) < 1e-3)
            {
                continue;
            }
            let eigsys = diagonalize_and_relabel(&p, &spatial_box).unwrap();
            let entry = check_pair_separation(&eigsys, 5);
            let mut gap_oracle = f64::INFINITY;
            let mut lo_oracle = f64::INFINITY;
            let mut hi_oracle = 0.0f64;
            for (ai, a) in sites.iter().enumerate() {
                let ca = cot_pi(theta + *a as f64 * GOLDEN);
                lo_oracle = lo_oracle.min(ca.abs());
                hi_oracle = hi_oracle.max(ca.abs());
                for b in sites.iter().skip(ai + 1) {
                    let cb = cot_pi(theta + *b as f64 * GOLDEN);
                    gap_oracle = gap_oracle.min((ca - cb).abs());
                }
            }
            assert!((entry.worst_margin - gap_oracle).abs() < 1e-9);
            let bounds = check_magnitude_bounds(&eigsys, 5);
            assert!((bounds[0].worst_margin - lo_oracle).abs() < 1e-9);
            assert!((bounds[1].worst_margin - hi_oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let base = MarylandParams::new(1, 0.05, vec![GOLDEN], 0.0);
        let beta = Site::origin(1);
        let a = monte_carlo_failures(&base, 4, std::slice::from_ref(&beta), 2, 1e-3, 40, 77)
            .unwrap();
        let b = monte_carlo_failures(&base, 4, std::slice::from_ref(&beta), 2, 1e-3, 40, 77)
            .unwrap();
        assert_eq!(a.fraction_failed, b.fraction_failed);
        assert_eq!(a.failures_by_predicate, b.failures_by_predicate);
        assert!(a.fraction_failed >= 0.0 && a.fraction_failed <= 1.0);
    }
}
