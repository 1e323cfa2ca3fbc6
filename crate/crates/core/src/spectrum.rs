//! Finite-box Maryland operators and their relabelled eigensystems.
//!
//! The operator is `H = eps*Delta + cot(pi(theta + j.alpha)) delta_{j,j'}` on
//! a finite spatial box with Dirichlet truncation. Eigenpairs are relabelled
//! by localization center so that `mu_j = E(theta + j.alpha)` and `phi_j`
//! peaks at site `j`. All statements tested here are finite-volume versions
//! of infinite-lattice facts; sites close to the boundary are flagged and
//! excluded from decay statistics.

use crate::lattice::{l1_norm, linf_norm, torus_norm, Region, Site};
use crate::matching::{max_weight_assignment, maximum_matching};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use thiserror::Error;

/// Default matching radius between localization centers and their sites.
pub const DEFAULT_MATCH_RADIUS: i64 = 2;
/// Sites within this `ell_inf` distance of the box boundary are flagged as
/// boundary-affected and excluded from decay statistics.
pub const BOUNDARY_MARGIN: i64 = 4;

#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error("phase theta + j.alpha at site {site:?} is within {tol:e} of the cot pole")]
    SingularPhase { site: Vec<i64>, tol: f64 },
    #[error("box is not symmetric under j -> -j")]
    AsymmetricBox,
    #[error("site/eigenvector matching incomplete: {matched} of {total} assigned")]
    MatchingIncomplete { matched: usize, total: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Lattice(#[from] crate::lattice::LatticeError),
}

/// Model parameters of the Maryland operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarylandParams {
    /// Spatial dimension d >= 1.
    pub d: usize,
    /// Hopping strength eps >= 0.
    pub eps: f64,
    /// Frequency vector, one entry per spatial dimension, each in [0,1].
    pub alpha: Vec<f64>,
    /// Phase theta in [0,1).
    pub theta: f64,
    /// Diophantine constant gamma > 0.
    pub gamma: f64,
    /// Diophantine exponent tau > d.
    pub tau: f64,
    /// Minimal allowed torus distance of any phase to the cot pole set.
    pub singularity_tol: f64,
}

/// Golden-ratio frequency used throughout the desk-scale experiments.
pub const GOLDEN_RATIO_FREQ: f64 = 0.618_033_988_749_894_9;

impl MarylandParams {
    pub fn new(d: usize, eps: f64, alpha: Vec<f64>, theta: f64) -> Self {
        MarylandParams {
            d,
            eps,
            alpha,
            theta,
            gamma: 0.2,
            tau: d as f64 + 1.0,
            singularity_tol: 1e-6,
        }
    }

    /// d-dimensional instance with the golden mean followed by fractional
    /// parts of prime square roots.
    pub fn golden(d: usize, eps: f64, theta: f64) -> Self {
        // The components must be rationally independent together with 1, or
        // the potential picks up exact phase collisions inside finite boxes.
        // sqrt(5) is excluded: it equals 2 alpha_1 + 1.
        const RADICANDS: [f64; 16] = [
            2.0, 3.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0, 41.0, 43.0, 47.0,
            53.0, 59.0,
        ];
        let alpha = (0..d)
            .map(|k| {
                if k == 0 {
                    GOLDEN_RATIO_FREQ
                } else {
                    RADICANDS[(k - 1) % RADICANDS.len()].sqrt().fract()
                }
            })
            .collect();
        MarylandParams::new(d, eps, alpha, theta)
    }

    pub fn validate(&self) -> Result<(), SpectrumError> {
        if self.d == 0 || self.alpha.len() != self.d {
            return Err(SpectrumError::InvalidParams(format!(
                "alpha length {} does not match d = {}",
                self.alpha.len(),
                self.d
            )));
        }
        if self.eps < 0.0 {
            return Err(SpectrumError::InvalidParams("eps must be >= 0".into()));
        }
        if self.gamma <= 0.0 {
            return Err(SpectrumError::InvalidParams("gamma must be > 0".into()));
        }
        if self.tau <= self.d as f64 {
            return Err(SpectrumError::InvalidParams("tau must exceed d".into()));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return Err(SpectrumError::InvalidParams("theta must lie in [0,1)".into()));
        }
        Ok(())
    }

    /// Phase `theta + j.alpha` of a site.
    pub fn phase(&self, j: &Site) -> f64 {
        self.theta
            + j.coords
                .iter()
                .zip(&self.alpha)
                .map(|(c, a)| *c as f64 * a)
                .sum::<f64>()
    }

    /// Potential value `cot(pi(theta + j.alpha))`, guarded against the pole.
    pub fn potential(&self, j: &Site) -> Result<f64, SpectrumError> {
        let x = self.phase(j);
        if torus_norm(x) < self.singularity_tol {
            return Err(SpectrumError::SingularPhase {
                site: j.coords.clone(),
                tol: self.singularity_tol,
            });
        }
        Ok(cot_pi(x))
    }
}

/// `cot(pi x)` with the argument reduced mod 1 before scaling by pi, so large
/// phases keep full relative accuracy.
pub fn cot_pi(x: f64) -> f64 {
    let y = x - x.floor();
    (PI * y).cos() / (PI * y).sin()
}

/// Diophantine scan report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiophantineReport {
    pub holds: bool,
    /// Site minimizing `torus_norm(j.alpha) * |j|_1^tau`.
    pub worst_site: Vec<i64>,
    /// The minimized product; the condition holds when it is >= gamma.
    pub worst_margin: f64,
    pub j_max: i64,
}

/// Verify `torus_norm(j.alpha) >= gamma / |j|_1^tau` for all `0 < |j|_1 <= j_max`.
pub fn diophantine_check(alpha: &[f64], gamma: f64, tau: f64, j_max: i64) -> DiophantineReport {
    assert!(j_max >= 1, "j_max must be >= 1");
    let d = alpha.len();
    let mut worst: Option<(f64, i64, Vec<i64>)> = None;
    let mut cursor = vec![-j_max; d];
    loop {
        let l1 = l1_norm(&cursor);
        if l1 > 0 && l1 <= j_max {
            let dot: f64 = cursor.iter().zip(alpha).map(|(c, a)| *c as f64 * a).sum();
            let margin = torus_norm(dot) * (l1 as f64).powf(tau);
            // Ties (exact zeros at rational frequencies) resolve toward the
            // smallest witness.
            let better = match &worst {
                None => true,
                Some((m, n, _)) => margin < *m || (margin == *m && l1 < *n),
            };
            if better {
                worst = Some((margin, l1, cursor.clone()));
            }
        }
        let mut k = d;
        loop {
            if k == 0 {
                let (worst_margin, _, worst_site) = worst.expect("nonempty scan");
                return DiophantineReport {
                    holds: worst_margin >= gamma,
                    worst_site,
                    worst_margin,
                    j_max,
                };
            }
            k -= 1;
            if cursor[k] < j_max {
                cursor[k] += 1;
                break;
            }
            cursor[k] = -j_max;
        }
    }
}

/// Assemble the Dirichlet-truncated operator on the given spatial region.
///
/// Returns the dense symmetric matrix together with the site enumeration that
/// indexes its rows and columns.
pub fn build_hamiltonian(
    params: &MarylandParams,
    spatial_box: &Region,
) -> Result<(DMatrix<f64>, Vec<Site>), SpectrumError> {
    params.validate()?;
    if spatial_box.dims() != params.d {
        return Err(SpectrumError::InvalidParams(format!(
            "box dimension {} does not match d = {}",
            spatial_box.dims(),
            params.d
        )));
    }
    let sites: Vec<Site> = spatial_box
        .points()
        .into_iter()
        .map(Site::new)
        .collect();
    let m = sites.len();
    let mut h = DMatrix::<f64>::zeros(m, m);
    for (i, s) in sites.iter().enumerate() {
        h[(i, i)] = params.potential(s)?;
    }
    for (i, s) in sites.iter().enumerate() {
        for (k, t) in sites.iter().enumerate().skip(i + 1) {
            let dist: i64 = s
                .coords
                .iter()
                .zip(&t.coords)
                .map(|(a, b)| (a - b).abs())
                .sum();
            if dist == 1 {
                h[(i, k)] = params.eps;
                h[(k, i)] = params.eps;
            }
        }
    }
    Ok((h, sites))
}

/// Eigenpairs of a finite box, relabelled by localization center.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub params: MarylandParams,
    pub box_region: Region,
    /// Site enumeration; row `x` of `phi` is the amplitude at `sites[x]`.
    pub sites: Vec<Site>,
    site_index: HashMap<Site, usize>,
    /// Eigenvalue labelled by `sites[i]`.
    pub mu: Vec<f64>,
    /// Column `i` is the eigenvector labelled by `sites[i]`.
    pub phi: DMatrix<f64>,
    /// Peak magnitude `|phi_j(j)|` per labelled site.
    pub matching_quality: Vec<f64>,
    /// True when the short-range matching was imperfect and the weighted
    /// assignment fallback produced the labelling.
    pub fallback_used: bool,
    /// Largest eigen-residual `||H phi - mu phi||_2` observed at build time.
    pub max_residual: f64,
    /// Largest deviation of the Gram matrix from identity at build time.
    pub max_gram_defect: f64,
}

impl EigenSystem {
    pub fn index_of(&self, site: &Site) -> Option<usize> {
        self.site_index.get(site).copied()
    }

    pub fn mu_at(&self, site: &Site) -> Option<f64> {
        self.index_of(site).map(|i| self.mu[i])
    }

    /// Amplitude `phi_j(x)`.
    pub fn phi_value(&self, label: &Site, at: &Site) -> Option<f64> {
        let col = self.index_of(label)?;
        let row = self.index_of(at)?;
        Some(self.phi[(row, col)])
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    /// True when the site keeps `ell_inf` distance > `margin` from the box
    /// boundary, so decay statistics are meaningful there.
    pub fn is_interior(&self, site: &Site, margin: i64) -> bool {
        let bounds = self.box_region.bounding_box();
        site.coords
            .iter()
            .zip(&bounds)
            .all(|(c, (lo, hi))| c - lo > margin && hi - c > margin)
    }

    /// Least-squares slope of `log|phi_j(x)|` against `|x - j|_1`, over sites
    /// with amplitude above the numerical noise floor. None when fewer than
    /// two distance classes carry signal.
    pub fn decay_slope(&self, label: &Site) -> Option<f64> {
        let col = self.index_of(label)?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (row, x) in self.sites.iter().enumerate() {
            let dist = l1_norm(
                &x.coords
                    .iter()
                    .zip(&label.coords)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            );
            let amp = self.phi[(row, col)].abs();
            if dist >= 1 && amp > 1e-13 {
                xs.push(dist as f64);
                ys.push(amp.ln());
            }
        }
        least_squares_slope(&xs, &ys)
    }

    /// Localization center of the eigenvector labelled by `label` (argmax of
    /// the amplitude, ties resolved toward small sites).
    pub fn center_of(&self, label: &Site) -> Option<Site> {
        let col = self.index_of(label)?;
        let column: Vec<f64> = (0..self.sites.len()).map(|r| self.phi[(r, col)]).collect();
        let idx = argmax_center(&column, &self.sites);
        Some(self.sites[idx].clone())
    }
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

// Argmax of |v| with ties (relative 1e-9) broken by smallest ell_inf norm of
// the site, then lexicographically smallest coordinates.
fn argmax_center(v: &[f64], sites: &[Site]) -> usize {
    let peak = v.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
    let tol = peak * 1e-9;
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        if x.abs() + tol < peak {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) => {
                let (sb, si) = (&sites[b], &sites[i]);
                let key = |s: &Site| (linf_norm(&s.coords), s.coords.clone());
                if key(si) < key(sb) {
                    best = Some(i);
                }
            }
        }
    }
    best.expect("nonempty eigenvector")
}

/// Full symmetric eigensolve plus localization-center relabelling.
///
/// Centers are matched to sites by maximum bipartite matching on edges
/// `{(site, vector): |site - center|_inf <= r_match}`; an imperfect matching
/// falls back to the assignment maximizing the total peak weight
/// `sum |psi(site)|^2`.
pub fn diagonalize_and_relabel(
    params: &MarylandParams,
    spatial_box: &Region,
) -> Result<EigenSystem, SpectrumError> {
    diagonalize_with_radius(params, spatial_box, DEFAULT_MATCH_RADIUS)
}

pub fn diagonalize_with_radius(
    params: &MarylandParams,
    spatial_box: &Region,
    r_match: i64,
) -> Result<EigenSystem, SpectrumError> {
    let (h, sites) = build_hamiltonian(params, spatial_box)?;
    let m = sites.len();
    let eig = h.clone().symmetric_eigen();

    // Deterministic eigenvector orientation: largest-magnitude entry positive.
    let mut vectors: Vec<DVector<f64>> = Vec::with_capacity(m);
    for c in 0..m {
        let mut v = eig.eigenvectors.column(c).clone_owned();
        let mut peak = 0usize;
        for r in 1..m {
            if v[r].abs() > v[peak].abs() {
                peak = r;
            }
        }
        if v[peak] < 0.0 {
            v.neg_mut();
        }
        vectors.push(v);
    }

    let centers: Vec<usize> = vectors
        .iter()
        .map(|v| argmax_center(v.as_slice(), &sites))
        .collect();

    // Edges between sites and eigenvectors whose center is within r_match,
    // ordered by the vector's weight at the site so the augmenting-path
    // search tries the peaked candidate first. Without the ordering any
    // perfect matching would do, including badly mislabelled ones.
    let adj: Vec<Vec<usize>> = sites
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let mut cand: Vec<usize> = (0..m)
                .filter(|&v| {
                    let c = &sites[centers[v]];
                    s.coords
                        .iter()
                        .zip(&c.coords)
                        .all(|(a, b)| (a - b).abs() <= r_match)
                })
                .collect();
            cand.sort_by(|&a, &b| {
                let wa = vectors[a][si].abs();
                let wb = vectors[b][si].abs();
                wb.partial_cmp(&wa).unwrap().then(a.cmp(&b))
            });
            cand
        })
        .collect();
    let matched = maximum_matching(m, m, &adj);
    let complete = matched.iter().all(|x| x.is_some());

    let (assignment, fallback_used) = if complete {
        (matched.into_iter().map(|x| x.unwrap()).collect::<Vec<_>>(), false)
    } else {
        let weights: Vec<Vec<f64>> = sites
            .iter()
            .enumerate()
            .map(|(si, _)| {
                (0..m)
                    .map(|vi| {
                        let a = vectors[vi][si];
                        a * a
                    })
                    .collect()
            })
            .collect();
        (max_weight_assignment(&weights), true)
    };

    {
        let mut seen = vec![false; m];
        for &v in &assignment {
            if seen[v] {
                return Err(SpectrumError::MatchingIncomplete {
                    matched: assignment.iter().enumerate().filter(|(i, &v)| {
                        assignment[..*i].iter().all(|&w| w != v)
                    }).count(),
                    total: m,
                });
            }
            seen[v] = true;
        }
    }

    let mut mu = Vec::with_capacity(m);
    let mut phi = DMatrix::<f64>::zeros(m, m);
    let mut quality = Vec::with_capacity(m);
    for (si, &vi) in assignment.iter().enumerate() {
        mu.push(eig.eigenvalues[vi]);
        phi.set_column(si, &vectors[vi]);
        quality.push(vectors[vi][si].abs());
    }

    // Build-time diagnostics backing the reconstruction and Gram invariants.
    let mut max_residual = 0.0f64;
    for i in 0..m {
        let col = phi.column(i);
        let res = (&h * col - mu[i] * col).norm();
        if res > max_residual {
            max_residual = res;
        }
    }
    let gram = phi.transpose() * &phi;
    let mut max_gram_defect = 0.0f64;
    for r in 0..m {
        for c in 0..m {
            let target = if r == c { 1.0 } else { 0.0 };
            max_gram_defect = max_gram_defect.max((gram[(r, c)] - target).abs());
        }
    }

    let site_index = sites
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    Ok(EigenSystem {
        params: params.clone(),
        box_region: spatial_box.clone(),
        sites,
        site_index,
        mu,
        phi,
        matching_quality: quality,
        fallback_used,
        max_residual,
        max_gram_defect,
    })
}

/// Eigenvalue profile `E(theta) = mu_0(theta)` over a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenvalueProfile {
    pub thetas: Vec<f64>,
    pub e_values: Vec<f64>,
    /// Largest `|E(theta) - cot(pi theta)|` over the grid.
    pub sup_dev_from_cot: f64,
    /// True when samples are strictly monotone along the branch. The profile
    /// decreases in theta on (0,1); traversed through the pole at theta = 0
    /// it is one monotone branch.
    pub branch_monotone: bool,
    /// Smallest `|Delta E / Delta theta|` over consecutive same-branch pairs;
    /// the Lipschitz-from-below constant, expected >= pi.
    pub lipschitz_from_below: f64,
}

/// Compute `E(theta)` as the eigenvalue labelled at the origin for each grid
/// point. Grid points must keep every site phase away from the pole set.
pub fn eigenvalue_profile(
    params: &MarylandParams,
    radius: i64,
    theta_grid: &[f64],
) -> Result<EigenvalueProfile, SpectrumError> {
    let spatial_box = Region::centered_box(params.d, radius);
    let origin = Site::origin(params.d);
    let mut e_values = Vec::with_capacity(theta_grid.len());
    let mut sup_dev = 0.0f64;
    for &theta in theta_grid {
        let p = MarylandParams {
            theta,
            ..params.clone()
        };
        let eigsys = diagonalize_and_relabel(&p, &spatial_box)?;
        let e = eigsys.mu_at(&origin).expect("origin is in the box");
        sup_dev = sup_dev.max((e - cot_pi(theta)).abs());
        e_values.push(e);
    }
    let (branch_monotone, lipschitz_from_below) = branch_monotonicity(theta_grid, &e_values);
    Ok(EigenvalueProfile {
        thetas: theta_grid.to_vec(),
        e_values,
        sup_dev_from_cot: sup_dev,
        branch_monotone,
        lipschitz_from_below,
    })
}

// Monotonicity along the branch: E decreases in theta between consecutive
// grid points lying on the same side of the pole at theta in Z. Returns the
// monotone flag and the smallest |slope|.
fn branch_monotonicity(thetas: &[f64], values: &[f64]) -> (bool, f64) {
    let mut monotone = true;
    let mut min_slope = f64::INFINITY;
    for w in 1..thetas.len() {
        let (t0, t1) = (thetas[w - 1], thetas[w]);
        if t0.floor() != t1.floor() {
            continue; // pole between the samples: different branch segment
        }
        let dt = t1 - t0;
        if dt <= 0.0 {
            continue;
        }
        let de = values[w] - values[w - 1];
        if de >= 0.0 {
            monotone = false;
        }
        min_slope = min_slope.min(de.abs() / dt);
    }
    if !min_slope.is_finite() {
        min_slope = 0.0;
    }
    (monotone, min_slope)
}

/// Evenly spaced theta grid on (0,1) filtered so that every site phase of the
/// radius-`radius` box keeps torus distance >= `margin` from the pole set.
/// Draws from a denser candidate grid until `count` points survive.
pub fn pole_free_grid(
    params: &MarylandParams,
    radius: i64,
    count: usize,
    margin: f64,
) -> Vec<f64> {
    let spatial_box = Region::centered_box(params.d, radius);
    let sites: Vec<Site> = spatial_box.points().into_iter().map(Site::new).collect();
    let mut grid = Vec::with_capacity(count);
    let dense = count * 8;
    for i in 0..dense {
        if grid.len() == count {
            break;
        }
        let theta = (i as f64 + 0.5) / dense as f64;
        let p = MarylandParams {
            theta,
            ..params.clone()
        };
        if sites.iter().all(|s| torus_norm(p.phase(s)) >= margin) {
            grid.push(theta);
        }
    }
    grid
}

/// Spectral symmetry report: `spec(H(1-theta))` against `-spec(H(theta))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub max_defect: f64,
}

/// Check the reflection symmetry of the spectrum on a symmetric box.
///
/// The conjugation behind it maps `H(theta)` to `-H(1-theta)` exactly on any
/// box invariant under `j -> -j`, so the sorted spectra must agree up to sign
/// to within eigensolver accuracy.
pub fn check_symmetry(
    params: &MarylandParams,
    spatial_box: &Region,
) -> Result<SymmetryReport, SpectrumError> {
    let points = spatial_box.points();
    let as_set: std::collections::HashSet<Vec<i64>> = points.iter().cloned().collect();
    for p in &points {
        let neg: Vec<i64> = p.iter().map(|x| -x).collect();
        if !as_set.contains(&neg) {
            return Err(SpectrumError::AsymmetricBox);
        }
    }
    let reflected = MarylandParams {
        theta: (1.0 - params.theta).rem_euclid(1.0),
        ..params.clone()
    };
    let (h_orig, _) = build_hamiltonian(params, spatial_box)?;
    let (h_refl, _) = build_hamiltonian(&reflected, spatial_box)?;
    let mut spec_orig = h_orig.symmetric_eigen().eigenvalues.as_slice().to_vec();
    let mut spec_refl = h_refl.symmetric_eigen().eigenvalues.as_slice().to_vec();
    // -spec(H(theta)) sorted ascending against spec(H(1-theta)) ascending.
    for v in spec_orig.iter_mut() {
        *v = -*v;
    }
    spec_orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    spec_refl.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max_defect = spec_orig
        .iter()
        .zip(&spec_refl)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(SymmetryReport { max_defect })
}

/// Compare `spec(H on Q_L(m) at theta)` with `spec(H on Q_L(0) at theta + m.alpha)`.
/// The two matrices agree entrywise up to phase-reduction rounding, so the
/// discrepancy stays at eigensolver accuracy.
pub fn check_translation_covariance(
    params: &MarylandParams,
    radius: i64,
    shift: &[i64],
) -> Result<f64, SpectrumError> {
    if shift.len() != params.d {
        return Err(SpectrumError::InvalidParams(
            "shift length does not match d".into(),
        ));
    }
    let shifted_box = Region::FullBox {
        center: shift.to_vec(),
        n: radius,
    };
    let (h_shifted, _) = build_hamiltonian(params, &shifted_box)?;

    let dot: f64 = shift
        .iter()
        .zip(&params.alpha)
        .map(|(m, a)| *m as f64 * a)
        .sum();
    let translated = MarylandParams {
        theta: (params.theta + dot).rem_euclid(1.0),
        ..params.clone()
    };
    let origin_box = Region::centered_box(params.d, radius);
    let (h_origin, _) = build_hamiltonian(&translated, &origin_box)?;

    let mut a = h_shifted.symmetric_eigen().eigenvalues.as_slice().to_vec();
    let mut b = h_origin.symmetric_eigen().eigenvalues.as_slice().to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// One level of the Rellich eigenvalue-branch iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RellichLevel {
    pub level: usize,
    /// Box radius at this level; 0 denotes the analytic seed `cot(pi theta)`.
    pub radius: i64,
    pub samples: Vec<f64>,
    /// `sup_theta |E_n - E_{n-1}|`; 0 at the seed level.
    pub sup_defect: f64,
}

/// Trace of the Rellich branch across nested boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RellichTrace {
    pub thetas: Vec<f64>,
    pub levels: Vec<RellichLevel>,
    /// Grid/level pairs where two eigenvalues fell inside the tracking disk.
    pub non_unique: Vec<(usize, usize)>,
}

impl RellichTrace {
    /// Monotonicity of every level along the branch: samples must decrease in
    /// theta with `|slope| >= pi (1 - tol)` between consecutive grid points on
    /// the same branch segment.
    pub fn branch_lipschitz_ok(&self, tol: f64) -> bool {
        self.levels.iter().all(|lv| {
            let (mono, lip) = branch_monotonicity(&self.thetas, &lv.samples);
            mono && lip >= PI * (1.0 - tol)
        })
    }
}

/// Track the eigenvalue branch through a strictly increasing schedule of box
/// radii. `E_0 = cot(pi theta)`; `E_n` is the eigenvalue of the level-n box
/// nearest `E_{n-1}`. A second candidate inside the tracking disk of radius
/// `10 (previous sup-defect + 1e-12)` is recorded as non-unique, not fatal.
pub fn rellich_iterate(
    params: &MarylandParams,
    theta_grid: &[f64],
    schedule: &[i64],
) -> Result<RellichTrace, SpectrumError> {
    if schedule.windows(2).any(|w| w[0] >= w[1]) || schedule.is_empty() {
        return Err(SpectrumError::InvalidParams(
            "schedule must be strictly increasing and nonempty".into(),
        ));
    }
    let mut levels = Vec::with_capacity(schedule.len() + 1);
    let mut non_unique = Vec::new();

    let seed: Vec<f64> = theta_grid.iter().map(|&t| cot_pi(t)).collect();
    levels.push(RellichLevel {
        level: 0,
        radius: 0,
        samples: seed,
        sup_defect: 0.0,
    });

    // First-level tracking disk seeds from the one-step perturbation bound.
    let mut prev_defect = 2.0 * params.d as f64 * params.eps;
    for (li, &radius) in schedule.iter().enumerate() {
        let spatial_box = Region::centered_box(params.d, radius);
        let mut samples = Vec::with_capacity(theta_grid.len());
        let mut sup_defect = 0.0f64;
        let disk = 10.0 * (prev_defect + 1e-12);
        for (ti, &theta) in theta_grid.iter().enumerate() {
            let p = MarylandParams {
                theta,
                ..params.clone()
            };
            let (h, _) = build_hamiltonian(&p, &spatial_box)?;
            let spec = h.symmetric_eigen().eigenvalues;
            let prev = levels[li].samples[ti];
            let mut best = spec[0];
            let mut best_dist = (spec[0] - prev).abs();
            let mut in_disk = 0usize;
            for &ev in spec.iter() {
                let dist = (ev - prev).abs();
                if dist < best_dist {
                    best = ev;
                    best_dist = dist;
                }
                if dist <= disk {
                    in_disk += 1;
                }
            }
            if in_disk >= 2 {
                non_unique.push((ti, li + 1));
            }
            sup_defect = sup_defect.max(best_dist);
            samples.push(best);
        }
        levels.push(RellichLevel {
            level: li + 1,
            radius,
            samples,
            sup_defect,
        });
        prev_defect = sup_defect;
    }
    Ok(RellichTrace {
        thetas: theta_grid.to_vec(),
        levels,
        non_unique,
    })
}

/// Localization-center counts over a tiling of an interior core sub-box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowCounts {
    pub window_size: i64,
    /// Lower corner of each window and the number of centers inside.
    pub windows: Vec<(Vec<i64>, usize)>,
    pub min_count: usize,
    pub max_count: usize,
}

/// Count localization centers per window of side `l_w`, tiling the largest
/// interior core box that keeps `boundary_margin` sites away from the edge.
pub fn center_equidistribution(eigsys: &EigenSystem, l_w: i64) -> WindowCounts {
    let d = eigsys.params.d;
    let bounds = eigsys.box_region.bounding_box();
    let radius = bounds
        .iter()
        .map(|(lo, hi)| ((hi - lo) / 2).abs())
        .min()
        .unwrap_or(0);
    // Core half-extent: whole windows only, margin sites dropped at each side.
    let windows_per_side = ((radius - BOUNDARY_MARGIN).max(0) / l_w).max(0);
    let half = windows_per_side * l_w;

    let centers: Vec<Site> = eigsys
        .sites
        .iter()
        .map(|s| eigsys.center_of(s).expect("labelled site"))
        .collect();

    let mut windows = Vec::new();
    let mut corner = vec![-half; d];
    if half == 0 {
        return WindowCounts {
            window_size: l_w,
            windows,
            min_count: 0,
            max_count: 0,
        };
    }
    loop {
        let count = centers
            .iter()
            .filter(|c| {
                c.coords
                    .iter()
                    .zip(&corner)
                    .all(|(x, lo)| *x >= *lo && *x < lo + l_w)
            })
            .count();
        windows.push((corner.clone(), count));
        let mut k = d;
        loop {
            if k == 0 {
                let min_count = windows.iter().map(|(_, c)| *c).min().unwrap_or(0);
                let max_count = windows.iter().map(|(_, c)| *c).max().unwrap_or(0);
                return WindowCounts {
                    window_size: l_w,
                    windows,
                    min_count,
                    max_count,
                };
            }
            k -= 1;
            if corner[k] + l_w < half {
                corner[k] += l_w;
                break;
            }
            corner[k] = -half;
        }
    }
}

/// Poisson-formula consistency for one labelled eigenpair over the annulus
/// `inner <= |x - label|_inf <= outer` intersected with the box.
///
/// With `G = (mu I - H_Lambda)^{-1}` on the annulus (which excludes the
/// localization center), the eigenfunction satisfies
/// `phi(x) = eps * sum_{w in inner boundary} G(x,w) * sum_{w' adjacent, outside}
/// phi(w')` exactly; returns the largest pointwise defect, or None when
/// `mu I - H_Lambda` has condition number >= 1e10.
pub fn poisson_consistency(
    eigsys: &EigenSystem,
    label: &Site,
    inner: i64,
    outer: i64,
) -> Result<Option<f64>, SpectrumError> {
    let mu = eigsys
        .mu_at(label)
        .ok_or_else(|| SpectrumError::InvalidParams("label outside the box".into()))?;
    if inner < 1 || outer < inner {
        return Err(SpectrumError::InvalidParams(
            "annulus radii must satisfy 1 <= inner <= outer".into(),
        ));
    }
    // Annulus sites restricted to the eigensystem box.
    let lam_sites: Vec<Site> = eigsys
        .sites
        .iter()
        .filter(|s| {
            let dist = s
                .coords
                .iter()
                .zip(&label.coords)
                .map(|(a, b)| (a - b).abs())
                .max()
                .unwrap_or(0);
            dist >= inner && dist <= outer
        })
        .cloned()
        .collect();
    if lam_sites.is_empty() {
        return Err(SpectrumError::InvalidParams("empty annulus".into()));
    }
    let lam_index: HashMap<&Site, usize> = lam_sites.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let m = lam_sites.len();
    let mut a = DMatrix::<f64>::zeros(m, m);
    for (i, s) in lam_sites.iter().enumerate() {
        a[(i, i)] = mu - eigsys.params.potential(s)?;
    }
    for (i, s) in lam_sites.iter().enumerate() {
        for (k, t) in lam_sites.iter().enumerate().skip(i + 1) {
            let dist: i64 = s
                .coords
                .iter()
                .zip(&t.coords)
                .map(|(x, y)| (x - y).abs())
                .sum();
            if dist == 1 {
                a[(i, k)] = -eigsys.params.eps;
                a[(k, i)] = -eigsys.params.eps;
            }
        }
    }
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smin > 0.0) || smax / smin >= 1e10 {
        return Ok(None);
    }
    let g = a.lu().try_inverse().expect("condition checked above");

    // Boundary sum: for w in the inner boundary of Lambda, collect phi over
    // adjacent box sites outside Lambda.
    let mut boundary_term = DVector::<f64>::zeros(m);
    for (wi, w) in lam_sites.iter().enumerate() {
        let mut acc = 0.0;
        for k in 0..w.coords.len() {
            for step in [-1i64, 1] {
                let mut nb = w.coords.clone();
                nb[k] += step;
                let nb_site = Site::new(nb);
                if lam_index.contains_key(&nb_site) {
                    continue;
                }
                if let Some(_row) = eigsys.index_of(&nb_site) {
                    acc += eigsys.phi_value(label, &nb_site).unwrap();
                }
            }
        }
        boundary_term[wi] = acc;
    }
    let reconstructed = eigsys.params.eps * (&g * boundary_term);
    let mut max_defect = 0.0f64;
    for (i, s) in lam_sites.iter().enumerate() {
        let direct = eigsys.phi_value(label, s).unwrap();
        max_defect = max_defect.max((reconstructed[i] - direct).abs());
    }
    Ok(Some(max_defect))
}
