//! The nonlinear core: the lattice system `(n.omega + mu_j) u^(n,j) +
//! delta W_u(n,j) = 0` in two conjugate sectors, its Lyapunov-Schmidt split
//! along the resonant set, the multiscale Newton iteration, and the
//! Q-equation frequency updates, together with solution verification in the
//! time domain.
//!
//! Amplitudes are stored for the `+` sector only; the conjugate sector is
//! always derived as `v(n,j) = conj(u^(-n,j))`. The nonlinearity and its
//! linearization are evaluated through the spatial fields
//! `U(n,x) = sum_j u^(n,j) phi_j(x)`, which turns the overlap-weighted
//! convolution sums into pointwise products over lattice sites; the
//! rearrangement is exact for finitely supported coefficients and is pinned
//! against a brute-force tensor-weighted oracle in the tests.

use crate::lattice::{l1_norm, linf_norm, ModeIndex, Sign, Site};
use crate::rng::substream;
use crate::spectrum::{build_hamiltonian, EigenSystem};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use thiserror::Error;

/// Overlap-tensor entries smaller than this are treated as exact zeros.
pub const OVERLAP_DROP_TOL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("target block (n_time {have}) cannot hold the convolution support (needs {needed})")]
    BlockTooSmall { needed: i64, have: i64 },
    #[error("linearized operator is ill conditioned: cond = {cond:e}")]
    IllConditioned { cond: f64 },
    #[error("residual failed to decrease: {previous:e} -> {current:e}")]
    NoProgress { previous: f64, current: f64 },
    #[error("did not converge within {steps} steps; residual history {history:?}")]
    DidNotConverge { steps: usize, history: Vec<f64> },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("Q-equation produced a non-real frequency (imaginary part {imag:e})")]
    ComplexFrequency { imag: f64 },
    #[error("site {0:?} is not labelled in the eigensystem")]
    MissingSite(Vec<i64>),
    #[error("linear solve failed")]
    SingularSystem,
}

/// Fourier-lattice coefficients of the `+` sector on a finite block.
///
/// The block is `[-n_time, n_time]^b x [-n_space, n_space]^d`; the conjugate
/// sector `v(n,j) = conj(u^(-n,j))` is derived on access and never stored.
#[derive(Debug, Clone)]
pub struct Coeffs {
    pub b: usize,
    pub d: usize,
    pub n_time: i64,
    pub n_space: i64,
    values: BTreeMap<(Vec<i64>, Vec<i64>), Complex64>,
}

/// Serializable form of [`Coeffs`]: one `(n, j, re, im)` quadruple per mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoeffsData {
    pub b: usize,
    pub d: usize,
    pub n_time: i64,
    pub n_space: i64,
    pub entries: Vec<CoeffEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoeffEntry {
    pub n: Vec<i64>,
    pub j: Vec<i64>,
    pub re: f64,
    pub im: f64,
}

impl Coeffs {
    pub fn new(b: usize, d: usize, n_time: i64, n_space: i64) -> Self {
        Coeffs {
            b,
            d,
            n_time,
            n_space,
            values: BTreeMap::new(),
        }
    }

    pub fn in_block(&self, n: &[i64], j: &[i64]) -> bool {
        linf_norm(n) <= self.n_time && linf_norm(j) <= self.n_space
    }

    /// Insert or overwrite one amplitude. The index must lie in the block.
    pub fn set(&mut self, n: Vec<i64>, j: Vec<i64>, value: Complex64) {
        assert_eq!(n.len(), self.b);
        assert_eq!(j.len(), self.d);
        assert!(
            self.in_block(&n, &j),
            "index ({n:?},{j:?}) outside the declared block"
        );
        if value == Complex64::ZERO {
            self.values.remove(&(n, j));
        } else {
            self.values.insert((n, j), value);
        }
    }

    pub fn get(&self, n: &[i64], j: &[i64]) -> Complex64 {
        self.values
            .get(&(n.to_vec(), j.to_vec()))
            .copied()
            .unwrap_or(Complex64::ZERO)
    }

    /// Conjugate-sector amplitude `v(n,j) = conj(u^(-n,j))`.
    pub fn v(&self, n: &[i64], j: &[i64]) -> Complex64 {
        let neg: Vec<i64> = n.iter().map(|x| -x).collect();
        self.get(&neg, j).conj()
    }

    /// Materialize the conjugate sector as its own coefficient set.
    pub fn mirror(&self) -> Coeffs {
        let mut out = Coeffs::new(self.b, self.d, self.n_time, self.n_space);
        for ((n, j), val) in &self.values {
            let neg: Vec<i64> = n.iter().map(|x| -x).collect();
            out.values.insert((neg, j.clone()), val.conj());
        }
        out
    }

    pub fn support(&self) -> impl Iterator<Item = (&(Vec<i64>, Vec<i64>), &Complex64)> {
        self.values.iter()
    }

    pub fn support_len(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .values()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Largest `|n|_inf` over the support; 0 for empty support.
    pub fn time_radius(&self) -> i64 {
        self.values
            .keys()
            .map(|(n, _)| linf_norm(n))
            .max()
            .unwrap_or(0)
    }

    /// Copy into a (weakly) larger block.
    pub fn regrown(&self, n_time: i64, n_space: i64) -> Coeffs {
        assert!(n_time >= self.n_time && n_space >= self.n_space);
        let mut out = Coeffs::new(self.b, self.d, n_time, n_space);
        out.values = self.values.clone();
        out
    }

    pub fn to_data(&self) -> CoeffsData {
        CoeffsData {
            b: self.b,
            d: self.d,
            n_time: self.n_time,
            n_space: self.n_space,
            entries: self
                .values
                .iter()
                .map(|((n, j), v)| CoeffEntry {
                    n: n.clone(),
                    j: j.clone(),
                    re: v.re,
                    im: v.im,
                })
                .collect(),
        }
    }

    pub fn from_data(data: &CoeffsData) -> Coeffs {
        let mut out = Coeffs::new(data.b, data.d, data.n_time, data.n_space);
        for e in &data.entries {
            out.set(e.n.clone(), e.j.clone(), Complex64::new(e.re, e.im));
        }
        out
    }
}

/// One anchored resonance: frequency slot `k`, spatial label `beta`, and the
/// fixed real amplitude `a`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Anchor {
    pub beta: Vec<i64>,
    pub a: f64,
}

/// The resonant set `S = {(+, -e_k, beta_k), (-, e_k, beta_k)}` with the
/// anchored amplitudes `u^(-e_k, beta_k) = a_k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonantSet {
    pub anchors: Vec<Anchor>,
}

impl ResonantSet {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self, SolverError> {
        if anchors.is_empty() {
            return Err(SolverError::InvalidConfig("at least one anchor".into()));
        }
        for (i, a) in anchors.iter().enumerate() {
            if !(1.0..=2.0).contains(&a.a) {
                return Err(SolverError::InvalidConfig(format!(
                    "anchor amplitude {} outside the window [1,2]",
                    a.a
                )));
            }
            for b in anchors.iter().skip(i + 1) {
                if a.beta == b.beta {
                    return Err(SolverError::InvalidConfig(
                        "anchor sites must be pairwise distinct".into(),
                    ));
                }
            }
        }
        Ok(ResonantSet { anchors })
    }

    pub fn b(&self) -> usize {
        self.anchors.len()
    }

    /// `-e_k` for anchor `k` (the + sector resonant time index).
    pub fn minus_e(&self, k: usize) -> Vec<i64> {
        let mut n = vec![0i64; self.b()];
        n[k] = -1;
        n
    }

    /// True when `(+, n, j)` lies in the resonant set.
    pub fn is_plus_anchor(&self, n: &[i64], j: &[i64]) -> bool {
        self.anchors
            .iter()
            .enumerate()
            .any(|(k, a)| a.beta == j && n == self.minus_e(k).as_slice())
    }

    /// True when `(-, n, j)` lies in the resonant set.
    pub fn is_minus_anchor(&self, n: &[i64], j: &[i64]) -> bool {
        let neg: Vec<i64> = n.iter().map(|x| -x).collect();
        self.is_plus_anchor(&neg, j)
    }

    /// Anchors-only initial guess on a block sized for scale M.
    pub fn initial_coeffs(&self, d: usize, n_time: i64, n_space: i64) -> Coeffs {
        let mut u = Coeffs::new(self.b(), d, n_time, n_space);
        for (k, a) in self.anchors.iter().enumerate() {
            u.set(self.minus_e(k), a.beta.clone(), Complex64::new(a.a, 0.0));
        }
        u
    }
}

/// Lazily memoized overlap integrals
/// `T(s_1, ..., s_{2p+2}) = sum_x phi_{s_1}(x) ... phi_{s_{2p+2}}(x)`,
/// fully symmetric in the site arguments. Values below [`OVERLAP_DROP_TOL`]
/// are normalized to exact zero. Memoization uses interior mutability and is
/// confined to one worker; the type is deliberately not Sync.
pub struct OverlapTensor {
    pub p: usize,
    cache: RefCell<HashMap<Vec<usize>, f64>>,
}

impl OverlapTensor {
    pub fn new(p: usize) -> Self {
        OverlapTensor {
            p,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn arity(&self) -> usize {
        2 * self.p + 2
    }

    /// Overlap value for the given labelled site indices (into
    /// `eigsys.sites`); order does not matter.
    pub fn value(&self, eigsys: &EigenSystem, site_indices: &[usize]) -> f64 {
        assert_eq!(site_indices.len(), self.arity());
        let mut key = site_indices.to_vec();
        key.sort_unstable();
        if let Some(v) = self.cache.borrow().get(&key) {
            return *v;
        }
        let m = eigsys.sites.len();
        let mut acc = 0.0f64;
        for x in 0..m {
            let mut prod = 1.0f64;
            for &s in &key {
                prod *= eigsys.phi[(x, s)];
            }
            acc += prod;
        }
        if acc.abs() < OVERLAP_DROP_TOL {
            acc = 0.0;
        }
        self.cache.borrow_mut().insert(key, acc);
        acc
    }

    /// Main coefficient `A = sum_x |phi_beta(x)|^{2p+2}`.
    pub fn main_coefficient(
        &self,
        eigsys: &EigenSystem,
        beta: &Site,
    ) -> Result<f64, SolverError> {
        let idx = eigsys
            .index_of(beta)
            .ok_or_else(|| SolverError::MissingSite(beta.coords.clone()))?;
        Ok(self.value(eigsys, &vec![idx; self.arity()]))
    }
}

/// `A_k` for every anchor.
pub fn main_coefficients(
    eigsys: &EigenSystem,
    p: usize,
    resonant: &ResonantSet,
) -> Result<Vec<f64>, SolverError> {
    let tensor = OverlapTensor::new(p);
    resonant
        .anchors
        .iter()
        .map(|a| tensor.main_coefficient(eigsys, &Site::new(a.beta.clone())))
        .collect()
}

// Spatial field map: time index -> complex field over the box sites.
type FieldMap = BTreeMap<Vec<i64>, DVector<Complex64>>;

// U(n, x) = sum_j u^(n,j) phi_j(x) for every time index in the support.
fn field_map(u: &Coeffs, eigsys: &EigenSystem) -> Result<FieldMap, SolverError> {
    let m = eigsys.sites.len();
    let mut fields: FieldMap = BTreeMap::new();
    for ((n, j), val) in u.support() {
        let col = eigsys
            .index_of(&Site::new(j.clone()))
            .ok_or_else(|| SolverError::MissingSite(j.clone()))?;
        let entry = fields
            .entry(n.clone())
            .or_insert_with(|| DVector::from_element(m, Complex64::ZERO));
        for x in 0..m {
            entry[x] += val * eigsys.phi[(x, col)];
        }
    }
    Ok(fields)
}

fn conjugate_field_map(fields: &FieldMap) -> FieldMap {
    fields
        .iter()
        .map(|(n, f)| {
            let neg: Vec<i64> = n.iter().map(|x| -x).collect();
            (neg, f.map(|c| c.conj()))
        })
        .collect()
}

// Convolution in the time index with pointwise products over sites.
fn convolve(a: &FieldMap, b: &FieldMap) -> FieldMap {
    let mut out: FieldMap = BTreeMap::new();
    for (na, fa) in a {
        for (nb, fb) in b {
            let n: Vec<i64> = na.iter().zip(nb).map(|(x, y)| x + y).collect();
            let prod = fa.component_mul(fb);
            match out.get_mut(&n) {
                Some(acc) => *acc += prod,
                None => {
                    out.insert(n, prod);
                }
            }
        }
    }
    out
}

// k-fold convolution power; k = 0 yields the neutral element (delta at 0,
// all-ones field).
fn convolve_power(a: &FieldMap, k: usize, b: usize, m: usize) -> FieldMap {
    if k == 0 {
        let mut out = BTreeMap::new();
        out.insert(vec![0i64; b], DVector::from_element(m, Complex64::ONE));
        return out;
    }
    let mut acc = a.clone();
    for _ in 1..k {
        acc = convolve(&acc, a);
    }
    acc
}

// Project a field onto the eigenbasis: w(j) = <phi_j, f>.
fn project_field(eigsys: &EigenSystem, f: &DVector<Complex64>) -> DVector<Complex64> {
    let re: DVector<f64> = f.map(|c| c.re);
    let im: DVector<f64> = f.map(|c| c.im);
    let wr = eigsys.phi.transpose() * re;
    let wi = eigsys.phi.transpose() * im;
    DVector::from_fn(wr.len(), |i, _| Complex64::new(wr[i], wi[i]))
}

/// Nonlinear term with independently supplied sectors: the coefficients of
/// `U^{*(p+1)} * V^{*p}` projected back onto the eigenbasis. The production
/// path ties `v = u.mirror()`; tests perturb the sectors independently.
///
/// Returns the coefficients restricted to the target block `(n_time,
/// n_space)` together with the l2 mass outside that block. With
/// `allow_truncation = false`, a convolution support exceeding the block is a
/// `BlockTooSmall` error.
pub fn nonlinear_term_uv(
    u: &Coeffs,
    v: &Coeffs,
    eigsys: &EigenSystem,
    p: usize,
    target: (i64, i64),
    allow_truncation: bool,
) -> Result<(Coeffs, f64), SolverError> {
    let (nt, ns) = target;
    let needed = (p as i64 + 1) * u.time_radius() + p as i64 * v.time_radius();
    if !allow_truncation && needed > nt {
        return Err(SolverError::BlockTooSmall {
            needed,
            have: nt,
        });
    }
    let m = eigsys.sites.len();
    let fu = field_map(u, eigsys)?;
    let fv = field_map(v, eigsys)?;
    let prod = convolve(
        &convolve_power(&fu, p + 1, u.b, m),
        &convolve_power(&fv, p, u.b, m),
    );

    let mut out = Coeffs::new(u.b, u.d, nt, ns);
    let mut tail_sq = 0.0f64;
    for (n, f) in &prod {
        let w = project_field(eigsys, f);
        for (idx, site) in eigsys.sites.iter().enumerate() {
            let val = w[idx];
            if val == Complex64::ZERO {
                continue;
            }
            if linf_norm(n) <= nt && linf_norm(&site.coords) <= ns {
                out.set(n.clone(), site.coords.clone(), val);
            } else {
                tail_sq += val.norm_sqr();
            }
        }
    }
    Ok((out, tail_sq.sqrt()))
}

/// Nonlinear term `W_u` of the `+` sector equation, with `v` derived from `u`.
pub fn nonlinear_term(
    u: &Coeffs,
    eigsys: &EigenSystem,
    p: usize,
    target: (i64, i64),
    allow_truncation: bool,
) -> Result<(Coeffs, f64), SolverError> {
    nonlinear_term_uv(u, &u.mirror(), eigsys, p, target, allow_truncation)
}

/// Two-sector linearized operator `T(sigma) = D(sigma) + delta W_u` on an
/// explicit mode list.
pub struct TwoSectorOperator {
    pub modes: Vec<ModeIndex>,
    index: HashMap<ModeIndex, usize>,
    pub matrix: DMatrix<Complex64>,
    pub sigma: f64,
    /// Largest defect of the conjugate-sector block symmetries
    /// `W_{--}(n,.;n',.) = conj(W_{++}(-n,.;-n',.))` and
    /// `W_{-+}(n,.;n',.) = conj(W_{+-}(-n,.;-n',.))` over assembled entries.
    pub conjugacy_defect: f64,
}

impl TwoSectorOperator {
    pub fn dim(&self) -> usize {
        self.modes.len()
    }

    pub fn position(&self, mode: &ModeIndex) -> Option<usize> {
        self.index.get(mode).copied()
    }
}

// The three Toplitz kernels of the linearization, keyed by Delta n.
struct Kernels {
    p0: FieldMap,   // U^{*p} * V^{*p}        (same-sector blocks)
    pp: FieldMap,   // U^{*(p+1)} * V^{*(p-1)} (+- block)
    pm: FieldMap,   // V^{*(p+1)} * U^{*(p-1)} (-+ block)
}

fn kernels(u: &Coeffs, eigsys: &EigenSystem, p: usize) -> Result<Kernels, SolverError> {
    let m = eigsys.sites.len();
    let fu = field_map(u, eigsys)?;
    let fv = conjugate_field_map(&fu);
    Ok(Kernels {
        p0: convolve(
            &convolve_power(&fu, p, u.b, m),
            &convolve_power(&fv, p, u.b, m),
        ),
        pp: convolve(
            &convolve_power(&fu, p + 1, u.b, m),
            &convolve_power(&fv, p - 1, u.b, m),
        ),
        pm: convolve(
            &convolve_power(&fv, p + 1, u.b, m),
            &convolve_power(&fu, p - 1, u.b, m),
        ),
    })
}

// Time supports of the three linearization kernels (same-sector, +- and -+),
// which determine the coupling structure of T without assembling it.
pub(crate) fn kernel_time_supports(
    u: &Coeffs,
    eigsys: &EigenSystem,
    p: usize,
) -> Result<[Vec<Vec<i64>>; 3], SolverError> {
    let ker = kernels(u, eigsys, p)?;
    Ok([
        ker.p0.keys().cloned().collect(),
        ker.pp.keys().cloned().collect(),
        ker.pm.keys().cloned().collect(),
    ])
}

/// Assemble `T(sigma)` on the given modes. `D(sigma)` is diagonal with
/// `+-(n.omega + sigma) + mu_j` per sector; the four derivative blocks carry
/// the combinatorial factors `p+1` (same-sector) and `p` (cross-sector).
pub fn linearized_operator(
    u: &Coeffs,
    eigsys: &EigenSystem,
    p: usize,
    omega: &[f64],
    delta: f64,
    sigma: f64,
    modes: &[ModeIndex],
) -> Result<TwoSectorOperator, SolverError> {
    if p == 0 {
        return Err(SolverError::InvalidConfig("p must be >= 1".into()));
    }
    let m_modes = modes.len();
    let mut matrix = DMatrix::<Complex64>::zeros(m_modes, m_modes);

    // Site index and mu per mode, resolved once.
    let mut site_idx = Vec::with_capacity(m_modes);
    for mode in modes {
        let idx = eigsys
            .index_of(&mode.j)
            .ok_or_else(|| SolverError::MissingSite(mode.j.coords.clone()))?;
        site_idx.push(idx);
    }

    for (r, mode) in modes.iter().enumerate() {
        let dot: f64 = mode
            .n
            .iter()
            .zip(omega)
            .map(|(c, w)| *c as f64 * w)
            .sum();
        let diag = mode.sign.as_f64() * (dot + sigma) + eigsys.mu[site_idx[r]];
        matrix[(r, r)] = Complex64::new(diag, 0.0);
    }

    if delta != 0.0 && u.support_len() > 0 {
        let ker = kernels(u, eigsys, p)?;
        // Projected kernels: for each Delta n, the matrix of
        // sum_x phi_j(x) phi_j'(x) kernel(Delta n, x) is phi^T diag(kernel) phi;
        // entries are read per (j, j') pair below. Cache per Delta n as the
        // site-space field itself and contract lazily.
        let p_plus_1 = Complex64::new((p + 1) as f64, 0.0);
        let p_fac = Complex64::new(p as f64, 0.0);
        let del = Complex64::new(delta, 0.0);
        for (r, row) in modes.iter().enumerate() {
            for (c, col) in modes.iter().enumerate() {
                let dn: Vec<i64> = row.n.iter().zip(&col.n).map(|(a, b)| a - b).collect();
                let (factor, field) = match (row.sign, col.sign) {
                    (Sign::Plus, Sign::Plus) | (Sign::Minus, Sign::Minus) => {
                        (p_plus_1, ker.p0.get(&dn))
                    }
                    (Sign::Plus, Sign::Minus) => (p_fac, ker.pp.get(&dn)),
                    (Sign::Minus, Sign::Plus) => (p_fac, ker.pm.get(&dn)),
                };
                let Some(field) = field else { continue };
                let mut acc = Complex64::ZERO;
                for x in 0..field.len() {
                    let w = eigsys.phi[(x, site_idx[r])] * eigsys.phi[(x, site_idx[c])];
                    if w != 0.0 {
                        acc += field[x] * w;
                    }
                }
                matrix[(r, c)] += del * factor * acc;
            }
        }
    }

    // Conjugate-sector symmetry of the assembled blocks.
    let index: HashMap<ModeIndex, usize> = modes
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, m)| (m, i))
        .collect();
    let mut defect = 0.0f64;
    for (r, row) in modes.iter().enumerate() {
        for (c, col) in modes.iter().enumerate() {
            if row.sign == Sign::Plus {
                continue;
            }
            // Mirror of entry (row, col) with both signs flipped and both
            // time indices negated.
            let mr = ModeIndex {
                sign: row.sign.flipped(),
                n: row.n.iter().map(|x| -x).collect(),
                j: row.j.clone(),
            };
            let mc = ModeIndex {
                sign: col.sign.flipped(),
                n: col.n.iter().map(|x| -x).collect(),
                j: col.j.clone(),
            };
            if let (Some(rr), Some(cc)) = (index.get(&mr), index.get(&mc)) {
                let mut here = matrix[(r, c)];
                let mut there = matrix[(*rr, *cc)];
                if r == c {
                    // Remove the sigma-shifted diagonal, which is not part of
                    // the symmetry statement.
                    let dot: f64 = row
                        .n
                        .iter()
                        .zip(omega)
                        .map(|(x, w)| *x as f64 * w)
                        .sum();
                    here -= Complex64::new(
                        row.sign.as_f64() * (dot + sigma) + eigsys.mu[site_idx[r]],
                        0.0,
                    );
                    let dot_m: f64 = mr
                        .n
                        .iter()
                        .zip(omega)
                        .map(|(x, w)| *x as f64 * w)
                        .sum();
                    there -= Complex64::new(
                        mr.sign.as_f64() * (dot_m + sigma) + eigsys.mu[site_idx[*rr]],
                        0.0,
                    );
                }
                defect = defect.max((here - there.conj()).norm());
            }
        }
    }

    Ok(TwoSectorOperator {
        modes: modes.to_vec(),
        index,
        matrix,
        sigma,
        conjugacy_defect: defect,
    })
}

/// Both sectors of the residual off the resonant set, plus the truncation
/// tail outside the block.
pub struct Residual {
    /// `F^+(n,j) = (n.omega + mu_j) u^(n,j) + delta W_u(n,j)` off `S`.
    pub f_plus: Coeffs,
    /// Mirror sector `F^-(n,j) = conj(F^+(-n,j))`, evaluated independently.
    pub f_minus: Coeffs,
    /// l2 norm over both sectors on the block, excluding anchors.
    pub on_block: f64,
    /// l2 mass of `delta W_u` outside the block (both sectors).
    pub tail: f64,
    /// Reported residual: sqrt(on_block^2 + tail^2).
    pub total: f64,
    /// Largest `|F^-(n,j) - conj(F^+(-n,j))|` over the block.
    pub mirror_defect: f64,
}

/// Evaluate the residual of the lattice system on the block
/// `[-n_block, n_block]^b x [-j_block, j_block]^d`, off the resonant set.
pub fn residual(
    u: &Coeffs,
    eigsys: &EigenSystem,
    p: usize,
    omega: &[f64],
    delta: f64,
    resonant: &ResonantSet,
    n_block: i64,
    j_block: i64,
) -> Result<Residual, SolverError> {
    let (w, w_tail_outside) = nonlinear_term(u, eigsys, p, (n_block, j_block), true)?;
    let mut f_plus = Coeffs::new(u.b, u.d, n_block, j_block);
    let mut f_minus = Coeffs::new(u.b, u.d, n_block, j_block);

    // Index set: union of u's support and W's support together with their
    // time-mirrored images, restricted to the block. The mirrored indices
    // carry the - sector residual (v and W~ live at negated time indices),
    // so omitting them silently zeroes F^- and breaks the two-sector solve.
    let mut indices: BTreeSet<(Vec<i64>, Vec<i64>)> = BTreeSet::new();
    let mut insert_with_mirror = |n: &Vec<i64>, j: &Vec<i64>| {
        if linf_norm(n) <= n_block && linf_norm(j) <= j_block {
            let neg: Vec<i64> = n.iter().map(|x| -x).collect();
            indices.insert((n.clone(), j.clone()));
            indices.insert((neg, j.clone()));
        }
    };
    for ((n, j), _) in u.support() {
        insert_with_mirror(n, j);
    }
    for ((n, j), _) in w.support() {
        insert_with_mirror(n, j);
    }

    let mut on_block_sq = 0.0f64;
    let mut mirror_defect = 0.0f64;
    for (n, j) in &indices {
        let mu = eigsys
            .mu_at(&Site::new(j.clone()))
            .ok_or_else(|| SolverError::MissingSite(j.clone()))?;
        let dot: f64 = n.iter().zip(omega).map(|(c, w)| *c as f64 * w).sum();
        // + sector.
        if !resonant.is_plus_anchor(n, j) {
            let val = (dot + mu) * u.get(n, j) + delta * w.get(n, j);
            if val != Complex64::ZERO {
                f_plus.set(n.clone(), j.clone(), val);
            }
            on_block_sq += val.norm_sqr();
        }
        // - sector, evaluated from its own definition:
        // F^-(n,j) = (-n.omega + mu_j) v(n,j) + delta W~(n,j), with
        // W~(n,j) = conj(W(-n,j)).
        if !resonant.is_minus_anchor(n, j) {
            let neg: Vec<i64> = n.iter().map(|x| -x).collect();
            let val = (-dot + mu) * u.v(n, j) + delta * w.get(&neg, j).conj();
            if val != Complex64::ZERO {
                f_minus.set(n.clone(), j.clone(), val);
            }
            on_block_sq += val.norm_sqr();
            // Mirror consistency: F^-(n,j) must equal conj(F^+(-n,j)).
            if !resonant.is_plus_anchor(&neg, j) {
                let mirrored = (-dot + mu) * u.get(&neg, j).conj()
                    + delta * w.get(&neg, j).conj();
                mirror_defect = mirror_defect.max((val - mirrored).norm());
            }
        }
    }

    // delta W outside the block contributes to both sectors.
    let tail = delta.abs() * w_tail_outside * std::f64::consts::SQRT_2;
    let on_block = on_block_sq.sqrt();
    Ok(Residual {
        f_plus,
        f_minus,
        on_block,
        tail,
        total: (on_block_sq + tail * tail).sqrt(),
        mirror_defect,
    })
}

/// Solver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Nonlinearity exponent p >= 1 in `|u|^{2p} u`.
    pub p: usize,
    pub resonant: ResonantSet,
    pub delta: f64,
    /// Scale multiplier M; blocks grow as N = M^{r+1}.
    pub m_mult: i64,
    pub tol: f64,
    pub max_steps: usize,
    pub cond_limit: f64,
    /// Required per-step residual decrease factor.
    pub decrease_factor: f64,
    /// Number of random times for the time-domain residual check.
    pub time_samples: usize,
    pub seed: u64,
}

impl SolverConfig {
    pub fn desk(resonant: ResonantSet, delta: f64) -> Self {
        SolverConfig {
            p: 1,
            resonant,
            delta,
            m_mult: 3,
            tol: 1e-10,
            max_steps: 12,
            cond_limit: 1e12,
            decrease_factor: 0.9,
            time_samples: 50,
            seed: 7,
        }
    }

    fn validate(&self) -> Result<(), SolverError> {
        if self.p == 0 {
            return Err(SolverError::InvalidConfig("p must be >= 1".into()));
        }
        if self.m_mult < 2 {
            return Err(SolverError::InvalidConfig("M must be >= 2".into()));
        }
        if !(self.tol > 0.0) {
            return Err(SolverError::InvalidConfig("tol must be positive".into()));
        }
        Ok(())
    }
}

/// Newton iteration state.
#[derive(Debug, Clone)]
pub struct NewtonState {
    pub r: usize,
    pub u: Coeffs,
    pub omega: Vec<f64>,
    pub residual_norm: f64,
    pub last_correction_norm: f64,
    /// Current block scale N = M^{r+1}.
    pub scale: i64,
    pub residual_history: Vec<f64>,
    pub correction_history: Vec<f64>,
    pub cond_history: Vec<f64>,
    pub mirror_defect_max: f64,
}

fn space_cap(eigsys: &EigenSystem) -> i64 {
    eigsys
        .box_region
        .bounding_box()
        .iter()
        .map(|(lo, hi)| ((hi - lo) / 2).abs())
        .min()
        .unwrap_or(0)
}

// Slices (sign, n) reachable from the residual support through the coupling
// structure of T, within |n|_inf <= n_bound. Off this closure both the
// residual and the couplings vanish identically, so the Newton correction is
// exactly zero there and the linear solve restricts without error.
fn active_slices(
    start: &BTreeSet<(Sign, Vec<i64>)>,
    ker: &Kernels,
    n_bound: i64,
) -> BTreeSet<(Sign, Vec<i64>)> {
    let supp0: Vec<Vec<i64>> = ker.p0.keys().cloned().collect();
    let supp_pp: Vec<Vec<i64>> = ker.pp.keys().cloned().collect();
    let supp_pm: Vec<Vec<i64>> = ker.pm.keys().cloned().collect();
    let mut seen = start.clone();
    let mut queue: VecDeque<(Sign, Vec<i64>)> = start.iter().cloned().collect();
    while let Some((sign, n)) = queue.pop_front() {
        // Neighbors (sign', n') with coupling T[(sign,n),(sign',n')] != 0:
        // n' = n - s for s in the kernel support of the (sign, sign') block.
        let hops: Vec<(Sign, &Vec<Vec<i64>>)> = match sign {
            Sign::Plus => vec![(Sign::Plus, &supp0), (Sign::Minus, &supp_pp)],
            Sign::Minus => vec![(Sign::Minus, &supp0), (Sign::Plus, &supp_pm)],
        };
        for (next_sign, supp) in hops {
            for s in supp {
                let n_next: Vec<i64> = n.iter().zip(s).map(|(a, b)| a - b).collect();
                if linf_norm(&n_next) > n_bound {
                    continue;
                }
                let key = (next_sign, n_next);
                if seen.insert(key.clone()) {
                    queue.push_back(key);
                }
            }
        }
    }
    seen
}

/// One Newton correction at the next scale `N = M^{r+2}`.
///
/// The linearized system is restricted to the coupling-closure of the
/// residual support inside `({+-} x [-N,N]^b x box) \ S`, solved by dense LU
/// with one pass of iterative refinement; the condition number is estimated
/// by SVD. Anchors are re-imposed exactly after the update.
pub fn newton_step(
    state: &NewtonState,
    eigsys: &EigenSystem,
    cfg: &SolverConfig,
) -> Result<NewtonState, SolverError> {
    let next_scale = state
        .scale
        .checked_mul(cfg.m_mult)
        .ok_or_else(|| SolverError::InvalidConfig("scale overflow".into()))?;
    let j_cap = space_cap(eigsys).min(next_scale);
    let res = residual(
        &state.u,
        eigsys,
        cfg.p,
        &state.omega,
        cfg.delta,
        &cfg.resonant,
        next_scale,
        j_cap,
    )?;
    if res.total <= cfg.tol || cfg.delta == 0.0 {
        // Nothing to correct at this scale.
        let mut out = state.clone();
        out.r += 1;
        out.scale = next_scale;
        out.residual_norm = res.total;
        out.u = out.u.regrown(next_scale.max(out.u.n_time), j_cap.max(out.u.n_space));
        out.residual_history.push(res.total);
        out.correction_history.push(0.0);
        out.last_correction_norm = 0.0;
        return Ok(out);
    }

    // Active slices from both sectors' residual supports.
    let mut start: BTreeSet<(Sign, Vec<i64>)> = BTreeSet::new();
    for ((n, _), _) in res.f_plus.support() {
        start.insert((Sign::Plus, n.clone()));
    }
    for ((n, _), _) in res.f_minus.support() {
        start.insert((Sign::Minus, n.clone()));
    }
    let ker = kernels(&state.u, eigsys, cfg.p)?;
    let slices = active_slices(&start, &ker, next_scale);

    // Mode list: slices x labelled sites within the cap, minus anchors.
    let mut modes: Vec<ModeIndex> = Vec::new();
    for (sign, n) in &slices {
        for site in &eigsys.sites {
            if linf_norm(&site.coords) > j_cap {
                continue;
            }
            let anchored = match sign {
                Sign::Plus => cfg.resonant.is_plus_anchor(n, &site.coords),
                Sign::Minus => cfg.resonant.is_minus_anchor(n, &site.coords),
            };
            if anchored {
                continue;
            }
            modes.push(ModeIndex {
                sign: *sign,
                n: n.clone(),
                j: site.clone(),
            });
        }
    }
    if modes.is_empty() {
        return Err(SolverError::InvalidConfig(
            "empty restricted system".into(),
        ));
    }

    let op = linearized_operator(
        &state.u,
        eigsys,
        cfg.p,
        &state.omega,
        cfg.delta,
        0.0,
        &modes,
    )?;

    let cond = {
        let sv = op.matrix.clone().svd(false, false).singular_values;
        let smax = sv.iter().cloned().fold(0.0f64, f64::max);
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if smin > 0.0 {
            smax / smin
        } else {
            f64::INFINITY
        }
    };
    if !cond.is_finite() || cond > cfg.cond_limit {
        return Err(SolverError::IllConditioned { cond });
    }

    let mut rhs = DVector::<Complex64>::zeros(modes.len());
    for (i, mode) in modes.iter().enumerate() {
        let val = match mode.sign {
            Sign::Plus => res.f_plus.get(&mode.n, &mode.j.coords),
            Sign::Minus => res.f_minus.get(&mode.n, &mode.j.coords),
        };
        rhs[i] = -val;
    }

    let lu = op.matrix.clone().lu();
    let mut delta_vec = lu.solve(&rhs).ok_or(SolverError::SingularSystem)?;
    // One pass of iterative refinement in working precision.
    let defect = &op.matrix * &delta_vec - &rhs;
    if let Some(corr) = lu.solve(&defect) {
        delta_vec -= corr;
    }

    // Fold the two sectors back into u: the + sector applies directly, the -
    // sector mirrors as conj at -n. Both present -> average, defect recorded.
    let mut contributions: BTreeMap<(Vec<i64>, Vec<i64>), Vec<Complex64>> = BTreeMap::new();
    for (i, mode) in modes.iter().enumerate() {
        let (key, val) = match mode.sign {
            Sign::Plus => ((mode.n.clone(), mode.j.coords.clone()), delta_vec[i]),
            Sign::Minus => {
                let neg: Vec<i64> = mode.n.iter().map(|x| -x).collect();
                ((neg, mode.j.coords.clone()), delta_vec[i].conj())
            }
        };
        contributions.entry(key).or_default().push(val);
    }

    let mut u_next = state
        .u
        .regrown(next_scale.max(state.u.n_time), j_cap.max(state.u.n_space));
    let mut mirror_defect = state.mirror_defect_max;
    let mut correction_sq = 0.0f64;
    for ((n, j), vals) in &contributions {
        let mean = vals.iter().sum::<Complex64>() / Complex64::new(vals.len() as f64, 0.0);
        if vals.len() == 2 {
            mirror_defect = mirror_defect.max((vals[0] - vals[1]).norm());
        }
        correction_sq += mean.norm_sqr();
        let cur = u_next.get(n, j);
        u_next.set(n.clone(), j.clone(), cur + mean);
    }
    // Anchors bitwise.
    for (k, a) in cfg.resonant.anchors.iter().enumerate() {
        u_next.set(
            cfg.resonant.minus_e(k),
            a.beta.clone(),
            Complex64::new(a.a, 0.0),
        );
    }

    let new_res = residual(
        &u_next,
        eigsys,
        cfg.p,
        &state.omega,
        cfg.delta,
        &cfg.resonant,
        next_scale,
        j_cap,
    )?;

    let mut out = state.clone();
    out.r += 1;
    out.scale = next_scale;
    out.u = u_next;
    out.residual_norm = new_res.total;
    out.last_correction_norm = correction_sq.sqrt();
    out.residual_history.push(new_res.total);
    out.correction_history.push(out.last_correction_norm);
    out.cond_history.push(cond);
    out.mirror_defect_max = mirror_defect.max(new_res.mirror_defect);
    Ok(out)
}

/// Q-equation update `omega_k = mu_{beta_k} + delta W_u(-e_k, beta_k) / a_k`.
/// Returns the frequencies and the largest imaginary defect encountered
/// (which must stay at rounding level for conjugate-symmetric data).
pub fn q_update(
    u: &Coeffs,
    eigsys: &EigenSystem,
    p: usize,
    delta: f64,
    resonant: &ResonantSet,
) -> Result<(Vec<f64>, f64), SolverError> {
    // W evaluated on a block just large enough for the anchor indices.
    let nt = (p as i64 + 1) * u.time_radius() + p as i64 * u.time_radius();
    let ns = space_cap(eigsys);
    let (w, _) = nonlinear_term(u, eigsys, p, (nt.max(1), ns), true)?;
    let mut omega = Vec::with_capacity(resonant.b());
    let mut imag_defect = 0.0f64;
    for (k, anchor) in resonant.anchors.iter().enumerate() {
        let beta = Site::new(anchor.beta.clone());
        let mu = eigsys
            .mu_at(&beta)
            .ok_or_else(|| SolverError::MissingSite(anchor.beta.clone()))?;
        let w_val = w.get(&resonant.minus_e(k), &anchor.beta);
        let val = mu + delta * w_val.re / anchor.a;
        let imag = (delta * w_val.im / anchor.a).abs();
        if imag > 1e-10 * (1.0 + val.abs()) {
            return Err(SolverError::ComplexFrequency { imag });
        }
        imag_defect = imag_defect.max(imag);
        omega.push(val);
    }
    Ok((omega, imag_defect))
}

/// Weighted-decay fit of a coefficient set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayFit {
    /// Largest rho on the grid with
    /// `sum_{(n,j) not in S0} |u^(n,j)| e^{rho(|n|+|j|)} <= sqrt(eps+delta)`;
    /// None when even rho = 0 fails.
    pub rho_star: Option<f64>,
    /// Least-squares slope of `log|u^|` against `|n|_1 + |j|_1`, off S0.
    pub slope: Option<f64>,
    /// The budget `sqrt(eps + delta)`.
    pub budget: f64,
    /// Sampled `(rho, weighted sum)` pairs.
    pub table: Vec<(f64, f64)>,
}

/// Evaluate the weighted l1 sums over a 100-point rho grid on
/// `[0, |log(eps+delta)|]`.
pub fn decay_fit(u: &Coeffs, resonant: &ResonantSet, eps: f64, delta: f64) -> DecayFit {
    let budget = (eps + delta).sqrt();
    let rho_max = (eps + delta).ln().abs();
    let grid: Vec<f64> = (0..100).map(|i| rho_max * i as f64 / 99.0).collect();

    let off_s0: Vec<(f64, f64)> = u
        .support()
        .filter(|((n, j), _)| !resonant.is_plus_anchor(n, j))
        .map(|((n, j), v)| ((l1_norm(n) + l1_norm(j)) as f64, v.norm()))
        .collect();

    let mut table = Vec::with_capacity(grid.len());
    let mut rho_star = None;
    for &rho in &grid {
        let sum: f64 = off_s0.iter().map(|(w, a)| a * (rho * w).exp()).sum();
        table.push((rho, sum));
        if sum <= budget {
            rho_star = Some(rho);
        }
    }

    let pts: Vec<(f64, f64)> = off_s0
        .iter()
        .filter(|(_, a)| *a > 1e-14)
        .map(|(w, a)| (*w, a.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|(x, _)| x).sum::<f64>() / n;
        let my = pts.iter().map(|(_, y)| y).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
        if sxx > 0.0 {
            Some(pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx)
        } else {
            None
        }
    } else {
        None
    };
    DecayFit {
        rho_star,
        slope,
        budget,
        table,
    }
}

/// Field values `u(t, x) = sum u^(n,j) e^{i n.omega t} phi_j(x)` at the given
/// times, over all box sites.
pub fn evaluate_time_domain(
    u: &Coeffs,
    omega: &[f64],
    eigsys: &EigenSystem,
    times: &[f64],
) -> Result<Vec<DVector<Complex64>>, SolverError> {
    let m = eigsys.sites.len();
    let fields = field_map(u, eigsys)?;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let mut acc = DVector::from_element(m, Complex64::ZERO);
        for (n, f) in &fields {
            let phase: f64 = n.iter().zip(omega).map(|(c, w)| *c as f64 * w).sum();
            let factor = Complex64::new(0.0, phase * t).exp();
            acc += f * factor;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Max-norm residual of the time-domain equation
/// `i du/dt - H u - delta |u|^{2p} u` over the sampled times, evaluated
/// without the lattice machinery: the time derivative is analytic in the
/// quasi-periodic ansatz, H is the assembled box matrix, and the
/// nonlinearity is a pointwise power.
pub fn time_residual(
    u: &Coeffs,
    omega: &[f64],
    eigsys: &EigenSystem,
    p: usize,
    delta: f64,
    times: &[f64],
) -> Result<f64, SolverError> {
    let (h, _) = build_hamiltonian(&eigsys.params, &eigsys.box_region)
        .map_err(|e| SolverError::InvalidConfig(e.to_string()))?;
    let m = eigsys.sites.len();
    let fields = field_map(u, eigsys)?;
    let mut worst = 0.0f64;
    for &t in times {
        let mut val = DVector::from_element(m, Complex64::ZERO);
        let mut dt = DVector::from_element(m, Complex64::ZERO);
        for (n, f) in &fields {
            let phase: f64 = n.iter().zip(omega).map(|(c, w)| *c as f64 * w).sum();
            let factor = Complex64::new(0.0, phase * t).exp();
            val += f * factor;
            // i d/dt of e^{i phase t} contributes -phase.
            dt += f * (factor * Complex64::new(-phase, 0.0));
        }
        // H val, with H real symmetric.
        let vr: DVector<f64> = val.map(|c| c.re);
        let vi: DVector<f64> = val.map(|c| c.im);
        let hr = &h * vr;
        let hi = &h * vi;
        for x in 0..m {
            let hval = Complex64::new(hr[x], hi[x]);
            let nl = delta * val[x].norm_sqr().powi(p as i32) * val[x];
            let res = dt[x] - hval - nl;
            worst = worst.max(res.norm());
        }
    }
    Ok(worst)
}

/// Full solution report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionReport {
    pub u: CoeffsData,
    pub omega: Vec<f64>,
    pub omega0: Vec<f64>,
    pub residual_history: Vec<f64>,
    pub correction_history: Vec<f64>,
    pub cond_history: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
    pub final_residual: f64,
    pub final_scale: i64,
    pub anchors_exact: bool,
    pub block_growth_ok: bool,
    pub monotone_residuals: bool,
    /// Least-squares slope of log r_{k+1} against log r_k over consecutive
    /// small residual pairs; quadratic convergence shows as slope ~ 2.
    pub quadratic_slope: Option<f64>,
    pub mirror_defect_max: f64,
    pub q_imag_defect_max: f64,
    pub decay: DecayFit,
    pub time_domain_residual: f64,
}

fn quadratic_slope(history: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = history
        .windows(2)
        .filter(|w| w[0] > 1e-15 && w[1] > 1e-15 && w[0] < 1e-2)
        .map(|w| (w[0].ln(), w[1].ln()))
        .collect();
    match pairs.len() {
        0 => None,
        1 => Some(pairs[0].1 / pairs[0].0),
        _ => {
            let n = pairs.len() as f64;
            let mx = pairs.iter().map(|(x, _)| x).sum::<f64>() / n;
            let my = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
            let sxx: f64 = pairs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
            if sxx == 0.0 {
                return Some(pairs[0].1 / pairs[0].0);
            }
            Some(
                pairs
                    .iter()
                    .map(|(x, y)| (x - mx) * (y - my))
                    .sum::<f64>()
                    / sxx,
            )
        }
    }
}

/// Run the alternating Newton / Q-equation scheme from the anchors-only
/// initial guess until the reported residual (truncation tails included)
/// drops below tolerance.
pub fn cwb_solve(eigsys: &EigenSystem, cfg: &SolverConfig) -> Result<SolutionReport, SolverError> {
    cfg.validate()?;
    let d = eigsys.params.d;
    let j_cap = space_cap(eigsys);
    for anchor in &cfg.resonant.anchors {
        if eigsys.index_of(&Site::new(anchor.beta.clone())).is_none() {
            return Err(SolverError::MissingSite(anchor.beta.clone()));
        }
    }

    let omega0: Vec<f64> = cfg
        .resonant
        .anchors
        .iter()
        .map(|a| eigsys.mu_at(&Site::new(a.beta.clone())).unwrap())
        .collect();
    // First-order frequency initialization
    // omega_k = mu_{beta_k} + delta A_k a_k^{2p}.
    let a_coeffs = main_coefficients(eigsys, cfg.p, &cfg.resonant)?;
    let omega_init: Vec<f64> = omega0
        .iter()
        .zip(&a_coeffs)
        .zip(&cfg.resonant.anchors)
        .map(|((mu, ak), anchor)| mu + cfg.delta * ak * anchor.a.powi(2 * cfg.p as i32))
        .collect();

    let scale0 = cfg.m_mult;
    let mut state = NewtonState {
        r: 0,
        u: cfg
            .resonant
            .initial_coeffs(d, scale0.max(1), j_cap.min(scale0).max(
                cfg.resonant
                    .anchors
                    .iter()
                    .map(|a| linf_norm(&a.beta))
                    .max()
                    .unwrap_or(0),
            )),
        omega: omega_init,
        residual_norm: f64::INFINITY,
        last_correction_norm: 0.0,
        scale: scale0,
        residual_history: Vec::new(),
        correction_history: Vec::new(),
        cond_history: Vec::new(),
        mirror_defect_max: 0.0,
    };

    let r0 = residual(
        &state.u,
        eigsys,
        cfg.p,
        &state.omega,
        cfg.delta,
        &cfg.resonant,
        state.scale,
        j_cap.min(state.scale),
    )?;
    state.residual_norm = r0.total;
    state.residual_history.push(r0.total);
    state.mirror_defect_max = r0.mirror_defect;

    let mut q_imag_max = 0.0f64;
    let mut converged = state.residual_norm <= cfg.tol;
    while !converged {
        if state.r >= cfg.max_steps {
            return Err(SolverError::DidNotConverge {
                steps: state.r,
                history: state.residual_history.clone(),
            });
        }
        let prev = state.residual_norm;
        state = newton_step(&state, eigsys, cfg)?;
        let (omega_new, imag) = q_update(&state.u, eigsys, cfg.p, cfg.delta, &cfg.resonant)?;
        q_imag_max = q_imag_max.max(imag);
        state.omega = omega_new;
        // The frequency moved; recompute the residual it controls.
        let res = residual(
            &state.u,
            eigsys,
            cfg.p,
            &state.omega,
            cfg.delta,
            &cfg.resonant,
            state.scale,
            j_cap.min(state.scale),
        )?;
        state.residual_norm = res.total;
        *state.residual_history.last_mut().unwrap() = res.total;
        state.mirror_defect_max = state.mirror_defect_max.max(res.mirror_defect);

        converged = state.residual_norm <= cfg.tol;
        if !converged && state.residual_norm > prev * cfg.decrease_factor {
            return Err(SolverError::NoProgress {
                previous: prev,
                current: state.residual_norm,
            });
        }
    }

    // Verification extras.
    let anchors_exact = cfg.resonant.anchors.iter().enumerate().all(|(k, a)| {
        state.u.get(&cfg.resonant.minus_e(k), &a.beta) == Complex64::new(a.a, 0.0)
    });
    let block_growth_ok = {
        let mut ok = true;
        let mut expect = cfg.m_mult;
        for _ in 0..state.r {
            expect = expect.saturating_mul(cfg.m_mult);
        }
        ok &= state.scale == expect;
        ok
    };
    let monotone_residuals = state
        .residual_history
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    let slope = quadratic_slope(&state.residual_history);

    let decay = decay_fit(&state.u, &cfg.resonant, eigsys.params.eps, cfg.delta);

    let mut rng = substream(cfg.seed, "time-domain-samples");
    let times: Vec<f64> = (0..cfg.time_samples)
        .map(|_| rng.random::<f64>() * 100.0)
        .collect();
    let t_res = time_residual(&state.u, &state.omega, eigsys, cfg.p, cfg.delta, &times)?;

    Ok(SolutionReport {
        u: state.u.to_data(),
        omega: state.omega.clone(),
        omega0,
        residual_history: state.residual_history.clone(),
        correction_history: state.correction_history.clone(),
        cond_history: state.cond_history.clone(),
        steps: state.r,
        converged: true,
        final_residual: state.residual_norm,
        final_scale: state.scale,
        anchors_exact,
        block_growth_ok,
        monotone_residuals,
        quadratic_slope: slope,
        mirror_defect_max: state.mirror_defect_max,
        q_imag_defect_max: q_imag_max,
        decay,
        time_domain_residual: t_res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Region;
    use crate::spectrum::{diagonalize_and_relabel, MarylandParams, GOLDEN_RATIO_FREQ};

    const GOLDEN: f64 = GOLDEN_RATIO_FREQ;

    fn eigsys_1d(eps: f64, theta: f64, radius: i64) -> EigenSystem {
        let p = MarylandParams::new(1, eps, vec![GOLDEN], theta);
        diagonalize_and_relabel(&p, &Region::centered_box(1, radius)).unwrap()
    }

    fn single_anchor(a: f64) -> ResonantSet {
        ResonantSet::new(vec![Anchor {
            beta: vec![0],
            a,
        }])
        .unwrap()
    }

    #[test]
    fn resonant_set_validation() {
        assert!(ResonantSet::new(vec![]).is_err());
        assert!(ResonantSet::new(vec![Anchor {
            beta: vec![0],
            a: 0.5
        }])
        .is_err());
        assert!(ResonantSet::new(vec![
            Anchor {
                beta: vec![0],
                a: 1.1
            },
            Anchor {
                beta: vec![0],
                a: 1.2
            }
        ])
        .is_err());
        let rs = ResonantSet::new(vec![
            Anchor {
                beta: vec![0],
                a: 1.0
            },
            Anchor {
                beta: vec![2],
                a: 2.0
            },
        ])
        .unwrap();
        assert!(rs.is_plus_anchor(&[-1, 0], &[0]));
        assert!(rs.is_plus_anchor(&[0, -1], &[2]));
        assert!(rs.is_minus_anchor(&[1, 0], &[0]));
        assert!(!rs.is_plus_anchor(&[1, 0], &[0]));
    }

    #[test]
    fn overlap_tensor_symmetry_and_diagonal() {
        let eigsys = eigsys_1d(0.05, 0.3, 5);
        let tensor = OverlapTensor::new(1);
        let i0 = eigsys.index_of(&Site::new(vec![0])).unwrap();
        let i1 = eigsys.index_of(&Site::new(vec![1])).unwrap();
        let i2 = eigsys.index_of(&Site::new(vec![-2])).unwrap();
        let base = tensor.value(&eigsys, &[i0, i1, i2, i0]);
        // Full permutation symmetry.
        assert_eq!(base, tensor.value(&eigsys, &[i2, i0, i0, i1]));
        assert_eq!(base, tensor.value(&eigsys, &[i1, i0, i2, i0]));
        // Diagonal equals the main coefficient.
        let a0 = tensor.main_coefficient(&eigsys, &Site::new(vec![0])).unwrap();
        let direct: f64 = (0..eigsys.sites.len())
            .map(|x| eigsys.phi[(x, i0)].powi(4))
            .sum();
        assert!((a0 - direct).abs() < 1e-14);
        // A_k window: [1 - (2p+2) sqrt(eps), 1].
        assert!(a0 <= 1.0 + 1e-12);
        assert!(a0 >= 1.0 - 4.0 * 0.05f64.sqrt());
    }

    #[test]
    fn nonlinear_term_zero_input() {
        let eigsys = eigsys_1d(0.05, 0.3, 4);
        let u = Coeffs::new(1, 1, 2, 4);
        let (w, tail) = nonlinear_term(&u, &eigsys, 1, (2, 4), false).unwrap();
        assert_eq!(w.support_len(), 0);
        assert_eq!(tail, 0.0);
    }

    #[test]
    fn nonlinear_term_single_mode_concentrates() {
        let eigsys = eigsys_1d(0.04, 0.31, 5);
        let rs = single_anchor(1.3);
        let u = rs.initial_coeffs(1, 1, 5);
        let (w, tail) = nonlinear_term(&u, &eigsys, 1, (3, 5), false).unwrap();
        assert_eq!(tail, 0.0);
        // Support concentrated at n = -1 (= -1 - 1 + 1).
        for ((n, _), _) in w.support() {
            assert_eq!(n, &vec![-1i64]);
        }
        // W(-1, j) = a^3 * Overlap(beta,beta,beta; j).
        let tensor = OverlapTensor::new(1);
        let ib = eigsys.index_of(&Site::new(vec![0])).unwrap();
        for site in &eigsys.sites {
            let ij = eigsys.index_of(site).unwrap();
            let expect = 1.3f64.powi(3) * tensor.value(&eigsys, &[ib, ib, ib, ij]);
            let got = w.get(&[-1], &site.coords);
            assert!((got.re - expect).abs() < 1e-12, "site {site:?}");
            assert!(got.im.abs() < 1e-14);
        }
    }

    // Brute-force tensor-weighted convolution: the defining (2p+1)-fold sum,
    // p = 1.
    fn brute_force_w(
        u: &Coeffs,
        eigsys: &EigenSystem,
        n: &[i64],
        j: &Site,
    ) -> Complex64 {
        let tensor = OverlapTensor::new(1);
        let v = u.mirror();
        let ij = eigsys.index_of(j).unwrap();
        let mut acc = Complex64::ZERO;
        for ((n1, j1), a1) in u.support() {
            for ((n2, j2), a2) in u.support() {
                for ((n3, j3), a3) in v.support() {
                    let sum: Vec<i64> = n1
                        .iter()
                        .zip(n2)
                        .zip(n3)
                        .map(|((x, y), z)| x + y + z)
                        .collect();
                    if sum != n {
                        continue;
                    }
                    let i1 = eigsys.index_of(&Site::new(j1.clone())).unwrap();
                    let i2 = eigsys.index_of(&Site::new(j2.clone())).unwrap();
                    let i3 = eigsys.index_of(&Site::new(j3.clone())).unwrap();
                    let t = tensor.value(&eigsys, &[i1, i2, i3, ij]);
                    acc += a1 * a2 * a3 * t;
                }
            }
        }
        acc
    }

    #[test]
    fn nonlinear_term_matches_brute_force() {
        let eigsys = eigsys_1d(0.05, 0.37, 3);
        let mut rng = substream(42, "w-oracle");
        let mut u = Coeffs::new(1, 1, 1, 1);
        for n in -1i64..=1 {
            for j in -1i64..=1 {
                u.set(
                    vec![n],
                    vec![j],
                    Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
                );
            }
        }
        let (w, _) = nonlinear_term(&u, &eigsys, 1, (3, 3), false).unwrap();
        for n in -3i64..=3 {
            for site in &eigsys.sites {
                let got = w.get(&[n], &site.coords);
                let want = brute_force_w(&u, &eigsys, &[n], site);
                assert!(
                    (got - want).norm() < 1e-12,
                    "mismatch at n={n}, j={site:?}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn nonlinear_term_block_too_small() {
        let eigsys = eigsys_1d(0.05, 0.3, 3);
        let rs = single_anchor(1.0);
        let u = rs.initial_coeffs(1, 2, 3);
        let mut u2 = u.clone();
        u2.set(vec![2], vec![1], Complex64::new(0.1, 0.0));
        // Support radius 2, p = 1: needs n_time >= 6.
        let err = nonlinear_term(&u2, &eigsys, 1, (3, 3), false).unwrap_err();
        assert!(matches!(err, SolverError::BlockTooSmall { needed: 6, have: 3 }));
        // Truncation allowed: tail reported.
        let (_, tail) = nonlinear_term(&u2, &eigsys, 1, (3, 3), true).unwrap();
        assert!(tail > 0.0);
    }

    #[test]
    fn linearized_operator_zero_u_is_diagonal() {
        let eigsys = eigsys_1d(0.05, 0.3, 3);
        let u = Coeffs::new(1, 1, 1, 3);
        let omega = vec![0.9];
        let sigma = 0.37;
        let modes: Vec<ModeIndex> = [-1i64, 0, 1]
            .iter()
            .flat_map(|n| {
                eigsys.sites.iter().flat_map(move |s| {
                    [Sign::Plus, Sign::Minus].map(|sign| ModeIndex {
                        sign,
                        n: vec![*n],
                        j: s.clone(),
                    })
                })
            })
            .collect();
        let op = linearized_operator(&u, &eigsys, 1, &omega, 0.5, sigma, &modes).unwrap();
        for (r, mode) in op.modes.iter().enumerate() {
            for c in 0..op.dim() {
                if r == c {
                    let mu = eigsys.mu_at(&mode.j).unwrap();
                    let expect =
                        mode.sign.as_f64() * (mode.n[0] as f64 * omega[0] + sigma) + mu;
                    assert!((op.matrix[(r, c)].re - expect).abs() < 1e-14);
                    assert_eq!(op.matrix[(r, c)].im, 0.0);
                } else {
                    assert_eq!(op.matrix[(r, c)], Complex64::ZERO);
                }
            }
        }
    }

    #[test]
    fn linearized_operator_toplitz_in_n() {
        let eigsys = eigsys_1d(0.05, 0.3, 2);
        let mut rng = substream(9, "toplitz");
        let mut u = Coeffs::new(1, 1, 1, 2);
        for n in -1i64..=1 {
            for j in -1i64..=1 {
                u.set(
                    vec![n],
                    vec![j],
                    Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
                );
            }
        }
        let sites: Vec<Site> = eigsys.sites.clone();
        for trial in 0..20 {
            let k: i64 = rng.random_range(-5..=5);
            let n0: i64 = rng.random_range(-2..=2);
            let n1: i64 = rng.random_range(-2..=2);
            let s0 = sites[rng.random_range(0..sites.len())].clone();
            let s1 = sites[rng.random_range(0..sites.len())].clone();
            let signs = [
                (Sign::Plus, Sign::Plus),
                (Sign::Plus, Sign::Minus),
                (Sign::Minus, Sign::Plus),
                (Sign::Minus, Sign::Minus),
            ];
            let (sr, sc) = signs[trial % 4];
            let mk = |sign: Sign, n: i64, j: &Site| ModeIndex {
                sign,
                n: vec![n],
                j: j.clone(),
            };
            let modes = vec![
                mk(sr, n0, &s0),
                mk(sc, n1, &s1),
                mk(sr, n0 + k, &s0),
                mk(sc, n1 + k, &s1),
            ];
            // delta W block only: strip D by evaluating with omega = 0,
            // sigma = 0 and subtracting the diagonal.
            let op = linearized_operator(&u, &eigsys, 1, &[0.0], 1.0, 0.0, &modes).unwrap();
            let strip = |r: usize, c: usize| {
                let mut v = op.matrix[(r, c)];
                if r == c {
                    v -= Complex64::new(eigsys.mu_at(&op.modes[r].j).unwrap(), 0.0);
                }
                v
            };
            let base = strip(0, 1);
            let shifted = strip(2, 3);
            assert_eq!(base, shifted, "Toplitz violated at trial {trial}");
        }
    }

    #[test]
    fn linearized_blocks_match_finite_differences() {
        // Central finite differences of (W, W~) in the independent sectors
        // (u, v) against the assembled four blocks; real and imaginary
        // directions both checked.
        let eigsys = eigsys_1d(0.06, 0.29, 2);
        let mut rng = substream(13, "fd-gradient");
        for p in [1usize, 2] {
            for _ in 0..5 {
                let mut u = Coeffs::new(1, 1, 1, 2);
                for n in -1i64..=1 {
                    for j in -2i64..=2 {
                        u.set(
                            vec![n],
                            vec![j],
                            Complex64::new(
                                rng.random::<f64>() - 0.5,
                                rng.random::<f64>() - 0.5,
                            ),
                        );
                    }
                }
                let v = u.mirror();
                let target = (3 * (p as i64 + 1), 2);
                let modes_row: Vec<(Vec<i64>, Vec<i64>)> = vec![
                    (vec![0], vec![0]),
                    (vec![1], vec![-1]),
                    (vec![-1], vec![2]),
                ];
                let col = (vec![0i64], vec![1i64]);
                let h = 1e-6;

                // Assembled entries for rows (+, n, j) and (-, n, j) against
                // columns (+, col) and (-, col).
                let mut modes: Vec<ModeIndex> = Vec::new();
                for (n, j) in &modes_row {
                    for sign in [Sign::Plus, Sign::Minus] {
                        modes.push(ModeIndex {
                            sign,
                            n: n.clone(),
                            j: Site::new(j.clone()),
                        });
                    }
                }
                for sign in [Sign::Plus, Sign::Minus] {
                    modes.push(ModeIndex {
                        sign,
                        n: col.0.clone(),
                        j: Site::new(col.1.clone()),
                    });
                }
                modes.dedup();
                let op =
                    linearized_operator(&u, &eigsys, p, &[0.0], 1.0, 0.0, &modes).unwrap();

                // Finite differences: perturb u at col (for +) and v at col
                // (for -), in the real direction, and read off d(W, W~).
                let perturb = |du: Complex64, dv: Complex64| {
                    let mut u2 = u.clone();
                    let cur = u2.get(&col.0, &col.1);
                    u2.set(col.0.clone(), col.1.clone(), cur + du);
                    let mut v2 = v.clone();
                    let curv = v2.get(&col.0, &col.1);
                    v2.set(col.0.clone(), col.1.clone(), curv + dv);
                    let (w_p, _) =
                        nonlinear_term_uv(&u2, &v2, &eigsys, p, target, true).unwrap();
                    // W~(n,j) from swapped sectors.
                    let (w_m, _) =
                        nonlinear_term_uv(&v2, &u2, &eigsys, p, target, true).unwrap();
                    (w_p, w_m)
                };
                let hh = Complex64::new(h, 0.0);
                let (wp_u_plus, wm_u_plus) = perturb(hh, Complex64::ZERO);
                let (wp_u_minus, wm_u_minus) = perturb(-hh, Complex64::ZERO);
                let (wp_v_plus, wm_v_plus) = perturb(Complex64::ZERO, hh);
                let (wp_v_minus, wm_v_minus) = perturb(Complex64::ZERO, -hh);

                for (n, j) in &modes_row {
                    let row_plus = op
                        .position(&ModeIndex {
                            sign: Sign::Plus,
                            n: n.clone(),
                            j: Site::new(j.clone()),
                        })
                        .unwrap();
                    let row_minus = op
                        .position(&ModeIndex {
                            sign: Sign::Minus,
                            n: n.clone(),
                            j: Site::new(j.clone()),
                        })
                        .unwrap();
                    let col_plus = op
                        .position(&ModeIndex {
                            sign: Sign::Plus,
                            n: col.0.clone(),
                            j: Site::new(col.1.clone()),
                        })
                        .unwrap();
                    let col_minus = op
                        .position(&ModeIndex {
                            sign: Sign::Minus,
                            n: col.0.clone(),
                            j: Site::new(col.1.clone()),
                        })
                        .unwrap();
                    let checks = [
                        (row_plus, col_plus, &wp_u_plus, &wp_u_minus),
                        (row_plus, col_minus, &wp_v_plus, &wp_v_minus),
                        (row_minus, col_plus, &wm_u_plus, &wm_u_minus),
                        (row_minus, col_minus, &wm_v_plus, &wm_v_minus),
                    ];
                    for (r, c, fwd, bwd) in checks {
                        let mut got = op.matrix[(r, c)];
                        if r == c {
                            got -= Complex64::new(
                                eigsys.mu_at(&op.modes[r].j).unwrap(),
                                0.0,
                            );
                        }
                        let fd = (fwd.get(n, j) - bwd.get(n, j)) / (2.0 * h);
                        let scale = got.norm().max(fd.norm()).max(1e-6);
                        assert!(
                            (got - fd).norm() / scale < 1e-6,
                            "p={p}, rows ({n:?},{j:?}): {got} vs fd {fd}"
                        );
                    }
                }
                assert!(op.conjugacy_defect < 1e-12, "defect {}", op.conjugacy_defect);
            }
        }
    }

    #[test]
    fn residual_zero_delta_anchors_only() {
        let eigsys = eigsys_1d(0.05, 0.3, 4);
        let rs = single_anchor(1.5);
        let u = rs.initial_coeffs(1, 2, 4);
        let omega = vec![eigsys.mu_at(&Site::new(vec![0])).unwrap()];
        let res = residual(&u, &eigsys, 1, &omega, 0.0, &rs, 2, 4).unwrap();
        assert_eq!(res.total, 0.0);
        assert_eq!(res.f_plus.support_len(), 0);
        assert_eq!(res.f_minus.support_len(), 0);
    }

    #[test]
    fn residual_sector_symmetry_and_anchor_exclusion() {
        let eigsys = eigsys_1d(0.05, 0.33, 4);
        let rs = single_anchor(1.2);
        let mut u = rs.initial_coeffs(1, 2, 4);
        let mut rng = substream(4, "residual-sym");
        for n in -2i64..=2 {
            for j in -2i64..=2 {
                if rs.is_plus_anchor(&[n], &[j]) {
                    continue;
                }
                u.set(
                    vec![n],
                    vec![j],
                    Complex64::new(
                        0.1 * (rng.random::<f64>() - 0.5),
                        0.1 * (rng.random::<f64>() - 0.5),
                    ),
                );
            }
        }
        let omega = vec![0.8];
        let res = residual(&u, &eigsys, 1, &omega, 1e-2, &rs, 6, 4).unwrap();
        assert!(res.mirror_defect < 1e-12, "defect {}", res.mirror_defect);
        // The anchor index carries no + sector residual entry.
        assert_eq!(res.f_plus.get(&[-1], &[0]), Complex64::ZERO);
        assert_eq!(res.f_minus.get(&[1], &[0]), Complex64::ZERO);
    }

    #[test]
    fn q_update_zero_delta_gives_base_frequencies() {
        let eigsys = eigsys_1d(0.05, 0.3, 4);
        let rs = single_anchor(1.3);
        let u = rs.initial_coeffs(1, 1, 4);
        let (omega, _) = q_update(&u, &eigsys, 1, 0.0, &rs).unwrap();
        assert_eq!(omega[0], eigsys.mu_at(&Site::new(vec![0])).unwrap());
    }

    #[test]
    fn q_update_first_order_expansion() {
        let eigsys = eigsys_1d(0.02, 0.3, 6);
        let rs = single_anchor(1.3);
        let u = rs.initial_coeffs(1, 1, 6);
        let delta = 1e-3;
        let (omega, _) = q_update(&u, &eigsys, 1, delta, &rs).unwrap();
        let mu = eigsys.mu_at(&Site::new(vec![0])).unwrap();
        let a1 = main_coefficients(&eigsys, 1, &rs).unwrap()[0];
        // u = u^(0): the Q-equation value is exactly delta a^2 A_1, so the
        // first-order correction term vanishes identically, well within the
        // 4 eps^{1/4} delta allowance.
        let correction = (omega[0] - mu - delta * a1 * 1.3f64.powi(2)).abs();
        assert!(correction <= 4.0 * 0.02f64.powf(0.25) * delta);
        assert!(correction < 1e-15);
    }

    #[test]
    fn newton_step_zero_delta_is_identity() {
        let eigsys = eigsys_1d(0.05, 0.3, 4);
        let rs = single_anchor(1.4);
        let mut cfg = SolverConfig::desk(rs.clone(), 0.0);
        cfg.m_mult = 2;
        let u = rs.initial_coeffs(1, 2, 4);
        let omega = vec![eigsys.mu_at(&Site::new(vec![0])).unwrap()];
        let state = NewtonState {
            r: 0,
            u: u.clone(),
            omega,
            residual_norm: 0.0,
            last_correction_norm: 0.0,
            scale: 2,
            residual_history: vec![0.0],
            correction_history: vec![],
            cond_history: vec![],
            mirror_defect_max: 0.0,
        };
        let next = newton_step(&state, &eigsys, &cfg).unwrap();
        assert_eq!(next.last_correction_norm, 0.0);
        assert_eq!(next.residual_norm, 0.0);
        for ((n, j), val) in u.support() {
            assert_eq!(next.u.get(n, j), *val);
        }
    }

    #[test]
    fn cwb_solve_zero_delta_immediate() {
        let eigsys = eigsys_1d(0.05, 0.3, 4);
        let rs = single_anchor(1.3);
        let cfg = SolverConfig::desk(rs, 0.0);
        let report = cwb_solve(&eigsys, &cfg).unwrap();
        assert_eq!(report.steps, 0);
        assert!(report.converged);
        assert_eq!(report.omega, report.omega0);
        assert_eq!(report.u.entries.len(), 1);
        // Exact eigenmode evolution.
        assert!(report.time_domain_residual <= 1e-10);
    }

    #[test]
    fn cwb_solve_desk_instance_converges() {
        let eigsys = eigsys_1d(0.02, 0.3, 8);
        let rs = single_anchor(1.3);
        let cfg = SolverConfig::desk(rs, 1e-3);
        let report = cwb_solve(&eigsys, &cfg).unwrap();
        assert!(report.converged);
        assert!(report.steps <= 8, "steps {}", report.steps);
        assert!(report.final_residual <= 1e-10);
        assert!(report.anchors_exact);
        assert!(report.block_growth_ok);
        assert!(report.monotone_residuals);
        assert!(report.mirror_defect_max < 1e-10);
        // Frequency window |omega - omega0| <= 2^{2p+1} delta.
        let drift = (report.omega[0] - report.omega0[0]).abs();
        assert!(drift <= 8.0 * 1e-3, "drift {drift}");
        // Time-domain verification, decay positivity.
        assert!(
            report.time_domain_residual <= 1e-8,
            "time residual {}",
            report.time_domain_residual
        );
        assert!(report.decay.rho_star.unwrap_or(0.0) > 0.0);
        if let Some(slope) = report.quadratic_slope {
            assert!(slope >= 1.5, "quadratic slope {slope}");
        }
    }

    #[test]
    fn decay_fit_anchors_only_passes_everywhere() {
        let rs = single_anchor(1.3);
        let u = rs.initial_coeffs(1, 1, 3);
        let fit = decay_fit(&u, &rs, 0.02, 1e-3);
        // Off S0 the support is empty: every rho passes.
        let max_rho = fit.table.last().unwrap().0;
        assert_eq!(fit.rho_star, Some(max_rho));
        assert!(fit.table.iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn time_residual_zero_delta_eigenmode() {
        let eigsys = eigsys_1d(0.05, 0.3, 5);
        let rs = single_anchor(1.0);
        let u = rs.initial_coeffs(1, 1, 5);
        let omega = vec![eigsys.mu_at(&Site::new(vec![0])).unwrap()];
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 5.0).collect();
        let res = time_residual(&u, &omega, &eigsys, 1, 0.0, &times).unwrap();
        assert!(res <= 1e-10, "residual {res}");
    }

    #[test]
    fn coeffs_round_trip_and_mirror() {
        let mut u = Coeffs::new(2, 1, 2, 3);
        u.set(vec![1, -2], vec![3], Complex64::new(0.5, -0.25));
        u.set(vec![0, 0], vec![-1], Complex64::new(-1.0, 0.125));
        let data = u.to_data();
        let back = Coeffs::from_data(&data);
        assert_eq!(back.get(&[1, -2], &[3]), Complex64::new(0.5, -0.25));
        // v(n,j) = conj(u^(-n,j)).
        assert_eq!(u.v(&[-1, 2], &[3]), Complex64::new(0.5, 0.25));
        let v = u.mirror();
        assert_eq!(v.get(&[-1, 2], &[3]), Complex64::new(0.5, 0.25));
    }
}
