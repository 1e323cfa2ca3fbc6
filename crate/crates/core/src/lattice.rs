//! Lattice points, norms, boxes and elementary regions.
//!
//! Mode space is `{+,-} x Z^b x Z^d`: a sign sector, a temporal mode vector
//! `n` of length `b` and a spatial site `j` of length `d`. Regions live in the
//! combined `Z^(b+d)` lattice (or in `Z^d` alone when used spatially) and are
//! always membership-tested from their defining inequalities, never from
//! stored point sets.

use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

/// Hard cap on the number of enumerated modes before dense factorization
/// becomes impossible; regions larger than this are rejected up front.
pub const DEFAULT_MODE_CAP: usize = 2_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LatticeError {
    #[error("region enumeration would produce {requested} modes, cap is {cap}")]
    ModeCapExceeded { requested: usize, cap: usize },
    #[error("region dimension {region} does not match b+d = {expected}")]
    DimensionMismatch { region: usize, expected: usize },
}

/// A spatial lattice site `j` in `Z^d`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub coords: Vec<i64>,
}

impl Site {
    pub fn new(coords: Vec<i64>) -> Self {
        Site { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Origin of `Z^d`.
    pub fn origin(d: usize) -> Self {
        Site { coords: vec![0; d] }
    }
}

/// Sign sector of the doubled mode space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn as_f64(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

/// One mode `(sign, n, j)` of the two-sector lattice system.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModeIndex {
    pub sign: Sign,
    pub n: Vec<i64>,
    pub j: Site,
}

impl ModeIndex {
    pub fn new(sign: Sign, n: Vec<i64>, j: Site) -> Self {
        ModeIndex { sign, n, j }
    }

    /// The mirror mode `(-sign, -n, j)`; pairs `u(n,j)` with `v(n,j) = conj(u(-n,j))`.
    pub fn mirrored(&self) -> Self {
        ModeIndex {
            sign: self.sign.flipped(),
            n: self.n.iter().map(|x| -x).collect(),
            j: self.j.clone(),
        }
    }
}

/// `|v|_1`, the sum of absolute entries.
pub fn l1_norm(v: &[i64]) -> i64 {
    v.iter().map(|x| x.abs()).sum()
}

/// `|v|_inf`, the largest absolute entry (0 for the empty vector).
pub fn linf_norm(v: &[i64]) -> i64 {
    v.iter().map(|x| x.abs()).max().unwrap_or(0)
}

/// Distance from `x` to the nearest integer, valued in `[0, 1/2]`.
pub fn torus_norm(x: f64) -> f64 {
    let f = x - x.floor();
    f.min(1.0 - f)
}

/// Cut direction of one coordinate in a corner-cut elementary region.
///
/// `Unconstrained` corresponds to the empty slot in the sign pattern; a
/// pattern is admissible only when at least two slots are constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cut {
    Lt,
    Gt,
    Unconstrained,
}

/// A finite region of the combined lattice.
///
/// `FullBox` is `center + [-n, n]^dims`. `CornerCut` removes from the full box
/// the set of points whose centered coordinates satisfy every constrained slot
/// of the pattern strictly. `Generalized` is a rectangle minus a translate of
/// itself, `R \ (R + shift)`, with per-coordinate half-sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    FullBox {
        center: Vec<i64>,
        n: i64,
    },
    CornerCut {
        center: Vec<i64>,
        n: i64,
        pattern: Vec<Cut>,
    },
    Generalized {
        center: Vec<i64>,
        half_sizes: Vec<i64>,
        shift: Vec<i64>,
    },
}

impl Region {
    pub fn full_box(center: Vec<i64>, n: i64) -> Self {
        Region::FullBox { center, n }
    }

    /// Spatial box `[-radius, radius]^d` around the origin.
    pub fn centered_box(d: usize, radius: i64) -> Self {
        Region::FullBox {
            center: vec![0; d],
            n: radius,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            Region::FullBox { center, .. } => center.len(),
            Region::CornerCut { center, .. } => center.len(),
            Region::Generalized { center, .. } => center.len(),
        }
    }

    pub fn center(&self) -> &[i64] {
        match self {
            Region::FullBox { center, .. } => center,
            Region::CornerCut { center, .. } => center,
            Region::Generalized { center, .. } => center,
        }
    }

    /// Translate the whole region, cut set included, by `offset`.
    pub fn translated(&self, offset: &[i64]) -> Self {
        let add = |c: &[i64]| -> Vec<i64> { c.iter().zip(offset).map(|(a, b)| a + b).collect() };
        match self {
            Region::FullBox { center, n } => Region::FullBox {
                center: add(center),
                n: *n,
            },
            Region::CornerCut { center, n, pattern } => Region::CornerCut {
                center: add(center),
                n: *n,
                pattern: pattern.clone(),
            },
            Region::Generalized {
                center,
                half_sizes,
                shift,
            } => Region::Generalized {
                center: add(center),
                half_sizes: half_sizes.clone(),
                shift: shift.clone(),
            },
        }
    }

    /// Membership test straight from the defining inequalities.
    pub fn contains(&self, point: &[i64]) -> bool {
        if point.len() != self.dims() {
            return false;
        }
        match self {
            Region::FullBox { center, n } => {
                point.iter().zip(center).all(|(x, c)| (x - c).abs() <= *n)
            }
            Region::CornerCut { center, n, pattern } => {
                let in_box = point.iter().zip(center).all(|(x, c)| (x - c).abs() <= *n);
                if !in_box {
                    return false;
                }
                // The removed set requires every constrained slot to hold.
                let in_cut = pattern.iter().zip(point.iter().zip(center)).all(
                    |(cut, (x, c))| match cut {
                        Cut::Lt => x - c < 0,
                        Cut::Gt => x - c > 0,
                        Cut::Unconstrained => true,
                    },
                );
                !in_cut
            }
            Region::Generalized {
                center,
                half_sizes,
                shift,
            } => {
                let in_rect = |p: &[i64]| -> bool {
                    p.iter()
                        .zip(center)
                        .zip(half_sizes)
                        .all(|((x, c), h)| (x - c).abs() <= *h)
                };
                if !in_rect(point) {
                    return false;
                }
                let shifted_back: Vec<i64> =
                    point.iter().zip(shift).map(|(x, z)| x - z).collect();
                !in_rect(&shifted_back)
            }
        }
    }

    /// Smallest axis-aligned bounding box, as inclusive (lo, hi) per coordinate.
    pub fn bounding_box(&self) -> Vec<(i64, i64)> {
        match self {
            Region::FullBox { center, n } | Region::CornerCut { center, n, .. } => {
                center.iter().map(|c| (c - n, c + n)).collect()
            }
            Region::Generalized {
                center, half_sizes, ..
            } => center
                .iter()
                .zip(half_sizes)
                .map(|(c, h)| (c - h, c + h))
                .collect(),
        }
    }

    /// All lattice points of the region in lexicographic order.
    pub fn points(&self) -> Vec<Vec<i64>> {
        let bounds = self.bounding_box();
        let mut out = Vec::new();
        let mut cursor: Vec<i64> = bounds.iter().map(|(lo, _)| *lo).collect();
        if bounds.is_empty() {
            return out;
        }
        loop {
            if self.contains(&cursor) {
                out.push(cursor.clone());
            }
            let mut k = bounds.len();
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                if cursor[k] < bounds[k].1 {
                    cursor[k] += 1;
                    break;
                }
                cursor[k] = bounds[k].0;
            }
        }
    }

    /// Number of lattice points (single sector).
    pub fn point_count(&self) -> usize {
        self.points().len()
    }
}

/// `ell_inf` diameter of a finite point set: the largest coordinate range.
pub fn diameter(points: &[Vec<i64>]) -> i64 {
    if points.is_empty() {
        return 0;
    }
    let dims = points[0].len();
    (0..dims)
        .map(|k| {
            let lo = points.iter().map(|p| p[k]).min().unwrap();
            let hi = points.iter().map(|p| p[k]).max().unwrap();
            hi - lo
        })
        .max()
        .unwrap_or(0)
}

fn linf_dist(a: &[i64], b: &[i64]) -> i64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .max()
        .unwrap_or(0)
}

/// Width of a finite region: the largest `M` such that every point sits inside
/// some size-`M` elementary region contained in the set, at `ell_inf` distance
/// at least `M/2` from the remainder. The metric is a declared convention; the
/// source definition names none.
///
/// Exhaustive search, intended for diagnostic use on small regions.
pub fn region_width(region: &Region) -> i64 {
    let points = region.points();
    if points.is_empty() {
        return 0;
    }
    let set: HashSet<Vec<i64>> = points.iter().cloned().collect();
    let dims = points[0].len();
    let max_m = diameter(&points) / 2 + 1;
    for m in (1..=max_m).rev() {
        if width_at_least(&points, &set, dims, m) {
            return m;
        }
    }
    0
}

fn width_at_least(points: &[Vec<i64>], set: &HashSet<Vec<i64>>, dims: usize, m: i64) -> bool {
    let family = elementary_region_family(dims, m);
    // dist(x, set \ hat) >= M/2 with integer points means > (M-1)/2 fails; use 2*dist >= M.
    'point: for x in points {
        for shape in &family {
            // Candidate centers must keep x inside the translated shape.
            let mut offsets = vec![-m; dims];
            loop {
                let candidate = shape.translated(
                    &x.iter()
                        .zip(&offsets)
                        .map(|(a, b)| a + b)
                        .collect::<Vec<_>>(),
                );
                if candidate.contains(x) && subset_of(&candidate, set) {
                    let hat: HashSet<Vec<i64>> = candidate.points().into_iter().collect();
                    let ok = set
                        .iter()
                        .filter(|p| !hat.contains(*p))
                        .all(|p| 2 * linf_dist(x, p) >= m);
                    if ok {
                        continue 'point;
                    }
                }
                let mut k = dims;
                let mut done = true;
                loop {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                    if offsets[k] < m {
                        offsets[k] += 1;
                        done = false;
                        break;
                    }
                    offsets[k] = -m;
                }
                if done {
                    break;
                }
            }
        }
        return false;
    }
    true
}

fn subset_of(region: &Region, set: &HashSet<Vec<i64>>) -> bool {
    region.points().iter().all(|p| set.contains(p))
}

/// All size-`N` elementary regions centered at 0: the full box plus one
/// corner-cut region per sign pattern with at least two constrained slots.
pub fn elementary_region_family(dims: usize, n: i64) -> Vec<Region> {
    let mut family = vec![Region::FullBox {
        center: vec![0; dims],
        n,
    }];
    let choices = [Cut::Lt, Cut::Gt, Cut::Unconstrained];
    let mut pattern = vec![0usize; dims];
    loop {
        let cuts: Vec<Cut> = pattern.iter().map(|&i| choices[i]).collect();
        let constrained = cuts.iter().filter(|c| !matches!(c, Cut::Unconstrained)).count();
        if constrained >= 2 {
            family.push(Region::CornerCut {
                center: vec![0; dims],
                n,
                pattern: cuts,
            });
        }
        let mut k = dims;
        loop {
            if k == 0 {
                return family;
            }
            k -= 1;
            if pattern[k] < 2 {
                pattern[k] += 1;
                break;
            }
            pattern[k] = 0;
        }
    }
}

/// An enumerated two-sector mode set with O(1) expected-time flat lookup.
///
/// Ordering is sign-major (all `+` modes first) and lexicographic in the
/// concatenated `(n, j)` coordinates within each sector, so each sector is a
/// contiguous slice of the flat index space.
#[derive(Debug, Clone)]
pub struct ModeSet {
    modes: Vec<ModeIndex>,
    lookup: HashMap<ModeIndex, usize>,
    sector_len: usize,
}

impl ModeSet {
    pub fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Modes per sign sector.
    pub fn sector_len(&self) -> usize {
        self.sector_len
    }

    pub fn position(&self, mode: &ModeIndex) -> Option<usize> {
        self.lookup.get(mode).copied()
    }

    pub fn contains(&self, mode: &ModeIndex) -> bool {
        self.lookup.contains_key(mode)
    }

    pub fn get(&self, idx: usize) -> &ModeIndex {
        &self.modes[idx]
    }
}

/// Enumerate a region of `Z^(b+d)` into both sign sectors.
///
/// The first `b` coordinates of each region point become the temporal mode,
/// the remaining `d` the spatial site. Fails when the bounding box alone
/// already exceeds `cap` modes.
pub fn enumerate_region(
    region: &Region,
    b: usize,
    d: usize,
    cap: usize,
) -> Result<ModeSet, LatticeError> {
    if region.dims() != b + d {
        return Err(LatticeError::DimensionMismatch {
            region: region.dims(),
            expected: b + d,
        });
    }
    let bounds = region.bounding_box();
    let mut bound_count: usize = 2;
    for (lo, hi) in &bounds {
        bound_count = bound_count.saturating_mul((hi - lo + 1).max(0) as usize);
    }
    if bound_count > cap {
        return Err(LatticeError::ModeCapExceeded {
            requested: bound_count,
            cap,
        });
    }
    let points = region.points();
    let mut modes = Vec::with_capacity(2 * points.len());
    for sign in [Sign::Plus, Sign::Minus] {
        for p in &points {
            modes.push(ModeIndex {
                sign,
                n: p[..b].to_vec(),
                j: Site::new(p[b..].to_vec()),
            });
        }
    }
    let lookup = modes
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, m)| (m, i))
        .collect();
    Ok(ModeSet {
        modes,
        lookup,
        sector_len: points.len(),
    })
}
