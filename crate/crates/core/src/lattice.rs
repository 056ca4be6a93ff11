//! Lattice geometry, field configurations and the inhomogeneous φ⁴ action.
//!
//! Sites are stored row-major: on a 2D lattice site `(row, col)` has index
//! `row * L + col`. Link sums `Σ_⟨ij⟩` run over lattice links rather than
//! unordered site pairs, so a periodic lattice carries `d·V` nearest-neighbour
//! links regardless of `L` (on `L = 2` every wraparound pair appears twice).
//!
//! The model action is
//!
//! ```text
//! S(φ; θ) = −Σ_links w_ij φ_i φ_j + Σ_i a_i φ_i² + Σ_i b_i φ_i⁴ + Σ_i r_i φ_i
//! ```
//!
//! and the five-term target action is
//!
//! ```text
//! 𝒜 = g₁ Σ_nn φ_i φ_j + g₂ Σ φ_i² + g₃ Σ φ_i⁴ + g₄ Σ_nnn φ_i φ_j + i g₅ Σ φ_i²
//! ```
//!
//! The two are related by `w = −g₁`, `a = g₂`, `b = g₃`; see
//! [`TargetActionSpec::to_couplings`].

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Per-site list of `(link index, neighbour site)` pairs in CSR layout.
#[derive(Debug, Clone, PartialEq)]
struct Adjacency {
    offsets: Vec<usize>,
    entries: Vec<(usize, usize)>,
}

impl Adjacency {
    fn from_links(volume: usize, links: &[(usize, usize)]) -> Self {
        let mut degree = vec![0usize; volume];
        for &(i, j) in links {
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut offsets = Vec::with_capacity(volume + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..volume].to_vec();
        let mut entries = vec![(0, 0); offsets[volume]];
        for (l, &(i, j)) in links.iter().enumerate() {
            entries[fill[i]] = (l, j);
            fill[i] += 1;
            entries[fill[j]] = (l, i);
            fill[j] += 1;
        }
        Adjacency { offsets, entries }
    }

    #[inline]
    fn of(&self, site: usize) -> &[(usize, usize)] {
        &self.entries[self.offsets[site]..self.offsets[site + 1]]
    }
}

/// Hypercubic lattice with nearest-neighbour and next-nearest-neighbour links.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGeometry {
    side_length: usize,
    dimensions: usize,
    periodic: bool,
    volume: usize,
    links: Vec<(usize, usize)>,
    nnn_links: Vec<(usize, usize)>,
    nn_adjacency: Adjacency,
    nnn_adjacency: Adjacency,
}

impl LatticeGeometry {
    /// Builds an `L^dimensions` lattice.
    ///
    /// Links are enumerated site-major. For each site the nearest-neighbour
    /// links follow the axes in order (axis 0 is the fastest-varying index),
    /// each in the `+1` direction. Next-nearest-neighbour links are the
    /// diagonals `+e_a + e_b` and `+e_a − e_b` for every axis pair `a < b`.
    pub fn new(side_length: usize, dimensions: usize, periodic: bool) -> Result<Self> {
        if side_length == 0 {
            return Err(Error::InvalidLattice("side length must be positive".into()));
        }
        if dimensions == 0 {
            return Err(Error::InvalidLattice("dimensions must be positive".into()));
        }
        if periodic && side_length == 1 {
            return Err(Error::InvalidLattice(
                "degenerate lattice: L = 1 with periodic boundaries links every site to itself".into(),
            ));
        }
        let volume = u32::try_from(dimensions)
            .ok()
            .and_then(|d| side_length.checked_pow(d))
            .ok_or_else(|| Error::InvalidLattice("volume overflows".into()))?;

        let mut geometry = LatticeGeometry {
            side_length,
            dimensions,
            periodic,
            volume,
            links: Vec::new(),
            nnn_links: Vec::new(),
            nn_adjacency: Adjacency::from_links(0, &[]),
            nnn_adjacency: Adjacency::from_links(0, &[]),
        };

        let mut links = Vec::with_capacity(dimensions * volume);
        let mut nnn_links = Vec::with_capacity(dimensions * (dimensions - 1) * volume);
        for site in 0..volume {
            for axis in 0..dimensions {
                if let Some(j) = geometry.shift(site, &[(axis, 1)]) {
                    links.push((site, j));
                }
            }
            for a in 0..dimensions {
                for b in (a + 1)..dimensions {
                    for sign in [1isize, -1] {
                        if let Some(j) = geometry.shift(site, &[(a, 1), (b, sign)]) {
                            nnn_links.push((site, j));
                        }
                    }
                }
            }
        }
        debug_assert!(links.iter().chain(&nnn_links).all(|&(i, j)| i != j));

        geometry.nn_adjacency = Adjacency::from_links(volume, &links);
        geometry.nnn_adjacency = Adjacency::from_links(volume, &nnn_links);
        geometry.links = links;
        geometry.nnn_links = nnn_links;
        Ok(geometry)
    }

    fn shift(&self, site: usize, moves: &[(usize, isize)]) -> Option<usize> {
        let l = self.side_length as isize;
        let mut coords = self.coordinates(site);
        for &(axis, delta) in moves {
            let c = coords[axis] as isize + delta;
            coords[axis] = if self.periodic {
                c.rem_euclid(l) as usize
            } else if (0..l).contains(&c) {
                c as usize
            } else {
                return None;
            };
        }
        Some(self.index(&coords))
    }

    /// Coordinates of a site, axis 0 first (fastest-varying).
    pub fn coordinates(&self, mut site: usize) -> Vec<usize> {
        (0..self.dimensions)
            .map(|_| {
                let c = site % self.side_length;
                site /= self.side_length;
                c
            })
            .collect()
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .rev()
            .fold(0, |acc, &c| acc * self.side_length + c)
    }

    pub fn side_length(&self) -> usize {
        self.side_length
    }

    pub fn dimensions(&self) -> usize {
        self.dimensions
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    /// Nearest-neighbour links.
    pub fn links(&self) -> &[(usize, usize)] {
        &self.links
    }

    /// Next-nearest-neighbour (diagonal) links.
    pub fn nnn_links(&self) -> &[(usize, usize)] {
        &self.nnn_links
    }

    /// `(link index, neighbour)` pairs of the nearest-neighbour links touching `site`.
    #[inline]
    pub fn incident_links(&self, site: usize) -> &[(usize, usize)] {
        self.nn_adjacency.of(site)
    }

    #[inline]
    pub fn incident_nnn_links(&self, site: usize) -> &[(usize, usize)] {
        self.nnn_adjacency.of(site)
    }

    pub fn degree(&self, site: usize) -> usize {
        self.incident_links(site).len()
    }

    /// Short human-readable description, used in file headers.
    pub fn describe(&self) -> String {
        format!(
            "L={} dimensions={} periodic={}",
            self.side_length, self.dimensions, self.periodic
        )
    }
}

/// Square (2D) lattice of side `L`.
pub fn build_square_lattice(side_length: usize, periodic: bool) -> Result<LatticeGeometry> {
    LatticeGeometry::new(side_length, 2, periodic)
}

/// One real field value per site.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfiguration {
    values: Vec<f64>,
}

impl FieldConfiguration {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "field value at site {i} is not finite"
            )));
        }
        Ok(FieldConfiguration { values })
    }

    pub fn zeros(volume: usize) -> Self {
        FieldConfiguration {
            values: vec![0.0; volume],
        }
    }

    pub fn constant(volume: usize, value: f64) -> Self {
        FieldConfiguration {
            values: vec![value; volume],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for samplers; callers keep the values finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn negated(&self) -> Self {
        FieldConfiguration {
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    pub(crate) fn check(&self, geometry: &LatticeGeometry) -> Result<()> {
        check_len("field configuration", geometry.volume(), self.len())
    }
}

/// SHA-256 of a sequence of floats in little-endian byte order.
pub fn digest_values(values: impl IntoIterator<Item = f64>) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::SizeMismatch {
            what,
            expected,
            actual,
        })
    }
}

/// Trainable couplings `θ = {w_ij, a_i, b_i, r_i}`.
///
/// The same layout doubles as the container for gradients with respect to θ.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSet {
    /// One per nearest-neighbour link.
    pub w: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Linear symmetry-breaking term, zero unless trained.
    pub r: Vec<f64>,
}

impl CouplingSet {
    pub fn zeros(geometry: &LatticeGeometry) -> Self {
        Self::homogeneous(geometry, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn homogeneous(geometry: &LatticeGeometry, w: f64, a: f64, b: f64, r: f64) -> Self {
        let v = geometry.volume();
        CouplingSet {
            w: vec![w; geometry.links().len()],
            a: vec![a; v],
            b: vec![b; v],
            r: vec![r; v],
        }
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        CouplingSet {
            w: vec![0.0; self.w.len()],
            a: vec![0.0; self.a.len()],
            b: vec![0.0; self.b.len()],
            r: vec![0.0; self.r.len()],
        }
    }

    pub fn validate(&self, geometry: &LatticeGeometry) -> Result<()> {
        check_len("w couplings", geometry.links().len(), self.w.len())?;
        check_len("a couplings", geometry.volume(), self.a.len())?;
        check_len("b couplings", geometry.volume(), self.b.len())?;
        check_len("r couplings", geometry.volume(), self.r.len())?;
        if self.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("couplings must be finite".into()));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.w.len() + self.a.len() + self.b.len() + self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat iteration in layout order `w, a, b, r`.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(&self.a).chain(&self.b).chain(&self.r)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w
            .iter_mut()
            .chain(&mut self.a)
            .chain(&mut self.b)
            .chain(&mut self.r)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn from_flat(geometry: &LatticeGeometry, flat: &[f64]) -> Result<Self> {
        let nl = geometry.links().len();
        let v = geometry.volume();
        check_len("flat coupling vector", nl + 3 * v, flat.len())?;
        Ok(CouplingSet {
            w: flat[..nl].to_vec(),
            a: flat[nl..nl + v].to_vec(),
            b: flat[nl + v..nl + 2 * v].to_vec(),
            r: flat[nl + 2 * v..].to_vec(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &CouplingSet) {
        for (x, y) in self.iter_mut().zip(other.iter()) {
            *x += alpha * y;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for x in self.iter_mut() {
            *x *= alpha;
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Mean of each family `[w, a, b, r]` (zero for an empty family).
    pub fn family_means(&self) -> [f64; 4] {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        [mean(&self.w), mean(&self.a), mean(&self.b), mean(&self.r)]
    }

    /// SHA-256 over the little-endian bytes of every value, as lowercase hex.
    pub fn digest(&self) -> String {
        digest_values(self.iter().copied())
    }

    /// `Some([w, a, b, r])` when every family is constant.
    pub fn as_homogeneous(&self) -> Option<[f64; 4]> {
        fn constant(v: &[f64]) -> Option<f64> {
            match v.first() {
                None => Some(0.0),
                Some(&x) => v.iter().all(|&y| y == x).then_some(x),
            }
        }
        Some([
            constant(&self.w)?,
            constant(&self.a)?,
            constant(&self.b)?,
            constant(&self.r)?,
        ])
    }
}

/// Standard lattice parametrisation `(κ_L, μ_L², λ_L)` of the homogeneous theory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardCouplings {
    pub kappa: f64,
    pub mu_sq: f64,
    pub lambda: f64,
}

impl StandardCouplings {
    pub fn new(kappa: f64, mu_sq: f64, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !kappa.is_finite() || !mu_sq.is_finite() || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "standard couplings need finite values and lambda >= 0 (got kappa={kappa}, mu_sq={mu_sq}, lambda={lambda})"
            )));
        }
        Ok(StandardCouplings {
            kappa,
            mu_sq,
            lambda,
        })
    }
}

/// `w = κ`, `a = (μ² + 4κ)/2`, `b = λ/4`, `r = 0` on every link and site.
pub fn map_standard_couplings(std: StandardCouplings, geometry: &LatticeGeometry) -> CouplingSet {
    CouplingSet::homogeneous(
        geometry,
        std.kappa,
        (std.mu_sq + 4.0 * std.kappa) / 2.0,
        std.lambda / 4.0,
        0.0,
    )
}

/// The five coefficient-free sums `(Σ_nn φφ, Σφ², Σφ⁴, Σ_nnn φφ, Σφ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermSums(pub [f64; 5]);

impl TermSums {
    pub fn get(&self, k: usize) -> f64 {
        self.0[k - 1]
    }
}

/// Fixed target action `𝒜 = Σ_k g_k 𝒜^(k)` restricted to a set of active terms.
///
/// Term 5 is imaginary: it contributes `i g₅ Σ φ²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetActionSpec {
    g: [f64; 5],
    active: [bool; 5],
}

impl TargetActionSpec {
    /// All five terms active.
    pub fn new(g: [f64; 5]) -> Self {
        TargetActionSpec { g, active: [true; 5] }
    }

    /// Only the listed terms (1-based) are active.
    pub fn with_terms(mut g: [f64; 5], terms: &[usize]) -> Result<Self> {
        let mut active = [false; 5];
        for &k in terms {
            if !(1..=5).contains(&k) {
                return Err(Error::InvalidParameter(format!("term index {k} not in 1..=5")));
            }
            active[k - 1] = true;
        }
        for (g, on) in g.iter_mut().zip(active) {
            if !on {
                *g = 0.0;
            }
        }
        Ok(TargetActionSpec { g, active })
    }

    /// `𝒜_{k}`: terms `1..=k` active.
    pub fn truncated(g: [f64; 5], up_to: usize) -> Result<Self> {
        let terms: Vec<usize> = (1..=up_to).collect();
        Self::with_terms(g, &terms)
    }

    /// Coefficients used in the reweighting and training examples:
    /// `g = (−1, 1.52425, 0.175, −1, 0.15)`.
    pub fn reference_coefficients() -> [f64; 5] {
        [-1.0, 1.52425, 0.175, -1.0, 0.15]
    }

    /// Effective coefficient of term `k` (1-based); zero when inactive.
    pub fn coefficient(&self, k: usize) -> f64 {
        if self.active[k - 1] {
            self.g[k - 1]
        } else {
            0.0
        }
    }

    /// Coefficients `g₁..g₅`; inactive terms read as zero.
    pub fn coefficients(&self) -> [f64; 5] {
        self.g
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.active[k - 1]
    }

    pub fn active_terms(&self) -> Vec<usize> {
        (1..=5).filter(|&k| self.active[k - 1]).collect()
    }

    pub fn is_complex(&self) -> bool {
        self.active[4] && self.g[4] != 0.0
    }

    /// Copy with term `k` set to `value` and marked active.
    pub fn with_coefficient(mut self, k: usize, value: f64) -> Self {
        self.g[k - 1] = value;
        self.active[k - 1] = true;
        self
    }

    /// Copy with term `k` switched off.
    pub fn without_term(mut self, k: usize) -> Self {
        self.active[k - 1] = false;
        self.g[k - 1] = 0.0;
        self
    }

    /// Evaluates `𝒜` from precomputed term sums.
    ///
    /// Terms are accumulated in order 1..4 so that a homogeneous model action
    /// with `w = −g₁, a = g₂, b = g₃` evaluates to the bitwise-identical real part.
    pub fn evaluate_terms(&self, terms: &TermSums) -> Complex64 {
        let mut re = 0.0;
        for k in 1..=4 {
            if self.active[k - 1] {
                re += self.g[k - 1] * terms.0[k - 1];
            }
        }
        let im = if self.active[4] { self.g[4] * terms.0[4] } else { 0.0 };
        Complex64::new(re, im)
    }

    /// Model couplings describing the same distribution, for targets made of
    /// terms 1–3 only: `w = −g₁`, `a = g₂`, `b = g₃`, `r = 0`.
    pub fn to_couplings(&self, geometry: &LatticeGeometry) -> Result<CouplingSet> {
        if self.coefficient(4) != 0.0 || self.coefficient(5) != 0.0 {
            return Err(Error::InvalidParameter(
                "only targets built from terms 1-3 lie inside the model family".into(),
            ));
        }
        Ok(CouplingSet::homogeneous(
            geometry,
            -self.coefficient(1),
            self.coefficient(2),
            self.coefficient(3),
            0.0,
        ))
    }

    /// Inverse of [`to_couplings`](Self::to_couplings) for homogeneous couplings
    /// with `r = 0`; the result has terms 1–3 active.
    pub fn from_homogeneous(couplings: &CouplingSet) -> Option<Self> {
        let [w, a, b, r] = couplings.as_homogeneous()?;
        (r == 0.0).then(|| TargetActionSpec {
            g: [-w, a, b, 0.0, 0.0],
            active: [true, true, true, false, false],
        })
    }
}

/// Anything the Metropolis sampler can draw from: a real action with a cheap
/// single-site difference.
pub trait Action: Sync {
    fn check(&self, geometry: &LatticeGeometry) -> Result<()>;

    fn evaluate(&self, phi: &[f64], geometry: &LatticeGeometry) -> f64;

    /// `S(φ with φ_site = new_value) − S(φ)`.
    fn local_delta(&self, phi: &[f64], site: usize, new_value: f64, geometry: &LatticeGeometry) -> f64;

    /// `S(−φ) − S(φ)`.
    fn reflection_delta(&self, phi: &[f64], geometry: &LatticeGeometry) -> f64;
}

impl Action for CouplingSet {
    fn check(&self, geometry: &LatticeGeometry) -> Result<()> {
        self.validate(geometry)
    }

    fn evaluate(&self, phi: &[f64], geometry: &LatticeGeometry) -> f64 {
        if let Some([w, a, b, r]) = self.as_homogeneous() {
            let terms = term_sums(phi, geometry);
            let linear: f64 = phi.iter().sum();
            return -w * terms.0[0] + a * terms.0[1] + b * terms.0[2] + r * linear;
        }
        let hopping: f64 = geometry
            .links()
            .iter()
            .zip(&self.w)
            .map(|(&(i, j), w)| w * phi[i] * phi[j])
            .sum();
        let mut site = 0.0;
        for (i, &x) in phi.iter().enumerate() {
            let x2 = x * x;
            site += self.a[i] * x2 + self.b[i] * x2 * x2 + self.r[i] * x;
        }
        -hopping + site
    }

    #[inline]
    fn local_delta(&self, phi: &[f64], site: usize, new_value: f64, geometry: &LatticeGeometry) -> f64 {
        let old = phi[site];
        let d = new_value - old;
        let neighbours: f64 = geometry
            .incident_links(site)
            .iter()
            .map(|&(l, j)| self.w[l] * phi[j])
            .sum();
        let old2 = old * old;
        let new2 = new_value * new_value;
        -d * neighbours
            + self.a[site] * (new2 - old2)
            + self.b[site] * (new2 * new2 - old2 * old2)
            + self.r[site] * d
    }

    fn reflection_delta(&self, phi: &[f64], _geometry: &LatticeGeometry) -> f64 {
        -2.0 * phi.iter().zip(&self.r).map(|(x, r)| r * x).sum::<f64>()
    }
}

/// The real part of a target action, so targets can be simulated directly.
impl Action for TargetActionSpec {
    fn check(&self, _geometry: &LatticeGeometry) -> Result<()> {
        if self.g.iter().all(|g| g.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("target coefficients must be finite".into()))
        }
    }

    fn evaluate(&self, phi: &[f64], geometry: &LatticeGeometry) -> f64 {
        self.evaluate_terms(&term_sums(phi, geometry)).re
    }

    #[inline]
    fn local_delta(&self, phi: &[f64], site: usize, new_value: f64, geometry: &LatticeGeometry) -> f64 {
        let old = phi[site];
        let d = new_value - old;
        let old2 = old * old;
        let new2 = new_value * new_value;
        let mut delta = self.coefficient(2) * (new2 - old2) + self.coefficient(3) * (new2 * new2 - old2 * old2);
        let g1 = self.coefficient(1);
        if g1 != 0.0 {
            let s: f64 = geometry.incident_links(site).iter().map(|&(_, j)| phi[j]).sum();
            delta += g1 * d * s;
        }
        let g4 = self.coefficient(4);
        if g4 != 0.0 {
            let s: f64 = geometry.incident_nnn_links(site).iter().map(|&(_, j)| phi[j]).sum();
            delta += g4 * d * s;
        }
        delta
    }

    fn reflection_delta(&self, _phi: &[f64], _geometry: &LatticeGeometry) -> f64 {
        0.0
    }
}

fn term_sums(phi: &[f64], geometry: &LatticeGeometry) -> TermSums {
    let nn: f64 = geometry.links().iter().map(|&(i, j)| phi[i] * phi[j]).sum();
    let nnn: f64 = geometry.nnn_links().iter().map(|&(i, j)| phi[i] * phi[j]).sum();
    let mut sq = 0.0;
    let mut quart = 0.0;
    for &x in phi {
        let x2 = x * x;
        sq += x2;
        quart += x2 * x2;
    }
    TermSums([nn, sq, quart, nnn, sq])
}

/// Model action `S(φ; θ)`.
pub fn model_action(config: &FieldConfiguration, couplings: &CouplingSet, geometry: &LatticeGeometry) -> Result<f64> {
    config.check(geometry)?;
    couplings.validate(geometry)?;
    Ok(couplings.evaluate(config.values(), geometry))
}

/// Complex target action `𝒜(φ)`.
pub fn target_action(
    config: &FieldConfiguration,
    target: &TargetActionSpec,
    geometry: &LatticeGeometry,
) -> Result<Complex64> {
    config.check(geometry)?;
    Ok(target.evaluate_terms(&term_sums(config.values(), geometry)))
}

/// The five raw term sums of a configuration.
pub fn action_terms(config: &FieldConfiguration, geometry: &LatticeGeometry) -> Result<TermSums> {
    config.check(geometry)?;
    Ok(term_sums(config.values(), geometry))
}

/// `∂S/∂θ`: `−φ_iφ_j` per link, `φ_i²`, `φ_i⁴` and `φ_i` per site.
///
/// `S` is linear in θ so the result does not depend on the coupling values.
pub fn action_gradient(config: &FieldConfiguration, geometry: &LatticeGeometry) -> Result<CouplingSet> {
    config.check(geometry)?;
    let mut grad = CouplingSet::zeros(geometry);
    fill_action_gradient(config.values(), geometry, &mut grad);
    Ok(grad)
}

pub(crate) fn fill_action_gradient(phi: &[f64], geometry: &LatticeGeometry, out: &mut CouplingSet) {
    for (g, &(i, j)) in out.w.iter_mut().zip(geometry.links()) {
        *g = -phi[i] * phi[j];
    }
    for (i, &x) in phi.iter().enumerate() {
        let x2 = x * x;
        out.a[i] = x2;
        out.b[i] = x2 * x2;
        out.r[i] = x;
    }
}

/// `S` after replacing `φ_site` by `new_value`, minus `S` before, computed from
/// the site and its neighbours only.
pub fn local_action_delta(
    config: &FieldConfiguration,
    site: usize,
    new_value: f64,
    couplings: &CouplingSet,
    geometry: &LatticeGeometry,
) -> Result<f64> {
    config.check(geometry)?;
    couplings.validate(geometry)?;
    if site >= geometry.volume() {
        return Err(Error::IndexOutOfRange {
            index: site,
            len: geometry.volume(),
        });
    }
    Ok(couplings.local_delta(config.values(), site, new_value, geometry))
}

/// Per-link clique log-potentials `log ψ_c` whose sum over links is `−S`.
///
/// Each site term is split equally across the four links touching the site,
/// which requires a periodic 2D lattice.
pub fn clique_log_potentials(
    config: &FieldConfiguration,
    couplings: &CouplingSet,
    geometry: &LatticeGeometry,
) -> Result<Vec<f64>> {
    config.check(geometry)?;
    couplings.validate(geometry)?;
    if !geometry.is_periodic() || (0..geometry.volume()).any(|s| geometry.degree(s) != 4) {
        return Err(Error::InvalidLattice(
            "clique factorisation needs every site to touch exactly 4 links (periodic 2D lattice)".into(),
        ));
    }
    let phi = config.values();
    let site_term = |i: usize| {
        let x = phi[i];
        let x2 = x * x;
        couplings.a[i] * x2 + couplings.b[i] * x2 * x2 + couplings.r[i] * x
    };
    Ok(geometry
        .links()
        .iter()
        .zip(&couplings.w)
        .map(|(&(i, j), w)| w * phi[i] * phi[j] - 0.25 * (site_term(i) + site_term(j)))
        .collect())
}
