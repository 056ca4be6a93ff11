//! Brute-force ground truth for tiny lattices.
//!
//! Every integral `∫ dφ₁…dφ_V f(φ) e^{−S(φ)}` is evaluated on a tensor-product
//! Gauss-Legendre grid over `[−φ_max, φ_max]^V` with running log-sum-exp
//! rescaling. Actions are recomputed here directly from the link lists instead
//! of going through the optimised evaluators in [`crate::lattice`].

use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{CouplingSet, LatticeGeometry, TargetActionSpec};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub phi_max: f64,
    pub points_per_site: usize,
    /// Largest `|Δ log Z|` accepted between `φ_max` and `φ_max + 1`.
    pub truncation_tolerance: f64,
    pub max_grid_points: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            phi_max: 4.0,
            points_per_site: 41,
            truncation_tolerance: 1e-6,
            max_grid_points: 1e8,
        }
    }
}

impl QuadratureSpec {
    pub fn new(phi_max: f64, points_per_site: usize) -> Self {
        QuadratureSpec {
            phi_max,
            points_per_site,
            ..QuadratureSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_site < 11 {
            return Err(Error::InvalidParameter(format!(
                "points_per_site must be at least 11 (got {})",
                self.points_per_site
            )));
        }
        if !(self.phi_max > 0.0 && self.phi_max.is_finite()) {
            return Err(Error::InvalidParameter("phi_max must be positive".into()));
        }
        Ok(())
    }

    /// Nodes and log-weights of the one-dimensional rule on `[−φ_max, φ_max]`.
    fn rule(&self) -> (Vec<f64>, Vec<f64>) {
        let n = NonZeroUsize::new(self.points_per_site).expect("validated");
        let half = self.phi_max;
        GaussLegendre::new(n)
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (half * x, (half * w).ln()))
            .unzip()
    }
}

/// A Boltzmann weight `e^{−S}` the oracle can integrate.
#[derive(Debug, Clone, Copy)]
pub enum Boltzmann<'a> {
    Model(&'a CouplingSet),
    Target(&'a TargetActionSpec),
}

impl Boltzmann<'_> {
    fn validate(&self, geometry: &LatticeGeometry) -> Result<()> {
        match self {
            Boltzmann::Model(c) => c.validate(geometry),
            Boltzmann::Target(_) => Ok(()),
        }
    }

    fn is_real(&self) -> bool {
        match self {
            Boltzmann::Model(_) => true,
            Boltzmann::Target(t) => !t.is_complex(),
        }
    }

    /// Direct evaluation of the (possibly complex) action.
    pub fn action(&self, phi: &[f64], geometry: &LatticeGeometry) -> Complex64 {
        match self {
            Boltzmann::Model(c) => {
                let mut s = 0.0;
                for (l, &(i, j)) in geometry.links().iter().enumerate() {
                    s -= c.w[l] * phi[i] * phi[j];
                }
                for (i, &x) in phi.iter().enumerate() {
                    s += c.a[i] * x.powi(2) + c.b[i] * x.powi(4) + c.r[i] * x;
                }
                Complex64::new(s, 0.0)
            }
            Boltzmann::Target(t) => {
                let nn: f64 = geometry.links().iter().map(|&(i, j)| phi[i] * phi[j]).sum();
                let nnn: f64 = geometry.nnn_links().iter().map(|&(i, j)| phi[i] * phi[j]).sum();
                let sq: f64 = phi.iter().map(|x| x.powi(2)).sum();
                let quart: f64 = phi.iter().map(|x| x.powi(4)).sum();
                Complex64::new(
                    t.coefficient(1) * nn + t.coefficient(2) * sq + t.coefficient(3) * quart + t.coefficient(4) * nnn,
                    t.coefficient(5) * sq,
                )
            }
        }
    }
}

/// Log-partition function and normalised expectations of a set of observables.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMoments {
    pub log_z: Complex64,
    pub values: Vec<Complex64>,
}

/// Running sums `Σ e^{x − shift}` with rescaling when the maximum grows.
#[derive(Clone)]
struct Accumulator {
    shift: f64,
    z: Complex64,
    sums: Vec<Complex64>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Accumulator {
            shift: f64::NEG_INFINITY,
            z: Complex64::new(0.0, 0.0),
            sums: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    fn rescale(&mut self, shift: f64) {
        if shift > self.shift {
            let factor = (self.shift - shift).exp();
            self.z *= factor;
            self.sums.iter_mut().for_each(|s| *s *= factor);
            self.shift = shift;
        }
    }

    fn add(&mut self, log_weight: Complex64, observables: &[f64]) {
        self.rescale(log_weight.re);
        let w = Complex64::from_polar((log_weight.re - self.shift).exp(), log_weight.im);
        self.z += w;
        for (s, &o) in self.sums.iter_mut().zip(observables) {
            *s += w * o;
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        if other.shift == f64::NEG_INFINITY {
            return;
        }
        self.rescale(other.shift);
        let factor = (other.shift - self.shift).exp();
        self.z += other.z * factor;
        for (s, o) in self.sums.iter_mut().zip(&other.sums) {
            *s += o * factor;
        }
    }
}

fn check_grid(volume: usize, quad: &QuadratureSpec) -> Result<()> {
    quad.validate()?;
    let points = (quad.points_per_site as f64).powi(volume as i32);
    if points > quad.max_grid_points {
        return Err(Error::GridTooLarge {
            points,
            limit: quad.max_grid_points,
        });
    }
    Ok(())
}

/// Tensor-product quadrature of `Σ_grid e^{−S(φ)} obs(φ)` for `n_obs` real
/// observables, parallel over the first site's nodes and merged in order.
fn integrate<F>(
    source: Boltzmann<'_>,
    geometry: &LatticeGeometry,
    quad: &QuadratureSpec,
    n_obs: usize,
    observables: F,
) -> Result<ExactMoments>
where
    F: Fn(&[f64], Complex64, &mut [f64]) + Sync,
{
    let v = geometry.volume();
    check_grid(v, quad)?;
    source.validate(geometry)?;
    let (nodes, log_w) = quad.rule();
    let p = nodes.len();

    let partials = par::map_indexed(p, |first| {
        let mut acc = Accumulator::new(n_obs);
        let mut idx = vec![0usize; v];
        idx[0] = first;
        let mut phi: Vec<f64> = idx.iter().map(|&k| nodes[k]).collect();
        let mut obs = vec![0.0; n_obs];
        loop {
            let log_measure: f64 = idx.iter().map(|&k| log_w[k]).sum();
            let action = source.action(&phi, geometry);
            observables(&phi, action, &mut obs);
            acc.add(Complex64::new(log_measure - action.re, -action.im), &obs);
            // odometer over sites 1..V
            let mut site = 1;
            while site < v {
                idx[site] += 1;
                if idx[site] < p {
                    phi[site] = nodes[idx[site]];
                    break;
                }
                idx[site] = 0;
                phi[site] = nodes[0];
                site += 1;
            }
            if site >= v {
                break;
            }
        }
        acc
    });

    let mut total = Accumulator::new(n_obs);
    for part in &partials {
        total.merge(part);
    }
    if total.z.norm() == 0.0 || !total.z.norm().is_finite() {
        return Err(Error::NonNormalizable("quadrature sum vanished or overflowed".into()));
    }
    let log_z = Complex64::new(total.shift, 0.0) + total.z.ln();
    let values = total.sums.iter().map(|s| s / total.z).collect();
    Ok(ExactMoments { log_z, values })
}

/// `log Z` at the given resolution, without the truncation check.
pub fn log_z_unchecked(source: Boltzmann<'_>, geometry: &LatticeGeometry, quad: &QuadratureSpec) -> Result<Complex64> {
    Ok(integrate(source, geometry, quad, 0, |_, _, _| {})?.log_z)
}

/// `|log Z(φ_max + 1) − log Z(φ_max)|`, with the node count scaled so the
/// node density stays the same.
pub fn truncation_error(source: Boltzmann<'_>, geometry: &LatticeGeometry, quad: &QuadratureSpec) -> Result<f64> {
    let wider_max = quad.phi_max + 1.0;
    let wider = QuadratureSpec {
        phi_max: wider_max,
        points_per_site: (quad.points_per_site as f64 * wider_max / quad.phi_max).ceil() as usize,
        ..*quad
    };
    let a = log_z_unchecked(source, geometry, quad)?;
    let b = log_z_unchecked(source, geometry, &wider)?;
    Ok((a - b).norm())
}

/// `log Z = log ∫ e^{−S}`; complex when the target carries the imaginary term.
///
/// Fails when widening the domain by one unit moves the result by more than
/// `truncation_tolerance`.
pub fn exact_log_z(source: Boltzmann<'_>, geometry: &LatticeGeometry, quad: &QuadratureSpec) -> Result<Complex64> {
    let value = log_z_unchecked(source, geometry, quad)?;
    let delta = truncation_error(source, geometry, quad)?;
    if delta > quad.truncation_tolerance {
        return Err(Error::Truncation {
            delta,
            tolerance: quad.truncation_tolerance,
        });
    }
    Ok(value)
}

/// Exact `⟨O⟩` for several observables at once.
pub fn exact_expectations(
    source: Boltzmann<'_>,
    geometry: &LatticeGeometry,
    quad: &QuadratureSpec,
    n_obs: usize,
    observables: impl Fn(&[f64], &mut [f64]) + Sync,
) -> Result<ExactMoments> {
    integrate(source, geometry, quad, n_obs, |phi, _, out| observables(phi, out))
}

/// Exact `⟨O⟩`; complex weights `e^{−𝒜}` for a complex target.
pub fn exact_expectation(
    source: Boltzmann<'_>,
    geometry: &LatticeGeometry,
    quad: &QuadratureSpec,
    observable: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<Complex64> {
    Ok(exact_expectations(source, geometry, quad, 1, |phi, out| out[0] = observable(phi))?.values[0])
}

/// `KL(p ‖ q) = ⟨S_q − S_p⟩_p + log Z_q − log Z_p` for two real distributions.
pub fn exact_kl(
    p: Boltzmann<'_>,
    q: Boltzmann<'_>,
    geometry: &LatticeGeometry,
    quad: &QuadratureSpec,
) -> Result<f64> {
    if !p.is_real() || !q.is_real() {
        return Err(Error::ComplexTarget("KL divergence needs real actions"));
    }
    let moments = integrate(p, geometry, quad, 1, |phi, s_p, out| {
        out[0] = q.action(phi, geometry).re - s_p.re;
    })?;
    let log_zq = log_z_unchecked(q, geometry, quad)?;
    Ok(moments.values[0].re + log_zq.re - moments.log_z.re)
}

/// Variational free energy `𝓕(θ) = ⟨𝒜 − S⟩_p − log Z_θ`.
pub fn exact_variational_free_energy(
    couplings: &CouplingSet,
    target: &TargetActionSpec,
    geometry: &LatticeGeometry,
    quad: &QuadratureSpec,
) -> Result<f64> {
    if target.is_complex() {
        return Err(Error::ComplexTarget("variational free energy needs a real target"));
    }
    let t = Boltzmann::Target(target);
    let moments = integrate(Boltzmann::Model(couplings), geometry, quad, 1, |phi, s, out| {
        out[0] = t.action(phi, geometry).re - s.re;
    })?;
    Ok(moments.values[0].re - moments.log_z.re)
}

/// `∂𝓕/∂θ` from exact expectations, in both algebraic forms.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactGradient {
    /// `⟨𝒜⟩⟨∂S⟩ − ⟨𝒜 ∂S⟩ + ⟨S ∂S⟩ − ⟨S⟩⟨∂S⟩`.
    pub four_term: CouplingSet,
    /// `⟨(Δ − ⟨Δ⟩)(∂S − ⟨∂S⟩)⟩` with `Δ = S − 𝒜`, from a second centred pass.
    pub covariance: CouplingSet,
}

fn write_action_gradient(phi: &[f64], geometry: &LatticeGeometry, out: &mut [f64]) {
    let nl = geometry.links().len();
    let v = phi.len();
    for (l, &(i, j)) in geometry.links().iter().enumerate() {
        out[l] = -phi[i] * phi[j];
    }
    for (i, &x) in phi.iter().enumerate() {
        out[nl + i] = x * x;
        out[nl + v + i] = x.powi(4);
        out[nl + 2 * v + i] = x;
    }
}

pub fn exact_variational_gradient(
    couplings: &CouplingSet,
    target: &TargetActionSpec,
    geometry: &LatticeGeometry,
    quad: &QuadratureSpec,
) -> Result<ExactGradient> {
    if target.is_complex() {
        return Err(Error::ComplexTarget("variational gradient needs a real target"));
    }
    let t = Boltzmann::Target(target);
    let np = couplings.len();
    // layout: [S, 𝒜, ∂S (np), 𝒜∂S (np), S∂S (np)]
    let raw = integrate(Boltzmann::Model(couplings), geometry, quad, 2 + 3 * np, |phi, s, out| {
        let a = t.action(phi, geometry).re;
        out[0] = s.re;
        out[1] = a;
        write_action_gradient(phi, geometry, &mut out[2..2 + np]);
        for k in 0..np {
            let d = out[2 + k];
            out[2 + np + k] = a * d;
            out[2 + 2 * np + k] = s.re * d;
        }
    })?;
    let m: Vec<f64> = raw.values.iter().map(|c| c.re).collect();
    let (mean_s, mean_a) = (m[0], m[1]);
    let four: Vec<f64> = (0..np)
        .map(|k| {
            let d = m[2 + k];
            mean_a * d - m[2 + np + k] + m[2 + 2 * np + k] - mean_s * d
        })
        .collect();

    let mean_delta = mean_s - mean_a;
    let mean_grad = &m[2..2 + np];
    let centred = integrate(Boltzmann::Model(couplings), geometry, quad, np, |phi, s, out| {
        let delta = s.re - t.action(phi, geometry).re - mean_delta;
        write_action_gradient(phi, geometry, out);
        for (o, g) in out.iter_mut().zip(mean_grad) {
            *o = delta * (*o - g);
        }
    })?;
    let cov: Vec<f64> = centred.values.iter().map(|c| c.re).collect();

    Ok(ExactGradient {
        four_term: CouplingSet::from_flat(geometry, &four)?,
        covariance: CouplingSet::from_flat(geometry, &cov)?,
    })
}

/// Exact distribution of an Ising model `p(s) ∝ exp(J Σ_links s_i s_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsingEnumeration {
    volume: usize,
    probabilities: Vec<f64>,
}

impl IsingEnumeration {
    /// Spin of `site` in state `state` (bit set means `+1`).
    pub fn spin(state: usize, site: usize) -> f64 {
        if state >> site & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    pub fn expectation(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let mut spins = vec![0.0; self.volume];
        self.probabilities
            .iter()
            .enumerate()
            .map(|(state, p)| {
                for (site, s) in spins.iter_mut().enumerate() {
                    *s = Self::spin(state, site);
                }
                p * f(&spins)
            })
            .sum()
    }
}

pub fn ising_enumeration(geometry: &LatticeGeometry, coupling: f64) -> Result<IsingEnumeration> {
    let v = geometry.volume();
    if v > 20 {
        return Err(Error::GridTooLarge {
            points: 2f64.powi(v as i32),
            limit: 2f64.powi(20),
        });
    }
    let energies: Vec<f64> = (0..1usize << v)
        .map(|state| {
            coupling
                * geometry
                    .links()
                    .iter()
                    .map(|&(i, j)| IsingEnumeration::spin(state, i) * IsingEnumeration::spin(state, j))
                    .sum::<f64>()
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(IsingEnumeration {
        volume: v,
        probabilities: weights.iter().map(|w| w / z).collect(),
    })
}

/// `log ∫_{−φ_max}^{φ_max} e^{−V(x)} dx` by Gauss-Legendre quadrature.
pub fn log_integrate_1d(potential: impl Fn(f64) -> f64, quad: &QuadratureSpec) -> Result<f64> {
    quad.validate()?;
    let (nodes, log_w) = quad.rule();
    let logs: Vec<f64> = nodes.iter().zip(&log_w).map(|(&x, lw)| lw - potential(x)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonNormalizable("one-dimensional integrand vanished".into()));
    }
    Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
}

/// Normalised one-dimensional density `∝ e^{−V(x)}` on `[−φ_max, φ_max]` with
/// an accurate CDF, for goodness-of-fit tests.
pub struct Density1d {
    potential: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    lo: f64,
    cell: f64,
    offset: f64,
    cumulative: Vec<f64>,
    rule: Vec<(f64, f64)>,
}

const DENSITY_CELLS: usize = 4000;
const CELL_POINTS: usize = 8;

impl Density1d {
    pub fn new(potential: impl Fn(f64) -> f64 + Send + Sync + 'static, quad: &QuadratureSpec) -> Result<Self> {
        quad.validate()?;
        let lo = -quad.phi_max;
        let cell = 2.0 * quad.phi_max / DENSITY_CELLS as f64;
        let rule = GaussLegendre::new(NonZeroUsize::new(CELL_POINTS).unwrap())
            .as_node_weight_pairs()
            .to_vec();
        let offset = (0..=DENSITY_CELLS * 4)
            .map(|k| potential(lo + k as f64 * cell / 4.0))
            .fold(f64::INFINITY, f64::min);
        if !offset.is_finite() {
            return Err(Error::NonNormalizable("potential is not finite on the domain".into()));
        }
        let mut density = Density1d {
            potential: Box::new(potential),
            lo,
            cell,
            offset,
            cumulative: Vec::with_capacity(DENSITY_CELLS + 1),
            rule,
        };
        let mut total = 0.0;
        density.cumulative.push(0.0);
        for k in 0..DENSITY_CELLS {
            let a = lo + k as f64 * cell;
            total += density.integral(a, a + cell);
            density.cumulative.push(total);
        }
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::NonNormalizable("density integrates to zero".into()));
        }
        Ok(density)
    }

    fn integral(&self, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.rule
            .iter()
            .map(|&(x, w)| w * (-(self.potential)(mid + half * x) + self.offset).exp())
            .sum::<f64>()
            * half
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lo {
            return 0.0;
        }
        let k = ((x - self.lo) / self.cell).floor() as usize;
        if k >= DENSITY_CELLS {
            return 1.0;
        }
        let a = self.lo + k as f64 * self.cell;
        ((self.cumulative[k] + self.integral(a, x)) / self.total()).clamp(0.0, 1.0)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x.abs() > -self.lo {
            return 0.0;
        }
        (-(self.potential)(x) + self.offset).exp() / self.total()
    }

    /// `⟨f⟩` under the density.
    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        let mut sum = 0.0;
        for k in 0..DENSITY_CELLS {
            let a = self.lo + k as f64 * self.cell;
            let mid = a + 0.5 * self.cell;
            let half = 0.5 * self.cell;
            sum += self
                .rule
                .iter()
                .map(|&(x, w)| {
                    let y = mid + half * x;
                    w * f(y) * (-(self.potential)(y) + self.offset).exp()
                })
                .sum::<f64>()
                * half;
        }
        sum / self.total()
    }

    pub fn mean(&self) -> f64 {
        self.expectation(|x| x)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.expectation(|x| (x - m) * (x - m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_square_lattice, map_standard_couplings, StandardCouplings};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_site(a: f64, b: f64) -> (LatticeGeometry, CouplingSet) {
        let g = build_square_lattice(1, false).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.0, a, b, 0.0);
        (g, c)
    }

    #[test]
    fn gaussian_log_z() {
        let (g, c) = single_site(1.0, 0.0);
        let quad = QuadratureSpec::new(6.0, 41);
        let lz = exact_log_z(Boltzmann::Model(&c), &g, &quad).unwrap();
        assert!((lz.re - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
        assert_eq!(lz.im, 0.0);
    }

    #[test]
    fn quartic_log_z_converges() {
        let (g, c) = single_site(1.0, 1.0);
        let coarse = log_z_unchecked(Boltzmann::Model(&c), &g, &QuadratureSpec::new(4.0, 61)).unwrap().re;
        let fine = log_z_unchecked(Boltzmann::Model(&c), &g, &QuadratureSpec::new(4.0, 122)).unwrap().re;
        assert!((coarse - fine).abs() < 1e-8);
        let wide = log_z_unchecked(Boltzmann::Model(&c), &g, &QuadratureSpec::new(8.0, 244)).unwrap().re;
        assert!((wide - fine).abs() < 1e-10);
        // frozen reference value
        assert!((fine - 0.313_661_799_575_844_6).abs() < 1e-9, "{fine}");
    }

    #[test]
    fn grid_limits() {
        let g = build_square_lattice(3, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.1, 1.0, 0.1, 0.0);
        assert!(matches!(
            log_z_unchecked(Boltzmann::Model(&c), &g, &QuadratureSpec::default()),
            Err(Error::GridTooLarge { .. })
        ));
        let (g1, c1) = single_site(1.0, 0.0);
        assert!(log_z_unchecked(Boltzmann::Model(&c1), &g1, &QuadratureSpec::new(4.0, 10)).is_err());
        // a broad Gaussian is not contained in [−4, 4]
        let broad = CouplingSet::homogeneous(&g1, 0.0, 0.01, 0.0, 0.0);
        assert!(matches!(
            exact_log_z(Boltzmann::Model(&broad), &g1, &QuadratureSpec::default()),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn single_site_moments() {
        let (g, c) = single_site(0.5, 0.0);
        let quad = QuadratureSpec::new(8.0, 61);
        let sq = exact_expectation(Boltzmann::Model(&c), &g, &quad, |p| p[0] * p[0]).unwrap();
        assert!((sq.re - 1.0).abs() < 1e-10);
        let m = exact_expectation(Boltzmann::Model(&c), &g, &quad, |p| p[0]).unwrap();
        assert!(m.re.abs() < 1e-14);
    }

    #[test]
    fn symmetric_and_complex_expectations_on_2x2() {
        let g = build_square_lattice(2, true).unwrap();
        let quad = QuadratureSpec::default();
        let c = CouplingSet::homogeneous(&g, 0.2, 0.8, 0.3, 0.0);
        let m = exact_expectation(Boltzmann::Model(&c), &g, &quad, |p| p.iter().sum::<f64>() / 4.0).unwrap();
        assert!(m.norm() < 1e-12);

        let spec = TargetActionSpec::new([-0.2, 0.8, 0.3, -0.1, 0.15]);
        let moments = exact_expectations(Boltzmann::Target(&spec), &g, &quad, 2, |p, out| {
            out[0] = p.iter().sum::<f64>() / 4.0;
            out[1] = p.iter().map(|x| x * x).sum();
        })
        .unwrap();
        assert!(moments.values[0].norm() < 1e-12);
        assert!(moments.values[1].re.is_finite() && moments.values[1].re > 0.0);
        // the imaginary action term tilts ⟨Σφ²⟩ into the complex plane
        assert!(moments.values[1].im < 0.0);
        assert!(moments.log_z.im.abs() > 0.0);
    }

    #[test]
    fn kl_properties() {
        let g = build_square_lattice(2, true).unwrap();
        let quad = QuadratureSpec::default();
        let c = CouplingSet::homogeneous(&g, 0.2, 0.8, 0.3, 0.0);
        let same = exact_kl(Boltzmann::Model(&c), Boltzmann::Model(&c), &g, &quad).unwrap();
        assert!(same.abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut asym = 0.0f64;
        for _ in 0..5 {
            let p = CouplingSet::homogeneous(&g, rng.random_range(-0.2..0.3), rng.random_range(0.5..1.0), rng.random_range(0.1..0.4), 0.0);
            let q = CouplingSet::homogeneous(&g, rng.random_range(-0.2..0.3), rng.random_range(0.5..1.0), rng.random_range(0.1..0.4), 0.0);
            let pq = exact_kl(Boltzmann::Model(&p), Boltzmann::Model(&q), &g, &quad).unwrap();
            let qp = exact_kl(Boltzmann::Model(&q), Boltzmann::Model(&p), &g, &quad).unwrap();
            assert!(pq >= -1e-12 && qp >= -1e-12);
            asym = asym.max((pq - qp).abs());
        }
        assert!(asym > 1e-4);

        let complex = TargetActionSpec::new([0.0, 1.0, 0.1, 0.0, 0.15]);
        assert!(exact_kl(Boltzmann::Model(&c), Boltzmann::Target(&complex), &g, &quad).is_err());
    }

    #[test]
    fn variational_gradient_forms_and_fixed_point() {
        let g = build_square_lattice(2, true).unwrap();
        let quad = QuadratureSpec::new(4.0, 21);
        let target = TargetActionSpec::truncated([-0.3, 0.9, 0.2, 0.0, 0.0], 3).unwrap();
        let at_target = target.to_couplings(&g).unwrap();
        let grad = exact_variational_gradient(&at_target, &target, &g, &quad).unwrap();
        assert!(grad.four_term.max_abs() < 1e-8);
        assert!(grad.covariance.max_abs() < 1e-8);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut theta = at_target.clone();
        for x in theta.iter_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
        let grad = exact_variational_gradient(&theta, &target, &g, &quad).unwrap();
        for (f, c) in grad.four_term.iter().zip(grad.covariance.iter()) {
            assert!((f - c).abs() < 1e-10, "{f} vs {c}");
        }

        // Richardson-extrapolated central differences of 𝓕 on a subset of components
        let flat = theta.to_flat();
        let free_energy = |x: &[f64]| {
            exact_variational_free_energy(&CouplingSet::from_flat(&g, x).unwrap(), &target, &g, &quad).unwrap()
        };
        let central = |k: usize, h: f64| {
            let mut up = flat.clone();
            let mut down = flat.clone();
            up[k] += h;
            down[k] -= h;
            (free_energy(&up) - free_energy(&down)) / (2.0 * h)
        };
        for k in [0, 3, 8, 9, 13, 16, 19] {
            let numeric = (4.0 * central(k, 5e-4) - central(k, 1e-3)) / 3.0;
            let exact = grad.covariance.to_flat()[k];
            assert!((numeric - exact).abs() <= 1e-6 * exact.abs().max(1e-3), "component {k}: {numeric} vs {exact}");
        }
    }

    #[test]
    fn resolution_convergence_on_2x2() {
        let g = build_square_lattice(2, true).unwrap();
        let c = map_standard_couplings(StandardCouplings::new(0.1, 0.5, 1.2).unwrap(), &g);
        let a = log_z_unchecked(Boltzmann::Model(&c), &g, &QuadratureSpec::new(4.0, 41)).unwrap();
        let b = log_z_unchecked(Boltzmann::Model(&c), &g, &QuadratureSpec::new(4.0, 82)).unwrap();
        assert!((a - b).norm() < 1e-8);
    }

    #[test]
    fn ising_enumeration_2x2() {
        let g = build_square_lattice(2, true).unwrap();
        let exact = ising_enumeration(&g, 0.3).unwrap();
        assert_eq!(exact.probabilities().len(), 16);
        assert!((exact.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(exact.expectation(|s| s[0]).abs() < 1e-14);
        // 2×2 periodic: every site pair along an axis is joined by two links
        let z: f64 = (0..16usize)
            .map(|st| {
                let e: f64 = g
                    .links()
                    .iter()
                    .map(|&(i, j)| IsingEnumeration::spin(st, i) * IsingEnumeration::spin(st, j))
                    .sum();
                (0.3 * e).exp()
            })
            .sum();
        let all_up = (0.3f64 * 8.0).exp() / z;
        assert!((exact.probabilities()[15] - all_up).abs() < 1e-14);
    }

    #[test]
    fn density_cdf_and_moments() {
        let d = Density1d::new(|x| 0.5 * x * x, &QuadratureSpec::new(8.0, 11)).unwrap();
        assert!((d.cdf(0.0) - 0.5).abs() < 1e-12);
        assert!((d.cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-10);
        assert!((d.variance() - 1.0).abs() < 1e-10);
        assert_eq!(d.cdf(-9.0), 0.0);
        assert_eq!(d.cdf(9.0), 1.0);
        let lz = log_integrate_1d(|x| 0.5 * x * x, &QuadratureSpec::new(8.0, 61)).unwrap();
        assert!((lz - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }
}
