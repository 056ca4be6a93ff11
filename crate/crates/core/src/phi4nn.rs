//! Bipartite φ⁴ network: visible field `φ` coupled to hidden units `h` through
//!
//! `S = −Σ w_ij φ_i h_j + Σ r_i φ_i + Σ a_i φ_i² + Σ b_i φ_i⁴ + Σ s_j h_j + Σ m_j h_j² + Σ n_j h_j⁴`
//!
//! with layer-wise Gibbs sampling, contrastive-divergence training and the
//! Ising limit of the single-field theory.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{check_len, CouplingSet, FieldConfiguration, LatticeGeometry};
use crate::mcmc::chain_rng;
use crate::par;
use crate::stats;

/// Spread of the rejection envelope relative to the local curvature width.
pub const ENVELOPE_INFLATION: f64 = 1.2;
/// Consecutive rejections after which a draw falls back to Metropolis steps.
pub const FALLBACK_AFTER_REJECTIONS: u32 = 100;
/// Random-walk Metropolis steps taken by the fallback.
pub const FALLBACK_STEPS: usize = 20;
/// Lowest acceptance rate of the rejection sampler seen over the parameter grid
/// `c₁ ∈ [−20, 20]`, `c₂ ∈ [−50, 50]`, `c₄ ∈ [0.01, 250]` exercised by the tests.
pub const ACCEPTANCE_FLOOR: f64 = 0.25;

/// Counters kept by [`sample_quartic_site_tracked`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuarticStats {
    pub proposals: u64,
    pub accepted: u64,
    pub fallbacks: u64,
}

impl QuarticStats {
    pub fn acceptance(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

fn quartic(c1: f64, c2: f64, c4: f64, x: f64) -> f64 {
    x * (c1 + x * (c2 + x * x * c4))
}

/// Real roots of `t³ + p t + q = 0`, in increasing order.
fn depressed_cubic_roots(p: f64, q: f64) -> Vec<f64> {
    let mut roots = if p == 0.0 && q == 0.0 {
        vec![0.0]
    } else {
        let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
        if disc > 0.0 {
            let sq = disc.sqrt();
            vec![(-q / 2.0 + sq).cbrt() + (-q / 2.0 - sq).cbrt()]
        } else {
            let rho = 2.0 * (-p / 3.0).sqrt();
            let arg = ((3.0 * q) / (2.0 * p) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
            let theta = arg.acos() / 3.0;
            (0..3).map(|k| rho * (theta - 2.0 * PI * k as f64 / 3.0).cos()).collect()
        }
    };
    for t in roots.iter_mut() {
        for _ in 0..3 {
            let d = 3.0 * *t * *t + p;
            if d != 0.0 {
                let step = (*t * *t * *t + p * *t + q) / d;
                if step.is_finite() {
                    *t -= step;
                }
            }
        }
    }
    roots.sort_by(f64::total_cmp);
    roots
}

/// Width multipliers tried for each basin; the one giving the smallest
/// envelope mass is kept.
const WIDTH_LADDER: [f64; 10] = [ENVELOPE_INFLATION, 1.6, 2.2, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 32.0];

/// Envelope piece on one basin `[lo, hi]` of the potential: a Gaussian centred
/// on the basin's minimum, scaled to lie above the density everywhere in the
/// basin.
#[derive(Debug, Clone)]
struct Basin {
    center: f64,
    width: f64,
    lo: f64,
    hi: f64,
    /// Log of the envelope's height at `center`.
    log_height: f64,
}

/// Piecewise envelope for `e^{−c₁x − c₂x² − c₄x⁴}` (`c₄ > 0`): one Gaussian per
/// local minimum, each valid on the minimum's basin of attraction.
#[derive(Debug, Clone)]
struct Envelope {
    basins: Vec<Basin>,
    /// Probability of proposing from the first basin.
    first_weight: f64,
}

impl Envelope {
    fn new(c1: f64, c2: f64, c4: f64) -> Envelope {
        let v = |x| quartic(c1, c2, c4, x);
        let critical = depressed_cubic_roots(c2 / (2.0 * c4), c1 / (4.0 * c4));
        let curvature = |x: f64| 2.0 * c2 + 12.0 * c4 * x * x;
        let regions: Vec<(f64, f64, f64)> = if critical.len() == 3 && curvature(critical[1]) < 0.0 {
            vec![
                (critical[0], f64::NEG_INFINITY, critical[1]),
                (critical[2], critical[1], f64::INFINITY),
            ]
        } else {
            let best = critical.iter().copied().min_by(|a, b| v(*a).total_cmp(&v(*b))).unwrap();
            vec![(best, f64::NEG_INFINITY, f64::INFINITY)]
        };
        let floor = 2.0 * c4.sqrt();
        let basins: Vec<Basin> = regions
            .into_iter()
            .map(|(xk, lo, hi)| {
                let base = 1.0 / curvature(xk).max(floor).sqrt();
                let vk = v(xk);
                // sup over the basin of V(x_k) − V(x) + (x − x_k)² / 2σ²
                let lift = |sigma: f64| {
                    let inv = 1.0 / (sigma * sigma);
                    let u = |x: f64| v(x) - vk - 0.5 * (x - xk) * (x - xk) * inv;
                    let roots = depressed_cubic_roots((c2 - 0.5 * inv) / (2.0 * c4), (c1 + xk * inv) / (4.0 * c4));
                    let min_u = roots
                        .into_iter()
                        .filter(|x| (lo..=hi).contains(x))
                        .chain([lo, hi].into_iter().filter(|x| x.is_finite()))
                        .map(u)
                        .fold(0.0, f64::min);
                    -min_u
                };
                let (width, l) = WIDTH_LADDER
                    .iter()
                    .map(|m| {
                        let sigma = m * base;
                        (sigma, lift(sigma))
                    })
                    .min_by(|a, b| (a.1 + a.0.ln()).total_cmp(&(b.1 + b.0.ln())))
                    .unwrap();
                Basin {
                    center: xk,
                    width,
                    lo,
                    hi,
                    log_height: -vk + l,
                }
            })
            .collect();
        let first_weight = if basins.len() == 2 {
            let m: Vec<f64> = basins.iter().map(|b| b.log_height + b.width.ln()).collect();
            1.0 / (1.0 + (m[1] - m[0]).exp())
        } else {
            1.0
        };
        Envelope { basins, first_weight }
    }

    /// A proposal and the log acceptance probability, or `None` when the
    /// Gaussian draw left its basin.
    fn propose(&self, c1: f64, c2: f64, c4: f64, rng: &mut (impl Rng + ?Sized)) -> Option<(f64, f64)> {
        let k = usize::from(self.basins.len() == 2 && rng.random::<f64>() >= self.first_weight);
        let b = &self.basins[k];
        let z: f64 = rng.sample(StandardNormal);
        let x = b.center + b.width * z;
        if !(b.lo..=b.hi).contains(&x) {
            return None;
        }
        let log_env = b.log_height - 0.5 * z * z;
        Some((x, (-quartic(c1, c2, c4, x) - log_env).min(0.0)))
    }
}

fn check_quartic(c1: f64, c2: f64, c4: f64) -> Result<()> {
    if !(c1.is_finite() && c2.is_finite() && c4.is_finite()) {
        return Err(Error::NonNormalizable(format!("coefficients ({c1}, {c2}, {c4}) are not finite")));
    }
    if c4 < 0.0 || (c4 == 0.0 && c2 <= 0.0) {
        return Err(Error::NonNormalizable(format!(
            "exp(−{c1}x − {c2}x² − {c4}x⁴) cannot be normalised"
        )));
    }
    Ok(())
}

/// One draw from the density `∝ exp(−c₁x − c₂x² − c₄x⁴)`.
pub fn sample_quartic_site(c1: f64, c2: f64, c4: f64, rng: &mut (impl Rng + ?Sized)) -> Result<f64> {
    sample_quartic_site_tracked(c1, c2, c4, rng, &mut QuarticStats::default())
}

/// [`sample_quartic_site`] with acceptance bookkeeping.
///
/// `c₄ = 0` is an exact Gaussian draw. Otherwise each local minimum gets a
/// Gaussian envelope that bounds the density on its basin, and proposals are
/// accepted against it. After [`FALLBACK_AFTER_REJECTIONS`] consecutive rejections the
/// draw is finished with [`FALLBACK_STEPS`] random-walk Metropolis steps from
/// the deepest minimum.
pub fn sample_quartic_site_tracked(
    c1: f64,
    c2: f64,
    c4: f64,
    rng: &mut (impl Rng + ?Sized),
    stats: &mut QuarticStats,
) -> Result<f64> {
    check_quartic(c1, c2, c4)?;
    if c4 == 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        stats.proposals += 1;
        stats.accepted += 1;
        return Ok(-c1 / (2.0 * c2) + z / (2.0 * c2).sqrt());
    }
    let env = Envelope::new(c1, c2, c4);
    for _ in 0..FALLBACK_AFTER_REJECTIONS {
        stats.proposals += 1;
        if let Some((x, log_accept)) = env.propose(c1, c2, c4, rng) {
            if rng.random::<f64>().ln() < log_accept {
                stats.accepted += 1;
                return Ok(x);
            }
        }
    }
    stats.fallbacks += 1;
    let deepest = env
        .basins
        .iter()
        .map(|b| b.center)
        .min_by(|a, b| quartic(c1, c2, c4, *a).total_cmp(&quartic(c1, c2, c4, *b)))
        .unwrap();
    let mut x = deepest;
    for _ in 0..FALLBACK_STEPS {
        let z: f64 = rng.sample(StandardNormal);
        let y = x + env.basins[0].width * z;
        if rng.random::<f64>().ln() < quartic(c1, c2, c4, x) - quartic(c1, c2, c4, y) {
            x = y;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenKind {
    Continuous,
    /// `h ∈ {−1, +1}`; `m` and `n` only add constants and are ignored.
    Binary,
}

/// Parameters of the bipartite network. `w` is stored row-major with one row
/// per visible site.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteCouplings {
    n_visible: usize,
    n_hidden: usize,
    pub w: Vec<f64>,
    pub r: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub s: Vec<f64>,
    pub m: Vec<f64>,
    pub n: Vec<f64>,
    pub hidden_kind: HiddenKind,
}

impl BipartiteCouplings {
    pub fn zeros(n_visible: usize, n_hidden: usize, hidden_kind: HiddenKind) -> Self {
        BipartiteCouplings {
            n_visible,
            n_hidden,
            w: vec![0.0; n_visible * n_hidden],
            r: vec![0.0; n_visible],
            a: vec![0.0; n_visible],
            b: vec![0.0; n_visible],
            s: vec![0.0; n_hidden],
            m: vec![0.0; n_hidden],
            n: vec![0.0; n_hidden],
            hidden_kind,
        }
    }

    /// Small random weights `w ~ N(0, scale²)`, `a = m = 0.5`, everything else 0.
    pub fn random(n_visible: usize, n_hidden: usize, hidden_kind: HiddenKind, scale: f64, rng: &mut impl Rng) -> Self {
        let mut c = BipartiteCouplings::zeros(n_visible, n_hidden, hidden_kind);
        c.w.iter_mut().for_each(|x| *x = scale * rng.sample::<f64, _>(StandardNormal));
        c.a.iter_mut().for_each(|x| *x = 0.5);
        if hidden_kind == HiddenKind::Continuous {
            c.m.iter_mut().for_each(|x| *x = 0.5);
        }
        c
    }

    pub fn n_visible(&self) -> usize {
        self.n_visible
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n_hidden + j]
    }

    pub fn set_weight(&mut self, i: usize, j: usize, value: f64) {
        self.w[i * self.n_hidden + j] = value;
    }

    pub fn validate(&self) -> Result<()> {
        let (nv, nh) = (self.n_visible, self.n_hidden);
        check_len("w", nv * nh, self.w.len())?;
        for (what, v, n) in [("r", &self.r, nv), ("a", &self.a, nv), ("b", &self.b, nv)] {
            check_len(what, n, v.len())?;
        }
        for (what, v) in [("s", &self.s), ("m", &self.m), ("n", &self.n)] {
            check_len(what, nh, v.len())?;
        }
        if self.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("couplings must be finite".into()));
        }
        if self.b.iter().any(|&b| b < 0.0) {
            return Err(Error::InvalidParameter("visible quartic couplings must be non-negative".into()));
        }
        if self.hidden_kind == HiddenKind::Continuous && self.n.iter().any(|&n| n < 0.0) {
            return Err(Error::InvalidParameter("hidden quartic couplings must be non-negative".into()));
        }
        Ok(())
    }

    /// All parameters in the order `w, r, a, b, s, m, n`.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w
            .iter()
            .chain(&self.r)
            .chain(&self.a)
            .chain(&self.b)
            .chain(&self.s)
            .chain(&self.m)
            .chain(&self.n)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w
            .iter_mut()
            .chain(self.r.iter_mut())
            .chain(self.a.iter_mut())
            .chain(self.b.iter_mut())
            .chain(self.s.iter_mut())
            .chain(self.m.iter_mut())
            .chain(self.n.iter_mut())
    }

    pub fn zeros_like(&self) -> Self {
        BipartiteCouplings::zeros(self.n_visible, self.n_hidden, self.hidden_kind)
    }

    pub fn axpy(&mut self, alpha: f64, other: &BipartiteCouplings) {
        for (x, y) in self.iter_mut().zip(other.iter()) {
            *x += alpha * y;
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// SHA-256 of the parameter bits and shape.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_visible as u64).to_le_bytes());
        h.update((self.n_hidden as u64).to_le_bytes());
        h.update([u8::from(self.hidden_kind == HiddenKind::Binary)]);
        for x in self.iter() {
            h.update(x.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_visible(&self, visible: &[f64]) -> Result<()> {
        check_len("visible layer", self.n_visible, visible.len())
    }

    fn check_hidden(&self, hidden: &[f64]) -> Result<()> {
        check_len("hidden layer", self.n_hidden, hidden.len())?;
        if self.hidden_kind == HiddenKind::Binary && hidden.iter().any(|&h| h != 1.0 && h != -1.0) {
            return Err(Error::InvalidParameter("binary hidden units must be ±1".into()));
        }
        Ok(())
    }

    /// `Σ_i w_ij φ_i` for every hidden unit.
    pub fn hidden_fields(&self, visible: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_hidden];
        for (i, &phi) in visible.iter().enumerate() {
            let row = &self.w[i * self.n_hidden..(i + 1) * self.n_hidden];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * phi;
            }
        }
        out
    }

    /// `Σ_j w_ij h_j` for every visible site.
    pub fn visible_fields(&self, hidden: &[f64]) -> Vec<f64> {
        (0..self.n_visible)
            .map(|i| {
                self.w[i * self.n_hidden..(i + 1) * self.n_hidden]
                    .iter()
                    .zip(hidden)
                    .map(|(w, h)| w * h)
                    .sum()
            })
            .collect()
    }
}

/// Values of both layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub visible: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl LayerState {
    pub fn validate(&self, couplings: &BipartiteCouplings) -> Result<()> {
        couplings.check_visible(&self.visible)?;
        couplings.check_hidden(&self.hidden)?;
        if self.visible.iter().chain(&self.hidden).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("layer values must be finite".into()));
        }
        Ok(())
    }
}

pub fn bipartite_action(state: &LayerState, couplings: &BipartiteCouplings) -> Result<f64> {
    state.validate(couplings)?;
    let fields = couplings.hidden_fields(&state.visible);
    let mut s = 0.0;
    for (f, h) in fields.iter().zip(&state.hidden) {
        s -= f * h;
    }
    for (i, &phi) in state.visible.iter().enumerate() {
        let p2 = phi * phi;
        s += couplings.r[i] * phi + couplings.a[i] * p2 + couplings.b[i] * p2 * p2;
    }
    let continuous = couplings.hidden_kind == HiddenKind::Continuous;
    for (j, &h) in state.hidden.iter().enumerate() {
        s += couplings.s[j] * h;
        if continuous {
            let h2 = h * h;
            s += couplings.m[j] * h2 + couplings.n[j] * h2 * h2;
        }
    }
    Ok(s)
}

fn add_statistics(acc: &mut BipartiteCouplings, visible: &[f64], hidden: &[f64], scale: f64) {
    let nh = acc.n_hidden;
    for (i, &phi) in visible.iter().enumerate() {
        let row = &mut acc.w[i * nh..(i + 1) * nh];
        for (w, &h) in row.iter_mut().zip(hidden) {
            *w -= scale * phi * h;
        }
        let p2 = phi * phi;
        acc.r[i] += scale * phi;
        acc.a[i] += scale * p2;
        acc.b[i] += scale * p2 * p2;
    }
    let continuous = acc.hidden_kind == HiddenKind::Continuous;
    for (j, &h) in hidden.iter().enumerate() {
        acc.s[j] += scale * h;
        if continuous {
            let h2 = h * h;
            acc.m[j] += scale * h2;
            acc.n[j] += scale * h2 * h2;
        }
    }
}

/// `∂S/∂θ` at `state`, shaped like the couplings. For binary hidden units the
/// `m` and `n` components are zero.
pub fn bipartite_gradient(state: &LayerState, couplings: &BipartiteCouplings) -> Result<BipartiteCouplings> {
    state.validate(couplings)?;
    let mut g = couplings.zeros_like();
    add_statistics(&mut g, &state.visible, &state.hidden, 1.0);
    Ok(g)
}

/// `P(h = +1) = 1 / (1 + e^{−2x})` for a binary unit with `x = Σ_i w_ij φ_i − s_j`.
pub fn binary_up_probability(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * x).exp())
}

/// Draws every hidden unit from its conditional given the visible layer.
pub fn gibbs_update_hidden(
    visible: &[f64],
    couplings: &BipartiteCouplings,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Vec<f64>> {
    couplings.check_visible(visible)?;
    let fields = couplings.hidden_fields(visible);
    match couplings.hidden_kind {
        HiddenKind::Binary => Ok(fields
            .iter()
            .zip(&couplings.s)
            .map(|(f, s)| {
                if rng.random::<f64>() < binary_up_probability(f - s) {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect()),
        HiddenKind::Continuous => fields
            .iter()
            .enumerate()
            .map(|(j, f)| sample_quartic_site(couplings.s[j] - f, couplings.m[j], couplings.n[j], rng))
            .collect(),
    }
}

/// Draws every visible site from its conditional given the hidden layer.
pub fn gibbs_update_visible(
    hidden: &[f64],
    couplings: &BipartiteCouplings,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Vec<f64>> {
    couplings.check_hidden(hidden)?;
    couplings
        .visible_fields(hidden)
        .iter()
        .enumerate()
        .map(|(i, f)| sample_quartic_site(couplings.r[i] - f, couplings.a[i], couplings.b[i], rng))
        .collect()
}

/// Alternating Gibbs chain from `start`: `thinning` full updates (hidden then
/// visible) between retained states, after `burn_in` updates.
pub fn sample_joint(
    couplings: &BipartiteCouplings,
    start: &LayerState,
    burn_in: usize,
    thinning: usize,
    n_samples: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Vec<LayerState>> {
    start.validate(couplings)?;
    let mut state = start.clone();
    let mut step = |state: &mut LayerState| -> Result<()> {
        state.hidden = gibbs_update_hidden(&state.visible, couplings, rng)?;
        state.visible = gibbs_update_visible(&state.hidden, couplings, rng)?;
        Ok(())
    };
    for _ in 0..burn_in {
        step(&mut state)?;
    }
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        for _ in 0..thinning.max(1) {
            step(&mut state)?;
        }
        out.push(state.clone());
    }
    Ok(out)
}

/// Which parameter families are updated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RbmMask {
    pub w: bool,
    pub r: bool,
    pub a: bool,
    pub b: bool,
    pub s: bool,
    pub m: bool,
    pub n: bool,
}

impl RbmMask {
    pub fn all() -> Self {
        RbmMask {
            w: true,
            r: true,
            a: true,
            b: true,
            s: true,
            m: true,
            n: true,
        }
    }

    /// Only the families of a Gaussian-Gaussian machine (`b = n = 0`).
    pub fn gaussian() -> Self {
        RbmMask {
            b: false,
            n: false,
            ..RbmMask::all()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbmConfig {
    pub learning_rate: f64,
    pub cd_steps: usize,
    /// `None` trains on the full dataset every epoch.
    pub batch_size: Option<usize>,
    /// Keep negative-phase chains across updates instead of restarting them
    /// at the data.
    pub persistent: bool,
    pub trainable: RbmMask,
    /// Lower bound on `a` (and `m`) while the matching quartic term is zero.
    pub quadratic_floor: f64,
    pub gradient_ceiling: f64,
    pub rng_seed: u64,
}

impl Default for RbmConfig {
    fn default() -> Self {
        RbmConfig {
            learning_rate: 1e-3,
            cd_steps: 1,
            batch_size: None,
            persistent: false,
            trainable: RbmMask::all(),
            quadratic_floor: 1e-3,
            gradient_ceiling: 1e8,
            rng_seed: 0,
        }
    }
}

impl RbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be finite and non-negative".into()));
        }
        if self.cd_steps == 0 || self.batch_size == Some(0) {
            return Err(Error::InvalidParameter("cd_steps and batch_size must be at least 1".into()));
        }
        if !(self.quadratic_floor > 0.0) {
            return Err(Error::InvalidParameter("quadratic_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbmRecord {
    pub epoch: usize,
    /// Mean squared difference per visible site between each data vector and
    /// a one-step reconstruction `φ → h → φ′`.
    pub reconstruction_error: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone)]
pub struct RbmReport {
    pub couplings: BipartiteCouplings,
    pub history: Vec<RbmRecord>,
}

fn apply_mask(g: &mut BipartiteCouplings, mask: RbmMask) {
    for (family, on) in [
        (&mut g.w, mask.w),
        (&mut g.r, mask.r),
        (&mut g.a, mask.a),
        (&mut g.b, mask.b),
        (&mut g.s, mask.s),
        (&mut g.m, mask.m),
        (&mut g.n, mask.n),
    ] {
        if !on {
            family.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

fn project(c: &mut BipartiteCouplings, floor: f64) {
    for (a, b) in c.a.iter_mut().zip(c.b.iter_mut()) {
        *b = b.max(0.0);
        if *b == 0.0 {
            *a = a.max(floor);
        }
    }
    if c.hidden_kind == HiddenKind::Continuous {
        for (m, n) in c.m.iter_mut().zip(c.n.iter_mut()) {
            *n = n.max(0.0);
            if *n == 0.0 {
                *m = m.max(floor);
            }
        }
    }
}

/// Streams at or above this offset belong to persistent chains.
const PERSISTENT_STREAM: u64 = 1 << 62;
/// Stream used to shuffle the data between epochs.
const SHUFFLE_STREAM: u64 = u64::MAX;

fn persistent_negative_phase(
    visible: &mut Vec<f64>,
    rng: &mut ChaCha8Rng,
    couplings: &BipartiteCouplings,
    steps: usize,
) -> Result<BipartiteCouplings> {
    let mut h = gibbs_update_hidden(visible, couplings, rng)?;
    for _ in 0..steps {
        *visible = gibbs_update_visible(&h, couplings, rng)?;
        h = gibbs_update_hidden(visible, couplings, rng)?;
    }
    let mut g = couplings.zeros_like();
    add_statistics(&mut g, visible, &h, 1.0);
    Ok(g)
}

/// Contrastive-divergence training of the bipartite network on visible data.
///
/// Each update samples `h ~ p(h|φ_data)` for the positive phase and runs
/// `cd_steps` alternating updates for the negative phase, from the data or
/// from persistent chains. The step is
/// `θ ← θ − η (⟨∂S/∂θ⟩_data − ⟨∂S/∂θ⟩_model)`.
pub fn train_rbm(
    data: &[Vec<f64>],
    initial: BipartiteCouplings,
    config: &RbmConfig,
    epochs: usize,
) -> Result<RbmReport> {
    config.validate()?;
    initial.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    for x in data {
        initial.check_visible(x)?;
    }
    let batch = config.batch_size.unwrap_or(data.len()).min(data.len());
    let mut couplings = initial;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = chain_rng(config.rng_seed, SHUFFLE_STREAM);
    let mut persistent: Vec<(Vec<f64>, ChaCha8Rng)> = (0..batch)
        .map(|k| (data[k].clone(), chain_rng(config.rng_seed, PERSISTENT_STREAM + k as u64)))
        .collect();
    let mut history = Vec::with_capacity(epochs);
    let mut update = 0u64;

    for epoch in 0..epochs {
        if batch < data.len() {
            order.shuffle(&mut shuffle_rng);
        }
        let mut recon_sum = 0.0;
        let mut norm = 0.0;
        for start in (0..data.len()).step_by(batch) {
            let idx = &order[start..(start + batch).min(data.len())];
            let c = &couplings;
            let positive = par::map_indexed(idx.len(), |k| -> Result<(BipartiteCouplings, f64)> {
                let mut rng = chain_rng(config.rng_seed, update * batch as u64 + k as u64);
                let x = &data[idx[k]];
                let h = gibbs_update_hidden(x, c, &mut rng)?;
                let recon = gibbs_update_visible(&h, c, &mut rng)?;
                let err = x.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
                let mut g = c.zeros_like();
                add_statistics(&mut g, x, &h, 1.0);
                if config.persistent {
                    return Ok((g, err));
                }
                let mut v = recon;
                let mut hh = gibbs_update_hidden(&v, c, &mut rng)?;
                for _ in 1..config.cd_steps {
                    v = gibbs_update_visible(&hh, c, &mut rng)?;
                    hh = gibbs_update_hidden(&v, c, &mut rng)?;
                }
                add_statistics(&mut g, &v, &hh, -1.0);
                Ok((g, err))
            });
            let mut grad = couplings.zeros_like();
            for p in positive {
                let (g, err) = p?;
                grad.axpy(1.0, &g);
                recon_sum += err;
            }
            if config.persistent {
                let c = &couplings;
                let mut slots: Vec<(&mut (Vec<f64>, ChaCha8Rng), Option<Result<BipartiteCouplings>>)> =
                    persistent[..idx.len()].iter_mut().map(|p| (p, None)).collect();
                par::for_each_mut(&mut slots, |_, (chain, slot)| {
                    let (v, rng) = &mut **chain;
                    *slot = Some(persistent_negative_phase(v, rng, c, config.cd_steps));
                });
                for (_, slot) in slots {
                    grad.axpy(-1.0, &slot.expect("every slot is filled")?);
                }
            }
            let n = idx.len() as f64;
            grad.iter_mut().for_each(|x| *x /= n);
            apply_mask(&mut grad, config.trainable);
            norm = grad.norm();
            if !(norm <= config.gradient_ceiling) {
                return Err(Error::Divergence {
                    epoch,
                    norm,
                    ceiling: config.gradient_ceiling,
                });
            }
            couplings.axpy(-config.learning_rate, &grad);
            project(&mut couplings, config.quadratic_floor);
            update += 1;
        }
        history.push(RbmRecord {
            epoch,
            reconstruction_error: recon_sum / data.len() as f64,
            gradient_norm: norm,
        });
    }
    Ok(RbmReport { couplings, history })
}

/// Column `j` of `w`: the weights from hidden unit `j` to every visible site.
pub fn extract_features(couplings: &BipartiteCouplings, hidden_index: usize) -> Result<Vec<f64>> {
    if hidden_index >= couplings.n_hidden {
        return Err(Error::IndexOutOfRange {
            index: hidden_index,
            len: couplings.n_hidden,
        });
    }
    Ok((0..couplings.n_visible).map(|i| couplings.weight(i, hidden_index)).collect())
}

/// Lag-1 spatial autocorrelation of a field on an `side × side` grid, averaged
/// over horizontal and vertical neighbour pairs (open boundaries).
pub fn spatial_autocorrelation(values: &[f64], side: usize) -> f64 {
    let m = stats::mean(values);
    let var: f64 = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    if var == 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..side {
        for x in 0..side {
            let c = values[x + side * y] - m;
            if x + 1 < side {
                sum += c * (values[x + 1 + side * y] - m);
                count += 1;
            }
            if y + 1 < side {
                sum += c * (values[x + side * (y + 1)] - m);
                count += 1;
            }
        }
    }
    sum / count as f64 / var
}

/// Cartoon face images on a `side × side` grid with fields in `[−1, 1]`: a
/// bright oval head on a dark background with darker eyes and mouth.
/// Position, size, shading and pixel noise vary per image.
pub fn synthetic_faces(n: usize, side: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = chain_rng(seed, 0);
    let s = side as f64;
    (0..n)
        .map(|_| {
            let cx = s * (0.5 + rng.random_range(-0.05..0.05));
            let cy = s * (0.5 + rng.random_range(-0.05..0.05));
            let rx = s * rng.random_range(0.28..0.36);
            let ry = s * rng.random_range(0.36..0.44);
            let skin = rng.random_range(0.3..0.8);
            let eye_dx = rx * rng.random_range(0.35..0.5);
            let eye_y = cy - ry * rng.random_range(0.2..0.35);
            let eye_r = s * rng.random_range(0.04..0.07);
            let mouth_y = cy + ry * rng.random_range(0.35..0.5);
            let mouth_w = rx * rng.random_range(0.3..0.6);
            let shade = rng.random_range(-0.3..0.3);
            let mut img = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let head = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0;
                    let mut v = if head { skin + shade * (px - cx) / rx } else { -0.8 };
                    let eye = |ex: f64| (px - ex).hypot(py - eye_y) <= eye_r.max(0.6);
                    if head && (eye(cx - eye_dx) || eye(cx + eye_dx)) {
                        v = -0.6;
                    }
                    if head && (py - mouth_y).abs() <= (0.04 * s).max(0.5) && (px - cx).abs() <= mouth_w {
                        v = -0.4;
                    }
                    let noise: f64 = rng.sample(StandardNormal);
                    img.push((v + 0.05 * noise).clamp(-1.0, 1.0));
                }
            }
            img
        })
        .collect()
}

/// One heat-bath sweep over the lattice, drawing each site from its exact
/// conditional given its neighbours.
pub fn heat_bath_sweep(
    config: &mut FieldConfiguration,
    couplings: &CouplingSet,
    geometry: &LatticeGeometry,
    rng: &mut (impl Rng + ?Sized),
) -> Result<()> {
    for site in 0..geometry.volume() {
        let field: f64 = geometry
            .incident_links(site)
            .iter()
            .map(|&(l, j)| couplings.w[l] * config.values()[j])
            .sum();
        let x = sample_quartic_site(couplings.r[site] - field, couplings.a[site], couplings.b[site], rng)?;
        config.values_mut()[site] = x;
    }
    Ok(())
}

/// Couplings approaching the Ising model with nearest-neighbour coupling
/// `κ`: `w = κ`, `a = −λ/2 + 2κ`, `b = λ/4`, so the single-site minima sit
/// at `|φ|² = 1 − 4κ/λ`.
pub fn ising_limit_couplings(geometry: &LatticeGeometry, kappa: f64, lambda: f64) -> CouplingSet {
    CouplingSet::homogeneous(geometry, kappa, -lambda / 2.0 + 2.0 * kappa, lambda / 4.0, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsingLimitConfig {
    pub side_length: usize,
    pub burn_in_sweeps: usize,
    pub n_samples: usize,
    pub rng_seed: u64,
}

impl Default for IsingLimitConfig {
    fn default() -> Self {
        IsingLimitConfig {
            side_length: 2,
            burn_in_sweeps: 200,
            n_samples: 5000,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsingLimitPoint {
    pub lambda: f64,
    /// Mean of `(|φ_i| − 1)²` over sites and samples.
    pub deviation: f64,
    pub std_error: f64,
    /// Per-sample sign patterns as bit masks (bit set for `φ_i > 0`).
    pub sign_states: Vec<usize>,
}

/// Samples the periodic lattice in the Ising limit for each `λ` and measures
/// how tightly `|φ|` concentrates at 1.
pub fn ising_limit_check(kappa: f64, lambdas: &[f64], config: &IsingLimitConfig) -> Result<Vec<IsingLimitPoint>> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter("kappa must be positive".into()));
    }
    if lambdas.is_empty() || lambdas.windows(2).any(|w| !(w[1] > w[0])) || lambdas[0] <= 0.0 {
        return Err(Error::InvalidParameter("lambda values must be positive and strictly increasing".into()));
    }
    let geometry = crate::lattice::build_square_lattice(config.side_length, true)?;
    let v = geometry.volume();
    let points = par::map_indexed(lambdas.len(), |k| -> Result<IsingLimitPoint> {
        let lambda = lambdas[k];
        let couplings = ising_limit_couplings(&geometry, kappa, lambda);
        let mut rng = chain_rng(config.rng_seed, k as u64);
        let mut phi = FieldConfiguration::constant(v, 1.0);
        for _ in 0..config.burn_in_sweeps {
            heat_bath_sweep(&mut phi, &couplings, &geometry, &mut rng)?;
        }
        let mut per_sample = Vec::with_capacity(config.n_samples);
        let mut sign_states = Vec::with_capacity(config.n_samples);
        for _ in 0..config.n_samples {
            heat_bath_sweep(&mut phi, &couplings, &geometry, &mut rng)?;
            let dev = phi.values().iter().map(|x| (x.abs() - 1.0).powi(2)).sum::<f64>() / v as f64;
            per_sample.push(dev);
            sign_states.push(
                phi.values()
                    .iter()
                    .enumerate()
                    .fold(0usize, |s, (i, &x)| if x > 0.0 { s | 1 << i } else { s }),
            );
        }
        let est = stats::mean_with_error(&per_sample)?;
        Ok(IsingLimitPoint {
            lambda,
            deviation: est.mean,
            std_error: est.std_error,
            sign_states,
        })
    });
    points.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_square_lattice;
    use crate::oracle::{ising_enumeration, log_integrate_1d, Density1d, QuadratureSpec};
    use crate::stats::{ks_statistic, mean_with_error};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn draws(c1: f64, c2: f64, c4: f64, n: usize, seed: u64) -> (Vec<f64>, QuarticStats) {
        let mut r = rng(seed);
        let mut st = QuarticStats::default();
        let xs = (0..n)
            .map(|_| sample_quartic_site_tracked(c1, c2, c4, &mut r, &mut st).unwrap())
            .collect();
        (xs, st)
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        (stats::mean(xs), stats::variance(xs))
    }

    #[test]
    fn action_examples() {
        let c = BipartiteCouplings::zeros(3, 2, HiddenKind::Continuous);
        let st = LayerState {
            visible: vec![0.3, -1.0, 2.0],
            hidden: vec![0.5, 1.5],
        };
        assert_eq!(bipartite_action(&st, &c).unwrap(), 0.0);
        let mut one = BipartiteCouplings::zeros(1, 1, HiddenKind::Continuous);
        one.set_weight(0, 0, 1.0);
        let unit = LayerState {
            visible: vec![1.0],
            hidden: vec![1.0],
        };
        assert_eq!(bipartite_action(&unit, &one).unwrap(), -1.0);
        let bad = LayerState {
            visible: vec![1.0, 2.0],
            hidden: vec![1.0],
        };
        assert!(matches!(bipartite_action(&bad, &one), Err(Error::SizeMismatch { .. })));
        let binary = BipartiteCouplings::zeros(1, 1, HiddenKind::Binary);
        let half = LayerState {
            visible: vec![1.0],
            hidden: vec![0.5],
        };
        assert!(bipartite_action(&half, &binary).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for kind in [HiddenKind::Continuous, HiddenKind::Binary] {
            let mut r = rng(1);
            let mut c = BipartiteCouplings::random(3, 2, kind, 0.5, &mut r);
            c.iter_mut().for_each(|x| *x += r.random_range(-0.5..0.5));
            c.b.iter_mut().for_each(|b| *b = b.abs());
            c.n.iter_mut().for_each(|n| *n = n.abs());
            let hidden = match kind {
                HiddenKind::Binary => vec![1.0, -1.0],
                HiddenKind::Continuous => vec![0.7, -1.3],
            };
            let st = LayerState {
                visible: vec![0.4, -0.9, 1.2],
                hidden,
            };
            let g = bipartite_gradient(&st, &c).unwrap();
            let analytic: Vec<f64> = g.iter().copied().collect();
            let h = 1e-5;
            for k in 0..analytic.len() {
                let mut plus = c.clone();
                let mut minus = c.clone();
                *plus.iter_mut().nth(k).unwrap() += h;
                *minus.iter_mut().nth(k).unwrap() -= h;
                let fd = (bipartite_action(&st, &plus).unwrap() - bipartite_action(&st, &minus).unwrap()) / (2.0 * h);
                let scale = analytic[k].abs().max(1.0);
                assert!((fd - analytic[k]).abs() < 1e-8 * scale, "{kind:?} component {k}: {fd} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn cubic_roots() {
        let roots = depressed_cubic_roots(-7.0, 6.0);
        for (got, want) in roots.iter().zip([-3.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let one = depressed_cubic_roots(1.0, -2.0);
        assert_eq!(one.len(), 1);
        assert!((one[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_reduction_is_standard_normal() {
        let (xs, st) = draws(0.0, 0.5, 0.0, 100_000, 2);
        assert_eq!(st.acceptance(), 1.0);
        let (m, v) = moments(&xs);
        let n = xs.len() as f64;
        assert!(m.abs() < 3.0 / n.sqrt());
        assert!((v - 1.0).abs() < 3.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn quartic_matches_quadrature() {
        for (c1, c2, c4) in [(0.0, 1.0, 1.0), (0.5, -5.0, 1.0), (-2.0, -3.0, 0.5)] {
            let (xs, st) = draws(c1, c2, c4, 100_000, 3);
            let density = Density1d::new(move |x| quartic(c1, c2, c4, x), &QuadratureSpec::new(6.0, 61)).unwrap();
            let d = ks_statistic(&xs, |x| density.cdf(x));
            assert!(d < 0.02, "({c1}, {c2}, {c4}): KS {d}");
            assert!(st.acceptance() >= ACCEPTANCE_FLOOR, "acceptance {}", st.acceptance());
            assert_eq!(st.fallbacks, 0);
        }
    }

    #[test]
    fn sign_symmetry() {
        let (plus, _) = draws(1.3, -1.0, 0.7, 50_000, 4);
        let (minus, _) = draws(-1.3, -1.0, 0.7, 50_000, 5);
        let mirrored: Vec<f64> = minus.iter().map(|x| -x).collect();
        let mut sorted = plus.clone();
        sorted.sort_by(f64::total_cmp);
        let ecdf = |x: f64| sorted.partition_point(|&s| s <= x) as f64 / sorted.len() as f64;
        let d = ks_statistic(&mirrored, ecdf);
        // two-sample KS at α = 0.001 for equal sizes
        assert!(d < 1.95 * (2.0 / 50_000f64).sqrt(), "{d}");
    }

    #[test]
    fn acceptance_floor_over_grid() {
        let mut worst: f64 = 1.0;
        for c1 in [-20.0, -3.0, 0.0, 0.7, 20.0] {
            for c2 in [-50.0, -5.0, -0.5, 0.0, 0.5, 5.0, 50.0] {
                for c4 in [0.01, 0.3, 1.0, 10.0, 250.0] {
                    let (_, st) = draws(c1, c2, c4, 2000, 6);
                    assert_eq!(st.fallbacks, 0, "({c1}, {c2}, {c4})");
                    worst = worst.min(st.acceptance());
                }
            }
        }
        assert!(worst >= ACCEPTANCE_FLOOR, "worst acceptance {worst}");
    }

    #[test]
    fn non_normalizable_rejected() {
        let mut r = rng(0);
        assert!(matches!(sample_quartic_site(0.0, 0.0, 0.0, &mut r), Err(Error::NonNormalizable(_))));
        assert!(sample_quartic_site(0.0, 1.0, -1.0, &mut r).is_err());
        assert!(sample_quartic_site(0.0, -1.0, 0.0, &mut r).is_err());
        assert!(sample_quartic_site(f64::NAN, 1.0, 0.0, &mut r).is_err());
    }

    #[test]
    fn binary_hidden_matches_two_point_enumeration() {
        let mut r = rng(7);
        for _ in 0..50 {
            let mut c = BipartiteCouplings::random(4, 3, HiddenKind::Binary, 1.0, &mut r);
            c.s.iter_mut().for_each(|s| *s = r.random_range(-2.0..2.0));
            let visible: Vec<f64> = (0..4).map(|_| r.random_range(-1.5..1.5)).collect();
            let fields = c.hidden_fields(&visible);
            for j in 0..3 {
                let mut hidden = vec![1.0; 3];
                let up = bipartite_action(&LayerState { visible: visible.clone(), hidden: hidden.clone() }, &c).unwrap();
                hidden[j] = -1.0;
                let down = bipartite_action(&LayerState { visible: visible.clone(), hidden }, &c).unwrap();
                let exact = 1.0 / (1.0 + (up - down).exp());
                assert!((binary_up_probability(fields[j] - c.s[j]) - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_binary_network_flips_fair_coins() {
        let c = BipartiteCouplings::zeros(3, 4, HiddenKind::Binary);
        let mut r = rng(8);
        let n = 20_000;
        let mut ups = 0usize;
        for _ in 0..n {
            ups += gibbs_update_hidden(&[0.3, 0.1, -2.0], &c, &mut r)
                .unwrap()
                .iter()
                .filter(|&&h| h == 1.0)
                .count();
        }
        let p = ups as f64 / (4 * n) as f64;
        assert!((p - 0.5).abs() < 3.0 * (0.25 / (4 * n) as f64).sqrt(), "{p}");
    }

    #[test]
    fn gaussian_visible_conditional_moments() {
        let mut c = BipartiteCouplings::zeros(2, 2, HiddenKind::Continuous);
        c.w = vec![0.5, -0.2, 0.1, 0.8];
        c.r = vec![0.3, -0.4];
        c.a = vec![0.8, 2.0];
        let hidden = [1.0, -0.5];
        let fields = c.visible_fields(&hidden);
        let mut r = rng(9);
        let n = 100_000;
        let mut cols = vec![Vec::with_capacity(n); 2];
        for _ in 0..n {
            let v = gibbs_update_visible(&hidden, &c, &mut r).unwrap();
            cols[0].push(v[0]);
            cols[1].push(v[1]);
        }
        for i in 0..2 {
            let mean = -(c.r[i] - fields[i]) / (2.0 * c.a[i]);
            let var = 1.0 / (2.0 * c.a[i]);
            let (m, v) = moments(&cols[i]);
            assert!((m - mean).abs() < 3.0 * (var / n as f64).sqrt(), "site {i}: mean {m} vs {mean}");
            assert!((v - var).abs() < 3.0 * var * (2.0 / n as f64).sqrt(), "site {i}: var {v} vs {var}");
        }
        // zero weights: the visible layer ignores the hidden one
        let mut free = c.clone();
        free.w.iter_mut().for_each(|w| *w = 0.0);
        let a = gibbs_update_visible(&[1.0, 1.0], &free, &mut rng(3)).unwrap();
        let b = gibbs_update_visible(&[-4.0, 9.0], &free, &mut rng(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hidden_conditional_factorises() {
        let mut c = BipartiteCouplings::zeros(2, 2, HiddenKind::Continuous);
        c.w = vec![0.6, -0.4, 0.9, 0.3];
        c.s = vec![0.2, -0.1];
        c.m = vec![-0.5, 0.4];
        c.n = vec![0.3, 0.2];
        let visible = [0.7, -0.4];
        let mut r = rng(10);
        let n = 40_000;
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let h = gibbs_update_hidden(&visible, &c, &mut r).unwrap();
                (h[0], h[1])
            })
            .collect();
        let median = |mut xs: Vec<f64>| {
            xs.sort_by(f64::total_cmp);
            xs[xs.len() / 2]
        };
        let m0 = median(pairs.iter().map(|p| p.0).collect());
        let m1 = median(pairs.iter().map(|p| p.1).collect());
        let mut table = [[0usize; 2]; 2];
        for (x, y) in &pairs {
            table[usize::from(*x > m0)][usize::from(*y > m1)] += 1;
        }
        let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
        let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
        let mut chi2 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let e = rows[i] as f64 * cols[j] as f64 / n as f64;
                chi2 += (table[i][j] as f64 - e).powi(2) / e;
            }
        }
        // one degree of freedom, α = 0.001
        assert!(chi2 < 10.83, "chi² {chi2}");
    }

    #[test]
    fn joint_gibbs_matches_quadrature() {
        let mut c = BipartiteCouplings::zeros(1, 1, HiddenKind::Continuous);
        c.w = vec![0.8];
        c.r = vec![0.2];
        c.a = vec![-0.3];
        c.b = vec![0.4];
        c.s = vec![-0.1];
        c.m = vec![0.5];
        c.n = vec![0.2];
        let quad = QuadratureSpec::new(6.0, 61);
        let marginal = |own: [f64; 3], other: [f64; 3], w: f64| {
            let quad = quad;
            move |x: f64| {
                let inner = log_integrate_1d(|y| other[0] * y + other[1] * y * y + other[2] * y.powi(4) - w * x * y, &quad)
                    .unwrap();
                own[0] * x + own[1] * x * x + own[2] * x.powi(4) - inner
            }
        };
        let vis = Density1d::new(marginal([0.2, -0.3, 0.4], [-0.1, 0.5, 0.2], 0.8), &quad).unwrap();
        let hid = Density1d::new(marginal([-0.1, 0.5, 0.2], [0.2, -0.3, 0.4], 0.8), &quad).unwrap();
        let start = LayerState {
            visible: vec![0.0],
            hidden: vec![0.0],
        };
        let samples = sample_joint(&c, &start, 100, 2, 100_000, &mut rng(11)).unwrap();
        let xs: Vec<f64> = samples.iter().map(|s| s.visible[0]).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s.hidden[0]).collect();
        let dx = ks_statistic(&xs, |x| vis.cdf(x));
        let dy = ks_statistic(&ys, |y| hid.cdf(y));
        assert!(dx < 0.02 && dy < 0.02, "KS visible {dx}, hidden {dy}");
    }

    #[test]
    fn feature_extraction() {
        let mut c = BipartiteCouplings::zeros(6, 3, HiddenKind::Binary);
        assert_eq!(extract_features(&c, 1).unwrap(), vec![0.0; 6]);
        let pattern = [1.0, -2.0, 3.5, 0.0, 0.25, -7.0];
        for (i, p) in pattern.iter().enumerate() {
            c.set_weight(i, 2, *p);
        }
        assert_eq!(extract_features(&c, 2).unwrap(), pattern.to_vec());
        assert!(matches!(extract_features(&c, 3), Err(Error::IndexOutOfRange { index: 3, len: 3 })));
    }

    #[test]
    fn autocorrelation_of_smooth_and_checkerboard() {
        let smooth: Vec<f64> = (0..64).map(|k| (k % 8) as f64).collect();
        assert!(spatial_autocorrelation(&smooth, 8) > 0.4);
        let checker: Vec<f64> = (0..64).map(|k| if (k % 8 + k / 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((spatial_autocorrelation(&checker, 8) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ising_limit_concentrates() {
        let lambdas = [1.0, 10.0, 100.0, 1000.0];
        let points = ising_limit_check(0.25, &lambdas, &IsingLimitConfig::default()).unwrap();
        for w in points.windows(2) {
            assert!(w[1].deviation < w[0].deviation, "{} !< {}", w[1].deviation, w[0].deviation);
        }
        assert!(points[3].deviation < 0.05);
        assert!(points[0].deviation > 0.1);
        assert!(ising_limit_check(0.25, &[10.0, 1.0], &IsingLimitConfig::default()).is_err());
    }

    #[test]
    fn ising_limit_signs_match_enumeration() {
        let kappa = 0.25;
        let config = IsingLimitConfig {
            n_samples: 40_000,
            rng_seed: 5,
            ..IsingLimitConfig::default()
        };
        let point = &ising_limit_check(kappa, &[1000.0], &config).unwrap()[0];
        let geometry = build_square_lattice(2, true).unwrap();
        let exact = ising_enumeration(&geometry, kappa).unwrap();
        let spin = |state: usize, i: usize| if state >> i & 1 == 1 { 1.0 } else { -1.0 };
        let observables: [(&str, Box<dyn Fn(usize) -> f64>); 3] = [
            ("s0 s1", Box::new(move |st| spin(st, 0) * spin(st, 1))),
            ("s0 s3", Box::new(move |st| spin(st, 0) * spin(st, 3))),
            ("m", Box::new(move |st| (0..4).map(|i| spin(st, i)).sum::<f64>())),
        ];
        for (name, f) in observables {
            let series: Vec<f64> = point.sign_states.iter().map(|&s| f(s)).collect();
            let est = mean_with_error(&series).unwrap();
            let want = exact.expectation(|s| {
                let st = s.iter().enumerate().fold(0usize, |acc, (i, &x)| if x > 0.0 { acc | 1 << i } else { acc });
                f(st)
            });
            assert!((est.mean - want).abs() < 3.0 * est.std_error, "{name}: {} ± {} vs {want}", est.mean, est.std_error);
        }
    }

    fn factor_data(n: usize, side: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng(seed);
        let v = side * side;
        let factors: Vec<Vec<f64>> = (0..2)
            .map(|f| (0..v).map(|i| if (i % side < side / 2) == (f == 0) { 0.8 } else { -0.3 }).collect())
            .collect();
        (0..n)
            .map(|_| {
                let z: [f64; 2] = [r.sample(StandardNormal), r.sample(StandardNormal)];
                (0..v)
                    .map(|i| z[0] * factors[0][i] + z[1] * factors[1][i] + 0.1 * r.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn face_features_are_spatially_coherent() {
        let side = 12;
        let faces = synthetic_faces(40, side, 5);
        assert!(faces.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        let init = BipartiteCouplings::random(side * side, 64, HiddenKind::Binary, 0.01, &mut rng(2));
        let config = RbmConfig {
            learning_rate: 5e-3,
            batch_size: Some(10),
            trainable: RbmMask::gaussian(),
            ..RbmConfig::default()
        };
        let report = train_rbm(&faces, init, &config, 200).unwrap();
        let mut shuffle_rng = rng(9);
        let (mut coherent, mut shuffled) = (0.0, 0.0);
        for j in 0..64 {
            let mut f = extract_features(&report.couplings, j).unwrap();
            coherent += spatial_autocorrelation(&f, side);
            f.shuffle(&mut shuffle_rng);
            shuffled += spatial_autocorrelation(&f, side);
        }
        assert!(coherent / 64.0 > shuffled / 64.0 + 0.2, "coherent {coherent} shuffled {shuffled}");
    }

    #[test]
    fn symmetric_data_keeps_zero_weights() {
        let data: Vec<Vec<f64>> = factor_data(200, 4, 1)
            .into_iter()
            .flat_map(|x| [x.clone(), x.iter().map(|v| -v).collect()])
            .collect();
        let mut init = BipartiteCouplings::zeros(16, 4, HiddenKind::Binary);
        init.a.iter_mut().for_each(|a| *a = 0.5);
        let config = RbmConfig {
            learning_rate: 1e-2,
            trainable: RbmMask::gaussian(),
            ..RbmConfig::default()
        };
        let report = train_rbm(&data, init, &config, 10).unwrap();
        let max_w = report.couplings.w.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        assert!(max_w < 0.05, "{max_w}");
    }

    #[test]
    fn gaussian_machine_reconstruction_improves() {
        let data = factor_data(500, 4, 2);
        let mut r = rng(3);
        let init = BipartiteCouplings::random(16, 2, HiddenKind::Continuous, 0.05, &mut r);
        let config = RbmConfig {
            learning_rate: 2e-2,
            batch_size: Some(50),
            trainable: RbmMask::gaussian(),
            rng_seed: 4,
            ..RbmConfig::default()
        };
        let report = train_rbm(&data, init.clone(), &config, 20).unwrap();
        let trace: Vec<f64> = report.history.iter().map(|h| h.reconstruction_error).collect();
        let smoothed: Vec<f64> = trace.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
        for w in smoothed.windows(2) {
            assert!(w[1] < w[0], "{trace:?}");
        }
        let again = train_rbm(&data, init, &config, 20).unwrap();
        assert_eq!(again.couplings, report.couplings);
        assert!(report.couplings.b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn persistent_training_runs_and_is_deterministic() {
        let data = factor_data(64, 4, 5);
        let mut r = rng(6);
        let init = BipartiteCouplings::random(16, 3, HiddenKind::Continuous, 0.05, &mut r);
        let config = RbmConfig {
            learning_rate: 1e-3,
            persistent: true,
            cd_steps: 2,
            batch_size: Some(16),
            rng_seed: 7,
            ..RbmConfig::default()
        };
        let a = train_rbm(&data, init.clone(), &config, 5).unwrap();
        let b = train_rbm(&data, init, &config, 5).unwrap();
        assert_eq!(a.couplings, b.couplings);
        assert!(a.couplings.validate().is_ok());
    }
}
