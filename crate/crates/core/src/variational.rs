//! Data-free training: minimise the variational free energy
//! `𝓕(θ) = ⟨𝒜 − S⟩_p − log Z_θ` of the model `p ∝ e^{−S(φ;θ)}` against a fixed
//! real target action `𝒜`, by plain gradient descent `θ ← θ − η ∂𝓕/∂θ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::{fill_action_gradient, Action, CouplingSet, LatticeGeometry, TargetActionSpec};
use crate::mcmc::{ChainPool, EnsembleSource, SampleEnsemble, SamplerConfig};
use crate::par;
use crate::stats::{binned_jackknife, ObservableEstimate};

/// How the couplings are shared across the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tying {
    /// One parameter per link and per site.
    Inhomogeneous,
    /// One parameter per family; the gradient of a tied parameter is the sum
    /// of the gradients of the parameters it stands for.
    Homogeneous,
}

/// Which coupling families are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask {
    pub w: bool,
    pub a: bool,
    pub b: bool,
    pub r: bool,
}

impl Default for ParamMask {
    fn default() -> Self {
        ParamMask {
            w: true,
            a: true,
            b: true,
            r: false,
        }
    }
}

impl ParamMask {
    pub fn all() -> Self {
        ParamMask {
            w: true,
            a: true,
            b: true,
            r: true,
        }
    }
}

/// Applies tying and masking to a raw per-parameter gradient in place.
pub fn constrain_gradient(grad: &mut CouplingSet, tying: Tying, mask: ParamMask) {
    for (family, on) in [
        (&mut grad.w, mask.w),
        (&mut grad.a, mask.a),
        (&mut grad.b, mask.b),
        (&mut grad.r, mask.r),
    ] {
        if !on {
            family.iter_mut().for_each(|g| *g = 0.0);
        } else if tying == Tying::Homogeneous {
            let total: f64 = family.iter().sum();
            family.iter_mut().for_each(|g| *g = total);
        }
    }
}

/// Gradient of `𝓕` as the sample covariance `Cov(S − 𝒜, ∂S/∂θ)`.
///
/// The ensemble must have been drawn from `couplings`. Expectations are plain
/// sample means, so this equals [`variational_gradient_four_term`] up to
/// rounding.
pub fn variational_gradient(
    ensemble: &SampleEnsemble,
    target: &TargetActionSpec,
    couplings: &CouplingSet,
) -> Result<CouplingSet> {
    let (deltas, mean_grad, geometry) = prepare(ensemble, target, couplings)?;
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let np = couplings.len();
    let configs = ensemble.configs();
    let partial = par::map_chunks(configs.len(), CHUNK, |range| {
        let mut g = CouplingSet::zeros(geometry);
        let mut acc = vec![0.0; np];
        for l in range {
            fill_action_gradient(configs[l].values(), geometry, &mut g);
            let d = deltas[l] - mean_delta;
            for ((a, x), m) in acc.iter_mut().zip(g.iter()).zip(&mean_grad) {
                *a += d * (x - m);
            }
        }
        acc
    });
    let n = configs.len() as f64;
    let flat = sum_chunks(partial, np).into_iter().map(|x| x / n).collect::<Vec<_>>();
    CouplingSet::from_flat(geometry, &flat)
}

/// Gradient of `𝓕` as `⟨𝒜⟩⟨∂S⟩ − ⟨𝒜 ∂S⟩ + ⟨S ∂S⟩ − ⟨S⟩⟨∂S⟩`.
pub fn variational_gradient_four_term(
    ensemble: &SampleEnsemble,
    target: &TargetActionSpec,
    couplings: &CouplingSet,
) -> Result<CouplingSet> {
    let geometry = ensemble.geometry();
    check_inputs(ensemble, target, couplings)?;
    let np = couplings.len();
    let configs = ensemble.configs();
    let terms = ensemble.terms();
    // per chunk: [Σ S, Σ 𝒜, Σ ∂S (np), Σ 𝒜∂S (np), Σ S∂S (np)]
    let partial = par::map_chunks(configs.len(), CHUNK, |range| {
        let mut g = CouplingSet::zeros(geometry);
        let mut acc = vec![0.0; 2 + 3 * np];
        for l in range {
            let phi = configs[l].values();
            let s = couplings.evaluate(phi, geometry);
            let a = target.evaluate_terms(&terms[l]).re;
            acc[0] += s;
            acc[1] += a;
            fill_action_gradient(phi, geometry, &mut g);
            for (k, x) in g.iter().enumerate() {
                acc[2 + k] += x;
                acc[2 + np + k] += a * x;
                acc[2 + 2 * np + k] += s * x;
            }
        }
        acc
    });
    let n = configs.len() as f64;
    let m: Vec<f64> = sum_chunks(partial, 2 + 3 * np).into_iter().map(|x| x / n).collect();
    let flat: Vec<f64> = (0..np)
        .map(|k| m[1] * m[2 + k] - m[2 + np + k] + m[2 + 2 * np + k] - m[0] * m[2 + k])
        .collect();
    CouplingSet::from_flat(geometry, &flat)
}

const CHUNK: usize = 256;

fn sum_chunks(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, x) in total.iter_mut().zip(p) {
            *t += x;
        }
    }
    total
}

fn check_inputs(ensemble: &SampleEnsemble, target: &TargetActionSpec, couplings: &CouplingSet) -> Result<()> {
    if target.is_complex() {
        return Err(Error::ComplexTarget("training targets must be real; use reweighting for the imaginary term"));
    }
    couplings.validate(ensemble.geometry())?;
    if ensemble.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    Ok(())
}

/// Per-sample `S − 𝒜` and the mean of `∂S/∂θ`.
fn prepare<'e>(
    ensemble: &'e SampleEnsemble,
    target: &TargetActionSpec,
    couplings: &CouplingSet,
) -> Result<(Vec<f64>, Vec<f64>, &'e LatticeGeometry)> {
    check_inputs(ensemble, target, couplings)?;
    let geometry = ensemble.geometry();
    let configs = ensemble.configs();
    let terms = ensemble.terms();
    let deltas: Vec<f64> = configs
        .iter()
        .zip(terms)
        .map(|(c, t)| couplings.evaluate(c.values(), geometry) - target.evaluate_terms(t).re)
        .collect();
    let np = couplings.len();
    let partial = par::map_chunks(configs.len(), CHUNK, |range| {
        let mut g = CouplingSet::zeros(geometry);
        let mut acc = vec![0.0; np];
        for l in range {
            fill_action_gradient(configs[l].values(), geometry, &mut g);
            for (a, x) in acc.iter_mut().zip(g.iter()) {
                *a += x;
            }
        }
        acc
    });
    let n = configs.len() as f64;
    let mean_grad = sum_chunks(partial, np).into_iter().map(|x| x / n).collect();
    Ok((deltas, mean_grad, geometry))
}

/// `KL(p‖q) ≈ ⟨𝒜 − S⟩_p + log⟨e^{S − 𝒜}⟩_p` from samples of `p`, using the
/// ensemble's cached actions for `S`.
///
/// The second term estimates `log Z_𝒜 − log Z_S` by reweighting and is
/// evaluated with the largest exponent factored out. The estimator is biased
/// low for finite samples and can come out slightly negative.
pub fn estimate_kl(ensemble: &SampleEnsemble, target: &TargetActionSpec) -> Result<ObservableEstimate> {
    if target.is_complex() {
        return Err(Error::ComplexTarget("KL estimation needs a real target"));
    }
    let diff: Vec<f64> = ensemble
        .actions()
        .iter()
        .zip(ensemble.terms())
        .map(|(s, t)| target.evaluate_terms(t).re - s)
        .collect();
    if diff.iter().all(|&d| d == 0.0) {
        return Ok(ObservableEstimate {
            mean: 0.0,
            std_error: 0.0,
            n_effective: diff.len() as f64,
        });
    }
    let shift = diff.iter().map(|d| -d).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = diff.iter().map(|d| (-d - shift).exp()).collect();
    binned_jackknife(&[&diff, &weights], |m| m[0] + m[1].ln() + shift)
}

/// Random starting couplings: `w ~ U(−0.1, 0.1)`, `a ~ U(0.4, 0.6)`,
/// `b ~ U(0.05, 0.15)`, and `r ~ U(−0.1, 0.1)` when `r` is trainable (zero
/// otherwise). With homogeneous tying one value is drawn per family.
pub fn init_random_couplings(geometry: &LatticeGeometry, tying: Tying, mask: ParamMask, rng: &mut impl Rng) -> CouplingSet {
    let mut c = CouplingSet::zeros(geometry);
    let ranges = [(-0.1, 0.1), (0.4, 0.6), (0.05, 0.15), (-0.1, 0.1)];
    let families = [&mut c.w, &mut c.a, &mut c.b, &mut c.r];
    for (k, (family, (lo, hi))) in families.into_iter().zip(ranges).enumerate() {
        if k == 3 && !mask.r {
            continue;
        }
        match tying {
            Tying::Homogeneous => {
                let v = rng.random_range(lo..hi);
                family.iter_mut().for_each(|x| *x = v);
            }
            Tying::Inhomogeneous => family.iter_mut().for_each(|x| *x = rng.random_range(lo..hi)),
        }
    }
    c
}

/// Seeded variant of [`init_random_couplings`].
pub fn init_random_couplings_seeded(geometry: &LatticeGeometry, tying: Tying, mask: ParamMask, seed: u64) -> CouplingSet {
    init_random_couplings(geometry, tying, mask, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalConfig {
    pub learning_rate: f64,
    /// Chains, per-epoch sample count (`n_samples`), thinning, seed and
    /// initial burn-in.
    pub sampler: SamplerConfig,
    /// Restart and re-burn the chains every this many epochs; 0 keeps them
    /// running for the whole training.
    pub resample_every: usize,
    /// Sweeps between the last sample of one epoch and the first of the next.
    pub sweeps_between_epochs: usize,
    /// Keep tuning the proposal width during those in-between sweeps.
    pub adapt_between_epochs: bool,
    pub tying: Tying,
    pub trainable: ParamMask,
    /// Abort when the gradient norm exceeds this.
    pub gradient_ceiling: f64,
    /// Lower bound enforced on every `b_i` after each update.
    pub b_floor: f64,
    /// A run counts as converged when the last gradient norm is below this.
    pub convergence_tolerance: f64,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        VariationalConfig {
            learning_rate: 1e-3,
            sampler: SamplerConfig {
                n_samples: 1000,
                burn_in_sweeps: 10_000,
                thinning_sweeps: 10,
                ..SamplerConfig::default()
            },
            resample_every: 0,
            sweeps_between_epochs: 50,
            adapt_between_epochs: true,
            tying: Tying::Inhomogeneous,
            trainable: ParamMask::default(),
            gradient_ceiling: 1e8,
            b_floor: 1e-6,
            convergence_tolerance: 1e-4,
        }
    }
}

impl VariationalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be finite and non-negative".into()));
        }
        if !(self.b_floor > 0.0) {
            return Err(Error::InvalidParameter("b_floor must be positive".into()));
        }
        self.sampler.validate()
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// KL estimate at the couplings used for this epoch's samples.
    pub kl: f64,
    pub kl_error: f64,
    pub gradient_norm: f64,
    /// Family means `[w, a, b, r]` after the update.
    pub means: [f64; 4],
    pub digest: String,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub couplings: CouplingSet,
    pub epoch: usize,
    pub learning_rate: f64,
    pub history: Vec<EpochRecord>,
    pub chains: ChainPool,
    /// Number of chain restarts so far; selects generator streams.
    pub generation: u64,
}

#[derive(Debug, Clone)]
pub struct VariationalReport {
    pub kl_trace: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub final_couplings: CouplingSet,
    pub converged: bool,
    /// `θ − θ_target` when the target lies inside the model family.
    pub coupling_error: Option<CouplingSet>,
}

/// Epoch-by-epoch driver; [`train_variational`] runs it to completion.
pub struct VariationalTrainer {
    geometry: LatticeGeometry,
    target: TargetActionSpec,
    config: VariationalConfig,
    state: TrainState,
}

impl VariationalTrainer {
    pub fn new(
        initial: CouplingSet,
        target: TargetActionSpec,
        geometry: &LatticeGeometry,
        config: VariationalConfig,
    ) -> Result<Self> {
        config.validate()?;
        initial.validate(geometry)?;
        if target.is_complex() {
            return Err(Error::ComplexTarget("training targets must be real"));
        }
        let mut chains = ChainPool::new(geometry, &config.sampler, 0)?;
        chains.advance(&initial, geometry, config.sampler.burn_in_sweeps, config.sampler.adapt_proposal);
        let state = TrainState {
            couplings: initial,
            epoch: 0,
            learning_rate: config.learning_rate,
            history: Vec::new(),
            chains,
            generation: 0,
        };
        Ok(VariationalTrainer {
            geometry: geometry.clone(),
            target,
            config,
            state,
        })
    }

    /// Continues from a saved state.
    pub fn resume(
        state: TrainState,
        target: TargetActionSpec,
        geometry: &LatticeGeometry,
        config: VariationalConfig,
    ) -> Result<Self> {
        config.validate()?;
        state.couplings.validate(geometry)?;
        Ok(VariationalTrainer {
            geometry: geometry.clone(),
            target,
            config,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// Samples at the current couplings without updating them.
    pub fn current_ensemble(&mut self) -> Result<SampleEnsemble> {
        let sampler = &self.config.sampler;
        let couplings = &self.state.couplings;
        let configs = self
            .state
            .chains
            .collect(couplings, &self.geometry, sampler.n_samples, sampler.thinning_sweeps);
        SampleEnsemble::from_configs(&self.geometry, configs, couplings, EnsembleSource::Couplings(couplings.clone()))
    }

    /// One epoch: refresh the chains, sample, take one gradient step.
    pub fn step(&mut self) -> Result<&EpochRecord> {
        let epoch = self.state.epoch;
        if epoch > 0 {
            let every = self.config.resample_every;
            if every > 0 && epoch % every == 0 {
                self.state.generation += 1;
                let mut chains = ChainPool::new(&self.geometry, &self.config.sampler, self.state.generation)?;
                chains.advance(
                    &self.state.couplings,
                    &self.geometry,
                    self.config.sampler.burn_in_sweeps,
                    self.config.sampler.adapt_proposal,
                );
                self.state.chains = chains;
            } else {
                self.state.chains.advance(
                    &self.state.couplings,
                    &self.geometry,
                    self.config.sweeps_between_epochs,
                    self.config.adapt_between_epochs,
                );
            }
        }
        let ensemble = self.current_ensemble()?;
        let kl = estimate_kl(&ensemble, &self.target)?;
        let mut grad = variational_gradient(&ensemble, &self.target, &self.state.couplings)?;
        constrain_gradient(&mut grad, self.config.tying, self.config.trainable);
        let norm = grad.norm();
        if !(norm <= self.config.gradient_ceiling) {
            return Err(Error::Divergence {
                epoch,
                norm,
                ceiling: self.config.gradient_ceiling,
            });
        }
        let couplings = &mut self.state.couplings;
        couplings.axpy(-self.state.learning_rate, &grad);
        couplings.b.iter_mut().for_each(|b| *b = b.max(self.config.b_floor));

        self.state.epoch += 1;
        self.state.history.push(EpochRecord {
            epoch,
            kl: kl.mean,
            kl_error: kl.std_error,
            gradient_norm: norm,
            means: couplings.family_means(),
            digest: couplings.digest(),
        });
        Ok(self.state.history.last().unwrap())
    }

    pub fn report(&self) -> VariationalReport {
        let history = self.state.history.clone();
        let converged = history
            .last()
            .is_some_and(|r| r.gradient_norm <= self.config.convergence_tolerance);
        let coupling_error = self.target.to_couplings(&self.geometry).ok().map(|t| {
            let mut e = self.state.couplings.clone();
            e.axpy(-1.0, &t);
            e
        });
        VariationalReport {
            kl_trace: history.iter().map(|r| r.kl).collect(),
            history,
            final_couplings: self.state.couplings.clone(),
            converged,
            coupling_error,
        }
    }
}

/// Runs `epochs` epochs of variational training from `initial`.
pub fn train_variational(
    initial: CouplingSet,
    target: &TargetActionSpec,
    geometry: &LatticeGeometry,
    config: &VariationalConfig,
    epochs: usize,
) -> Result<VariationalReport> {
    if epochs == 0 {
        return Err(Error::InvalidParameter("epochs must be at least 1".into()));
    }
    let mut trainer = VariationalTrainer::new(initial, *target, geometry, config.clone())?;
    for _ in 0..epochs {
        trainer.step()?;
    }
    Ok(trainer.report())
}
