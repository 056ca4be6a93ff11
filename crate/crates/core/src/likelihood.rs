//! Learning from data: gradient descent on the mean negative log-likelihood
//! `ℒ = −⟨ln p(φ;θ)⟩_data`, whose gradient is
//! `⟨∂S/∂θ⟩_data − ⟨∂S/∂θ⟩_model`. Model expectations come from persistent
//! Metropolis chains advanced a few sweeps per epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lattice::{check_len, fill_action_gradient, Action, CouplingSet, FieldConfiguration, LatticeGeometry};
use crate::mcmc::{chain_rng, ChainPool, MarkovChain, SampleEnsemble, SamplerConfig, StartState};
use crate::par;
use crate::variational::{constrain_gradient, ParamMask, Tying};

/// Configurations sharing one geometry, with a note on where they came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    geometry: LatticeGeometry,
    samples: Vec<FieldConfiguration>,
    source: String,
}

impl Dataset {
    pub fn new(geometry: &LatticeGeometry, samples: Vec<FieldConfiguration>, source: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        for s in &samples {
            check_len("dataset sample", geometry.volume(), s.len())?;
        }
        Ok(Dataset {
            geometry: geometry.clone(),
            samples,
            source: source.into(),
        })
    }

    /// Every site of every sample drawn independently from `N(μ, σ²)`.
    pub fn gaussian(geometry: &LatticeGeometry, n_samples: usize, mean: f64, std_dev: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(mean, std_dev)
            .map_err(|e| Error::InvalidParameter(format!("gaussian dataset: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n_samples)
            .map(|_| FieldConfiguration::new((0..geometry.volume()).map(|_| normal.sample(&mut rng)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(geometry, samples, format!("gaussian mean={mean} std={std_dev} n={n_samples} seed={seed}"))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[FieldConfiguration] {
        &self.samples
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geometry
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

/// Maps a grey level `v ∈ [0, 255]` to `φ = 2v/255 − 1`.
pub fn pixel_to_field(v: u8) -> f64 {
    2.0 * f64::from(v) / 255.0 - 1.0
}

/// Inverse of [`pixel_to_field`], clamped to `[0, 255]` and rounded.
pub fn field_to_pixel(phi: f64) -> u8 {
    ((phi + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn image_to_configuration(pixels: &[u8]) -> Result<FieldConfiguration> {
    FieldConfiguration::new(pixels.iter().map(|&v| pixel_to_field(v)).collect())
}

pub fn configuration_to_image(config: &FieldConfiguration) -> Vec<u8> {
    config.values().iter().map(|&phi| field_to_pixel(phi)).collect()
}

const CHUNK: usize = 256;

/// Sample mean of `∂S/∂θ` over configurations, as a coupling-shaped vector.
pub fn mean_sufficient_statistics(samples: &[FieldConfiguration], geometry: &LatticeGeometry) -> Result<CouplingSet> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    for s in samples {
        check_len("configuration", geometry.volume(), s.len())?;
    }
    let template = CouplingSet::zeros(geometry);
    let np = template.len();
    let parts = par::map_chunks(samples.len(), CHUNK, |range| {
        let mut g = template.clone();
        let mut acc = vec![0.0; np];
        for l in range {
            fill_action_gradient(samples[l].values(), geometry, &mut g);
            for (a, x) in acc.iter_mut().zip(g.iter()) {
                *a += x;
            }
        }
        acc
    });
    let mut total = vec![0.0; np];
    for p in parts {
        for (t, x) in total.iter_mut().zip(p) {
            *t += x;
        }
    }
    let n = samples.len() as f64;
    total.iter_mut().for_each(|x| *x /= n);
    CouplingSet::from_flat(geometry, &total)
}

fn moment_difference(
    batch: &[FieldConfiguration],
    model: &[FieldConfiguration],
    geometry: &LatticeGeometry,
) -> Result<CouplingSet> {
    if batch.is_empty() {
        return Err(Error::Empty("data batch"));
    }
    let mut grad = mean_sufficient_statistics(batch, geometry)?;
    grad.axpy(-1.0, &mean_sufficient_statistics(model, geometry)?);
    Ok(grad)
}

/// `⟨∂S/∂θ⟩_batch − ⟨∂S/∂θ⟩_model`; descending along it raises the data
/// likelihood.
pub fn data_gradient(
    batch: &[FieldConfiguration],
    model_ensemble: &SampleEnsemble,
    geometry: &LatticeGeometry,
) -> Result<CouplingSet> {
    moment_difference(batch, model_ensemble.configs(), geometry)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodConfig {
    pub learning_rate: f64,
    pub n_chains: usize,
    /// Sweeps each persistent chain advances per epoch.
    pub cd_steps: usize,
    /// Sweeps run on the fresh chains before the first epoch.
    pub burn_in_sweeps: usize,
    /// `None` uses the full dataset when it has at most 10⁴ samples and
    /// batches of 10⁴ otherwise.
    pub batch_size: Option<usize>,
    pub tying: Tying,
    pub trainable: ParamMask,
    pub proposal_width: f64,
    pub adapt_proposal: bool,
    pub start: StartState,
    /// Add the `φ → −φ` move to every chain sweep.
    pub global_flip: bool,
    /// Cap on the magnitude of each component of `η · gradient`.
    pub step_clip: Option<f64>,
    pub gradient_ceiling: f64,
    pub b_floor: f64,
    pub rng_seed: u64,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        LikelihoodConfig {
            learning_rate: 1e-2,
            n_chains: 64,
            cd_steps: 10,
            burn_in_sweeps: 1000,
            batch_size: None,
            tying: Tying::Inhomogeneous,
            trainable: ParamMask::all(),
            proposal_width: 1.0,
            adapt_proposal: true,
            start: StartState::Hot,
            global_flip: false,
            step_clip: None,
            gradient_ceiling: 1e8,
            b_floor: 1e-6,
            rng_seed: 0,
        }
    }
}

const FULL_BATCH_LIMIT: usize = 10_000;

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be finite and non-negative".into()));
        }
        if self.n_chains == 0 || self.cd_steps == 0 {
            return Err(Error::InvalidParameter("n_chains and cd_steps must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
        }
        if self.step_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidParameter("step_clip must be positive".into()));
        }
        if !(self.b_floor > 0.0) {
            return Err(Error::InvalidParameter("b_floor must be positive".into()));
        }
        self.sampler().validate()
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            burn_in_sweeps: self.burn_in_sweeps,
            proposal_width: self.proposal_width,
            adapt_proposal: self.adapt_proposal,
            rng_seed: self.rng_seed,
            n_chains: self.n_chains,
            start: self.start.clone(),
            global_flip: self.global_flip,
            ..SamplerConfig::default()
        }
    }

    fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(FULL_BATCH_LIMIT).min(n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodRecord {
    pub epoch: usize,
    /// `⟨S⟩_batch − ⟨S⟩_model` before the update, the contrastive gap that
    /// tracks the loss up to the unknown `ln Z`.
    pub loss: f64,
    pub gradient_norm: f64,
    /// Family means `[w, a, b, r]` after the update.
    pub means: [f64; 4],
    pub digest: String,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct LikelihoodTrainState {
    pub couplings: CouplingSet,
    pub chains: ChainPool,
    pub epoch: usize,
    pub learning_rate: f64,
    pub cd_steps: usize,
    pub history: Vec<LikelihoodRecord>,
    /// Position in the current pass over the shuffled data.
    pub batch_cursor: usize,
    pub order: Vec<usize>,
    pub batch_rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct LikelihoodReport {
    pub final_couplings: CouplingSet,
    pub loss_trace: Vec<f64>,
    pub history: Vec<LikelihoodRecord>,
}

/// Epoch-by-epoch driver; [`train_on_data`] runs it to completion.
pub struct LikelihoodTrainer<'d> {
    dataset: &'d Dataset,
    config: LikelihoodConfig,
    state: LikelihoodTrainState,
}

/// Stream reserved for mini-batch shuffling, disjoint from the chain streams.
const BATCH_STREAM: u64 = u64::MAX;

impl<'d> LikelihoodTrainer<'d> {
    pub fn new(dataset: &'d Dataset, initial: CouplingSet, config: LikelihoodConfig) -> Result<Self> {
        config.validate()?;
        let geometry = dataset.geometry();
        initial.validate(geometry)?;
        let mut chains = ChainPool::new(geometry, &config.sampler(), 0)?;
        chains.advance(&initial, geometry, config.burn_in_sweeps, config.adapt_proposal);
        let state = LikelihoodTrainState {
            couplings: initial,
            chains,
            epoch: 0,
            learning_rate: config.learning_rate,
            cd_steps: config.cd_steps,
            history: Vec::new(),
            batch_cursor: 0,
            order: (0..dataset.len()).collect(),
            batch_rng: chain_rng(config.rng_seed, BATCH_STREAM),
        };
        Ok(LikelihoodTrainer { dataset, config, state })
    }

    pub fn resume(dataset: &'d Dataset, state: LikelihoodTrainState, config: LikelihoodConfig) -> Result<Self> {
        config.validate()?;
        state.couplings.validate(dataset.geometry())?;
        if state.order.len() != dataset.len() || state.chains.is_empty() {
            return Err(Error::InvalidParameter("saved state does not match the dataset".into()));
        }
        Ok(LikelihoodTrainer { dataset, config, state })
    }

    pub fn state(&self) -> &LikelihoodTrainState {
        &self.state
    }

    pub fn into_state(self) -> LikelihoodTrainState {
        self.state
    }

    fn next_batch(&mut self) -> Vec<FieldConfiguration> {
        let n = self.dataset.len();
        let size = self.config.effective_batch(n);
        if size == n {
            return self.dataset.samples().to_vec();
        }
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.state.batch_cursor == 0 {
                self.state.order.shuffle(&mut self.state.batch_rng);
            }
            batch.push(self.dataset.samples()[self.state.order[self.state.batch_cursor]].clone());
            self.state.batch_cursor = (self.state.batch_cursor + 1) % n;
        }
        batch
    }

    pub fn step(&mut self) -> Result<&LikelihoodRecord> {
        let geometry = self.dataset.geometry().clone();
        let epoch = self.state.epoch;
        let couplings = self.state.couplings.clone();
        self.state
            .chains
            .advance(&couplings, &geometry, self.state.cd_steps, self.config.adapt_proposal);
        let model: Vec<FieldConfiguration> = self.state.chains.chains.iter().map(|c| c.config.clone()).collect();

        let full = self.config.effective_batch(self.dataset.len()) == self.dataset.len();
        let batch_storage;
        let batch: &[FieldConfiguration] = if full {
            self.dataset.samples()
        } else {
            batch_storage = self.next_batch();
            &batch_storage
        };

        let mean_action = |xs: &[FieldConfiguration]| {
            xs.iter().map(|c| couplings.evaluate(c.values(), &geometry)).sum::<f64>() / xs.len() as f64
        };
        let loss = mean_action(batch) - mean_action(&model);
        let mut grad = moment_difference(batch, &model, &geometry)?;
        constrain_gradient(&mut grad, self.config.tying, self.config.trainable);
        let norm = grad.norm();
        if !(norm <= self.config.gradient_ceiling) {
            return Err(Error::Divergence {
                epoch,
                norm,
                ceiling: self.config.gradient_ceiling,
            });
        }
        grad.scale(self.state.learning_rate);
        if let Some(clip) = self.config.step_clip {
            grad.iter_mut().for_each(|g| *g = g.clamp(-clip, clip));
        }
        let c = &mut self.state.couplings;
        c.axpy(-1.0, &grad);
        c.b.iter_mut().for_each(|b| *b = b.max(self.config.b_floor));

        self.state.epoch += 1;
        self.state.history.push(LikelihoodRecord {
            epoch,
            loss,
            gradient_norm: norm,
            means: c.family_means(),
            digest: c.digest(),
        });
        Ok(self.state.history.last().unwrap())
    }

    pub fn report(&self) -> LikelihoodReport {
        LikelihoodReport {
            final_couplings: self.state.couplings.clone(),
            loss_trace: self.state.history.iter().map(|r| r.loss).collect(),
            history: self.state.history.clone(),
        }
    }
}

/// Runs `epochs` epochs of persistent-chain likelihood training.
pub fn train_on_data(
    dataset: &Dataset,
    initial: CouplingSet,
    config: &LikelihoodConfig,
    epochs: usize,
) -> Result<LikelihoodReport> {
    if epochs == 0 {
        return Err(Error::InvalidParameter("epochs must be at least 1".into()));
    }
    let mut trainer = LikelihoodTrainer::new(dataset, initial, config.clone())?;
    for _ in 0..epochs {
        trainer.step()?;
    }
    Ok(trainer.report())
}

/// Snapshots of a single Metropolis chain started at `start`, taken after each
/// requested number of sweeps (in the order given). The proposal width is held
/// fixed.
pub fn equilibration_rollout(
    couplings: &CouplingSet,
    geometry: &LatticeGeometry,
    start: &FieldConfiguration,
    checkpoints: &[usize],
    proposal_width: f64,
    seed: u64,
) -> Result<Vec<FieldConfiguration>> {
    couplings.validate(geometry)?;
    check_len("start configuration", geometry.volume(), start.len())?;
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by_key(|&k| checkpoints[k]);
    let mut chain = MarkovChain::from_parts(start.clone(), proposal_width, chain_rng(seed, 0));
    let mut done = 0;
    let mut out = vec![start.clone(); checkpoints.len()];
    for k in order {
        chain.run(couplings, geometry, checkpoints[k] - done);
        done = checkpoints[k];
        out[k] = chain.config.clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_square_lattice;
    use crate::mcmc::{sample_ensemble, EnsembleSource};
    use crate::oracle::{exact_expectations, Boltzmann, QuadratureSpec};
    use crate::stats;

    fn sampler(n: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            burn_in_sweeps: 500,
            thinning_sweeps: 2,
            n_samples: n,
            rng_seed: seed,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn same_samples_give_zero_gradient() {
        let g = build_square_lattice(4, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.2, 0.6, 0.1, 0.05);
        let ens = sample_ensemble(&c, &g, &sampler(300, 1)).unwrap();
        let grad = data_gradient(ens.configs(), &ens, &g).unwrap();
        assert!(grad.iter().all(|&x| x == 0.0));
        assert!(matches!(data_gradient(&[], &ens, &g), Err(Error::Empty(_))));
    }

    #[test]
    fn r_component_is_site_mean_difference() {
        let g = build_square_lattice(2, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.1, 0.7, 0.1, 0.0);
        let ens = sample_ensemble(&c, &g, &sampler(200, 2)).unwrap();
        let data = Dataset::gaussian(&g, 50, 0.3, 0.2, 4).unwrap();
        let grad = data_gradient(data.samples(), &ens, &g).unwrap();
        for i in 0..g.volume() {
            let site = |xs: &[FieldConfiguration]| xs.iter().map(|x| x.values()[i]).sum::<f64>() / xs.len() as f64;
            let expected = site(data.samples()) - site(ens.configs());
            assert!((grad.r[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn model_moments_match_oracle() {
        let g = build_square_lattice(2, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.3, 0.8, 0.2, 0.1);
        let ens = sample_ensemble(&c, &g, &SamplerConfig { n_chains: 4, ..sampler(20_000, 3) }).unwrap();
        let data = Dataset::gaussian(&g, 100, 0.0, 0.5, 5).unwrap();
        let grad = data_gradient(data.samples(), &ens, &g).unwrap();
        let data_mean = mean_sufficient_statistics(data.samples(), &g).unwrap();
        let template = CouplingSet::zeros(&g);
        let np = template.len();
        let exact = exact_expectations(Boltzmann::Model(&c), &g, &QuadratureSpec::new(4.0, 41), np, |phi, out| {
            let mut s = template.clone();
            fill_action_gradient(phi, &g, &mut s);
            out.iter_mut().zip(s.iter()).for_each(|(o, x)| *o = *x);
        })
        .unwrap();
        let mut scratch = template.clone();
        for k in 0..np {
            let series: Vec<f64> = ens
                .configs()
                .iter()
                .map(|x| {
                    fill_action_gradient(x.values(), &g, &mut scratch);
                    scratch.to_flat()[k]
                })
                .collect();
            let err = stats::mean_with_error(&series).unwrap().std_error;
            let expected = data_mean.to_flat()[k] - exact.values[k].re;
            let got = grad.to_flat()[k];
            assert!((got - expected).abs() < 3.5 * err, "component {k}: {got} vs {expected} ± {err}");
        }
    }

    #[test]
    fn sign_moves_towards_data_moment() {
        let g = build_square_lattice(4, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.1, 0.6, 0.1, 0.0);
        let ens = sample_ensemble(&c, &g, &sampler(400, 6)).unwrap();
        let shifted: Vec<FieldConfiguration> = ens
            .configs()
            .iter()
            .map(|x| FieldConfiguration::new(x.values().iter().map(|v| v * 1.2).collect()).unwrap())
            .collect();
        let mut grad = data_gradient(&shifted, &ens, &g).unwrap();
        constrain_gradient(&mut grad, Tying::Homogeneous, ParamMask::default());
        // wider data: lower a and b so the model spreads out
        assert!(grad.a[0] > 0.0 && grad.b[0] > 0.0);
        let offset: Vec<FieldConfiguration> = ens
            .configs()
            .iter()
            .map(|x| FieldConfiguration::new(x.values().iter().map(|v| v + 0.3).collect()).unwrap())
            .collect();
        let mut grad = data_gradient(&offset, &ens, &g).unwrap();
        constrain_gradient(&mut grad, Tying::Homogeneous, ParamMask::all());
        // data shifted up: r must decrease, which makes positive φ more likely
        assert!(grad.r[0] > 0.0);
    }

    #[test]
    fn pixel_mapping_round_trip() {
        for v in 0..=255u8 {
            assert_eq!(field_to_pixel(pixel_to_field(v)), v);
        }
        assert_eq!(pixel_to_field(0), -1.0);
        assert_eq!(pixel_to_field(255), 1.0);
        assert_eq!(field_to_pixel(3.0), 255);
    }

    #[test]
    fn rollout_checkpoints() {
        let g = build_square_lattice(4, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.1, 0.6, 0.1, 0.0);
        let start = FieldConfiguration::constant(g.volume(), 0.25);
        let snaps = equilibration_rollout(&c, &g, &start, &[0], 0.5, 1).unwrap();
        assert_eq!(snaps[0], start);
        let a = equilibration_rollout(&c, &g, &start, &[10, 1, 50], 0.5, 1).unwrap();
        let b = equilibration_rollout(&c, &g, &start, &[1, 10, 50], 0.5, 1).unwrap();
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[0]);
        assert_eq!(a[2], b[2]);
        assert_ne!(b[0], start);
    }

    #[test]
    fn training_is_deterministic_and_minibatches_cycle() {
        let g = build_square_lattice(2, true).unwrap();
        let data = Dataset::gaussian(&g, 30, 0.2, 0.3, 8).unwrap();
        let config = LikelihoodConfig {
            n_chains: 8,
            burn_in_sweeps: 50,
            batch_size: Some(7),
            tying: Tying::Homogeneous,
            ..LikelihoodConfig::default()
        };
        let init = CouplingSet::homogeneous(&g, 0.0, 0.5, 0.1, 0.0);
        let a = train_on_data(&data, init.clone(), &config, 20).unwrap();
        let b = train_on_data(&data, init.clone(), &config, 20).unwrap();
        assert_eq!(a.final_couplings, b.final_couplings);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.loss_trace.len(), 20);
        assert!(train_on_data(&data, init, &config, 0).is_err());
    }

    #[test]
    fn clip_bounds_each_step() {
        let g = build_square_lattice(2, true).unwrap();
        let data = Dataset::gaussian(&g, 100, -0.5, 0.05, 1).unwrap();
        let config = LikelihoodConfig {
            learning_rate: 10.0,
            n_chains: 4,
            burn_in_sweeps: 10,
            step_clip: Some(0.01),
            ..LikelihoodConfig::default()
        };
        let init = CouplingSet::homogeneous(&g, 0.0, 0.5, 0.1, 0.0);
        let report = train_on_data(&data, init.clone(), &config, 1).unwrap();
        for (x, y) in report.final_couplings.iter().zip(init.iter()) {
            assert!((x - y).abs() <= 0.01 + 1e-15);
        }
    }

    #[test]
    fn round_trip_recovers_generator_couplings() {
        let g = build_square_lattice(4, true).unwrap();
        for (k, (w, a, b)) in [(0.15, 0.7, 0.1), (-0.1, 0.5, 0.2), (0.25, 0.9, 0.05)].into_iter().enumerate() {
            let truth = CouplingSet::homogeneous(&g, w, a, b, 0.0);
            let ens = sample_ensemble(&truth, &g, &SamplerConfig { n_chains: 4, ..sampler(10_000, 20 + k as u64) }).unwrap();
            let data = Dataset::new(&g, ens.configs().to_vec(), "generator").unwrap();
            let config = LikelihoodConfig {
                learning_rate: 2e-3,
                tying: Tying::Homogeneous,
                trainable: ParamMask::default(),
                rng_seed: k as u64,
                ..LikelihoodConfig::default()
            };
            let init = CouplingSet::homogeneous(&g, 0.0, 0.6, 0.15, 0.0);
            let report = train_on_data(&data, init, &config, 3000).unwrap();
            // average the tail to suppress the chain noise of single epochs
            let tail = &report.history[2000..];
            let mean = |f: usize| tail.iter().map(|r| r.means[f]).sum::<f64>() / tail.len() as f64;
            for (f, t) in [w, a, b].into_iter().enumerate() {
                assert!((mean(f) - t).abs() < 0.03, "set {k} family {f}: {} vs {t}", mean(f));
            }
        }
        let _ = EnsembleSource::Loaded { digest: String::new() };
    }
}
