//! Local Metropolis sampling of `p(φ) ∝ exp(−S(φ))` and sample ensembles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::{
    action_terms, check_len, Action, CouplingSet, FieldConfiguration, LatticeGeometry, TargetActionSpec, TermSums,
};
use crate::par;
use crate::stats::{self, ObservableEstimate};

/// Target acceptance rate for burn-in adaptation.
const TARGET_ACCEPTANCE: f64 = 0.6;
const ADAPTATION_RATE: f64 = 0.5;
const MIN_WIDTH: f64 = 1e-6;
const MAX_WIDTH: f64 = 1e3;

/// Initial configuration of each chain.
#[derive(Debug, Clone, PartialEq)]
pub enum StartState {
    /// Independent uniform values in `[−1, 1)`.
    Hot,
    /// Every site set to the given value.
    Cold(f64),
    Given(FieldConfiguration),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub burn_in_sweeps: usize,
    pub thinning_sweeps: usize,
    pub n_samples: usize,
    pub proposal_width: f64,
    /// Tune the width towards 60% acceptance during burn-in only.
    pub adapt_proposal: bool,
    pub rng_seed: u64,
    /// Independent chains; samples are split as evenly as possible.
    pub n_chains: usize,
    pub start: StartState,
    /// After each sweep, propose `φ → −φ` with probability ½.
    pub global_flip: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            burn_in_sweeps: 10_000,
            thinning_sweeps: 10,
            n_samples: 10_000,
            proposal_width: 1.0,
            adapt_proposal: true,
            rng_seed: 0,
            n_chains: 1,
            start: StartState::Hot,
            global_flip: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidParameter("n_samples must be at least 1".into()));
        }
        if !(self.proposal_width > 0.0 && self.proposal_width.is_finite()) {
            return Err(Error::InvalidParameter("proposal_width must be positive".into()));
        }
        if self.thinning_sweeps == 0 {
            return Err(Error::InvalidParameter("thinning_sweeps must be at least 1".into()));
        }
        if self.n_chains == 0 {
            return Err(Error::InvalidParameter("n_chains must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent generator for chain `chain_id` of a run seeded with `seed`.
pub fn chain_rng(seed: u64, chain_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain_id);
    rng
}

/// One Metropolis sweep: every site in index order receives a uniform proposal
/// `φ_i + U(−δ, δ)`, accepted with probability `min(1, e^{−ΔS})`.
///
/// Returns the fraction of accepted proposals. Panics if the configuration
/// does not match the geometry.
pub fn metropolis_sweep<A: Action + ?Sized, R: Rng + ?Sized>(
    config: &mut FieldConfiguration,
    action: &A,
    geometry: &LatticeGeometry,
    proposal_width: f64,
    rng: &mut R,
) -> f64 {
    assert_eq!(config.len(), geometry.volume(), "configuration does not match geometry");
    let phi = config.values_mut();
    let mut accepted = 0usize;
    for site in 0..phi.len() {
        let proposal = phi[site] + proposal_width * (2.0 * rng.random::<f64>() - 1.0);
        let delta = action.local_delta(phi, site, proposal, geometry);
        if delta <= 0.0 || rng.random::<f64>() < (-delta).exp() {
            phi[site] = proposal;
            accepted += 1;
        }
    }
    accepted as f64 / phi.len().max(1) as f64
}

/// Proposes the global reflection `φ → −φ` with probability ½.
pub fn global_flip_move<A: Action + ?Sized, R: Rng + ?Sized>(
    config: &mut FieldConfiguration,
    action: &A,
    geometry: &LatticeGeometry,
    rng: &mut R,
) -> bool {
    if rng.random::<f64>() >= 0.5 {
        return false;
    }
    let delta = action.reflection_delta(config.values(), geometry);
    if delta <= 0.0 || rng.random::<f64>() < (-delta).exp() {
        config.values_mut().iter_mut().for_each(|v| *v = -*v);
        true
    } else {
        false
    }
}

/// A persistent Metropolis chain with its own generator and proposal width.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    pub config: FieldConfiguration,
    pub proposal_width: f64,
    pub global_flip: bool,
    rng: ChaCha8Rng,
    sweeps: u64,
    accepted_sum: f64,
}

impl MarkovChain {
    pub fn new(
        geometry: &LatticeGeometry,
        start: &StartState,
        proposal_width: f64,
        seed: u64,
        chain_id: u64,
    ) -> Result<Self> {
        let mut rng = chain_rng(seed, chain_id);
        let config = match start {
            StartState::Hot => FieldConfiguration::new(
                (0..geometry.volume()).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect(),
            )?,
            StartState::Cold(v) => FieldConfiguration::new(vec![*v; geometry.volume()])?,
            StartState::Given(c) => {
                check_len("start configuration", geometry.volume(), c.len())?;
                c.clone()
            }
        };
        Ok(MarkovChain {
            config,
            proposal_width,
            global_flip: false,
            rng,
            sweeps: 0,
            accepted_sum: 0.0,
        })
    }

    /// Restores a chain from a saved generator position.
    pub fn from_parts(config: FieldConfiguration, proposal_width: f64, rng: ChaCha8Rng) -> Self {
        MarkovChain {
            config,
            proposal_width,
            global_flip: false,
            rng,
            sweeps: 0,
            accepted_sum: 0.0,
        }
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn sweep<A: Action + ?Sized>(&mut self, action: &A, geometry: &LatticeGeometry) -> f64 {
        let acc = metropolis_sweep(&mut self.config, action, geometry, self.proposal_width, &mut self.rng);
        if self.global_flip {
            global_flip_move(&mut self.config, action, geometry, &mut self.rng);
        }
        self.sweeps += 1;
        self.accepted_sum += acc;
        acc
    }

    pub fn run<A: Action + ?Sized>(&mut self, action: &A, geometry: &LatticeGeometry, sweeps: usize) {
        for _ in 0..sweeps {
            self.sweep(action, geometry);
        }
    }

    /// Sweeps while nudging the proposal width towards the target acceptance.
    pub fn run_adapting<A: Action + ?Sized>(&mut self, action: &A, geometry: &LatticeGeometry, sweeps: usize) {
        for _ in 0..sweeps {
            let acc = self.sweep(action, geometry);
            self.adapt(acc);
        }
    }

    fn adapt(&mut self, acceptance: f64) {
        let w = self.proposal_width * (ADAPTATION_RATE * (acceptance - TARGET_ACCEPTANCE)).exp();
        self.proposal_width = w.clamp(MIN_WIDTH, MAX_WIDTH);
    }

    /// Mean acceptance rate over all sweeps so far.
    pub fn acceptance(&self) -> f64 {
        if self.sweeps == 0 {
            0.0
        } else {
            self.accepted_sum / self.sweeps as f64
        }
    }

    pub fn sweeps(&self) -> u64 {
        self.sweeps
    }
}

/// A set of persistent chains advanced together, used by the training loops.
#[derive(Debug, Clone)]
pub struct ChainPool {
    pub chains: Vec<MarkovChain>,
}

impl ChainPool {
    /// `config.n_chains` fresh chains; `generation` selects a disjoint block of
    /// generator streams so that restarts never reuse a stream.
    pub fn new(geometry: &LatticeGeometry, config: &SamplerConfig, generation: u64) -> Result<Self> {
        config.validate()?;
        let n = config.n_chains as u64;
        let chains = (0..n)
            .map(|c| {
                let mut chain = MarkovChain::new(
                    geometry,
                    &config.start,
                    config.proposal_width,
                    config.rng_seed,
                    generation * n + c,
                )?;
                chain.global_flip = config.global_flip;
                Ok(chain)
            })
            .collect::<Result<_>>()?;
        Ok(ChainPool { chains })
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    /// Runs every chain for `sweeps` sweeps, optionally adapting proposal widths.
    pub fn advance<A: Action + ?Sized>(&mut self, action: &A, geometry: &LatticeGeometry, sweeps: usize, adapt: bool) {
        par::for_each_mut(&mut self.chains, |_, chain| {
            if adapt {
                chain.run_adapting(action, geometry, sweeps);
            } else {
                chain.run(action, geometry, sweeps);
            }
        });
    }

    /// Draws `n_samples` configurations split over the chains, `thinning`
    /// sweeps apart, concatenated in chain order.
    pub fn collect<A: Action + ?Sized>(
        &mut self,
        action: &A,
        geometry: &LatticeGeometry,
        n_samples: usize,
        thinning: usize,
    ) -> Vec<FieldConfiguration> {
        let nc = self.chains.len();
        let mut parts: Vec<Vec<FieldConfiguration>> = vec![Vec::new(); nc];
        let mut work: Vec<(&mut MarkovChain, &mut Vec<FieldConfiguration>)> =
            self.chains.iter_mut().zip(parts.iter_mut()).collect();
        par::for_each_mut(&mut work, |c, (chain, out)| {
            let n = n_samples / nc + usize::from(c < n_samples % nc);
            out.reserve(n);
            for _ in 0..n {
                chain.run(action, geometry, thinning);
                out.push(chain.config.clone());
            }
        });
        parts.into_iter().flatten().collect()
    }

    pub fn mean_proposal_width(&self) -> f64 {
        self.chains.iter().map(|c| c.proposal_width).sum::<f64>() / self.chains.len().max(1) as f64
    }
}

/// Where an ensemble came from.
#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleSource {
    Couplings(CouplingSet),
    /// Direct simulation of the real part of a target action.
    Target(TargetActionSpec),
    /// Read back from disk; only the digest of the generating action is known.
    Loaded { digest: String },
}

/// Configurations with cached actions and term sums.
#[derive(Debug, Clone)]
pub struct SampleEnsemble {
    geometry: LatticeGeometry,
    configs: Vec<FieldConfiguration>,
    actions: Vec<f64>,
    terms: Vec<TermSums>,
    source: EnsembleSource,
    seed: u64,
    chain_lengths: Vec<usize>,
    acceptance: f64,
}

impl SampleEnsemble {
    /// Builds an ensemble from configurations, computing the cached values.
    pub fn from_configs<A: Action + ?Sized>(
        geometry: &LatticeGeometry,
        configs: Vec<FieldConfiguration>,
        action: &A,
        source: EnsembleSource,
    ) -> Result<Self> {
        action.check(geometry)?;
        let mut actions = Vec::with_capacity(configs.len());
        let mut terms = Vec::with_capacity(configs.len());
        for c in &configs {
            terms.push(action_terms(c, geometry)?);
            actions.push(action.evaluate(c.values(), geometry));
        }
        let n = configs.len();
        Ok(SampleEnsemble {
            geometry: geometry.clone(),
            configs,
            actions,
            terms,
            source,
            seed: 0,
            chain_lengths: vec![n],
            acceptance: 0.0,
        })
    }

    /// Assembles an ensemble from already-cached values (for example one read
    /// from disk).
    pub fn from_cached(
        geometry: &LatticeGeometry,
        configs: Vec<FieldConfiguration>,
        actions: Vec<f64>,
        terms: Vec<TermSums>,
        source: EnsembleSource,
        seed: u64,
    ) -> Result<Self> {
        check_len("cached actions", configs.len(), actions.len())?;
        check_len("cached term sums", configs.len(), terms.len())?;
        for c in &configs {
            check_len("configuration", geometry.volume(), c.len())?;
        }
        let n = configs.len();
        Ok(SampleEnsemble {
            geometry: geometry.clone(),
            configs,
            actions,
            terms,
            source,
            seed,
            chain_lengths: vec![n],
            acceptance: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geometry
    }

    pub fn configs(&self) -> &[FieldConfiguration] {
        &self.configs
    }

    /// Action of the generating distribution, one per sample.
    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn terms(&self) -> &[TermSums] {
        &self.terms
    }

    pub fn source(&self) -> &EnsembleSource {
        &self.source
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of samples contributed by each chain, in concatenation order.
    pub fn chain_lengths(&self) -> &[usize] {
        &self.chain_lengths
    }

    /// Mean Metropolis acceptance over the retained part of the run.
    pub fn acceptance(&self) -> f64 {
        self.acceptance
    }
}

/// Samples the model action `S(φ; θ)`.
pub fn sample_ensemble(
    couplings: &CouplingSet,
    geometry: &LatticeGeometry,
    config: &SamplerConfig,
) -> Result<SampleEnsemble> {
    sample_action(couplings, EnsembleSource::Couplings(couplings.clone()), geometry, config)
}

/// Samples the real part of a target action directly.
pub fn sample_target_ensemble(
    target: &TargetActionSpec,
    geometry: &LatticeGeometry,
    config: &SamplerConfig,
) -> Result<SampleEnsemble> {
    sample_action(target, EnsembleSource::Target(*target), geometry, config)
}

/// Burn-in, then one retained configuration per thinning interval, on
/// `n_chains` independent chains run in parallel and concatenated in order.
pub fn sample_action<A: Action + ?Sized>(
    action: &A,
    source: EnsembleSource,
    geometry: &LatticeGeometry,
    config: &SamplerConfig,
) -> Result<SampleEnsemble> {
    config.validate()?;
    action.check(geometry)?;
    let nc = config.n_chains;
    let per_chain = |c: usize| config.n_samples / nc + usize::from(c < config.n_samples % nc);

    let runs = par::map_indexed(nc, |c| -> Result<_> {
        let mut chain = MarkovChain::new(geometry, &config.start, config.proposal_width, config.rng_seed, c as u64)?;
        chain.global_flip = config.global_flip;
        if config.adapt_proposal {
            chain.run_adapting(action, geometry, config.burn_in_sweeps);
        } else {
            chain.run(action, geometry, config.burn_in_sweeps);
        }
        let burn_sweeps = chain.sweeps();
        let burn_acc = chain.acceptance() * burn_sweeps as f64;
        let n = per_chain(c);
        let mut configs = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        let mut terms = Vec::with_capacity(n);
        for _ in 0..n {
            chain.run(action, geometry, config.thinning_sweeps);
            actions.push(action.evaluate(chain.config.values(), geometry));
            terms.push(action_terms(&chain.config, geometry)?);
            configs.push(chain.config.clone());
        }
        let retained_sweeps = chain.sweeps() - burn_sweeps;
        let acc = (chain.acceptance() * chain.sweeps() as f64 - burn_acc) / retained_sweeps.max(1) as f64;
        Ok((configs, actions, terms, acc))
    });

    let mut ensemble = SampleEnsemble {
        geometry: geometry.clone(),
        configs: Vec::with_capacity(config.n_samples),
        actions: Vec::with_capacity(config.n_samples),
        terms: Vec::with_capacity(config.n_samples),
        source,
        seed: config.rng_seed,
        chain_lengths: Vec::with_capacity(nc),
        acceptance: 0.0,
    };
    for run in runs {
        let (configs, actions, terms, acc) = run?;
        ensemble.chain_lengths.push(configs.len());
        ensemble.acceptance += acc * configs.len() as f64;
        ensemble.configs.extend(configs);
        ensemble.actions.extend(actions);
        ensemble.terms.extend(terms);
    }
    ensemble.acceptance /= ensemble.len() as f64;
    Ok(ensemble)
}

/// Mean and binned-jackknife error of a per-configuration observable.
pub fn estimate_observable(
    ensemble: &SampleEnsemble,
    observable: impl Fn(&FieldConfiguration) -> f64,
) -> Result<ObservableEstimate> {
    let values: Vec<f64> = ensemble.configs().iter().map(observable).collect();
    stats::mean_with_error(&values)
}

/// Volume-averaged field `m = Σφ_i / V`.
pub fn magnetization(config: &FieldConfiguration) -> f64 {
    if config.is_empty() {
        return 0.0;
    }
    magnetization_sum(config) / config.len() as f64
}

/// Unnormalised field sum `Σφ_i`.
pub fn magnetization_sum(config: &FieldConfiguration) -> f64 {
    config.values().iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_square_lattice, model_action};
    use crate::oracle::{Density1d, QuadratureSpec};
    use crate::stats::ks_statistic;

    fn quick(n: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            burn_in_sweeps: 1000,
            thinning_sweeps: 2,
            n_samples: n,
            rng_seed: seed,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn zero_couplings_accept_everything() {
        let g = build_square_lattice(4, true).unwrap();
        let zero = CouplingSet::zeros(&g);
        let mut phi = FieldConfiguration::zeros(16);
        let mut rng = chain_rng(1, 0);
        for _ in 0..10 {
            assert_eq!(metropolis_sweep(&mut phi, &zero, &g, 0.7, &mut rng), 1.0);
        }
    }

    #[test]
    fn acceptance_falls_with_width() {
        let g = build_square_lattice(4, true).unwrap();
        let sharp = CouplingSet::homogeneous(&g, 0.2, 3.0, 2.0, 0.0);
        let phi0 = FieldConfiguration::constant(16, 0.1);
        let mut last = 1.1;
        for width in [0.05, 0.5, 2.0, 10.0, 100.0] {
            let mut total = 0.0;
            for rep in 0..200 {
                let mut phi = phi0.clone();
                total += metropolis_sweep(&mut phi, &sharp, &g, width, &mut chain_rng(rep, 0));
            }
            let acc = total / 200.0;
            assert!(acc < last, "width {width}: {acc} !< {last}");
            last = acc;
        }
        assert!(last < 0.05);
    }

    #[test]
    fn single_site_matches_quadrature_density() {
        let g = build_square_lattice(1, false).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.0, 1.0, 1.0, 0.0);
        let cfg = SamplerConfig {
            burn_in_sweeps: 1000,
            thinning_sweeps: 10,
            n_samples: 100_000,
            rng_seed: 17,
            ..SamplerConfig::default()
        };
        let ens = sample_ensemble(&c, &g, &cfg).unwrap();
        let xs: Vec<f64> = ens.configs().iter().map(|c| c.values()[0]).collect();
        let density = Density1d::new(|x| x * x + x.powi(4), &QuadratureSpec::default()).unwrap();
        let d = ks_statistic(&xs, |x| density.cdf(x));
        assert!(d < 0.02, "KS {d}");
    }

    #[test]
    fn deterministic_given_seed() {
        let g = build_square_lattice(4, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.3, 0.8, 0.2, 0.05);
        let cfg = SamplerConfig {
            n_chains: 3,
            ..quick(50, 99)
        };
        let a = sample_ensemble(&c, &g, &cfg).unwrap();
        let b = sample_ensemble(&c, &g, &cfg).unwrap();
        assert_eq!(a.configs(), b.configs());
        assert_eq!(a.actions(), b.actions());
        assert_eq!(a.chain_lengths(), &[17, 17, 16]);
        let other = sample_ensemble(&c, &g, &SamplerConfig { rng_seed: 100, ..cfg }).unwrap();
        assert_ne!(a.configs(), other.configs());
    }

    #[test]
    fn cached_actions_match_recomputation() {
        let g = build_square_lattice(4, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.4, 0.9, 0.3, -0.2);
        let ens = sample_ensemble(&c, &g, &quick(300, 5)).unwrap();
        for (phi, (&s, t)) in ens.configs().iter().zip(ens.actions().iter().zip(ens.terms())) {
            assert!((model_action(phi, &c, &g).unwrap() - s).abs() < 1e-10);
            assert_eq!(*t, action_terms(phi, &g).unwrap());
        }
    }

    #[test]
    fn gaussian_marginal_has_unit_variance() {
        let g = build_square_lattice(2, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.0, 0.5, 0.0, 0.0);
        let ens = sample_ensemble(&c, &g, &quick(40_000, 3)).unwrap();
        let sq = estimate_observable(&ens, |c| c.values()[0].powi(2)).unwrap();
        assert!((sq.mean - 1.0).abs() < 3.0 * sq.std_error, "{sq:?}");
        let m = estimate_observable(&ens, magnetization).unwrap();
        assert!(m.mean.abs() < 3.0 * m.std_error, "{m:?}");
        for site in 0..4 {
            let e = estimate_observable(&ens, |c| c.values()[site]).unwrap();
            assert!(e.mean.abs() < 3.0 * e.std_error);
        }
    }

    #[test]
    fn adaptation_stays_in_burn_in() {
        let g = build_square_lattice(4, true).unwrap();
        let c = CouplingSet::homogeneous(&g, 0.1, 2.0, 1.0, 0.0);
        let cfg = SamplerConfig {
            proposal_width: 20.0,
            ..quick(200, 8)
        };
        let ens = sample_ensemble(&c, &g, &cfg).unwrap();
        assert!(ens.acceptance() > 0.45 && ens.acceptance() < 0.75, "{}", ens.acceptance());
    }

    #[test]
    fn magnetization_examples() {
        assert_eq!(magnetization(&FieldConfiguration::zeros(9)), 0.0);
        assert_eq!(magnetization(&FieldConfiguration::constant(9, 0.75)), 0.75);
        let phi = FieldConfiguration::new(vec![0.3, -1.2, 2.0, 0.4]).unwrap();
        assert_eq!(magnetization(&phi.negated()), -magnetization(&phi));
        assert_eq!(magnetization_sum(&phi), 0.3 - 1.2 + 2.0 + 0.4);
    }

    #[test]
    fn invalid_sampler_configs() {
        let g = build_square_lattice(2, true).unwrap();
        let c = CouplingSet::zeros(&g);
        for bad in [
            SamplerConfig { n_samples: 0, ..quick(1, 0) },
            SamplerConfig { proposal_width: 0.0, ..quick(1, 0) },
            SamplerConfig { n_chains: 0, ..quick(1, 0) },
        ] {
            assert!(sample_ensemble(&c, &g, &bad).is_err());
        }
    }

    #[test]
    fn global_flip_restores_symmetry_in_broken_phase() {
        let g = build_square_lattice(4, true).unwrap();
        // deep double well: local moves alone never leave the starting sector
        let c = CouplingSet::homogeneous(&g, 1.0, -2.0, 0.5, 0.0);
        let base = SamplerConfig {
            start: StartState::Cold(1.0),
            ..quick(4000, 12)
        };
        let stuck = sample_ensemble(&c, &g, &base).unwrap();
        let m = estimate_observable(&stuck, magnetization).unwrap();
        assert!(m.mean > 1.0);
        let flipping = sample_ensemble(&c, &g, &SamplerConfig { global_flip: true, ..base }).unwrap();
        let m = estimate_observable(&flipping, magnetization).unwrap();
        assert!(m.mean.abs() < 3.0 * m.std_error + 0.05, "{m:?}");
    }
}
