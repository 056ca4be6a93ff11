//! Browser bindings for the interactive demo page in `www/`.
//!
//! Every export wraps a plain Rust function so the same code paths run under
//! native tests.

use num_complex::Complex64;
use phi4ml::mcmc::{self, magnetization, StartState};
use phi4ml::reweight::{reweight_observable, ReweightRequest};
use phi4ml::variational::{init_random_couplings_seeded, ParamMask, Tying, VariationalConfig, VariationalTrainer};
use phi4ml::{build_square_lattice, CouplingSet, FieldConfiguration, LatticeGeometry, SamplerConfig, TargetActionSpec, TermSums};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Final configuration of one Metropolis chain after `sweeps` sweeps from a
/// hot start, row-major over an `side × side` periodic lattice.
pub fn sample_field(side: usize, w: f64, a: f64, b: f64, r: f64, sweeps: usize, seed: u64) -> phi4ml::Result<Vec<f64>> {
    let geometry = build_square_lattice(side, true)?;
    let couplings = CouplingSet::homogeneous(&geometry, w, a, b, r);
    let config = SamplerConfig {
        burn_in_sweeps: sweeps,
        n_samples: 1,
        n_chains: 1,
        rng_seed: seed,
        ..SamplerConfig::default()
    };
    let ensemble = mcmc::sample_ensemble(&couplings, &geometry, &config)?;
    Ok(ensemble.configs()[0].values().to_vec())
}

#[wasm_bindgen(js_name = sampleField)]
pub fn sample_field_js(side: usize, w: f64, a: f64, b: f64, r: f64, sweeps: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    sample_field(side, w, a, b, r, sweeps, seed.into()).map_err(js)
}

/// Samples the real four-term reference action once and reweights the
/// magnetization to each `g₄′`, with or without the imaginary term.
///
/// Returns `[g′, ℜ⟨m⟩, σ, ℑ⟨m⟩, σ]` per point, flattened.
pub fn reweight_magnetization(side: usize, n_samples: usize, g_primes: &[f64], complex: bool, seed: u64) -> phi4ml::Result<Vec<f64>> {
    let geometry = build_square_lattice(side, true)?;
    let g = TargetActionSpec::reference_coefficients();
    let base = TargetActionSpec::truncated(g, 4)?;
    let config = SamplerConfig {
        burn_in_sweeps: 1000,
        thinning_sweeps: 5,
        n_samples,
        n_chains: 2,
        rng_seed: seed,
        start: StartState::Cold(2.6),
        ..SamplerConfig::default()
    };
    let ensemble = mcmc::sample_target_ensemble(&base, &geometry, &config)?;
    let request = ReweightRequest::new(4, g, complex, g_primes.to_vec())?;
    let m = |c: &FieldConfiguration, _: &TermSums| Complex64::new(magnetization(c), 0.0);
    let mut out = Vec::with_capacity(5 * g_primes.len());
    for &gp in g_primes {
        let e = reweight_observable(&ensemble, m, &request, gp)?;
        out.extend([gp, e.mean.re, e.std_error_re, e.mean.im, e.std_error_im]);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = reweightMagnetization)]
pub fn reweight_magnetization_js(side: usize, n_samples: usize, g_primes: Vec<f64>, complex: bool, seed: u32) -> Result<Vec<f64>, JsError> {
    reweight_magnetization(side, n_samples, &g_primes, complex, seed.into()).map_err(js)
}

/// Variational training towards the three-term reference action, advanced a
/// few epochs at a time from the page.
#[wasm_bindgen]
pub struct VariationalDemo {
    trainer: VariationalTrainer,
    geometry: LatticeGeometry,
}

impl VariationalDemo {
    pub fn create(side: usize, learning_rate: f64, samples_per_epoch: usize, seed: u64) -> phi4ml::Result<Self> {
        let geometry = build_square_lattice(side, true)?;
        let target = TargetActionSpec::truncated(TargetActionSpec::reference_coefficients(), 3)?;
        let config = VariationalConfig {
            learning_rate,
            sampler: SamplerConfig {
                n_samples: samples_per_epoch,
                burn_in_sweeps: 500,
                n_chains: 1,
                rng_seed: seed,
                ..SamplerConfig::default()
            },
            tying: Tying::Homogeneous,
            ..VariationalConfig::default()
        };
        let init = init_random_couplings_seeded(&geometry, Tying::Homogeneous, ParamMask::default(), seed);
        let trainer = VariationalTrainer::new(init, target, &geometry, config)?;
        Ok(VariationalDemo { trainer, geometry })
    }

    /// Runs `epochs` updates; returns `[epoch, kl, w, a, b]` per epoch, flattened.
    pub fn advance(&mut self, epochs: usize) -> phi4ml::Result<Vec<f64>> {
        let mut out = Vec::with_capacity(5 * epochs);
        for _ in 0..epochs {
            let r = self.trainer.step()?;
            out.extend([r.epoch as f64, r.kl, r.means[0], r.means[1], r.means[2]]);
        }
        Ok(out)
    }

    pub fn lattice_side(&self) -> usize {
        self.geometry.side_length()
    }
}

#[wasm_bindgen]
impl VariationalDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(side: usize, learning_rate: f64, samples_per_epoch: usize, seed: u32) -> Result<VariationalDemo, JsError> {
        Self::create(side, learning_rate, samples_per_epoch, seed.into()).map_err(js)
    }

    pub fn step(&mut self, epochs: usize) -> Result<Vec<f64>, JsError> {
        self.advance(epochs).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        self.lattice_side()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_has_lattice_volume_and_is_seeded() {
        let a = sample_field(6, 0.2, 0.8, 0.2, 0.0, 50, 3).unwrap();
        assert_eq!(a.len(), 36);
        assert_eq!(a, sample_field(6, 0.2, 0.8, 0.2, 0.0, 50, 3).unwrap());
        assert_ne!(a, sample_field(6, 0.2, 0.8, 0.2, 0.0, 50, 4).unwrap());
        assert!(sample_field(1, 0.2, 0.8, 0.2, 0.0, 50, 3).is_err());
    }

    #[test]
    fn reweighting_rows() {
        let rows = reweight_magnetization(2, 400, &[-1.05, -1.0, -0.95], true, 1).unwrap();
        assert_eq!(rows.len(), 15);
        assert!(rows.iter().all(|x| x.is_finite()));
        let plain = reweight_magnetization(2, 400, &[-1.0], false, 1).unwrap();
        assert_eq!(plain[3], 0.0);
    }

    #[test]
    fn training_advances_epochs() {
        let mut demo = VariationalDemo::create(2, 1e-3, 50, 2).unwrap();
        let rows = demo.advance(3).unwrap();
        assert_eq!(rows.len(), 15);
        assert_eq!(rows[10], 2.0);
        assert_eq!(demo.lattice_side(), 2);
    }
}
