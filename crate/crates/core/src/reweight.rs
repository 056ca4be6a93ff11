//! Reweighting of observables from the sampled action `S` to a shifted target
//! `𝒜′`, including the imaginary `i g₅ Σφ²` term, and histogram weight
//! functions for judging how far an extrapolation can be trusted.
//!
//! For a sample `l` the reweighting exponent is `S_l − 𝒜′_l`, where `𝒜′` equals
//! the base coefficients with term `j` replaced by `g′`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{FieldConfiguration, TargetActionSpec, TermSums};
use crate::mcmc::SampleEnsemble;
use crate::par;
use crate::stats::binned_jackknife;

/// Default fraction of `N` below which the effective sample size is flagged.
pub const DEFAULT_NEFF_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ReweightRequest {
    /// Index `j ∈ 1..=5` of the term whose coefficient is varied.
    pub varying_term: usize,
    /// Base coefficients `g₁..g₅`; entry `j` is replaced by each `g′`.
    pub g: [f64; 5],
    /// Include the imaginary term `i g₅ Σφ²` in `𝒜′`.
    pub include_complex: bool,
    pub g_primes: Vec<f64>,
    /// Flag estimates whose effective sample size drops below this fraction of `N`.
    pub neff_fraction: f64,
}

impl ReweightRequest {
    pub fn new(varying_term: usize, g: [f64; 5], include_complex: bool, g_primes: Vec<f64>) -> Result<Self> {
        let request = ReweightRequest {
            varying_term,
            g,
            include_complex,
            g_primes,
            neff_fraction: DEFAULT_NEFF_FRACTION,
        };
        request.validate()?;
        Ok(request)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.varying_term) {
            return Err(Error::InvalidParameter(format!(
                "varying term {} not in 1..=5",
                self.varying_term
            )));
        }
        if self.varying_term == 5 && !self.include_complex {
            return Err(Error::InvalidParameter(
                "varying the imaginary term requires include_complex".into(),
            ));
        }
        if self.g_primes.is_empty() {
            return Err(Error::Empty("g' list"));
        }
        if self.g.iter().chain(&self.g_primes).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("coefficients must be finite".into()));
        }
        Ok(())
    }

    /// The shifted target `𝒜′` for one value of `g′`.
    pub fn target_at(&self, g_prime: f64) -> TargetActionSpec {
        let mut g = self.g;
        g[self.varying_term - 1] = g_prime;
        let terms: &[usize] = if self.include_complex {
            &[1, 2, 3, 4, 5]
        } else {
            &[1, 2, 3, 4]
        };
        TargetActionSpec::with_terms(g, terms).expect("static term list")
    }
}

/// A complex estimate with separate errors for its real and imaginary parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReweightedEstimate {
    pub mean: Complex64,
    pub std_error_re: f64,
    pub std_error_im: f64,
    /// `(Σ|w|)² / Σ|w|²`.
    pub n_effective: f64,
    /// Set when `n_effective` fell below the request's threshold; the value is
    /// still reported but should not be trusted.
    pub low_overlap: bool,
}

/// Per-sample exponents `S_l − 𝒜′_l`.
pub fn reweight_exponents(ensemble: &SampleEnsemble, target: &TargetActionSpec) -> Vec<Complex64> {
    ensemble
        .actions()
        .iter()
        .zip(ensemble.terms())
        .map(|(s, t)| {
            let a = target.evaluate_terms(t);
            Complex64::new(s - a.re, -a.im)
        })
        .collect()
}

/// `⟨O⟩_{𝒜′} = Σ O_l e^{x_l} / Σ e^{x_l}` with the largest real exponent
/// factored out of numerator and denominator, and a binned jackknife over the
/// complex ratio.
pub fn reweight_with_exponents(
    exponents: &[Complex64],
    observable: &[Complex64],
    neff_fraction: f64,
) -> Result<ReweightedEstimate> {
    if exponents.len() != observable.len() {
        return Err(Error::SizeMismatch {
            what: "observable values",
            expected: exponents.len(),
            actual: observable.len(),
        });
    }
    let n = exponents.len();
    let shift = exponents.iter().map(|x| x.re).fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::InvalidParameter("reweighting exponents are not finite".into()));
    }
    let weights: Vec<Complex64> = exponents
        .iter()
        .map(|x| Complex64::from_polar((x.re - shift).exp(), x.im))
        .collect();
    let weighted: Vec<Complex64> = weights.iter().zip(observable).map(|(w, o)| w * o).collect();
    let num_re: Vec<f64> = weighted.iter().map(|z| z.re).collect();
    let num_im: Vec<f64> = weighted.iter().map(|z| z.im).collect();
    let den_re: Vec<f64> = weights.iter().map(|z| z.re).collect();
    let den_im: Vec<f64> = weights.iter().map(|z| z.im).collect();
    let series: [&[f64]; 4] = [&num_re, &num_im, &den_re, &den_im];
    let ratio = |m: &[f64]| Complex64::new(m[0], m[1]) / Complex64::new(m[2], m[3]);
    let re = binned_jackknife(&series, |m| ratio(m).re)?;
    let im = binned_jackknife(&series, |m| ratio(m).im)?;

    let abs_sum: f64 = weights.iter().map(|w| w.norm()).sum();
    let sq_sum: f64 = weights.iter().map(|w| w.norm_sqr()).sum();
    let n_effective = abs_sum * abs_sum / sq_sum;
    Ok(ReweightedEstimate {
        mean: Complex64::new(re.mean, im.mean),
        std_error_re: re.std_error,
        std_error_im: im.std_error,
        n_effective,
        low_overlap: n_effective < neff_fraction * n as f64,
    })
}

/// Reweights a per-configuration observable to `𝒜′(g′)`.
pub fn reweight_observable(
    ensemble: &SampleEnsemble,
    observable: impl Fn(&FieldConfiguration, &TermSums) -> Complex64,
    request: &ReweightRequest,
    g_prime: f64,
) -> Result<ReweightedEstimate> {
    request.validate()?;
    if ensemble.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: ensemble.len(),
        });
    }
    let target = request.target_at(g_prime);
    let exponents = reweight_exponents(ensemble, &target);
    let values: Vec<Complex64> = ensemble
        .configs()
        .iter()
        .zip(ensemble.terms())
        .map(|(c, t)| observable(c, t))
        .collect();
    reweight_with_exponents(&exponents, &values, request.neff_fraction)
}

/// Histogram layout for weight functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binning {
    /// Bins along `(S, ℜ𝒜′, ℑ𝒜′)`.
    pub bins: [usize; 3],
    /// Relative padding added on both sides of the observed range.
    pub margin: f64,
}

impl Default for Binning {
    fn default() -> Self {
        Binning {
            bins: [64, 64, 64],
            margin: 0.05,
        }
    }
}

/// Weight function `𝒲(S)` on the bin centres of `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFunction {
    pub bin_centers: Vec<f64>,
    pub weights: Vec<Complex64>,
    pub g_prime: f64,
    /// Samples per `S` bin (the marginal histogram).
    pub counts: Vec<u64>,
}

impl WeightFunction {
    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    width: f64,
    bins: usize,
}

impl Axis {
    fn spanning(values: impl Iterator<Item = f64>, bins: usize, margin: f64) -> Axis {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let span = max - min;
        let pad = if span > 0.0 { margin * span } else { 0.5 * margin.max(1e-3) * (1.0 + min.abs()) };
        let lo = min - pad;
        Axis {
            lo,
            width: (span + 2.0 * pad) / bins as f64,
            bins,
        }
    }

    fn index(&self, x: f64) -> usize {
        (((x - self.lo) / self.width).floor().max(0.0) as usize).min(self.bins - 1)
    }

    fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.width
    }
}

/// Builds `𝒲(S) = Σ_{ℜ,ℑ} h(S, ℜ𝒜′, ℑ𝒜′) e^{S − ℜ𝒜′ − iℑ𝒜′} / Σ_{all bins}(…)`
/// with exponents evaluated at bin centres and a single global normalisation.
pub fn build_weight_function(
    ensemble: &SampleEnsemble,
    request: &ReweightRequest,
    g_prime: f64,
    binning: &Binning,
) -> Result<WeightFunction> {
    request.validate()?;
    if ensemble.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    if binning.bins.contains(&0) || !(binning.margin >= 0.0) {
        return Err(Error::InvalidParameter("binning needs at least one bin per axis and a non-negative margin".into()));
    }
    let target = request.target_at(g_prime);
    let values: Vec<Complex64> = ensemble.terms().iter().map(|t| target.evaluate_terms(t)).collect();
    let s_axis = Axis::spanning(ensemble.actions().iter().copied(), binning.bins[0], binning.margin);
    let re_axis = Axis::spanning(values.iter().map(|v| v.re), binning.bins[1], binning.margin);
    let im_axis = Axis::spanning(values.iter().map(|v| v.im), binning.bins[2], binning.margin);
    let [ns, nr, ni] = binning.bins;

    let shards = par::map_chunks(values.len(), 8192, |range| {
        let mut h = vec![0u64; ns * nr * ni];
        for l in range {
            let k = (s_axis.index(ensemble.actions()[l]) * nr + re_axis.index(values[l].re)) * ni
                + im_axis.index(values[l].im);
            h[k] += 1;
        }
        h
    });
    let mut hist = vec![0u64; ns * nr * ni];
    for shard in shards {
        for (h, x) in hist.iter_mut().zip(shard) {
            *h += x;
        }
    }

    let exponent = |s: usize, r: usize, i: usize| {
        Complex64::new(s_axis.center(s) - re_axis.center(r), -im_axis.center(i))
    };
    let mut shift = f64::NEG_INFINITY;
    for (k, &h) in hist.iter().enumerate() {
        if h > 0 {
            shift = shift.max(exponent(k / (nr * ni), k / ni % nr, k % ni).re);
        }
    }
    let mut weights = vec![Complex64::new(0.0, 0.0); ns];
    let mut counts = vec![0u64; ns];
    for (k, &h) in hist.iter().enumerate() {
        if h == 0 {
            continue;
        }
        let s = k / (nr * ni);
        let x = exponent(s, k / ni % nr, k % ni);
        weights[s] += h as f64 * Complex64::from_polar((x.re - shift).exp(), x.im);
        counts[s] += h;
    }
    let total: Complex64 = weights.iter().sum();
    if total.norm() == 0.0 {
        return Err(Error::NonNormalizable("weight function sums to zero".into()));
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(WeightFunction {
        bin_centers: (0..ns).map(|k| s_axis.center(k)).collect(),
        weights,
        g_prime,
        counts,
    })
}

/// Default pass threshold for [`overlap_diagnostic`].
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub score: f64,
    pub passed: bool,
}

/// `Σ_bins min(|𝒲_ref|, |𝒲_ext|)` after scaling each to unit total magnitude.
pub fn overlap_diagnostic(reference: &WeightFunction, extrapolated: &WeightFunction, threshold: f64) -> Result<Overlap> {
    if reference.bin_centers != extrapolated.bin_centers {
        return Err(Error::BinningMismatch(format!(
            "reference has {} S bins, extrapolation {}, or their centres differ",
            reference.bin_centers.len(),
            extrapolated.bin_centers.len()
        )));
    }
    let normalised = |w: &WeightFunction| {
        let total: f64 = w.weights.iter().map(|z| z.norm()).sum();
        w.weights
            .iter()
            .map(|z| if total > 0.0 { z.norm() / total } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let score: f64 = normalised(reference)
        .into_iter()
        .zip(normalised(extrapolated))
        .map(|(a, b)| a.min(b))
        .sum::<f64>()
        .clamp(0.0, 1.0);
    Ok(Overlap {
        score,
        passed: score >= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_square_lattice, CouplingSet};
    use crate::mcmc::{magnetization, sample_ensemble, SamplerConfig};
    use crate::stats;

    fn ensemble(seed: u64) -> (SampleEnsemble, TargetActionSpec) {
        let g = build_square_lattice(2, true).unwrap();
        let target = TargetActionSpec::truncated([-0.3, 0.8, 0.2, 0.0, 0.0], 3).unwrap();
        let c = target.to_couplings(&g).unwrap();
        let cfg = SamplerConfig {
            burn_in_sweeps: 500,
            thinning_sweeps: 2,
            n_samples: 4000,
            rng_seed: seed,
            ..SamplerConfig::default()
        };
        (sample_ensemble(&c, &g, &cfg).unwrap(), target)
    }

    #[test]
    fn self_reweighting_is_the_plain_average() {
        let (ens, target) = ensemble(1);
        let request = ReweightRequest::new(2, target.coefficients(), false, vec![0.8]).unwrap();
        let est = reweight_observable(&ens, |c, _| Complex64::new(magnetization(c), 0.0), &request, 0.8).unwrap();
        let plain: Vec<f64> = ens.configs().iter().map(magnetization).collect();
        let plain = stats::mean_with_error(&plain).unwrap();
        assert_eq!(est.mean.re.to_bits(), plain.mean.to_bits());
        assert_eq!(est.mean.im, 0.0);
        assert_eq!(est.n_effective, ens.len() as f64);
        assert!(!est.low_overlap);
        assert!((est.std_error_re - plain.std_error).abs() < 1e-15);
    }

    #[test]
    fn exponent_shift_invariance() {
        let (ens, target) = ensemble(2);
        let request = ReweightRequest::new(4, target.coefficients(), true, vec![-0.1]).unwrap();
        let shifted_target = {
            let mut r = request.clone();
            r.g[4] = 0.15;
            r.target_at(-0.1)
        };
        let x = reweight_exponents(&ens, &shifted_target);
        let obs: Vec<Complex64> = ens.terms().iter().map(|t| Complex64::new(t.get(2), 0.0)).collect();
        let base = reweight_with_exponents(&x, &obs, 0.01).unwrap();
        for c in [-300.0, -1.5, 2.0, 500.0] {
            let moved: Vec<Complex64> = x.iter().map(|z| z + c).collect();
            let est = reweight_with_exponents(&moved, &obs, 0.01).unwrap();
            assert!((est.mean - base.mean).norm() <= 1e-12 * base.mean.norm());
            assert!((est.n_effective - base.n_effective).abs() <= 1e-9 * base.n_effective);
        }
    }

    #[test]
    fn low_overlap_is_flagged() {
        let (ens, target) = ensemble(3);
        let request = ReweightRequest::new(2, target.coefficients(), false, vec![-1.5]).unwrap();
        let est = reweight_observable(&ens, |_, t| Complex64::new(t.get(2), 0.0), &request, -1.5).unwrap();
        assert!(est.low_overlap, "{est:?}");
    }

    #[test]
    fn request_validation() {
        assert!(ReweightRequest::new(0, [0.0; 5], false, vec![1.0]).is_err());
        assert!(ReweightRequest::new(2, [0.0; 5], false, vec![]).is_err());
        assert!(ReweightRequest::new(5, [0.0; 5], false, vec![1.0]).is_err());
        let r = ReweightRequest::new(4, [-1.0, 1.5, 0.2, -1.0, 0.15], true, vec![-0.9]).unwrap();
        assert_eq!(r.target_at(-0.9).coefficients(), [-1.0, 1.5, 0.2, -0.9, 0.15]);
        let real = ReweightRequest::new(4, [-1.0, 1.5, 0.2, -1.0, 0.15], false, vec![-0.9]).unwrap();
        assert!(!real.target_at(-0.9).is_complex());
    }

    #[test]
    fn weight_function_basics() {
        let (ens, target) = ensemble(4);
        let request = ReweightRequest::new(2, target.coefficients(), false, vec![0.8]).unwrap();
        let wf = build_weight_function(&ens, &request, 0.8, &Binning::default()).unwrap();
        assert_eq!(wf.total_count(), ens.len() as u64);
        assert_eq!(wf.bin_centers.len(), 64);
        // at the source couplings 𝒲 is the S histogram up to bin-centre effects
        let total: f64 = wf.counts.iter().sum::<u64>() as f64;
        for (w, &c) in wf.weights.iter().zip(&wf.counts) {
            assert!(w.im.abs() < 1e-15);
            let expected = c as f64 / total;
            assert!((w.re - expected).abs() < 0.05 * expected + 1e-12, "{} vs {expected}", w.re);
        }
        let same = overlap_diagnostic(&wf, &wf, 0.5).unwrap();
        assert!((same.score - 1.0).abs() < 1e-12 && same.passed);
    }

    #[test]
    fn overlap_edge_cases() {
        let make = |weights: Vec<f64>| WeightFunction {
            bin_centers: vec![0.0, 1.0, 2.0, 3.0],
            weights: weights.into_iter().map(|w| Complex64::new(w, 0.0)).collect(),
            g_prime: 0.0,
            counts: vec![1; 4],
        };
        let a = make(vec![0.5, 0.5, 0.0, 0.0]);
        let b = make(vec![0.0, 0.0, 0.3, 0.7]);
        let o = overlap_diagnostic(&a, &b, 0.5).unwrap();
        assert_eq!(o.score, 0.0);
        assert!(!o.passed);
        let mut c = make(vec![1.0; 4]);
        c.bin_centers.pop();
        c.weights.pop();
        assert!(matches!(overlap_diagnostic(&a, &c, 0.5), Err(Error::BinningMismatch(_))));
    }

    #[test]
    fn overlap_decays_away_from_source() {
        let (ens, target) = ensemble(5);
        let request = ReweightRequest::new(2, target.coefficients(), false, vec![0.8]).unwrap();
        let binning = Binning::default();
        let reference = build_weight_function(&ens, &request, 0.8, &binning).unwrap();
        let mut last = [1.1, 1.1];
        for step in 0..5 {
            for (side, dir) in [(0, 1.0), (1, -1.0)] {
                let g = 0.8 + dir * 0.08 * step as f64;
                let wf = build_weight_function(&ens, &request, g, &binning).unwrap();
                let score = overlap_diagnostic(&reference, &wf, 0.5).unwrap().score;
                assert!(score <= last[side] + 1e-12, "g'={g}: {score} > {}", last[side]);
                last[side] = score;
            }
        }
        assert!(last[0] < 1.0 && last[1] < 1.0);
    }

    #[test]
    fn empty_ensemble_rejected() {
        let g = build_square_lattice(2, true).unwrap();
        let c = CouplingSet::zeros(&g);
        let empty = SampleEnsemble::from_configs(&g, vec![], &c, crate::mcmc::EnsembleSource::Couplings(c.clone())).unwrap();
        let request = ReweightRequest::new(2, [0.0; 5], false, vec![0.1]).unwrap();
        assert!(build_weight_function(&empty, &request, 0.1, &Binning::default()).is_err());
        assert!(reweight_observable(&empty, |_, _| Complex64::new(0.0, 0.0), &request, 0.1).is_err());
    }
}
