//! Error analysis for correlated Monte Carlo series: binning with a jackknife
//! over bins, plus a Kolmogorov-Smirnov distance.

use crate::error::{Error, Result};

/// Mean of a series with its statistical error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservableEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// `N · σ²_naive / σ²`, capped at `N`.
    pub n_effective: f64,
}

/// Smallest number of bins a binning level may have.
const MIN_BINS: usize = 32;
/// Relative growth below which two successive binning levels count as a plateau.
const PLATEAU_TOLERANCE: f64 = 1.05;

/// Jackknife estimate of `f(means)` at one bin size.
///
/// `series` holds several per-sample columns of equal length; `f` maps their
/// means to the quantity of interest. Only the first `bins · bin_size` samples
/// enter the jackknife.
fn jackknife_at(series: &[&[f64]], bin_size: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let n = series[0].len();
    let n_bins = n / bin_size;
    if n_bins < 2 {
        return 0.0;
    }
    let used = n_bins * bin_size;
    let k = series.len();
    let mut bin_sums = vec![0.0; n_bins * k];
    let mut totals = vec![0.0; k];
    for (c, col) in series.iter().enumerate() {
        for b in 0..n_bins {
            let s: f64 = col[b * bin_size..(b + 1) * bin_size].iter().sum();
            bin_sums[b * k + c] = s;
            totals[c] += s;
        }
    }
    let denom = (used - bin_size) as f64;
    let mut leave_out = vec![0.0; k];
    let mut estimates = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        for c in 0..k {
            leave_out[c] = (totals[c] - bin_sums[b * k + c]) / denom;
        }
        estimates.push(f(&leave_out));
    }
    let mean = estimates.iter().sum::<f64>() / n_bins as f64;
    let ss: f64 = estimates.iter().map(|e| (e - mean) * (e - mean)).sum();
    ((n_bins - 1) as f64 / n_bins as f64 * ss).sqrt()
}

/// Value and error of `f(⟨x₁⟩, …, ⟨x_k⟩)` for correlated series.
///
/// Bin sizes double from 1 while at least 32 bins remain. The reported error is
/// taken at the first level whose successor grows by no more than 5%; without
/// such a plateau the largest error seen is used.
pub fn binned_jackknife(series: &[&[f64]], f: impl Fn(&[f64]) -> f64) -> Result<ObservableEstimate> {
    let Some(first) = series.first() else {
        return Err(Error::Empty("series"));
    };
    let n = first.len();
    if let Some(bad) = series.iter().find(|s| s.len() != n) {
        return Err(Error::SizeMismatch {
            what: "jackknife series",
            expected: n,
            actual: bad.len(),
        });
    }
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let means: Vec<f64> = series.iter().map(|s| s.iter().sum::<f64>() / n as f64).collect();
    let value = f(&means);

    let mut errors = vec![jackknife_at(series, 1, &f)];
    let mut bin = 2;
    while n / bin >= MIN_BINS {
        errors.push(jackknife_at(series, bin, &f));
        bin *= 2;
    }
    let plateau = errors
        .windows(2)
        .find(|w| w[1] <= PLATEAU_TOLERANCE * w[0])
        .map(|w| w[0].max(w[1]));
    let std_error = plateau.unwrap_or_else(|| errors.iter().copied().fold(0.0, f64::max));

    let naive = errors[0];
    let n_effective = if std_error > 0.0 {
        (n as f64 * (naive / std_error).powi(2)).min(n as f64)
    } else {
        n as f64
    };
    Ok(ObservableEstimate {
        mean: value,
        std_error,
        n_effective,
    })
}

/// Binned error analysis of a plain mean.
pub fn mean_with_error(values: &[f64]) -> Result<ObservableEstimate> {
    binned_jackknife(&[values], |m| m[0])
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Two-sided Kolmogorov-Smirnov distance between samples and a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_series_has_zero_error() {
        let est = mean_with_error(&[2.5; 1000]).unwrap();
        assert_eq!(est.mean, 2.5);
        assert_eq!(est.std_error, 0.0);
        assert_eq!(est.n_effective, 1000.0);
    }

    #[test]
    fn needs_two_samples() {
        assert!(matches!(
            mean_with_error(&[1.0]),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
        assert!(mean_with_error(&[]).is_err());
    }

    #[test]
    fn iid_error_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let xs: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
            let est = mean_with_error(&xs).unwrap();
            let naive = (variance(&xs) / xs.len() as f64).sqrt();
            assert!((est.std_error / naive - 1.0).abs() < 0.2, "{} vs {naive}", est.std_error);
            assert!(est.n_effective <= xs.len() as f64);
        }
    }

    #[test]
    fn correlated_series_gets_larger_error() {
        // AR(1) with ρ = 0.9: integrated autocorrelation time (1+ρ)/(1−ρ) = 19
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho: f64 = 0.9;
        let mut x = 0.0;
        let xs: Vec<f64> = (0..200_000)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = rho * x + (1.0 - rho * rho).sqrt() * e;
                x
            })
            .collect();
        let est = mean_with_error(&xs).unwrap();
        let expected = (19.0 / xs.len() as f64).sqrt();
        assert!((est.std_error / expected - 1.0).abs() < 0.25, "{} vs {expected}", est.std_error);
        assert!(est.n_effective < xs.len() as f64 / 10.0);
    }

    #[test]
    fn ratio_estimator() {
        let num: Vec<f64> = (0..1000).map(|i| (i % 7) as f64).collect();
        let den = vec![2.0; 1000];
        let est = binned_jackknife(&[&num, &den], |m| m[0] / m[1]).unwrap();
        assert!((est.mean - mean(&num) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn ks_of_exact_quantiles_is_small() {
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_statistic(&xs, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.5 / n as f64).abs() < 1e-12);
        let shifted: Vec<f64> = xs.iter().map(|x| x * 0.5).collect();
        assert!(ks_statistic(&shifted, |x| x.clamp(0.0, 1.0)) > 0.49);
    }
}
