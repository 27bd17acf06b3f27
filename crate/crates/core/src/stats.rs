//! Summary statistics: nearest-rank percentiles, Student-t confidence
//! intervals, and per-metric summaries.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Arithmetic mean; 0 for empty input.
pub fn mean(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Unbiased sample variance (n−1 denominator); 0 when n < 2.
pub fn variance(samples: &[f64]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let m = mean(samples);
    samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (samples.len() - 1) as f64
}

/// Nearest-rank percentile: the sorted sample at rank ⌈p/100·n⌉.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("percentile of no samples".into()));
    }
    if !(0.0..100.0).contains(&p) || p == 0.0 {
        return Err(Error::Config(format!("percentile {p} must lie in (0, 100)")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Two-sided Student-t confidence interval: mean ± t·s/√n.
pub fn confidence_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "confidence interval needs ≥ 2 samples, got {}",
            samples.len()
        )));
    }
    if !(0.0..1.0).contains(&level) || level == 0.0 {
        return Err(Error::Config(format!("level {level} must lie in (0, 1)")));
    }
    let n = samples.len() as f64;
    let m = mean(samples);
    let s = variance(samples).sqrt();
    let df = n - 1.0;
    let t = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Numerical(format!("t distribution: {e}")))?
        .inverse_cdf(0.5 + level / 2.0);
    let half = t * s / n.sqrt();
    Ok((m - half, m + half))
}

/// One metric's summary row: central moments, 95% CI, and tail percentiles.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub ci: (f64, f64),
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

/// Summarizes one sample set. With a single sample the CI collapses to the
/// point value.
pub fn summarize_metric(name: &str, samples: &[f64]) -> Result<MetricSummary> {
    if samples.is_empty() {
        return Err(Error::Empty(format!("no samples for metric {name}")));
    }
    let m = mean(samples);
    let ci = if samples.len() >= 2 {
        confidence_interval(samples, 0.95)?
    } else {
        (m, m)
    };
    Ok(MetricSummary {
        name: name.to_string(),
        mean: m,
        std: variance(samples).sqrt(),
        ci,
        p90: percentile(samples, 90.0)?,
        p95: percentile(samples, 95.0)?,
        p99: percentile(samples, 99.0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Normal;

    #[test]
    fn percentile_of_constant_samples_is_the_constant() {
        let samples = vec![7.5; 40];
        for p in [1.0, 50.0, 90.0, 99.0] {
            assert_eq!(percentile(&samples, p).unwrap(), 7.5);
        }
    }

    #[test]
    fn percentile_nearest_rank_on_1_to_100() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&samples, 99.0).unwrap(), 99.0);
        assert_eq!(percentile(&samples, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&samples, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn percentile_rejects_empty_and_out_of_range() {
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 0.0).is_err());
        assert!(percentile(&[1.0], 100.0).is_err());
    }

    #[test]
    fn gaussian_p99_matches_mean_plus_2_33_sigma() {
        // For Normal(10, 2) the 99th percentile is 10 + 2.326·2.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(10.0, 2.0).unwrap();
        let samples: Vec<f64> = (0..100_000).map(|_| rng.sample(normal)).collect();
        let p99 = percentile(&samples, 99.0).unwrap();
        let expect = 10.0 + 2.33 * 2.0;
        assert!(
            (p99 - expect).abs() / expect < 0.02,
            "p99 = {p99}, expected ≈ {expect}"
        );
    }

    #[test]
    fn confidence_interval_matches_t_table() {
        // Oracle: t₀.₉₇₅ with 4 degrees of freedom is 2.776 (t table);
        // {1..5} has mean 3 and s = √2.5.
        let samples = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (lo, hi) = confidence_interval(&samples, 0.95).unwrap();
        let half = 2.776 * (2.5_f64).sqrt() / (5.0_f64).sqrt();
        assert_relative_eq!(lo, 3.0 - half, epsilon = 1e-3);
        assert_relative_eq!(hi, 3.0 + half, epsilon = 1e-3);
    }

    #[test]
    fn identical_samples_give_zero_width_interval() {
        let samples = [4.0; 10];
        let (lo, hi) = confidence_interval(&samples, 0.95).unwrap();
        assert_eq!(lo, 4.0);
        assert_eq!(hi, 4.0);
    }

    #[test]
    fn interval_narrows_with_more_samples() {
        // Same per-sample spread replicated: width shrinks like 1/√n.
        let base = [1.0, 2.0, 3.0, 4.0, 5.0];
        let big: Vec<f64> = base.iter().cycle().take(100).copied().collect();
        let (lo5, hi5) = confidence_interval(&base, 0.95).unwrap();
        let (lo100, hi100) = confidence_interval(&big, 0.95).unwrap();
        assert!(hi100 - lo100 < hi5 - lo5);
    }

    #[test]
    fn single_sample_needs_no_interval_but_fails_ci() {
        assert!(confidence_interval(&[1.0], 0.95).is_err());
        let s = summarize_metric("m", &[1.0]).unwrap();
        assert_eq!(s.ci, (1.0, 1.0));
    }

    proptest! {
        // Tail percentiles are ordered on any sample set.
        #[test]
        fn percentiles_are_ordered(samples in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
            let s = summarize_metric("m", &samples).unwrap();
            prop_assert!(s.p90 <= s.p95);
            prop_assert!(s.p95 <= s.p99);
        }

        // The CI brackets the mean.
        #[test]
        fn interval_brackets_mean(samples in proptest::collection::vec(-1e3f64..1e3, 2..100)) {
            let (lo, hi) = confidence_interval(&samples, 0.95).unwrap();
            let m = mean(&samples);
            prop_assert!(lo <= m + 1e-9);
            prop_assert!(m <= hi + 1e-9);
        }
    }
}
