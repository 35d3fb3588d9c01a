//! Small statistical helpers shared by the engines.

use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};

/// One-sided Clopper–Pearson upper limit for a binomial proportion with
/// `successes` out of `trials`.
pub fn clopper_pearson_upper(successes: usize, trials: usize, confidence: f64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::EmptySample);
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid("confidence", "must lie strictly between 0 and 1"));
    }
    if successes > trials {
        return Err(Error::invalid("successes", "cannot exceed the number of trials"));
    }
    if successes == trials {
        return Ok(1.0);
    }
    if successes == 0 {
        // closed form; avoids the iterative inverse at the edge
        return Ok(1.0 - (1.0 - confidence).powf(1.0 / trials as f64));
    }
    let beta = Beta::new((successes + 1) as f64, (trials - successes) as f64)
        .map_err(|e| Error::invalid("beta", e.to_string()))?;
    Ok(beta.inverse_cdf(confidence))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(points: &[(f64, f64)]) -> LinearFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    }
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Upper limit by bisection on the binomial lower tail, summed directly in
    /// log space.
    fn binomial_oracle(k: usize, n: usize, conf: f64) -> f64 {
        let ln_choose =
            |j: usize| -> f64 { (1..=j).map(|i| ((n - j + i) as f64).ln() - (i as f64).ln()).sum() };
        let tail = |p: f64| -> f64 {
            (0..=k)
                .map(|j| (ln_choose(j) + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp())
                .sum()
        };
        let (mut lo, mut hi) = (k as f64 / n as f64, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if tail(mid) > 1.0 - conf {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_successes_closed_form() {
        let u = clopper_pearson_upper(0, 100, 0.99).unwrap();
        assert_abs_diff_eq!(u, 1.0 - 0.01f64.powf(0.01), epsilon = 1e-15);
    }

    #[test]
    fn half_of_a_thousand() {
        let u = clopper_pearson_upper(500, 1000, 0.99).unwrap();
        assert_abs_diff_eq!(u, binomial_oracle(500, 1000, 0.99), epsilon = 1e-9);
        assert!((0.536..0.538).contains(&u), "{u}");
    }

    #[test]
    fn matches_oracle_across_counts() {
        for (k, n) in [(1, 10), (3, 50), (37, 400), (199, 200)] {
            let u = clopper_pearson_upper(k, n, 0.95).unwrap();
            assert_abs_diff_eq!(u, binomial_oracle(k, n, 0.95), epsilon = 1e-8);
        }
        assert_eq!(clopper_pearson_upper(7, 7, 0.9).unwrap(), 1.0);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64 - 1.0)).collect();
        let f = linear_fit(&pts);
        assert_abs_diff_eq!(f.slope, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.intercept, -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.r_squared, 1.0, epsilon = 1e-14);
    }
}
