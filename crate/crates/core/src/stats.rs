//! Sample statistics used by the Monte Carlo checks.

/// Mean and unbiased sample variance. Variance is 0 for fewer than two values.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    // Shift by the first sample so identical inputs give exactly zero.
    let x0 = xs[0];
    let (s1, s2) = xs.iter().fold((0.0, 0.0), |(a, b), x| (a + (x - x0), b + (x - x0).powi(2)));
    let ss = (s2 - s1 * s1 / n as f64).max(0.0);
    (mean, ss / (n - 1) as f64)
}

/// Mean and its standard error estimated from `n_batches` contiguous batch
/// means, which tolerates the autocorrelation of a Markov sample path.
pub fn batch_means(xs: &[f64], n_batches: usize) -> (f64, f64) {
    let b = n_batches.max(2).min(xs.len());
    let len = xs.len() / b;
    let means: Vec<f64> = (0..b)
        .map(|i| xs[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let (m, v) = mean_var(&means);
    (m, (v / b as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_var_small() {
        assert_eq!(mean_var(&[1.0, 2.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_var(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn batch_means_constant() {
        let (m, se) = batch_means(&[2.0; 100], 10);
        assert_eq!(m, 2.0);
        assert_eq!(se, 0.0);
    }
}
