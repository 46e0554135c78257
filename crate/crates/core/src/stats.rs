//! Sample statistics with a fixed summation order.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub var: f64,
}

impl Summary {
    pub fn stderr(&self) -> f64 {
        (self.var / self.n as f64).sqrt()
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    assert!(n >= 2, "need at least two samples");
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    Summary { n, mean, var }
}

/// Unbiased sample covariance.
pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    assert_eq!(n, ys.len());
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of a difference of two estimators, `sqrt(se_a² + se_b²)`.
pub fn combined_stderr(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Standard error of the sample variance, from the empirical fourth central moment.
pub fn variance_stderr(xs: &[f64]) -> f64 {
    let s = summarize(xs);
    let m4 = xs.iter().map(|x| (x - s.mean).powi(4)).sum::<f64>() / s.n as f64;
    ((m4 - s.var * s.var) / s.n as f64).max(0.0).sqrt()
}

/// Evaluates `f` on every path index in parallel and returns the results in path order.
///
/// The output never depends on the number of worker threads.
pub fn map_paths<T, F>(m: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..m).into_par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_small_sample() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.var - 5.0 / 3.0).abs() < 1e-15);
        assert!((s.stderr() - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn covariance_of_affine_pair() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x).collect();
        assert!((covariance(&xs, &ys) + 2.0 * summarize(&xs).var).abs() < 1e-12);
    }

    #[test]
    fn map_paths_preserves_order() {
        let v = map_paths(1000, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
    }
}
