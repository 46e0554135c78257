//! Composite Simpson rules, Gauss-Legendre cell averages and log-log fits.

/// Composite Simpson rule for a scalar integrand on `[a, b]`.
///
/// `panels` is rounded up to the next even number.
pub fn simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, panels: usize) -> f64 {
    let n = even(panels.max(2));
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * i as f64);
    }
    acc * h / 3.0
}

/// Composite Simpson rule for a vector-valued integrand.
///
/// `f(x, buf)` must write the integrand into `buf`; the integral is accumulated into `out`.
pub fn simpson_vec<F: FnMut(f64, &mut [f64])>(mut f: F, a: f64, b: f64, panels: usize, out: &mut [f64]) {
    let n = even(panels.max(2));
    let h = (b - a) / n as f64;
    let mut buf = vec![0.0; out.len()];
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..=n {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        f(a + h * i as f64, &mut buf);
        for (o, v) in out.iter_mut().zip(&buf) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|o| *o *= h / 3.0);
}

pub(crate) fn even(n: usize) -> usize {
    n + (n & 1)
}

/// Three-point Gauss-Legendre nodes and weights on `[-1, 1]`.
pub(crate) const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// `n` logarithmically spaced points between `a` and `b` inclusive.
pub fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(a > 0.0 && b > 0.0 && n >= 2);
    let (la, lb) = (a.ln(), b.ln());
    (0..n)
        .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Least-squares fit of `log y = intercept + slope * log x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFit {
    pub slope: f64,
    pub intercept: f64,
}

impl PowerFit {
    pub fn eval(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }
}

pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> PowerFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    PowerFit { slope, intercept: my - slope * mx }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_on_cubics() {
        let v = simpson(|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 2);
        assert!((v - (4.0 - 4.0 + 2.0)).abs() < 1e-14);
    }

    #[test]
    fn simpson_converges_at_fourth_order() {
        let exact = 1.0 - (-1.0f64).exp();
        let e1 = (simpson(|x| (-x).exp(), 0.0, 1.0, 16) - exact).abs();
        let e2 = (simpson(|x| (-x).exp(), 0.0, 1.0, 32) - exact).abs();
        assert!(e1 / e2 > 15.0);
    }

    #[test]
    fn power_fit_recovers_exponent() {
        let xs = log_space(1e-3, 1.0, 10);
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-1.5)).collect();
        let fit = fit_power_law(&xs, &ys);
        assert!((fit.slope + 1.5).abs() < 1e-12);
        assert!((fit.eval(0.5) - 3.0 * 0.5f64.powf(-1.5)).abs() < 1e-9);
    }
}
