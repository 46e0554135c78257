//! Closed forms for the driftless model.
//!
//! Without drift the exponential Euler scheme is exact in law on its grid, so
//! `⟨c, X_T⟩_H` is Gaussian with the mean `⟨c, e^{(T−s)A}x⟩` and a variance
//! summed over the steps of the grid.

use bismut_core::{HVector, ModeBasis, SimConfig, TestFunctional};

/// Mean and variance of `⟨c, X_T⟩_H` under the reference scheme.
pub fn projection_moments(basis: &ModeBasis, cfg: &SimConfig, x: &HVector, c: &HVector) -> (f64, f64) {
    let mean = basis.inner_h(c, &basis.apply_semigroup(cfg.t_end - cfg.s, x));
    let dt = cfg.dt();
    let (wu, wv) = (basis.u_weight(), basis.v_weight());
    let mut var = 0.0;
    for n in 0..basis.n_modes() {
        let g = [wu[n] * wu[n] * c.c1[n], wv[n] * wv[n] * c.c2[n]];
        let (_, q) = basis.step_moments(n, dt);
        for k in 0..cfg.steps {
            // e^{(T − t_{k+1})A}ᵀ g
            let e = basis.mode_exp(n, cfg.t_end - cfg.time(k + 1));
            let v = [e[0][0] * g[0] + e[1][0] * g[1], e[0][1] * g[0] + e[1][1] * g[1]];
            let quad = v[0] * (q[0][0] * v[0] + q[0][1] * v[1]) + v[1] * (q[1][0] * v[0] + q[1][1] * v[1]);
            let sig = basis.sigma(cfg.time(k));
            var += sig * sig * quad;
        }
    }
    (mean, var)
}

/// `E f(X_T)` for the Gaussian-tractable functionals.
pub fn expectation(basis: &ModeBasis, cfg: &SimConfig, x: &HVector, f: &TestFunctional) -> Option<f64> {
    let moments = |c: &HVector| projection_moments(basis, cfg, x, c);
    match f {
        TestFunctional::Constant(v) => Some(*v),
        TestFunctional::Linear(c) => Some(moments(c).0),
        TestFunctional::Quadratic(c) => {
            let (m, v) = moments(c);
            Some(m * m + v)
        }
        TestFunctional::BoundedSmooth(c) => {
            let (m, v) = moments(c);
            Some(m.cos() * (-0.5 * v).exp())
        }
        _ => None,
    }
}

/// `⟨c, e^{(t−s)A} h⟩_H`, the gradient of `x ↦ E⟨c, X_t⟩` along `h`.
pub fn linear_gradient(basis: &ModeBasis, c: &HVector, h: &HVector, gap: f64) -> f64 {
    basis.inner_h(c, &basis.apply_semigroup(gap, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use bismut_core::{estimate_expectation, DriftSpec, ModelParams, Sigma};

    #[test]
    fn constant_sigma_variance_matches_the_continuous_integral() {
        let basis = ModeBasis::new(ModelParams::damped(3, 2.0, 1.5, 0.75)).unwrap();
        let c = HVector::new(vec![0.5, -0.2, 0.1], vec![0.3, 0.4, -0.1]);
        let x = HVector::zeros(3);
        let coarse = projection_moments(&basis, &SimConfig::new(4, 1, 0, 0.0, 1.0), &x, &c).1;
        let fine = projection_moments(&basis, &SimConfig::new(64, 1, 0, 0.0, 1.0), &x, &c).1;
        assert!((coarse - fine).abs() < 1e-12 * fine);
    }

    #[test]
    fn agrees_with_monte_carlo() {
        let params = ModelParams::wave(3, 2.0).with_sigma(Sigma::Sinusoid {
            mean: 1.0,
            amplitude: 0.3,
            frequency: 2.0,
        });
        let basis = ModeBasis::new(params).unwrap();
        let cfg = SimConfig::new(16, 40_000, 9, 0.0, 1.0);
        let c = HVector::new(vec![0.6, 0.0, 0.2], vec![0.0, 0.5, 0.0]);
        let x = HVector::new(vec![0.2, 0.1, 0.0], vec![0.0, -0.3, 0.1]);
        let f = TestFunctional::BoundedSmooth(c);
        let mc = estimate_expectation(&basis, &cfg, &DriftSpec::Zero, &x, &f).unwrap();
        let exact = expectation(&basis, &cfg, &x, &f).unwrap();
        assert!((mc.estimate - exact).abs() < 4.0 * mc.stderr, "{} vs {exact}", mc.estimate);
    }
}
