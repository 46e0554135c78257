//! Public-API checks that cut across modules.

use nalgebra::{Matrix2, Vector2};

use bismut_core::error::Error;
use bismut_core::{
    build_control, estimate_expectation, estimate_gradient_bismut, estimate_gradient_pathwise, simulate_reference,
    solve_lsmc, ControlRequest, ControlVariant, DriftSpec, GeneratorSpec, HVector, ModeBasis, ModelParams, SimConfig,
    TerminalSpec, TestFunctional,
};

fn damped(n: usize) -> ModeBasis {
    ModeBasis::new(ModelParams::damped(n, 2.0, 1.5, 0.75)).unwrap()
}

/// `e^{tA}` of damped mode `n` (0-based) from the generator block directly.
fn block_exp(n: usize, t: f64) -> Matrix2<f64> {
    let mu = ((n + 1) as f64).powi(2);
    (Matrix2::new(0.0, mu.sqrt(), -mu.sqrt(), -1.5 * mu.powf(0.75)) * t).exp()
}

/// Mean and variance of `⟨c, X_t⟩` from zero for the damped model with unit weights.
fn gaussian_projection(c: &HVector, x: &HVector, t: f64) -> (f64, f64) {
    let mut mean = 0.0;
    let mut var = 0.0;
    for n in 0..c.len() {
        let g = Vector2::new(c.c1[n], c.c2[n]);
        mean += g.dot(&(block_exp(n, t) * Vector2::new(x.c1[n], x.c2[n])));
        // Simpson on ∫_0^t (gᵀ e^{rA} j)² dr
        let panels = 2000;
        let h = t / panels as f64;
        for i in 0..=panels {
            let w = if i == 0 || i == panels { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let v = g.dot(&block_exp(n, i as f64 * h).column(1));
            var += w * h / 3.0 * v * v;
        }
    }
    (mean, var)
}

#[test]
fn model_config_round_trips_and_rejects_bad_values() {
    let text = "kind = \"DampedSmoothed\"\nN = 6\ndelta = 2.0\nrho = 1.5\nalpha = 0.4\neps = 0.1\nT = 2.0\n";
    let p = ModelParams::from_toml_str(text).unwrap();
    assert_eq!(p.n_modes, 6);
    assert_eq!(ModelParams::from_toml_str(&p.to_toml_string().unwrap()).unwrap(), p);
    let bad = text.replace("alpha = 0.4", "alpha = 1.2");
    // parsing is structural; ranges are checked by validate
    let parsed = ModelParams::from_toml_str(&bad).unwrap();
    assert!(matches!(parsed.validate(), Err(Error::InvalidParams(_))));
    assert!(matches!(ModelParams::from_toml_str(&format!("{text}gamma = 1\n")), Err(Error::Config(_))));
}

#[test]
fn reference_paths_follow_the_gaussian_law() {
    let basis = damped(3);
    let c = HVector::new(vec![1.0, 0.5, -0.3], vec![0.4, 0.0, 0.2]);
    let x = HVector::new(vec![0.2, -0.1, 0.0], vec![0.0, 0.3, 0.1]);
    let cfg = SimConfig::new(20, 40_000, 17, 0.0, 1.0);
    let bundle = simulate_reference(&basis, &cfg, &x).unwrap();
    let proj: Vec<f64> = (0..cfg.paths).map(|p| basis.inner_h(&c, &bundle.state(p, cfg.steps))).collect();
    let m = proj.iter().sum::<f64>() / proj.len() as f64;
    let v = proj.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (proj.len() - 1) as f64;
    let (mean, var) = gaussian_projection(&c, &x, 1.0);
    assert!((m - mean).abs() < 4.0 * (var / cfg.paths as f64).sqrt(), "mean {m} vs {mean}");
    // Var of a sample variance of a Gaussian is 2σ⁴/(M−1).
    assert!((v - var).abs() < 4.0 * var * (2.0 / cfg.paths as f64).sqrt(), "var {v} vs {var}");
}

#[test]
fn quadratic_gradient_matches_closed_form_on_damped_model() {
    // d/dh E⟨c, X_t⟩² = 2 E⟨c, X_t⟩ ⟨c, e^{tA}h⟩ since the variance does not depend on x.
    let basis = damped(4);
    let c = HVector::new(vec![0.8, 0.3, 0.0, 0.1], vec![0.5, 0.2, 0.1, 0.0]);
    let x = HVector::new(vec![0.6, 0.0, 0.2, 0.0], vec![0.0, 0.4, 0.0, 0.0]);
    let h = basis.embed_j(&[1.0, 0.5, 0.0, 0.0]);
    let (mean, _) = gaussian_projection(&c, &x, 1.0);
    let flow: f64 = (0..4)
        .map(|n| Vector2::new(c.c1[n], c.c2[n]).dot(&(block_exp(n, 1.0) * Vector2::new(h.c1[n], h.c2[n]))))
        .sum();
    let exact = 2.0 * mean * flow;

    let f = TestFunctional::Quadratic(c);
    let cfg = SimConfig::new(32, 30_000, 3, 0.0, 1.0);
    let ctrl = build_control(&basis, &ControlRequest::new(ControlVariant::DampedJ, h.clone(), 0.0, 1.0)).unwrap();
    let bismut = estimate_gradient_bismut(&basis, &cfg, &x, &f, &ctrl, &h).unwrap();
    let path = estimate_gradient_pathwise(&basis, &SimConfig { seed: 4, ..cfg.clone() }, &x, &f, &h).unwrap();
    assert!((bismut.estimate - exact).abs() < 3.5 * bismut.stderr, "{} vs {exact}", bismut.estimate);
    assert!((path.estimate - exact).abs() < 3.5 * path.stderr, "{} vs {exact}", path.estimate);
    assert!(bismut.bound.unwrap() >= bismut.estimate.abs());
}

#[test]
fn zero_generator_lsmc_reduces_to_plain_monte_carlo() {
    let basis = damped(3);
    let x = HVector::new(vec![0.3, 0.0, 0.0], vec![0.0, 0.1, 0.0]);
    let phi = TestFunctional::BoundedSmooth(HVector::new(vec![1.0, 0.4, 0.0], vec![0.5, 0.0, 0.2]));
    let cfg = SimConfig::new(16, 5_000, 23, 0.0, 1.0);
    let sol = solve_lsmc(&basis, &cfg, &DriftSpec::Zero, &x, &GeneratorSpec::Zero, &TerminalSpec::new(phi.clone())).unwrap();
    let mc = estimate_expectation(&basis, &cfg, &DriftSpec::Zero, &x, &phi).unwrap();
    // same seed, same paths
    assert!((sol.y0 - mc.estimate).abs() < 1e-10, "{} vs {}", sol.y0, mc.estimate);
    assert!((sol.y0_stderr - mc.stderr).abs() < 1e-10);
}

#[test]
fn typed_errors_reach_the_caller() {
    let basis = damped(3);
    let h = basis.embed_j(&[1.0, 0.0, 0.0]);
    let x = HVector::zeros(3);
    let cfg = SimConfig::new(8, 100, 1, 0.0, 1.0);
    let short = build_control(&basis, &ControlRequest::new(ControlVariant::DampedJ, h.clone(), 0.0, 0.5)).unwrap();
    let f = TestFunctional::Linear(HVector::new(vec![1.0; 3], vec![0.0; 3]));
    assert!(matches!(
        estimate_gradient_bismut(&basis, &cfg, &x, &f, &short, &h),
        Err(Error::WindowMismatch(_))
    ));
    let clamp = TestFunctional::BoundedNonsmooth(HVector::new(vec![1.0; 3], vec![0.0; 3]));
    assert!(matches!(
        estimate_gradient_pathwise(&basis, &cfg, &x, &clamp, &h),
        Err(Error::UnsupportedFunctional(_))
    ));
    assert!(matches!(
        GeneratorSpec::QuadraticZ { q: 1.0 }.validate(3, 100, 0),
        Err(Error::NonLipschitzGenerator(_))
    ));
    let wrong_kind = build_control(&basis, &ControlRequest::new(ControlVariant::WaveJ, h, 0.0, 1.0));
    assert!(wrong_kind.is_err());
    assert!(matches!(
        ModeBasis::new(ModelParams::damped(4, 2.0, 1.0, 0.75)),
        Err(Error::DegenerateMode(4))
    ));
}
