//! Monte Carlo estimators of `⟨∇_x P_{s,t} f(x), h⟩` for the driftless equation.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::control::Control;
use crate::error::{Error, Result};
use crate::paths::{DriftSpec, PathBundle, SimConfig, Simulator};
use crate::spectral::{HVector, ModeBasis};
use crate::stats::{map_paths, summarize};

/// Test functionals of `⟨c, x⟩_H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunctional {
    Constant(f64),
    Linear(HVector),
    Quadratic(HVector),
    /// `cos⟨c, x⟩`
    BoundedSmooth(HVector),
    /// `clamp(⟨c, x⟩, −1, 1)`
    BoundedNonsmooth(HVector),
    /// `⟨c, x⟩^K`
    PolyGrowth { c: HVector, k: u32 },
}

impl TestFunctional {
    fn direction(&self) -> Option<&HVector> {
        match self {
            TestFunctional::Constant(_) => None,
            TestFunctional::Linear(c)
            | TestFunctional::Quadratic(c)
            | TestFunctional::BoundedSmooth(c)
            | TestFunctional::BoundedNonsmooth(c)
            | TestFunctional::PolyGrowth { c, .. } => Some(c),
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(
            self,
            TestFunctional::Constant(_) | TestFunctional::BoundedSmooth(_) | TestFunctional::BoundedNonsmooth(_)
        )
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, TestFunctional::BoundedNonsmooth(_))
    }

    /// Polynomial growth exponent `K` (0 for bounded functionals).
    pub fn growth(&self) -> u32 {
        match self {
            TestFunctional::Linear(_) => 1,
            TestFunctional::Quadratic(_) => 2,
            TestFunctional::PolyGrowth { k, .. } => *k,
            _ => 0,
        }
    }

    /// `‖f‖_∞` for bounded functionals.
    pub fn sup_norm(&self) -> Option<f64> {
        match self {
            TestFunctional::Constant(v) => Some(v.abs()),
            TestFunctional::BoundedSmooth(_) | TestFunctional::BoundedNonsmooth(_) => Some(1.0),
            _ => None,
        }
    }

    /// `‖f‖_{C_K} = sup |f(x)| / (1 + |x|²)^{K/2}`, bounded above by `|c|^K`.
    pub fn ck_norm(&self, basis: &ModeBasis) -> f64 {
        match self.direction() {
            None => self.sup_norm().unwrap_or(0.0),
            Some(_) if self.is_bounded() => 1.0,
            Some(c) => basis.norm_h(c).powi(self.growth() as i32),
        }
    }

    pub fn eval(&self, basis: &ModeBasis, x: &HVector) -> f64 {
        let Some(c) = self.direction() else {
            if let TestFunctional::Constant(v) = self {
                return *v;
            }
            unreachable!()
        };
        let p = basis.inner_h(c, x);
        match self {
            TestFunctional::Linear(_) => p,
            TestFunctional::Quadratic(_) => p * p,
            TestFunctional::BoundedSmooth(_) => p.cos(),
            TestFunctional::BoundedNonsmooth(_) => p.clamp(-1.0, 1.0),
            TestFunctional::PolyGrowth { k, .. } => p.powi(*k as i32),
            TestFunctional::Constant(_) => unreachable!(),
        }
    }

    /// `∇f(x) · v`.
    pub fn directional_derivative(&self, basis: &ModeBasis, x: &HVector, v: &HVector) -> Result<f64> {
        let Some(c) = self.direction() else {
            return Ok(0.0);
        };
        let (p, dp) = (basis.inner_h(c, x), basis.inner_h(c, v));
        let slope = match self {
            TestFunctional::Linear(_) => 1.0,
            TestFunctional::Quadratic(_) => 2.0 * p,
            TestFunctional::BoundedSmooth(_) => -p.sin(),
            TestFunctional::PolyGrowth { k, .. } => *k as f64 * p.powi(*k as i32 - 1),
            TestFunctional::BoundedNonsmooth(_) => {
                return Err(Error::UnsupportedFunctional("clamped functional is not differentiable".into()))
            }
            TestFunctional::Constant(_) => unreachable!(),
        };
        Ok(slope * dp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bismut,
    Pathwise,
    FiniteDifference,
    SemilinearBismut,
    MonteCarlo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bismut => "bismut",
            Method::Pathwise => "pathwise",
            Method::FiniteDifference => "finite_difference",
            Method::SemilinearBismut => "semilinear_bismut",
            Method::MonteCarlo => "monte_carlo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub method: Method,
    pub s: f64,
    pub t: f64,
    pub paths: usize,
    pub estimate: f64,
    pub stderr: f64,
    /// `‖f‖_∞ ‖ũ‖` for bounded `f`, the `C_K` analogue otherwise; absent where no bound applies.
    pub bound: Option<f64>,
}

impl GradientReport {
    pub fn from_samples(method: Method, s: f64, t: f64, samples: &[f64], bound: Option<f64>) -> Self {
        let sum = summarize(samples);
        GradientReport {
            method,
            s,
            t,
            paths: samples.len(),
            estimate: sum.mean,
            stderr: sum.stderr(),
            bound,
        }
    }

    pub const CSV_HEADER: &'static str = "method,t,s,M,estimate,stderr,bound";

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let bound = self.bound.map(|b| b.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            self.method.name(),
            self.t,
            self.s,
            self.paths,
            self.estimate,
            self.stderr,
            bound
        )
    }
}

/// Cell averages `ū_k = Δt^{-1} ∫_{t_k}^{t_{k+1}} ũ` on the simulation grid.
pub fn cell_controls(ctrl: &Control, cfg: &SimConfig) -> Result<Vec<Vec<f64>>> {
    let tol = 1e-12 * cfg.t_end.max(1.0);
    if ctrl.s() < cfg.s - tol || ctrl.t() > cfg.t_end + tol {
        return Err(Error::WindowMismatch(format!(
            "control window [{}, {}] is not covered by the path window [{}, {}]",
            ctrl.s(),
            ctrl.t(),
            cfg.s,
            cfg.t_end
        )));
    }
    let dt = cfg.dt();
    let n = ctrl.n_modes();
    Ok((0..cfg.steps)
        .map(|k| {
            let (a, b) = (cfg.time(k).max(ctrl.s()), cfg.time(k + 1).min(ctrl.t()));
            let mut out = vec![0.0; n];
            if b > a {
                ctrl.cell_average(a, b, &mut out);
                let frac = (b - a) / dt;
                out.iter_mut().for_each(|v| *v *= frac);
            }
            out
        })
        .collect())
}

#[inline]
fn pair(cells: &[Vec<f64>], k: usize, dw: &[f64]) -> f64 {
    cells[k].iter().zip(dw).map(|(u, w)| u * w).sum()
}

/// `δ(ũ) = Σ_k ⟨ū_k, ΔW_k⟩` per path of a stored bundle.
pub fn skorokhod_integral(ctrl: &Control, bundle: &PathBundle) -> Result<Vec<f64>> {
    let cells = cell_controls(ctrl, &bundle.cfg)?;
    Ok(map_paths(bundle.paths(), |p| {
        (0..bundle.steps()).map(|k| pair(&cells, k, bundle.dw(p, k))).sum()
    }))
}

fn check_window(ctrl: &Control, cfg: &SimConfig, h: &HVector) -> Result<()> {
    let tol = 1e-12 * cfg.t_end.max(1.0);
    if (ctrl.s() - cfg.s).abs() > tol || (ctrl.t() - cfg.t_end).abs() > tol {
        return Err(Error::WindowMismatch(format!(
            "control window [{}, {}] differs from the estimation window [{}, {}]",
            ctrl.s(),
            ctrl.t(),
            cfg.s,
            cfg.t_end
        )));
    }
    if ctrl.direction() != h {
        return Err(Error::InvalidParams("control was built for a different direction".into()));
    }
    Ok(())
}

/// Per-path samples of `(f(X_t) − f(e^{(t−s)A}x)) δ(ũ)` together with `(1 + |X_t|²)^K`.
pub fn bismut_samples(
    basis: &ModeBasis,
    cfg: &SimConfig,
    x: &HVector,
    f: &TestFunctional,
    ctrl: &Control,
) -> Result<Vec<(f64, f64)>> {
    let cells = cell_controls(ctrl, cfg)?;
    let sim = Simulator::new(basis, cfg)?;
    let baseline = f.eval(basis, &basis.apply_semigroup(cfg.t_end - cfg.s, x));
    let k = f.growth() as i32;
    Ok(map_paths(cfg.paths, |p| {
        let mut delta = 0.0;
        let xt = sim.run_path(p, x, &DriftSpec::Zero, |k, _, dw| delta += pair(&cells, k, dw));
        let weight = (f.eval(basis, &xt) - baseline) * delta;
        (weight, (1.0 + basis.norm_h(&xt).powi(2)).powi(k))
    }))
}

/// Linear Bismut formula `E[f(X_t) δ(ũ)]` under the reference measure.
pub fn estimate_gradient_bismut(
    basis: &ModeBasis,
    cfg: &SimConfig,
    x: &HVector,
    f: &TestFunctional,
    ctrl: &Control,
    h: &HVector,
) -> Result<GradientReport> {
    check_window(ctrl, cfg, h)?;
    let samples = bismut_samples(basis, cfg, x, f, ctrl)?;
    let weights: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let bound = match f.sup_norm() {
        Some(sup) => sup * ctrl.l2norm(),
        None => {
            // Cauchy-Schwarz: |E f δ| ≤ ‖f‖_{C_K} (E(1+|X|²)^K)^{1/2} ‖ũ‖
            let moment = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
            f.ck_norm(basis) * moment.sqrt() * ctrl.l2norm()
        }
    };
    Ok(GradientReport::from_samples(Method::Bismut, cfg.s, cfg.t_end, &weights, Some(bound)))
}

/// Pathwise derivative `E[∇f(X_t) e^{(t−s)A} h]`.
pub fn estimate_gradient_pathwise(
    basis: &ModeBasis,
    cfg: &SimConfig,
    x: &HVector,
    f: &TestFunctional,
    h: &HVector,
) -> Result<GradientReport> {
    if !f.is_differentiable() {
        return Err(Error::UnsupportedFunctional("pathwise estimator needs a differentiable functional".into()));
    }
    let sim = Simulator::new(basis, cfg)?;
    let flow = basis.apply_semigroup(cfg.t_end - cfg.s, h);
    let samples: Vec<f64> = map_paths(cfg.paths, |p| {
        let xt = sim.run_path(p, x, &DriftSpec::Zero, |_, _, _| {});
        f.directional_derivative(basis, &xt, &flow).unwrap_or(f64::NAN)
    });
    Ok(GradientReport::from_samples(Method::Pathwise, cfg.s, cfg.t_end, &samples, None))
}

/// Central difference `(P̂f(x+εh) − P̂f(x−εh)) / 2ε` with common noise.
pub fn estimate_gradient_fd(
    basis: &ModeBasis,
    cfg: &SimConfig,
    x: &HVector,
    f: &TestFunctional,
    h: &HVector,
    epsilon: f64,
) -> Result<GradientReport> {
    estimate_gradient_fd_drifted(basis, cfg, &DriftSpec::Zero, x, f, h, epsilon)
}

pub fn estimate_gradient_fd_drifted(
    basis: &ModeBasis,
    cfg: &SimConfig,
    drift: &DriftSpec,
    x: &HVector,
    f: &TestFunctional,
    h: &HVector,
    epsilon: f64,
) -> Result<GradientReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParams("finite-difference step must be positive".into()));
    }
    let sim = Simulator::new(basis, cfg)?;
    let (up, dn) = (x + &(h * epsilon), x - &(h * epsilon));
    let samples: Vec<f64> = map_paths(cfg.paths, |p| {
        let a = sim.run_path(p, &up, drift, |_, _, _| {});
        let b = sim.run_path(p, &dn, drift, |_, _, _| {});
        (f.eval(basis, &a) - f.eval(basis, &b)) / (2.0 * epsilon)
    });
    Ok(GradientReport::from_samples(Method::FiniteDifference, cfg.s, cfg.t_end, &samples, None))
}

/// Plain Monte Carlo of `P_{s,t} f(x)`.
pub fn estimate_expectation(
    basis: &ModeBasis,
    cfg: &SimConfig,
    drift: &DriftSpec,
    x: &HVector,
    f: &TestFunctional,
) -> Result<GradientReport> {
    let sim = Simulator::new(basis, cfg)?;
    let samples: Vec<f64> = map_paths(cfg.paths, |p| f.eval(basis, &sim.run_path(p, x, drift, |_, _, _| {})));
    Ok(GradientReport::from_samples(Method::MonteCarlo, cfg.s, cfg.t_end, &samples, None))
}
