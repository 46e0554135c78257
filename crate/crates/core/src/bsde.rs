//! Least-squares Monte Carlo for the backward equation
//!
//! ```text
//! −dY = ψ(t, X, Y, Z) dt + Z σ(t)^{-1} B̄(X) dt − Z dW̃,   Y_T = φ(X_T),
//! ```
//!
//! solved on driftless (reference) paths, together with the semilinear Bismut formula,
//! the identification `Z_s = ∇_x Y_s G(s)` and the mild Kolmogorov residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;

use crate::control::{build_control, ControlRequest, ControlVariant};
use crate::error::{Error, Result};
use crate::estimator::{cell_controls, GradientReport, Method, TestFunctional};
use crate::paths::{simulate_reference, DriftSpec, PathBundle, SimConfig, Simulator};
use crate::quadrature::{fit_power_law, PowerFit};
use crate::regression::{Design, LinearFit};
use crate::spectral::{check_trace_condition, HVector, ModeBasis};
use crate::stats::{map_paths, summarize};

/// Generators `ψ(t, x, y, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Zero,
    AffineY { lambda: f64 },
    /// `a sin(y) + b √(1 + |z|²)`
    LipschitzNonlinear { a: f64, b: f64 },
    /// `q |z|²`, rejected by validation.
    QuadraticZ { q: f64 },
}

impl GeneratorSpec {
    pub fn eval(&self, _t: f64, _x: &HVector, y: f64, z: &[f64]) -> f64 {
        match *self {
            GeneratorSpec::Zero => 0.0,
            GeneratorSpec::AffineY { lambda } => lambda * y,
            GeneratorSpec::LipschitzNonlinear { a, b } => {
                a * y.sin() + b * (1.0 + z.iter().map(|v| v * v).sum::<f64>()).sqrt()
            }
            GeneratorSpec::QuadraticZ { q } => q * z.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, GeneratorSpec::Zero)
    }

    /// `L_ψ`, or `None` when no global constant exists.
    pub fn lipschitz(&self) -> Option<f64> {
        match *self {
            GeneratorSpec::Zero => Some(0.0),
            GeneratorSpec::AffineY { lambda } => Some(lambda.abs()),
            GeneratorSpec::LipschitzNonlinear { a, b } => Some(a.abs().max(b.abs())),
            GeneratorSpec::QuadraticZ { q } => (q == 0.0).then_some(0.0),
        }
    }

    /// `K_ψ` with `|ψ(t, x, 0, 0)| ≤ K_ψ (1 + |x|^m)`.
    pub fn k_psi(&self) -> f64 {
        match *self {
            GeneratorSpec::LipschitzNonlinear { b, .. } => b.abs(),
            _ => 0.0,
        }
    }

    pub fn growth(&self) -> u32 {
        0
    }

    /// Checks the declared constants on random arguments.
    pub fn validate(&self, n_modes: usize, samples: usize, seed: u64) -> Result<()> {
        let params = match *self {
            GeneratorSpec::Zero => vec![],
            GeneratorSpec::AffineY { lambda } => vec![lambda],
            GeneratorSpec::LipschitzNonlinear { a, b } => vec![a, b],
            GeneratorSpec::QuadraticZ { q } => vec![q],
        };
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("generator parameters must be finite".into()));
        }
        let l = self
            .lipschitz()
            .ok_or_else(|| Error::NonLipschitzGenerator(format!("{self:?} grows quadratically in z")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |scale: f64| -> f64 {
            let g: f64 = StandardNormal.sample(&mut rng);
            scale * g
        };
        let x = HVector::zeros(n_modes);
        for _ in 0..samples {
            let (y1, y2) = (draw(10.0), draw(10.0));
            let z1: Vec<f64> = (0..n_modes).map(|_| draw(10.0)).collect();
            let z2: Vec<f64> = (0..n_modes).map(|_| draw(10.0)).collect();
            let dz = z1.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let lhs = (self.eval(0.0, &x, y1, &z1) - self.eval(0.0, &x, y2, &z2)).abs();
            if lhs > l * ((y1 - y2).abs() + dz) * (1.0 + 1e-12) + 1e-12 {
                return Err(Error::NonLipschitzGenerator(format!(
                    "{self:?} violates L_ψ = {l} at sampled arguments"
                )));
            }
            if self.eval(0.0, &x, 0.0, &vec![0.0; n_modes]).abs() > self.k_psi() * (1.0 + 1e-12) {
                return Err(Error::NonLipschitzGenerator(format!("{self:?} violates its growth bound")));
            }
        }
        Ok(())
    }
}

/// Terminal datum `φ(x) + shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSpec {
    pub phi: TestFunctional,
    #[serde(default)]
    pub shift: f64,
}

impl TerminalSpec {
    pub fn new(phi: TestFunctional) -> Self {
        TerminalSpec { phi, shift: 0.0 }
    }

    pub fn eval(&self, basis: &ModeBasis, x: &HVector) -> f64 {
        self.phi.eval(basis, x) + self.shift
    }

    pub fn growth(&self) -> u32 {
        self.phi.growth()
    }

    /// `K_φ` with `|φ(x)| ≤ K_φ (1 + |x|^m)`.
    pub fn k_phi(&self, basis: &ModeBasis) -> f64 {
        self.phi.ck_norm(basis) + self.shift.abs()
    }
}

fn default_degree() -> u32 {
    2
}

fn default_true() -> bool {
    true
}

/// Polynomials up to `degree` in the first `modes` modes (both components),
/// optionally augmented with the profile `φ(e^{(T−t)A}x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionBasis {
    #[serde(default = "default_degree")]
    pub degree: u32,
    #[serde(default)]
    pub modes: Option<usize>,
    #[serde(default = "default_true")]
    pub profile: bool,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis {
            degree: 2,
            modes: None,
            profile: true,
        }
    }
}

impl RegressionBasis {
    pub fn retained_modes(&self, n_modes: usize) -> usize {
        self.modes.unwrap_or(4).min(n_modes)
    }

    pub fn describe(&self, n_modes: usize) -> String {
        let mut s = format!(
            "degree {} polynomials in modes 1..={} (both components)",
            self.degree,
            self.retained_modes(n_modes)
        );
        if self.profile {
            s.push_str(" + terminal profile");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsmcOptions {
    #[serde(default)]
    pub basis: RegressionBasis,
    #[serde(default = "default_max_condition")]
    pub max_condition: f64,
}

fn default_max_condition() -> f64 {
    1e10
}

impl Default for LsmcOptions {
    fn default() -> Self {
        LsmcOptions {
            basis: RegressionBasis::default(),
            max_condition: default_max_condition(),
        }
    }
}

/// Feature map shared by fitting and evaluation.
#[derive(Debug, Clone)]
struct Features {
    n_modes: usize,
    vars: usize,
    monomials: Vec<Vec<usize>>,
    profile: Option<TestFunctional>,
    t_end: f64,
}

impl Features {
    fn new(basis: &ModeBasis, rb: &RegressionBasis, term: &TerminalSpec, t_end: f64) -> Self {
        let n = basis.n_modes();
        let vars = 2 * rb.retained_modes(n);
        let mut monomials = Vec::new();
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..rb.degree {
            let mut next = Vec::new();
            for m in &frontier {
                let start = m.last().copied().unwrap_or(0);
                for v in start..vars {
                    let mut e = m.clone();
                    e.push(v);
                    next.push(e);
                }
            }
            monomials.extend(next.iter().cloned());
            frontier = next;
        }
        Features {
            n_modes: n,
            vars,
            monomials,
            profile: rb.profile.then(|| term.phi.clone()),
            t_end,
        }
    }

    fn width(&self) -> usize {
        self.monomials.len() + usize::from(self.profile.is_some())
    }

    fn variable(&self, x: &[f64], i: usize) -> f64 {
        let m = self.vars / 2;
        if i < m {
            x[i]
        } else {
            x[self.n_modes + i - m]
        }
    }

    fn fill(&self, basis: &ModeBasis, t: f64, x: &[f64], center: &[f64], out: &mut [f64]) {
        let v: Vec<f64> = (0..self.vars).map(|i| self.variable(x, i) - center[i]).collect();
        for (o, m) in out.iter_mut().zip(&self.monomials) {
            *o = m.iter().map(|&i| v[i]).product();
        }
        if let Some(phi) = &self.profile {
            let xt = basis.apply_semigroup(self.t_end - t, &HVector::from_flat(x));
            out[self.monomials.len()] = phi.eval(basis, &xt);
        }
    }
}

/// Regression of `Y` and `Z` at one grid node.
#[derive(Debug, Clone)]
pub struct StepFit {
    pub t: f64,
    center: Vec<f64>,
    y: LinearFit,
    z: LinearFit,
    /// One-step chain, used only to build the `Z` targets of the previous node.
    smooth: LinearFit,
}

impl StepFit {
    pub fn condition(&self) -> f64 {
        self.z.cond
    }
}

/// Output of [`solve_lsmc`]. Per-path arrays are time-major.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub cfg: SimConfig,
    pub generator: GeneratorSpec,
    pub terminal: TerminalSpec,
    pub drift: DriftSpec,
    pub basis_description: String,
    /// `Y_s^{s,x} = v(s, x)`.
    pub y0: f64,
    pub y0_stderr: f64,
    /// `Z_s` from the first-step regression.
    pub z0: Vec<f64>,
    /// `σ(s)`.
    pub sigma0: f64,
    bundle: PathBundle,
    features: Features,
    fits: Vec<Option<StepFit>>,
    y: Vec<f64>,
    z: Vec<f64>,
    psi: Vec<f64>,
    drift_term: Vec<f64>,
}

impl BsdeSolution {
    pub fn bundle(&self) -> &PathBundle {
        &self.bundle
    }

    pub fn n_modes(&self) -> usize {
        self.bundle.n_modes
    }

    pub fn steps(&self) -> usize {
        self.cfg.steps
    }

    pub fn paths(&self) -> usize {
        self.cfg.paths
    }

    /// `Y_{t_k}` on every path, `k = 0..=steps`.
    pub fn y_slice(&self, k: usize) -> &[f64] {
        let m = self.paths();
        &self.y[k * m..(k + 1) * m]
    }

    /// `Z_{t_k}` on one path, `k < steps`.
    pub fn z_at(&self, k: usize, path: usize) -> &[f64] {
        let n = self.n_modes();
        let off = (k * self.paths() + path) * n;
        &self.z[off..off + n]
    }

    /// `ψ(t_k, X, Y, Z)` on every path, `k = 0..=steps`.
    pub fn psi_slice(&self, k: usize) -> &[f64] {
        let m = self.paths();
        &self.psi[k * m..(k + 1) * m]
    }

    /// `Z σ^{-1} B̄(X)` on every path.
    pub fn drift_slice(&self, k: usize) -> &[f64] {
        let m = self.paths();
        &self.drift_term[k * m..(k + 1) * m]
    }

    fn fit(&self, k: usize) -> &StepFit {
        self.fits[k].as_ref().expect("regression at this node is not fitted yet")
    }

    fn fits(&self) -> impl Iterator<Item = &StepFit> {
        self.fits.iter().flatten()
    }

    pub fn conditions(&self) -> Vec<f64> {
        self.fits().map(StepFit::condition).collect()
    }

    /// Regression estimates `(v(t_k, x), ∇v(t_k, x) G(t_k))` at an arbitrary state.
    pub fn evaluate(&self, basis: &ModeBasis, k: usize, x: &HVector) -> (f64, Vec<f64>) {
        let n = self.n_modes();
        if k >= self.steps() {
            let mut z = vec![0.0; n];
            self.eval_z(basis, self.steps() - 1, x, &mut z);
            return (self.terminal.eval(basis, x), z);
        }
        let fit = self.fit(k);
        let mut feat = vec![0.0; self.features.width()];
        self.features.fill(basis, fit.t, &x.to_flat(), &fit.center, &mut feat);
        let mut z = vec![0.0; n];
        fit.z.predict_all(&feat, &mut z);
        let m = fit.y.predict(&feat, 0);
        let mut b = vec![0.0; n];
        self.drift.eval(x, &mut b);
        let y = implicit_step(&self.generator, fit.t, x, m, &z, &b, basis.sigma(fit.t), self.cfg.dt());
        (y, z)
    }

    /// The one-step value chain at `t_k`.
    fn evaluate_smooth(&self, basis: &ModeBasis, k: usize, x: &HVector) -> f64 {
        let fit = self.fit(k);
        let (y, z) = self.evaluate(basis, k, x);
        let mut feat = vec![0.0; self.features.width()];
        self.features.fill(basis, fit.t, &x.to_flat(), &fit.center, &mut feat);
        let mut b = vec![0.0; self.n_modes()];
        self.drift.eval(x, &mut b);
        let sig = basis.sigma(fit.t);
        let extra = z.iter().zip(&b).map(|(a, c)| a * c).sum::<f64>() / sig;
        fit.smooth.predict(&feat, 0) + 0.5 * self.cfg.dt() * (self.generator.eval(fit.t, x, y, &z) + extra)
    }

    fn eval_z(&self, basis: &ModeBasis, k: usize, x: &HVector, out: &mut [f64]) {
        let fit = self.fit(k);
        let mut feat = vec![0.0; self.features.width()];
        self.features.fill(basis, fit.t, &x.to_flat(), &fit.center, &mut feat);
        fit.z.predict_all(&feat, out);
    }

    /// `max_{k,p} |Y_{t_k}| / (1 + |X_{t_k}|^m)`.
    pub fn growth_ratio(&self, basis: &ModeBasis, m: u32) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..=self.steps() {
            for (p, y) in self.y_slice(k).iter().enumerate() {
                let norm = basis.norm_h(&self.bundle.state(p, k));
                worst = worst.max(y.abs() / (1.0 + norm.powi(m as i32)));
            }
        }
        worst
    }

    /// Per-node rows `t, mean_Y, mean_Z_1..N, condition` (the terminal row has no `Z`).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.n_modes();
        let zcols: Vec<String> = (1..=n).map(|i| format!("mean_z_{i}")).collect();
        writeln!(w, "t,mean_y,{},condition", zcols.join(","))?;
        let m = self.paths() as f64;
        for k in 0..=self.steps() {
            let my = self.y_slice(k).iter().sum::<f64>() / m;
            let (zs, cond) = if k < self.steps() {
                let mut acc = vec![0.0; n];
                for p in 0..self.paths() {
                    acc.iter_mut().zip(self.z_at(k, p)).for_each(|(a, v)| *a += v);
                }
                (
                    acc.iter().map(|v| (v / m).to_string()).collect::<Vec<_>>(),
                    self.fit(k).condition().to_string(),
                )
            } else {
                (vec![String::new(); n], String::new())
            };
            writeln!(w, "{},{},{},{}", self.cfg.time(k), my, zs.join(","), cond)?;
        }
        Ok(())
    }
}

/// Solves `y = m + ½Δt ψ̃(t, x, y, z)` by fixed-point iteration.
#[allow(clippy::too_many_arguments)]
fn implicit_step(gen: &GeneratorSpec, t: f64, x: &HVector, m: f64, z: &[f64], bbar: &[f64], sigma: f64, dt: f64) -> f64 {
    let extra: f64 = z.iter().zip(bbar).map(|(a, b)| a * b).sum::<f64>() / sigma;
    let mut y = m;
    for _ in 0..60 {
        let next = m + 0.5 * dt * (gen.eval(t, x, y, z) + extra);
        let done = (next - y).abs() <= 1e-15 * (1.0 + y.abs());
        y = next;
        if done {
            break;
        }
    }
    y
}

pub fn solve_lsmc(
    basis: &ModeBasis,
    cfg: &SimConfig,
    drift: &DriftSpec,
    x0: &HVector,
    gen: &GeneratorSpec,
    term: &TerminalSpec,
) -> Result<BsdeSolution> {
    solve_lsmc_with(basis, cfg, drift, x0, gen, term, &LsmcOptions::default())
}

/// Backward induction with trapezoidal generator weights:
///
/// ```text
/// Z_k = E[(Y_{k+1} − Ŷ_{k+1}(e^{ΔtA}X_k)) ΔW_k | X_k] / Δt
/// Y_k = E[φ(X_N) + Δt (Σ_{j=k+1}^{N−1} ψ̃_j + ½ψ̃_N) | X_k] + ½Δt ψ̃_k
/// ```
///
/// where `ψ̃ = ψ + Z σ^{-1} B̄` and `ψ̃_N` uses `Z_{N−1}`. The `Z` targets use a second,
/// one-step chain `Ŷ_k = E[Ŷ_{k+1} + ½Δt ψ̃_{k+1} | X_k] + ½Δt ψ̃_k` whose fitted gradient is far
/// less noisy near `s`, where the cloud of `X_k` is narrow.
pub fn solve_lsmc_with(
    basis: &ModeBasis,
    cfg: &SimConfig,
    drift: &DriftSpec,
    x0: &HVector,
    gen: &GeneratorSpec,
    term: &TerminalSpec,
    opts: &LsmcOptions,
) -> Result<BsdeSolution> {
    if !check_trace_condition(basis.params()) {
        return Err(Error::InvalidParams("the stochastic convolution is not trace class".into()));
    }
    if cfg.paths < 2 {
        return Err(Error::InvalidParams("LSMC needs at least two paths".into()));
    }
    gen.validate(basis.n_modes(), 256, cfg.seed ^ 0xb5de)?;
    drift.validate(basis, 64, cfg.seed ^ 0x5eed)?;
    let bundle = simulate_reference(basis, cfg, x0)?;
    let (n, m, steps, dt) = (basis.n_modes(), cfg.paths, cfg.steps, cfg.dt());
    let t_end = cfg.t_end;
    let features = Features::new(basis, &opts.basis, term, t_end);
    let width = features.width();

    let mut y = vec![0.0; (steps + 1) * m];
    let mut z = vec![0.0; steps * m * n];
    let mut psi = vec![0.0; (steps + 1) * m];
    let mut drift_term = vec![0.0; (steps + 1) * m];

    let last: Vec<f64> = map_paths(m, |p| term.eval(basis, &bundle.state(p, steps)));
    y[steps * m..].copy_from_slice(&last);
    let mut acc = last.clone();
    let mut smooth_next = last.clone();

    let mut sol = BsdeSolution {
        cfg: cfg.clone(),
        generator: gen.clone(),
        terminal: term.clone(),
        drift: drift.clone(),
        basis_description: opts.basis.describe(n),
        y0: 0.0,
        y0_stderr: 0.0,
        z0: vec![],
        sigma0: basis.sigma(cfg.s),
        bundle,
        features,
        fits: vec![None; steps],
        y: vec![],
        z: vec![],
        psi: vec![],
        drift_term: vec![],
    };

    for k in (0..steps).rev() {
        let tk = cfg.time(k);
        let sig = basis.sigma(tk);
        let vars = sol.features.vars;
        let mut center = vec![0.0; vars];
        for p in 0..m {
            let x = sol.bundle.state_flat(p, k);
            for (i, c) in center.iter_mut().enumerate() {
                *c += sol.features.variable(x, i);
            }
        }
        center.iter_mut().for_each(|c| *c /= m as f64);

        let mut feat = vec![0.0; m * width];
        feat.par_chunks_mut(width).enumerate().for_each(|(p, row)| {
            sol.features.fill(basis, tk, sol.bundle.state_flat(p, k), &center, row);
        });
        let design = Design::new(&feat, width, opts.max_condition, k)?;

        // Z targets with the one-step-ahead baseline removed.
        let ztarget: Vec<f64> = {
            let sol_ref = &sol;
            let rows: Vec<Vec<f64>> = map_paths(m, |p| {
                let xk = sol_ref.bundle.state(p, k);
                let pred = basis.apply_semigroup(dt, &xk);
                let base = if k + 1 == steps {
                    term.eval(basis, &pred)
                } else {
                    sol_ref.evaluate_smooth(basis, k + 1, &pred)
                };
                let d = (smooth_next[p] - base) / dt;
                sol_ref.bundle.dw(p, k).iter().map(|w| d * w).collect()
            });
            rows.concat()
        };
        let zfit = design.solve(&feat, &ztarget, n);
        let zk: Vec<f64> = feat
            .par_chunks(width)
            .flat_map_iter(|row| {
                let mut out = vec![0.0; n];
                zfit.predict_all(row, &mut out);
                out
            })
            .collect();
        z[k * m * n..(k + 1) * m * n].copy_from_slice(&zk);

        let drift_value = |x: &HVector, zz: &[f64], s: f64| -> f64 {
            if drift.is_zero() {
                return 0.0;
            }
            let mut b = vec![0.0; n];
            drift.eval(x, &mut b);
            zz.iter().zip(&b).map(|(a, c)| a * c).sum::<f64>() / s
        };

        if k + 1 == steps {
            let sig_t = basis.sigma(t_end);
            let vals: Vec<(f64, f64)> = map_paths(m, |p| {
                let x = sol.bundle.state(p, steps);
                let zz = &zk[p * n..(p + 1) * n];
                (gen.eval(t_end, &x, last[p], zz), drift_value(&x, zz, sig_t))
            });
            for (p, (g, d)) in vals.into_iter().enumerate() {
                psi[steps * m + p] = g;
                drift_term[steps * m + p] = d;
                acc[p] += 0.5 * dt * (g + d);
            }
        }

        let yfit = design.solve(&feat, &acc, 1);
        let one_step: Vec<f64> = (0..m)
            .map(|p| smooth_next[p] + 0.5 * dt * (psi[(k + 1) * m + p] + drift_term[(k + 1) * m + p]))
            .collect();
        let smooth = design.solve(&feat, &one_step, 1);
        let vals: Vec<(f64, f64, f64)> = map_paths(m, |p| {
            let x = sol.bundle.state(p, k);
            let zz = &zk[p * n..(p + 1) * n];
            let mean = yfit.predict(&feat[p * width..(p + 1) * width], 0);
            let mut b = vec![0.0; n];
            drift.eval(&x, &mut b);
            let yk = implicit_step(gen, tk, &x, mean, zz, &b, sig, dt);
            (yk, gen.eval(tk, &x, yk, zz), drift_value(&x, zz, sig))
        });
        if k == 0 {
            sol.y0_stderr = summarize(&acc).stderr();
        }
        for (p, (yk, g, d)) in vals.into_iter().enumerate() {
            y[k * m + p] = yk;
            psi[k * m + p] = g;
            drift_term[k * m + p] = d;
            acc[p] += dt * (g + d);
            smooth_next[p] = smooth.predict(&feat[p * width..(p + 1) * width], 0) + 0.5 * dt * (g + d);
        }
        sol.fits[k] = Some(StepFit {
            t: tk,
            center,
            y: yfit,
            z: zfit,
            smooth,
        });
    }
    sol.y0 = y[0];
    sol.z0 = z[..n].to_vec();
    sol.y = y;
    sol.z = z;
    sol.psi = psi;
    sol.drift_term = drift_term;
    Ok(sol)
}

/// Reproducing controls `ũ_{h,s,r}` for every grid node `r = t_1, ..., t_N`, cell-averaged on the grid.
#[derive(Debug, Clone)]
pub struct ControlFamily {
    pub variant: ControlVariant,
    pub h: HVector,
    pub cfg: SimConfig,
    cells: Vec<Vec<Vec<f64>>>,
    norms: Vec<f64>,
}

impl ControlFamily {
    pub fn build(basis: &ModeBasis, variant: ControlVariant, h: &HVector, cfg: &SimConfig) -> Result<Self> {
        let built: Vec<Result<(Vec<Vec<f64>>, f64)>> = (1..=cfg.steps)
            .into_par_iter()
            .map(|j| {
                let ctrl = build_control(basis, &ControlRequest::new(variant, h.clone(), cfg.s, cfg.time(j)))?;
                let mut cells = cell_controls(&ctrl, cfg)?;
                cells.truncate(j);
                Ok((cells, ctrl.l2norm()))
            })
            .collect();
        let (cells, norms) = built.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
        Ok(ControlFamily {
            variant,
            h: h.clone(),
            cfg: cfg.clone(),
            cells,
            norms,
        })
    }

    /// `‖ũ_{h,s,t_j}‖_{L²}` for `j = 1..=steps`.
    pub fn l2norm(&self, j: usize) -> f64 {
        self.norms[j - 1]
    }

    /// `δ(ũ_{h,s,t_j})` for `j = 1..=steps` along one path.
    fn divergences(&self, bundle: &PathBundle, path: usize, out: &mut [f64]) {
        for (j, cells) in self.cells.iter().enumerate() {
            out[j] = cells
                .iter()
                .enumerate()
                .map(|(k, u)| u.iter().zip(bundle.dw(path, k)).map(|(a, b)| a * b).sum::<f64>())
                .sum();
        }
    }
}

/// The semilinear Bismut estimate and its three contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct SemilinearReport {
    pub report: GradientReport,
    pub terminal: f64,
    pub generator: f64,
    pub drift: f64,
}

fn same_window(a: &SimConfig, b: &SimConfig) -> bool {
    let tol = 1e-12 * a.t_end.max(1.0);
    a.steps == b.steps && (a.s - b.s).abs() <= tol && (a.t_end - b.t_end).abs() <= tol
}

/// Trapezoidal weights on nodes `from..=N`; at `from = 0` the node value is extrapolated
/// linearly from `t_1, t_2` since `δ(ũ_{h,s,s})` is not defined.
fn node_weights(from: usize, steps: usize) -> Vec<f64> {
    let mut w = vec![0.0; steps + 1];
    for j in from..=steps {
        w[j] = if j == from || j == steps { 0.5 } else { 1.0 };
    }
    if from == 0 {
        let w0 = w[0];
        w[0] = 0.0;
        if steps >= 2 {
            w[1] += 2.0 * w0;
            w[2] -= w0;
        } else {
            w[1] += w0;
        }
    }
    w
}

/// `E⟨∇_x Y_t^{s,x}, h⟩` through the three-term Bismut formula on the solution's paths.
pub fn semilinear_bismut(basis: &ModeBasis, sol: &BsdeSolution, family: &ControlFamily, t: f64) -> Result<SemilinearReport> {
    let cfg = &sol.cfg;
    if !same_window(cfg, &family.cfg) {
        return Err(Error::WindowMismatch("control family and solution use different grids".into()));
    }
    let dt = cfg.dt();
    let from = ((t - cfg.s) / dt).round();
    if from < 0.0 || from >= cfg.steps as f64 || (cfg.s + from * dt - t).abs() > 1e-9 * dt {
        return Err(Error::WindowMismatch(format!("t = {t} is not a grid node before T")));
    }
    let from = from as usize;
    let (m, steps) = (cfg.paths, cfg.steps);
    let w = node_weights(from, steps);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let psi_bar: Vec<f64> = (0..=steps).map(|j| mean(sol.psi_slice(j))).collect();
    let drift_bar: Vec<f64> = (0..=steps).map(|j| mean(sol.drift_slice(j))).collect();
    let x0 = sol.bundle.state(0, 0);
    let base = sol.terminal.eval(basis, &basis.apply_semigroup(cfg.t_end - cfg.s, &x0));

    let parts: Vec<[f64; 3]> = map_paths(m, |p| {
        let mut delta = vec![0.0; steps];
        family.divergences(&sol.bundle, p, &mut delta);
        let terminal = (sol.y_slice(steps)[p] - base) * delta[steps - 1];
        let (mut g, mut d) = (0.0, 0.0);
        for j in 1..=steps {
            if w[j] != 0.0 {
                g += w[j] * (sol.psi_slice(j)[p] - psi_bar[j]) * delta[j - 1];
                d += w[j] * (sol.drift_slice(j)[p] - drift_bar[j]) * delta[j - 1];
            }
        }
        [terminal, g * dt, d * dt]
    });
    let samples: Vec<f64> = parts.iter().map(|v| v[0] + v[1] + v[2]).collect();
    let avg = |i: usize| parts.iter().map(|v| v[i]).sum::<f64>() / m as f64;
    Ok(SemilinearReport {
        report: GradientReport::from_samples(Method::SemilinearBismut, cfg.s, t, &samples, None),
        terminal: avg(0),
        generator: avg(1),
        drift: avg(2),
    })
}

/// Central difference of `v(s, ·)` across two LSMC solves with common noise.
#[allow(clippy::too_many_arguments)]
pub fn fd_bsde_gradient(
    basis: &ModeBasis,
    cfg: &SimConfig,
    drift: &DriftSpec,
    x: &HVector,
    h: &HVector,
    epsilon: f64,
    gen: &GeneratorSpec,
    term: &TerminalSpec,
    opts: &LsmcOptions,
) -> Result<GradientReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParams("finite-difference step must be positive".into()));
    }
    let up = solve_lsmc_with(basis, cfg, drift, &(x + &(h * epsilon)), gen, term, opts)?;
    let dn = solve_lsmc_with(basis, cfg, drift, &(x - &(h * epsilon)), gen, term, opts)?;
    // Y_s = mean(D_1) + ½Δt ψ̃_0 with D_1 the accumulated pathwise target.
    let samples: Vec<f64> = (0..cfg.paths)
        .map(|p| (path_target(&up, p) - path_target(&dn, p)) / (2.0 * epsilon))
        .collect();
    let mut rep = GradientReport::from_samples(Method::FiniteDifference, cfg.s, cfg.s, &samples, None);
    rep.estimate = (up.y0 - dn.y0) / (2.0 * epsilon);
    Ok(rep)
}

/// `φ(X_N) + Δt (Σ_{j=1}^{N−1} ψ̃_j + ½ψ̃_N)` along one path.
fn path_target(sol: &BsdeSolution, p: usize) -> f64 {
    let (steps, dt) = (sol.steps(), sol.cfg.dt());
    let mut acc = sol.y_slice(steps)[p] + 0.5 * dt * (sol.psi_slice(steps)[p] + sol.drift_slice(steps)[p]);
    for j in 1..steps {
        acc += dt * (sol.psi_slice(j)[p] + sol.drift_slice(j)[p]);
    }
    acc
}

/// Gradients `⟨∇_x Y_s, h_n⟩` for `h_n = J e_n`, `n < modes`, from the semilinear Bismut formula.
pub fn bismut_gradients_along_modes(
    basis: &ModeBasis,
    sol: &BsdeSolution,
    variant: ControlVariant,
    modes: usize,
) -> Result<Vec<SemilinearReport>> {
    (0..modes.min(basis.n_modes()))
        .map(|i| {
            let mut a = vec![0.0; basis.n_modes()];
            a[i] = 1.0;
            let h = variant.direction(basis, &a);
            let family = ControlFamily::build(basis, variant, &h, &sol.cfg)?;
            semilinear_bismut(basis, sol, &family, sol.cfg.s)
        })
        .collect()
}

/// Relative `ℓ²` distance between the regression `Z_s` and `σ(s) ⟨∇_x Y_s, J e_n⟩` over the supplied modes.
pub fn z_identification_check(sol: &BsdeSolution, gradients: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (z, g) in sol.z0.iter().zip(gradients) {
        let target = sol.sigma0 * g;
        num += (z - target).powi(2);
        den += target * target;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Slope of `log |⟨∇_x Y_s, Ja⟩|` against `log(T − s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct YGradientScaling {
    pub gaps: Vec<f64>,
    pub reports: Vec<GradientReport>,
    pub fit: PowerFit,
}

#[allow(clippy::too_many_arguments)]
pub fn y_gradient_scaling(
    basis: &ModeBasis,
    cfg: &SimConfig,
    drift: &DriftSpec,
    gen: &GeneratorSpec,
    term: &TerminalSpec,
    variant: ControlVariant,
    a: &[f64],
    x0: &HVector,
    s_grid: &[f64],
    opts: &LsmcOptions,
) -> Result<YGradientScaling> {
    let gaps: Vec<f64> = s_grid.iter().map(|s| cfg.t_end - s).collect();
    let (lo, hi) = gaps.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &g| (l.min(g), h.max(g)));
    if !(lo > 0.0) || (hi / lo).log10() < 1.5 - 1e-9 {
        return Err(Error::InvalidParams("s grid must approach T over at least 1.5 decades".into()));
    }
    let h = variant.direction(basis, a);
    let mut reports = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let c = SimConfig { s, ..cfg.clone() };
        let sol = solve_lsmc_with(basis, &c, drift, x0, gen, term, opts)?;
        let family = ControlFamily::build(basis, variant, &h, &c)?;
        reports.push(semilinear_bismut(basis, &sol, &family, s)?.report);
    }
    let mags: Vec<f64> = reports.iter().map(|r| r.estimate.abs()).collect();
    let fit = fit_power_law(&gaps, &mags);
    Ok(YGradientScaling { gaps, reports, fit })
}

/// Factor `a(T − s)` of the linear equation `a(τ) = 1 + λ ∫_0^τ a`, by Picard iteration on a fine grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardResult {
    pub factor: f64,
    pub iterations: usize,
    pub last_change: f64,
}

pub fn picard_affine_factor(lambda: f64, gap: f64, nodes: usize, max_iter: usize, tol: f64) -> PicardResult {
    let h = gap / nodes as f64;
    let mut a = vec![1.0; nodes + 1];
    let mut change = f64::INFINITY;
    let mut it = 0;
    while it < max_iter && change > tol {
        let mut next = vec![1.0; nodes + 1];
        let mut integral = 0.0;
        for i in 1..=nodes {
            integral += 0.5 * h * (a[i - 1] + a[i]);
            next[i] = 1.0 + lambda * integral;
        }
        change = next.iter().zip(&a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        a = next;
        it += 1;
    }
    PicardResult {
        factor: a[nodes],
        iterations: it,
        last_change: change,
    }
}

/// A probe point `(s, x)` for the Kolmogorov residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub s: f64,
    pub x: HVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KolmogorovOptions {
    /// Quadrature nodes on `[s, T]`; even and dividing `steps`.
    pub quad_nodes: usize,
    pub tolerance: f64,
    #[serde(default)]
    pub lsmc: LsmcOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub s: f64,
    pub x_norm: f64,
    pub v: f64,
    pub residual: f64,
    pub stderr: f64,
    pub quad_error: f64,
    /// `3·stderr + quad_error`.
    pub budget: f64,
}

impl ResidualRecord {
    pub fn within_budget(&self) -> bool {
        self.residual.abs() <= self.budget
    }
}

impl fmt::Display for ResidualRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "probe s={} |x|={} v={} residual={} stderr={} quad_error={} budget={} within_budget={}",
            self.s,
            self.x_norm,
            self.v,
            self.residual,
            self.stderr,
            self.quad_error,
            self.budget,
            self.within_budget()
        )
    }
}

/// `R(s, x) = v(s, x) − P̂_{s,T}φ(x) − ∫_s^T P̂_{s,t}[ψ(t, ·, v, ∇v G)](x) dt`, where `v` and `∇v G`
/// come from an LSMC solve and the outer expectations from fresh drifted paths (seed + 1).
#[allow(clippy::too_many_arguments)]
pub fn kolmogorov_residual(
    basis: &ModeBasis,
    cfg: &SimConfig,
    drift: &DriftSpec,
    gen: &GeneratorSpec,
    term: &TerminalSpec,
    probes: &[Probe],
    opts: &KolmogorovOptions,
) -> Result<Vec<ResidualRecord>> {
    let q = opts.quad_nodes;
    if q < 2 || q % 2 != 0 || cfg.steps % q != 0 {
        return Err(Error::InvalidParams(format!(
            "quad_nodes = {q} must be even and divide steps = {}",
            cfg.steps
        )));
    }
    let stride = cfg.steps / q;
    probes
        .iter()
        .map(|probe| {
            let c = SimConfig { s: probe.s, ..cfg.clone() };
            let sol = solve_lsmc_with(basis, &c, drift, &probe.x, gen, term, &opts.lsmc)?;
            let fresh = SimConfig { seed: cfg.seed.wrapping_add(1), ..c.clone() };
            let sim = Simulator::new(basis, &fresh)?;
            let dt = c.dt();
            let pairs: Vec<(f64, f64)> = map_paths(c.paths, |p| {
                let mut g = vec![0.0; q + 1];
                let mut record = |k: usize, x: &HVector| {
                    if k % stride == 0 {
                        let (v, z) = sol.evaluate(basis, k, x);
                        g[k / stride] = gen.eval(c.time(k), x, v, &z);
                    }
                };
                let xt = sim.run_path(p, &probe.x, drift, |k, x, _| record(k, x));
                record(c.steps, &xt);
                let trap = |every: usize| -> f64 {
                    let h = dt * (stride * every) as f64;
                    let idx: Vec<usize> = (0..=q).step_by(every).collect();
                    idx.iter()
                        .enumerate()
                        .map(|(i, &j)| if i == 0 || i + 1 == idx.len() { 0.5 * g[j] } else { g[j] })
                        .sum::<f64>()
                        * h
                };
                let phi = term.eval(basis, &xt);
                (phi + trap(1), phi + trap(2))
            });
            let fine: Vec<f64> = pairs.iter().map(|v| v.0).collect();
            let diff: Vec<f64> = pairs.iter().map(|v| v.0 - v.1).collect();
            let sf = summarize(&fine);
            let quad_error = (diff.iter().sum::<f64>() / diff.len() as f64).abs() / 3.0;
            let stderr = (sf.stderr().powi(2) + sol.y0_stderr.powi(2)).sqrt();
            let budget = 3.0 * stderr + quad_error;
            if budget > opts.tolerance {
                return Err(Error::BudgetExceeded {
                    error: budget,
                    tolerance: opts.tolerance,
                });
            }
            Ok(ResidualRecord {
                s: probe.s,
                x_norm: basis.norm_h(&probe.x),
                v: sol.y0,
                residual: sol.y0 - sf.mean,
                stderr,
                quad_error,
                budget,
            })
        })
        .collect()
}
