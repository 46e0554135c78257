//! Exponential-Euler simulation of the truncated forward equation.
//!
//! Each step samples, per mode, the Brownian increment `ΔW` jointly with the
//! stochastic convolution `∫ e^{(t_{k+1}−r)A} j dW_r` from their exact 3×3
//! Gaussian law. The drift is frozen at the left point and integrated exactly
//! through the semigroup: `X_{k+1} = e^{ΔtA} X_k + c B̄(t_k, X_k) + σ(t_k) conv`
//! with `c = ∫_0^Δt e^{uA} j du`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::spectral::{mat_vec, HVector, Mat2, ModeBasis};
use crate::stats::map_paths;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub steps: usize,
    #[serde(rename = "M")]
    pub paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub s: f64,
    pub t_end: f64,
}

impl SimConfig {
    pub fn new(steps: usize, paths: usize, seed: u64, s: f64, t_end: f64) -> Self {
        SimConfig {
            steps,
            paths,
            seed,
            s,
            t_end,
        }
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if self.steps == 0 || self.paths == 0 {
            return Err(Error::InvalidParams("steps and M must be positive".into()));
        }
        if !(0.0 <= self.s && self.s < self.t_end && self.t_end <= horizon * (1.0 + 1e-12)) {
            return Err(Error::InvalidParams(format!(
                "window [{}, {}] must satisfy 0 <= s < t_end <= T = {horizon}",
                self.s, self.t_end
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.s) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.s + self.dt() * k as f64
        }
    }
}

/// Built-in drifts `B̄(t, x) ∈ U`, acting on the first state component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    Zero,
    /// `B̄ ≡ u₀`.
    Constant(Vec<f64>),
    /// `B̄_n(x) = c tanh(x1_n) / n`.
    Saturating { amplitude: f64 },
    /// `B̄_n(x) = c clamp(x1_n, −1, 1) / n`; Lipschitz but not differentiable.
    Clipped { amplitude: f64 },
}

impl DriftSpec {
    pub fn is_zero(&self) -> bool {
        match self {
            DriftSpec::Zero => true,
            DriftSpec::Constant(u) => u.iter().all(|&v| v == 0.0),
            DriftSpec::Saturating { amplitude } | DriftSpec::Clipped { amplitude } => *amplitude == 0.0,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, DriftSpec::Clipped { .. })
    }

    /// Writes `B̄(t, x)` into `out`.
    pub fn eval(&self, x: &HVector, out: &mut [f64]) {
        match self {
            DriftSpec::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            DriftSpec::Constant(u) => out.copy_from_slice(u),
            DriftSpec::Saturating { amplitude } => {
                for (n, o) in out.iter_mut().enumerate() {
                    *o = amplitude * x.c1[n].tanh() / (n + 1) as f64;
                }
            }
            DriftSpec::Clipped { amplitude } => {
                for (n, o) in out.iter_mut().enumerate() {
                    *o = amplitude * x.c1[n].clamp(-1.0, 1.0) / (n + 1) as f64;
                }
            }
        }
    }

    /// Writes `∇B̄(t, x) v` into `out`.
    pub fn jacobian_apply(&self, x: &HVector, v: &HVector, out: &mut [f64]) -> Result<()> {
        match self {
            DriftSpec::Zero | DriftSpec::Constant(_) => out.iter_mut().for_each(|o| *o = 0.0),
            DriftSpec::Saturating { amplitude } => {
                for (n, o) in out.iter_mut().enumerate() {
                    let sech = 1.0 / x.c1[n].cosh();
                    *o = amplitude * sech * sech * v.c1[n] / (n + 1) as f64;
                }
            }
            DriftSpec::Clipped { .. } => return Err(Error::NonDifferentiableDrift),
        }
        Ok(())
    }

    /// Lipschitz constant `L_B` from `H` to `U`.
    pub fn lipschitz(&self, basis: &ModeBasis) -> f64 {
        match self {
            DriftSpec::Zero | DriftSpec::Constant(_) => 0.0,
            DriftSpec::Saturating { amplitude } | DriftSpec::Clipped { amplitude } => {
                let worst = (0..basis.n_modes())
                    .map(|n| 1.0 / ((n + 1) as f64 * basis.u_weight()[n]))
                    .fold(0.0, f64::max);
                amplitude.abs() * worst
            }
        }
    }

    /// `sup |B̄|_U`.
    pub fn bound(&self, basis: &ModeBasis) -> f64 {
        match self {
            DriftSpec::Zero => 0.0,
            DriftSpec::Constant(u) => u.iter().map(|v| v * v).sum::<f64>().sqrt(),
            DriftSpec::Saturating { amplitude } | DriftSpec::Clipped { amplitude } => {
                amplitude.abs() * (1..=basis.n_modes()).map(|n| 1.0 / (n * n) as f64).sum::<f64>().sqrt()
            }
        }
    }

    /// Checks the Lipschitz and boundedness claims on `samples` random pairs.
    pub fn validate(&self, basis: &ModeBasis, samples: usize, seed: u64) -> Result<()> {
        let n = basis.n_modes();
        if let DriftSpec::Constant(u) = self {
            if u.len() != n {
                return Err(Error::InvalidParams(format!("constant drift has {} modes, basis has {n}", u.len())));
            }
        }
        let (lip, bound) = (self.lipschitz(basis), self.bound(basis));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |scale: f64| {
            HVector::new(
                (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
                (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
            )
        };
        let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
        for i in 0..samples {
            let scale = [0.1, 1.0, 10.0][i % 3];
            let (x, y) = (draw(scale), draw(scale));
            self.eval(&x, &mut bx);
            self.eval(&y, &mut by);
            let nx = bx.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = bx.iter().zip(&by).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if nx > bound * (1.0 + 1e-12) {
                return Err(Error::InvalidParams(format!("drift exceeds its bound: {nx} > {bound}")));
            }
            if diff > lip * basis.norm_h(&(&x - &y)) * (1.0 + 1e-12) + 1e-300 {
                return Err(Error::InvalidParams("drift violates its Lipschitz constant".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    Reference,
    Drifted,
}

/// Per-mode step data: propagator, drift gain `c`, and the lower Cholesky factor
/// of the joint covariance of `(ΔW, conv₁, conv₂)` for `σ ≡ 1`.
#[derive(Debug, Clone)]
struct ModeStep {
    exp: Mat2,
    gain: [f64; 2],
    chol: [[f64; 3]; 3],
}

/// Noise of one step for all modes.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub dw: Vec<f64>,
    pub conv: Vec<[f64; 2]>,
}

impl StepNoise {
    pub fn zeros(n: usize) -> Self {
        StepNoise {
            dw: vec![0.0; n],
            conv: vec![[0.0; 2]; n],
        }
    }
}

/// Streaming path engine for one model and time grid.
#[derive(Debug, Clone)]
pub struct Simulator {
    basis: ModeBasis,
    cfg: SimConfig,
    modes: Vec<ModeStep>,
}

fn cholesky3(c: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut l = [[0.0; 3]; 3];
    l[0][0] = c[0][0].sqrt();
    l[1][0] = c[1][0] / l[0][0];
    l[2][0] = c[2][0] / l[0][0];
    let d11 = c[1][1] - l[1][0] * l[1][0];
    if d11 > 1e-13 * c[1][1] {
        l[1][1] = d11.sqrt();
        l[2][1] = (c[2][1] - l[2][0] * l[1][0]) / l[1][1];
    }
    let d22 = c[2][2] - l[2][0] * l[2][0] - l[2][1] * l[2][1];
    if d22 > 1e-13 * c[2][2] {
        l[2][2] = d22.sqrt();
    }
    l
}

impl Simulator {
    pub fn new(basis: &ModeBasis, cfg: &SimConfig) -> Result<Self> {
        cfg.validate(basis.params().horizon)?;
        let dt = cfg.dt();
        let modes = (0..basis.n_modes())
            .map(|n| {
                let (c, q) = basis.step_moments(n, dt);
                let cov = [[dt, c[0], c[1]], [c[0], q[0][0], q[0][1]], [c[1], q[1][0], q[1][1]]];
                ModeStep {
                    exp: basis.mode_exp(n, dt),
                    gain: c,
                    chol: cholesky3(cov),
                }
            })
            .collect();
        Ok(Simulator {
            basis: basis.clone(),
            cfg: cfg.clone(),
            modes,
        })
    }

    pub fn basis(&self) -> &ModeBasis {
        &self.basis
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Independent stream for one path: the master seed with the path index as stream id.
    pub fn path_rng(&self, path: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(path as u64);
        rng
    }

    /// Draws one step of noise: three standard normals per mode, modes in order.
    pub fn draw_noise(&self, rng: &mut ChaCha8Rng, noise: &mut StepNoise) {
        for (n, m) in self.modes.iter().enumerate() {
            let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let l = &m.chol;
            noise.dw[n] = l[0][0] * z[0];
            noise.conv[n] = [l[1][0] * z[0] + l[1][1] * z[1], l[2][0] * z[0] + l[2][1] * z[1] + l[2][2] * z[2]];
        }
    }

    /// One step `x ← e^{ΔtA} x + c B̄(t_k, x) + σ(t_k) conv`.
    pub fn advance(&self, k: usize, x: &mut HVector, drift: &DriftSpec, noise: &StepNoise, scratch: &mut [f64]) {
        let sig = self.basis.sigma(self.cfg.time(k));
        let with_drift = !matches!(drift, DriftSpec::Zero);
        if with_drift {
            drift.eval(x, scratch);
        }
        for (n, m) in self.modes.iter().enumerate() {
            let mut v = mat_vec(&m.exp, x.mode(n));
            if with_drift {
                v[0] += m.gain[0] * scratch[n];
                v[1] += m.gain[1] * scratch[n];
            }
            v[0] += sig * noise.conv[n][0];
            v[1] += sig * noise.conv[n][1];
            x.set_mode(n, v);
        }
    }

    /// Runs one path. `visit(k, X_k, ΔW_k)` is called before each step; the state at
    /// `t_end` is returned.
    pub fn run_path<F>(&self, path: usize, x0: &HVector, drift: &DriftSpec, mut visit: F) -> HVector
    where
        F: FnMut(usize, &HVector, &[f64]),
    {
        let mut rng = self.path_rng(path);
        let mut noise = StepNoise::zeros(self.n_modes());
        let mut scratch = vec![0.0; self.n_modes()];
        let mut x = x0.clone();
        for k in 0..self.cfg.steps {
            self.draw_noise(&mut rng, &mut noise);
            visit(k, &x, &noise.dw);
            self.advance(k, &mut x, drift, &noise, &mut scratch);
        }
        x
    }

    /// Like [`run_path`](Self::run_path) but also propagates the first variation
    /// `Ξ_{k+1} = e^{ΔtA} Ξ_k + c ∇B̄(X_k) Ξ_k`, `Ξ_0 = h`. Returns `(X_t, Ξ_t)`.
    pub fn run_path_with_variation(
        &self,
        path: usize,
        x0: &HVector,
        drift: &DriftSpec,
        h: &HVector,
    ) -> Result<(HVector, HVector)> {
        if !drift.is_differentiable() {
            return Err(Error::NonDifferentiableDrift);
        }
        let mut rng = self.path_rng(path);
        let mut noise = StepNoise::zeros(self.n_modes());
        let mut scratch = vec![0.0; self.n_modes()];
        let mut jac = vec![0.0; self.n_modes()];
        let (mut x, mut xi) = (x0.clone(), h.clone());
        for k in 0..self.cfg.steps {
            self.draw_noise(&mut rng, &mut noise);
            drift.jacobian_apply(&x, &xi, &mut jac)?;
            for (n, m) in self.modes.iter().enumerate() {
                let mut v = mat_vec(&m.exp, xi.mode(n));
                v[0] += m.gain[0] * jac[n];
                v[1] += m.gain[1] * jac[n];
                xi.set_mode(n, v);
            }
            self.advance(k, &mut x, drift, &noise, &mut scratch);
        }
        Ok((x, xi))
    }
}

/// Materialized paths: increments `M × steps × N` and states `M × (steps+1) × 2N`
/// (each state stored as `[c1..., c2...]`).
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub n_modes: usize,
    pub cfg: SimConfig,
    pub measure: Measure,
    dw: Vec<f64>,
    x: Vec<f64>,
}

impl PathBundle {
    pub fn paths(&self) -> usize {
        self.cfg.paths
    }

    pub fn steps(&self) -> usize {
        self.cfg.steps
    }

    /// `ΔW` on `[t_k, t_{k+1}]` for one path.
    pub fn dw(&self, path: usize, k: usize) -> &[f64] {
        let n = self.n_modes;
        let off = (path * self.cfg.steps + k) * n;
        &self.dw[off..off + n]
    }

    /// Flat state `[c1..., c2...]` at `t_k`.
    pub fn state_flat(&self, path: usize, k: usize) -> &[f64] {
        let w = 2 * self.n_modes;
        let off = (path * (self.cfg.steps + 1) + k) * w;
        &self.x[off..off + w]
    }

    pub fn state(&self, path: usize, k: usize) -> HVector {
        HVector::from_flat(self.state_flat(path, k))
    }

    /// Binary dump: header `{N, steps, M, seed}` as little-endian `u64`, then all
    /// states as little-endian `f64`, path-major, time-major within a path,
    /// each state as `[c1..., c2...]`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in [self.n_modes as u64, self.cfg.steps as u64, self.cfg.paths as u64, self.cfg.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.x {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// CSV of per-time mean and variance of every mode coefficient.
    pub fn write_moments_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,mode,mean_c1,mean_c2,var_c1,var_c2")?;
        let (m, n) = (self.paths() as f64, self.n_modes);
        for k in 0..=self.steps() {
            for mode in 0..n {
                let (mut s1, mut s2, mut q1, mut q2) = (0.0, 0.0, 0.0, 0.0);
                for p in 0..self.paths() {
                    let x = self.state_flat(p, k);
                    s1 += x[mode];
                    s2 += x[n + mode];
                    q1 += x[mode] * x[mode];
                    q2 += x[n + mode] * x[n + mode];
                }
                let (m1, m2) = (s1 / m, s2 / m);
                let denom = (m - 1.0).max(1.0);
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    self.cfg.time(k),
                    mode + 1,
                    m1,
                    m2,
                    (q1 - m * m1 * m1) / denom,
                    (q2 - m * m2 * m2) / denom
                )?;
            }
        }
        Ok(())
    }
}

fn simulate(basis: &ModeBasis, cfg: &SimConfig, drift: &DriftSpec, x0: &HVector, measure: Measure) -> Result<PathBundle> {
    if x0.len() != basis.n_modes() {
        return Err(Error::InvalidParams("initial state has the wrong mode count".into()));
    }
    let sim = Simulator::new(basis, cfg)?;
    let n = basis.n_modes();
    let per_path = map_paths(cfg.paths, |p| {
        let mut dw = Vec::with_capacity(cfg.steps * n);
        let mut xs = Vec::with_capacity((cfg.steps + 1) * 2 * n);
        let last = sim.run_path(p, x0, drift, |_, x, d| {
            dw.extend_from_slice(d);
            xs.extend_from_slice(&x.c1);
            xs.extend_from_slice(&x.c2);
        });
        xs.extend_from_slice(&last.c1);
        xs.extend_from_slice(&last.c2);
        (dw, xs)
    });
    let mut dw = Vec::with_capacity(cfg.paths * cfg.steps * n);
    let mut x = Vec::with_capacity(cfg.paths * (cfg.steps + 1) * 2 * n);
    for (d, s) in per_path {
        dw.extend_from_slice(&d);
        x.extend_from_slice(&s);
    }
    Ok(PathBundle {
        n_modes: n,
        cfg: cfg.clone(),
        measure,
        dw,
        x,
    })
}

/// Driftless paths (the reference measure).
pub fn simulate_reference(basis: &ModeBasis, cfg: &SimConfig, x0: &HVector) -> Result<PathBundle> {
    simulate(basis, cfg, &DriftSpec::Zero, x0, Measure::Reference)
}

pub fn simulate_drifted(basis: &ModeBasis, cfg: &SimConfig, drift: &DriftSpec, x0: &HVector) -> Result<PathBundle> {
    drift.validate(basis, 64, cfg.seed ^ 0x5eed)?;
    simulate(basis, cfg, drift, x0, Measure::Drifted)
}

/// Log of the Girsanov density along one path,
/// `Σ_k ⟨θ_k, ΔW_k⟩ − ½ |θ_k|² Δt` with `θ_k = sign · σ(t_k)^{-1} B̄(t_k, X_k)`.
fn log_density(bundle: &PathBundle, basis: &ModeBasis, drift: &DriftSpec, path: usize, sign: f64) -> f64 {
    let cfg = &bundle.cfg;
    let dt = cfg.dt();
    let mut b = vec![0.0; bundle.n_modes];
    let mut acc = 0.0;
    for k in 0..cfg.steps {
        drift.eval(&bundle.state(path, k), &mut b);
        let inv = sign / basis.sigma(cfg.time(k));
        for (bn, dw) in b.iter().zip(bundle.dw(path, k)) {
            let th = inv * bn;
            acc += th * dw - 0.5 * th * th * dt;
        }
    }
    acc
}

fn weights(bundle: &PathBundle, basis: &ModeBasis, drift: &DriftSpec, sign: f64) -> Result<Vec<f64>> {
    let logs = map_paths(bundle.paths(), |p| log_density(bundle, basis, drift, p, sign));
    logs.into_iter()
        .enumerate()
        .map(|(path, lw)| {
            if lw.abs() > 700.0 || !lw.is_finite() {
                Err(Error::WeightOverflow { path, log_weight: lw })
            } else {
                Ok(lw.exp())
            }
        })
        .collect()
}

/// Weights turning reference-measure averages into drifted-law averages:
/// `E_drift[f(X)] ≈ mean(w · f(X^ref))`.
pub fn girsanov_weight(bundle: &PathBundle, basis: &ModeBasis, drift: &DriftSpec) -> Result<Vec<f64>> {
    if bundle.measure != Measure::Reference {
        return Err(Error::InvalidParams("Girsanov reweighting expects a reference bundle".into()));
    }
    weights(bundle, basis, drift, 1.0)
}

/// The density `Ψ = dP̃/dP` evaluated on drifted paths,
/// `exp(−Σ⟨θ_k, ΔW_k⟩ − ½Σ|θ_k|²Δt)`; under `P̃` the paths are driftless.
pub fn girsanov_density_psi(bundle: &PathBundle, basis: &ModeBasis, drift: &DriftSpec) -> Result<Vec<f64>> {
    if bundle.measure != Measure::Drifted {
        return Err(Error::InvalidParams("the density Ψ is defined on drifted paths".into()));
    }
    weights(bundle, basis, drift, -1.0)
}

/// First variation `Ξ` along every path of the drifted scheme.
pub fn first_variation(
    basis: &ModeBasis,
    cfg: &SimConfig,
    drift: &DriftSpec,
    x0: &HVector,
    h: &HVector,
) -> Result<Vec<HVector>> {
    if !drift.is_differentiable() {
        return Err(Error::NonDifferentiableDrift);
    }
    let sim = Simulator::new(basis, cfg)?;
    if drift.is_zero() {
        let exact = basis.apply_semigroup(cfg.t_end - cfg.s, h);
        return Ok(vec![exact; cfg.paths]);
    }
    map_paths(cfg.paths, |p| sim.run_path_with_variation(p, x0, drift, h).map(|(_, xi)| xi))
        .into_iter()
        .collect()
}
