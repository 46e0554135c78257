//! Finite spectral truncation of the wave and damped-wave generators.
//!
//! Every operator in the laboratory is diagonal in the eigenbasis `e_n` of the
//! positive operator `Λ`, with eigenvalues `μ_n = n^δ`. A state in `H` is stored
//! as two arrays of raw mode coefficients (`c1`, `c2`); the norm of `H` is a
//! weighted Euclidean norm whose weights depend on the model:
//!
//! | kind             | `H`               | weights `(c1, c2)`       |
//! |------------------|-------------------|--------------------------|
//! | `Wave`           | `U × V'`          | `(1, μ_n^{-1/2})`        |
//! | `Damped`         | `U × U`           | `(1, 1)`                 |
//! | `DampedSmoothed` | `V_ε × V_ε`       | `(μ_n^{-ε}, μ_n^{-ε})`   |
//!
//! Noise-space vectors `u ∈ U` are always stored in a `U`-orthonormal basis, so
//! the cylindrical Wiener process has independent standard components and the
//! injection `J` maps the `n`-th basis vector of `U` to raw coordinates `(0, 1)`
//! in every model.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

/// Real 2×2 matrix, row-major.
pub type Mat2 = [[f64; 2]; 2];

pub(crate) fn mat_vec(m: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Wave,
    Damped,
    DampedSmoothed,
}

impl ModelKind {
    pub fn is_damped(self) -> bool {
        !matches!(self, ModelKind::Wave)
    }
}

/// Time profile of the scalar noise intensity `σ(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Sigma {
    Constant(f64),
    /// `mean + amplitude * sin(frequency * t)`
    Sinusoid {
        mean: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl Sigma {
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Sigma::Constant(c) => c,
            Sigma::Sinusoid {
                mean,
                amplitude,
                frequency,
            } => mean + amplitude * (frequency * t).sin(),
        }
    }

    /// Returns the profile multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Sigma {
        match *self {
            Sigma::Constant(c) => Sigma::Constant(c * factor),
            Sigma::Sinusoid {
                mean,
                amplitude,
                frequency,
            } => Sigma::Sinusoid {
                mean: mean * factor,
                amplitude: amplitude * factor,
                frequency,
            },
        }
    }
}

impl Default for Sigma {
    fn default() -> Self {
        Sigma::Constant(1.0)
    }
}

/// Model description. Key names match the structured config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub kind: ModelKind,
    #[serde(rename = "N")]
    pub n_modes: usize,
    pub delta: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub eps: f64,
    #[serde(default)]
    pub sigma: Sigma,
    #[serde(rename = "T")]
    pub horizon: f64,
}

const SIGMA_SAMPLES: usize = 4096;

impl ModelParams {
    pub fn wave(n_modes: usize, delta: f64) -> Self {
        ModelParams {
            kind: ModelKind::Wave,
            n_modes,
            delta,
            rho: 0.0,
            alpha: 0.0,
            eps: 0.0,
            sigma: Sigma::Constant(1.0),
            horizon: 1.0,
        }
    }

    pub fn damped(n_modes: usize, delta: f64, rho: f64, alpha: f64) -> Self {
        ModelParams {
            kind: ModelKind::Damped,
            rho,
            alpha,
            ..Self::wave(n_modes, delta)
        }
    }

    pub fn damped_smoothed(n_modes: usize, delta: f64, rho: f64, alpha: f64, eps: f64) -> Self {
        ModelParams {
            kind: ModelKind::DampedSmoothed,
            rho,
            alpha,
            eps,
            ..Self::wave(n_modes, delta)
        }
    }

    pub fn with_sigma(mut self, sigma: Sigma) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    /// `μ_n = n^δ` for the 1-based mode index `n`.
    pub fn eigenvalue(&self, n: usize) -> f64 {
        (n as f64).powf(self.delta)
    }

    /// Bounds of `σ` sampled on a uniform grid of `[0, T]`.
    pub fn sigma_bounds(&self) -> (f64, f64) {
        (0..=SIGMA_SAMPLES)
            .map(|i| self.sigma.eval(self.horizon * i as f64 / SIGMA_SAMPLES as f64))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.n_modes == 0 {
            return bad("N must be positive");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("T must be positive");
        }
        if self.kind.is_damped() {
            if !(self.rho > 0.0 && self.rho.is_finite()) {
                return bad("rho must be positive for damped models");
            }
            if !(self.alpha > 0.0 && self.alpha < 1.0) {
                return bad("alpha must lie in (0, 1)");
            }
        }
        if self.kind == ModelKind::DampedSmoothed && !(self.eps >= 0.0 && self.eps < 0.5) {
            return bad("eps must lie in [0, 1/2)");
        }
        let (lo, hi) = self.sigma_bounds();
        if !(lo > 0.0 && hi.is_finite()) {
            return bad("sigma must be bounded away from zero on [0, T]");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Whether the truncated operators stay trace class as `N → ∞`.
///
/// Wave: `δ > 1`. Damped: `δ > 1/α`. DampedSmoothed: `δ > 1/(2ε + α)`.
pub fn check_trace_condition(params: &ModelParams) -> bool {
    match params.kind {
        ModelKind::Wave => params.delta > 1.0,
        ModelKind::Damped => params.delta * params.alpha > 1.0,
        ModelKind::DampedSmoothed => params.delta * (2.0 * params.eps + params.alpha) > 1.0,
    }
}

/// A vector of `H` as raw mode coefficients of its two components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HVector {
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

impl HVector {
    pub fn new(c1: Vec<f64>, c2: Vec<f64>) -> Self {
        assert_eq!(c1.len(), c2.len(), "component lengths differ");
        HVector { c1, c2 }
    }

    pub fn zeros(n: usize) -> Self {
        HVector {
            c1: vec![0.0; n],
            c2: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.c1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c1.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.c1.iter().chain(&self.c2).all(|&v| v == 0.0)
    }

    #[inline]
    pub fn mode(&self, n: usize) -> [f64; 2] {
        [self.c1[n], self.c2[n]]
    }

    #[inline]
    pub fn set_mode(&mut self, n: usize, v: [f64; 2]) {
        self.c1[n] = v[0];
        self.c2[n] = v[1];
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &HVector) {
        for (x, y) in self.c1.iter_mut().zip(&other.c1) {
            *x += a * y;
        }
        for (x, y) in self.c2.iter_mut().zip(&other.c2) {
            *x += a * y;
        }
    }

    /// Flat layout `[c1..., c2...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.c1.clone();
        v.extend_from_slice(&self.c2);
        v
    }

    pub fn from_flat(v: &[f64]) -> Self {
        let n = v.len() / 2;
        HVector::new(v[..n].to_vec(), v[n..].to_vec())
    }
}

impl Add for &HVector {
    type Output = HVector;
    fn add(self, rhs: &HVector) -> HVector {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl Sub for &HVector {
    type Output = HVector;
    fn sub(self, rhs: &HVector) -> HVector {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

impl Mul<f64> for &HVector {
    type Output = HVector;
    fn mul(self, a: f64) -> HVector {
        HVector {
            c1: self.c1.iter().map(|v| v * a).collect(),
            c2: self.c2.iter().map(|v| v * a).collect(),
        }
    }
}

/// Eigen data of one damped 2×2 block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeEigen {
    pub plus: Complex64,
    pub minus: Complex64,
    /// Unit `H`-norm eigenvectors in raw coordinates.
    pub phi_plus: [Complex64; 2],
    pub phi_minus: [Complex64; 2],
}

/// Truncated spectral description of one model.
#[derive(Debug, Clone)]
pub struct ModeBasis {
    params: ModelParams,
    mu: Vec<f64>,
    sqrt_mu: Vec<f64>,
    damping: Vec<f64>,
    u_weight: Vec<f64>,
    v_weight: Vec<f64>,
    eig: Vec<ModeEigen>,
}

const DEGENERACY_TOL: f64 = 1e-10;
const PROJECTION_COND_MAX: f64 = 1e12;

pub fn build_basis(params: &ModelParams) -> Result<ModeBasis> {
    ModeBasis::new(params.clone())
}

impl ModeBasis {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let n_modes = params.n_modes;
        let mu: Vec<f64> = (1..=n_modes).map(|n| params.eigenvalue(n)).collect();
        let sqrt_mu: Vec<f64> = mu.iter().map(|m| m.sqrt()).collect();
        let damping: Vec<f64> = match params.kind {
            ModelKind::Wave => vec![0.0; n_modes],
            _ => mu.iter().map(|m| params.rho * m.powf(params.alpha)).collect(),
        };
        let (u_weight, v_weight): (Vec<f64>, Vec<f64>) = match params.kind {
            ModelKind::Wave => mu.iter().map(|m| (1.0, 1.0 / m.sqrt())).unzip(),
            ModelKind::Damped => mu.iter().map(|_| (1.0, 1.0)).unzip(),
            ModelKind::DampedSmoothed => mu
                .iter()
                .map(|m| (m.powf(-params.eps), m.powf(-params.eps)))
                .unzip(),
        };
        let mut eig = Vec::new();
        if params.kind.is_damped() {
            for (i, &m) in mu.iter().enumerate() {
                let lhs = 4.0 * m.powf(1.0 - 2.0 * params.alpha);
                let rhs = params.rho * params.rho;
                if (lhs - rhs).abs() <= DEGENERACY_TOL * rhs.max(lhs) {
                    return Err(Error::DegenerateMode(i + 1));
                }
                eig.push(damped_eigen(m, damping[i], u_weight[i]));
            }
        }
        Ok(ModeBasis {
            params,
            mu,
            sqrt_mu,
            damping,
            u_weight,
            v_weight,
            eig,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn kind(&self) -> ModelKind {
        self.params.kind
    }

    pub fn n_modes(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn u_weight(&self) -> &[f64] {
        &self.u_weight
    }

    pub fn v_weight(&self) -> &[f64] {
        &self.v_weight
    }

    /// Damped eigen data; empty for the wave model.
    pub fn eigen(&self) -> &[ModeEigen] {
        &self.eig
    }

    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        self.params.sigma.eval(t)
    }

    /// Per-mode generator block in raw coordinates.
    pub fn generator_block(&self, n: usize) -> Mat2 {
        match self.params.kind {
            ModelKind::Wave => [[0.0, 1.0], [-self.mu[n], 0.0]],
            _ => [[0.0, self.sqrt_mu[n]], [-self.sqrt_mu[n], -self.damping[n]]],
        }
    }

    /// Raw coordinates of `J` applied to the `n`-th `U`-basis vector.
    #[inline]
    pub fn j_vector(&self, _n: usize) -> [f64; 2] {
        [0.0, 1.0]
    }

    /// `e^{tA}` restricted to mode `n`.
    pub fn mode_exp(&self, n: usize, t: f64) -> Mat2 {
        if t == 0.0 {
            return [[1.0, 0.0], [0.0, 1.0]];
        }
        match self.params.kind {
            ModelKind::Wave => {
                let r = self.sqrt_mu[n];
                let (s, c) = (r * t).sin_cos();
                [[c, s / r], [-r * s, c]]
            }
            _ => {
                let e = &self.eig[n];
                let a = self.generator_block(n);
                // e^{tA} = e^{tλ⁺} (I + (A − λ⁺) t φ₁(−t(λ⁺ − λ⁻))), φ₁(z) = (e^z − 1)/z
                let z = -(e.plus - e.minus) * t;
                let g = phi1(z) * t;
                let scale = (e.plus * t).exp();
                let mut out = [[0.0; 2]; 2];
                for (i, row) in out.iter_mut().enumerate() {
                    for (j, o) in row.iter_mut().enumerate() {
                        let id = if i == j { 1.0 } else { 0.0 };
                        let v = scale * ((Complex64::new(a[i][j], 0.0) - e.plus * id) * g + id);
                        *o = v.re;
                    }
                }
                out
            }
        }
    }

    pub fn apply_semigroup(&self, t: f64, h: &HVector) -> HVector {
        let mut out = HVector::zeros(self.n_modes());
        for n in 0..self.n_modes() {
            out.set_mode(n, mat_vec(&self.mode_exp(n, t), h.mode(n)));
        }
        out
    }

    pub fn apply_generator(&self, h: &HVector) -> HVector {
        let mut out = HVector::zeros(self.n_modes());
        for n in 0..self.n_modes() {
            out.set_mode(n, mat_vec(&self.generator_block(n), h.mode(n)));
        }
        out
    }

    /// `J a` for a `U`-vector `a`.
    pub fn embed_j(&self, a: &[f64]) -> HVector {
        assert_eq!(a.len(), self.n_modes());
        HVector::new(vec![0.0; a.len()], a.to_vec())
    }

    /// `J₁ a = (0, a)` for a `U`-vector `a`. Differs from `J` only in the
    /// smoothed model, where `J = J₁ Λ^{-ε}`.
    pub fn embed_j1(&self, a: &[f64]) -> HVector {
        assert_eq!(a.len(), self.n_modes());
        match self.params.kind {
            ModelKind::DampedSmoothed => HVector::new(
                vec![0.0; a.len()],
                a.iter()
                    .zip(&self.mu)
                    .map(|(x, m)| x * m.powf(self.params.eps))
                    .collect(),
            ),
            _ => self.embed_j(a),
        }
    }

    pub fn inner_h(&self, a: &HVector, b: &HVector) -> f64 {
        let mut acc = 0.0;
        for n in 0..self.n_modes() {
            let (wu, wv) = (self.u_weight[n], self.v_weight[n]);
            acc += wu * wu * a.c1[n] * b.c1[n] + wv * wv * a.c2[n] * b.c2[n];
        }
        acc
    }

    pub fn norm_h(&self, h: &HVector) -> f64 {
        self.inner_h(h, h).sqrt()
    }

    /// Norm of `K = V × U` for the wave model, weights `(μ_n^{1/2}, 1)`.
    pub fn norm_k(&self, h: &HVector) -> f64 {
        (0..self.n_modes())
            .map(|n| self.mu[n] * h.c1[n] * h.c1[n] + h.c2[n] * h.c2[n])
            .sum::<f64>()
            .sqrt()
    }

    /// Per-mode squared `H`-norm of a raw 2-vector.
    #[inline]
    pub fn mode_norm_sq(&self, n: usize, v: [f64; 2]) -> f64 {
        let (wu, wv) = (self.u_weight[n], self.v_weight[n]);
        wu * wu * v[0] * v[0] + wv * wv * v[1] * v[1]
    }

    /// Largest eigenvalue modulus of mode `n`.
    pub fn mode_frequency(&self, n: usize) -> f64 {
        match self.params.kind {
            ModelKind::Wave => self.sqrt_mu[n],
            _ => self.eig[n].plus.norm().max(self.eig[n].minus.norm()),
        }
    }

    /// Slowest decay rate of mode `n` (zero for the wave group).
    pub fn mode_decay(&self, n: usize) -> f64 {
        match self.params.kind {
            ModelKind::Wave => 0.0,
            _ => -(self.eig[n].plus.re.max(self.eig[n].minus.re)),
        }
    }

    /// Residual `max_± |A_n Φ± − λ± Φ±| / |λ±|` of mode `n`.
    pub fn eigen_residual(&self, n: usize) -> Option<f64> {
        let e = self.eig.get(n)?;
        let a = self.generator_block(n);
        let res = |lam: Complex64, v: [Complex64; 2]| {
            let av0 = v[0] * a[0][0] + v[1] * a[0][1];
            let av1 = v[0] * a[1][0] + v[1] * a[1][1];
            ((av0 - lam * v[0]).norm_sqr() + (av1 - lam * v[1]).norm_sqr()).sqrt() / lam.norm()
        };
        Some(res(e.plus, e.phi_plus).max(res(e.minus, e.phi_minus)))
    }

    /// Coefficients `(h⁺_n, h⁻_n)` of `h` in the eigenbasis `{Φ⁺_n, Φ⁻_n}`.
    pub fn mode_project(&self, h: &HVector) -> Result<Vec<(Complex64, Complex64)>> {
        if !self.params.kind.is_damped() {
            return Err(Error::UnsupportedKind);
        }
        let mut out = Vec::with_capacity(self.n_modes());
        for (n, e) in self.eig.iter().enumerate() {
            let m = [[e.phi_plus[0], e.phi_minus[0]], [e.phi_plus[1], e.phi_minus[1]]];
            let cond = complex_cond2(&m);
            if !(cond <= PROJECTION_COND_MAX) {
                return Err(Error::SingularProjection { mode: n + 1, cond });
            }
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let (b0, b1) = (Complex64::new(h.c1[n], 0.0), Complex64::new(h.c2[n], 0.0));
            let cp = (m[1][1] * b0 - m[0][1] * b1) / det;
            let cm = (m[0][0] * b1 - m[1][0] * b0) / det;
            out.push((cp, cm));
        }
        Ok(out)
    }

    /// `Σ_n |e^{tA} J e_n|²_H` with `σ ≡ 1`.
    pub fn hs_norm_squared(&self, t: f64) -> f64 {
        (0..self.n_modes())
            .map(|n| {
                let e = self.mode_exp(n, t);
                self.mode_norm_sq(n, [e[0][1], e[1][1]])
            })
            .sum()
    }

    /// Trace of the stochastic-convolution covariance, `∫_0^t ‖e^{rA}J‖²_{L₂(U;H)} dr`.
    pub fn convolution_trace(&self, t: f64) -> f64 {
        (0..self.n_modes())
            .map(|n| {
                let (_, q) = self.step_moments(n, t);
                let (wu, wv) = (self.u_weight[n], self.v_weight[n]);
                wu * wu * q[0][0] + wv * wv * q[1][1]
            })
            .sum()
    }

    /// Joint second moments over one step of length `dt` for mode `n`, with `σ ≡ 1`:
    /// `c = ∫_0^dt e^{uA} j du` (covariance of the convolution with `ΔW`) and
    /// `q = ∫_0^dt (e^{uA} j)(e^{uA} j)ᵀ du` (covariance of the convolution).
    pub fn step_moments(&self, n: usize, dt: f64) -> ([f64; 2], Mat2) {
        match self.params.kind {
            ModelKind::Wave => wave_moments(self.sqrt_mu[n], dt),
            _ if self.mode_frequency(n) * dt < 0.5 => {
                // The closed forms below cancel badly on short steps.
                let mut acc = [0.0; 5];
                crate::quadrature::simpson_vec(
                    |u, buf| {
                        let e = self.mode_exp(n, u);
                        let v = [e[0][1], e[1][1]];
                        buf.copy_from_slice(&[v[0], v[1], v[0] * v[0], v[0] * v[1], v[1] * v[1]]);
                    },
                    0.0,
                    dt,
                    256,
                    &mut acc,
                );
                ([acc[0], acc[1]], [[acc[2], acc[3]], [acc[3], acc[4]]])
            }
            _ => {
                let a = self.generator_block(n);
                let e = self.mode_exp(n, dt);
                // c = A^{-1}(e^{dt A} - I) j
                let rhs = [e[0][1], e[1][1] - 1.0];
                let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
                let c = [
                    (a[1][1] * rhs[0] - a[0][1] * rhs[1]) / det,
                    (a[0][0] * rhs[1] - a[1][0] * rhs[0]) / det,
                ];
                // A q + q Aᵀ = (e j)(e j)ᵀ - j jᵀ
                let v = [e[0][1], e[1][1]];
                let r = [v[0] * v[0], v[0] * v[1], v[1] * v[1] - 1.0];
                let m = nalgebra::Matrix3::new(
                    2.0 * a[0][0], 2.0 * a[0][1], 0.0,
                    a[1][0], a[0][0] + a[1][1], a[0][1],
                    0.0, 2.0 * a[1][0], 2.0 * a[1][1],
                );
                let sol = m
                    .lu()
                    .solve(&nalgebra::Vector3::new(r[0], r[1], r[2]))
                    .unwrap_or_else(nalgebra::Vector3::zeros);
                (c, [[sol[0], sol[1]], [sol[1], sol[2]]])
            }
        }
    }
}

fn wave_moments(r: f64, dt: f64) -> ([f64; 2], Mat2) {
    let x = r * dt;
    let (s, co) = x.sin_cos();
    // ∫_0^x sin² = x/2 - sin(2x)/4 and ∫_0^x (1 - cos), with series near zero
    let (sin2_int, one_minus_cos_int) = if x < 1e-2 {
        let x2 = x * x;
        (
            x * x2 * (1.0 / 3.0 - x2 / 15.0 + 2.0 * x2 * x2 / 315.0),
            x2 * (0.5 - x2 / 24.0 + x2 * x2 / 720.0),
        )
    } else {
        (x / 2.0 - (2.0 * x).sin() / 4.0, 1.0 - co)
    };
    let c = [one_minus_cos_int / (r * r), s / r];
    let q11 = sin2_int / (r * r * r);
    let q12 = s * s / (2.0 * r * r);
    let q22 = dt - sin2_int / r;
    (c, [[q11, q12], [q12, q22]])
}

fn damped_eigen(mu: f64, damping: f64, weight: f64) -> ModeEigen {
    let disc = damping * damping - 4.0 * mu;
    let (plus, minus) = if disc < 0.0 {
        let im = (-disc).sqrt() / 2.0;
        (Complex64::new(-damping / 2.0, im), Complex64::new(-damping / 2.0, -im))
    } else {
        // Avoid cancellation in the small root.
        let q = -(damping + disc.sqrt()) / 2.0;
        (Complex64::new(mu / q, 0.0), Complex64::new(q, 0.0))
    };
    let sqrt_mu = Complex64::new(mu.sqrt(), 0.0);
    let normalize = |lam: Complex64| {
        let norm = weight * (mu + lam.norm_sqr()).sqrt();
        [sqrt_mu / norm, lam / norm]
    };
    ModeEigen {
        plus,
        minus,
        phi_plus: normalize(plus),
        phi_minus: normalize(minus),
    }
}

/// `(e^z − 1)/z` without cancellation near zero.
fn phi1(z: Complex64) -> Complex64 {
    if z.norm() < 1e-5 {
        return Complex64::new(1.0, 0.0) + z / 2.0 + z * z / 6.0;
    }
    let (s, c) = z.im.sin_cos();
    let half = (z.im / 2.0).sin();
    let em1 = Complex64::new(z.re.exp_m1() * c - 2.0 * half * half, z.re.exp() * s);
    em1 / z
}

/// 2-norm condition number of a complex 2×2 matrix.
fn complex_cond2(m: &[[Complex64; 2]; 2]) -> f64 {
    // Eigenvalues of the Hermitian matrix MᴴM.
    let col = |j: usize| [m[0][j], m[1][j]];
    let (a, b) = (col(0), col(1));
    let g00 = a[0].norm_sqr() + a[1].norm_sqr();
    let g11 = b[0].norm_sqr() + b[1].norm_sqr();
    let g01 = (a[0].conj() * b[0] + a[1].conj() * b[1]).norm();
    let tr = g00 + g11;
    let det = (g00 * g11 - g01 * g01).max(0.0);
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    let smax = tr / 2.0 + disc;
    let smin = det / smax;
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        (smax / smin).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Independent dense 2×2 matrix exponential: Taylor series with scaling and squaring.
    fn expm_oracle(a: Mat2, t: f64) -> Mat2 {
        let norm = a.iter().flatten().map(|v| (v * t).abs()).sum::<f64>();
        let squarings = (norm.max(1.0).log2().ceil() as i32 + 4).max(0);
        let scale = t / 2f64.powi(squarings);
        let b = [[a[0][0] * scale, a[0][1] * scale], [a[1][0] * scale, a[1][1] * scale]];
        let mul = |x: Mat2, y: Mat2| {
            let mut o = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    o[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
                }
            }
            o
        };
        let mut sum = [[1.0, 0.0], [0.0, 1.0]];
        let mut term = sum;
        for k in 1..30 {
            term = mul(term, b);
            term.iter_mut().flatten().for_each(|v| *v /= k as f64);
            for i in 0..2 {
                for j in 0..2 {
                    sum[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..squarings {
            sum = mul(sum, sum);
        }
        sum
    }

    fn damped_demo() -> ModeBasis {
        // Mode 2 has μ = 4; with α = 1/2, ρ = 1 its block is [[0, 2], [-2, -2]].
        ModeBasis::new(ModelParams::damped(2, 2.0, 1.0, 0.5)).unwrap()
    }

    #[test]
    fn damped_eigenvalues_match_quadratic_roots() {
        let b = damped_demo();
        let e = b.eigen()[1];
        // λ² + 2λ + 4 = 0
        let root = Complex64::new(-1.0, 3f64.sqrt());
        assert!((e.plus - root).norm() < 1e-14);
        assert!((e.minus - root.conj()).norm() < 1e-14);
        for lam in [e.plus, e.minus] {
            assert!((lam * lam + lam * 2.0 + 4.0).norm() < 1e-12);
        }
        assert!(b.eigen_residual(1).unwrap() <= 1e-12);
    }

    #[test]
    fn eigen_invariants_hold_across_regimes() {
        for params in [
            ModelParams::damped(64, 2.0, 1.5, 0.75),
            ModelParams::damped(64, 2.0, 0.3, 0.3),
            ModelParams::damped_smoothed(64, 2.0, 1.0, 0.4, 0.1),
        ] {
            let b = ModeBasis::new(params).unwrap();
            for n in 0..b.n_modes() {
                assert!(b.eigen_residual(n).unwrap() <= 1e-12, "mode {n}");
                let e = b.eigen()[n];
                assert!(e.plus.re < 0.0 && e.minus.re < 0.0);
                for phi in [e.phi_plus, e.phi_minus] {
                    let w = b.u_weight()[n];
                    let norm = (w * w * (phi[0].norm_sqr() + phi[1].norm_sqr())).sqrt();
                    assert!((norm - 1.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn wave_basis_carries_dual_weights_and_no_eigen_data() {
        let b = ModeBasis::new(ModelParams::wave(5, 2.0)).unwrap();
        assert!(b.eigen().is_empty());
        for n in 0..5 {
            assert_eq!(b.u_weight()[n], 1.0);
            assert!((b.v_weight()[n] - b.mu()[n].powf(-0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_mode_is_rejected() {
        // μ_2 = 4, α = 1/4: 4 μ^{1/2} = 8 = ρ².
        let err = ModeBasis::new(ModelParams::damped(3, 2.0, 8f64.sqrt(), 0.25)).unwrap_err();
        assert!(matches!(err, Error::DegenerateMode(2)), "{err}");
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(ModeBasis::new(ModelParams::wave(0, 2.0)).is_err());
        assert!(ModeBasis::new(ModelParams::damped(4, 2.0, 1.0, 1.2)).is_err());
        assert!(ModeBasis::new(ModelParams::damped_smoothed(4, 2.0, 1.0, 0.5, 0.5)).is_err());
        let neg = ModelParams::wave(4, 2.0).with_sigma(Sigma::Sinusoid {
            mean: 0.5,
            amplitude: 1.0,
            frequency: 6.0,
        });
        assert!(ModeBasis::new(neg).is_err());
    }

    #[test]
    fn wave_quarter_period_rotation() {
        let b = ModeBasis::new(ModelParams::wave(1, 2.0)).unwrap();
        let h = HVector::new(vec![0.0], vec![1.0]);
        let out = b.apply_semigroup(PI / 2.0, &h);
        assert!((out.c1[0] - 1.0).abs() < 1e-15 && out.c2[0].abs() < 1e-15);
    }

    #[test]
    fn semigroup_at_zero_is_identity() {
        for b in [ModeBasis::new(ModelParams::wave(4, 2.0)).unwrap(), damped_demo()] {
            let h = HVector::new(vec![0.3; b.n_modes()], vec![-1.2; b.n_modes()]);
            assert_eq!(b.apply_semigroup(0.0, &h), h);
        }
    }

    #[test]
    fn damped_semigroup_matches_dense_expm() {
        let b = damped_demo();
        let block = b.generator_block(1);
        assert_eq!(block, [[0.0, 2.0], [-2.0, -2.0]]);
        let oracle = expm_oracle(block, 1.0);
        let got = b.mode_exp(1, 1.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!((got[i][j] - oracle[i][j]).abs() < 1e-13, "{got:?} vs {oracle:?}");
            }
        }
        let h = HVector::new(vec![0.0, 1.0], vec![0.0, 0.0]);
        let out = b.apply_semigroup(1.0, &h);
        assert!((out.c1[1] - oracle[0][0]).abs() < 1e-13);
        assert!((out.c2[1] - oracle[1][0]).abs() < 1e-13);
    }

    #[test]
    fn overdamped_semigroup_matches_dense_expm() {
        let b = ModeBasis::new(ModelParams::damped(16, 2.0, 1.5, 0.75)).unwrap();
        for n in [0, 7, 15] {
            for t in [1e-3, 0.1, 1.0] {
                let oracle = expm_oracle(b.generator_block(n), t);
                let got = b.mode_exp(n, t);
                for i in 0..2 {
                    for j in 0..2 {
                        assert!((got[i][j] - oracle[i][j]).abs() < 1e-11 * (1.0 + oracle[i][j].abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn wave_generator_maps_velocity_to_position() {
        let b = ModeBasis::new(ModelParams::wave(3, 2.0)).unwrap();
        let h = HVector::new(vec![0.0; 3], vec![1.0, -2.0, 0.5]);
        let out = b.apply_generator(&h);
        assert_eq!(out.c1, vec![1.0, -2.0, 0.5]);
        assert_eq!(out.c2, vec![0.0; 3]);
        assert!(b.apply_generator(&HVector::zeros(3)).is_zero());
    }

    #[test]
    fn generator_is_derivative_of_semigroup() {
        for b in [
            ModeBasis::new(ModelParams::wave(6, 2.0)).unwrap(),
            ModeBasis::new(ModelParams::damped(6, 2.0, 1.5, 0.75)).unwrap(),
        ] {
            let h = HVector::new((0..6).map(|i| 0.1 * i as f64).collect(), vec![0.7; 6]);
            let t = 0.3;
            let base = b.apply_semigroup(t, &h);
            let exact = b.apply_generator(&base);
            let err = |d: f64| {
                let fd = &(&b.apply_semigroup(t + d, &h) - &base) * (1.0 / d);
                let diff = &fd - &exact;
                b.norm_h(&diff)
            };
            let (e1, e2) = (err(1e-4), err(5e-5));
            // first-order forward difference: halving the step halves the error
            let ratio = e1 / e2;
            assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
        }
    }

    #[test]
    fn projection_of_eigenvector_is_unit_coefficient() {
        let b = ModeBasis::new(ModelParams::damped(4, 2.0, 1.5, 0.75)).unwrap();
        let n = 2;
        let phi = b.eigen()[n].phi_plus;
        // Φ⁺ has complex entries in general; use an overdamped (real) mode.
        assert!(phi[1].im.abs() < 1e-15);
        let mut h = HVector::zeros(4);
        h.set_mode(n, [phi[0].re, phi[1].re]);
        let coeffs = b.mode_project(&h).unwrap();
        for (m, (cp, cm)) in coeffs.iter().enumerate() {
            if m == n {
                assert!((cp - 1.0).norm() < 1e-12 && cm.norm() < 1e-12);
            } else {
                assert!(cp.norm() == 0.0 && cm.norm() == 0.0);
            }
        }
        let zero = b.mode_project(&HVector::zeros(4)).unwrap();
        assert!(zero.iter().all(|(a, c)| a.norm() == 0.0 && c.norm() == 0.0));
    }

    #[test]
    fn projection_matches_closed_form_for_velocity_direction() {
        // h = (0, a): unnormalized coefficients are ±a/(λ⁺ − λ⁻); our eigenvectors carry
        // the extra factor 1/|(√μ, λ)|_H, so coefficients scale by that norm.
        let b = ModeBasis::new(ModelParams::damped_smoothed(8, 2.0, 1.0, 0.4, 0.1)).unwrap();
        let a: Vec<f64> = (0..8).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let h = b.embed_j1(&a);
        let coeffs = b.mode_project(&h).unwrap();
        for n in 0..8 {
            let e = b.eigen()[n];
            let mu = b.mu()[n];
            let w = b.u_weight()[n];
            let ak = h.c2[n];
            let norm = |lam: Complex64| w * (mu + lam.norm_sqr()).sqrt();
            let cp = ak / (e.plus - e.minus) * norm(e.plus);
            let cm = ak / (e.minus - e.plus) * norm(e.minus);
            assert!((coeffs[n].0 - cp).norm() < 1e-12 * cp.norm());
            assert!((coeffs[n].1 - cm).norm() < 1e-12 * cm.norm());
            // reconstruction
            let r0 = coeffs[n].0 * e.phi_plus[0] + coeffs[n].1 * e.phi_minus[0];
            let r1 = coeffs[n].0 * e.phi_plus[1] + coeffs[n].1 * e.phi_minus[1];
            assert!(r0.norm() < 1e-12 * ak.abs().max(1.0));
            assert!((r1 - ak).norm() < 1e-12 * ak.abs());
        }
    }

    #[test]
    fn projection_requires_damped_model() {
        let b = ModeBasis::new(ModelParams::wave(2, 2.0)).unwrap();
        assert!(matches!(b.mode_project(&HVector::zeros(2)), Err(Error::UnsupportedKind)));
    }

    #[test]
    fn wave_hs_norm_is_time_independent() {
        let b = ModeBasis::new(ModelParams::wave(32, 2.0)).unwrap();
        let oracle: f64 = (1..=32).map(|n| 1.0 / (n as f64).powi(2)).sum();
        for t in [0.01, 0.7, 3.0] {
            assert!((b.hs_norm_squared(t) - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn wave_hs_truncation_within_tail_bound() {
        let full = ModeBasis::new(ModelParams::wave(64, 2.0)).unwrap();
        let half = ModeBasis::new(ModelParams::wave(32, 2.0)).unwrap();
        let tail: f64 = (33..=64).map(|n| 1.0 / (n as f64).powi(2)).sum();
        let diff = full.hs_norm_squared(0.4) - half.hs_norm_squared(0.4);
        assert!(diff >= 0.0 && diff <= tail + 1e-12);
    }

    #[test]
    fn damped_hs_norm_small_time_slope() {
        // Overdamped high modes relax at rate ρ μ^α, so Σ_n e^{-2ρ n^{δα} t} ~ t^{-1/(δα)}
        // dominates the slow branch n^{δ(θ-α)} e^{-2 n^{δθ} t / ρ} (θ = 1 - α).
        let (delta, alpha) = (2.0, 0.75);
        let b = ModeBasis::new(ModelParams::damped(4096, delta, 1.5, alpha)).unwrap();
        let ts = crate::quadrature::log_space(1e-3, 1e-1, 9);
        let hs: Vec<f64> = ts.iter().map(|&t| b.hs_norm_squared(t)).collect();
        let fit = crate::quadrature::fit_power_law(&ts, &hs);
        let fast = -1.0 / (delta * alpha);
        let theta = 1.0 - alpha;
        let slow = -(theta - alpha) / theta - 1.0 / (delta * theta);
        assert!((fit.slope - fast).abs() < 0.1, "slope {} vs {fast}", fit.slope);
        // integrable singularity: γ_G < 1/2
        assert!(fit.slope > -1.0);
        assert!(fit.slope < slow);
    }

    #[test]
    fn trace_condition_examples() {
        assert!(check_trace_condition(&ModelParams::damped(4, 2.0, 1.5, 0.75)));
        assert!(check_trace_condition(&ModelParams::damped_smoothed(4, 2.0 / 3.0, 1.0, 0.8, 0.4)));
        assert!(!check_trace_condition(&ModelParams::damped(4, 1.0, 1.0, 0.5)));
        assert!(check_trace_condition(&ModelParams::wave(4, 2.0)));
        assert!(!check_trace_condition(&ModelParams::wave(4, 1.0)));
    }

    /// Ratio of successive doubling increments of the convolution trace.
    fn doubling_ratio(make: impl Fn(usize) -> ModelParams) -> (f64, Vec<f64>) {
        let vals: Vec<f64> = [256, 512, 1024, 2048]
            .iter()
            .map(|&n| ModeBasis::new(make(n)).unwrap().convolution_trace(0.5))
            .collect();
        let inc: Vec<f64> = vals.windows(2).map(|w| w[1] - w[0]).collect();
        (inc[2] / inc[1], inc)
    }

    #[test]
    fn trace_condition_governs_convolution_growth() {
        // holds: δα = 3/2
        let (r, _) = doubling_ratio(|n| ModelParams::damped(n, 2.0, 1.5, 0.75));
        assert!(r < 0.75, "ratio {r}");
        // fails: δα = 0.75
        let (r, inc) = doubling_ratio(|n| ModelParams::damped(n, 1.5, 1.0, 0.5));
        assert!(r >= 1.0, "ratio {r}");
        assert!(inc.iter().all(|&d| d > 1e-6));
        // wave: Σ μ^{-1}, δ = 1 fails, δ = 2 holds
        let (r, _) = doubling_ratio(|n| ModelParams::wave(n, 1.0));
        assert!((r - 1.0).abs() < 1e-3);
        let (r, _) = doubling_ratio(|n| ModelParams::wave(n, 2.0));
        assert!((r - 0.5).abs() < 1e-2);
    }

    #[test]
    fn params_round_trip_through_toml() {
        let p = ModelParams::damped_smoothed(16, 2.0, 1.0, 0.4, 0.1).with_sigma(Sigma::Sinusoid {
            mean: 1.0,
            amplitude: 0.25,
            frequency: 3.0,
        });
        let s = p.to_toml_string().unwrap();
        assert!(s.contains("N = 16") && s.contains("T = 1.0"));
        assert_eq!(ModelParams::from_toml_str(&s).unwrap(), p);
        assert!(ModelParams::from_toml_str(&format!("{s}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn step_moments_match_quadrature() {
        for b in [
            ModeBasis::new(ModelParams::wave(40, 2.0)).unwrap(),
            ModeBasis::new(ModelParams::damped(40, 2.0, 1.5, 0.75)).unwrap(),
            ModeBasis::new(ModelParams::damped(40, 2.0, 0.3, 0.3)).unwrap(),
        ] {
            for n in [0, 9, 39] {
                for dt in [1e-4, 1e-2, 0.5] {
                    let (c, q) = b.step_moments(n, dt);
                    let mut acc = [0.0; 5];
                    crate::quadrature::simpson_vec(
                        |u, buf| {
                            let e = b.mode_exp(n, u);
                            let v = [e[0][1], e[1][1]];
                            buf.copy_from_slice(&[v[0], v[1], v[0] * v[0], v[0] * v[1], v[1] * v[1]]);
                        },
                        0.0,
                        dt,
                        200_000,
                        &mut acc,
                    );
                    let got = [c[0], c[1], q[0][0], q[0][1], q[1][1]];
                    for k in 0..5 {
                        let tol = 1e-9 * acc[k].abs() + 1e-15 * dt;
                        assert!((got[k] - acc[k]).abs() <= tol, "{:?} n={n} dt={dt} k={k}: {} vs {}", b.kind(), got[k], acc[k]);
                    }
                }
            }
        }
    }

    fn random_h(n: usize, seed: &[f64]) -> HVector {
        HVector::new(
            (0..n).map(|i| seed[i % seed.len()] * (1.0 + i as f64).sin()).collect(),
            (0..n).map(|i| seed[(i + 1) % seed.len()] * (2.0 + i as f64).cos()).collect(),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn semigroup_property(s in 0.0f64..2.0, t in 0.0f64..2.0,
                              seed in proptest::collection::vec(-1.0f64..1.0, 4),
                              kind in 0usize..3) {
            let params = match kind {
                0 => ModelParams::wave(16, 2.0),
                1 => ModelParams::damped(16, 2.0, 1.5, 0.75),
                _ => ModelParams::damped_smoothed(16, 2.0, 1.0, 0.4, 0.1),
            };
            let b = ModeBasis::new(params).unwrap();
            let h = random_h(16, &seed);
            let lhs = b.apply_semigroup(s, &b.apply_semigroup(t, &h));
            let rhs = b.apply_semigroup(s + t, &h);
            let scale = b.norm_h(&h).max(1e-300);
            prop_assert!(b.norm_h(&(&lhs - &rhs)) <= 1e-12 * scale);
        }

        #[test]
        fn wave_group_is_unitary(t in -5.0f64..5.0, seed in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let b = ModeBasis::new(ModelParams::wave(32, 2.0)).unwrap();
            let h = random_h(32, &seed);
            let before = b.norm_h(&h);
            let after = b.norm_h(&b.apply_semigroup(t, &h));
            prop_assert!((before - after).abs() <= 1e-12 * before.max(1e-300));
        }
    }
}
