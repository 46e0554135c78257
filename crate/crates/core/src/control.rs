//! Reproducing controls: deterministic `ũ` with `∫_s^t e^{(t−τ)A} J σ(τ) ũ(τ) dτ = e^{(t−s)A} h`.
//!
//! Per mode the control is `σ(τ)^{-1} (K₁ψ(τ) + K₂ψ'(τ))` where
//! `ψ(τ) = Φ_{t−s}(τ−s) e^{(τ−s)A} h` and `K = [j | A j]^{-1}`.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::quadrature::{even, fit_power_law, simpson, PowerFit, GAUSS3};
use crate::spectral::{mat_vec, HVector, Mat2, ModeBasis, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVariant {
    /// Wave model, arbitrary direction with finite `K`-norm.
    WaveK,
    /// Wave model, `h = J a`.
    WaveJ,
    /// Damped model, `h = J a`.
    DampedJ,
    /// Smoothed damped model, `h = J a`.
    SmoothedJ,
    /// Smoothed damped model, `h = J₁ a = (0, a)`.
    SmoothedJ1,
}

impl ControlVariant {
    pub fn kind(self) -> ModelKind {
        match self {
            ControlVariant::WaveK | ControlVariant::WaveJ => ModelKind::Wave,
            ControlVariant::DampedJ => ModelKind::Damped,
            ControlVariant::SmoothedJ | ControlVariant::SmoothedJ1 => ModelKind::DampedSmoothed,
        }
    }

    fn needs_velocity_direction(self) -> bool {
        !matches!(self, ControlVariant::WaveK)
    }

    /// Direction `h` built from a noise-space vector `a`: `J₁ a` for
    /// `SmoothedJ1`, `J a` otherwise (a `WaveK` request also gets `J a`).
    pub fn direction(self, basis: &ModeBasis, a: &[f64]) -> HVector {
        match self {
            ControlVariant::SmoothedJ1 => basis.embed_j1(a),
            _ => basis.embed_j(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlRequest {
    pub variant: ControlVariant,
    pub h: HVector,
    pub s: f64,
    pub t: f64,
}

impl ControlRequest {
    pub fn new(variant: ControlVariant, h: HVector, s: f64, t: f64) -> Self {
        ControlRequest { variant, h, s, t }
    }

    fn validate(&self, basis: &ModeBasis) -> Result<()> {
        if basis.kind() != self.variant.kind() {
            return Err(Error::UnsupportedDirection(format!(
                "{:?} control on a {:?} model",
                self.variant,
                basis.kind()
            )));
        }
        if self.h.len() != basis.n_modes() {
            return Err(Error::UnsupportedDirection(format!(
                "direction has {} modes, basis has {}",
                self.h.len(),
                basis.n_modes()
            )));
        }
        if self.variant.needs_velocity_direction() && self.h.c1.iter().any(|&v| v != 0.0) {
            return Err(Error::UnsupportedDirection(format!(
                "{:?} needs a direction with vanishing first component",
                self.variant
            )));
        }
        if !(0.0 <= self.s && self.s < self.t && self.t <= basis.params().horizon * (1.0 + 1e-12)) {
            return Err(Error::InvalidTime {
                tau: self.t,
                t_end: basis.params().horizon,
            });
        }
        Ok(())
    }
}

/// Normalized bump `Φ(τ) = 30 τ²(t−τ)² / t⁵` and its derivative.
pub fn bump_profile(t_end: f64, tau: f64) -> Result<(f64, f64)> {
    if !(t_end > 0.0) || !(0.0..=t_end).contains(&tau) {
        return Err(Error::InvalidTime { tau, t_end });
    }
    Ok(bump(t_end, tau))
}

#[inline]
fn bump(l: f64, r: f64) -> (f64, f64) {
    let c = 30.0 / l.powi(5);
    let q = l - r;
    (c * r * r * q * q, c * 2.0 * r * q * (q - r))
}

/// `[j | A j]^{-1}` for one mode block, with `j = (0, 1)`.
fn gain(a: &Mat2) -> Mat2 {
    [[-a[1][1] / a[0][1], 1.0], [1.0 / a[0][1], 0.0]]
}

pub const DEFAULT_SAMPLE_STEPS: usize = 512;

#[derive(Debug, Clone)]
pub struct Control {
    basis: ModeBasis,
    variant: ControlVariant,
    s: f64,
    t: f64,
    h: HVector,
    blocks: Vec<Mat2>,
    gains: Vec<Mat2>,
    sample_times: Vec<f64>,
    samples: Vec<Vec<f64>>,
    l2norm: f64,
}

pub fn build_control(basis: &ModeBasis, req: &ControlRequest) -> Result<Control> {
    build_control_with_samples(basis, req, DEFAULT_SAMPLE_STEPS)
}

pub fn build_control_with_samples(basis: &ModeBasis, req: &ControlRequest, steps: usize) -> Result<Control> {
    req.validate(basis)?;
    let blocks: Vec<Mat2> = (0..basis.n_modes()).map(|n| basis.generator_block(n)).collect();
    let gains = blocks.iter().map(gain).collect();
    let mut ctrl = Control {
        basis: basis.clone(),
        variant: req.variant,
        s: req.s,
        t: req.t,
        h: req.h.clone(),
        blocks,
        gains,
        sample_times: Vec::new(),
        samples: Vec::new(),
        l2norm: 0.0,
    };
    ctrl.l2norm = ctrl.compute_l2norm();
    ctrl.resample(steps);
    Ok(ctrl)
}

impl Control {
    pub fn variant(&self) -> ControlVariant {
        self.variant
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn direction(&self) -> &HVector {
        &self.h
    }

    pub fn n_modes(&self) -> usize {
        self.h.len()
    }

    /// `‖ũ‖_{L²(s,t;U)}`.
    pub fn l2norm(&self) -> f64 {
        self.l2norm
    }

    pub fn sample_times(&self) -> &[f64] {
        &self.sample_times
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    /// Per-mode gain `K = [j | A j]^{-1}`; rows are `K₁`, `K₂`.
    pub fn gain(&self, n: usize) -> Mat2 {
        self.gains[n]
    }

    /// Re-samples the control on a uniform grid of `steps` cells over `[s, t]`.
    pub fn resample(&mut self, steps: usize) {
        let steps = steps.max(1);
        let dt = (self.t - self.s) / steps as f64;
        self.sample_times = (0..=steps).map(|k| self.s + dt * k as f64).collect();
        self.samples = self.sample_times.iter().map(|&tau| self.eval(tau)).collect();
    }

    /// Mode `n` of the control at local time `r = τ − s`, before dividing by `σ`.
    #[inline]
    fn mode_local(&self, n: usize, r: f64) -> f64 {
        let (phi, dphi) = bump(self.t - self.s, r);
        let w = mat_vec(&self.basis.mode_exp(n, r), self.h.mode(n));
        self.combine(n, w, phi, dphi)
    }

    #[inline]
    fn combine(&self, n: usize, w: [f64; 2], phi: f64, dphi: f64) -> f64 {
        let aw = mat_vec(&self.blocks[n], w);
        let k = &self.gains[n];
        let psi = [phi * w[0], phi * w[1]];
        let dpsi = [dphi * w[0] + phi * aw[0], dphi * w[1] + phi * aw[1]];
        k[0][0] * psi[0] + k[0][1] * psi[1] + k[1][0] * dpsi[0] + k[1][1] * dpsi[1]
    }

    /// `ũ(τ)`; zero outside `(s, t)`.
    pub fn eval(&self, tau: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_modes()];
        self.eval_into(tau, &mut out);
        out
    }

    pub fn eval_into(&self, tau: f64, out: &mut [f64]) {
        let r = tau - self.s;
        if r <= 0.0 || tau >= self.t {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let inv_sigma = 1.0 / self.basis.sigma(tau);
        for (n, o) in out.iter_mut().enumerate() {
            *o = inv_sigma * self.mode_local(n, r);
        }
    }

    /// Average of `ũ` over `[a, b]` by three-point Gauss-Legendre.
    pub fn cell_average(&self, a: f64, b: f64, out: &mut [f64]) {
        let (mid, half) = ((a + b) / 2.0, (b - a) / 2.0);
        let mut buf = vec![0.0; out.len()];
        out.iter_mut().for_each(|o| *o = 0.0);
        for &(x, w) in &GAUSS3 {
            self.eval_into(mid + half * x, &mut buf);
            for (o, v) in out.iter_mut().zip(&buf) {
                *o += 0.5 * w * v;
            }
        }
    }

    fn compute_l2norm(&self) -> f64 {
        let len = self.t - self.s;
        let mut total = 0.0;
        for n in 0..self.n_modes() {
            if self.h.mode(n) == [0.0, 0.0] {
                continue;
            }
            let decay = self.basis.mode_decay(n);
            let window = if decay > 0.0 { len.min(60.0 / decay) } else { len };
            let freq = self.basis.mode_frequency(n);
            let panels = even(((16.0 * freq * window).ceil() as usize).clamp(256, 1 << 22));
            let step = window / panels as f64;
            let prop = self.basis.mode_exp(n, step);
            let mut w = self.h.mode(n);
            let mut acc = 0.0;
            for k in 0..=panels {
                let r = step * k as f64;
                let (phi, dphi) = bump(len, r.min(len));
                let u = self.combine(n, w, phi, dphi) / self.basis.sigma(self.s + r);
                let wt = if k == 0 || k == panels {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += wt * u * u;
                w = mat_vec(&prop, w);
            }
            total += acc * step / 3.0;
        }
        total.sqrt()
    }

    /// CSV with columns `tau,mode,coefficient` (1-based mode index) over the stored samples.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tau,mode,coefficient")?;
        for (tau, row) in self.sample_times.iter().zip(&self.samples) {
            for (n, v) in row.iter().enumerate() {
                writeln!(w, "{},{},{}", tau, n + 1, v)?;
            }
        }
        Ok(())
    }
}

/// `|∫_s^t e^{(t−τ)A} J σ(τ) ũ(τ) dτ − e^{(t−s)A} h|_H / |h|_H` by composite Simpson.
pub fn reproducing_residual(basis: &ModeBasis, ctrl: &Control, req: &ControlRequest, panels: usize) -> f64 {
    let (s, t) = (req.s, req.t);
    let target = basis.apply_semigroup(t - s, &req.h);
    let integral = reproduced_state(basis, ctrl, s, t, panels);
    let err = basis.norm_h(&(&integral - &target));
    let scale = basis.norm_h(&req.h);
    if scale == 0.0 {
        if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        err / scale
    }
}

/// `∫_s^t e^{(t−τ)A} J σ(τ) ũ(τ) dτ` by composite Simpson with `panels` panels.
pub fn reproduced_state(basis: &ModeBasis, ctrl: &Control, s: f64, t: f64, panels: usize) -> HVector {
    let n_modes = basis.n_modes();
    let mut out = vec![0.0; 2 * n_modes];
    let mut u = vec![0.0; n_modes];
    crate::quadrature::simpson_vec(
        |tau, buf| {
            ctrl.eval_into(tau, &mut u);
            let sig = basis.sigma(tau);
            for n in 0..n_modes {
                let e = basis.mode_exp(n, t - tau);
                let v = mat_vec(&e, basis.j_vector(n));
                buf[n] = v[0] * sig * u[n];
                buf[n_modes + n] = v[1] * sig * u[n];
            }
        },
        s,
        t,
        panels,
        &mut out,
    );
    HVector::from_flat(&out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub t: Vec<f64>,
    pub norms: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
}

impl ScalingFit {
    pub fn power_fit(&self) -> PowerFit {
        PowerFit {
            slope: self.slope,
            intercept: self.intercept,
        }
    }
}

/// Log-log slope of `‖ũ_t‖_{L²(0,t;U)}` against `t` for a fixed direction `h`.
pub fn control_norm_scaling(
    basis: &ModeBasis,
    variant: ControlVariant,
    h: &HVector,
    t_grid: &[f64],
) -> Result<ScalingFit> {
    if t_grid.len() < 2 || t_grid.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidParams("scaling needs at least two positive times".into()));
    }
    let norms = t_grid
        .iter()
        .map(|&t| build_control_with_samples(basis, &ControlRequest::new(variant, h.clone(), 0.0, t), 1).map(|c| c.l2norm()))
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_power_law(t_grid, &norms);
    Ok(ScalingFit {
        t: t_grid.to_vec(),
        norms,
        slope: fit.slope,
        intercept: fit.intercept,
    })
}

/// `∫_0^t Φ_t` by composite Simpson, used as a sanity check of the normalization.
pub fn bump_mass(t_end: f64, panels: usize) -> f64 {
    simpson(|r| bump(t_end, r).0, 0.0, t_end, panels)
}
