//! Experiment suites. Each one returns its tables and threshold checks; files are
//! written by the caller only after the whole suite has succeeded.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use bismut_core::estimator::cell_controls;
use bismut_core::quadrature::{fit_power_law, log_space};
use bismut_core::stats::{combined_stderr, map_paths, summarize, variance_stderr};
use bismut_core::{
    bismut_gradients_along_modes, build_control, control_norm_scaling, estimate_expectation, estimate_gradient_bismut,
    estimate_gradient_fd, estimate_gradient_pathwise, fd_bsde_gradient, girsanov_weight, kolmogorov_residual,
    picard_affine_factor, reproducing_residual, semilinear_bismut, simulate_reference, solve_lsmc_with,
    y_gradient_scaling, z_identification_check, ControlFamily, ControlRequest, ControlVariant, DriftSpec,
    GeneratorSpec, GradientReport, HVector, KolmogorovOptions, Method, ModeBasis, ModelKind, ModelParams, Sigma,
    SimConfig, Simulator, StepNoise, TestFunctional,
};

use crate::config::*;
use crate::error::{CliError, CliResult};
use crate::oracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
}

/// One acceptance threshold applied to a computed value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub bound: Bound,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            bound: Bound::AtMost,
            passed: value <= threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            bound: Bound::AtLeast,
            passed: value >= threshold,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    /// `(file name, contents)` in write order.
    pub files: Vec<(String, String)>,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn add(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    pub fn checks_csv(&self) -> String {
        let mut s = String::from("name,value,threshold,bound,passed\n");
        for c in &self.checks {
            let bound = match c.bound {
                Bound::AtMost => "at_most",
                Bound::AtLeast => "at_least",
            };
            let _ = writeln!(s, "{},{},{},{},{}", c.name, c.value, c.threshold, bound, c.passed);
        }
        s
    }
}

pub fn execute(cfg: &ExperimentConfig) -> CliResult<Outcome> {
    cfg.validate()?;
    let model = &cfg.model;
    match &cfg.experiment {
        Experiment::Identity(p) => identity(model, p),
        Experiment::Scaling(p) => scaling(model, p),
        Experiment::Hsnorm(p) => hsnorm(model, p),
        Experiment::Structure(p) => structure(model, p),
        Experiment::Isometry(p) => isometry(model, cfg.sim()?, p),
        Experiment::Gradient(p) => gradient(model, cfg.sim()?, p),
        Experiment::Girsanov(p) => girsanov(model, cfg.sim()?, p),
        Experiment::Bsde(p) => bsde(model, cfg.sim()?, p),
        Experiment::Kolmogorov(p) => kolmogorov(model, cfg.sim()?, p),
        Experiment::Zcheck(p) => zcheck(model, cfg.sim()?, p),
        Experiment::YgradScaling(p) => ygrad(model, cfg.sim()?, p),
    }
}

fn report_csv(reports: &[&GradientReport]) -> String {
    let mut buf = Vec::new();
    buf.extend_from_slice(GradientReport::CSV_HEADER.as_bytes());
    buf.push(b'\n');
    for r in reports {
        r.write_csv_row(&mut buf).expect("writing to memory");
    }
    String::from_utf8(buf).expect("csv is utf-8")
}

fn reseed(cfg: &SimConfig, offset: u64) -> SimConfig {
    SimConfig {
        seed: cfg.seed.wrapping_add(offset),
        ..cfg.clone()
    }
}

fn identity(model: &ModelParams, p: &IdentityParams) -> CliResult<Outcome> {
    if p.panels.len() < 2 {
        return Err(CliError::Config("identity needs at least two panel counts".into()));
    }
    let basis = ModeBasis::new(model.clone())?;
    let h = p.direction.resolve(&basis, p.variant)?;
    let mut out = Outcome::default();
    let mut csv = String::from("t,panels,residual\n");
    for &t in &p.times {
        let req = ControlRequest::new(p.variant, h.clone(), p.s, t);
        let ctrl = build_control(&basis, &req)?;
        let res: Vec<f64> = p.panels.iter().map(|&n| reproducing_residual(&basis, &ctrl, &req, n)).collect();
        for (n, r) in p.panels.iter().zip(&res) {
            let _ = writeln!(csv, "{t},{n},{r}");
        }
        let last = res.len() - 1;
        if let Some(max) = p.max_residual {
            out.checks.push(Check::at_most(format!("residual t={t} panels={}", p.panels[last]), res[last], max));
        }
        if let Some(min) = p.min_ratio {
            let name = format!("ratio t={t} panels={}->{}", p.panels[last - 1], p.panels[last]);
            out.checks.push(Check::at_least(name, res[last - 1] / res[last], min));
        }
    }
    out.add("identity.csv", csv);
    Ok(out)
}

fn scaling(model: &ModelParams, p: &ScalingParams) -> CliResult<Outcome> {
    let grid = log_space(p.t_min, p.t_max, p.points);
    let mut out = Outcome::default();
    let mut csv = String::from("case,t,norm\n");
    let mut fits = String::from("case,variant,slope,intercept\n");
    for case in &p.cases {
        let params = case.model.clone().unwrap_or_else(|| model.clone());
        let basis = ModeBasis::new(params)?;
        let h = case.direction.resolve(&basis, case.variant)?;
        let fit = control_norm_scaling(&basis, case.variant, &h, &grid)?;
        for (t, norm) in fit.t.iter().zip(&fit.norms) {
            let _ = writeln!(csv, "{},{t},{norm}", case.name);
        }
        let variant = serde_json::to_value(case.variant).map_err(|e| CliError::Internal(e.to_string()))?;
        let _ = writeln!(fits, "{},{},{},{}", case.name, variant.as_str().unwrap_or(""), fit.slope, fit.intercept);
        if let (Some(expected), Some(tol)) = (case.expected_slope, case.tolerance) {
            out.checks.push(Check::at_most(
                format!("slope deviation {}", case.name),
                (fit.slope - expected).abs(),
                tol,
            ));
        }
    }
    out.add("scaling.csv", csv);
    out.add("scaling_fit.csv", fits);
    Ok(out)
}

fn wave_hs_reference(basis: &ModeBasis) -> f64 {
    basis.mu().iter().map(|m| 1.0 / m).sum()
}

fn hsnorm(model: &ModelParams, p: &HsNormParams) -> CliResult<Outcome> {
    let basis = ModeBasis::new(model.clone())?;
    let mut out = Outcome::default();
    let mut csv = String::from("t,hs_norm_squared,convolution_trace\n");
    let hs: Vec<f64> = p.times.iter().map(|&t| basis.hs_norm_squared(t)).collect();
    for (&t, v) in p.times.iter().zip(&hs) {
        let _ = writeln!(csv, "{t},{v},{}", basis.convolution_trace(t));
    }
    if let Some(tol) = p.tolerance {
        if basis.kind() != ModelKind::Wave {
            return Err(CliError::Config("the constant Hilbert-Schmidt norm holds for the wave model only".into()));
        }
        let reference = wave_hs_reference(&basis);
        let worst = hs.iter().map(|v| (v - reference).abs() / reference).fold(0.0, f64::max);
        out.checks.push(Check::at_most("hs deviation", worst, tol));
    }
    if let (Some(expected), Some(tol)) = (p.expected_slope, p.slope_tolerance) {
        let fit = fit_power_law(&p.times, &hs);
        out.checks.push(Check::at_most("hs slope deviation", (fit.slope - expected).abs(), tol));
    }
    out.add("hsnorm.csv", csv);
    Ok(out)
}

fn random_h(rng: &mut ChaCha8Rng, n: usize) -> HVector {
    HVector::new(
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn structure(model: &ModelParams, p: &StructureParams) -> CliResult<Outcome> {
    let t_last = *p
        .times
        .iter()
        .max_by(|a, b| a.total_cmp(b))
        .ok_or_else(|| CliError::Config("structure needs at least one time".into()))?;
    let mut models = vec![model.clone()];
    models.extend(p.extra_models.iter().cloned());
    let mut out = Outcome::default();
    let mut csv = String::from("model,check,value,tolerance,passed\n");
    for (i, params) in models.iter().enumerate() {
        params.validate()?;
        let basis = ModeBasis::new(params.clone())?;
        let label = format!("{i}:{:?}", params.kind);
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(i as u64));
        let h = random_h(&mut rng, basis.n_modes());
        let hn = basis.norm_h(&h);
        let mut rows: Vec<(&str, f64, f64)> = Vec::new();

        let mut semigroup = 0.0f64;
        for &a in &p.times {
            for &b in &p.times {
                let joint = basis.apply_semigroup(a + b, &h);
                let split = basis.apply_semigroup(a, &basis.apply_semigroup(b, &h));
                semigroup = semigroup.max(basis.norm_h(&(&joint - &split)) / hn);
            }
        }
        rows.push(("semigroup", semigroup, p.tolerance));

        if basis.kind() == ModelKind::Wave {
            let unitarity = p
                .times
                .iter()
                .map(|&t| (basis.norm_h(&basis.apply_semigroup(t, &h)) - hn).abs() / hn)
                .fold(0.0, f64::max);
            rows.push(("unitarity", unitarity, p.tolerance));
            if let Some(tol) = p.hs_tolerance {
                let reference = wave_hs_reference(&basis);
                let hs = p
                    .times
                    .iter()
                    .map(|&t| (basis.hs_norm_squared(t) - reference).abs() / reference)
                    .fold(0.0, f64::max);
                rows.push(("hs_norm", hs, tol));
            }
        } else {
            let eig = (0..basis.n_modes())
                .filter_map(|n| basis.eigen_residual(n))
                .fold(0.0, f64::max);
            rows.push(("eigen_residual", eig, p.tolerance));
        }

        let variant = match basis.kind() {
            ModelKind::Wave => ControlVariant::WaveK,
            kind => j_variant(kind),
        };
        let h1 = DirectionSpec::Random { seed: p.seed.wrapping_add(100 + i as u64) }.resolve(&basis, variant)?;
        let h2 = DirectionSpec::Random { seed: p.seed.wrapping_add(200 + i as u64) }.resolve(&basis, variant)?;
        let (alpha, beta) = (0.7, -1.3);
        let combo = &(&h1 * alpha) + &(&h2 * beta);
        let c1 = build_control(&basis, &ControlRequest::new(variant, h1, 0.0, t_last))?;
        let c2 = build_control(&basis, &ControlRequest::new(variant, h2, 0.0, t_last))?;
        let cc = build_control(&basis, &ControlRequest::new(variant, combo, 0.0, t_last))?;
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for q in 1..200 {
            let tau = t_last * q as f64 / 200.0;
            let (u1, u2, uc) = (c1.eval(tau), c2.eval(tau), cc.eval(tau));
            let lin: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| alpha * a + beta * b).collect();
            diff = diff.max(max_abs(&uc.iter().zip(&lin).map(|(a, b)| a - b).collect::<Vec<_>>()));
            scale = scale.max(max_abs(&lin));
        }
        rows.push(("control_linearity", diff / scale, p.tolerance));

        if matches!(params.sigma, Sigma::Constant(_)) {
            let (len, shift) = (0.5 * t_last, 0.5 * t_last);
            let hd = DirectionSpec::Random { seed: p.seed.wrapping_add(300 + i as u64) }.resolve(&basis, variant)?;
            let a = build_control(&basis, &ControlRequest::new(variant, hd.clone(), 0.0, len))?;
            let b = build_control(&basis, &ControlRequest::new(variant, hd, shift, shift + len))?;
            let (mut diff, mut scale) = (0.0f64, 0.0f64);
            for q in 1..200 {
                let r = len * q as f64 / 200.0;
                let (ua, ub) = (a.eval(r), b.eval(shift + r));
                diff = diff.max(max_abs(&ua.iter().zip(&ub).map(|(x, y)| x - y).collect::<Vec<_>>()));
                scale = scale.max(max_abs(&ua));
            }
            rows.push(("time_translation", diff / scale, p.tolerance));
        }

        for (check, value, tol) in rows {
            let c = Check::at_most(format!("{check} {label}"), value, tol);
            let _ = writeln!(csv, "{label},{check},{value},{tol},{}", c.passed);
            out.checks.push(c);
        }
    }
    out.add("structure.csv", csv);
    Ok(out)
}

fn isometry(model: &ModelParams, sim: &SimConfig, p: &IsometryParams) -> CliResult<Outcome> {
    let basis = ModeBasis::new(model.clone())?;
    let h = p.direction.resolve(&basis, p.variant)?;
    let ctrl = build_control(&basis, &ControlRequest::new(p.variant, h, sim.s, sim.t_end))?;
    let cells = cell_controls(&ctrl, sim)?;
    let simulator = Simulator::new(&basis, sim)?;
    let n = basis.n_modes();
    let deltas: Vec<f64> = map_paths(sim.paths, |path| {
        let mut rng = simulator.path_rng(path);
        let mut noise = StepNoise::zeros(n);
        let mut d = 0.0;
        for cell in &cells {
            simulator.draw_noise(&mut rng, &mut noise);
            d += cell.iter().zip(&noise.dw).map(|(u, w)| u * w).sum::<f64>();
        }
        d
    });
    let sum = summarize(&deltas);
    let norm_sq = ctrl.l2norm().powi(2);
    let discrete: f64 = cells.iter().map(|c| c.iter().map(|u| u * u).sum::<f64>()).sum::<f64>() * sim.dt();
    let rel = (sum.var - norm_sq).abs() / norm_sq;
    let mut out = Outcome::default();
    out.add(
        "isometry.csv",
        format!(
            "M,mean,variance,variance_stderr,norm_squared,discrete_norm_squared,relative_error\n{},{},{},{},{},{},{}\n",
            sim.paths,
            sum.mean,
            sum.var,
            variance_stderr(&deltas),
            norm_sq,
            discrete,
            rel
        ),
    );
    out.checks.push(Check::at_most("isometry relative error", rel, p.tolerance));
    Ok(out)
}

fn gradient(model: &ModelParams, sim: &SimConfig, p: &GradientParams) -> CliResult<Outcome> {
    let basis = ModeBasis::new(model.clone())?;
    let h = p.direction.resolve(&basis, p.variant)?;
    let x = start_point(&p.x, basis.n_modes())?;
    if p.methods.is_empty() {
        return Err(CliError::Config("no estimation method selected".into()));
    }
    let mut reports: Vec<GradientReport> = Vec::new();
    let mut sweep = String::from("epsilon,estimate,stderr\n");
    // Methods use independent seeds so that their errors combine in quadrature.
    for (i, &method) in p.methods.iter().enumerate() {
        let cfg = reseed(sim, i as u64);
        let rep = match method {
            Method::Bismut => {
                let ctrl = build_control(&basis, &ControlRequest::new(p.variant, h.clone(), cfg.s, cfg.t_end))?;
                estimate_gradient_bismut(&basis, &cfg, &x, &p.functional, &ctrl, &h)?
            }
            Method::Pathwise => estimate_gradient_pathwise(&basis, &cfg, &x, &p.functional, &h)?,
            Method::FiniteDifference => {
                let eps = p
                    .epsilons
                    .first()
                    .copied()
                    .ok_or_else(|| CliError::Config("finite differences need an epsilon".into()))?;
                for &e in &p.epsilons {
                    let r = estimate_gradient_fd(&basis, &cfg, &x, &p.functional, &h, e)?;
                    let _ = writeln!(sweep, "{e},{},{}", r.estimate, r.stderr);
                }
                estimate_gradient_fd(&basis, &cfg, &x, &p.functional, &h, eps)?
            }
            other => {
                return Err(CliError::Config(format!("method `{}` is not a linear gradient estimator", other.name())))
            }
        };
        reports.push(rep);
    }

    let mut out = Outcome::default();
    let checks = &p.checks;
    if checks.exact_linear {
        let TestFunctional::Linear(c) = &p.functional else {
            return Err(CliError::Config("exact_linear needs a linear functional".into()));
        };
        let exact = oracle::linear_gradient(&basis, c, &h, sim.t_end - sim.s);
        out.add("exact.csv", format!("exact\n{exact}\n"));
        for r in &reports {
            let name = r.method.name();
            // the pathwise samples of a linear functional are identical; allow for summation rounding
            let allowed = (checks.sigmas * r.stderr).max(1e-10 * exact.abs());
            out.checks.push(Check::at_most(format!("{name} error/allowed"), (r.estimate - exact).abs() / allowed, 1.0));
            if let (Method::Bismut, Some(max)) = (r.method, checks.max_relative_stderr) {
                out.checks.push(Check::at_most("bismut relative stderr", r.stderr / exact.abs(), max));
            }
        }
    }
    if checks.agreement {
        let base = reports
            .iter()
            .find(|r| r.method == Method::Bismut)
            .ok_or_else(|| CliError::Config("agreement checks need the bismut method".into()))?;
        for r in reports.iter().filter(|r| r.method != Method::Bismut) {
            let allowed = checks.sigmas * combined_stderr(base.stderr, r.stderr);
            out.checks.push(Check::at_most(
                format!("bismut vs {} gap/allowed", r.method.name()),
                (base.estimate - r.estimate).abs() / allowed,
                1.0,
            ));
        }
    }
    out.files.insert(0, ("gradient.csv".into(), report_csv(&reports.iter().collect::<Vec<_>>())));
    if p.methods.contains(&Method::FiniteDifference) {
        out.add("fd_sweep.csv", sweep);
    }
    Ok(out)
}

fn girsanov(model: &ModelParams, sim: &SimConfig, p: &GirsanovParams) -> CliResult<Outcome> {
    let basis = ModeBasis::new(model.clone())?;
    let x = start_point(&p.x, basis.n_modes())?;
    let bundle = simulate_reference(&basis, sim, &x)?;
    let weights = girsanov_weight(&bundle, &basis, &p.drift)?;
    let steps = bundle.steps();
    let fx: Vec<f64> = map_paths(bundle.paths(), |q| p.functional.eval(&basis, &bundle.state(q, steps)));
    drop(bundle);
    let weighted: Vec<f64> = fx.iter().zip(&weights).map(|(f, w)| f * w).collect();
    let (ws, wf, plain) = (summarize(&weights), summarize(&weighted), summarize(&fx));
    let direct = estimate_expectation(&basis, &reseed(sim, 1), &p.drift, &x, &p.functional)?;

    let mut out = Outcome::default();
    let mut csv = String::from("quantity,estimate,stderr\n");
    for (name, m, se) in [
        ("weighted_reference", wf.mean, wf.stderr()),
        ("drifted_euler", direct.estimate, direct.stderr),
        ("mean_weight", ws.mean, ws.stderr()),
        ("unweighted_reference", plain.mean, plain.stderr()),
    ] {
        let _ = writeln!(csv, "{name},{m},{se}");
    }
    out.add("girsanov.csv", csv);
    out.checks.push(Check::at_most(
        "weighted vs drifted gap/allowed",
        (wf.mean - direct.estimate).abs() / (p.sigmas * combined_stderr(wf.stderr(), direct.stderr)),
        1.0,
    ));
    out.checks.push(Check::at_most("mean weight gap/allowed", (ws.mean - 1.0).abs() / (p.sigmas * ws.stderr()), 1.0));
    Ok(out)
}

fn bsde(model: &ModelParams, sim: &SimConfig, p: &BsdeParams) -> CliResult<Outcome> {
    let basis = ModeBasis::new(model.clone())?;
    let x0 = start_point(&p.x, basis.n_modes())?;
    let sol = solve_lsmc_with(&basis, sim, &p.drift, &x0, &p.generator, &p.terminal, &p.lsmc)?;
    let mut out = Outcome::default();
    let mut table = Vec::new();
    sol.write_csv(&mut table)?;
    out.add("bsde.csv", String::from_utf8(table).map_err(|e| CliError::Internal(e.to_string()))?);

    let mut summary = String::from("quantity,value,stderr\n");
    let _ = writeln!(summary, "y0,{},{}", sol.y0, sol.y0_stderr);
    for (i, z) in sol.z0.iter().enumerate() {
        let _ = writeln!(summary, "z0_{},{z},", i + 1);
    }
    let _ = writeln!(summary, "sigma0,{},", sol.sigma0);

    if let Some(cf) = &p.closed_form {
        let lambda = match (&p.generator, p.drift.is_zero()) {
            (GeneratorSpec::Zero, true) => 0.0,
            (GeneratorSpec::AffineY { lambda }, true) => *lambda,
            _ => return Err(CliError::Config("closed form needs ψ = λy (or zero) and no drift".into())),
        };
        let mean = oracle::expectation(&basis, sim, &x0, &p.terminal.phi).ok_or_else(|| {
            CliError::Config("closed form needs a constant, linear, quadratic or bounded smooth terminal".into())
        })?;
        let gap = sim.t_end - sim.s;
        let exact = (lambda * gap).exp() * (mean + p.terminal.shift);
        let picard = picard_affine_factor(lambda, gap, 4 * sim.steps, 200, 1e-14);
        let _ = writeln!(summary, "closed_form,{exact},");
        let _ = writeln!(summary, "picard_factor,{},", picard.factor);
        out.checks.push(Check::at_most(
            "y0 relative error",
            (sol.y0 - exact).abs() / exact.abs(),
            cf.relative_tolerance,
        ));
    }
    drop(sol);

    if let Some(sl) = &p.semilinear {
        let h = sl.direction.resolve(&basis, sl.variant)?;
        let sol = solve_lsmc_with(&basis, sim, &p.drift, &x0, &p.generator, &p.terminal, &p.lsmc)?;
        let family = ControlFamily::build(&basis, sl.variant, &h, sim)?;
        let rep = semilinear_bismut(&basis, &sol, &family, sim.s)?;
        drop(sol);
        let fd = fd_bsde_gradient(
            &basis,
            &reseed(sim, 1),
            &p.drift,
            &x0,
            &h,
            sl.epsilon,
            &p.generator,
            &p.terminal,
            &p.lsmc,
        )?;
        let mut csv = report_csv(&[&rep.report, &fd]);
        let _ = writeln!(csv);
        let _ = writeln!(csv, "term,value");
        for (name, v) in [("terminal", rep.terminal), ("generator", rep.generator), ("drift", rep.drift)] {
            let _ = writeln!(csv, "{name},{v}");
        }
        out.add("semilinear.csv", csv);
        let allowed = (sl.sigmas * combined_stderr(rep.report.stderr, fd.stderr)).max(sl.relative_tolerance * fd.estimate.abs());
        out.checks.push(Check::at_most(
            "semilinear vs fd gap/allowed",
            (rep.report.estimate - fd.estimate).abs() / allowed,
            1.0,
        ));
    }
    out.files.insert(1, ("bsde_summary.csv".into(), summary));
    Ok(out)
}

fn kolmogorov(model: &ModelParams, sim: &SimConfig, p: &KolmogorovParams) -> CliResult<Outcome> {
    let basis = ModeBasis::new(model.clone())?;
    let opts = KolmogorovOptions {
        quad_nodes: p.quad_nodes,
        tolerance: p.tolerance,
        lsmc: p.lsmc.clone(),
    };
    let records = kolmogorov_residual(&basis, sim, &p.drift, &p.generator, &p.terminal, &p.probes, &opts)?;
    let mut out = Outcome::default();
    let mut text = String::new();
    let mut csv = String::from("s,x_norm,v,residual,stderr,quad_error,budget,within_budget\n");
    for (i, r) in records.iter().enumerate() {
        let _ = writeln!(text, "{r}");
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.s,
            r.x_norm,
            r.v,
            r.residual,
            r.stderr,
            r.quad_error,
            r.budget,
            r.within_budget()
        );
        out.checks.push(Check::at_most(format!("probe {i} |residual|/budget"), r.residual.abs() / r.budget, 1.0));
    }
    out.add("kolmogorov.csv", csv);
    out.add("kolmogorov.txt", text);
    Ok(out)
}

/// `σ(s) ⟨c, e^{(T−s)A} J e_n⟩` for each mode, the exact `Z_s` of a linear terminal.
fn closed_form_z(basis: &ModeBasis, sim: &SimConfig, c: &HVector) -> Vec<f64> {
    let n = basis.n_modes();
    (0..n)
        .map(|i| {
            let mut a = vec![0.0; n];
            a[i] = 1.0;
            basis.sigma(sim.s) * oracle::linear_gradient(basis, c, &basis.embed_j(&a), sim.t_end - sim.s)
        })
        .collect()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn zcheck(model: &ModelParams, sim: &SimConfig, p: &ZcheckParams) -> CliResult<Outcome> {
    let basis = ModeBasis::new(model.clone())?;
    let x0 = start_point(&p.x, basis.n_modes())?;
    let sol = solve_lsmc_with(&basis, sim, &DriftSpec::Zero, &x0, &p.generator, &p.terminal, &p.lsmc)?;
    let modes = p.modes.unwrap_or(basis.n_modes()).min(basis.n_modes());
    let reports = bismut_gradients_along_modes(&basis, &sol, p.variant, modes)?;
    let grads: Vec<f64> = reports.iter().map(|r| r.report.estimate).collect();
    let err = z_identification_check(&sol, &grads);

    let linear = match (&p.terminal.phi, &p.generator) {
        (TestFunctional::Linear(c), GeneratorSpec::Zero) => Some(c.clone()),
        _ => None,
    };
    let exact = linear.as_ref().map(|c| closed_form_z(&basis, sim, c));

    let mut out = Outcome::default();
    let mut csv = String::from("mode,z_regression,sigma_times_gradient,gradient_stderr,z_closed_form\n");
    for i in 0..modes {
        let cf = exact.as_ref().map(|z| z[i].to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{cf}",
            i + 1,
            sol.z0[i],
            sol.sigma0 * grads[i],
            sol.sigma0 * reports[i].report.stderr
        );
    }
    out.add("zcheck.csv", csv);
    out.checks.push(Check::at_most("z identification relative l2", err, p.max_relative_error));
    if let Some(z) = &exact {
        out.checks.push(Check::at_most(
            "z regression vs closed form relative l2",
            rel_l2(&sol.z0[..modes], &z[..modes]),
            p.max_relative_error,
        ));
    }

    if p.sigma_doubling {
        let c = linear
            .as_ref()
            .ok_or_else(|| CliError::Config("sigma doubling needs a linear terminal and zero generator".into()))?;
        let doubled = ModeBasis::new(model.clone().with_sigma(model.sigma.scaled(2.0)))?;
        let z1 = exact.as_ref().expect("linear terminal");
        let z2 = closed_form_z(&doubled, sim, c);
        let z_dev = z1
            .iter()
            .zip(&z2)
            .map(|(a, b)| if *a == 0.0 { b.abs() } else { (b / a - 2.0).abs() / 2.0 })
            .fold(0.0, f64::max);
        let (_, v1) = oracle::projection_moments(&basis, sim, &x0, c);
        let (_, v2) = oracle::projection_moments(&doubled, sim, &x0, c);
        let v_dev = (v2 / v1 - 4.0).abs() / 4.0;
        let mut s = String::from("quantity,ratio\n");
        let _ = writeln!(s, "variance,{}", v2 / v1);
        for (i, (a, b)) in z1.iter().zip(&z2).enumerate() {
            let _ = writeln!(s, "z_{},{}", i + 1, b / a);
        }
        out.add("sigma_doubling.csv", s);
        out.checks.push(Check::at_most("sigma doubling z deviation", z_dev, 1e-12));
        out.checks.push(Check::at_most("sigma doubling variance deviation", v_dev, 1e-12));
    }
    Ok(out)
}

fn ygrad(model: &ModelParams, sim: &SimConfig, p: &YgradParams) -> CliResult<Outcome> {
    let basis = ModeBasis::new(model.clone())?;
    let x0 = start_point(&p.x, basis.n_modes())?;
    let a = padded(&p.a, basis.n_modes())?;
    let s_grid: Vec<f64> = p.gaps.iter().map(|g| sim.t_end - g).collect();
    let res = y_gradient_scaling(
        &basis,
        sim,
        &p.drift,
        &p.generator,
        &p.terminal,
        p.variant,
        &a,
        &x0,
        &s_grid,
        &p.lsmc,
    )?;
    let mut out = Outcome::default();
    let mut csv = String::from("gap,s,estimate,stderr\n");
    for ((g, s), r) in res.gaps.iter().zip(&s_grid).zip(&res.reports) {
        let _ = writeln!(csv, "{g},{s},{},{}", r.estimate, r.stderr);
    }
    out.add("ygrad.csv", csv);
    out.add("ygrad_fit.csv", format!("slope,intercept\n{},{}\n", res.fit.slope, res.fit.intercept));
    if let Some(min) = p.min_slope {
        out.checks.push(Check::at_least("ygrad slope", res.fit.slope, min));
    }
    Ok(out)
}
