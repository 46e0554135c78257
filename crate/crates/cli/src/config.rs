//! Experiment configuration files.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use bismut_core::{
    ControlVariant, DriftSpec, GeneratorSpec, HVector, LsmcOptions, Method, ModeBasis, ModelKind, ModelParams, Probe,
    SimConfig, TerminalSpec, TestFunctional,
};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        if let Some(sim) = &self.sim {
            sim.validate(self.model.horizon)?;
        }
        if self.experiment.needs_sim() && self.sim.is_none() {
            return Err(CliError::Config(format!(
                "experiment `{}` needs a [sim] section",
                self.experiment.name()
            )));
        }
        Ok(())
    }

    pub fn sim(&self) -> CliResult<&SimConfig> {
        self.sim
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [sim] section".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Identity(IdentityParams),
    Scaling(ScalingParams),
    Hsnorm(HsNormParams),
    Structure(StructureParams),
    Isometry(IsometryParams),
    Gradient(GradientParams),
    Girsanov(GirsanovParams),
    Bsde(BsdeParams),
    Kolmogorov(KolmogorovParams),
    Zcheck(ZcheckParams),
    YgradScaling(YgradParams),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Identity(_) => "identity",
            Experiment::Scaling(_) => "scaling",
            Experiment::Hsnorm(_) => "hsnorm",
            Experiment::Structure(_) => "structure",
            Experiment::Isometry(_) => "isometry",
            Experiment::Gradient(_) => "gradient",
            Experiment::Girsanov(_) => "girsanov",
            Experiment::Bsde(_) => "bsde",
            Experiment::Kolmogorov(_) => "kolmogorov",
            Experiment::Zcheck(_) => "zcheck",
            Experiment::YgradScaling(_) => "ygrad-scaling",
        }
    }

    fn needs_sim(&self) -> bool {
        !matches!(
            self,
            Experiment::Identity(_) | Experiment::Scaling(_) | Experiment::Hsnorm(_) | Experiment::Structure(_)
        )
    }
}

/// How a direction `h` is specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionSpec {
    /// Random unit direction: unit `K`-norm for `wave_k`, otherwise `J a` (or `J₁ a`) with a random unit `a`.
    Random { seed: u64 },
    /// `J a` (or `J₁ a`), zero-padded to `N` modes.
    Velocity { a: Vec<f64> },
    /// `J a` with `a_n ∝ n^exponent`, unit norm.
    VelocityPower { exponent: f64 },
    Explicit { h: HVector },
}

pub fn padded(a: &[f64], n: usize) -> CliResult<Vec<f64>> {
    if a.len() > n {
        return Err(CliError::Config(format!("vector has {} entries, model has {n} modes", a.len())));
    }
    let mut v = a.to_vec();
    v.resize(n, 0.0);
    Ok(v)
}

impl DirectionSpec {
    pub fn resolve(&self, basis: &ModeBasis, variant: ControlVariant) -> CliResult<HVector> {
        let n = basis.n_modes();
        Ok(match self {
            DirectionSpec::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                if variant == ControlVariant::WaveK {
                    let h = HVector::new(
                        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
                        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
                    );
                    let norm = basis.norm_k(&h);
                    &h * (1.0 / norm)
                } else {
                    let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    variant.direction(basis, &a.iter().map(|v| v / norm).collect::<Vec<_>>())
                }
            }
            DirectionSpec::Velocity { a } => variant.direction(basis, &padded(a, n)?),
            DirectionSpec::VelocityPower { exponent } => {
                let a: Vec<f64> = (1..=n).map(|i| (i as f64).powf(*exponent)).collect();
                let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                variant.direction(basis, &a.iter().map(|v| v / norm).collect::<Vec<_>>())
            }
            DirectionSpec::Explicit { h } => {
                if h.len() != n {
                    return Err(CliError::Config(format!("direction has {} modes, model has {n}", h.len())));
                }
                h.clone()
            }
        })
    }

    /// The noise-space vector `a` behind a velocity direction.
    pub fn noise_vector(&self, n: usize) -> CliResult<Vec<f64>> {
        match self {
            DirectionSpec::Velocity { a } => padded(a, n),
            DirectionSpec::VelocityPower { exponent } => {
                let a: Vec<f64> = (1..=n).map(|i| (i as f64).powf(*exponent)).collect();
                let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                Ok(a.iter().map(|v| v / norm).collect())
            }
            DirectionSpec::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                Ok(a.iter().map(|v| v / norm).collect())
            }
            DirectionSpec::Explicit { .. } => Err(CliError::Config("an explicit h has no noise-space vector".into())),
        }
    }
}

/// Starting point; zero when omitted.
pub fn start_point(x: &Option<HVector>, n: usize) -> CliResult<HVector> {
    match x {
        None => Ok(HVector::zeros(n)),
        Some(h) if h.len() == n => Ok(h.clone()),
        Some(h) => Err(CliError::Config(format!("x has {} modes, model has {n}", h.len()))),
    }
}

fn default_sigmas() -> f64 {
    3.0
}

fn zero_drift() -> DriftSpec {
    DriftSpec::Zero
}

fn zero_generator() -> GeneratorSpec {
    GeneratorSpec::Zero
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityParams {
    pub variant: ControlVariant,
    pub direction: DirectionSpec,
    pub times: Vec<f64>,
    /// Simpson panel counts; thresholds apply to the last two.
    pub panels: Vec<usize>,
    #[serde(default)]
    pub s: f64,
    pub max_residual: Option<f64>,
    pub min_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingCase {
    pub name: String,
    pub variant: ControlVariant,
    pub direction: DirectionSpec,
    /// Overrides the top-level model for this case.
    pub model: Option<ModelParams>,
    pub expected_slope: Option<f64>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingParams {
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
    pub cases: Vec<ScalingCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HsNormParams {
    pub times: Vec<f64>,
    /// Relative tolerance of the wave identity `‖e^{tA}J‖²_HS = Σ μ_n^{-1}`.
    pub tolerance: Option<f64>,
    /// Expected log-log slope of `‖e^{tA}J‖²_HS` and its tolerance (damped models).
    pub expected_slope: Option<f64>,
    pub slope_tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureParams {
    pub seed: u64,
    pub times: Vec<f64>,
    pub tolerance: f64,
    /// Further models checked alongside the top-level one.
    #[serde(default)]
    pub extra_models: Vec<ModelParams>,
    /// Relative tolerance of `‖e^{tA}J‖²_HS = Σ μ_n^{-1}` for wave models.
    pub hs_tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsometryParams {
    pub variant: ControlVariant,
    pub direction: DirectionSpec,
    /// Relative tolerance of `Var δ(ũ)` against `‖ũ‖²`.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientChecks {
    /// Compare against `⟨c, e^{(t−s)A}h⟩` (linear functionals only).
    #[serde(default)]
    pub exact_linear: bool,
    pub max_relative_stderr: Option<f64>,
    /// Require all methods to agree pairwise with the Bismut estimate.
    #[serde(default)]
    pub agreement: bool,
    #[serde(default = "default_sigmas")]
    pub sigmas: f64,
}

impl Default for GradientChecks {
    fn default() -> Self {
        GradientChecks {
            exact_linear: false,
            max_relative_stderr: None,
            agreement: false,
            sigmas: 3.0,
        }
    }
}

fn default_epsilons() -> Vec<f64> {
    vec![1e-2, 1e-3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientParams {
    pub functional: TestFunctional,
    pub variant: ControlVariant,
    pub direction: DirectionSpec,
    pub x: Option<HVector>,
    pub methods: Vec<Method>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub checks: GradientChecks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GirsanovParams {
    pub drift: DriftSpec,
    pub functional: TestFunctional,
    pub x: Option<HVector>,
    #[serde(default = "default_sigmas")]
    pub sigmas: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedFormCheck {
    pub relative_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemilinearCheck {
    pub variant: ControlVariant,
    pub direction: DirectionSpec,
    pub epsilon: f64,
    pub relative_tolerance: f64,
    #[serde(default = "default_sigmas")]
    pub sigmas: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeParams {
    pub generator: GeneratorSpec,
    pub terminal: TerminalSpec,
    #[serde(default = "zero_drift")]
    pub drift: DriftSpec,
    pub x: Option<HVector>,
    #[serde(default)]
    pub lsmc: LsmcOptions,
    pub closed_form: Option<ClosedFormCheck>,
    pub semilinear: Option<SemilinearCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KolmogorovParams {
    pub generator: GeneratorSpec,
    pub terminal: TerminalSpec,
    #[serde(default = "zero_drift")]
    pub drift: DriftSpec,
    pub probes: Vec<Probe>,
    pub quad_nodes: usize,
    pub tolerance: f64,
    #[serde(default)]
    pub lsmc: LsmcOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZcheckParams {
    pub terminal: TerminalSpec,
    #[serde(default = "zero_generator")]
    pub generator: GeneratorSpec,
    pub x: Option<HVector>,
    pub variant: ControlVariant,
    pub modes: Option<usize>,
    pub max_relative_error: f64,
    #[serde(default)]
    pub sigma_doubling: bool,
    #[serde(default)]
    pub lsmc: LsmcOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YgradParams {
    pub generator: GeneratorSpec,
    pub terminal: TerminalSpec,
    #[serde(default = "zero_drift")]
    pub drift: DriftSpec,
    pub variant: ControlVariant,
    pub a: Vec<f64>,
    pub x: Option<HVector>,
    /// Values of `T − s`.
    pub gaps: Vec<f64>,
    pub min_slope: Option<f64>,
    #[serde(default)]
    pub lsmc: LsmcOptions,
}

/// Velocity variant matching a model kind.
pub fn j_variant(kind: ModelKind) -> ControlVariant {
    match kind {
        ModelKind::Wave => ControlVariant::WaveJ,
        ModelKind::Damped => ControlVariant::DampedJ,
        ModelKind::DampedSmoothed => ControlVariant::SmoothedJ,
    }
}
