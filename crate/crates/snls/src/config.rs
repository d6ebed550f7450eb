//! Experiment configuration: flat key-value TOML with one section per block.
//!
//! Constants that the theory only proves to exist (G, G₁, Λ) and quantities
//! measured from the dynamics (Ĉ'₁, θ̂₁) may be given numerically or marked
//! `"calibrate"`/`"auto"`; the `calibrate` subcommand resolves those into a
//! constants file which other runs reference (and verify by content hash).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coupling::CouplingConfig;
use crate::energy::{EnergyParams, Sign};
use crate::integrator::SimConfig;
use crate::noise::NoiseOperator;
use crate::spectral::SpectralField;
use crate::{Error, Result};

/// A number, or a keyword ("calibrate"/"auto") deferring to the constants
/// file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ConstSpec {
    Value(f64),
    Keyword(String),
}

impl ConstSpec {
    pub fn value(&self) -> Option<f64> {
        match self {
            ConstSpec::Value(v) => Some(*v),
            ConstSpec::Keyword(_) => None,
        }
    }

    pub fn deferred(&self) -> bool {
        matches!(self, ConstSpec::Keyword(_))
    }
}

impl Default for ConstSpec {
    fn default() -> Self {
        ConstSpec::Keyword("calibrate".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquationBlock {
    pub sigma: f64,
    /// +1 focusing, -1 defocusing.
    pub lambda: i8,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscretizationBlock {
    pub modes: usize,
    pub dt: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseBlock {
    /// "power" (b_n = amplitude·n^{-exponent} up to cutoff) or "explicit".
    pub rule: String,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub exponent: f64,
    #[serde(default)]
    pub cutoff: usize,
    /// Explicit coefficients when rule = "explicit".
    #[serde(default)]
    pub b: Vec<f64>,
    pub n_star: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ConstantsBlock {
    #[serde(default)]
    pub g: ConstSpec,
    #[serde(default)]
    pub g1: ConstSpec,
    #[serde(default)]
    pub lambda_fp: ConstSpec,
    /// Empirical moment plateau Ĉ'₁ (measured by `calibrate`).
    #[serde(default)]
    pub c1_hat: ConstSpec,
    #[serde(default = "default_safety")]
    pub safety: f64,
    #[serde(default)]
    pub corpus_seed: u64,
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
}

fn default_safety() -> f64 {
    2.0
}

fn default_corpus_size() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingBlock {
    /// Cycle length T, or "auto" = θ̂₁(R₀).
    #[serde(default)]
    pub cycle_t: ConstSpec,
    pub d0: f64,
    /// R₀, or "auto" = max(4·Ĉ'₁, d₀).
    #[serde(default)]
    pub r0: ConstSpec,
    pub kappa: f64,
    pub growth_b: f64,
    #[serde(default)]
    pub bind_gain: f64,
    #[serde(default = "default_bind_k0")]
    pub bind_k0: f64,
    #[serde(default = "default_attempt_cap")]
    pub attempt_cap: usize,
    /// Target exponent for the (H2) envelope report.
    #[serde(default = "default_q")]
    pub q: f64,
}

fn default_bind_k0() -> f64 {
    1e4
}

fn default_attempt_cap() -> usize {
    200
}

fn default_q() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialBlock {
    /// "zero" | "single_mode" | "smooth".
    pub kind: String,
    #[serde(default = "default_mode")]
    pub mode: usize,
    #[serde(default)]
    pub amplitude: f64,
}

fn default_mode() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunBlock {
    pub seed: u64,
    pub n_trajectories: usize,
    #[serde(default)]
    pub out_dir: Option<String>,
}

/// The full experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub equation: EquationBlock,
    pub discretization: DiscretizationBlock,
    pub noise: NoiseBlock,
    #[serde(default)]
    pub constants: ConstantsBlock,
    pub coupling: CouplingBlock,
    pub initial: InitialBlock,
    /// Second initial condition for pair experiments (mix, couple).
    #[serde(default)]
    pub initial2: Option<InitialBlock>,
    pub run: RunBlock,
}

/// Calibrated constants emitted by the `calibrate` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantsFile {
    pub g: f64,
    pub g1: f64,
    pub lambda_fp: f64,
    pub c1_hat: f64,
    pub theta1: f64,
    pub safety: f64,
    pub corpus_seed: u64,
    /// SHA-256 of the resolved source config this calibration belongs to.
    pub config_hash: String,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.equation.lambda != 1 && self.equation.lambda != -1 {
            return Err(Error::Config(format!(
                "equation.lambda must be +1 or -1, got {}",
                self.equation.lambda
            )));
        }
        // Admissible σ range (focusing needs σ < 2).
        EnergyParams::new(self.equation.sigma, self.sign(), self.equation.alpha)?;
        let noise = self.noise_operator()?;
        let report = noise.validate();
        if !report.positivity_ok {
            return Err(Error::Config(format!(
                "noise degenerate on forced modes {:?} (noise.n_star = {})",
                report.positivity_failures, self.noise.n_star
            )));
        }
        if self.discretization.modes < self.noise.n_star {
            return Err(Error::Config(format!(
                "discretization.modes = {} below noise.n_star = {}",
                self.discretization.modes, self.noise.n_star
            )));
        }
        if self.discretization.dt <= 0.0 || self.discretization.horizon < self.discretization.dt {
            return Err(Error::Config("discretization.dt/horizon invalid".into()));
        }
        if self.coupling.d0 <= 0.0 {
            return Err(Error::Config("coupling.d0 must be positive".into()));
        }
        match self.initial.kind.as_str() {
            "zero" | "single_mode" | "smooth" => {}
            other => {
                return Err(Error::Config(format!("initial.kind \"{other}\" unknown")));
            }
        }
        Ok(())
    }

    pub fn sign(&self) -> Sign {
        if self.equation.lambda == 1 {
            Sign::Focusing
        } else {
            Sign::Defocusing
        }
    }

    pub fn noise_operator(&self) -> Result<NoiseOperator> {
        match self.noise.rule.as_str() {
            "power" => NoiseOperator::power_law(
                self.discretization.modes,
                self.noise.amplitude,
                self.noise.exponent,
                self.noise.cutoff,
                self.noise.n_star,
            ),
            "explicit" => {
                if self.noise.b.len() != self.discretization.modes {
                    return Err(Error::Config(format!(
                        "noise.b has {} entries, need modes = {}",
                        self.noise.b.len(),
                        self.discretization.modes
                    )));
                }
                NoiseOperator::new(self.noise.b.clone(), self.noise.n_star)
            }
            other => Err(Error::Config(format!("noise.rule \"{other}\" unknown"))),
        }
    }

    /// SHA-256 of the canonical (serialized) config.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Resolves every deferred constant against the constants file; errors if
    /// something is still missing.
    pub fn resolve(&self, constants: Option<&ConstantsFile>) -> Result<ResolvedConfig> {
        let take = |spec: &ConstSpec, from_file: Option<f64>, name: &str| -> Result<f64> {
            match spec {
                ConstSpec::Value(v) => Ok(*v),
                ConstSpec::Keyword(_) => from_file.ok_or_else(|| {
                    Error::Config(format!(
                        "constant `{name}` is deferred and no constants file supplies it; run `snls calibrate` first"
                    ))
                }),
            }
        };
        let g = match self.sign() {
            Sign::Defocusing => 0.0,
            Sign::Focusing => take(&self.constants.g, constants.map(|c| c.g), "constants.g")?,
        };
        let g1 = match self.sign() {
            Sign::Defocusing => 0.0,
            Sign::Focusing => take(&self.constants.g1, constants.map(|c| c.g1), "constants.g1")?,
        };
        let lambda_fp = take(
            &self.constants.lambda_fp,
            constants.map(|c| c.lambda_fp),
            "constants.lambda_fp",
        )?;
        let c1_hat = take(&self.constants.c1_hat, constants.map(|c| c.c1_hat), "constants.c1_hat")?;
        let params = EnergyParams::new(self.equation.sigma, self.sign(), self.equation.alpha)?
            .with_constants(g, g1, lambda_fp);
        let noise = self.noise_operator()?;
        let sim = SimConfig::new(
            self.discretization.modes,
            self.discretization.dt,
            self.discretization.horizon,
            params,
            noise,
        )?;
        let r0 = match &self.coupling.r0 {
            ConstSpec::Value(v) => *v,
            ConstSpec::Keyword(_) => (4.0 * c1_hat).max(self.coupling.d0),
        };
        let theta1 = if self.equation.alpha > 0.0 && r0 > c1_hat && c1_hat > 0.0 {
            2.0 / self.equation.alpha * (r0 / c1_hat).ln()
        } else {
            self.discretization.horizon
        };
        let cycle_t = match &self.coupling.cycle_t {
            ConstSpec::Value(v) => *v,
            ConstSpec::Keyword(_) => theta1,
        };
        let coupling = CouplingConfig {
            cycle_t,
            d0: self.coupling.d0,
            r0,
            kappa: self.coupling.kappa,
            growth_b: self.coupling.growth_b,
            bind_gain: self.coupling.bind_gain,
            bind_k0: self.coupling.bind_k0,
            attempt_cap: self.coupling.attempt_cap,
        };
        coupling.validate()?;
        Ok(ResolvedConfig {
            sim,
            coupling,
            c1_hat,
            theta1,
            q_exponent: self.coupling.q,
            seed: self.run.seed,
            n_trajectories: self.run.n_trajectories,
            source: self.clone(),
        })
    }

    /// Builds an initial field from a block spec.
    pub fn initial_field(&self, block: &InitialBlock) -> Result<SpectralField> {
        let m = self.discretization.modes;
        match block.kind.as_str() {
            "zero" => Ok(SpectralField::zeros(m)),
            "single_mode" => {
                if block.mode == 0 || block.mode > m {
                    return Err(Error::Config(format!("initial.mode {} outside 1..={m}", block.mode)));
                }
                Ok(SpectralField::basis_mode(m, block.mode)
                    .scale(num_complex::Complex64::new(block.amplitude, 0.0)))
            }
            "smooth" => {
                let coeffs = (0..m)
                    .map(|i| {
                        let n = i + 1;
                        let amp = block.amplitude / (1.0 + (n as f64 / 3.0).powi(4));
                        num_complex::Complex64::new(amp, -0.3 * amp)
                    })
                    .collect();
                SpectralField::from_coeffs(coeffs)
            }
            other => Err(Error::Config(format!("initial.kind \"{other}\" unknown"))),
        }
    }

    pub fn primary_initial(&self) -> Result<SpectralField> {
        self.initial_field(&self.initial)
    }

    pub fn secondary_initial(&self) -> Result<SpectralField> {
        match &self.initial2 {
            Some(b) => self.initial_field(b),
            None => self.primary_initial(),
        }
    }
}

/// Everything resolved and ready to run.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub sim: SimConfig,
    pub coupling: CouplingConfig,
    pub c1_hat: f64,
    pub theta1: f64,
    pub q_exponent: f64,
    pub seed: u64,
    pub n_trajectories: usize,
    pub source: ExperimentConfig,
}

impl ConstantsFile {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("constants parse error: {e}")))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("constants serialize error: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Built-in scenario presets selectable with `--scenario`.
pub fn builtin_scenario(name: &str) -> Result<ExperimentConfig> {
    let text = match name {
        // The reference desk-scale scenario: defocusing cubic NLS, 128 modes,
        // 16 forced low modes with b_n = n⁻⁴ up to 64.
        "reference" => include_str!("../configs/reference.toml"),
        // Small, fast sanity scenario for smoke runs.
        "smoke" => include_str!("../configs/smoke.toml"),
        // Focusing variant (σ = 1) with calibration-deferred constants.
        "focusing" => include_str!("../configs/focusing.toml"),
        other => {
            return Err(Error::Config(format!(
                "unknown scenario \"{other}\" (available: reference, smoke, focusing)"
            )))
        }
    };
    ExperimentConfig::from_toml(text)
}
