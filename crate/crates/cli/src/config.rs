//! Run configuration: a versioned TOML document with a model section and one
//! optional section per subcommand. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use garch_lrm::backtest::{ExperimentConfig, Scheme, DEFAULT_BUDGET};
use garch_lrm::GarchSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Ci,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub profile: Option<Profile>,
    pub model: ModelConfig,
    #[serde(default)]
    pub experiment: Option<ExperimentSection>,
    #[serde(default)]
    pub price: Option<PriceSection>,
    #[serde(default)]
    pub oracle: Option<OracleSection>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Asymmetric,
    Duan,
    HestonNandi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelKind,
    pub omega: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Scalar for the asymmetric model, one per `alpha` for Heston-Nandi.
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub s0: Option<f64>,
    #[serde(default)]
    pub initial_variance: Option<f64>,
    #[serde(default)]
    pub innovation_variance: Option<f64>,
}

impl ModelConfig {
    pub fn to_spec(&self) -> Result<GarchSpec, String> {
        let mut spec = match self.variant {
            ModelKind::Asymmetric => {
                if self.gamma.len() > 1 {
                    return Err("model.gamma must hold at most one value for the asymmetric model".into());
                }
                GarchSpec::asymmetric(
                    self.omega,
                    self.alpha.clone(),
                    self.beta.clone(),
                    self.gamma.first().copied().unwrap_or(0.0),
                    self.mu,
                )
            }
            ModelKind::Duan => {
                if !self.gamma.is_empty() {
                    return Err("model.gamma is not used by the Duan model".into());
                }
                GarchSpec::duan(self.omega, self.alpha.clone(), self.beta.clone(), self.lambda)
            }
            ModelKind::HestonNandi => GarchSpec::heston_nandi(
                self.omega,
                self.alpha.clone(),
                self.beta.clone(),
                self.gamma.clone(),
                self.lambda,
            ),
        };
        if let Some(s0) = self.s0 {
            spec = spec.with_s0(s0);
        }
        if let Some(v) = self.initial_variance {
            spec = spec.with_initial_variance(v);
        }
        if let Some(v) = self.innovation_variance {
            spec = spec.with_innovation_variance(v);
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub maturities: Vec<usize>,
    pub moneyness: Vec<f64>,
    #[serde(default)]
    pub schemes: Option<Vec<Scheme>>,
    #[serde(default)]
    pub n_outer: Option<usize>,
    #[serde(default)]
    pub n_inner: Option<usize>,
    #[serde(default)]
    pub n_repeats: Option<usize>,
    #[serde(default)]
    pub ems: Option<bool>,
    #[serde(default)]
    pub reuse_inner: Option<bool>,
    /// Path-step ceiling.
    #[serde(default)]
    pub budget: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PayoffChoice {
    Call,
    Put,
    /// `H = S_T`.
    Forward,
    /// `H = strike`.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSection {
    pub payoff: PayoffChoice,
    #[serde(default)]
    pub strike: Option<f64>,
    pub maturity: usize,
    #[serde(default = "default_price_paths")]
    pub n_paths: usize,
    #[serde(default = "yes")]
    pub ems: bool,
}

fn default_price_paths() -> usize {
    10_000
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeChoice {
    Rademacher,
    ThreePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "default_lattice")]
    pub lattice: LatticeChoice,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_strike")]
    pub strike: f64,
    #[serde(default = "default_oracle_paths")]
    pub mc_paths: usize,
}

fn default_lattice() -> LatticeChoice {
    LatticeChoice::Rademacher
}
fn default_depth() -> usize {
    3
}
fn default_strike() -> f64 {
    100.0
}
fn default_oracle_paths() -> usize {
    20_000
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            lattice: default_lattice(),
            depth: default_depth(),
            strike: default_strike(),
            mc_paths: default_oracle_paths(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureChoice {
    Physical,
    RiskNeutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationChoice {
    Price,
    LogPrice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub measure: MeasureChoice,
    #[serde(default = "default_rep")]
    pub representation: RepresentationChoice,
    pub n_paths: usize,
    pub horizon: usize,
    #[serde(default)]
    pub ems: bool,
}

fn default_rep() -> RepresentationChoice {
    RepresentationChoice::Price
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            ));
        }
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML rendering,
    /// output location excluded.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(&RunConfig {
            output: None,
            ..self.clone()
        })
        .expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn experiment(&self, profile: Profile, force: bool) -> Result<ExperimentConfig, String> {
        let sec = self
            .experiment
            .as_ref()
            .ok_or("config has no [experiment] section")?;
        let spec = self.model.to_spec()?;
        let base = match profile {
            Profile::Ci => ExperimentConfig::ci(spec, sec.maturities.clone(), sec.moneyness.clone()),
            Profile::Full => ExperimentConfig::full(spec, sec.maturities.clone(), sec.moneyness.clone()),
        };
        Ok(ExperimentConfig {
            schemes: sec.schemes.clone().unwrap_or(base.schemes.clone()),
            n_outer: sec.n_outer.unwrap_or(base.n_outer),
            n_inner: sec.n_inner.unwrap_or(base.n_inner),
            n_repeats: sec.n_repeats.unwrap_or(base.n_repeats),
            ems: sec.ems.unwrap_or(true),
            reuse_inner: sec.reuse_inner.unwrap_or(false),
            budget: sec.budget.map(u128::from).unwrap_or(DEFAULT_BUDGET),
            force,
            seed: self.seed,
            ..base
        })
    }
}
