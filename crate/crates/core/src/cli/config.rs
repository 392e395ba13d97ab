//! Experiment configuration: a TOML file whose every key has a default.
//!
//! ```toml
//! seed = 0
//! samples = 1000
//!
//! [mixture]
//! dimension = 500
//! mode = 2.0
//! component_sigma = 0.25
//! weights = [0.5, 0.5]
//!
//! [sampler]
//! sigma_min = 0.002
//! sigma_max = 80.0
//! rho = 7.0
//! steps = 64
//! step_rule = "heun"              # or "euler"
//! momentum_mode = "per_evaluation" # or "per_step"
//!
//! [[strategies]]
//! kind = "apg"                     # "none", "cfg" or "apg"
//! w = 3.0
//! eta = 0.0
//! r = "auto"                       # or a number; <= 0 disables rescaling
//! beta = -0.5
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytic::GaussianMixture;
use crate::error::{Error, Result};
use crate::guidance::GuidanceParams;
use crate::sampler::{GuidanceStrategy, MomentumMode, SamplerConfig, SigmaSchedule, StepRule};

pub const DEFAULT_ETA: f64 = 0.0;
pub const DEFAULT_BETA: f64 = -0.5;
pub const DEFAULT_SWEEP_CAP: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSpec {
    pub dimension: usize,
    pub mode: f64,
    pub component_sigma: f64,
    pub weights: Vec<f64>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            dimension: 500,
            mode: 2.0,
            component_sigma: 0.25,
            weights: vec![0.5, 0.5],
        }
    }
}

impl MixtureSpec {
    pub fn build(&self) -> Result<GaussianMixture> {
        if self.dimension == 0 {
            return Err(Error::config("mixture.dimension", "must be at least 1"));
        }
        if !self.mode.is_finite() {
            return Err(Error::config("mixture.mode", "must be finite"));
        }
        if !(self.component_sigma > 0.0 && self.component_sigma.is_finite()) {
            return Err(Error::config("mixture.component_sigma", "must be positive"));
        }
        if !(1..=2).contains(&self.weights.len()) {
            return Err(Error::config("mixture.weights", "must list one or two weights"));
        }
        GaussianMixture::symmetric(
            self.dimension,
            self.mode,
            self.component_sigma,
            self.weights.clone(),
        )
        .map_err(|e| Error::config("mixture.weights", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
    pub step_rule: StepRule,
    pub momentum_mode: MomentumMode,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        let s = SigmaSchedule::default();
        Self {
            sigma_min: s.sigma_min,
            sigma_max: s.sigma_max,
            rho: s.rho,
            steps: s.steps,
            step_rule: StepRule::default(),
            momentum_mode: MomentumMode::default(),
        }
    }
}

impl SamplerSpec {
    pub fn build(&self) -> Result<SamplerConfig> {
        let schedule = SigmaSchedule {
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            steps: self.steps,
            rho: self.rho,
        };
        schedule.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::config(format!("sampler.{key}"), message),
            other => other,
        })?;
        Ok(SamplerConfig {
            schedule,
            step_rule: self.step_rule,
            momentum_mode: self.momentum_mode,
        })
    }
}

/// Rescale radius: a fixed value or calibrated per run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Radius {
    #[default]
    Auto,
    Fixed(f64),
}

impl fmt::Display for Radius {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Radius::Auto => f.write_str("auto"),
            Radius::Fixed(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RadiusRepr {
    Number(f64),
    Integer(i64),
    Text(String),
}

impl Serialize for Radius {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Radius::Auto => RadiusRepr::Text("auto".into()),
            Radius::Fixed(r) => RadiusRepr::Number(*r),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Radius {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match RadiusRepr::deserialize(d)? {
            RadiusRepr::Number(r) => Ok(Radius::Fixed(r)),
            RadiusRepr::Integer(r) => Ok(Radius::Fixed(r as f64)),
            RadiusRepr::Text(t) if t == "auto" => Ok(Radius::Auto),
            RadiusRepr::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"auto\", got \"{t}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    None,
    Cfg,
    Apg,
}

impl StrategyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Cfg => "cfg",
            StrategyKind::Apg => "apg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    #[serde(default = "one")]
    pub w: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub r: Radius,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl StrategySpec {
    pub fn cfg(w: f64) -> Self {
        Self {
            kind: StrategyKind::Cfg,
            w,
            eta: 1.0,
            r: Radius::Fixed(0.0),
            beta: 0.0,
        }
    }

    pub fn apg(w: f64) -> Self {
        Self {
            kind: StrategyKind::Apg,
            w,
            eta: DEFAULT_ETA,
            r: Radius::Auto,
            beta: DEFAULT_BETA,
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        let fields = [("w", self.w), ("eta", self.eta), ("beta", self.beta)];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::config(format!("{key}.{name}"), "must be finite"));
            }
        }
        if self.w < 0.0 {
            return Err(Error::config(format!("{key}.w"), "must be non-negative"));
        }
        if let Radius::Fixed(r) = self.r {
            if !r.is_finite() {
                return Err(Error::config(format!("{key}.r"), "must be finite"));
            }
        }
        if self.kind == StrategyKind::Apg && self.eta > 1.0 {
            log::warn!("{key}.eta = {} amplifies the parallel component", self.eta);
        }
        Ok(())
    }

    /// Short file-name friendly label.
    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::None => "none".to_owned(),
            StrategyKind::Cfg => format!("cfg_w{}", self.w),
            StrategyKind::Apg => format!(
                "apg_w{}_eta{}_r{}_beta{}",
                self.w,
                self.eta,
                match self.r {
                    Radius::Auto => "auto".to_owned(),
                    Radius::Fixed(r) => format!("{r:.4}"),
                },
                self.beta
            ),
        }
    }

    /// The sampler strategy once any automatic radius is resolved.
    pub fn to_strategy(&self, radius: f64) -> GuidanceStrategy {
        match self.kind {
            StrategyKind::None => GuidanceStrategy::None,
            StrategyKind::Cfg => GuidanceStrategy::Cfg { w: self.w },
            StrategyKind::Apg => GuidanceStrategy::Apg(GuidanceParams {
                w: self.w,
                eta: self.eta,
                r: radius,
                beta: self.beta,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub kinds: Vec<StrategyKind>,
    pub w: Vec<f64>,
    pub eta: Vec<f64>,
    pub r: Vec<Radius>,
    pub beta: Vec<f64>,
    pub cap: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            kinds: vec![StrategyKind::Cfg, StrategyKind::Apg],
            w: vec![1.0, 2.0, 3.0, 5.0, 8.0],
            eta: vec![DEFAULT_ETA],
            r: vec![Radius::Auto],
            beta: vec![DEFAULT_BETA],
            cap: DEFAULT_SWEEP_CAP,
        }
    }
}

impl SweepSpec {
    /// Expands the grid. CFG and unguided cells vary only in `w`.
    pub fn cells(&self) -> Result<Vec<StrategySpec>> {
        for (key, empty) in [
            ("sweep.kinds", self.kinds.is_empty()),
            ("sweep.w", self.w.is_empty()),
            ("sweep.eta", self.eta.is_empty()),
            ("sweep.r", self.r.is_empty()),
            ("sweep.beta", self.beta.is_empty()),
        ] {
            if empty {
                return Err(Error::config(key, "must list at least one value"));
            }
        }
        let mut cells = Vec::new();
        for &kind in &self.kinds {
            match kind {
                StrategyKind::None => cells.push(StrategySpec {
                    kind,
                    ..StrategySpec::cfg(1.0)
                }),
                StrategyKind::Cfg => cells.extend(self.w.iter().map(|&w| StrategySpec::cfg(w))),
                StrategyKind::Apg => {
                    for &w in &self.w {
                        for &eta in &self.eta {
                            for &r in &self.r {
                                for &beta in &self.beta {
                                    cells.push(StrategySpec {
                                        kind,
                                        w,
                                        eta,
                                        r,
                                        beta,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        if cells.len() > self.cap {
            return Err(Error::config(
                "sweep.cap",
                format!(
                    "grid has {} cells, more than the cap of {}; use fewer values per axis",
                    cells.len(),
                    self.cap
                ),
            ));
        }
        for (i, c) in cells.iter().enumerate() {
            c.validate(&format!("sweep.cell[{i}]"))?;
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub samples: usize,
    /// Trajectories used to calibrate an automatic rescale radius.
    pub calibration_samples: usize,
    /// Leading coordinates written to trajectory dumps.
    pub dump_coords: usize,
    pub out: PathBuf,
    pub mixture: MixtureSpec,
    pub sampler: SamplerSpec,
    pub strategies: Vec<StrategySpec>,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 1000,
            calibration_samples: 16,
            dump_coords: 2,
            out: PathBuf::from("pg-lab-out"),
            mixture: MixtureSpec::default(),
            sampler: SamplerSpec::default(),
            strategies: vec![StrategySpec::cfg(3.0), StrategySpec::apg(3.0)],
            sweep: SweepSpec::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_owned)
                .unwrap_or_else(|| "<file>".to_owned());
            Error::config(key, e.to_string().trim().to_owned())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(samples) = o.samples {
            self.samples = samples;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("samples", "must be at least 1"));
        }
        if self.calibration_samples == 0 {
            return Err(Error::config("calibration_samples", "must be at least 1"));
        }
        self.mixture.build()?;
        self.sampler.build()?;
        for (i, s) in self.strategies.iter().enumerate() {
            s.validate(&format!("strategies[{i}]"))?;
        }
        Ok(())
    }
}
