use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowmc_core::bench::{builtin_target, pss_synthetic_target, GaussianMixture, ImageTarget};
use flowmc_core::flow::{FlowConfig, PartitionScheme};
use flowmc_core::mis::{MisScenario, MisVariant};
use flowmc_core::training::{Proposal, Schedule, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;

pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.01;

fn default_threshold() -> f64 {
    DEFAULT_FAILURE_THRESHOLD
}

/// Reads a TOML config. Relative paths inside it resolve against its directory.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<(T, PathBuf)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let cfg =
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        bail!("failure_threshold must lie in [0, 1], got {t}");
    }
    Ok(())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// One of the procedural 64x64 targets.
    Builtin(String),
    /// A PGM file.
    Pgm(PathBuf),
}

impl TargetSpec {
    pub fn load(&self, base: &Path) -> Result<ImageTarget> {
        match self {
            TargetSpec::Builtin(name) => Ok(builtin_target(name)?),
            TargetSpec::Pgm(path) => {
                let path = base.join(path);
                ImageTarget::load_pgm(&path)
                    .with_context(|| format!("cannot load target {}", path.display()))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            TargetSpec::Builtin(name) => name.clone(),
            TargetSpec::Pgm(path) => path
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    /// Side of the quadrature grid for MAPE, cross-entropy and density dumps.
    pub resolution: usize,
    /// Flow samples for the estimator statistics.
    pub samples: usize,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            resolution: 256,
            samples: 65_536,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainImageConfig {
    #[serde(default)]
    pub seed: u64,
    pub target: TargetSpec,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "uniform")]
    pub proposal: Proposal,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default = "default_threshold")]
    pub failure_threshold: f64,
    #[serde(default)]
    pub record_timing: bool,
}

fn uniform() -> Proposal {
    Proposal::Uniform
}

impl TrainImageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.flow.dim != 2 {
            bail!("image targets are 2D, flow.dim is {}", self.flow.dim);
        }
        if !self.flow.conditioning.is_empty() {
            bail!("image flows take no conditioning");
        }
        self.flow.validate()?;
        self.train.validate()?;
        self.schedule.validate()?;
        if self.metrics.resolution < 2 || self.metrics.samples < 2 {
            bail!("metrics.resolution and metrics.samples must be at least 2");
        }
        check_threshold(self.failure_threshold)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidingBenchConfig {
    #[serde(default)]
    pub seed: u64,
    /// Number of seeds, starting at `seed`.
    #[serde(default = "one")]
    pub runs: u64,
    #[serde(default = "all_variants")]
    pub variants: Vec<MisVariant>,
    /// Name of a shipped scenario, used when no `[scenario]` table is given.
    pub builtin: Option<String>,
    pub scenario: Option<MisScenario>,
    #[serde(default = "default_threshold")]
    pub failure_threshold: f64,
}

fn one() -> u64 {
    1
}

fn all_variants() -> Vec<MisVariant> {
    MisVariant::ALL.to_vec()
}

impl GuidingBenchConfig {
    pub fn scenario(&self) -> Result<MisScenario> {
        let s = match (&self.builtin, &self.scenario) {
            (Some(name), None) => MisScenario::builtin(name)?,
            (None, Some(s)) => s.clone(),
            _ => bail!("give exactly one of `builtin` and `[scenario]`"),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario()?;
        if self.runs == 0 || self.variants.is_empty() {
            bail!("runs and variants must be non-empty");
        }
        check_threshold(self.failure_threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticDensity {
    Uniform,
    /// `p(x) = 2` on the left half, 0 on the right.
    LeftStep,
}

impl DiagnosticDensity {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            DiagnosticDensity::Uniform => 1.0,
            DiagnosticDensity::LeftStep if x < 0.5 => 2.0,
            DiagnosticDensity::LeftStep => 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppendixBConfig {
    pub seed: u64,
    pub q1: f64,
    pub q2: f64,
    pub density: DiagnosticDensity,
}

impl Default for AppendixBConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            q1: 1.0,
            q2: 3.0,
            density: DiagnosticDensity::Uniform,
        }
    }
}

impl AppendixBConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q1 > 0.0 && self.q2 > 0.0) {
            bail!("q1 and q2 must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PssBenchConfig {
    pub seed: u64,
    /// Mixture components; the shipped target for `flow.dim` when empty.
    pub target: Option<GaussianMixture>,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub schedule: Schedule,
    pub proposal: Proposal,
    /// Samples for the final flow and uniform variance estimates.
    pub eval_samples: usize,
    pub failure_threshold: f64,
    pub record_timing: bool,
}

impl Default for PssBenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            target: None,
            flow: FlowConfig {
                dim: 4,
                layers: 4,
                partition: PartitionScheme::EvenOdd,
                ..FlowConfig::default()
            },
            train: TrainConfig::default(),
            schedule: Schedule {
                total_passes: 511,
                pass_size: 4096,
                training: true,
            },
            proposal: Proposal::Flow,
            eval_samples: 1 << 20,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            record_timing: false,
        }
    }
}

impl PssBenchConfig {
    pub fn target(&self) -> Result<GaussianMixture> {
        let target = match &self.target {
            Some(t) => t.clone(),
            None => pss_synthetic_target(self.flow.dim)?,
        };
        target.validate()?;
        if target.dim() != self.flow.dim {
            bail!(
                "target is {}D but flow.dim is {}",
                target.dim(),
                self.flow.dim
            );
        }
        Ok(target)
    }

    pub fn validate(&self) -> Result<()> {
        self.target()?;
        if !self.flow.conditioning.is_empty() {
            bail!("the synthetic target takes no conditioning");
        }
        self.flow.validate()?;
        self.train.validate()?;
        self.schedule.validate()?;
        if self.eval_samples < 2 {
            bail!("eval_samples must be at least 2");
        }
        check_threshold(self.failure_threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_image_defaults() {
        let cfg: TrainImageConfig = toml::from_str("target = { builtin = \"rings\" }").unwrap();
        assert_eq!(cfg.failure_threshold, DEFAULT_FAILURE_THRESHOLD);
        assert_eq!(cfg.proposal, Proposal::Uniform);
        assert_eq!(cfg.target.name(), "rings");
        cfg.validate().unwrap();
    }

    #[test]
    fn pgm_target_name_is_the_file_stem() {
        let t = TargetSpec::Pgm(PathBuf::from("dir/sky.pgm"));
        assert_eq!(t.name(), "sky");
    }

    #[test]
    fn rejects_bad_thresholds() {
        let cfg: TrainImageConfig =
            toml::from_str("target = { builtin = \"rings\" }\nfailure_threshold = 1.5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn guiding_needs_exactly_one_scenario() {
        let none: GuidingBenchConfig = toml::from_str("runs = 2").unwrap();
        assert!(none.validate().is_err());
        let builtin: GuidingBenchConfig = toml::from_str("builtin = \"near_delta\"").unwrap();
        builtin.validate().unwrap();
        assert_eq!(builtin.variants.len(), MisVariant::ALL.len());
        let zero: GuidingBenchConfig =
            toml::from_str("builtin = \"near_delta\"\nruns = 0").unwrap();
        assert!(zero.validate().is_err());
    }

    #[test]
    fn pss_target_must_match_dimension() {
        let cfg = PssBenchConfig::default();
        assert_eq!(cfg.target().unwrap().dim(), 4);
        let bad = PssBenchConfig {
            target: Some(pss_synthetic_target(6).unwrap()),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn diagnostic_densities_integrate_to_one() {
        for d in [DiagnosticDensity::Uniform, DiagnosticDensity::LeftStep] {
            let n = 1000;
            let mass: f64 = (0..n)
                .map(|i| d.eval((i as f64 + 0.5) / n as f64))
                .sum::<f64>()
                / n as f64;
            assert!((mass - 1.0).abs() < 1e-12);
        }
        assert!(AppendixBConfig {
            q1: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<AppendixBConfig>("q3 = 1.0").is_err());
        assert!(toml::from_str::<PssBenchConfig>("eval = 3").is_err());
    }
}
