//! Desk-scale guiding benchmark: a glossy lobe sampled analytically times an
//! environment-like radiance field, learned online by a conditional flow.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{
    mis_sample_batch, AnalyticSample, AnalyticTechnique, BlendSchedule, MisSetup, MisTrainer,
    Selection, SelectionNet, SelectionNetConfig,
};
use crate::coupling::TransformKind;
use crate::encoding::{normal_cdf, normal_pdf, InputEncoding, OneBlobConfig};
use crate::error::{FlowError, Result};
use crate::flow::{build_flow, ConditioningFeature, ConditioningSpec, FlowConfig};
use crate::nnet::NetShape;
use crate::rng::{stream_rng, sub_stream_rng, Stream};
use crate::training::{mean_variance, ReplayBuffer, Schedule, TrainConfig};

/// Conditioning features of a lobe: center `u`, `v`, sharpness and scene id.
pub const LOBE_FEATURES: [(&str, f64, f64); 4] = [
    ("lobe_u", 0.0, 1.0),
    ("lobe_v", 0.0, 1.0),
    ("sharpness", 0.5, 200.0),
    ("scene_id", 0.0, 1.0),
];

fn lobe_spec() -> ConditioningSpec {
    ConditioningSpec {
        features: LOBE_FEATURES
            .iter()
            .map(|&(name, lo, hi)| ConditioningFeature {
                name: name.into(),
                lo,
                hi,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lobe {
    pub center: [f64; 2],
    /// Inverse standard deviation of the lobe along each axis.
    pub sharpness: f64,
}

/// Product of two truncated Gaussians on the unit square, sampled exactly by
/// per-axis inverse CDF. Reads conditioning `[u, v, sharpness, ...]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TruncatedGaussianLobe;

impl TruncatedGaussianLobe {
    fn axis(m: f64, sigma: f64) -> (f64, f64, f64) {
        let lo = normal_cdf(-m / sigma);
        let hi = normal_cdf((1.0 - m) / sigma);
        (lo, hi, hi - lo)
    }
}

impl AnalyticTechnique for TruncatedGaussianLobe {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, u: &[f64], conditioning: &[f64]) -> Result<AnalyticSample> {
        let sigma = 1.0 / conditioning[2];
        let std = Normal::standard();
        let mut x = vec![0.0; 2];
        for i in 0..2 {
            let m = conditioning[i];
            let (lo, _, mass) = Self::axis(m, sigma);
            let p = (lo + u[i] * mass).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
            x[i] = (m + sigma * std.inverse_cdf(p)).clamp(0.0, 1.0);
        }
        let pdf = self.pdf(&x, conditioning);
        if !(pdf > 0.0) {
            return Err(FlowError::DegenerateDensity(format!(
                "lobe sample at ({}, {}) has density {pdf}",
                x[0], x[1]
            )));
        }
        Ok(AnalyticSample {
            x,
            pdf,
            atom: false,
        })
    }

    fn pdf(&self, x: &[f64], conditioning: &[f64]) -> f64 {
        let sigma = 1.0 / conditioning[2];
        (0..2)
            .map(|i| {
                let m = conditioning[i];
                normal_pdf((x[i] - m) / sigma) / sigma / Self::axis(m, sigma).2
            })
            .product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadianceComponent {
    pub weight: f64,
    pub mean: [f64; 2],
    pub sigma: [f64; 2],
}

/// Gaussian mixture on the unit square, periodic in `x[0]` (the azimuth of a
/// cylindrical parameterization) and unbounded in `x[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WrappedMixture {
    components: Vec<RadianceComponent>,
}

impl WrappedMixture {
    pub fn new(components: Vec<RadianceComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(FlowError::Empty("radiance mixture".into()));
        }
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0)
                || c.sigma.iter().any(|s| !(*s > 0.0))
                || c.mean.iter().any(|m| !m.is_finite())
            {
                return Err(FlowError::InvalidConfig(format!(
                    "radiance component {k} needs positive weight and sigmas"
                )));
            }
        }
        Ok(Self { components })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let wrapped: f64 = (-3..=3)
                    .map(|k| normal_pdf((x[0] - c.mean[0] + k as f64) / c.sigma[0]))
                    .sum();
                c.weight * wrapped / c.sigma[0] * normal_pdf((x[1] - c.mean[1]) / c.sigma[1])
                    / c.sigma[1]
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisVariant {
    /// Flow only (`c = 1`), trained with the plain divergence.
    FlowOnly,
    /// Lobe sampling only (`c = 0`), no training.
    AnalyticOnly,
    /// Even split (`c = 0.5`), flow trained with the blended loss.
    FixedMix,
    /// Learned selection probability, both networks trained.
    Learned,
}

impl MisVariant {
    pub const ALL: [MisVariant; 4] = [
        MisVariant::FlowOnly,
        MisVariant::AnalyticOnly,
        MisVariant::FixedMix,
        MisVariant::Learned,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MisVariant::FlowOnly => "flow_only",
            MisVariant::AnalyticOnly => "analytic_only",
            MisVariant::FixedMix => "fixed_mix",
            MisVariant::Learned => "learned",
        }
    }
}

/// Benchmark scenario: lobes, radiance, budget and model settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MisScenario {
    pub name: String,
    pub seed: u64,
    pub scene_id: f64,
    /// Samples cycle through the lobes in order.
    pub lobes: Vec<Lobe>,
    pub radiance: Vec<RadianceComponent>,
    pub schedule: Schedule,
    /// Flow settings; the dimension must be 2 and the conditioning is always
    /// the lobe features.
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub selection: SelectionNetConfig,
}

impl Default for MisScenario {
    fn default() -> Self {
        Self::near_delta()
    }
}

impl MisScenario {
    fn base(name: &str, lobes: Vec<Lobe>, radiance: Vec<RadianceComponent>) -> Self {
        Self {
            name: name.into(),
            seed: 0,
            scene_id: 0.0,
            lobes,
            radiance,
            schedule: Schedule {
                total_passes: 255,
                pass_size: 512,
                training: true,
            },
            flow: FlowConfig {
                dim: 2,
                layers: 2,
                kind: TransformKind::PiecewiseQuadratic { bins: 16 },
                encoding: InputEncoding::OneBlob(OneBlobConfig::new(16).expect("valid bins")),
                net: NetShape {
                    outer_width: 16,
                    levels: 1,
                    skips: true,
                },
                ..FlowConfig::default()
            },
            train: TrainConfig {
                batch_size: 1024,
                buffer_capacity: 16_384,
                ..TrainConfig::default()
            },
            selection: SelectionNetConfig::default(),
        }
    }

    /// Very sharp lobe under smooth radiance: lobe sampling is close to ideal.
    pub fn near_delta() -> Self {
        Self::base(
            "near_delta",
            vec![Lobe {
                center: [0.45, 0.55],
                sharpness: 100.0,
            }],
            vec![
                RadianceComponent {
                    weight: 0.6,
                    mean: [0.3, 0.5],
                    sigma: [0.25, 0.3],
                },
                RadianceComponent {
                    weight: 0.4,
                    mean: [0.8, 0.3],
                    sigma: [0.2, 0.2],
                },
            ],
        )
    }

    /// Nearly flat lobe under two small bright sources: the flow should win.
    pub fn environment_dominated() -> Self {
        Self::base(
            "environment_dominated",
            vec![Lobe {
                center: [0.5, 0.5],
                sharpness: 1.0,
            }],
            vec![
                RadianceComponent {
                    weight: 0.7,
                    mean: [0.05, 0.7],
                    sigma: [0.03, 0.04],
                },
                RadianceComponent {
                    weight: 0.3,
                    mean: [0.65, 0.25],
                    sigma: [0.05, 0.03],
                },
            ],
        )
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "near_delta" => Ok(Self::near_delta()),
            "environment_dominated" => Ok(Self::environment_dominated()),
            _ => Err(FlowError::InvalidConfig(format!(
                "unknown scenario {name:?}; expected near_delta or environment_dominated"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lobes.is_empty() {
            return Err(FlowError::InvalidConfig(
                "scenario needs at least one lobe".into(),
            ));
        }
        let spec = lobe_spec();
        for lobe in &self.lobes {
            spec.normalize(&self.raw_conditioning(lobe))?;
        }
        WrappedMixture::new(self.radiance.clone())?;
        if self.flow.dim != 2 {
            return Err(FlowError::InvalidConfig(format!(
                "guiding flows are 2D, got dim = {}",
                self.flow.dim
            )));
        }
        self.flow_config().validate()?;
        self.schedule.validate()?;
        self.train.validate()?;
        if !(self.selection.learning_rate > 0.0) {
            return Err(FlowError::InvalidConfig(
                "selection learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            conditioning: lobe_spec(),
            ..self.flow.clone()
        }
    }

    /// Raw conditioning of a lobe in this scene.
    pub fn raw_conditioning(&self, lobe: &Lobe) -> Vec<f64> {
        vec![
            lobe.center[0],
            lobe.center[1],
            lobe.sharpness,
            self.scene_id,
        ]
    }

    pub fn radiance(&self) -> Result<WrappedMixture> {
        WrappedMixture::new(self.radiance.clone())
    }

    /// Integrand `lobe(x) * radiance(x)` for raw conditioning `cond`.
    pub fn integrand(&self) -> Result<impl Fn(&[f64], &[f64]) -> f64> {
        let radiance = self.radiance()?;
        Ok(move |x: &[f64], cond: &[f64]| TruncatedGaussianLobe.pdf(x, cond) * radiance.eval(x))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FlowError::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| FlowError::InvalidConfig(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidingIteration {
    pub iteration: usize,
    pub samples: u64,
    /// Mean flow selection probability over the iteration's samples.
    pub selection: f64,
    pub loss: f64,
    pub estimate: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidingReport {
    pub variant: MisVariant,
    pub seed: u64,
    pub iterations: Vec<GuidingIteration>,
    /// Selection probability at the first lobe after the last iteration.
    pub final_selection: f64,
    pub train_steps: u64,
    pub rejected_steps: u64,
}

impl GuidingReport {
    pub fn write_csv_header<W: Write>(mut w: W) -> Result<()> {
        writeln!(
            w,
            "variant,seed,iteration,samples,selection,loss,estimate,variance"
        )?;
        Ok(())
    }

    pub fn write_csv_rows<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.iterations {
            writeln!(
                w,
                "{},{},{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
                self.variant.name(),
                self.seed,
                r.iteration,
                r.samples,
                r.selection,
                r.loss,
                r.estimate,
                r.variance
            )?;
        }
        Ok(())
    }

    pub fn final_variance(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.variance)
    }
}

/// Runs one variant of the online guiding loop on a scenario. Samples of each
/// batch are drawn with the parameters left by the previous training steps,
/// and the blend weight follows the fraction of the budget drawn so far.
pub fn run_guiding(
    scenario: &MisScenario,
    variant: MisVariant,
    seed: u64,
) -> Result<GuidingReport> {
    scenario.validate()?;
    let flow = build_flow(&scenario.flow_config(), seed)?;
    let features = LOBE_FEATURES.len();
    let selection = match variant {
        MisVariant::FlowOnly => Selection::Fixed(1.0),
        MisVariant::AnalyticOnly => Selection::Fixed(0.0),
        MisVariant::FixedMix => Selection::Fixed(0.5),
        MisVariant::Learned => Selection::Learned(SelectionNet::new(
            features,
            scenario.selection.encoding,
            scenario.selection.net,
            seed,
        )?),
    };
    let mut setup = MisSetup::new(flow, TruncatedGaussianLobe, selection)?;
    let target = scenario.integrand()?;
    let cfg = &scenario.train;
    let training = scenario.schedule.training && variant != MisVariant::AnalyticOnly;
    let mut trainer = MisTrainer::new(&setup, cfg.clone(), scenario.selection.learning_rate)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, 2, features)?;
    let mut sample_rng = stream_rng(seed, Stream::Sampler);
    let mut select_rng = sub_stream_rng(seed, Stream::Sampler, 1);
    let mut train_rng = stream_rng(seed, Stream::Trainer);

    let passes = scenario.schedule.iteration_passes();
    let pass_size = scenario.schedule.pass_size as u64;
    let total = passes.iter().sum::<u64>() * pass_size;
    let lobe_rows: Vec<Vec<f64>> = scenario
        .lobes
        .iter()
        .map(|l| scenario.raw_conditioning(l))
        .collect();
    let (mut drawn, mut iterations) = (0u64, Vec::new());

    for (iteration, p) in passes.into_iter().enumerate() {
        let samples = p * pass_size;
        let mut values = Vec::with_capacity(samples as usize);
        let (mut sel_sum, mut loss_sum, mut loss_count) = (0.0, 0.0, 0usize);
        let mut remaining = samples as usize;
        while remaining > 0 {
            let n = remaining.min(cfg.batch_size);
            remaining -= n;
            let raw = Array2::from_shape_fn((n, features), |(i, j)| {
                lobe_rows[(drawn as usize + i) % lobe_rows.len()][j]
            });
            let u_select: Vec<f64> = (0..n).map(|_| select_rng.random()).collect();
            let u = Array2::from_shape_simple_fn((n, 2), || sample_rng.random::<f64>());
            let s = mis_sample_batch(&setup, &u_select, u.view(), raw.view(), &target)?;
            values.extend_from_slice(&s.values);
            sel_sum += s.selection.iter().sum::<f64>();
            drawn += n as u64;
            if training {
                buffer.push_batch(&s.batch)?;
                let schedule = BlendSchedule::new((drawn as f64 / total as f64).min(1.0))?;
                for _ in 0..cfg.steps_per_batch {
                    let mb = buffer.sample(cfg.batch_size, &mut train_rng)?;
                    let m = trainer.step(&mut setup, &mb, schedule)?;
                    if !m.rejected {
                        loss_sum += m.loss;
                        loss_count += 1;
                    }
                }
            }
        }
        let (estimate, variance) = mean_variance(&values);
        iterations.push(GuidingIteration {
            iteration,
            samples,
            selection: sel_sum / samples as f64,
            loss: if loss_count > 0 {
                loss_sum / loss_count as f64
            } else {
                f64::NAN
            },
            estimate,
            variance,
        });
    }
    Ok(GuidingReport {
        variant,
        seed,
        iterations,
        final_selection: setup.selection_prob(&lobe_rows[0])?,
        train_steps: trainer.steps(),
        rejected_steps: trainer.rejected_steps(),
    })
}
