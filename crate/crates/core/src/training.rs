//! Online training of flows against noisy, unnormalized integrand estimates.
//!
//! The KL and chi-square gradients both reduce to a weighted negative log
//! likelihood `-w log q(x)` with a Monte Carlo weight `w` that is treated as
//! a constant.

use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::flow::{FlowGradients, FlowOptimizer, NormalizingFlow};
use crate::nnet::AdamConfig;
use crate::rng::{stream_rng, Stream};

/// Rows pushed through the flow at once while computing a training gradient.
const TRAIN_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Kl,
    Chi2,
}

/// One training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub x: Vec<f64>,
    /// Normalized conditioning features.
    pub conditioning: Vec<f64>,
    /// Nonnegative estimate of the unnormalized target at `x`.
    pub f_est: f64,
    /// Density of the proposal `x` was drawn from.
    pub proposal_pdf: f64,
    /// Drawn as a discrete atom: the flow density is zero there and the
    /// sample does not train the flow.
    pub atom: bool,
    /// Density of the analytic technique at `x` when sampling with multiple
    /// importance sampling, 0 otherwise.
    pub analytic_pdf: f64,
}

impl TrainRecord {
    pub fn new(x: Vec<f64>, f_est: f64, proposal_pdf: f64) -> Result<Self> {
        let r = Self {
            x,
            conditioning: Vec::new(),
            f_est,
            proposal_pdf,
            atom: false,
            analytic_pdf: 0.0,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_est.is_finite() && self.f_est >= 0.0) {
            return Err(FlowError::Domain(format!(
                "target estimate {} must be finite and >= 0",
                self.f_est
            )));
        }
        if !(self.proposal_pdf.is_finite() && self.proposal_pdf > 0.0) {
            return Err(FlowError::DegenerateDensity(format!(
                "proposal density {}",
                self.proposal_pdf
            )));
        }
        Ok(())
    }
}

/// Monte Carlo weight of a record for the given loss, with `q_val` the
/// current flow density at `record.x`.
///
/// KL uses `f / r`, chi-square `f^2 / (r q)`; with `r = q` these are the
/// familiar `f / q` and `(f / q)^2`.
pub fn loss_weight(record: &TrainRecord, q_val: f64, loss: LossKind) -> Result<f64> {
    weight(record.f_est, record.proposal_pdf, q_val, loss)
}

pub(crate) fn weight(f: f64, r: f64, q: f64, loss: LossKind) -> Result<f64> {
    if !(q > 0.0) {
        return Err(FlowError::DegenerateDensity(format!(
            "flow density {q} at a training sample"
        )));
    }
    Ok(match loss {
        LossKind::Kl => f / r,
        LossKind::Chi2 => f * f / (r * q),
    })
}

/// Column-oriented batch of training records.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub conditioning: Array2<f64>,
    pub f_est: Vec<f64>,
    pub proposal_pdf: Vec<f64>,
    pub atom: Vec<bool>,
    pub analytic_pdf: Vec<f64>,
}

impl Batch {
    /// Batch of unconditional, non-atom records.
    pub fn new(x: Array2<f64>, f_est: Vec<f64>, proposal_pdf: Vec<f64>) -> Self {
        let n = x.nrows();
        Self {
            x,
            conditioning: Array2::zeros((n, 0)),
            f_est,
            proposal_pdf,
            atom: vec![false; n],
            analytic_pdf: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.f_est.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_est.is_empty()
    }

    pub fn record(&self, i: usize) -> TrainRecord {
        TrainRecord {
            x: self.x.row(i).to_vec(),
            conditioning: self.conditioning.row(i).to_vec(),
            f_est: self.f_est[i],
            proposal_pdf: self.proposal_pdf[i],
            atom: self.atom[i],
            analytic_pdf: self.analytic_pdf[i],
        }
    }
}

/// Fixed-capacity FIFO store of training records.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    cond_dim: usize,
    x: Vec<f64>,
    cond: Vec<f64>,
    f_est: Vec<f64>,
    proposal: Vec<f64>,
    atom: Vec<bool>,
    analytic: Vec<f64>,
    /// Slot the next record goes into once the buffer is full.
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize, cond_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(FlowError::InvalidConfig(
                "replay buffer capacity must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            dim,
            cond_dim,
            x: Vec::new(),
            cond: Vec::new(),
            f_est: Vec::new(),
            proposal: Vec::new(),
            atom: Vec::new(),
            analytic: Vec::new(),
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.f_est.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_est.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, record: &TrainRecord) -> Result<()> {
        record.validate()?;
        if record.x.len() != self.dim || record.conditioning.len() != self.cond_dim {
            return Err(FlowError::Shape(format!(
                "record has {} coordinates and {} features, buffer holds {} and {}",
                record.x.len(),
                record.conditioning.len(),
                self.dim,
                self.cond_dim
            )));
        }
        if self.len() < self.capacity {
            self.x.extend_from_slice(&record.x);
            self.cond.extend_from_slice(&record.conditioning);
            self.f_est.push(record.f_est);
            self.proposal.push(record.proposal_pdf);
            self.atom.push(record.atom);
            self.analytic.push(record.analytic_pdf);
        } else {
            let i = self.next;
            self.x[i * self.dim..(i + 1) * self.dim].copy_from_slice(&record.x);
            self.cond[i * self.cond_dim..(i + 1) * self.cond_dim]
                .copy_from_slice(&record.conditioning);
            self.f_est[i] = record.f_est;
            self.proposal[i] = record.proposal_pdf;
            self.atom[i] = record.atom;
            self.analytic[i] = record.analytic_pdf;
            self.next = (i + 1) % self.capacity;
        }
        Ok(())
    }

    pub fn push_batch(&mut self, batch: &Batch) -> Result<()> {
        (0..batch.len()).try_for_each(|i| self.push(&batch.record(i)))
    }

    /// Record at age order `i` (0 = oldest).
    pub fn get(&self, i: usize) -> Option<TrainRecord> {
        if i >= self.len() {
            return None;
        }
        let slot = (self.next + i) % self.len();
        Some(self.slot(slot))
    }

    fn slot(&self, s: usize) -> TrainRecord {
        TrainRecord {
            x: self.x[s * self.dim..(s + 1) * self.dim].to_vec(),
            conditioning: self.cond[s * self.cond_dim..(s + 1) * self.cond_dim].to_vec(),
            f_est: self.f_est[s],
            proposal_pdf: self.proposal[s],
            atom: self.atom[s],
            analytic_pdf: self.analytic[s],
        }
    }

    /// Uniform random minibatch drawn with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if self.is_empty() {
            return Err(FlowError::Empty("replay buffer".into()));
        }
        let mut x = Array2::zeros((n, self.dim));
        let mut cond = Array2::zeros((n, self.cond_dim));
        let (mut f_est, mut proposal) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut atom, mut analytic) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for r in 0..n {
            let s = rng.random_range(0..self.len());
            for (j, v) in self.x[s * self.dim..(s + 1) * self.dim].iter().enumerate() {
                x[[r, j]] = *v;
            }
            for (j, v) in self.cond[s * self.cond_dim..(s + 1) * self.cond_dim]
                .iter()
                .enumerate()
            {
                cond[[r, j]] = *v;
            }
            f_est.push(self.f_est[s]);
            proposal.push(self.proposal[s]);
            atom.push(self.atom[s]);
            analytic.push(self.analytic[s]);
        }
        Ok(Batch {
            x,
            conditioning: cond,
            f_est,
            proposal_pdf: proposal,
            atom,
            analytic_pdf: analytic,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Global gradient norm limit; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub adam: AdamConfig,
    /// Multiplies the learning rate after every iteration. 1 disables decay.
    pub learning_rate_decay: f64,
    /// Optimizer steps taken after each sampled batch.
    pub steps_per_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Kl,
            batch_size: 4096,
            buffer_capacity: 65_536,
            grad_clip_norm: None,
            adam: AdamConfig::default(),
            learning_rate_decay: 1.0,
            steps_per_batch: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for `loss`, with the chi-square gradient clipped at 50.
    pub fn for_loss(loss: LossKind) -> Self {
        Self {
            loss,
            grad_clip_norm: (loss == LossKind::Chi2).then_some(50.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FlowError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        if self.buffer_capacity == 0 {
            return Err(FlowError::InvalidConfig(
                "buffer_capacity must be at least 1".into(),
            ));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(FlowError::InvalidConfig(format!(
                    "grad_clip_norm must be positive, got {c}"
                )));
            }
        }
        if !(self.learning_rate_decay > 0.0 && self.learning_rate_decay <= 1.0) {
            return Err(FlowError::InvalidConfig(format!(
                "learning_rate_decay must lie in (0, 1], got {}",
                self.learning_rate_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Mean of `-w log q` over the batch.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub raw_grad_norm: f64,
    /// Gradient norm actually applied.
    pub grad_norm: f64,
    pub clipped: bool,
    /// The step was dropped because of a non-finite loss or gradient.
    pub rejected: bool,
}

impl StepMetrics {
    fn rejected(loss: f64) -> Self {
        Self {
            loss,
            raw_grad_norm: f64::NAN,
            grad_norm: f64::NAN,
            clipped: false,
            rejected: true,
        }
    }
}

/// Optimizer state plus step bookkeeping for one flow.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    optimizer: FlowOptimizer,
    steps: u64,
    rejected: u64,
}

impl Trainer {
    pub fn new(flow: &NormalizingFlow, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: FlowOptimizer::new(flow, config.adam),
            config,
            steps: 0,
            rejected: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn rejected_steps(&self) -> u64 {
        self.rejected
    }

    pub fn optimizer_mut(&mut self) -> &mut FlowOptimizer {
        &mut self.optimizer
    }

    /// One optimizer step on `batch`. Rejected steps leave the flow untouched.
    pub fn train_on_batch(
        &mut self,
        flow: &mut NormalizingFlow,
        batch: &Batch,
    ) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(FlowError::Empty("training batch".into()));
        }
        self.steps += 1;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads = FlowGradients::zeros_like(flow);
        // chunks keep the per-layer tapes cache resident; the gradient is a sum
        for start in (0..batch.len()).step_by(TRAIN_CHUNK) {
            let rows = start..(start + TRAIN_CHUNK).min(batch.len());
            let (log_q, tape) = flow.forward_tape(
                batch.x.slice(s![rows.clone(), ..]),
                batch.conditioning.slice(s![rows.clone(), ..]),
            )?;
            let mut g = vec![0.0; rows.len()];
            for (j, i) in rows.enumerate() {
                if batch.atom[i] {
                    continue;
                }
                let w = weight(
                    batch.f_est[i],
                    batch.proposal_pdf[i],
                    log_q[j].exp(),
                    self.config.loss,
                )
                .unwrap_or(f64::NAN);
                // zero-weight records still count towards the batch size
                if w != 0.0 {
                    loss -= w * log_q[j] / n;
                    g[j] = -w / n;
                }
            }
            if !loss.is_finite() {
                break;
            }
            grads.add_assign(&flow.backward(&tape, &g)?);
        }
        if !loss.is_finite() {
            self.rejected += 1;
            return Ok(StepMetrics::rejected(loss));
        }
        let raw_norm = grads.norm();
        let clipped = match self.config.grad_clip_norm {
            Some(max) => grads.clip(max).1,
            None => false,
        };
        if let Err(FlowError::NonFiniteGradient(_)) = self.optimizer.step(flow, &grads) {
            self.rejected += 1;
            return Ok(StepMetrics::rejected(loss));
        }
        Ok(StepMetrics {
            loss,
            raw_grad_norm: raw_norm,
            grad_norm: grads.norm(),
            clipped,
            rejected: false,
        })
    }

    /// Samples a minibatch from `buffer` and trains on it.
    pub fn train_step<R: Rng>(
        &mut self,
        flow: &mut NormalizingFlow,
        buffer: &ReplayBuffer,
        rng: &mut R,
    ) -> Result<StepMetrics> {
        let batch = buffer.sample(self.config.batch_size, rng)?;
        self.train_on_batch(flow, &batch)
    }

    pub fn decay_learning_rate(&mut self) {
        if self.config.learning_rate_decay != 1.0 {
            self.optimizer
                .scale_learning_rate(self.config.learning_rate_decay);
        }
    }
}

/// Free function form of [`Trainer::train_step`].
pub fn train_step<R: Rng>(
    flow: &mut NormalizingFlow,
    trainer: &mut Trainer,
    buffer: &ReplayBuffer,
    rng: &mut R,
) -> Result<StepMetrics> {
    trainer.train_step(flow, buffer, rng)
}

/// Sample budget split into power-of-two iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Budget `N` in passes; iteration `i` draws `2^i` passes.
    pub total_passes: u64,
    /// Samples per pass.
    pub pass_size: usize,
    pub training: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_passes: 1023,
            pass_size: 256,
            training: true,
        }
    }
}

impl Schedule {
    /// Passes per iteration: `1, 2, 4, ...`, `floor(log2(N + 1))` of them.
    pub fn iteration_passes(&self) -> Vec<u64> {
        let m = (self.total_passes + 1).ilog2();
        (0..m).map(|i| 1u64 << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_passes == 0 || self.pass_size == 0 {
            return Err(FlowError::InvalidConfig(
                "schedule needs a positive budget and pass size".into(),
            ));
        }
        Ok(())
    }
}

/// Unnormalized target evaluated on batches of points in the unit cube.
pub trait Integrand {
    fn dim(&self) -> usize;
    fn evaluate(&mut self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub samples: u64,
    /// Mean training loss over the iteration's steps (NaN without training).
    pub loss: f64,
    pub estimate: f64,
    /// Unbiased sample variance of the per-sample weights `f / q`.
    pub variance: f64,
    pub weight_p9999: f64,
    pub wallclock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub iterations: Vec<IterationReport>,
    pub train_steps: u64,
    pub rejected_steps: u64,
    /// Set when the run stopped early; the iterations so far are kept.
    pub error: Option<String>,
}

impl ExperimentReport {
    /// Inverse-variance combination of all finished iterations.
    pub fn combined_estimate(&self) -> Result<f64> {
        combine_iterations(
            &self
                .iterations
                .iter()
                .map(|r| (r.estimate, r.variance / r.samples as f64))
                .collect::<Vec<_>>(),
        )
    }

    pub fn rejected_fraction(&self) -> f64 {
        if self.train_steps == 0 {
            0.0
        } else {
            self.rejected_steps as f64 / self.train_steps as f64
        }
    }

    /// Writes the per-iteration CSV. Without `timing` the wall-clock column
    /// is written as 0 so that repeated runs are byte-identical.
    pub fn write_csv<W: Write>(&self, mut w: W, timing: bool) -> Result<()> {
        writeln!(
            w,
            "iteration,samples,loss,estimate,variance,weight_p9999,wallclock_ms"
        )?;
        for r in &self.iterations {
            let ms = if timing { r.wallclock_ms } else { 0.0 };
            writeln!(
                w,
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}",
                r.iteration, r.samples, r.loss, r.estimate, r.variance, r.weight_p9999, ms
            )?;
        }
        Ok(())
    }
}

/// Trains for a fixed number of steps, each on `cfg.batch_size` fresh
/// uniform samples weighted by the target. `on_step` sees every step's
/// metrics and the updated flow.
pub fn train_uniform<I: Integrand>(
    flow: &mut NormalizingFlow,
    target: &mut I,
    cfg: &TrainConfig,
    steps: usize,
    mut on_step: impl FnMut(usize, &StepMetrics, &NormalizingFlow) -> Result<()>,
) -> Result<Trainer> {
    if target.dim() != flow.dim() || !flow.conditioning().is_empty() {
        return Err(FlowError::Shape(
            "uniform training needs an unconditional flow matching the target".into(),
        ));
    }
    let mut trainer = Trainer::new(flow, cfg.clone())?;
    let mut rng = stream_rng(cfg.seed, Stream::Sampler);
    let (n, d) = (cfg.batch_size, flow.dim());
    for step in 0..steps {
        let x = Array2::from_shape_simple_fn((n, d), || rng.random::<f64>());
        let f = target.evaluate(x.view())?;
        let m = trainer.train_on_batch(flow, &Batch::new(x, f, vec![1.0; n]))?;
        on_step(step, &m, flow)?;
    }
    Ok(trainer)
}

/// Inverse-variance weighted average of `(value, variance)` pairs.
///
/// Weights are capped at 1e12 so zero-variance entries stay finite. If every
/// weight vanishes (all variances infinite) the plain mean is returned.
pub fn combine_iterations(estimates: &[(f64, f64)]) -> Result<f64> {
    if estimates.is_empty() {
        return Err(FlowError::Empty("no iterations to combine".into()));
    }
    let weights: Vec<f64> = estimates
        .iter()
        .map(|&(_, var)| {
            if var.is_nan() {
                0.0
            } else {
                (1.0 / var).min(1e12)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Ok(estimates.iter().map(|e| e.0).sum::<f64>() / estimates.len() as f64);
    }
    Ok(estimates
        .iter()
        .zip(&weights)
        .map(|(e, w)| e.0 * w)
        .sum::<f64>()
        / total)
}

/// Mean and unbiased variance. The variance of a single value is infinite.
pub fn mean_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Linearly interpolated `p`-quantile, `p` in `[0, 1]`.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Where the online loop draws its samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposal {
    /// The flow being trained.
    #[default]
    Flow,
    /// Uniform samples weighted by the target value.
    Uniform,
}

/// Draws from the flow, evaluates the target, and trains on the results,
/// one batch at a time: every batch is sampled with the parameters left by
/// the previous training steps. `conditioning` is the normalized feature
/// vector shared by every sample.
pub fn online_loop<I: Integrand>(
    flow: &mut NormalizingFlow,
    target: &mut I,
    schedule: &Schedule,
    cfg: &TrainConfig,
    conditioning: &[f64],
) -> Result<ExperimentReport> {
    online_loop_with(
        flow,
        target,
        schedule,
        cfg,
        conditioning,
        Proposal::Flow,
        |_, _| Ok(()),
    )
}

/// [`online_loop`] with a choice of proposal and a hook called with the
/// flow after every iteration.
pub fn online_loop_with<I: Integrand>(
    flow: &mut NormalizingFlow,
    target: &mut I,
    schedule: &Schedule,
    cfg: &TrainConfig,
    conditioning: &[f64],
    proposal: Proposal,
    mut on_iteration: impl FnMut(&IterationReport, &NormalizingFlow) -> Result<()>,
) -> Result<ExperimentReport> {
    schedule.validate()?;
    if target.dim() != flow.dim() || conditioning.len() != flow.conditioning().len() {
        return Err(FlowError::Shape(
            "target, conditioning and flow dimensions disagree".into(),
        ));
    }
    let mut trainer = Trainer::new(flow, cfg.clone())?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, flow.dim(), conditioning.len())?;
    let mut sampler_rng = stream_rng(cfg.seed, Stream::Sampler);
    let mut trainer_rng = stream_rng(cfg.seed, Stream::Trainer);
    let mut report = ExperimentReport::default();
    let d = flow.dim();

    for (iteration, passes) in schedule.iteration_passes().into_iter().enumerate() {
        let start = Instant::now();
        let samples = passes * schedule.pass_size as u64;
        let mut weights = Vec::with_capacity(samples as usize);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        let mut remaining = samples as usize;
        while remaining > 0 {
            let n = remaining.min(cfg.batch_size);
            remaining -= n;
            let u = Array2::from_shape_simple_fn((n, d), || sampler_rng.random::<f64>());
            let cond = Array2::from_shape_fn((n, conditioning.len()), |(_, j)| conditioning[j]);
            let (x, log_q) = match proposal {
                Proposal::Flow => flow.sample_batch(u.view(), cond.view())?,
                Proposal::Uniform => (u, vec![0.0; n]),
            };
            let f = match target.evaluate(x.view()) {
                Ok(f) => f,
                Err(e) => {
                    report.error = Some(e.to_string());
                    return Ok(report);
                }
            };
            for (i, (&fi, &lq)) in f.iter().zip(&log_q).enumerate() {
                let q = lq.exp();
                weights.push(fi / q);
                if schedule.training {
                    let record = TrainRecord {
                        x: x.row(i).to_vec(),
                        conditioning: conditioning.to_vec(),
                        f_est: fi,
                        proposal_pdf: q,
                        atom: false,
                        analytic_pdf: 0.0,
                    };
                    buffer.push(&record)?;
                }
            }
            if schedule.training {
                for _ in 0..cfg.steps_per_batch {
                    let m = trainer.train_step(flow, &buffer, &mut trainer_rng)?;
                    if !m.rejected {
                        loss_sum += m.loss;
                        loss_count += 1;
                    }
                }
            }
        }
        if schedule.training {
            trainer.decay_learning_rate();
        }
        let (estimate, variance) = mean_variance(&weights);
        report.iterations.push(IterationReport {
            iteration,
            samples,
            loss: if loss_count > 0 {
                loss_sum / loss_count as f64
            } else {
                f64::NAN
            },
            estimate,
            variance,
            weight_p9999: quantile(&weights, 0.9999),
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        report.train_steps = trainer.steps();
        report.rejected_steps = trainer.rejected_steps();
        on_iteration(report.iterations.last().expect("just pushed"), flow)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::TransformKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(f: f64) -> TrainRecord {
        TrainRecord::new(vec![0.5], f, 1.0).unwrap()
    }

    #[test]
    fn weights() {
        assert_eq!(loss_weight(&record(0.0), 1.0, LossKind::Kl).unwrap(), 0.0);
        assert_eq!(loss_weight(&record(2.0), 1.0, LossKind::Kl).unwrap(), 2.0);
        assert_eq!(loss_weight(&record(2.0), 1.0, LossKind::Chi2).unwrap(), 4.0);
        let general = TrainRecord::new(vec![0.5], 2.0, 0.5).unwrap();
        assert_eq!(loss_weight(&general, 2.0, LossKind::Kl).unwrap(), 4.0);
        assert_eq!(loss_weight(&general, 2.0, LossKind::Chi2).unwrap(), 4.0);
        assert!(matches!(
            loss_weight(&record(1.0), 0.0, LossKind::Kl),
            Err(FlowError::DegenerateDensity(_))
        ));
        assert!(TrainRecord::new(vec![0.5], -1.0, 1.0).is_err());
        assert!(TrainRecord::new(vec![0.5], 1.0, 0.0).is_err());
    }

    /// On a one-parameter family q_a(x) = 1 + a (x - 1/2), the chi-square
    /// weighted log-likelihood gradient is half the derivative of the
    /// variance loss `int f^2 / q_a`.
    #[test]
    fn chi2_weight_matches_variance_loss_gradient() {
        let f = |x: f64| 0.5 + x;
        let (a, n) = (0.3, 100_000);
        let q = |a: f64, x: f64| 1.0 + a * (x - 0.5);
        let dlogq = |a: f64, x: f64| (x - 0.5) / q(a, x);
        let mid = |i: usize| (i as f64 + 0.5) / n as f64;
        // E_q[-(f/q)^2 d log q] = -int f^2/q dlogq
        let weighted: f64 = (0..n)
            .map(|i| {
                let x = mid(i);
                let w = loss_weight(
                    &TrainRecord::new(vec![x], f(x), q(a, x)).unwrap(),
                    q(a, x),
                    LossKind::Chi2,
                )
                .unwrap();
                -w * dlogq(a, x) * q(a, x)
            })
            .sum::<f64>()
            / n as f64;
        let variance_loss = |a: f64| {
            (0..n)
                .map(|i| f(mid(i)).powi(2) / q(a, mid(i)))
                .sum::<f64>()
                / n as f64
        };
        let h = 1e-5;
        let fd = (variance_loss(a + h) - variance_loss(a - h)) / (2.0 * h);
        assert!(
            (weighted - fd).abs() < 1e-6 * fd.abs().max(1.0),
            "{weighted} vs {fd}"
        );
        assert!(weighted.signum() == fd.signum());
    }

    #[test]
    fn replay_buffer_is_fifo() {
        let mut b = ReplayBuffer::new(3, 1, 0).unwrap();
        assert!(b.sample(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        for i in 0..5 {
            b.push(&record(i as f64)).unwrap();
        }
        assert_eq!(b.len(), 3);
        let kept: Vec<f64> = (0..3).map(|i| b.get(i).unwrap().f_est).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
        let batch = b.sample(100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(batch.f_est.iter().all(|f| (2.0..=4.0).contains(f)));
        assert!(b
            .push(&TrainRecord::new(vec![0.1, 0.2], 1.0, 1.0).unwrap())
            .is_err());
    }

    #[test]
    fn schedule_counts() {
        let s = Schedule {
            total_passes: 1023,
            pass_size: 1,
            training: true,
        };
        let p = s.iteration_passes();
        assert_eq!(p.len(), 10);
        assert_eq!(p.last(), Some(&512));
        assert_eq!(p.iter().sum::<u64>(), 1023);
        assert_eq!(
            Schedule {
                total_passes: 1,
                ..s
            }
            .iteration_passes(),
            vec![1]
        );
        assert_eq!(
            Schedule {
                total_passes: 2,
                ..s
            }
            .iteration_passes(),
            vec![1]
        );
    }

    #[test]
    fn combining_iterations() {
        assert!(combine_iterations(&[]).is_err());
        assert_eq!(combine_iterations(&[(3.0, 0.5)]).unwrap(), 3.0);
        assert!((combine_iterations(&[(1.0, 2.0), (3.0, 2.0)]).unwrap() - 2.0).abs() < 1e-15);
        // weights 1 and 1/3 normalize to 0.75 and 0.25
        assert!((combine_iterations(&[(1.0, 1.0), (5.0, 3.0)]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(
            combine_iterations(&[(4.0, 0.0), (8.0, 1.0)]).unwrap(),
            (4.0 * 1e12 + 8.0) / (1e12 + 1.0)
        );
        assert_eq!(
            combine_iterations(&[(2.0, f64::INFINITY), (4.0, f64::INFINITY)]).unwrap(),
            3.0
        );
    }

    #[test]
    fn statistics() {
        assert_eq!(mean_variance(&[1.0, 3.0]), (2.0, 2.0));
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.9999), 9.999);
    }

    fn step_target(x: f64) -> f64 {
        if x < 0.5 {
            0.5
        } else {
            1.5
        }
    }

    #[test]
    fn direct_logits_learn_step_masses() {
        let mut flow =
            NormalizingFlow::direct_logits(TransformKind::PiecewiseLinear { bins: 2 }).unwrap();
        let mut trainer = Trainer::new(
            &flow,
            TrainConfig {
                batch_size: 1024,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let x = Array2::from_shape_simple_fn((1024, 1), || rng.random::<f64>());
            let f = x.iter().map(|&v| step_target(v)).collect();
            let m = trainer
                .train_on_batch(&mut flow, &Batch::new(x, f, vec![1.0; 1024]))
                .unwrap();
            assert!(!m.rejected);
        }
        let q0 = crate::flow::flow_pdf(&flow, &[0.25], &[]).unwrap() / 2.0;
        assert!((q0 - 0.25).abs() < 0.02, "{q0}");
    }

    #[test]
    fn non_finite_loss_is_rejected_without_touching_parameters() {
        let mut flow =
            NormalizingFlow::direct_logits(TransformKind::PiecewiseLinear { bins: 2 }).unwrap();
        let before = flow.clone();
        let mut trainer = Trainer::new(&flow, TrainConfig::default()).unwrap();
        let x = Array2::from_elem((2, 1), 0.3);
        let m = trainer
            .train_on_batch(
                &mut flow,
                &Batch::new(x, vec![f64::INFINITY, 1.0], vec![1.0, 1.0]),
            )
            .unwrap();
        assert!(m.rejected);
        assert_eq!(trainer.rejected_steps(), 1);
        assert_eq!(flow, before);
    }

    #[test]
    fn clipped_norm_is_reported() {
        let mut flow =
            NormalizingFlow::direct_logits(TransformKind::PiecewiseLinear { bins: 4 }).unwrap();
        let mut trainer = Trainer::new(
            &flow,
            TrainConfig {
                grad_clip_norm: Some(0.01),
                ..TrainConfig::for_loss(LossKind::Chi2)
            },
        )
        .unwrap();
        let x = Array2::from_shape_vec((4, 1), vec![0.1, 0.2, 0.3, 0.9]).unwrap();
        let m = trainer
            .train_on_batch(
                &mut flow,
                &Batch::new(x, vec![100.0, 90.0, 80.0, 1.0], vec![1.0; 4]),
            )
            .unwrap();
        assert!(m.clipped && m.grad_norm <= 0.01 + 1e-12 && m.raw_grad_norm > 0.01);
    }

    struct Constant;
    impl Integrand for Constant {
        fn dim(&self) -> usize {
            2
        }
        fn evaluate(&mut self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
            Ok(vec![3.0; x.nrows()])
        }
    }

    #[test]
    fn untrained_loop_is_plain_uniform_monte_carlo() {
        let cfg = crate::flow::FlowConfig {
            net: crate::nnet::NetShape {
                outer_width: 8,
                levels: 1,
                skips: true,
            },
            ..Default::default()
        };
        let mut flow = crate::flow::build_flow(&cfg, 0).unwrap();
        let schedule = Schedule {
            total_passes: 7,
            pass_size: 16,
            training: false,
        };
        let report = online_loop(
            &mut flow,
            &mut Constant,
            &schedule,
            &TrainConfig::default(),
            &[],
        )
        .unwrap();
        assert_eq!(report.iterations.len(), 3);
        assert_eq!(
            report
                .iterations
                .iter()
                .map(|r| r.samples)
                .collect::<Vec<_>>(),
            vec![16, 32, 64]
        );
        for r in &report.iterations {
            assert_eq!(r.estimate, 3.0);
            assert_eq!(r.variance, 0.0);
        }
        assert_eq!(report.combined_estimate().unwrap(), 3.0);
        let mut csv = Vec::new();
        report.write_csv(&mut csv, false).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(
            text.starts_with("iteration,samples,loss,estimate,variance,weight_p9999,wallclock_ms")
        );
    }

    #[test]
    fn iteration_hook_sees_every_iteration() {
        let cfg = crate::flow::FlowConfig {
            net: crate::nnet::NetShape {
                outer_width: 8,
                levels: 1,
                skips: true,
            },
            ..Default::default()
        };
        let mut flow = crate::flow::build_flow(&cfg, 0).unwrap();
        let schedule = Schedule {
            total_passes: 3,
            pass_size: 32,
            training: true,
        };
        let tc = TrainConfig {
            batch_size: 32,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        let report = online_loop_with(
            &mut flow,
            &mut Constant,
            &schedule,
            &tc,
            &[],
            Proposal::Uniform,
            |r, _| {
                seen.push(r.iteration);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen, vec![0, 1]);
        assert!(report
            .iterations
            .iter()
            .all(|r| r.estimate == 3.0 && r.variance == 0.0));
        assert_eq!(report.train_steps, 3);
    }

    struct Step1d;
    impl Integrand for Step1d {
        fn dim(&self) -> usize {
            1
        }
        fn evaluate(&mut self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
            Ok(x.column(0).iter().map(|&v| step_target(v)).collect())
        }
    }

    #[test]
    fn uniform_training_runs_a_fixed_number_of_steps() {
        let mut flow =
            NormalizingFlow::direct_logits(TransformKind::PiecewiseLinear { bins: 2 }).unwrap();
        let mut calls = 0;
        let tc = TrainConfig {
            batch_size: 1024,
            ..TrainConfig::default()
        };
        let trainer = train_uniform(&mut flow, &mut Step1d, &tc, 1500, |_, _, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((calls, trainer.steps()), (1500, 1500));
        let q0 = crate::flow::flow_pdf(&flow, &[0.25], &[]).unwrap() / 2.0;
        assert!((q0 - 0.25).abs() < 0.03, "{q0}");
    }
}
