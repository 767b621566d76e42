//! Multiple importance sampling between a flow and an analytic technique.
//!
//! Each sample picks the flow with probability `c` (a logistic of a small
//! network on the conditioning) and the analytic technique otherwise, and is
//! weighted by the balance-heuristic mixture `q' = c q + (1 - c) p`.

mod scenario;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoding::InputEncoding;
use crate::error::{FlowError, Result};
use crate::flow::{FlowGradients, FlowOptimizer, NormalizingFlow};
use crate::nnet::{
    adam_step, clip_global_norm, AdamState, ForwardCache, GradientSet, Mlp, NetShape,
};
use crate::rng::{stream_rng, Stream};
use crate::training::{weight, Batch, LossKind, TrainConfig};

pub use scenario::{
    run_guiding, GuidingIteration, GuidingReport, Lobe, MisScenario, MisVariant, RadianceComponent,
    TruncatedGaussianLobe, WrappedMixture, LOBE_FEATURES,
};

/// Balance-heuristic mixture density `c q + (1 - c) p`.
pub fn effective_pdf(q_val: f64, analytic_val: f64, c: f64) -> f64 {
    c * q_val + (1.0 - c) * analytic_val
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Blend weight of the raw-flow divergence after a fraction `tau` of the
/// budget: `beta = 0.5 (1/3)^(5 tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendSchedule {
    tau: f64,
}

impl BlendSchedule {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(FlowError::Domain(format!(
                "budget fraction {tau} outside [0, 1]"
            )));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn beta(&self) -> f64 {
        0.5 * (1.0f64 / 3.0).powf(5.0 * self.tau)
    }
}

/// A sample from an analytic technique. For an atom `pdf` is the discrete
/// probability of emitting it.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticSample {
    pub x: Vec<f64>,
    pub pdf: f64,
    pub atom: bool,
}

/// Closed-form sampling technique. Conditioning values are raw (not normalized).
pub trait AnalyticTechnique {
    fn dim(&self) -> usize;
    fn sample(&self, u: &[f64], conditioning: &[f64]) -> Result<AnalyticSample>;
    /// Continuous density at `x`.
    fn pdf(&self, x: &[f64], conditioning: &[f64]) -> f64;
    /// Whether [`AnalyticTechnique::sample`] may return atoms.
    fn emits_atoms(&self) -> bool {
        false
    }
}

/// Network predicting the selection logit from encoded conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionNet {
    pub net: Mlp,
    pub encoding: InputEncoding,
}

impl SelectionNet {
    /// Fresh network with a zeroed output layer, so `c = 0.5` everywhere.
    pub fn new(
        features: usize,
        encoding: InputEncoding,
        shape: NetShape,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Selection);
        let net = Mlp::u_net(features * encoding.width_per_value(), 1, shape, &mut rng)?;
        Ok(Self { net, encoding })
    }

    fn encode(&self, cond: ArrayView2<'_, f64>) -> Array2<f64> {
        let w = self.encoding.width_per_value();
        let mut out = Array2::zeros((cond.nrows(), cond.ncols() * w));
        for (row, mut enc) in cond.rows().into_iter().zip(out.rows_mut()) {
            let enc = enc.as_slice_mut().expect("standard layout");
            for (j, &v) in row.iter().enumerate() {
                self.encoding.encode_into(v, &mut enc[j * w..(j + 1) * w]);
            }
        }
        out
    }

    pub fn logits(&self, cond: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.net.predict(self.encode(cond).view())
    }

    fn forward(&self, cond: ArrayView2<'_, f64>) -> Result<(Vec<f64>, ForwardCache)> {
        let (out, cache) = self.net.forward(self.encode(cond).view())?;
        Ok((out.column(0).iter().map(|&z| logistic(z)).collect(), cache))
    }
}

/// How the technique is chosen per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    /// Constant flow probability; 1 is pure flow sampling, 0 pure analytic.
    Fixed(f64),
    Learned(SelectionNet),
}

impl Selection {
    /// Flow selection probability for each row of normalized conditioning.
    pub fn probs(&self, cond: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        match self {
            Selection::Fixed(c) => Ok(vec![*c; cond.nrows()]),
            Selection::Learned(s) => Ok(s
                .logits(cond)?
                .column(0)
                .iter()
                .map(|&z| logistic(z))
                .collect()),
        }
    }
}

pub struct MisSetup<T> {
    pub flow: NormalizingFlow,
    pub technique: T,
    pub selection: Selection,
}

impl<T: AnalyticTechnique> MisSetup<T> {
    pub fn new(flow: NormalizingFlow, technique: T, selection: Selection) -> Result<Self> {
        if technique.dim() != flow.dim() {
            return Err(FlowError::Shape(format!(
                "analytic technique is {}D but the flow is {}D",
                technique.dim(),
                flow.dim()
            )));
        }
        match &selection {
            Selection::Fixed(c) if !(0.0..=1.0).contains(c) => {
                return Err(FlowError::InvalidConfig(format!(
                    "fixed selection probability {c} outside [0, 1]"
                )));
            }
            Selection::Learned(s)
                if s.net.input_width()
                    != flow.conditioning().len() * s.encoding.width_per_value() =>
            {
                return Err(FlowError::Shape(
                    "selection network input does not match the conditioning".into(),
                ));
            }
            _ => {}
        }
        Ok(Self {
            flow,
            technique,
            selection,
        })
    }

    /// Flow selection probability for raw conditioning values.
    pub fn selection_prob(&self, conditioning: &[f64]) -> Result<f64> {
        let norm = self.flow.conditioning().normalize(conditioning)?;
        let row = Array2::from_shape_vec((1, norm.len()), norm).expect("row shape");
        Ok(self.selection.probs(row.view())?[0])
    }

    fn normalize_rows(&self, raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let spec = self.flow.conditioning();
        let mut out = Array2::zeros(raw.dim());
        for (r, mut o) in raw.rows().into_iter().zip(out.rows_mut()) {
            let n = spec.normalize(&r.to_vec())?;
            o.iter_mut().zip(n).for_each(|(o, v)| *o = v);
        }
        Ok(out)
    }
}

/// Samples drawn with the one-sample model and their training records.
#[derive(Debug, Clone, PartialEq)]
pub struct MisSamples {
    /// Estimates `f(x) / q'(x)`.
    pub values: Vec<f64>,
    /// Flow selection probability used for each sample.
    pub selection: Vec<f64>,
    pub batch: Batch,
}

/// One-sample MIS estimates for a batch. Row `i` uses `u_select[i]` to pick
/// the technique and row `i` of `u` to sample it. `raw_cond` holds raw
/// conditioning values; `target` receives `(x, raw conditioning)`.
pub fn mis_sample_batch<T, F>(
    setup: &MisSetup<T>,
    u_select: &[f64],
    u: ArrayView2<'_, f64>,
    raw_cond: ArrayView2<'_, f64>,
    target: &F,
) -> Result<MisSamples>
where
    T: AnalyticTechnique,
    F: Fn(&[f64], &[f64]) -> f64,
{
    let (n, d) = u.dim();
    if u_select.len() != n || raw_cond.nrows() != n || d != setup.flow.dim() {
        return Err(FlowError::Shape("MIS batch inputs disagree in size".into()));
    }
    let cond = setup.normalize_rows(raw_cond)?;
    let c = setup.selection.probs(cond.view())?;
    let use_flow: Vec<bool> = u_select.iter().zip(&c).map(|(us, c)| us < c).collect();

    let mut x = Array2::zeros((n, d));
    let mut q = vec![0.0; n];
    let mut analytic = vec![0.0; n];
    let mut atom = vec![false; n];

    let flow_rows: Vec<usize> = (0..n).filter(|&i| use_flow[i]).collect();
    if !flow_rows.is_empty() {
        let (xf, lq) = setup.flow.sample_batch(
            u.select(ndarray::Axis(0), &flow_rows).view(),
            cond.select(ndarray::Axis(0), &flow_rows).view(),
        )?;
        for (k, &i) in flow_rows.iter().enumerate() {
            x.row_mut(i).assign(&xf.row(k));
            q[i] = lq[k].exp();
            analytic[i] = setup
                .technique
                .pdf(&xf.row(k).to_vec(), &raw_cond.row(i).to_vec());
        }
    }
    let mut continuous = Vec::new();
    for i in (0..n).filter(|&i| !use_flow[i]) {
        let s = setup
            .technique
            .sample(&u.row(i).to_vec(), &raw_cond.row(i).to_vec())?;
        if s.x.len() != d {
            return Err(FlowError::Shape(
                "analytic technique returned a point of the wrong dimension".into(),
            ));
        }
        x.row_mut(i).iter_mut().zip(&s.x).for_each(|(o, v)| *o = *v);
        analytic[i] = s.pdf;
        atom[i] = s.atom;
        if !s.atom {
            continuous.push(i);
        }
    }
    if !continuous.is_empty() {
        let lq = setup.flow.log_pdf_batch(
            x.select(ndarray::Axis(0), &continuous).view(),
            cond.select(ndarray::Axis(0), &continuous).view(),
        )?;
        for (k, &i) in continuous.iter().enumerate() {
            q[i] = lq[k].exp();
        }
    }

    let mut values = Vec::with_capacity(n);
    let mut f_est = Vec::with_capacity(n);
    let mut proposal = Vec::with_capacity(n);
    for i in 0..n {
        let qp = effective_pdf(q[i], analytic[i], c[i]);
        if !(qp > 0.0 && qp.is_finite()) {
            return Err(FlowError::DegenerateDensity(format!(
                "mixture density {qp} at a sampled point"
            )));
        }
        let f = target(&x.row(i).to_vec(), &raw_cond.row(i).to_vec());
        if !(f >= 0.0 && f.is_finite()) {
            return Err(FlowError::Target(format!("integrand value {f}")));
        }
        values.push(f / qp);
        f_est.push(f);
        proposal.push(qp);
    }
    Ok(MisSamples {
        values,
        selection: c,
        batch: Batch {
            x,
            conditioning: cond,
            f_est,
            proposal_pdf: proposal,
            atom,
            analytic_pdf: analytic,
        },
    })
}

/// Single-sample form of [`mis_sample_batch`]; returns the estimate and the
/// training record.
pub fn one_sample_estimate<T, F>(
    setup: &MisSetup<T>,
    u_select: f64,
    u_sample: &[f64],
    conditioning: &[f64],
    target: &F,
) -> Result<(f64, crate::training::TrainRecord)>
where
    T: AnalyticTechnique,
    F: Fn(&[f64], &[f64]) -> f64,
{
    let u = Array2::from_shape_vec((1, u_sample.len()), u_sample.to_vec()).expect("row shape");
    let cond =
        Array2::from_shape_vec((1, conditioning.len()), conditioning.to_vec()).expect("row shape");
    let s = mis_sample_batch(setup, &[u_select], u.view(), cond.view(), target)?;
    Ok((s.values[0], s.batch.record(0)))
}

/// Loss and parameter gradients of the blended objective on a batch.
pub struct BlendedGradients {
    pub loss: f64,
    pub flow: FlowGradients,
    pub selection: Option<GradientSet>,
}

/// `beta D(p || q) + (1 - beta) D(p || q')` estimated on `batch`, with
/// Monte Carlo weights held constant. Gradients reach the flow through `q`
/// and the selection network through `c`.
pub fn blended_gradients<T: AnalyticTechnique>(
    setup: &MisSetup<T>,
    batch: &Batch,
    schedule: BlendSchedule,
    loss: LossKind,
) -> Result<BlendedGradients> {
    gradients_with_beta(setup, batch, schedule.beta(), loss)
}

pub(crate) fn gradients_with_beta<T: AnalyticTechnique>(
    setup: &MisSetup<T>,
    batch: &Batch,
    beta: f64,
    loss: LossKind,
) -> Result<BlendedGradients> {
    let n = batch.len();
    if n == 0 {
        return Err(FlowError::Empty("training batch".into()));
    }
    let (log_q, tape) = setup
        .flow
        .forward_tape(batch.x.view(), batch.conditioning.view())?;
    let (c, cache) = match &setup.selection {
        Selection::Fixed(c) => (vec![*c; n], None),
        Selection::Learned(s) => {
            let (c, cache) = s.forward(batch.conditioning.view())?;
            (c, Some((s, cache)))
        }
    };
    let nf = n as f64;
    let mut total = 0.0;
    let mut g_log_q = vec![0.0; n];
    let mut g_logit = Array2::zeros((n, 1));
    for i in 0..n {
        let f = batch.f_est[i];
        if f == 0.0 {
            continue;
        }
        let (r, p, ci, atom) = (
            batch.proposal_pdf[i],
            batch.analytic_pdf[i],
            c[i],
            batch.atom[i],
        );
        let q = if atom { 0.0 } else { log_q[i].exp() };
        let qp = effective_pdf(q, p, ci);
        if !atom {
            let w = weight(f, r, q, loss).unwrap_or(f64::NAN);
            total -= beta * w * log_q[i] / nf;
            g_log_q[i] -= beta * w / nf;
        }
        let w = weight(f, r, qp, loss).unwrap_or(f64::NAN);
        total -= (1.0 - beta) * w * qp.ln() / nf;
        if !atom {
            g_log_q[i] -= (1.0 - beta) * w * ci * q / qp / nf;
        }
        g_logit[[i, 0]] = -(1.0 - beta) * w * (q - p) / qp * ci * (1.0 - ci) / nf;
    }
    let flow = setup.flow.backward(&tape, &g_log_q)?;
    let selection = match cache {
        Some((s, cache)) => Some(s.net.backward(&cache, g_logit.view())?),
        None => None,
    };
    Ok(BlendedGradients {
        loss: total,
        flow,
        selection,
    })
}

/// Value of the blended objective on `batch`.
pub fn blended_loss<T: AnalyticTechnique>(
    setup: &MisSetup<T>,
    batch: &Batch,
    schedule: BlendSchedule,
    loss: LossKind,
) -> Result<f64> {
    Ok(blended_gradients(setup, batch, schedule, loss)?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisStepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub rejected: bool,
}

/// Adam state for the flow and, when learned, the selection network.
pub struct MisTrainer {
    pub config: TrainConfig,
    flow_optimizer: FlowOptimizer,
    selection_state: Option<AdamState>,
    steps: u64,
    rejected: u64,
}

impl MisTrainer {
    pub fn new<T: AnalyticTechnique>(
        setup: &MisSetup<T>,
        config: TrainConfig,
        selection_learning_rate: f64,
    ) -> Result<Self> {
        config.validate()?;
        let selection_state = match &setup.selection {
            Selection::Learned(s) => {
                let adam = crate::nnet::AdamConfig {
                    learning_rate: selection_learning_rate,
                    ..config.adam
                };
                Some(AdamState::new(&s.net, adam))
            }
            Selection::Fixed(_) => None,
        };
        Ok(Self {
            flow_optimizer: FlowOptimizer::new(&setup.flow, config.adam),
            selection_state,
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

    /// One Adam step on the blended objective. Rejected steps change nothing.
    pub fn step<T: AnalyticTechnique>(
        &mut self,
        setup: &mut MisSetup<T>,
        batch: &Batch,
        schedule: BlendSchedule,
    ) -> Result<MisStepMetrics> {
        self.steps += 1;
        let mut g = blended_gradients(setup, batch, schedule, self.config.loss)?;
        let rejected = MisStepMetrics {
            loss: g.loss,
            grad_norm: f64::NAN,
            clipped: false,
            rejected: true,
        };
        if !g.loss.is_finite() {
            self.rejected += 1;
            return Ok(rejected);
        }
        let (norm, clipped) = {
            let mut sets = g.flow.sets_mut();
            if let Some(s) = g.selection.as_mut() {
                sets.push(s);
            }
            match self.config.grad_clip_norm {
                Some(max) => clip_global_norm(&mut sets, max),
                None => (sets.iter().map(|s| s.norm_sq()).sum::<f64>().sqrt(), false),
            }
        };
        let finite = g.flow.is_finite()
            && g.selection
                .as_ref()
                .is_none_or(|s| s.first_non_finite().is_none());
        if !finite || !norm.is_finite() {
            self.rejected += 1;
            return Ok(rejected);
        }
        self.flow_optimizer.step(&mut setup.flow, &g.flow)?;
        if let (Selection::Learned(s), Some(state), Some(grads)) = (
            &mut setup.selection,
            self.selection_state.as_mut(),
            g.selection.as_ref(),
        ) {
            adam_step(&mut s.net, state, grads)?;
        }
        let grad_norm = if clipped {
            self.config.grad_clip_norm.unwrap_or(norm)
        } else {
            norm
        };
        Ok(MisStepMetrics {
            loss: g.loss,
            grad_norm,
            clipped,
            rejected: false,
        })
    }
}

/// Settings for the selection network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionNetConfig {
    pub net: NetShape,
    pub encoding: InputEncoding,
    pub learning_rate: f64,
}

impl Default for SelectionNetConfig {
    fn default() -> Self {
        Self {
            net: NetShape {
                outer_width: 16,
                levels: 1,
                skips: true,
            },
            encoding: InputEncoding::default(),
            learning_rate: 1e-2,
        }
    }
}
