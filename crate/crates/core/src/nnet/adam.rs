use serde::{Deserialize, Serialize};

use super::mlp::{GradientSet, Mlp};
use crate::error::{FlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: GradientSet,
    pub second_moment: GradientSet,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: GradientSet::zeros_like(net),
            second_moment: GradientSet::zeros_like(net),
            step_count: 0,
        }
    }
}

/// Bias-corrected Adam update applied in place. A gradient holding any
/// non-finite component is rejected before anything is touched.
pub fn adam_step(net: &mut Mlp, state: &mut AdamState, grads: &GradientSet) -> Result<()> {
    if grads.layers.len() != net.layers().len()
        || grads
            .layers
            .iter()
            .zip(net.layers())
            .any(|(g, l)| g.weight.dim() != l.weight.dim() || g.bias.len() != l.bias.len())
    {
        return Err(FlowError::Shape(
            "gradient set does not match the network".into(),
        ));
    }
    if let Some(layer) = grads.first_non_finite() {
        return Err(FlowError::NonFiniteGradient(format!("layer {layer}")));
    }
    state.step_count += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);

    let params = net
        .layers_mut()
        .iter_mut()
        .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()));
    let m = state
        .first_moment
        .layers
        .iter_mut()
        .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()));
    let v = state
        .second_moment
        .layers
        .iter_mut()
        .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()));
    for (((p, m), v), &g) in params.zip(m).zip(v).zip(grads.iter()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}
