use super::TrainError;
use crate::autodiff::{kernels, Graph, NodeId, ParamStore, Tensor};
use crate::model::{ParamGroup, PolicyModel, PromptInputs};

/// One supervised example; `target` ends with the end token.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub inputs: PromptInputs,
    pub target: Vec<u32>,
}

/// Mean over the batch of `−log π(Y | X, C̃, P)` as a graph node.
pub(crate) fn sft_objective<'p>(
    model: &PolicyModel,
    g: &mut Graph<'p, f32>,
    params: &'p ParamStore<f32>,
    batch: &[TrainExample],
    gamma: f64,
    trainable: &[ParamGroup],
) -> Result<NodeId, TrainError> {
    let mut total: Option<NodeId> = None;
    for ex in batch {
        let nll = model.build_nll(g, params, &ex.inputs, &ex.target, gamma, trainable)?;
        total = Some(match total {
            Some(t) => g.add(t, nll)?,
            None => nll,
        });
    }
    let total = total.ok_or_else(|| TrainError::InvalidConfig("empty batch".into()))?;
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Mean sequence negative log-likelihood at the model's current `γ`.
pub fn sft_loss(model: &PolicyModel, batch: &[TrainExample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for ex in batch {
        total -= model.sequence_log_prob(&ex.inputs, &ex.target)?;
    }
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch".into()));
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: 0, value: loss });
    }
    Ok(loss)
}

/// `m = β (Δθ − Δr)`.
pub fn dpo_margin(beta: f64, delta_theta: f64, delta_ref: f64) -> f64 {
    beta * (delta_theta - delta_ref)
}

/// `−log σ(m)`.
pub fn dpo_loss_value(margin: f64) -> f64 {
    -kernels::log_sigmoid(margin)
}

/// `log π(Y⁺) − log π(Y⁻)` at composition `γ`, in 64-bit.
pub fn preference_log_ratio(
    model: &PolicyModel,
    inputs: &PromptInputs,
    chosen: &[u32],
    rejected: &[u32],
    gamma: f64,
) -> Result<f64, TrainError> {
    let mut m = model.clone();
    m.set_gamma(gamma)?;
    Ok(m.sequence_log_prob(inputs, chosen)? - m.sequence_log_prob(inputs, rejected)?)
}

/// Log ratio as computed on the training graph. The frozen reference
/// ratio is cached from this path so that a zero refine adapter yields a
/// zero margin exactly.
pub fn reference_log_ratio(
    model: &PolicyModel,
    inputs: &PromptInputs,
    chosen: &[u32],
    rejected: &[u32],
    gamma: f64,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let p = model.build_nll(&mut g, model.params(), inputs, chosen, gamma, &[])?;
    let n = model.build_nll(&mut g, model.params(), inputs, rejected, gamma, &[])?;
    Ok(g.value(n).item() as f64 - g.value(p).item() as f64)
}

/// Preference example with its cached reference log ratio.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DpoExample {
    pub inputs: PromptInputs,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    pub ref_ratio: f64,
}

/// `−log σ(β (Δθ − Δr))` as a graph node; the policy runs at `γ = 1`.
pub(crate) fn dpo_objective<'p>(
    model: &PolicyModel,
    g: &mut Graph<'p, f32>,
    params: &'p ParamStore<f32>,
    ex: &DpoExample,
    beta: f64,
    trainable: &[ParamGroup],
) -> Result<NodeId, TrainError> {
    let p = model.build_nll(g, params, &ex.inputs, &ex.chosen, 1.0, trainable)?;
    let n = model.build_nll(g, params, &ex.inputs, &ex.rejected, 1.0, trainable)?;
    let delta = g.sub(n, p)?;
    let shifted = g.add_const(delta, &Tensor::scalar(-ex.ref_ratio as f32))?;
    let m = g.scale(shifted, beta);
    let ls = g.log_sigmoid(m);
    Ok(g.scale(ls, -1.0))
}

/// DPO loss of one pair for a policy at `γ = 1`, given the cached
/// reference ratio.
pub fn dpo_loss(
    policy: &PolicyModel,
    ref_ratio: f64,
    inputs: &PromptInputs,
    chosen: &[u32],
    rejected: &[u32],
    beta: f64,
) -> Result<f64, TrainError> {
    if !(beta > 0.0) {
        return Err(TrainError::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    let delta_theta = reference_log_ratio(policy, inputs, chosen, rejected, 1.0)?;
    let loss = dpo_loss_value(dpo_margin(beta, delta_theta, ref_ratio));
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: 0, value: loss });
    }
    Ok(loss)
}
