use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AdapterTarget, ModelError};
use crate::autodiff::{kernels, AutodiffError, ParamId, Scalar, Tensor};

/// What an adapter was trained for. The refine slot holds either a
/// preference-trained adapter or a second supervised one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterRole {
    Sft,
    Dpo,
    Sft2,
}

impl AdapterRole {
    pub fn tag(self) -> &'static str {
        match self {
            AdapterRole::Sft => "sft",
            AdapterRole::Dpo => "dpo",
            AdapterRole::Sft2 => "sft2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sft" => Some(AdapterRole::Sft),
            "dpo" => Some(AdapterRole::Dpo),
            "sft2" => Some(AdapterRole::Sft2),
            _ => None,
        }
    }
}

/// Low-rank factors `(B: d×r, A: r×d)` per adapted matrix, keyed by
/// `(layer, target)`. The tensors themselves live in the model's store.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub role: AdapterRole,
    pub factors: BTreeMap<(usize, AdapterTarget), (ParamId, ParamId)>,
}

impl LoraAdapter {
    pub fn get(&self, layer: usize, target: AdapterTarget) -> Option<(ParamId, ParamId)> {
        self.factors.get(&(layer, target)).copied()
    }
}

/// `ΔW = B·A`.
pub fn lora_delta<T: Scalar>(b: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let (d, r) = (b.rows(), b.cols());
    if a.rows() != r || b.shape().len() != 2 || a.shape().len() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "lora_delta",
            lhs: b.shape().to_vec(),
            rhs: a.shape().to_vec(),
        }
        .into());
    }
    let n = a.cols();
    let mut out = vec![T::from_f64(0.0); d * n];
    kernels::matmul_nn(b.data(), a.data(), d, r, n, &mut out);
    Ok(Tensor::new(vec![d, n], out)?)
}

/// `W = W_base + (α/r)·ΔW_sft + γ·(α/r)·ΔW_dpo`, computed in 64-bit and
/// rounded once. The refine term is skipped entirely when `γ = 0`.
pub fn effective_weight<T: Scalar>(
    base: &Tensor<T>,
    delta_sft: Option<&Tensor<T>>,
    delta_refine: Option<&Tensor<T>>,
    alpha: f64,
    rank: usize,
    gamma: f64,
) -> Result<Tensor<T>, ModelError> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(ModelError::InvalidGamma(gamma));
    }
    for d in [delta_sft, delta_refine].into_iter().flatten() {
        if d.shape() != base.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "effective_weight",
                lhs: base.shape().to_vec(),
                rhs: d.shape().to_vec(),
            }
            .into());
        }
    }
    let scale = alpha / rank as f64;
    let refine = delta_refine.filter(|_| gamma != 0.0);
    let data = (0..base.len())
        .map(|i| {
            let mut w = base.data()[i].to_f64();
            if let Some(d) = delta_sft {
                w += scale * d.data()[i].to_f64();
            }
            if let Some(d) = refine {
                w += gamma * scale * d.data()[i].to_f64();
            }
            T::from_f64(w)
        })
        .collect();
    Ok(Tensor::new(base.shape().to_vec(), data)?)
}
