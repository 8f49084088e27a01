use serde::{Deserialize, Serialize};

use crate::data::TokenSeq;
use crate::error::Result;
use crate::tensor::{Graph, Tensor};

/// How a caption's token losses are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Mean over unpadded positions.
    #[default]
    Mean,
    /// Plain sum over unpadded positions.
    Sum,
}

impl LossReduction {
    pub fn weight(self, valid_len: usize) -> f64 {
        match self {
            LossReduction::Mean => 1.0 / valid_len as f64,
            LossReduction::Sum => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllValue {
    pub loss: f64,
    /// Target probabilities that had to be floored.
    pub clamped: usize,
}

/// Per-token mean NLL of `target` under `probs` (`[rows × |Y|]`), ignoring padding.
pub fn nll_loss(probs: &Tensor, target: &TokenSeq) -> Result<NllValue> {
    nll_loss_with(probs, target, LossReduction::Mean)
}

pub fn nll_loss_with(probs: &Tensor, target: &TokenSeq, reduction: LossReduction) -> Result<NllValue> {
    let mut g = Graph::new();
    let p = g.leaf(probs);
    let vl = target.valid_len;
    let l = g.nll(p, &target.target[..vl], reduction.weight(vl))?;
    Ok(NllValue {
        loss: g.value(l)[0],
        clamped: g.clamp_events(),
    })
}
