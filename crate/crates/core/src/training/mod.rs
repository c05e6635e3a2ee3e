//! Staged training: backbone pretraining, projector alignment, supervised
//! fine-tuning with teacher-error history and context dropout, and a third
//! stage of preference optimization (or a second supervised pass) on mined
//! hard negatives.

mod losses;
mod mining;
mod stage;

pub use losses::{dpo_loss, dpo_loss_value, dpo_margin, preference_log_ratio, reference_log_ratio, sft_loss, TrainExample};
pub use mining::{decode_candidates, filter_pairs, mine_hard_negatives, MiningResult, PreferencePair};
pub use stage::{stage_batch, train_stage, Stage, TrainConfig, TrainLogRecord, TrainOutcome};

use rand::Rng;

use crate::autodiff::AutodiffError;
use crate::decoding::{ContextWindow, DecodeError};
use crate::model::ModelError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("stage {stage} needs an initial checkpoint from stage {expected}, got {found}")]
    StageMismatch {
        stage: Stage,
        expected: String,
        found: String,
    },
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no utterance {session_id}/{t} in the training sessions")]
    UnknownUtterance { session_id: String, t: usize },
    #[error("stage {0} needs at least one training example")]
    NoData(Stage),
}

/// With probability `p_drop` the empty window, otherwise `window` as is.
/// Exactly one draw is consumed either way.
pub fn apply_context_dropout(window: ContextWindow, p_drop: f64, rng: &mut impl Rng) -> ContextWindow {
    let u: f64 = rng.gen();
    if u < p_drop {
        ContextWindow::empty(window.n)
    } else {
        window
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::HistorySource;

    fn window() -> ContextWindow {
        ContextWindow {
            n: 2,
            entries: vec![vec![7, 8], vec![9]],
            source: HistorySource::Teacher,
        }
    }

    #[test]
    fn dropout_extremes_are_exact() {
        let mut r = crate::rng::stream(1, "dropout", 0);
        for _ in 0..1000 {
            assert_eq!(apply_context_dropout(window(), 0.0, &mut r), window());
            let d = apply_context_dropout(window(), 1.0, &mut r);
            assert!(d.is_empty());
            assert_eq!(d.source, HistorySource::Empty);
        }
    }
}
