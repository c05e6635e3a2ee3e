//! Word error rate, evaluation under each history source, and the
//! composition-strength and mining-threshold sweeps.

mod report;
mod wer;

pub use report::{
    decode_condition, evaluate, evaluate_detailed, sweep_gamma, sweep_threshold, AttackGap, ConditionResult, EvalReport, EvalSettings,
    ThresholdRun, ThresholdSweep, DEFAULT_GAMMA_GRID, DEFAULT_THRESHOLDS,
};
pub use wer::{align, corpus_wer, wer, EditOp, WerResult};
