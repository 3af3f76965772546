//! Detection AP, the turn-by-turn evaluation protocol and score traces.

mod ap;
mod protocol;
mod trace;

pub use ap::{
    average_precision, average_precision_with_vacuous, map_over_thresholds, COCO_THRESHOLDS, VACUOUS_AP,
};
pub use protocol::{
    evaluate_turn_protocol, pair_dataset, EvalConfigEcho, EvalReport, QueryEval, SplitReport, TurnMetrics,
    UNLABELED_SPLIT,
};
pub use trace::{score_trace, ScoreTrace};
