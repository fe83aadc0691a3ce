//! Evaluation harness: hallucination QA, caption scores over original and
//! swapped splits, the frame-count dominance sweep, and preference
//! satisfaction diagnostics.

mod captioning;
mod metrics;
mod qa;

pub use captioning::{best_swap_partner, captioning_eval, CaptionScores, CaptioningReport};
pub use metrics::{cider_d, meteor_lite, ConfusionCounts, QaMetrics};
pub use qa::{
    build_audio_halluc_qa, build_video_halluc_qa, dominance_sweep, resolve_qa_context, score_qa,
    QaItem, QaPrediction, QaPrompt,
};

use crate::error::Result;
use crate::model::ModelParams;
use crate::pairs::{PairKind, PreferencePair, ALL_KINDS};
use crate::train::{dpo_margin, ContextResolver};

/// Everything one evaluation run measures.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub qa: QaMetrics,
    pub confusion: ConfusionCounts,
    pub captioning: CaptioningReport,
    /// (n_frames, audio-QA accuracy) per sweep point.
    pub dominance: Vec<(usize, f64)>,
    /// (pair kind, fraction of held-out pairs with margin strictly > 0).
    pub pref_satisfaction: Vec<(PairKind, f64)>,
}

/// Fraction of pairs whose preference margin is strictly positive, per kind.
/// Kinds with no pairs are omitted.
pub fn pref_satisfaction(
    policy: &ModelParams,
    reference: &ModelParams,
    pairs: &[PreferencePair],
    beta: f64,
    resolver: &ContextResolver<'_>,
) -> Result<Vec<(PairKind, f64)>> {
    let mut out = Vec::new();
    for kind in ALL_KINDS {
        let of_kind: Vec<&PreferencePair> = pairs.iter().filter(|p| p.kind == kind).collect();
        if of_kind.is_empty() {
            continue;
        }
        let mut satisfied = 0usize;
        for pair in &of_kind {
            if dpo_margin(policy, reference, pair, beta, resolver)? > 0.0 {
                satisfied += 1;
            }
        }
        out.push((kind, satisfied as f64 / of_kind.len() as f64));
    }
    Ok(out)
}
