//! Unimodal captioning evaluation over original and audio-swapped inputs.
//!
//! Four splits: audio prompts with aligned or swapped audio (references
//! follow the resolved audio clip) and video prompts with aligned or swapped
//! audio (references follow the video clip). Swap partners are the
//! highest-similarity clip whose audio events actually differ, i.e. the most
//! plausible real mismatch.

use crate::error::{Error, Result};
use crate::eval::metrics::{cider_d, meteor_lite};
use crate::model::{greedy_decode, ModelParams};
use crate::tokens::TokenId;
use crate::train::ContextResolver;
use crate::world::{av_similarity, render_captions, Clip, EventVocab};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CaptionScores {
    pub meteor: f64,
    pub cider: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CaptioningReport {
    pub audio_original: CaptionScores,
    pub audio_swap: CaptionScores,
    pub video_original: CaptionScores,
    pub video_swap: CaptionScores,
}

impl CaptioningReport {
    pub fn splits(&self) -> [(&'static str, CaptionScores); 4] {
        [
            ("audio_original", self.audio_original),
            ("audio_swap", self.audio_swap),
            ("video_original", self.video_original),
            ("video_swap", self.video_swap),
        ]
    }
}

/// Highest-similarity partner whose audio is a real mismatch; ties break
/// toward the lower index.
///
/// With a small event vocabulary and strong co-occurrence, most
/// high-similarity clips share audio events, which would make the swap a
/// near-no-op. Partners with fully disjoint audio are preferred; clips
/// without one fall back to any partner with a differing event set.
pub fn best_swap_partner(clips: &[Clip], a: usize, vocab: &EventVocab) -> Option<usize> {
    let mut best_disjoint: Option<(usize, f64)> = None;
    let mut best_differing: Option<(usize, f64)> = None;
    for (b, candidate) in clips.iter().enumerate() {
        if b == a || candidate.audio_events == clips[a].audio_events {
            continue;
        }
        let s = av_similarity(&clips[a], candidate, vocab);
        let disjoint = candidate
            .audio_events
            .iter()
            .all(|e| !clips[a].audio_events.contains(e));
        let slot = if disjoint { &mut best_disjoint } else { &mut best_differing };
        let better = match slot {
            None => true,
            Some((_, bs)) => s > *bs,
        };
        if better {
            *slot = Some((b, s));
        }
    }
    best_disjoint.or(best_differing).map(|(b, _)| b)
}

/// Decoded captions and scores for every split over the eval clips.
pub fn captioning_eval(
    params: &ModelParams,
    eval_clips: &[Clip],
    vocab: &EventVocab,
    resolver: &ContextResolver<'_>,
    n_frames: usize,
) -> Result<CaptioningReport> {
    use crate::pairs::{ContextSpec, NoiseTag, PromptHead};

    if eval_clips.is_empty() {
        return Err(Error::Data("captioning eval needs at least one clip".into()));
    }
    let max_len = params.config().max_len;
    let captions: Vec<_> = eval_clips.iter().map(|c| render_captions(c, vocab)).collect();
    let partners: Vec<Option<usize>> = (0..eval_clips.len())
        .map(|i| best_swap_partner(eval_clips, i, vocab))
        .collect();

    type SplitData = (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>);
    let mut split_data: [SplitData; 4] = Default::default();
    for (i, clip) in eval_clips.iter().enumerate() {
        let Some(partner) = partners[i] else {
            continue;
        };
        let swapped_audio_id = eval_clips[partner].id.clone();
        let specs = [
            // (prompt, audio source, reference)
            (PromptHead::Aud, clip.id.clone(), captions[i].y_aud.clone()),
            (PromptHead::Aud, swapped_audio_id.clone(), captions[partner].y_aud.clone()),
            (PromptHead::Vis, clip.id.clone(), captions[i].y_vis.clone()),
            (PromptHead::Vis, swapped_audio_id, captions[i].y_vis.clone()),
        ];
        for (slot, (prompt_head, audio_id, reference)) in specs.into_iter().enumerate() {
            let spec = ContextSpec {
                video_clip_id: clip.id.clone(),
                audio_clip_id: audio_id,
                n_frames,
                prompt_head,
                noise_tag: NoiseTag::Clean,
            };
            let ctx = resolver.resolve(&spec)?;
            let decoded = greedy_decode(params, &ctx, max_len)?;
            split_data[slot].0.push(decoded);
            split_data[slot].1.push(reference);
        }
    }

    let score = |idx: usize| -> CaptionScores {
        let (cands, refs) = &split_data[idx];
        if cands.is_empty() {
            return CaptionScores::default();
        }
        let meteor = cands
            .iter()
            .zip(refs)
            .map(|(c, r)| meteor_lite(c, r))
            .sum::<f64>()
            / cands.len() as f64;
        CaptionScores {
            meteor,
            cider: cider_d(cands, refs, refs),
        }
    };

    Ok(CaptioningReport {
        audio_original: score(0),
        audio_swap: score(1),
        video_original: score(2),
        video_swap: score(3),
    })
}
