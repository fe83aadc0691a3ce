//! Hallucination QA: item construction, scoring, and the frame-count sweep.
//!
//! Audio-hallucination items put a swapped audio track behind the original
//! video and ask about a sound. "No" items are visually tempting: they ask
//! about the expected sound of a visible object that the actual audio does
//! not contain. "Yes" items ask about sounds the swapped track does carry.
//! A mirrored builder probes the opposite axis with see-questions.

use crate::error::{Error, Result};
use crate::eval::metrics::ConfusionCounts;
use crate::model::{predicts_yes, yes_no_score, ModelParams};
use crate::pairs::{ContextSpec, NoiseTag, PromptHead, TierMap};
use crate::rng::SplitMix64;
use crate::tokens::{self, TokenId};
use crate::train::ContextResolver;
use crate::world::{Clip, EventVocab};

/// Which question head the item uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QaPrompt {
    Hear,
    See,
}

impl QaPrompt {
    pub fn head_token(self) -> TokenId {
        match self {
            QaPrompt::Hear => tokens::Q_HEAR,
            QaPrompt::See => tokens::Q_SEE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QaPrompt::Hear => "hear",
            QaPrompt::See => "see",
        }
    }
}

/// One yes/no probe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaItem {
    pub id: usize,
    pub ctx: ContextSpec,
    pub prompt: QaPrompt,
    /// Event or object token the question asks about.
    pub question_token: TokenId,
    pub truth: bool,
}

/// Raw per-item outcome, kept so every derived metric can be recounted.
#[derive(Clone, Debug, PartialEq)]
pub struct QaPrediction {
    pub item_id: usize,
    pub truth: bool,
    pub predicted: bool,
    pub logp_yes: f64,
    pub logp_no: f64,
}

fn swap_partner_pool(tiers: &TierMap, clip_idx: usize) -> Vec<usize> {
    let mut pool = tiers.low[clip_idx].clone();
    pool.extend_from_slice(&tiers.high[clip_idx]);
    pool
}

/// Builds a balanced audio-hallucination QA set over swapped contexts.
pub fn build_audio_halluc_qa(
    corpus: &[Clip],
    vocab: &EventVocab,
    tiers: &TierMap,
    n_items: usize,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<QaItem>> {
    build_halluc_qa(corpus, vocab, tiers, n_items, n_frames, seed, QaPrompt::Hear)
}

/// Mirrored builder: misleading audio, truth decided by the video.
pub fn build_video_halluc_qa(
    corpus: &[Clip],
    vocab: &EventVocab,
    tiers: &TierMap,
    n_items: usize,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<QaItem>> {
    build_halluc_qa(corpus, vocab, tiers, n_items, n_frames, seed, QaPrompt::See)
}

fn build_halluc_qa(
    corpus: &[Clip],
    vocab: &EventVocab,
    tiers: &TierMap,
    n_items: usize,
    n_frames: usize,
    seed: u64,
    prompt: QaPrompt,
) -> Result<Vec<QaItem>> {
    let mut rng = SplitMix64::new(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut order);

    let mut items = Vec::with_capacity(n_items);
    let mut want_no = true; // alternate to balance the labels
    let mut passes = 0usize;
    'outer: while items.len() < n_items {
        passes += 1;
        if passes > 4 {
            return Err(Error::Data(format!(
                "could not build {n_items} qa items from {} clips ({} built, {} eligible partners)",
                corpus.len(),
                items.len(),
                order
                    .iter()
                    .filter(|&&i| !swap_partner_pool(tiers, i).is_empty())
                    .count()
            )));
        }
        for &a in &order {
            if items.len() >= n_items {
                break 'outer;
            }
            let pool = swap_partner_pool(tiers, a);
            if pool.is_empty() {
                continue;
            }
            let b = pool[rng.index(pool.len())];
            let clip_a = &corpus[a];
            let clip_b = &corpus[b];
            let ctx = ContextSpec {
                video_clip_id: clip_a.id.clone(),
                audio_clip_id: clip_b.id.clone(),
                n_frames,
                prompt_head: match prompt {
                    QaPrompt::Hear => PromptHead::Aud,
                    QaPrompt::See => PromptHead::Vis,
                },
                noise_tag: NoiseTag::Clean,
            };

            let question = match (prompt, want_no) {
                (QaPrompt::Hear, true) => {
                    // Expected sound of a visible object, absent from the
                    // actual (swapped) audio.
                    let tempting: Vec<TokenId> = vocab
                        .expected_events_of(&clip_a.visual_events)
                        .into_iter()
                        .filter(|e| !clip_b.audio_events.contains(e))
                        .map(|e| vocab.audio_token(e))
                        .collect();
                    if tempting.is_empty() {
                        continue;
                    }
                    tempting[rng.index(tempting.len())]
                }
                (QaPrompt::Hear, false) => {
                    let present = &clip_b.audio_events;
                    vocab.audio_token(present[rng.index(present.len())])
                }
                (QaPrompt::See, true) => {
                    // Object suggested by the swapped audio but not visible.
                    let tempting: Vec<TokenId> = (0..vocab.n_objects())
                        .map(crate::world::ObjectId)
                        .filter(|&o| {
                            clip_b.audio_events.contains(&vocab.expected_event(o))
                                && !clip_a.visual_events.contains(&o)
                        })
                        .map(|o| vocab.object_token(o))
                        .collect();
                    if tempting.is_empty() {
                        continue;
                    }
                    tempting[rng.index(tempting.len())]
                }
                (QaPrompt::See, false) => {
                    let seen = &clip_a.visual_events;
                    vocab.object_token(seen[rng.index(seen.len())])
                }
            };

            items.push(QaItem {
                id: items.len(),
                ctx,
                prompt,
                question_token: question,
                truth: !want_no,
            });
            want_no = !want_no;
        }
    }
    Ok(items)
}

/// Materializes the question context: resolved features plus the two-token
/// question prompt.
pub fn resolve_qa_context(
    resolver: &ContextResolver<'_>,
    item: &QaItem,
) -> Result<crate::model::Context> {
    let mut ctx = resolver.resolve(&item.ctx)?;
    ctx.prompt_tokens = vec![item.prompt.head_token(), item.question_token];
    Ok(ctx)
}

/// Scores every item and keeps the raw predictions alongside the counts.
pub fn score_qa(
    params: &ModelParams,
    items: &[QaItem],
    resolver: &ContextResolver<'_>,
) -> Result<(ConfusionCounts, Vec<QaPrediction>)> {
    let mut counts = ConfusionCounts::default();
    let mut raw = Vec::with_capacity(items.len());
    for item in items {
        let ctx = resolve_qa_context(resolver, item)?;
        let (logp_yes, logp_no) = yes_no_score(params, &ctx)?;
        let predicted = predicts_yes(logp_yes, logp_no);
        counts.record(item.truth, predicted);
        raw.push(QaPrediction {
            item_id: item.id,
            truth: item.truth,
            predicted,
            logp_yes,
            logp_no,
        });
    }
    Ok((counts, raw))
}

/// Accuracy of the identical QA set at each frame count. Only the context's
/// `n_frames` varies; features reuse the same per-frame noise streams.
pub fn dominance_sweep(
    params: &ModelParams,
    items: &[QaItem],
    frames_list: &[usize],
    resolver: &ContextResolver<'_>,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(frames_list.len());
    for &n_frames in frames_list {
        let adjusted: Vec<QaItem> = items
            .iter()
            .map(|item| QaItem {
                ctx: ContextSpec {
                    n_frames,
                    ..item.ctx.clone()
                },
                ..item.clone()
            })
            .collect();
        let (counts, _) = score_qa(params, &adjusted, resolver)?;
        out.push((n_frames, counts.metrics().accuracy));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Block, ModelConfig};
    use crate::pairs::{tier_swaps, TierConfig};
    use crate::world::generate_corpus;

    fn setup(n: usize, p_co: f64, seed: u64) -> (EventVocab, Vec<Clip>, TierMap) {
        let vocab = EventVocab::default_vocab(16, p_co, 7).unwrap();
        let corpus = generate_corpus(&vocab, n, p_co, seed).unwrap();
        let tiers = tier_swaps(&corpus, &vocab, &TierConfig::default()).unwrap();
        (vocab, corpus, tiers)
    }

    #[test]
    fn qa_items_are_balanced_and_tempting() {
        let (vocab, corpus, tiers) = setup(120, 0.9, 3);
        let items = build_audio_halluc_qa(&corpus, &vocab, &tiers, 101, 4, 5).unwrap();
        assert_eq!(items.len(), 101);
        let yes = items.iter().filter(|i| i.truth).count() as i64;
        let no = items.len() as i64 - yes;
        assert!((yes - no).abs() <= 1, "yes {yes}, no {no}");

        let by_id: std::collections::BTreeMap<&str, &Clip> =
            corpus.iter().map(|c| (c.id.as_str(), c)).collect();
        for item in &items {
            assert!(!item.ctx.is_aligned(), "qa contexts are always swapped");
            let video = by_id[item.ctx.video_clip_id.as_str()];
            let audio = by_id[item.ctx.audio_clip_id.as_str()];
            let event = vocab.audio_event_of_token(item.question_token).unwrap();
            // Truth comes from the resolved audio clip.
            assert_eq!(item.truth, audio.audio_events.contains(&event));
            if !item.truth {
                // Every "no" event is the expected sound of something visible.
                assert!(video
                    .visual_events
                    .iter()
                    .any(|&o| vocab.expected_event(o) == event));
            }
        }
    }

    #[test]
    fn qa_builder_reports_impossible_requests() {
        let (vocab, corpus, tiers) = setup(8, 0.9, 4);
        let err = build_audio_halluc_qa(&corpus, &vocab, &tiers, 10_000, 4, 5);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn mirrored_builder_uses_video_truth() {
        let (vocab, corpus, tiers) = setup(120, 0.9, 6);
        let items = build_video_halluc_qa(&corpus, &vocab, &tiers, 60, 4, 7).unwrap();
        let by_id: std::collections::BTreeMap<&str, &Clip> =
            corpus.iter().map(|c| (c.id.as_str(), c)).collect();
        for item in &items {
            assert_eq!(item.prompt, QaPrompt::See);
            let video = by_id[item.ctx.video_clip_id.as_str()];
            let audio = by_id[item.ctx.audio_clip_id.as_str()];
            let object = vocab.object_of_token(item.question_token).unwrap();
            assert_eq!(item.truth, video.visual_events.contains(&object));
            if !item.truth {
                // Tempting: the swapped audio carries the object's sound.
                assert!(audio.audio_events.contains(&vocab.expected_event(object)));
            }
        }
    }

    #[test]
    fn scoring_matches_recount_and_is_deterministic() {
        let (vocab, corpus, tiers) = setup(60, 0.9, 8);
        let resolver = ContextResolver::new(&corpus, &vocab, 0.05, 1.0);
        let params = ModelParams::init(ModelConfig {
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap();
        let items = build_audio_halluc_qa(&corpus, &vocab, &tiers, 50, 4, 9).unwrap();
        let (counts, raw) = score_qa(&params, &items, &resolver).unwrap();
        assert_eq!(counts.total(), 50);

        let mut recount = ConfusionCounts::default();
        for p in &raw {
            assert_eq!(p.predicted, p.logp_yes > p.logp_no);
            recount.record(p.truth, p.predicted);
        }
        assert_eq!(counts, recount);

        let (counts2, raw2) = score_qa(&params, &items, &resolver).unwrap();
        assert_eq!(counts, counts2);
        assert_eq!(raw, raw2);
    }

    #[test]
    fn sweep_is_deterministic_and_video_content_invariant_without_projector() {
        let (vocab, corpus, tiers) = setup(60, 0.9, 10);
        let resolver = ContextResolver::new(&corpus, &vocab, 0.05, 1.0);
        let cfg = ModelConfig {
            seed: 6,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(cfg).unwrap();
        let items = build_audio_halluc_qa(&corpus, &vocab, &tiers, 40, 4, 11).unwrap();

        let sweep = dominance_sweep(&params, &items, &[1, 2, 4, 8], &resolver).unwrap();
        let sweep2 = dominance_sweep(&params, &items, &[1, 2, 4, 8], &resolver).unwrap();
        assert_eq!(sweep, sweep2);
        assert_eq!(sweep.len(), 4);

        // With a zero video projector the answers cannot depend on which
        // video is shown: swap every item's video clip and nothing moves.
        params
            .set_block(Block::PVideo, crate::grad::Tensor::zeros(cfg.d_model, cfg.d_video))
            .unwrap();
        let (_, raw) = score_qa(&params, &items, &resolver).unwrap();
        let moved: Vec<QaItem> = items
            .iter()
            .map(|item| {
                let other = corpus
                    .iter()
                    .find(|c| c.id != item.ctx.video_clip_id)
                    .unwrap();
                QaItem {
                    ctx: ContextSpec {
                        video_clip_id: other.id.clone(),
                        ..item.ctx.clone()
                    },
                    ..item.clone()
                }
            })
            .collect();
        let (_, raw_moved) = score_qa(&params, &moved, &resolver).unwrap();
        for (a, b) in raw.iter().zip(&raw_moved) {
            assert_eq!(a.logp_yes.to_bits(), b.logp_yes.to_bits());
            assert_eq!(a.logp_no.to_bits(), b.logp_no.to_bits());
        }
    }
}
