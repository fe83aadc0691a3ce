//! Preference-pair construction.
//!
//! Four pair families drive training:
//!
//! * attribution (output-contrastive): under a swapped input and an audio
//!   prompt, prefer the caption of the actual audio track over the video
//!   caption. Same context on both sides, different responses.
//! * sensitivity (input-contrastive): prefer the joint caption under aligned
//!   audio over the identical caption under swapped audio. Same response,
//!   different contexts.
//! * noise: prefer responses conditioned on clean features over heavily
//!   corrupted ones.
//! * text: prefer the joint caption over the vision-only caption on aligned
//!   clips.
//!
//! Swap partners come from similarity tiers: empirical quantile buckets of
//! the video-to-audio embedding cosine. Partners whose audio event set
//! equals the source clip's are never eligible, since swapping them changes
//! nothing.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tokens::TokenId;
use crate::world::{av_similarity, CaptionBundle, Clip, EventVocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairKind {
    Attribution,
    Sensitivity,
    Noise,
    Text,
}

pub const ALL_KINDS: [PairKind; 4] = [
    PairKind::Attribution,
    PairKind::Sensitivity,
    PairKind::Noise,
    PairKind::Text,
];

impl PairKind {
    pub fn name(self) -> &'static str {
        match self {
            PairKind::Attribution => "attribution",
            PairKind::Sensitivity => "sensitivity",
            PairKind::Noise => "noise",
            PairKind::Text => "text",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        ALL_KINDS.into_iter().find(|k| k.name() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Similarity bucket a pair's swap partner was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Low,
    High,
    /// Pair types without a swap (noise, text, no-swap attribution).
    None,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::Low => "low",
            Tier::High => "high",
            Tier::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Tier::Low, Tier::High, Tier::None]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

/// Swap-tier selection for a pair builder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TierChoice {
    Low,
    High,
    /// Keep the aligned audio; attribution-only ablation variant.
    NoSwap,
}

impl TierChoice {
    pub fn name(self) -> &'static str {
        match self {
            TierChoice::Low => "low",
            TierChoice::High => "high",
            TierChoice::NoSwap => "noswap",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [TierChoice::Low, TierChoice::High, TierChoice::NoSwap]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptHead {
    Aud,
    Vis,
    Av,
}

impl PromptHead {
    pub fn name(self) -> &'static str {
        match self {
            PromptHead::Aud => "aud",
            PromptHead::Vis => "vis",
            PromptHead::Av => "av",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [PromptHead::Aud, PromptHead::Vis, PromptHead::Av]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseTag {
    Clean,
    AudioNoised,
    VideoNoised,
}

impl NoiseTag {
    pub fn name(self) -> &'static str {
        match self {
            NoiseTag::Clean => "clean",
            NoiseTag::AudioNoised => "audio_noised",
            NoiseTag::VideoNoised => "video_noised",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [NoiseTag::Clean, NoiseTag::AudioNoised, NoiseTag::VideoNoised]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

/// Recipe for materializing one model input at training or eval time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextSpec {
    pub video_clip_id: String,
    pub audio_clip_id: String,
    pub n_frames: usize,
    pub prompt_head: PromptHead,
    pub noise_tag: NoiseTag,
}

impl ContextSpec {
    pub fn aligned(clip_id: &str, n_frames: usize, prompt_head: PromptHead) -> Self {
        Self {
            video_clip_id: clip_id.to_string(),
            audio_clip_id: clip_id.to_string(),
            n_frames,
            prompt_head,
            noise_tag: NoiseTag::Clean,
        }
    }

    pub fn is_aligned(&self) -> bool {
        self.video_clip_id == self.audio_clip_id
    }
}

/// One training item: a preferred and a dispreferred (context, response).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferencePair {
    pub kind: PairKind,
    pub tier: Tier,
    pub preferred_ctx: ContextSpec,
    pub preferred_y: Vec<TokenId>,
    pub dispreferred_ctx: ContextSpec,
    pub dispreferred_y: Vec<TokenId>,
}

/// Quantile bounds for the similarity tiers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TierConfig {
    pub low_quantile: f64,
    pub high_quantile: f64,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            low_quantile: 0.25,
            high_quantile: 0.75,
        }
    }
}

impl TierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.low_quantile > 0.0
            && self.low_quantile <= self.high_quantile
            && self.high_quantile < 1.0)
        {
            return Err(Error::Config(format!(
                "tier quantiles must satisfy 0 < low <= high < 1, got {} and {}",
                self.low_quantile, self.high_quantile
            )));
        }
        Ok(())
    }
}

/// Linear-interpolation quantile of a sorted sample at position q*(n-1).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Tier partition of swap candidates, indexed like the corpus it was built
/// from. Cutoffs are inclusive on both sides.
#[derive(Clone, Debug)]
pub struct TierMap {
    pub low_cutoff: f64,
    pub high_cutoff: f64,
    /// Per clip: corpus indices of eligible partners in each tier.
    pub low: Vec<Vec<usize>>,
    pub high: Vec<Vec<usize>>,
    /// Clips whose low/high tier ended up empty.
    pub skipped_low: usize,
    pub skipped_high: usize,
}

impl TierMap {
    fn tier_of(&self, choice: TierChoice, clip: usize) -> &[usize] {
        match choice {
            TierChoice::Low => &self.low[clip],
            TierChoice::High => &self.high[clip],
            TierChoice::NoSwap => &[],
        }
    }
}

/// Buckets every clip's swap candidates into similarity tiers.
///
/// Cutoffs are empirical quantiles of the full ordered pairwise similarity
/// sample. Partners with an identical audio event set are excluded from the
/// tier lists: swapping them would leave the audio unchanged.
pub fn tier_swaps(
    corpus: &[Clip],
    vocab: &EventVocab,
    tiers: &TierConfig,
) -> Result<TierMap> {
    tiers.validate()?;
    if corpus.len() < 4 {
        return Err(Error::Data(format!(
            "tier construction needs at least 4 clips, got {}",
            corpus.len()
        )));
    }

    let n = corpus.len();
    let mut sims = vec![0.0f64; n * n];
    let mut sample = Vec::with_capacity(n * (n - 1));
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let s = av_similarity(&corpus[a], &corpus[b], vocab);
            sims[a * n + b] = s;
            sample.push(s);
        }
    }
    sample.sort_by(|x, y| x.partial_cmp(y).expect("similarities are finite"));
    let low_cutoff = quantile_sorted(&sample, tiers.low_quantile);
    let high_cutoff = quantile_sorted(&sample, tiers.high_quantile);

    let mut low = vec![Vec::new(); n];
    let mut high = vec![Vec::new(); n];
    let (mut skipped_low, mut skipped_high) = (0, 0);
    for a in 0..n {
        for b in 0..n {
            if a == b || corpus[a].audio_events == corpus[b].audio_events {
                continue;
            }
            let s = sims[a * n + b];
            if s <= low_cutoff {
                low[a].push(b);
            }
            if s >= high_cutoff {
                high[a].push(b);
            }
        }
        if low[a].is_empty() {
            skipped_low += 1;
        }
        if high[a].is_empty() {
            skipped_high += 1;
        }
    }

    Ok(TierMap {
        low_cutoff,
        high_cutoff,
        low,
        high,
        skipped_low,
        skipped_high,
    })
}

fn caption_of(captions: &[CaptionBundle], idx: usize) -> Result<&CaptionBundle> {
    captions
        .get(idx)
        .ok_or_else(|| Error::Data(format!("missing captions for clip index {idx}")))
}

/// Output-contrastive pairs: context `(v_A, a_B)` with an audio prompt;
/// prefer the partner's audio caption over A's video caption. One pair per
/// clip with an eligible partner; clips without one are skipped.
pub fn build_attribution_pairs(
    corpus: &[Clip],
    captions: &[CaptionBundle],
    tiers: &TierMap,
    tier_choice: TierChoice,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    let mut rng = SplitMix64::new(seed);
    let mut pairs = Vec::with_capacity(corpus.len());
    for (i, clip) in corpus.iter().enumerate() {
        let (partner_idx, tier) = match tier_choice {
            TierChoice::NoSwap => (i, Tier::None),
            choice => {
                let pool = tiers.tier_of(choice, i);
                if pool.is_empty() {
                    continue;
                }
                let tier = if choice == TierChoice::Low { Tier::Low } else { Tier::High };
                (pool[rng.index(pool.len())], tier)
            }
        };
        let ctx = ContextSpec {
            video_clip_id: clip.id.clone(),
            audio_clip_id: corpus[partner_idx].id.clone(),
            n_frames,
            prompt_head: PromptHead::Aud,
            noise_tag: NoiseTag::Clean,
        };
        pairs.push(PreferencePair {
            kind: PairKind::Attribution,
            tier,
            preferred_ctx: ctx.clone(),
            preferred_y: caption_of(captions, partner_idx)?.y_aud.clone(),
            dispreferred_ctx: ctx,
            dispreferred_y: caption_of(captions, i)?.y_vis.clone(),
        });
    }
    Ok(pairs)
}

/// Input-contrastive pairs: the joint caption of A is preferred under
/// aligned audio and dispreferred under swapped audio.
pub fn build_sensitivity_pairs(
    corpus: &[Clip],
    captions: &[CaptionBundle],
    tiers: &TierMap,
    tier_choice: TierChoice,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if tier_choice == TierChoice::NoSwap {
        return Err(Error::Config(
            "sensitivity pairs require a swap tier".into(),
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let mut pairs = Vec::with_capacity(corpus.len());
    for (i, clip) in corpus.iter().enumerate() {
        let pool = tiers.tier_of(tier_choice, i);
        if pool.is_empty() {
            continue;
        }
        let partner_idx = pool[rng.index(pool.len())];
        let y = caption_of(captions, i)?.y_av.clone();
        let preferred_ctx = ContextSpec::aligned(&clip.id, n_frames, PromptHead::Av);
        let dispreferred_ctx = ContextSpec {
            audio_clip_id: corpus[partner_idx].id.clone(),
            ..preferred_ctx.clone()
        };
        pairs.push(PreferencePair {
            kind: PairKind::Sensitivity,
            tier: if tier_choice == TierChoice::Low { Tier::Low } else { Tier::High },
            preferred_ctx,
            preferred_y: y.clone(),
            dispreferred_ctx,
            dispreferred_y: y,
        });
    }
    Ok(pairs)
}

/// Clean-vs-corrupted pairs. The corrupted side tags one modality for heavy
/// additive noise at context-resolution time; the modality alternates with
/// the clip index.
pub fn build_noise_pairs(
    corpus: &[Clip],
    captions: &[CaptionBundle],
    noise_sigma_corrupt: f64,
    feature_noise_sigma: f64,
    n_frames: usize,
) -> Result<Vec<PreferencePair>> {
    if noise_sigma_corrupt <= feature_noise_sigma {
        return Err(Error::Config(format!(
            "corruption noise {noise_sigma_corrupt} must exceed feature noise {feature_noise_sigma}"
        )));
    }
    let mut pairs = Vec::with_capacity(corpus.len());
    for (i, clip) in corpus.iter().enumerate() {
        let y = caption_of(captions, i)?.y_av.clone();
        let clean = ContextSpec::aligned(&clip.id, n_frames, PromptHead::Av);
        let corrupted = ContextSpec {
            noise_tag: if i % 2 == 0 {
                NoiseTag::AudioNoised
            } else {
                NoiseTag::VideoNoised
            },
            ..clean.clone()
        };
        pairs.push(PreferencePair {
            kind: PairKind::Noise,
            tier: Tier::None,
            preferred_ctx: clean,
            preferred_y: y.clone(),
            dispreferred_ctx: corrupted,
            dispreferred_y: y,
        });
    }
    Ok(pairs)
}

/// Aligned-input text pairs: joint caption preferred over the vision-only
/// caption. One per clip.
pub fn build_text_pairs(corpus: &[Clip], captions: &[CaptionBundle]) -> Result<Vec<PreferencePair>> {
    build_text_pairs_with_frames(corpus, captions, 4)
}

pub fn build_text_pairs_with_frames(
    corpus: &[Clip],
    captions: &[CaptionBundle],
    n_frames: usize,
) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::with_capacity(corpus.len());
    for (i, clip) in corpus.iter().enumerate() {
        let ctx = ContextSpec::aligned(&clip.id, n_frames, PromptHead::Av);
        pairs.push(PreferencePair {
            kind: PairKind::Text,
            tier: Tier::None,
            preferred_ctx: ctx.clone(),
            preferred_y: caption_of(captions, i)?.y_av.clone(),
            dispreferred_ctx: ctx,
            dispreferred_y: caption_of(captions, i)?.y_vis.clone(),
        });
    }
    Ok(pairs)
}

/// Pair pools grouped by kind, the unit the batch sampler draws from.
#[derive(Clone, Debug, Default)]
pub struct PairPools {
    pools: [Vec<PreferencePair>; 4],
}

impl PairPools {
    pub fn from_pairs(pairs: Vec<PreferencePair>) -> Self {
        let mut out = Self::default();
        for p in pairs {
            out.pools[p.kind.index()].push(p);
        }
        out
    }

    pub fn push(&mut self, pair: PreferencePair) {
        self.pools[pair.kind.index()].push(pair);
    }

    pub fn of_kind(&self, kind: PairKind) -> &[PreferencePair] {
        &self.pools[kind.index()]
    }

    pub fn total(&self) -> usize {
        self.pools.iter().map(Vec::len).sum()
    }

    pub fn iter_all(&self) -> impl Iterator<Item = &PreferencePair> {
        self.pools.iter().flatten()
    }
}

/// Per-kind sampling weights for one batch slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KindMix {
    weights: [f64; 4],
}

impl KindMix {
    pub fn new(weights: [f64; 4]) -> Result<Self> {
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("mix weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mix weights sum to {total}, need 1")));
        }
        Ok(Self { weights })
    }

    /// Audio-contrastive probability `ac`, split between attribution and
    /// sensitivity by `att_frac`; the remainder split between noise and
    /// text by `text_frac`.
    pub fn audio_contrastive_split(ac: f64, att_frac: f64, text_frac: f64) -> Result<Self> {
        for (name, v) in [("ac", ac), ("att_frac", att_frac), ("text_frac", text_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("mix fraction {name}={v} outside [0, 1]")));
            }
        }
        let other = 1.0 - ac;
        Self::new([
            ac * att_frac,
            ac * (1.0 - att_frac),
            other * (1.0 - text_frac),
            other * text_frac,
        ])
    }

    /// Even sub-splits on both sides.
    pub fn audio_contrastive(ac: f64) -> Result<Self> {
        Self::audio_contrastive_split(ac, 0.5, 0.5)
    }

    /// As [`Self::audio_contrastive_split`] but with one audio-contrastive
    /// kind removed; its share moves to the other one.
    pub fn audio_contrastive_without(
        ac: f64,
        att_frac: f64,
        text_frac: f64,
        removed: PairKind,
    ) -> Result<Self> {
        let base = Self::audio_contrastive_split(ac, att_frac, text_frac)?;
        let mut w = base.weights;
        match removed {
            PairKind::Attribution => {
                w[PairKind::Sensitivity.index()] += w[PairKind::Attribution.index()];
                w[PairKind::Attribution.index()] = 0.0;
            }
            PairKind::Sensitivity => {
                w[PairKind::Attribution.index()] += w[PairKind::Sensitivity.index()];
                w[PairKind::Sensitivity.index()] = 0.0;
            }
            _ => return Err(Error::Config("only audio-contrastive kinds can be removed".into())),
        }
        Self::new(w)
    }

    pub fn text_only() -> Self {
        Self {
            weights: [0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn noise_and_text() -> Self {
        Self {
            weights: [0.0, 0.0, 0.5, 0.5],
        }
    }

    pub fn weight(&self, kind: PairKind) -> f64 {
        self.weights[kind.index()]
    }
}

/// Deterministic batch stream over the pools.
///
/// Each slot draws a kind from the mix, then a pair uniformly without
/// replacement within the kind pool; once a pool is exhausted, further draws
/// from it are with replacement. Rebuild the sampler (with a fresh seed) to
/// start a new epoch.
pub struct BatchSampler<'a> {
    pools: &'a PairPools,
    queues: [Vec<usize>; 4],
    cumulative: [f64; 4],
    batch_size: usize,
    rng: SplitMix64,
}

impl<'a> BatchSampler<'a> {
    pub fn new(pools: &'a PairPools, mix: KindMix, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if pools.total() == 0 {
            return Err(Error::Data("all pair pools are empty".into()));
        }
        for kind in ALL_KINDS {
            if mix.weight(kind) > 0.0 && pools.of_kind(kind).is_empty() {
                return Err(Error::Data(format!(
                    "mix requests {} pairs but that pool is empty",
                    kind.name()
                )));
            }
        }
        let mut rng = SplitMix64::new(seed);
        let mut queues: [Vec<usize>; 4] = Default::default();
        for kind in ALL_KINDS {
            let mut q: Vec<usize> = (0..pools.of_kind(kind).len()).collect();
            rng.shuffle(&mut q);
            queues[kind.index()] = q;
        }
        let mut cumulative = [0.0; 4];
        let mut acc = 0.0;
        for kind in ALL_KINDS {
            acc += mix.weight(kind);
            cumulative[kind.index()] = acc;
        }
        Ok(Self {
            pools,
            queues,
            cumulative,
            batch_size,
            rng,
        })
    }

    fn draw_kind(&mut self) -> PairKind {
        let r = self.rng.next_f64();
        for kind in ALL_KINDS {
            if r < self.cumulative[kind.index()] {
                return kind;
            }
        }
        PairKind::Text
    }

    /// Draws one pair; without replacement until the kind pool exhausts.
    pub fn draw(&mut self) -> &'a PreferencePair {
        let kind = self.draw_kind();
        let pool = self.pools.of_kind(kind);
        let q = &mut self.queues[kind.index()];
        let idx = match q.pop() {
            Some(i) => i,
            None => self.rng.index(pool.len()),
        };
        &pool[idx]
    }

    pub fn next_batch(&mut self) -> Vec<&'a PreferencePair> {
        (0..self.batch_size).map(|_| self.draw()).collect()
    }
}
