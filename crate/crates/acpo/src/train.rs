//! Optimization: bias pretraining of the whole backbone, then preference
//! training of the audio projector against a frozen reference.
//!
//! Pretraining plants the visual shortcut on purpose: with probability
//! `p_audio_drop` the audio feature is zeroed while the target caption or
//! answer is kept, so the model learns to predict sound words from what it
//! sees. Preference phases then adjust only the audio projector with the
//! log-sigmoid margin loss over preference pairs, anchored to a reference
//! snapshot taken at phase start.

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor};
use crate::model::{
    sequence_logprob_value, snapshot_reference, Block, BoundModel, Context, ModelParams,
};
use crate::pairs::{
    BatchSampler, ContextSpec, KindMix, NoiseTag, PairPools, PreferencePair, PromptHead,
};
use crate::rng::{derive_seed, mix, SplitMix64};
use crate::tokens::{self, TokenId};
use crate::world::{audio_features, noise_vector, video_features, CaptionBundle, Clip, EventVocab};
use std::collections::BTreeMap;

/// Training phase; selects the trainable blocks and the pair mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Acpo,
    SftBaseline,
    DpoBaseline,
    OmnidpoBaseline,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Acpo => "acpo",
            Phase::SftBaseline => "sft",
            Phase::DpoBaseline => "dpo",
            Phase::OmnidpoBaseline => "omnidpo",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Phase::Pretrain,
            Phase::Acpo,
            Phase::SftBaseline,
            Phase::DpoBaseline,
            Phase::OmnidpoBaseline,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }

    /// Pair mix for the preference phases.
    pub fn kind_mix(self, audio_contrastive: f64, att_frac: f64, text_frac: f64) -> Result<KindMix> {
        match self {
            Phase::Acpo => KindMix::audio_contrastive_split(audio_contrastive, att_frac, text_frac),
            Phase::DpoBaseline => Ok(KindMix::text_only()),
            Phase::OmnidpoBaseline => Ok(KindMix::noise_and_text()),
            _ => Err(Error::Config(format!(
                "phase {} does not train on preference pairs",
                self.name()
            ))),
        }
    }
}

/// Learning-rate preset matching the reference recipe for full-size models.
/// The desk-scale default below trains the tiny projector in sensible time.
pub const PAPER_PRESET_LR: f64 = 2e-5;



#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub phase: Phase,
    /// Fraction of batch slots drawn from attribution + sensitivity pools.
    pub mix_audio_contrastive: f64,
    /// Attribution share of the audio-contrastive mass.
    pub mix_attribution_fraction: f64,
    /// Text share of the non-audio-contrastive mass.
    pub mix_text_fraction: f64,
    /// Pretraining only: probability of zeroing the audio feature while
    /// keeping the target.
    pub p_audio_drop: f64,
    /// Pretraining only: probability of swapping in another clip's audio on
    /// video-grounded items, teaching video skills to ignore the audio slot.
    /// The sight-to-sound shortcut on audio-grounded items is untouched.
    pub p_audio_shuffle: f64,
    /// Scale range for the shuffled audio (uniform draw per item).
    pub audio_shuffle_min_scale: f64,
    pub audio_shuffle_max_scale: f64,
    /// Pretraining only: extra Gaussian jitter on the audio slot of every
    /// item, widening the decoder's tolerance to audio-token perturbations.
    pub audio_jitter_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 1e-3,
            warmup_steps: 50,
            total_steps: 625,
            batch_size: 8,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            phase: Phase::Acpo,
            mix_audio_contrastive: 0.6,
            mix_attribution_fraction: 0.5,
            mix_text_fraction: 0.5,
            p_audio_drop: 0.3,
            p_audio_shuffle: 0.5,
            audio_shuffle_min_scale: 1.0,
            audio_shuffle_max_scale: 1.0,
            audio_jitter_sigma: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_audio_drop) {
            return Err(Error::Config(format!(
                "p_audio_drop {} outside [0, 1]",
                self.p_audio_drop
            )));
        }
        if !(0.0..=1.0).contains(&self.p_audio_shuffle) {
            return Err(Error::Config(format!(
                "p_audio_shuffle {} outside [0, 1]",
                self.p_audio_shuffle
            )));
        }
        if !(self.audio_shuffle_min_scale > 0.0
            && self.audio_shuffle_min_scale <= self.audio_shuffle_max_scale)
        {
            return Err(Error::Config(format!(
                "audio shuffle scales must satisfy 0 < min <= max, got {} and {}",
                self.audio_shuffle_min_scale, self.audio_shuffle_max_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_audio_contrastive) {
            return Err(Error::Config(format!(
                "mix_audio_contrastive {} outside [0, 1]",
                self.mix_audio_contrastive
            )));
        }
        Ok(())
    }
}

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_margin: f64,
}

/// Turns context specs into model inputs. Corruption noise streams derive
/// from the tagged clip's seed, so resolution is reproducible from files.
pub struct ContextResolver<'a> {
    corpus: &'a [Clip],
    by_id: BTreeMap<&'a str, usize>,
    vocab: &'a EventVocab,
    pub feature_noise_sigma: f64,
    pub corrupt_sigma: f64,
}

impl<'a> ContextResolver<'a> {
    pub fn new(
        corpus: &'a [Clip],
        vocab: &'a EventVocab,
        feature_noise_sigma: f64,
        corrupt_sigma: f64,
    ) -> Self {
        let by_id = corpus.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();
        Self {
            corpus,
            by_id,
            vocab,
            feature_noise_sigma,
            corrupt_sigma,
        }
    }

    pub fn clip(&self, id: &str) -> Result<&'a Clip> {
        self.by_id
            .get(id)
            .map(|&i| &self.corpus[i])
            .ok_or_else(|| Error::Data(format!("unknown clip id {id}")))
    }

    fn prompt_token(head: PromptHead) -> TokenId {
        match head {
            PromptHead::Aud => tokens::PROMPT_AUD,
            PromptHead::Vis => tokens::PROMPT_VIS,
            PromptHead::Av => tokens::PROMPT_AV,
        }
    }

    /// Materializes features for a context spec, applying heavy additive
    /// corruption to the tagged modality.
    pub fn resolve(&self, spec: &ContextSpec) -> Result<Context> {
        let video_clip = self.clip(&spec.video_clip_id)?;
        let audio_clip = self.clip(&spec.audio_clip_id)?;
        let mut frames =
            video_features(video_clip, self.vocab, spec.n_frames, self.feature_noise_sigma)?;
        let mut audio = audio_features(audio_clip, self.vocab, self.feature_noise_sigma);
        match spec.noise_tag {
            NoiseTag::Clean => {}
            NoiseTag::AudioNoised => {
                let seed = derive_seed(audio_clip.clip_seed, "corrupt-audio");
                let noise = noise_vector(seed, audio.len(), self.corrupt_sigma);
                for (a, n) in audio.iter_mut().zip(noise) {
                    *a += n;
                }
            }
            NoiseTag::VideoNoised => {
                let base = derive_seed(video_clip.clip_seed, "corrupt-video");
                for (i, frame) in frames.iter_mut().enumerate() {
                    let noise = noise_vector(mix(base, i as u64), frame.len(), self.corrupt_sigma);
                    for (f, n) in frame.iter_mut().zip(noise) {
                        *f += n;
                    }
                }
            }
        }
        Ok(Context {
            video_tokens: frames,
            audio_vector: audio,
            prompt_tokens: vec![Self::prompt_token(spec.prompt_head)],
        })
    }

    /// Aligned clean context for a clip with an arbitrary prompt.
    pub fn aligned_context(
        &self,
        clip: &Clip,
        n_frames: usize,
        prompt_tokens: Vec<TokenId>,
    ) -> Result<Context> {
        Ok(Context {
            video_tokens: video_features(clip, self.vocab, n_frames, self.feature_noise_sigma)?,
            audio_vector: audio_features(clip, self.vocab, self.feature_noise_sigma),
            prompt_tokens,
        })
    }
}

/// Preference-margin loss for one pair, differentiable through the bound
/// policy only: `z` is the beta-scaled difference of policy-vs-reference
/// log-ratios and the loss is `-log(sigmoid(z))`.
pub fn dpo_loss(
    policy: &BoundModel<'_>,
    reference: &ModelParams,
    pair: &PreferencePair,
    beta: f64,
    resolver: &ContextResolver<'_>,
) -> Result<Tensor> {
    let tape = policy.tape();
    let pref_ctx = resolver.resolve(&pair.preferred_ctx)?;
    let dis_ctx = resolver.resolve(&pair.dispreferred_ctx)?;

    let pol_pref = policy.sequence_logprob(&pref_ctx, &pair.preferred_y)?;
    let pol_dis = policy.sequence_logprob(&dis_ctx, &pair.dispreferred_y)?;
    let ref_pref = sequence_logprob_value(reference, &pref_ctx, &pair.preferred_y)?;
    let ref_dis = sequence_logprob_value(reference, &dis_ctx, &pair.dispreferred_y)?;

    let pref_ratio = tape.sub(&pol_pref, &Tensor::scalar(ref_pref))?;
    let dis_ratio = tape.sub(&pol_dis, &Tensor::scalar(ref_dis))?;
    let z = tape.scale(&tape.sub(&pref_ratio, &dis_ratio)?, beta);
    Ok(tape.scale(&tape.log_sigmoid(&z)?, -1.0))
}

/// Untracked preference margin `z` for a pair; positive means satisfied.
pub fn dpo_margin(
    policy: &ModelParams,
    reference: &ModelParams,
    pair: &PreferencePair,
    beta: f64,
    resolver: &ContextResolver<'_>,
) -> Result<f64> {
    let pref_ctx = resolver.resolve(&pair.preferred_ctx)?;
    let dis_ctx = resolver.resolve(&pair.dispreferred_ctx)?;
    let pol_pref = sequence_logprob_value(policy, &pref_ctx, &pair.preferred_y)?;
    let pol_dis = sequence_logprob_value(policy, &dis_ctx, &pair.dispreferred_y)?;
    let ref_pref = sequence_logprob_value(reference, &pref_ctx, &pair.preferred_y)?;
    let ref_dis = sequence_logprob_value(reference, &dis_ctx, &pair.dispreferred_y)?;
    Ok(beta * ((pol_pref - ref_pref) - (pol_dis - ref_dis)))
}

/// Numerically stable `softplus`; `-log(sigmoid(z)) = softplus(-z)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean per-token negative log-likelihood.
pub fn sft_loss(policy: &BoundModel<'_>, ctx: &Context, y: &[TokenId]) -> Result<Tensor> {
    let lp = policy.sequence_logprob(ctx, y)?;
    Ok(policy.tape().scale(&lp, -1.0 / y.len() as f64))
}

/// First- and second-moment estimates for the trainable blocks.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    moments: Vec<Option<(Tensor, Tensor)>>,
    step: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let moments = crate::model::ALL_BLOCKS
            .into_iter()
            .map(|b| {
                params.is_trainable(b).then(|| {
                    let (r, c) = params.block(b).shape();
                    (Tensor::zeros(r, c), Tensor::zeros(r, c))
                })
            })
            .collect();
        Self { moments, step: 0 }
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// One decoupled-weight-decay update with bias correction. Only blocks
/// present in `grads` move; frozen blocks are untouched by construction.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[(Block, Tensor)],
    state: &mut OptimizerState,
    lr_t: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for (block, grad) in grads {
        if !params.is_trainable(*block) {
            return Err(Error::Config(format!(
                "gradient supplied for frozen block {}",
                block.name()
            )));
        }
        let slot = state.moments[*block as usize]
            .as_mut()
            .expect("trainable block has optimizer state");
        if slot.0.shape() != grad.shape() {
            return Err(Error::Numerical(format!(
                "gradient shape {:?} does not match block {}",
                grad.shape(),
                block.name()
            )));
        }
        let p = params.block_mut(*block);
        for i in 0..grad.rows() * grad.cols() {
            let g = grad.data()[i];
            let m = &mut slot.0.data_mut()[i];
            *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
            let v = &mut slot.1.data_mut()[i];
            *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let w = &mut p.data_mut()[i];
            *w -= lr_t * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * *w);
        }
    }
    Ok(())
}

/// Linear warmup into a cosine decay that reaches zero at `total_steps`.
pub fn cosine_warmup_lr(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.total_steps == 0 {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One pretraining item: caption imitation or a yes/no question.
enum PretrainItem {
    Caption {
        clip: usize,
        head: PromptHead,
    },
    Question {
        clip: usize,
        prompt: [TokenId; 2],
        answer: TokenId,
        video_grounded: bool,
    },
}

impl PretrainItem {
    /// Whether the item's target depends only on what is visible. Such
    /// items get random-audio augmentation so the learned video behavior is
    /// insensitive to the audio token, mirroring how pretrained backbones
    /// keep video skills independent of the (weak) audio pathway.
    fn video_grounded(&self) -> bool {
        match self {
            PretrainItem::Caption { head, .. } => *head == PromptHead::Vis,
            PretrainItem::Question { video_grounded, .. } => *video_grounded,
        }
    }
}

fn caption_target(caps: &CaptionBundle, head: PromptHead) -> &[TokenId] {
    match head {
        PromptHead::Av => &caps.y_av,
        PromptHead::Vis => &caps.y_vis,
        PromptHead::Aud => &caps.y_aud,
    }
}

/// Builds the biased pretraining curriculum: the three caption tasks per
/// clip plus balanced yes/no questions for both modalities.
fn pretrain_items(
    corpus: &[Clip],
    vocab: &EventVocab,
    rng: &mut SplitMix64,
) -> Vec<PretrainItem> {
    let n_evt = vocab.n_audio_events();
    let n_obj = vocab.n_objects();
    let mut items = Vec::with_capacity(corpus.len() * 7);
    for (i, clip) in corpus.iter().enumerate() {
        for head in [PromptHead::Av, PromptHead::Aud, PromptHead::Vis] {
            items.push(PretrainItem::Caption { clip: i, head });
        }

        // Present sound -> yes; absent sound -> no.
        let present = clip.audio_events[rng.index(clip.audio_events.len())];
        items.push(PretrainItem::Question {
            clip: i,
            prompt: [tokens::Q_HEAR, vocab.audio_token(present)],
            answer: tokens::YES,
            video_grounded: false,
        });
        let absent = loop {
            let e = crate::world::AudioEventId(rng.index(n_evt));
            if !clip.audio_events.contains(&e) {
                break e;
            }
        };
        items.push(PretrainItem::Question {
            clip: i,
            prompt: [tokens::Q_HEAR, vocab.audio_token(absent)],
            answer: tokens::NO,
            video_grounded: false,
        });

        let seen = clip.visual_events[rng.index(clip.visual_events.len())];
        items.push(PretrainItem::Question {
            clip: i,
            prompt: [tokens::Q_SEE, vocab.object_token(seen)],
            answer: tokens::YES,
            video_grounded: true,
        });
        let unseen = loop {
            let o = crate::world::ObjectId(rng.index(n_obj));
            if !clip.visual_events.contains(&o) {
                break o;
            }
        };
        items.push(PretrainItem::Question {
            clip: i,
            prompt: [tokens::Q_SEE, vocab.object_token(unseen)],
            answer: tokens::NO,
            video_grounded: true,
        });
    }
    items
}

/// Supervised pretraining of every block except the video projector,
/// deliberately planting the visual shortcut via audio dropping.
pub fn pretrain_biased(
    mut params: ModelParams,
    corpus: &[Clip],
    captions: &[CaptionBundle],
    vocab: &EventVocab,
    n_frames: usize,
    feature_noise_sigma: f64,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<LogRow>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("pretraining needs a nonempty corpus".into()));
    }
    params.set_trainable(&[
        Block::WAudio,
        Block::BAudio,
        Block::Embed,
        Block::WCond,
        Block::BCond,
        Block::WFuse,
        Block::BFuse,
        Block::Head,
    ])?;
    let resolver = ContextResolver::new(corpus, vocab, feature_noise_sigma, 0.0);

    let mut item_rng = SplitMix64::new(derive_seed(cfg.seed, "pretrain-items"));
    let mut items = pretrain_items(corpus, vocab, &mut item_rng);
    item_rng.shuffle(&mut items);
    let mut drop_rng = SplitMix64::new(derive_seed(cfg.seed, "audio-drop"));

    let mut state = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut cursor = 0usize;
    for step in 0..cfg.total_steps {
        let lr_t = cosine_warmup_lr(step, cfg);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut total: Option<Tensor> = None;
        for _ in 0..cfg.batch_size {
            let item = &items[cursor];
            cursor = (cursor + 1) % items.len();
            let (clip_idx, prompt, target): (usize, Vec<TokenId>, Vec<TokenId>) = match item {
                PretrainItem::Caption { clip, head } => (
                    *clip,
                    vec![ContextResolver::prompt_token(*head)],
                    caption_target(&captions[*clip], *head).to_vec(),
                ),
                PretrainItem::Question { clip, prompt, answer, .. } => {
                    (*clip, prompt.to_vec(), vec![*answer, tokens::EOS])
                }
            };
            let mut ctx = resolver.aligned_context(&corpus[clip_idx], n_frames, prompt)?;
            if item.video_grounded() && corpus.len() > 1 && drop_rng.chance(cfg.p_audio_shuffle) {
                // Another clip's audio at a random scale; target stays
                // video-true.
                let mut other = drop_rng.index(corpus.len() - 1);
                if other >= clip_idx {
                    other += 1;
                }
                let scale = drop_rng
                    .uniform(cfg.audio_shuffle_min_scale, cfg.audio_shuffle_max_scale);
                ctx.audio_vector = audio_features(&corpus[other], vocab, feature_noise_sigma)
                    .into_iter()
                    .map(|x| scale * x)
                    .collect();
            } else if drop_rng.chance(cfg.p_audio_drop) {
                ctx.audio_vector = vec![0.0; ctx.audio_vector.len()];
            }
            if cfg.audio_jitter_sigma > 0.0 {
                for v in &mut ctx.audio_vector {
                    *v += cfg.audio_jitter_sigma * drop_rng.normal();
                }
            }
            let loss = sft_loss(&bound, &ctx, &target)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(&acc, &loss)?,
            });
        }
        let mean = tape.scale(&total.expect("batch_size >= 1"), 1.0 / cfg.batch_size as f64);
        let loss_value = mean.value();
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "pretraining loss diverged at step {step}"
            )));
        }
        let grads = tape.backward(&mean)?;
        let block_grads: Vec<(Block, Tensor)> = params
            .trainable_blocks()
            .into_iter()
            .filter_map(|b| bound.grad_of(&grads, b).map(|g| (b, g.detach())))
            .collect();
        adamw_step(&mut params, &block_grads, &mut state, lr_t, cfg)?;
        log.push(LogRow {
            step,
            lr: lr_t,
            loss: loss_value,
            mean_margin: 0.0,
        });
    }
    Ok((params, log))
}

/// Preference training of the audio projector with an explicit pair mix.
/// The reference is a frozen snapshot of the incoming parameters.
pub fn train_preference(
    mut params: ModelParams,
    pools: &PairPools,
    mix: KindMix,
    resolver: &ContextResolver<'_>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<LogRow>)> {
    cfg.validate()?;
    params.set_trainable(&[Block::WAudio, Block::BAudio])?;
    let reference = snapshot_reference(&params);
    if cfg.total_steps == 0 {
        return Ok((params, Vec::new()));
    }
    let mut sampler = BatchSampler::new(
        pools,
        mix,
        cfg.batch_size,
        derive_seed(cfg.seed, "preference-batches"),
    )?;

    let mut state = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let lr_t = cosine_warmup_lr(step, cfg);
        let batch = sampler.next_batch();
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut total: Option<Tensor> = None;
        let mut margin_sum = 0.0;
        for pair in &batch {
            let loss = dpo_loss(&bound, &reference, pair, cfg.beta, resolver)?;
            // loss = softplus(-z), so the margin is recoverable from it; use
            // the untracked value for the log to avoid a second forward.
            margin_sum += margin_from_loss(loss.value());
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(&acc, &loss)?,
            });
        }
        let mean = tape.scale(&total.expect("batch_size >= 1"), 1.0 / cfg.batch_size as f64);
        let loss_value = mean.value();
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "preference loss diverged at step {step}"
            )));
        }
        let grads = tape.backward(&mean)?;
        let block_grads: Vec<(Block, Tensor)> = [Block::WAudio, Block::BAudio]
            .into_iter()
            .filter_map(|b| bound.grad_of(&grads, b).map(|g| (b, g.detach())))
            .collect();
        adamw_step(&mut params, &block_grads, &mut state, lr_t, cfg)?;
        log.push(LogRow {
            step,
            lr: lr_t,
            loss: loss_value,
            mean_margin: margin_sum / cfg.batch_size as f64,
        });
    }
    Ok((params, log))
}

/// Inverse of `loss = softplus(-z)`, clamped away from `loss = 0`.
fn margin_from_loss(loss: f64) -> f64 {
    // softplus(-z) = loss  =>  z = -ln(e^loss - 1) ... unstable for tiny
    // losses; equivalent stable form below.
    let l = loss.max(1e-300);
    -((l.exp_m1()).ln())
}

/// Phase-driven preference training (mix chosen by the phase).
pub fn train_acpo(
    params: ModelParams,
    pools: &PairPools,
    resolver: &ContextResolver<'_>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<LogRow>)> {
    let mix = cfg.phase.kind_mix(
        cfg.mix_audio_contrastive,
        cfg.mix_attribution_fraction,
        cfg.mix_text_fraction,
    )?;
    train_preference(params, pools, mix, resolver, cfg)
}

/// Cross-entropy baseline over aligned joint captions, trained on the same
/// blocks as the preference phases.
pub fn train_sft_baseline(
    mut params: ModelParams,
    corpus: &[Clip],
    captions: &[CaptionBundle],
    resolver: &ContextResolver<'_>,
    n_frames: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<LogRow>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("sft baseline needs a nonempty corpus".into()));
    }
    params.set_trainable(&[Block::WAudio, Block::BAudio])?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, "sft-items"));
    rng.shuffle(&mut order);

    let mut state = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut cursor = 0usize;
    for step in 0..cfg.total_steps {
        let lr_t = cosine_warmup_lr(step, cfg);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut total: Option<Tensor> = None;
        for _ in 0..cfg.batch_size {
            let clip_idx = order[cursor];
            cursor = (cursor + 1) % order.len();
            let ctx = resolver.aligned_context(
                &corpus[clip_idx],
                n_frames,
                vec![tokens::PROMPT_AV],
            )?;
            let loss = sft_loss(&bound, &ctx, &captions[clip_idx].y_av)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(&acc, &loss)?,
            });
        }
        let mean = tape.scale(&total.expect("batch_size >= 1"), 1.0 / cfg.batch_size as f64);
        let loss_value = mean.value();
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!("sft loss diverged at step {step}")));
        }
        let grads = tape.backward(&mean)?;
        let block_grads: Vec<(Block, Tensor)> = [Block::WAudio, Block::BAudio]
            .into_iter()
            .filter_map(|b| bound.grad_of(&grads, b).map(|g| (b, g.detach())))
            .collect();
        adamw_step(&mut params, &block_grads, &mut state, lr_t, cfg)?;
        log.push(LogRow {
            step,
            lr: lr_t,
            loss: loss_value,
            mean_margin: 0.0,
        });
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check::{max_grad_mismatch, numerical_grad};
    use crate::model::ModelConfig;
    use crate::pairs::{
        build_attribution_pairs, build_noise_pairs, build_sensitivity_pairs, build_text_pairs_with_frames,
        tier_swaps, TierChoice, TierConfig,
    };
    use crate::world::{generate_corpus, render_captions};

    const LN_2: f64 = std::f64::consts::LN_2;

    struct Fixture {
        vocab: EventVocab,
        corpus: Vec<Clip>,
        captions: Vec<CaptionBundle>,
        pools: PairPools,
    }

    fn fixture(n: usize, p_co: f64, seed: u64) -> Fixture {
        let vocab = EventVocab::default_vocab(16, p_co, 7).unwrap();
        let corpus = generate_corpus(&vocab, n, p_co, seed).unwrap();
        let captions: Vec<CaptionBundle> =
            corpus.iter().map(|c| render_captions(c, &vocab)).collect();
        let tiers = tier_swaps(&corpus, &vocab, &TierConfig::default()).unwrap();
        let mut pairs =
            build_attribution_pairs(&corpus, &captions, &tiers, TierChoice::Low, 4, 1).unwrap();
        pairs.extend(
            build_sensitivity_pairs(&corpus, &captions, &tiers, TierChoice::High, 4, 2).unwrap(),
        );
        pairs.extend(build_noise_pairs(&corpus, &captions, 1.0, 0.05, 4).unwrap());
        pairs.extend(build_text_pairs_with_frames(&corpus, &captions, 4).unwrap());
        Fixture {
            vocab,
            corpus,
            captions,
            pools: PairPools::from_pairs(pairs),
        }
    }

    fn model(seed: u64) -> ModelParams {
        ModelParams::init(ModelConfig {
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn dpo_loss_is_ln2_when_policy_equals_reference() {
        let fx = fixture(24, 0.9, 3);
        let params = model(5);
        let reference = snapshot_reference(&params);
        let resolver = ContextResolver::new(&fx.corpus, &fx.vocab, 0.05, 1.0);
        for kind in crate::pairs::ALL_KINDS {
            let pair = &fx.pools.of_kind(kind)[0];
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let loss = dpo_loss(&bound, &reference, pair, 0.1, &resolver).unwrap();
            assert!(
                (loss.value() - LN_2).abs() < 1e-9,
                "{}: loss {}",
                kind.name(),
                loss.value()
            );
        }
    }

    #[test]
    fn dpo_loss_matches_softplus_of_margin() {
        // Anchors: sigmoid(ln 3) = 3/4 so softplus(-ln 3) = ln(4/3).
        assert!((softplus(-(3.0f64.ln())) - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(((4.0f64 / 3.0).ln() - 0.287682).abs() < 1e-6);

        let fx = fixture(24, 0.9, 4);
        let mut policy = model(6);
        policy.set_trainable(&[Block::WAudio, Block::BAudio]).unwrap();
        let reference = model(7); // different weights => nonzero margins
        let resolver = ContextResolver::new(&fx.corpus, &fx.vocab, 0.05, 1.0);
        for kind in crate::pairs::ALL_KINDS {
            let pair = &fx.pools.of_kind(kind)[0];
            let tape = Tape::new();
            let bound = policy.bind(&tape);
            let loss = dpo_loss(&bound, &reference, pair, 0.1, &resolver).unwrap().value();
            let z = dpo_margin(&policy, &reference, pair, 0.1, &resolver).unwrap();
            assert!((loss - softplus(-z)).abs() < 1e-12);
            assert!((margin_from_loss(loss) - z).abs() < 1e-9);
        }
    }

    #[test]
    fn dpo_loss_is_monotone_in_margin() {
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let z = -10.0 + 0.1 * i as f64;
            let loss = softplus(-z);
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        let fx = fixture(16, 0.9, 8);
        let resolver = ContextResolver::new(&fx.corpus, &fx.vocab, 0.05, 1.0);
        let mut rng = SplitMix64::new(9);
        let all: Vec<&PreferencePair> = fx.pools.iter_all().collect();
        for trial in 0..10 {
            let mut policy = model(100 + trial);
            policy.set_trainable(&[Block::WAudio, Block::BAudio]).unwrap();
            let reference = model(200 + trial);
            let pair = all[rng.index(all.len())];

            let tape = Tape::new();
            let bound = policy.bind(&tape);
            let loss = dpo_loss(&bound, &reference, pair, 0.1, &resolver).unwrap();
            let grads = tape.backward(&loss).unwrap();
            let analytic = bound.grad_of(&grads, Block::WAudio).unwrap();

            let numeric = numerical_grad(
                policy.block(Block::WAudio),
                |t| {
                    let mut probe = policy.clone();
                    probe.set_block(Block::WAudio, t.detach()).unwrap();
                    let z = dpo_margin(&probe, &reference, pair, 0.1, &resolver).unwrap();
                    softplus(-z)
                },
                1e-5,
            );
            assert!(
                max_grad_mismatch(analytic, &numeric, 1e-4).is_none(),
                "trial {trial} ({})",
                pair.kind.name()
            );
        }
    }

    #[test]
    fn batch_mean_gradient_is_mean_of_pair_gradients() {
        let fx = fixture(16, 0.9, 10);
        let resolver = ContextResolver::new(&fx.corpus, &fx.vocab, 0.05, 1.0);
        let mut policy = model(11);
        policy.set_trainable(&[Block::WAudio, Block::BAudio]).unwrap();
        let reference = snapshot_reference(&model(12));
        let batch: Vec<&PreferencePair> = fx.pools.iter_all().take(4).collect();

        let tape = Tape::new();
        let bound = policy.bind(&tape);
        let mut total: Option<Tensor> = None;
        for pair in &batch {
            let loss = dpo_loss(&bound, &reference, pair, 0.1, &resolver).unwrap();
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(&acc, &loss).unwrap(),
            });
        }
        let mean = tape.scale(&total.unwrap(), 1.0 / batch.len() as f64);
        let grads = tape.backward(&mean).unwrap();
        let batch_grad = bound.grad_of(&grads, Block::WAudio).unwrap();

        let mut acc = Tensor::zeros(batch_grad.rows(), batch_grad.cols());
        for pair in &batch {
            let tape = Tape::new();
            let bound = policy.bind(&tape);
            let loss = dpo_loss(&bound, &reference, pair, 0.1, &resolver).unwrap();
            let grads = tape.backward(&loss).unwrap();
            let g = bound.grad_of(&grads, Block::WAudio).unwrap();
            for i in 0..acc.rows() * acc.cols() {
                acc.data_mut()[i] += g.data()[i] / batch.len() as f64;
            }
        }
        for (a, b) in batch_grad.iter().zip(acc.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sft_loss_uniform_head_and_nonnegative() {
        let fx = fixture(8, 0.9, 13);
        let resolver = ContextResolver::new(&fx.corpus, &fx.vocab, 0.05, 1.0);
        let cfg = ModelConfig::default();
        let mut params = model(14);
        params
            .set_block(Block::Head, Tensor::zeros(cfg.vocab_size, cfg.d_model))
            .unwrap();
        let ctx = resolver
            .aligned_context(&fx.corpus[0], 4, vec![tokens::PROMPT_AV])
            .unwrap();
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let loss = sft_loss(&bound, &ctx, &fx.captions[0].y_av).unwrap().value();
        assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-9);

        let params = model(15);
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        for i in 0..fx.corpus.len() {
            let ctx = resolver
                .aligned_context(&fx.corpus[i], 4, vec![tokens::PROMPT_AV])
                .unwrap();
            assert!(sft_loss(&bound, &ctx, &fx.captions[i].y_av).unwrap().value() >= 0.0);
        }
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut params = model(16);
        params.set_trainable(&[Block::WAudio, Block::BAudio]).unwrap();
        let shape = params.block(Block::BAudio).shape();
        let mut target = Tensor::zeros(shape.0, shape.1);
        target.data_mut()[0] = 1.0;
        params.set_block(Block::BAudio, target).unwrap();

        let mut grad = Tensor::zeros(shape.0, shape.1);
        grad.data_mut()[0] = 1.0;
        let mut state = OptimizerState::new(&params);
        adamw_step(&mut params, &[(Block::BAudio, grad)], &mut state, 0.1, &cfg).unwrap();
        let updated = params.block(Block::BAudio).data()[0];
        assert!((updated - 0.9).abs() < 1e-7, "got {updated}");
    }

    #[test]
    fn adamw_decoupled_decay_only() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut params = model(17);
        params.set_trainable(&[Block::BAudio]).unwrap();
        let shape = params.block(Block::BAudio).shape();
        let mut one = Tensor::zeros(shape.0, shape.1);
        one.data_mut()[0] = 1.0;
        params.set_block(Block::BAudio, one).unwrap();

        let grad = Tensor::zeros(shape.0, shape.1);
        let mut state = OptimizerState::new(&params);
        adamw_step(&mut params, &[(Block::BAudio, grad)], &mut state, 0.1, &cfg).unwrap();
        assert!((params.block(Block::BAudio).data()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn adamw_rejects_frozen_block_gradients() {
        let cfg = TrainConfig::default();
        let mut params = model(18);
        params.set_trainable(&[Block::WAudio]).unwrap();
        let shape = params.block(Block::Head).shape();
        let mut state = OptimizerState::new(&params);
        let err = adamw_step(
            &mut params,
            &[(Block::Head, Tensor::zeros(shape.0, shape.1))],
            &mut state,
            0.1,
            &cfg,
        );
        assert!(err.is_err());
    }

    #[test]
    fn schedule_hits_the_anchors() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 100,
            total_steps: 500,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_warmup_lr(0, &cfg), 0.0);
        assert!((cosine_warmup_lr(50, &cfg) - 0.5).abs() < 1e-12);
        assert!((cosine_warmup_lr(100, &cfg) - 1.0).abs() < 1e-12);
        // Cosine midpoint: warmup + span/2 = 300.
        assert!((cosine_warmup_lr(300, &cfg) - 0.5).abs() < 1e-12);
        assert!(cosine_warmup_lr(500, &cfg).abs() < 1e-12);
        // Nonnegative and continuous at the boundary.
        let mut prev = 0.0;
        for step in 0..=500 {
            let lr = cosine_warmup_lr(step, &cfg);
            assert!(lr >= -1e-15);
            if step > 0 {
                assert!((lr - prev).abs() < 0.02, "jump at step {step}");
            }
            prev = lr;
        }
    }

    #[test]
    fn zero_step_preference_run_is_identity() {
        let fx = fixture(16, 0.9, 19);
        let resolver = ContextResolver::new(&fx.corpus, &fx.vocab, 0.05, 1.0);
        let params = model(20);
        let before: Vec<Vec<f64>> = crate::model::ALL_BLOCKS
            .iter()
            .map(|&b| params.block(b).data().to_vec())
            .collect();
        let cfg = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let (after, log) = train_acpo(params, &fx.pools, &resolver, &cfg).unwrap();
        assert!(log.is_empty());
        for (b, want) in crate::model::ALL_BLOCKS.iter().zip(&before) {
            assert_eq!(after.block(*b).data(), want.as_slice());
        }
    }

    #[test]
    fn preference_training_freezes_everything_but_the_projector() {
        let fx = fixture(32, 0.9, 21);
        let resolver = ContextResolver::new(&fx.corpus, &fx.vocab, 0.05, 1.0);
        let params = model(22);
        let before: Vec<Vec<f64>> = crate::model::ALL_BLOCKS
            .iter()
            .map(|&b| params.block(b).data().to_vec())
            .collect();
        let cfg = TrainConfig {
            total_steps: 12,
            warmup_steps: 2,
            seed: 1,
            ..TrainConfig::default()
        };
        let (after, log) = train_acpo(params, &fx.pools, &resolver, &cfg).unwrap();
        assert_eq!(log.len(), 12);
        for (b, want) in crate::model::ALL_BLOCKS.iter().zip(&before) {
            let same = after.block(*b).data() == want.as_slice();
            let should_move = matches!(b, Block::WAudio | Block::BAudio);
            assert_eq!(same, !should_move, "block {}", b.name());
        }
    }

    #[test]
    fn pretrain_initial_loss_is_uniform_with_zero_head() {
        let fx = fixture(12, 0.9, 23);
        let cfg_model = ModelConfig::default();
        let mut params = model(24);
        params
            .set_block(Block::Head, Tensor::zeros(cfg_model.vocab_size, cfg_model.d_model))
            .unwrap();
        let cfg = TrainConfig {
            total_steps: 1,
            warmup_steps: 0,
            phase: Phase::Pretrain,
            ..TrainConfig::default()
        };
        let (_, log) =
            pretrain_biased(params, &fx.corpus, &fx.captions, &fx.vocab, 4, 0.05, &cfg).unwrap();
        assert!((log[0].loss - (cfg_model.vocab_size as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn pretrain_loss_decreases_on_tiny_corpus() {
        let fx = fixture(4, 0.9, 25);
        let one_clip = vec![fx.corpus[0].clone()];
        let one_caption = vec![fx.captions[0].clone()];
        let cfg = TrainConfig {
            total_steps: 200,
            warmup_steps: 10,
            lr: 3e-3,
            phase: Phase::Pretrain,
            ..TrainConfig::default()
        };
        let (_, log) =
            pretrain_biased(model(26), &one_clip, &one_caption, &fx.vocab, 2, 0.0, &cfg).unwrap();
        let early: f64 = log[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let late: f64 = log[180..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(late < early * 0.5, "early {early}, late {late}");
    }

    #[test]
    fn pretrain_is_deterministic() {
        let fx = fixture(10, 0.9, 27);
        let cfg = TrainConfig {
            total_steps: 8,
            warmup_steps: 2,
            phase: Phase::Pretrain,
            ..TrainConfig::default()
        };
        let run = || {
            let (p, _) =
                pretrain_biased(model(28), &fx.corpus, &fx.captions, &fx.vocab, 4, 0.05, &cfg)
                    .unwrap();
            crate::model::ALL_BLOCKS
                .iter()
                .flat_map(|&b| p.block(b).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn corrupted_audio_moves_far_from_clean() {
        let fx = fixture(100, 0.9, 29);
        let resolver = ContextResolver::new(&fx.corpus, &fx.vocab, 0.05, 1.0);
        for clip in fx.corpus.iter().take(100) {
            let clean = resolver
                .resolve(&ContextSpec::aligned(&clip.id, 1, PromptHead::Av))
                .unwrap();
            let corrupted = resolver
                .resolve(&ContextSpec {
                    noise_tag: NoiseTag::AudioNoised,
                    ..ContextSpec::aligned(&clip.id, 1, PromptHead::Av)
                })
                .unwrap();
            let dist: f64 = clean
                .audio_vector
                .iter()
                .zip(&corrupted.audio_vector)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist > 0.5, "clip {} moved only {dist}", clip.id);
            assert_eq!(clean.video_tokens, corrupted.video_tokens);
        }
    }

    #[test]
    fn unknown_clip_id_is_a_data_error() {
        let fx = fixture(8, 0.9, 30);
        let resolver = ContextResolver::new(&fx.corpus, &fx.vocab, 0.05, 1.0);
        let spec = ContextSpec::aligned("clip_99999", 4, PromptHead::Av);
        assert!(matches!(resolver.resolve(&spec), Err(Error::Data(_))));
    }
}
