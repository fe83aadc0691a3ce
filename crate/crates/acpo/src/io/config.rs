//! Run configuration: flat `section.key=value` files with strict parsing.
//!
//! Every stage derives its seed from the master seed and the stage name, so
//! no two stages share a raw seed and the whole pipeline is a pure function
//! of (config, master seed).

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pairs::{TierChoice, TierConfig};
use crate::rng::derive_seed;
use crate::train::{Phase, TrainConfig};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSection {
    pub n_clips: usize,
    pub p_co: f64,
    pub noise_sigma: f64,
    pub n_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairsSection {
    /// Frame count for preference-pair contexts (training happens in the
    /// high-frame regime where the audio token is most diluted).
    pub n_frames: usize,
    pub noise_sigma_corrupt: f64,
    pub attribution_tier: TierChoice,
    pub sensitivity_tier: TierChoice,
    /// Attribution share of the audio-contrastive batch mass.
    pub attribution_fraction: f64,
    /// Text share of the remaining (noise + text) batch mass.
    pub text_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSection {
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub p_audio_drop: f64,
    pub p_audio_shuffle: f64,
    pub audio_shuffle_min_scale: f64,
    pub audio_shuffle_max_scale: f64,
    pub audio_jitter_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub beta: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub mix_audio_contrastive: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub qa_items: usize,
    /// Frame count for held-out QA and captioning; evaluation happens in the
    /// high-frame regime where visual dominance bites hardest.
    pub n_frames: usize,
    pub caption_clips: usize,
    pub holdout_clips: usize,
    pub frames_sweep: Vec<usize>,
}

/// The full run configuration with the documented defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub world: WorldSection,
    pub tiers: TierConfig,
    pub pairs: PairsSection,
    pub pretrain: StageSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 45,
            model: ModelConfig {
                d_audio: 16,
                d_video: 16,
                d_model: 32,
                vocab_size: 64,
                max_len: 24,
                seed: 0, // derived; see model_config()
            },
            world: WorldSection {
                n_clips: 1000,
                p_co: 0.9,
                noise_sigma: 0.05,
                n_frames: 4,
            },
            tiers: TierConfig::default(),
            pairs: PairsSection {
                n_frames: 3,
                noise_sigma_corrupt: 1.0,
                attribution_tier: TierChoice::Low,
                sensitivity_tier: TierChoice::High,
                attribution_fraction: 0.333,
                text_fraction: 0.125,
            },
            pretrain: StageSection {
                steps: 20_000,
                lr: 3e-3,
                warmup_steps: 50,
                batch_size: 8,
                p_audio_drop: 0.3,
                p_audio_shuffle: 0.5,
                audio_shuffle_min_scale: 1.0,
                audio_shuffle_max_scale: 1.0,
                audio_jitter_sigma: 0.0,
            },
            train: TrainSection {
                beta: 0.1,
                lr: 1e-2,
                warmup_steps: 50,
                total_steps: 625,
                batch_size: 8,
                weight_decay: 0.01,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                mix_audio_contrastive: 0.6,
            },
            eval: EvalSection {
                qa_items: 200,
                n_frames: 8,
                caption_clips: 100,
                holdout_clips: 200,
                frames_sweep: vec![1, 2, 4, 8],
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse value {value:?} for key {key}")))
}

impl RunConfig {
    /// Parses a config file over the defaults. Unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_strict(&text)
    }

    pub fn from_str_strict(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "model.d_audio" => self.model.d_audio = parse_num(key, value)?,
            "model.d_video" => self.model.d_video = parse_num(key, value)?,
            "model.d_model" => self.model.d_model = parse_num(key, value)?,
            "model.vocab_size" => self.model.vocab_size = parse_num(key, value)?,
            "model.max_len" => self.model.max_len = parse_num(key, value)?,
            "world.n_clips" => self.world.n_clips = parse_num(key, value)?,
            "world.p_co" => self.world.p_co = parse_num(key, value)?,
            "world.noise_sigma" => self.world.noise_sigma = parse_num(key, value)?,
            "world.n_frames" => self.world.n_frames = parse_num(key, value)?,
            "tiers.low_quantile" => self.tiers.low_quantile = parse_num(key, value)?,
            "tiers.high_quantile" => self.tiers.high_quantile = parse_num(key, value)?,
            "pairs.n_frames" => self.pairs.n_frames = parse_num(key, value)?,
            "pairs.noise_sigma_corrupt" => {
                self.pairs.noise_sigma_corrupt = parse_num(key, value)?
            }
            "pairs.attribution_tier" => {
                self.pairs.attribution_tier = TierChoice::from_name(value).ok_or_else(|| {
                    Error::Config(format!("unknown tier {value:?} for {key}"))
                })?
            }
            "pairs.sensitivity_tier" => {
                self.pairs.sensitivity_tier = TierChoice::from_name(value).ok_or_else(|| {
                    Error::Config(format!("unknown tier {value:?} for {key}"))
                })?
            }
            "pairs.attribution_fraction" => {
                self.pairs.attribution_fraction = parse_num(key, value)?
            }
            "pairs.text_fraction" => self.pairs.text_fraction = parse_num(key, value)?,
            "pretrain.steps" => self.pretrain.steps = parse_num(key, value)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, value)?,
            "pretrain.warmup_steps" => self.pretrain.warmup_steps = parse_num(key, value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_num(key, value)?,
            "pretrain.p_audio_drop" => self.pretrain.p_audio_drop = parse_num(key, value)?,
            "pretrain.p_audio_shuffle" => {
                self.pretrain.p_audio_shuffle = parse_num(key, value)?
            }
            "pretrain.audio_shuffle_min_scale" => {
                self.pretrain.audio_shuffle_min_scale = parse_num(key, value)?
            }
            "pretrain.audio_shuffle_max_scale" => {
                self.pretrain.audio_shuffle_max_scale = parse_num(key, value)?
            }
            "pretrain.audio_jitter_sigma" => {
                self.pretrain.audio_jitter_sigma = parse_num(key, value)?
            }
            "train.beta" => self.train.beta = parse_num(key, value)?,
            "train.lr" => self.train.lr = parse_num(key, value)?,
            "train.warmup_steps" => self.train.warmup_steps = parse_num(key, value)?,
            "train.total_steps" => self.train.total_steps = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "train.adam_beta1" => self.train.adam_beta1 = parse_num(key, value)?,
            "train.adam_beta2" => self.train.adam_beta2 = parse_num(key, value)?,
            "train.adam_eps" => self.train.adam_eps = parse_num(key, value)?,
            "train.mix_audio_contrastive" => {
                self.train.mix_audio_contrastive = parse_num(key, value)?
            }
            "eval.qa_items" => self.eval.qa_items = parse_num(key, value)?,
            "eval.n_frames" => self.eval.n_frames = parse_num(key, value)?,
            "eval.caption_clips" => self.eval.caption_clips = parse_num(key, value)?,
            "eval.holdout_clips" => self.eval.holdout_clips = parse_num(key, value)?,
            "eval.frames_sweep" => {
                let mut frames = Vec::new();
                for part in value.split(',') {
                    frames.push(parse_num(key, part.trim())?);
                }
                self.eval.frames_sweep = frames;
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tiers.validate()?;
        if self.world.n_clips == 0 {
            return Err(Error::Config("world.n_clips must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.world.p_co) {
            return Err(Error::Config(format!(
                "world.p_co {} outside [0, 1]",
                self.world.p_co
            )));
        }
        if self.world.n_frames == 0 || self.world.n_frames > crate::model::MAX_FRAMES {
            return Err(Error::Config(format!(
                "world.n_frames {} outside 1..={}",
                self.world.n_frames,
                crate::model::MAX_FRAMES
            )));
        }
        if self.pairs.n_frames == 0 || self.pairs.n_frames > crate::model::MAX_FRAMES {
            return Err(Error::Config(format!(
                "pairs.n_frames {} outside 1..={}",
                self.pairs.n_frames,
                crate::model::MAX_FRAMES
            )));
        }
        if self.eval.holdout_clips >= self.world.n_clips {
            return Err(Error::Config(format!(
                "eval.holdout_clips {} must be below world.n_clips {}",
                self.eval.holdout_clips, self.world.n_clips
            )));
        }
        if self.eval.caption_clips > self.eval.holdout_clips {
            return Err(Error::Config(format!(
                "eval.caption_clips {} exceeds eval.holdout_clips {}",
                self.eval.caption_clips, self.eval.holdout_clips
            )));
        }
        if self.eval.frames_sweep.is_empty() {
            return Err(Error::Config("eval.frames_sweep must be nonempty".into()));
        }
        if self.eval.n_frames == 0 || self.eval.n_frames > crate::model::MAX_FRAMES {
            return Err(Error::Config(format!(
                "eval.n_frames {} outside 1..={}",
                self.eval.n_frames,
                crate::model::MAX_FRAMES
            )));
        }
        if self.pairs.sensitivity_tier == TierChoice::NoSwap {
            return Err(Error::Config(
                "pairs.sensitivity_tier cannot be noswap".into(),
            ));
        }
        self.train_config(Phase::Acpo)?.validate()?;
        self.pretrain_config()?.validate()?;
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Model configuration with its derived initialization seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.stage_seed("model-init"),
            ..self.model
        }
    }

    pub fn pretrain_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            beta: self.train.beta,
            lr: self.pretrain.lr,
            warmup_steps: self.pretrain.warmup_steps,
            total_steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            weight_decay: self.train.weight_decay,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            adam_eps: self.train.adam_eps,
            seed: self.stage_seed("pretrain"),
            phase: Phase::Pretrain,
            mix_audio_contrastive: self.train.mix_audio_contrastive,
            mix_attribution_fraction: self.pairs.attribution_fraction,
            mix_text_fraction: self.pairs.text_fraction,
            p_audio_drop: self.pretrain.p_audio_drop,
            p_audio_shuffle: self.pretrain.p_audio_shuffle,
            audio_shuffle_min_scale: self.pretrain.audio_shuffle_min_scale,
            audio_shuffle_max_scale: self.pretrain.audio_shuffle_max_scale,
            audio_jitter_sigma: self.pretrain.audio_jitter_sigma,
        })
    }

    pub fn train_config(&self, phase: Phase) -> Result<TrainConfig> {
        if phase == Phase::Pretrain {
            return self.pretrain_config();
        }
        Ok(TrainConfig {
            beta: self.train.beta,
            lr: self.train.lr,
            warmup_steps: self.train.warmup_steps,
            total_steps: self.train.total_steps,
            batch_size: self.train.batch_size,
            weight_decay: self.train.weight_decay,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            adam_eps: self.train.adam_eps,
            seed: self.stage_seed(&format!("train:{}", phase.name())),
            phase,
            mix_audio_contrastive: self.train.mix_audio_contrastive,
            mix_attribution_fraction: self.pairs.attribution_fraction,
            mix_text_fraction: self.pairs.text_fraction,
            p_audio_drop: self.pretrain.p_audio_drop,
            p_audio_shuffle: self.pretrain.p_audio_shuffle,
            audio_shuffle_min_scale: self.pretrain.audio_shuffle_min_scale,
            audio_shuffle_max_scale: self.pretrain.audio_shuffle_max_scale,
            audio_jitter_sigma: self.pretrain.audio_jitter_sigma,
        })
    }

    /// Canonical text form; parsing it back reproduces the config.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("seed", self.seed.to_string());
        push("model.d_audio", self.model.d_audio.to_string());
        push("model.d_video", self.model.d_video.to_string());
        push("model.d_model", self.model.d_model.to_string());
        push("model.vocab_size", self.model.vocab_size.to_string());
        push("model.max_len", self.model.max_len.to_string());
        push("world.n_clips", self.world.n_clips.to_string());
        push("world.p_co", fmt_f64(self.world.p_co));
        push("world.noise_sigma", fmt_f64(self.world.noise_sigma));
        push("world.n_frames", self.world.n_frames.to_string());
        push("tiers.low_quantile", fmt_f64(self.tiers.low_quantile));
        push("tiers.high_quantile", fmt_f64(self.tiers.high_quantile));
        push("pairs.n_frames", self.pairs.n_frames.to_string());
        push(
            "pairs.noise_sigma_corrupt",
            fmt_f64(self.pairs.noise_sigma_corrupt),
        );
        push(
            "pairs.attribution_tier",
            self.pairs.attribution_tier.name().to_string(),
        );
        push(
            "pairs.sensitivity_tier",
            self.pairs.sensitivity_tier.name().to_string(),
        );
        push(
            "pairs.attribution_fraction",
            fmt_f64(self.pairs.attribution_fraction),
        );
        push("pairs.text_fraction", fmt_f64(self.pairs.text_fraction));
        push("pretrain.steps", self.pretrain.steps.to_string());
        push("pretrain.lr", fmt_f64(self.pretrain.lr));
        push("pretrain.warmup_steps", self.pretrain.warmup_steps.to_string());
        push("pretrain.batch_size", self.pretrain.batch_size.to_string());
        push("pretrain.p_audio_drop", fmt_f64(self.pretrain.p_audio_drop));
        push("pretrain.p_audio_shuffle", fmt_f64(self.pretrain.p_audio_shuffle));
        push(
            "pretrain.audio_shuffle_min_scale",
            fmt_f64(self.pretrain.audio_shuffle_min_scale),
        );
        push(
            "pretrain.audio_shuffle_max_scale",
            fmt_f64(self.pretrain.audio_shuffle_max_scale),
        );
        push(
            "pretrain.audio_jitter_sigma",
            fmt_f64(self.pretrain.audio_jitter_sigma),
        );
        push("train.beta", fmt_f64(self.train.beta));
        push("train.lr", fmt_f64(self.train.lr));
        push("train.warmup_steps", self.train.warmup_steps.to_string());
        push("train.total_steps", self.train.total_steps.to_string());
        push("train.batch_size", self.train.batch_size.to_string());
        push("train.weight_decay", fmt_f64(self.train.weight_decay));
        push("train.adam_beta1", fmt_f64(self.train.adam_beta1));
        push("train.adam_beta2", fmt_f64(self.train.adam_beta2));
        push("train.adam_eps", fmt_f64(self.train.adam_eps));
        push(
            "train.mix_audio_contrastive",
            fmt_f64(self.train.mix_audio_contrastive),
        );
        push("eval.qa_items", self.eval.qa_items.to_string());
        push("eval.n_frames", self.eval.n_frames.to_string());
        push("eval.caption_clips", self.eval.caption_clips.to_string());
        push("eval.holdout_clips", self.eval.holdout_clips.to_string());
        push(
            "eval.frames_sweep",
            self.eval
                .frames_sweep
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        out
    }
}

/// Shortest round-trip decimal form, locale-independent.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}
