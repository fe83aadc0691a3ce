//! Stage orchestration: generate, curate, train, evaluate, ablate, sweep.
//!
//! Stages communicate only through files in the output directory, and every
//! stage is a pure function of (config, master seed), so re-running any
//! prefix of the pipeline reproduces its artifacts byte for byte. The last
//! `eval.holdout_clips` clips of the corpus are reserved for evaluation;
//! no training stage reads them.

use crate::error::{Error, Result};
use crate::eval::{
    build_audio_halluc_qa, captioning_eval, dominance_sweep, pref_satisfaction, score_qa,
    EvalReport, QaPrediction,
};
use crate::io::artifacts::{self, AblationRow};
use crate::io::checkpoint;
use crate::io::config::RunConfig;
use crate::model::ModelParams;
use crate::pairs::{
    build_attribution_pairs, build_noise_pairs, build_sensitivity_pairs,
    build_text_pairs_with_frames, tier_swaps, KindMix, PairKind, PairPools, PreferencePair,
    TierMap,
};
use crate::train::{
    pretrain_biased, train_preference, train_sft_baseline, ContextResolver, Phase,
};
use crate::world::{generate_corpus, render_captions, CaptionBundle, Clip, EventVocab};
use std::path::{Path, PathBuf};

/// File layout inside one output directory.
#[derive(Clone, Debug)]
pub struct OutPaths {
    dir: PathBuf,
}

impl OutPaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.txt")
    }

    pub fn captions(&self) -> PathBuf {
        self.dir.join("captions.txt")
    }

    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }

    pub fn pairs(&self) -> PathBuf {
        self.dir.join("pairs.txt")
    }

    pub fn tier_report(&self) -> PathBuf {
        self.dir.join("tier_report.csv")
    }

    pub fn checkpoint(&self, phase: Phase) -> PathBuf {
        self.dir.join(format!("checkpoint_{}.bin", phase.name()))
    }

    pub fn train_log(&self, phase: Phase) -> PathBuf {
        self.dir.join(format!("train_log_{}.csv", phase.name()))
    }

    pub fn eval_report(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("eval_report_{tag}.csv"))
    }

    pub fn summary(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("summary_{tag}.txt"))
    }

    pub fn qa_predictions(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("qa_predictions_{tag}.csv"))
    }

    pub fn ablation(&self) -> PathBuf {
        self.dir.join("ablation.csv")
    }

    pub fn sweep(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("sweep_{tag}.csv"))
    }
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(Error::Config(format!(
                "output {} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

/// Checkpoint tag used in eval/sweep output names.
pub fn checkpoint_tag(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string());
    stem.strip_prefix("checkpoint_").unwrap_or(&stem).to_string()
}

/// The event vocabulary is a pure function of the config.
pub fn build_vocab(cfg: &RunConfig) -> Result<EventVocab> {
    if cfg.model.d_audio != cfg.model.d_video {
        return Err(Error::Config(format!(
            "event embeddings feed both modalities, so model.d_audio ({}) must equal model.d_video ({})",
            cfg.model.d_audio, cfg.model.d_video
        )));
    }
    let vocab = EventVocab::default_vocab(cfg.model.d_audio, cfg.world.p_co, cfg.stage_seed("vocab"))?;
    if cfg.model.vocab_size < vocab.min_vocab_size() {
        return Err(Error::Config(format!(
            "model.vocab_size {} cannot hold {} event tokens",
            cfg.model.vocab_size,
            vocab.min_vocab_size()
        )));
    }
    Ok(vocab)
}

fn load_world(cfg: &RunConfig, paths: &OutPaths) -> Result<(EventVocab, Vec<Clip>, Vec<CaptionBundle>)> {
    let vocab = build_vocab(cfg)?;
    let corpus = artifacts::read_corpus(&paths.corpus())?;
    let captions = artifacts::read_captions(&paths.captions(), &corpus)?;
    Ok((vocab, corpus, captions))
}

/// Training clips come first; the holdout is the corpus tail.
pub fn split_holdout<'a, T>(items: &'a [T], cfg: &RunConfig) -> (&'a [T], &'a [T]) {
    let cut = items.len().saturating_sub(cfg.eval.holdout_clips);
    items.split_at(cut)
}

pub fn run_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let paths = OutPaths::new(out);
    refuse_existing(&[paths.corpus(), paths.captions(), paths.vocab()], force)?;
    std::fs::create_dir_all(out)?;
    let vocab = build_vocab(cfg)?;
    let corpus = generate_corpus(&vocab, cfg.world.n_clips, cfg.world.p_co, cfg.stage_seed("gen"))?;
    let captions: Vec<CaptionBundle> = corpus.iter().map(|c| render_captions(c, &vocab)).collect();
    artifacts::write_corpus(&paths.corpus(), &corpus)?;
    artifacts::write_captions(&paths.captions(), &corpus, &captions)?;
    artifacts::write_vocab_sidecar(&paths.vocab(), &vocab)?;
    Ok(())
}

/// Builds the four pair pools over the training split. Shared by the curate
/// stage and the ablation grid so identical seeds give identical pairs.
pub fn curate_pairs(
    cfg: &RunConfig,
    train_corpus: &[Clip],
    train_captions: &[CaptionBundle],
    vocab: &EventVocab,
) -> Result<(Vec<PreferencePair>, TierMap)> {
    let tiers = tier_swaps(train_corpus, vocab, &cfg.tiers)?;
    let n_frames = cfg.pairs.n_frames;
    let mut pairs = build_attribution_pairs(
        train_corpus,
        train_captions,
        &tiers,
        cfg.pairs.attribution_tier,
        n_frames,
        cfg.stage_seed("curate:attribution"),
    )?;
    pairs.extend(build_sensitivity_pairs(
        train_corpus,
        train_captions,
        &tiers,
        cfg.pairs.sensitivity_tier,
        n_frames,
        cfg.stage_seed("curate:sensitivity"),
    )?);
    pairs.extend(build_noise_pairs(
        train_corpus,
        train_captions,
        cfg.pairs.noise_sigma_corrupt,
        cfg.world.noise_sigma,
        n_frames,
    )?);
    pairs.extend(build_text_pairs_with_frames(
        train_corpus,
        train_captions,
        n_frames,
    )?);
    Ok((pairs, tiers))
}

pub fn run_curate(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let paths = OutPaths::new(out);
    refuse_existing(&[paths.pairs(), paths.tier_report()], force)?;
    let (vocab, corpus, captions) = load_world(cfg, &paths)?;
    let (train_corpus, _) = split_holdout(&corpus, cfg);
    let (train_captions, _) = split_holdout(&captions, cfg);
    let (pairs, tiers) = curate_pairs(cfg, train_corpus, train_captions, &vocab)?;
    if pairs.is_empty() {
        return Err(Error::Data("curation produced no pairs".into()));
    }
    artifacts::write_pairs(&paths.pairs(), &pairs)?;
    artifacts::write_tier_report(&paths.tier_report(), &tiers, train_corpus.len())?;
    Ok(())
}

pub fn run_train(cfg: &RunConfig, out: &Path, phase: Phase, force: bool) -> Result<()> {
    let paths = OutPaths::new(out);
    refuse_existing(&[paths.checkpoint(phase), paths.train_log(phase)], force)?;
    let (vocab, corpus, captions) = load_world(cfg, &paths)?;
    let (train_corpus, _) = split_holdout(&corpus, cfg);
    let (train_captions, _) = split_holdout(&captions, cfg);
    let train_cfg = cfg.train_config(phase)?;

    let (params, log) = match phase {
        Phase::Pretrain => {
            let init = ModelParams::init(cfg.model_config())?;
            pretrain_biased(
                init,
                train_corpus,
                train_captions,
                &vocab,
                cfg.world.n_frames,
                cfg.world.noise_sigma,
                &train_cfg,
            )?
        }
        Phase::SftBaseline => {
            let start = checkpoint::load(&paths.checkpoint(Phase::Pretrain))?;
            let resolver = ContextResolver::new(
                &corpus,
                &vocab,
                cfg.world.noise_sigma,
                cfg.pairs.noise_sigma_corrupt,
            );
            train_sft_baseline(
                start,
                train_corpus,
                train_captions,
                &resolver,
                cfg.world.n_frames,
                &train_cfg,
            )?
        }
        Phase::Acpo | Phase::DpoBaseline | Phase::OmnidpoBaseline => {
            let start = checkpoint::load(&paths.checkpoint(Phase::Pretrain))?;
            let pairs = artifacts::read_pairs(&paths.pairs())?;
            let pools = PairPools::from_pairs(pairs);
            let resolver = ContextResolver::new(
                &corpus,
                &vocab,
                cfg.world.noise_sigma,
                cfg.pairs.noise_sigma_corrupt,
            );
            crate::train::train_acpo(start, &pools, &resolver, &train_cfg)?
        }
    };

    checkpoint::save(&params, &paths.checkpoint(phase))?;
    artifacts::write_train_log(&paths.train_log(phase), &log)?;
    Ok(())
}

/// Held-out evaluation assets, rebuilt deterministically at eval time.
struct EvalAssets {
    qa_items: Vec<crate::eval::QaItem>,
    held_out_pairs: Vec<PreferencePair>,
}

fn build_eval_assets(
    cfg: &RunConfig,
    hold_corpus: &[Clip],
    hold_captions: &[CaptionBundle],
    vocab: &EventVocab,
) -> Result<EvalAssets> {
    let tiers = tier_swaps(hold_corpus, vocab, &cfg.tiers)?;
    let qa_items = build_audio_halluc_qa(
        hold_corpus,
        vocab,
        &tiers,
        cfg.eval.qa_items,
        cfg.eval.n_frames,
        cfg.stage_seed("eval-qa"),
    )?;
    let mut held_out_pairs = build_attribution_pairs(
        hold_corpus,
        hold_captions,
        &tiers,
        cfg.pairs.attribution_tier,
        cfg.pairs.n_frames,
        cfg.stage_seed("eval-pairs:attribution"),
    )?;
    held_out_pairs.extend(build_sensitivity_pairs(
        hold_corpus,
        hold_captions,
        &tiers,
        cfg.pairs.sensitivity_tier,
        cfg.pairs.n_frames,
        cfg.stage_seed("eval-pairs:sensitivity"),
    )?);
    held_out_pairs.extend(build_noise_pairs(
        hold_corpus,
        hold_captions,
        cfg.pairs.noise_sigma_corrupt,
        cfg.world.noise_sigma,
        cfg.pairs.n_frames,
    )?);
    held_out_pairs.extend(build_text_pairs_with_frames(
        hold_corpus,
        hold_captions,
        cfg.pairs.n_frames,
    )?);
    Ok(EvalAssets {
        qa_items,
        held_out_pairs,
    })
}

/// Evaluates a checkpoint against the held-out split. The preference
/// reference is the pretraining checkpoint when present, otherwise the
/// evaluated model itself (margins are then identically zero).
pub fn run_eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint_path: &Path,
    force: bool,
) -> Result<(EvalReport, Vec<QaPrediction>)> {
    let paths = OutPaths::new(out);
    let tag = checkpoint_tag(checkpoint_path);
    refuse_existing(
        &[
            paths.eval_report(&tag),
            paths.summary(&tag),
            paths.qa_predictions(&tag),
        ],
        force,
    )?;
    let (vocab, corpus, captions) = load_world(cfg, &paths)?;
    let (train_corpus, hold_corpus) = split_holdout(&corpus, cfg);
    let (_, hold_captions) = split_holdout(&captions, cfg);
    let params = checkpoint::load(checkpoint_path)?;
    let reference_path = paths.checkpoint(Phase::Pretrain);
    let reference = if reference_path.exists() && reference_path != checkpoint_path {
        checkpoint::load(&reference_path)?
    } else {
        crate::model::snapshot_reference(&params)
    };

    // Training pairs never reference held-out clips; eval is self-contained
    // over the holdout, so the resolver only needs that split.
    debug_assert!(train_corpus.len() + hold_corpus.len() == corpus.len());
    let resolver = ContextResolver::new(
        hold_corpus,
        &vocab,
        cfg.world.noise_sigma,
        cfg.pairs.noise_sigma_corrupt,
    );
    let assets = build_eval_assets(cfg, hold_corpus, hold_captions, &vocab)?;

    let (confusion, raw) = score_qa(&params, &assets.qa_items, &resolver)?;
    let caption_clips = &hold_corpus[..cfg.eval.caption_clips.min(hold_corpus.len())];
    let captioning = captioning_eval(&params, caption_clips, &vocab, &resolver, cfg.eval.n_frames)?;
    let dominance = dominance_sweep(&params, &assets.qa_items, &cfg.eval.frames_sweep, &resolver)?;
    let satisfaction = pref_satisfaction(
        &params,
        &reference,
        &assets.held_out_pairs,
        cfg.train.beta,
        &resolver,
    )?;

    let report = EvalReport {
        qa: confusion.metrics(),
        confusion,
        captioning,
        dominance,
        pref_satisfaction: satisfaction,
    };
    artifacts::write_eval_report_csv(&paths.eval_report(&tag), &report)?;
    artifacts::write_eval_summary(&paths.summary(&tag), &report)?;
    artifacts::write_qa_predictions(&paths.qa_predictions(&tag), &raw)?;
    Ok((report, raw))
}

/// Ablation grid: full objective and the two single-axis removals, trained
/// from the pretraining checkpoint and scored on held-out QA.
pub fn run_ablate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<AblationRow>> {
    let paths = OutPaths::new(out);
    refuse_existing(&[paths.ablation()], force)?;
    let (vocab, corpus, captions) = load_world(cfg, &paths)?;
    let (_, hold_corpus) = split_holdout(&corpus, cfg);
    let (_, hold_captions) = split_holdout(&captions, cfg);
    let start = checkpoint::load(&paths.checkpoint(Phase::Pretrain))?;
    let pairs = artifacts::read_pairs(&paths.pairs())?;
    let pools = PairPools::from_pairs(pairs);
    let train_cfg = cfg.train_config(Phase::Acpo)?;
    let resolver = ContextResolver::new(
        &corpus,
        &vocab,
        cfg.world.noise_sigma,
        cfg.pairs.noise_sigma_corrupt,
    );

    let eval_resolver = ContextResolver::new(
        hold_corpus,
        &vocab,
        cfg.world.noise_sigma,
        cfg.pairs.noise_sigma_corrupt,
    );
    let assets = build_eval_assets(cfg, hold_corpus, hold_captions, &vocab)?;

    let ac = cfg.train.mix_audio_contrastive;
    let att = cfg.pairs.attribution_fraction;
    let text = cfg.pairs.text_fraction;
    let variants: [(&str, KindMix); 3] = [
        ("full", KindMix::audio_contrastive_split(ac, att, text)?),
        (
            "no_attribution",
            KindMix::audio_contrastive_without(ac, att, text, PairKind::Attribution)?,
        ),
        (
            "no_sensitivity",
            KindMix::audio_contrastive_without(ac, att, text, PairKind::Sensitivity)?,
        ),
    ];

    let mut rows = Vec::with_capacity(variants.len());
    for (name, mix) in variants {
        let (trained, _) =
            train_preference(start.clone(), &pools, mix, &resolver, &train_cfg)?;
        let (counts, _) = score_qa(&trained, &assets.qa_items, &eval_resolver)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            attribution_tier: cfg.pairs.attribution_tier.name().to_string(),
            sensitivity_tier: cfg.pairs.sensitivity_tier.name().to_string(),
            metrics: counts.metrics(),
        });
    }
    artifacts::write_ablation_csv(&paths.ablation(), &rows)?;
    Ok(rows)
}

/// Frame-count sweep for one checkpoint, written as CSV.
pub fn run_sweep(
    cfg: &RunConfig,
    out: &Path,
    checkpoint_path: &Path,
    force: bool,
) -> Result<Vec<(usize, f64)>> {
    let paths = OutPaths::new(out);
    let tag = checkpoint_tag(checkpoint_path);
    refuse_existing(&[paths.sweep(&tag)], force)?;
    let (vocab, corpus, captions) = load_world(cfg, &paths)?;
    let (_, hold_corpus) = split_holdout(&corpus, cfg);
    let (_, hold_captions) = split_holdout(&captions, cfg);
    let params = checkpoint::load(checkpoint_path)?;
    let resolver = ContextResolver::new(
        hold_corpus,
        &vocab,
        cfg.world.noise_sigma,
        cfg.pairs.noise_sigma_corrupt,
    );
    let assets = build_eval_assets(cfg, hold_corpus, hold_captions, &vocab)?;
    let sweep = dominance_sweep(&params, &assets.qa_items, &cfg.eval.frames_sweep, &resolver)?;
    artifacts::write_sweep_csv(&paths.sweep(&tag), &sweep)?;
    Ok(sweep)
}
