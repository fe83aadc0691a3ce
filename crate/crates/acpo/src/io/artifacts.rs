//! Line-delimited artifact formats.
//!
//! Text over binary for everything except checkpoints: diffable, greppable,
//! trivially versioned. Every file begins with a format-version line and
//! readers reject unknown versions. Token sequences are stored as integer
//! arrays; the vocabulary sidecar maps ids to display names.

use crate::error::{Error, Result};
use crate::eval::{EvalReport, QaPrediction};
use crate::pairs::{ContextSpec, NoiseTag, PairKind, PreferencePair, PromptHead, Tier, TierMap};
use crate::tokens;
use crate::train::LogRow;
use crate::world::{CaptionBundle, Clip, EventVocab};
use std::fmt::Write as _;
use std::path::Path;

pub const CORPUS_VERSION: &str = "acpo-corpus v1";
pub const CAPTIONS_VERSION: &str = "acpo-captions v1";
pub const VOCAB_VERSION: &str = "acpo-vocab v1";
pub const PAIRS_VERSION: &str = "acpo-pairs v1";
pub const TIER_REPORT_VERSION: &str = "acpo-tier-report v1";
pub const TRAIN_LOG_VERSION: &str = "acpo-train-log v1";
pub const EVAL_REPORT_VERSION: &str = "acpo-eval-report v1";
pub const SUMMARY_VERSION: &str = "acpo-summary v1";
pub const QA_PREDICTIONS_VERSION: &str = "acpo-qa-predictions v1";
pub const ABLATION_VERSION: &str = "acpo-ablation v1";
pub const SWEEP_VERSION: &str = "acpo-sweep v1";

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)?;
    Ok(())
}

fn read_versioned(path: &Path, version: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(head) if head == version => {}
        Some(head) => {
            return Err(Error::Data(format!(
                "{}: unknown format version {head:?}, expected {version:?}",
                path.display()
            )))
        }
        None => return Err(Error::Data(format!("{}: empty file", path.display()))),
    }
    Ok(lines.map(str::to_string).collect())
}

fn join_ids<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_id_list(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Data(format!("bad id list entry {p:?}")))
        })
        .collect()
}

/// Shortest decimal form that parses back to the same f64.
fn fmt_exact(v: f64) -> String {
    format!("{v}")
}

fn fields<'l>(line: &'l str, n: usize, what: &str) -> Result<Vec<&'l str>> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != n {
        return Err(Error::Data(format!(
            "{what}: expected {n} fields, got {} in {line:?}",
            parts.len()
        )));
    }
    Ok(parts)
}

pub fn write_corpus(path: &Path, corpus: &[Clip]) -> Result<()> {
    let mut out = String::from(CORPUS_VERSION);
    out.push('\n');
    for clip in corpus {
        let visual: Vec<usize> = clip.visual_events.iter().map(|o| o.0).collect();
        let audio: Vec<usize> = clip.audio_events.iter().map(|e| e.0).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            clip.id,
            join_ids(&visual),
            join_ids(&audio),
            clip.clip_seed
        )
        .expect("string write");
    }
    write_text(path, &out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Clip>> {
    let mut corpus = Vec::new();
    for line in read_versioned(path, CORPUS_VERSION)? {
        let parts = fields(&line, 4, "corpus")?;
        corpus.push(Clip {
            id: parts[0].to_string(),
            visual_events: parse_id_list(parts[1])?
                .into_iter()
                .map(crate::world::ObjectId)
                .collect(),
            audio_events: parse_id_list(parts[2])?
                .into_iter()
                .map(crate::world::AudioEventId)
                .collect(),
            clip_seed: parts[3]
                .parse()
                .map_err(|_| Error::Data(format!("bad clip seed {:?}", parts[3])))?,
        });
    }
    Ok(corpus)
}

pub fn write_captions(path: &Path, corpus: &[Clip], captions: &[CaptionBundle]) -> Result<()> {
    let mut out = String::from(CAPTIONS_VERSION);
    out.push('\n');
    for (clip, caps) in corpus.iter().zip(captions) {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            clip.id,
            join_ids(&caps.y_av),
            join_ids(&caps.y_vis),
            join_ids(&caps.y_aud)
        )
        .expect("string write");
    }
    write_text(path, &out)
}

/// Captions keyed by position; ids must match the corpus order.
pub fn read_captions(path: &Path, corpus: &[Clip]) -> Result<Vec<CaptionBundle>> {
    let lines = read_versioned(path, CAPTIONS_VERSION)?;
    if lines.len() != corpus.len() {
        return Err(Error::Data(format!(
            "captions file has {} rows for {} clips",
            lines.len(),
            corpus.len()
        )));
    }
    let mut captions = Vec::with_capacity(lines.len());
    for (line, clip) in lines.iter().zip(corpus) {
        let parts = fields(line, 4, "captions")?;
        if parts[0] != clip.id {
            return Err(Error::Data(format!(
                "captions row for {:?} does not match corpus clip {:?}",
                parts[0], clip.id
            )));
        }
        captions.push(CaptionBundle {
            y_av: parse_id_list(parts[1])?,
            y_vis: parse_id_list(parts[2])?,
            y_aud: parse_id_list(parts[3])?,
        });
    }
    Ok(captions)
}

/// Human-readable token table.
pub fn write_vocab_sidecar(path: &Path, vocab: &EventVocab) -> Result<()> {
    let mut out = String::from(VOCAB_VERSION);
    out.push('\n');
    for (id, name) in tokens::RESERVED_NAMES.iter().enumerate() {
        writeln!(out, "{id}\t{name}").expect("string write");
    }
    for i in 0..vocab.n_objects() {
        let o = crate::world::ObjectId(i);
        writeln!(out, "{}\t{}", vocab.object_token(o), vocab.object_name(o)).expect("string write");
    }
    for i in 0..vocab.n_audio_events() {
        let e = crate::world::AudioEventId(i);
        writeln!(out, "{}\t{}", vocab.audio_token(e), vocab.audio_event_name(e))
            .expect("string write");
    }
    write_text(path, &out)
}

fn ctx_to_field(ctx: &ContextSpec) -> String {
    format!(
        "{},{},{},{},{}",
        ctx.video_clip_id,
        ctx.audio_clip_id,
        ctx.n_frames,
        ctx.prompt_head.name(),
        ctx.noise_tag.name()
    )
}

fn ctx_from_field(s: &str) -> Result<ContextSpec> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 5 {
        return Err(Error::Data(format!("bad context spec {s:?}")));
    }
    Ok(ContextSpec {
        video_clip_id: parts[0].to_string(),
        audio_clip_id: parts[1].to_string(),
        n_frames: parts[2]
            .parse()
            .map_err(|_| Error::Data(format!("bad n_frames in {s:?}")))?,
        prompt_head: PromptHead::from_name(parts[3])
            .ok_or_else(|| Error::Data(format!("bad prompt head in {s:?}")))?,
        noise_tag: NoiseTag::from_name(parts[4])
            .ok_or_else(|| Error::Data(format!("bad noise tag in {s:?}")))?,
    })
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut out = String::from(PAIRS_VERSION);
    out.push('\n');
    for p in pairs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            p.kind.name(),
            p.tier.name(),
            ctx_to_field(&p.preferred_ctx),
            join_ids(&p.preferred_y),
            ctx_to_field(&p.dispreferred_ctx),
            join_ids(&p.dispreferred_y)
        )
        .expect("string write");
    }
    write_text(path, &out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for line in read_versioned(path, PAIRS_VERSION)? {
        let parts = fields(&line, 6, "pairs")?;
        pairs.push(PreferencePair {
            kind: PairKind::from_name(parts[0])
                .ok_or_else(|| Error::Data(format!("unknown pair kind {:?}", parts[0])))?,
            tier: Tier::from_name(parts[1])
                .ok_or_else(|| Error::Data(format!("unknown tier {:?}", parts[1])))?,
            preferred_ctx: ctx_from_field(parts[2])?,
            preferred_y: parse_id_list(parts[3])?,
            dispreferred_ctx: ctx_from_field(parts[4])?,
            dispreferred_y: parse_id_list(parts[5])?,
        });
    }
    Ok(pairs)
}

pub fn write_tier_report(path: &Path, tiers: &TierMap, n_clips: usize) -> Result<()> {
    let mut out = String::from(TIER_REPORT_VERSION);
    out.push('\n');
    out.push_str("key,value\n");
    let rows = [
        ("clips", n_clips.to_string()),
        ("low_cutoff", format!("{:.6}", tiers.low_cutoff)),
        ("high_cutoff", format!("{:.6}", tiers.high_cutoff)),
        (
            "low_partner_slots",
            tiers.low.iter().map(Vec::len).sum::<usize>().to_string(),
        ),
        (
            "high_partner_slots",
            tiers.high.iter().map(Vec::len).sum::<usize>().to_string(),
        ),
        ("skipped_low", tiers.skipped_low.to_string()),
        ("skipped_high", tiers.skipped_high.to_string()),
    ];
    for (k, v) in rows {
        writeln!(out, "{k},{v}").expect("string write");
    }
    write_text(path, &out)
}

pub fn write_train_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut out = String::from(TRAIN_LOG_VERSION);
    out.push('\n');
    out.push_str("step,lr,loss,mean_margin\n");
    for row in log {
        writeln!(
            out,
            "{},{},{:.6},{:.6}",
            row.step,
            fmt_exact(row.lr),
            row.loss,
            row.mean_margin
        )
        .expect("string write");
    }
    write_text(path, &out)
}

pub fn write_qa_predictions(path: &Path, predictions: &[QaPrediction]) -> Result<()> {
    let mut out = String::from(QA_PREDICTIONS_VERSION);
    out.push('\n');
    out.push_str("item_id,truth,predicted,logp_yes,logp_no\n");
    for p in predictions {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.item_id,
            u8::from(p.truth),
            u8::from(p.predicted),
            fmt_exact(p.logp_yes),
            fmt_exact(p.logp_no)
        )
        .expect("string write");
    }
    write_text(path, &out)
}

pub fn read_qa_predictions(path: &Path) -> Result<Vec<QaPrediction>> {
    let lines = read_versioned(path, QA_PREDICTIONS_VERSION)?;
    let mut out = Vec::new();
    for line in lines.iter().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Data(format!("bad qa prediction row {line:?}")));
        }
        let flag = |s: &str| -> Result<bool> {
            match s {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Data(format!("bad flag {other:?}"))),
            }
        };
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("bad float {s:?}")))
        };
        out.push(QaPrediction {
            item_id: parts[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad item id {:?}", parts[0])))?,
            truth: flag(parts[1])?,
            predicted: flag(parts[2])?,
            logp_yes: num(parts[3])?,
            logp_no: num(parts[4])?,
        });
    }
    Ok(out)
}

/// Flat `metric=value` lines (6 decimal places) plus the report CSV rows.
pub fn eval_summary_lines(report: &EvalReport) -> String {
    let mut out = format!("format={SUMMARY_VERSION}\n");
    let mut push = |k: String, v: f64| {
        out.push_str(&format!("{k}={v:.6}\n"));
    };
    push("qa.precision".into(), report.qa.precision);
    push("qa.recall".into(), report.qa.recall);
    push("qa.f1".into(), report.qa.f1);
    push("qa.accuracy".into(), report.qa.accuracy);
    push("qa.pa".into(), report.qa.pa);
    push("qa.hr".into(), report.qa.hr);
    for (name, scores) in report.captioning.splits() {
        push(format!("captioning.{name}.meteor"), scores.meteor);
        push(format!("captioning.{name}.cider"), scores.cider);
    }
    for (n_frames, acc) in &report.dominance {
        push(format!("dominance.frames_{n_frames}.accuracy"), *acc);
    }
    for (kind, frac) in &report.pref_satisfaction {
        push(format!("pref_satisfaction.{}", kind.name()), *frac);
    }
    out
}

pub fn write_eval_summary(path: &Path, report: &EvalReport) -> Result<()> {
    write_text(path, &eval_summary_lines(report))
}

pub fn read_summary(path: &Path) -> Result<std::collections::BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(head) if head == format!("format={SUMMARY_VERSION}") => {}
        other => {
            return Err(Error::Data(format!(
                "{}: unknown summary version {other:?}",
                path.display()
            )))
        }
    }
    let mut out = std::collections::BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("bad summary line {line:?}")))?;
        out.insert(
            k.to_string(),
            v.parse()
                .map_err(|_| Error::Data(format!("bad summary value {v:?}")))?,
        );
    }
    Ok(out)
}

pub fn write_eval_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from(EVAL_REPORT_VERSION);
    out.push('\n');
    out.push_str("section,metric,value\n");
    let mut push = |section: &str, metric: String, value: f64| {
        writeln!(out, "{section},{metric},{value:.6}").expect("string write");
    };
    push("qa", "precision".into(), report.qa.precision);
    push("qa", "recall".into(), report.qa.recall);
    push("qa", "f1".into(), report.qa.f1);
    push("qa", "accuracy".into(), report.qa.accuracy);
    push("qa", "pa".into(), report.qa.pa);
    push("qa", "hr".into(), report.qa.hr);
    for (name, scores) in report.captioning.splits() {
        push("captioning", format!("{name}.meteor"), scores.meteor);
        push("captioning", format!("{name}.cider"), scores.cider);
    }
    for (n_frames, acc) in &report.dominance {
        push("dominance", format!("frames_{n_frames}"), *acc);
    }
    for (kind, frac) in &report.pref_satisfaction {
        push("pref_satisfaction", kind.name().to_string(), *frac);
    }
    write_text(path, &out)
}

/// One ablation grid row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub attribution_tier: String,
    pub sensitivity_tier: String,
    pub metrics: crate::eval::QaMetrics,
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from(ABLATION_VERSION);
    out.push('\n');
    out.push_str("variant,attribution_tier,sensitivity_tier,precision,recall,f1,accuracy,pa,hr\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.variant,
            r.attribution_tier,
            r.sensitivity_tier,
            r.metrics.precision,
            r.metrics.recall,
            r.metrics.f1,
            r.metrics.accuracy,
            r.metrics.pa,
            r.metrics.hr
        )
        .expect("string write");
    }
    write_text(path, &out)
}

pub fn write_sweep_csv(path: &Path, sweep: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from(SWEEP_VERSION);
    out.push('\n');
    out.push_str("n_frames,accuracy\n");
    for (n_frames, acc) in sweep {
        writeln!(out, "{n_frames},{acc:.6}").expect("string write");
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::{
        build_attribution_pairs, build_noise_pairs, build_text_pairs_with_frames, tier_swaps,
        TierChoice, TierConfig,
    };
    use crate::world::{generate_corpus, render_captions};

    #[test]
    fn corpus_and_captions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = EventVocab::default_vocab(16, 0.9, 7).unwrap();
        let corpus = generate_corpus(&vocab, 40, 0.9, 5).unwrap();
        let captions: Vec<CaptionBundle> =
            corpus.iter().map(|c| render_captions(c, &vocab)).collect();

        let corpus_path = dir.path().join("corpus.txt");
        write_corpus(&corpus_path, &corpus).unwrap();
        assert_eq!(read_corpus(&corpus_path).unwrap(), corpus);

        let captions_path = dir.path().join("captions.txt");
        write_captions(&captions_path, &corpus, &captions).unwrap();
        assert_eq!(read_captions(&captions_path, &corpus).unwrap(), captions);

        // Stable bytes across rewrites.
        let first = std::fs::read(&corpus_path).unwrap();
        write_corpus(&corpus_path, &corpus).unwrap();
        assert_eq!(std::fs::read(&corpus_path).unwrap(), first);
    }

    #[test]
    fn pairs_round_trip_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = EventVocab::default_vocab(16, 0.9, 7).unwrap();
        let corpus = generate_corpus(&vocab, 40, 0.9, 6).unwrap();
        let captions: Vec<CaptionBundle> =
            corpus.iter().map(|c| render_captions(c, &vocab)).collect();
        let tiers = tier_swaps(&corpus, &vocab, &TierConfig::default()).unwrap();
        let mut pairs =
            build_attribution_pairs(&corpus, &captions, &tiers, TierChoice::Low, 4, 1).unwrap();
        pairs.extend(build_noise_pairs(&corpus, &captions, 1.0, 0.05, 4).unwrap());
        pairs.extend(build_text_pairs_with_frames(&corpus, &captions, 4).unwrap());

        let path = dir.path().join("pairs.txt");
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        std::fs::write(&path, "acpo-corpus v9\n").unwrap();
        let err = read_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn qa_predictions_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let preds = vec![
            QaPrediction {
                item_id: 0,
                truth: true,
                predicted: false,
                logp_yes: -1.234567890123456789,
                logp_no: -0.5,
            },
            QaPrediction {
                item_id: 1,
                truth: false,
                predicted: true,
                logp_yes: -3.0000001,
                logp_no: -3.0000002,
            },
        ];
        let path = dir.path().join("qa.csv");
        write_qa_predictions(&path, &preds).unwrap();
        let back = read_qa_predictions(&path).unwrap();
        assert_eq!(back.len(), preds.len());
        for (a, b) in preds.iter().zip(&back) {
            assert_eq!(a.item_id, b.item_id);
            assert_eq!(a.truth, b.truth);
            assert_eq!(a.predicted, b.predicted);
            assert_eq!(a.logp_yes.to_bits(), b.logp_yes.to_bits());
            assert_eq!(a.logp_no.to_bits(), b.logp_no.to_bits());
        }
    }

    #[test]
    fn summary_round_trips_keys() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = EvalReport::default();
        report.qa.accuracy = 0.8125;
        report.dominance = vec![(1, 0.9), (8, 0.7)];
        report.pref_satisfaction = vec![(PairKind::Attribution, 0.95)];
        let path = dir.path().join("summary.txt");
        write_eval_summary(&path, &report).unwrap();
        let map = read_summary(&path).unwrap();
        assert_eq!(map["qa.accuracy"], 0.8125);
        assert_eq!(map["dominance.frames_8.accuracy"], 0.7);
        assert_eq!(map["pref_satisfaction.attribution"], 0.95);
        // 6 QA metrics + 8 captioning numbers + one row per frame count.
        assert_eq!(map.keys().filter(|k| k.starts_with("qa.")).count(), 6);
        assert_eq!(
            map.keys().filter(|k| k.starts_with("captioning.")).count(),
            8
        );
        assert_eq!(map.keys().filter(|k| k.starts_with("dominance.")).count(), 2);
    }
}
