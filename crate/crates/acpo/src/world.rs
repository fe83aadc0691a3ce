//! Synthetic audio-visual event world.
//!
//! Clips pair 1-3 visual objects with 1-3 audio events. Each object has one
//! expected sound, and corpora are generated with a controllable
//! co-occurrence probability `p_co`, which plants the sight-to-sound
//! shortcut the rest of the pipeline studies. Modality features are noisy
//! means of deterministic unit embeddings, and video-audio similarity is the
//! cosine between expected-sound and actual-sound embedding means.
//!
//! Everything here is a pure function of (vocab, config, seed).

use crate::error::{Error, Result};
use crate::rng::{derive_seed, mix, SplitMix64};
use crate::tokens::{self, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AudioEventId(pub usize);

pub const DEFAULT_OBJECTS: [&str; 12] = [
    "police_car",
    "dog",
    "cat",
    "person",
    "frog",
    "cow",
    "bird",
    "train",
    "bee",
    "sheep",
    "drummer",
    "waterfall",
];

pub const DEFAULT_AUDIO_EVENTS: [&str; 12] = [
    "siren", "bark", "meow", "speech", "croak", "moo", "chirp", "horn", "buzz", "bleat",
    "drumbeat", "splash",
];

/// Object and sound inventory with expected-sound mapping and deterministic
/// unit embeddings for both modalities.
#[derive(Clone, Debug)]
pub struct EventVocab {
    visual_objects: Vec<String>,
    audio_events: Vec<String>,
    /// Per object: expected audio event and default co-occurrence probability.
    co_map: Vec<(AudioEventId, f64)>,
    object_embeddings: Vec<Vec<f64>>,
    audio_embeddings: Vec<Vec<f64>>,
    d_embed: usize,
}

const MAX_PAIRWISE_COSINE: f64 = 0.95;

impl EventVocab {
    /// Builds a vocabulary with index-wise object-to-event expectations.
    pub fn new(
        objects: &[&str],
        events: &[&str],
        d_embed: usize,
        p_co: f64,
        seed: u64,
    ) -> Result<Self> {
        if objects.is_empty() || events.is_empty() {
            return Err(Error::Config("event vocabulary must be nonempty".into()));
        }
        if objects.len() != events.len() {
            return Err(Error::Config(format!(
                "need one expected event per object ({} objects, {} events)",
                objects.len(),
                events.len()
            )));
        }
        if !(0.0..=1.0).contains(&p_co) {
            return Err(Error::Config(format!("p_co {p_co} outside [0, 1]")));
        }
        let mut rng = SplitMix64::new(derive_seed(seed, "event-embeddings"));
        let mut all: Vec<Vec<f64>> = Vec::with_capacity(objects.len() + events.len());
        while all.len() < objects.len() + events.len() {
            let candidate = random_unit_vector(d_embed, &mut rng);
            let clash = all
                .iter()
                .any(|v| dot(v, &candidate) >= MAX_PAIRWISE_COSINE);
            if !clash {
                all.push(candidate);
            }
        }
        let audio_embeddings = all.split_off(objects.len());
        Ok(Self {
            visual_objects: objects.iter().map(|s| s.to_string()).collect(),
            audio_events: events.iter().map(|s| s.to_string()).collect(),
            co_map: (0..objects.len()).map(|i| (AudioEventId(i), p_co)).collect(),
            object_embeddings: all,
            audio_embeddings,
            d_embed,
        })
    }

    pub fn default_vocab(d_embed: usize, p_co: f64, seed: u64) -> Result<Self> {
        Self::new(&DEFAULT_OBJECTS, &DEFAULT_AUDIO_EVENTS, d_embed, p_co, seed)
    }

    pub fn n_objects(&self) -> usize {
        self.visual_objects.len()
    }

    pub fn n_audio_events(&self) -> usize {
        self.audio_events.len()
    }

    pub fn d_embed(&self) -> usize {
        self.d_embed
    }

    pub fn object_name(&self, o: ObjectId) -> &str {
        &self.visual_objects[o.0]
    }

    pub fn audio_event_name(&self, e: AudioEventId) -> &str {
        &self.audio_events[e.0]
    }

    /// Expected sound for an object.
    pub fn expected_event(&self, o: ObjectId) -> AudioEventId {
        self.co_map[o.0].0
    }

    pub fn co_probability(&self, o: ObjectId) -> f64 {
        self.co_map[o.0].1
    }

    pub fn object_embedding(&self, o: ObjectId) -> &[f64] {
        &self.object_embeddings[o.0]
    }

    pub fn audio_embedding(&self, e: AudioEventId) -> &[f64] {
        &self.audio_embeddings[e.0]
    }

    pub fn object_token(&self, o: ObjectId) -> TokenId {
        tokens::FIRST_EVENT_TOKEN + o.0
    }

    pub fn audio_token(&self, e: AudioEventId) -> TokenId {
        tokens::FIRST_EVENT_TOKEN + self.n_objects() + e.0
    }

    /// Smallest vocabulary size that fits every reserved and event token.
    pub fn min_vocab_size(&self) -> usize {
        tokens::FIRST_EVENT_TOKEN + self.n_objects() + self.n_audio_events()
    }

    /// Inverse of [`Self::audio_token`] for tokens in the audio-event range.
    pub fn audio_event_of_token(&self, t: TokenId) -> Option<AudioEventId> {
        let base = tokens::FIRST_EVENT_TOKEN + self.n_objects();
        (t >= base && t < base + self.n_audio_events()).then(|| AudioEventId(t - base))
    }

    pub fn object_of_token(&self, t: TokenId) -> Option<ObjectId> {
        let base = tokens::FIRST_EVENT_TOKEN;
        (t >= base && t < base + self.n_objects()).then(|| ObjectId(t - base))
    }

    /// Sorted, deduplicated expected sounds for a set of objects.
    pub fn expected_events_of(&self, objects: &[ObjectId]) -> Vec<AudioEventId> {
        let mut out: Vec<AudioEventId> = objects.iter().map(|&o| self.expected_event(o)).collect();
        out.sort();
        out.dedup();
        out
    }
}

/// One synthetic clip: what is visible, what is audible, and the seed that
/// drives every noise stream derived for it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    pub id: String,
    pub visual_events: Vec<ObjectId>,
    pub audio_events: Vec<AudioEventId>,
    pub clip_seed: u64,
}

/// Joint caption plus its modality-specific decompositions, as token lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionBundle {
    pub y_av: Vec<TokenId>,
    pub y_vis: Vec<TokenId>,
    pub y_aud: Vec<TokenId>,
}

/// Samples a corpus. Each clip draws 1-3 distinct objects uniformly; every
/// object contributes its expected sound with probability `p_co`, otherwise a
/// uniform different sound. `p_co` overrides the vocabulary default.
pub fn generate_corpus(
    vocab: &EventVocab,
    n_clips: usize,
    p_co: f64,
    seed: u64,
) -> Result<Vec<Clip>> {
    if n_clips == 0 {
        return Err(Error::Config("n_clips must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&p_co) {
        return Err(Error::Config(format!("p_co {p_co} outside [0, 1]")));
    }
    let n_obj = vocab.n_objects();
    let n_evt = vocab.n_audio_events();
    let mut rng = SplitMix64::new(seed);
    let mut corpus = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let count = 1 + rng.index(3.min(n_obj));
        let mut pool: Vec<usize> = (0..n_obj).collect();
        rng.shuffle(&mut pool);
        let mut objects: Vec<ObjectId> = pool[..count].iter().map(|&o| ObjectId(o)).collect();

        let mut sounds: Vec<AudioEventId> = Vec::with_capacity(count);
        for &o in &objects {
            let expected = vocab.expected_event(o);
            let event = if rng.chance(p_co) {
                expected
            } else {
                // Uniform over the other events.
                let k = rng.index(n_evt - 1);
                AudioEventId(if k >= expected.0 { k + 1 } else { k })
            };
            sounds.push(event);
        }
        objects.sort();
        sounds.sort();
        sounds.dedup();

        corpus.push(Clip {
            id: format!("clip_{i:05}"),
            visual_events: objects,
            audio_events: sounds,
            clip_seed: mix(seed, i as u64),
        });
    }
    Ok(corpus)
}

/// Renders the templated caption bundle for a clip.
///
/// Grammar: `y_vis = [<vis>, objects.., <eos>]`, `y_aud = [<aud>, sounds..,
/// <eos>]`, and `y_av` splices both spans before a single terminator.
pub fn render_captions(clip: &Clip, vocab: &EventVocab) -> CaptionBundle {
    let obj_tokens: Vec<TokenId> = clip.visual_events.iter().map(|&o| vocab.object_token(o)).collect();
    let evt_tokens: Vec<TokenId> = clip.audio_events.iter().map(|&e| vocab.audio_token(e)).collect();

    let mut y_vis = vec![tokens::VIS_MARK];
    y_vis.extend(&obj_tokens);
    y_vis.push(tokens::EOS);

    let mut y_aud = vec![tokens::AUD_MARK];
    y_aud.extend(&evt_tokens);
    y_aud.push(tokens::EOS);

    let mut y_av = vec![tokens::VIS_MARK];
    y_av.extend(&obj_tokens);
    y_av.push(tokens::AUD_MARK);
    y_av.extend(&evt_tokens);
    y_av.push(tokens::EOS);

    CaptionBundle { y_av, y_vis, y_aud }
}

/// Mean audio-event embedding plus Gaussian noise from a clip-derived stream.
pub fn audio_features(clip: &Clip, vocab: &EventVocab, noise_sigma: f64) -> Vec<f64> {
    let mut feat = embedding_mean(
        clip.audio_events.iter().map(|&e| vocab.audio_embedding(e)),
        vocab.d_embed(),
    );
    if noise_sigma > 0.0 {
        let mut rng = SplitMix64::new(derive_seed(clip.clip_seed, "audio-noise"));
        for v in &mut feat {
            *v += noise_sigma * rng.normal();
        }
    }
    feat
}

/// Per-frame visual features: the mean object embedding plus independent
/// per-frame noise. Frame `i` is identical across calls with different
/// `n_frames`, which keeps frame-count sweeps comparable.
pub fn video_features(
    clip: &Clip,
    vocab: &EventVocab,
    n_frames: usize,
    noise_sigma: f64,
) -> Result<Vec<Vec<f64>>> {
    if n_frames == 0 {
        return Err(Error::Input("n_frames must be at least 1".into()));
    }
    let base = embedding_mean(
        clip.visual_events.iter().map(|&o| vocab.object_embedding(o)),
        vocab.d_embed(),
    );
    let noise_base = derive_seed(clip.clip_seed, "video-noise");
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let mut frame = base.clone();
        if noise_sigma > 0.0 {
            let mut rng = SplitMix64::new(mix(noise_base, i as u64));
            for v in &mut frame {
                *v += noise_sigma * rng.normal();
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Noise-free cosine between what `video_clip` looks like it should sound
/// like and what `audio_clip` actually sounds like.
pub fn av_similarity(video_clip: &Clip, audio_clip: &Clip, vocab: &EventVocab) -> f64 {
    let expected = vocab.expected_events_of(&video_clip.visual_events);
    let va = embedding_mean(
        expected.iter().map(|&e| vocab.audio_embedding(e)),
        vocab.d_embed(),
    );
    let au = embedding_mean(
        audio_clip.audio_events.iter().map(|&e| vocab.audio_embedding(e)),
        vocab.d_embed(),
    );
    cosine(&va, &au)
}

/// Pure Gaussian noise vector for a named stream; used for corrupted inputs.
pub fn noise_vector(seed: u64, len: usize, sigma: f64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..len).map(|_| sigma * rng.normal()).collect()
}

fn embedding_mean<'a>(vectors: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    let mut count = 0usize;
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        for a in &mut acc {
            *a *= inv;
        }
    }
    acc
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

fn random_unit_vector(d: usize, rng: &mut SplitMix64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
