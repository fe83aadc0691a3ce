//! Toy audio-visual language model.
//!
//! The conditioning vector mean-pools projected video frames, one projected
//! audio token, and prompt embeddings, so the audio token's pooled weight is
//! `1/(n_frames + 1 + prompt_len)`. That arithmetic is the point: many
//! frames crowd out the single audio token, which is the failure mode the
//! preference training is built to correct. Decoding is a bigram head over
//! the pooled context: logits depend on the conditioning vector and the
//! previous token only.

use crate::error::{Error, Result};
use crate::grad::{GradientMap, NodeId, Tape, Tensor};
use crate::rng::SplitMix64;
use crate::tokens::{self, TokenId};

/// Architecture hyperparameters. `seed` drives parameter initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_audio: usize,
    pub d_video: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_audio: 16,
            d_video: 16,
            d_model: 32,
            vocab_size: 64,
            max_len: 24,
            seed: 0,
        }
    }
}

pub const MAX_FRAMES: usize = 32;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_audio == 0 || self.d_video == 0 || self.d_model == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if self.vocab_size < tokens::FIRST_EVENT_TOKEN {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the {} reserved tokens",
                self.vocab_size,
                tokens::FIRST_EVENT_TOKEN
            )));
        }
        Ok(())
    }
}

/// Named parameter blocks, in initialization and serialization order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Block {
    /// Video projector, frozen in every phase.
    PVideo,
    /// Audio projector weight; the block preference training adjusts.
    WAudio,
    /// Audio projector bias.
    BAudio,
    /// Token embeddings.
    Embed,
    /// Conditioning weight over the pooled context.
    WCond,
    BCond,
    /// Fusion of conditioning vector and previous-token embedding.
    WFuse,
    BFuse,
    /// Output head.
    Head,
}

pub const ALL_BLOCKS: [Block; 9] = [
    Block::PVideo,
    Block::WAudio,
    Block::BAudio,
    Block::Embed,
    Block::WCond,
    Block::BCond,
    Block::WFuse,
    Block::BFuse,
    Block::Head,
];

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::PVideo => "P_v",
            Block::WAudio => "W_a",
            Block::BAudio => "b_a",
            Block::Embed => "E",
            Block::WCond => "W_c",
            Block::BCond => "b_c",
            Block::WFuse => "W_h",
            Block::BFuse => "b_h",
            Block::Head => "U",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_BLOCKS.into_iter().find(|b| b.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    fn shape(self, c: &ModelConfig) -> (usize, usize) {
        match self {
            Block::PVideo => (c.d_model, c.d_video),
            Block::WAudio => (c.d_model, c.d_audio),
            Block::BAudio => (c.d_model, 1),
            Block::Embed => (c.vocab_size, c.d_model),
            Block::WCond => (c.d_model, c.d_model),
            Block::BCond => (c.d_model, 1),
            Block::WFuse => (c.d_model, 2 * c.d_model),
            Block::BFuse => (c.d_model, 1),
            Block::Head => (c.vocab_size, c.d_model),
        }
    }
}

const INIT_SCALE: f64 = 0.1;

/// All parameter blocks plus per-block trainable flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    blocks: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ModelParams {
    /// Initializes every block i.i.d. uniform in [-0.1, 0.1] from a single
    /// SplitMix64 stream seeded by `config.seed`, filling blocks in
    /// [`ALL_BLOCKS`] order. No block is trainable until a phase selects one.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let blocks = ALL_BLOCKS
            .into_iter()
            .map(|b| {
                let (r, c) = b.shape(&config);
                Tensor::uniform(r, c, INIT_SCALE, &mut rng)
            })
            .collect();
        Ok(Self {
            config,
            blocks,
            trainable: vec![false; ALL_BLOCKS.len()],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn block(&self, b: Block) -> &Tensor {
        &self.blocks[b.index()]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut Tensor {
        &mut self.blocks[b.index()]
    }

    /// Replaces a block, checking the shape against the configuration.
    pub fn set_block(&mut self, b: Block, t: Tensor) -> Result<()> {
        let want = b.shape(&self.config);
        if t.shape() != want {
            return Err(Error::Config(format!(
                "block {} expects {}x{}, got {}x{}",
                b.name(),
                want.0,
                want.1,
                t.rows(),
                t.cols()
            )));
        }
        self.blocks[b.index()] = t.detach();
        Ok(())
    }

    pub fn is_trainable(&self, b: Block) -> bool {
        self.trainable[b.index()]
    }

    pub fn trainable_blocks(&self) -> Vec<Block> {
        ALL_BLOCKS
            .into_iter()
            .filter(|b| self.is_trainable(*b))
            .collect()
    }

    /// Marks exactly the given blocks trainable. The video projector is
    /// frozen unconditionally.
    pub fn set_trainable(&mut self, blocks: &[Block]) -> Result<()> {
        if blocks.contains(&Block::PVideo) {
            return Err(Error::Config("the video projector is always frozen".into()));
        }
        self.trainable = vec![false; ALL_BLOCKS.len()];
        for &b in blocks {
            self.trainable[b.index()] = true;
        }
        Ok(())
    }

    /// Binds the parameters to a tape. Trainable blocks are registered as
    /// differentiable leaves; frozen blocks participate as constants.
    pub fn bind<'a>(&'a self, tape: &'a Tape) -> BoundModel<'a> {
        let mut bound = Vec::with_capacity(self.blocks.len());
        let mut leaf_ids = vec![None; self.blocks.len()];
        for (i, t) in self.blocks.iter().enumerate() {
            if self.trainable[i] {
                let leaf = tape.leaf(t);
                leaf_ids[i] = leaf.node_id();
                bound.push(leaf);
            } else {
                bound.push(t.detach());
            }
        }
        BoundModel {
            tape,
            blocks: bound,
            leaf_ids,
        }
    }

    /// Binds with every block frozen, for reference scoring and decoding.
    pub fn bind_frozen<'a>(&'a self, tape: &'a Tape) -> BoundModel<'a> {
        BoundModel {
            tape,
            blocks: self.blocks.iter().map(Tensor::detach).collect(),
            leaf_ids: vec![None; self.blocks.len()],
        }
    }
}

/// Deep copy of the parameters with every trainable flag cleared; the frozen
/// reference that preference training anchors to.
pub fn snapshot_reference(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    out.trainable = vec![false; ALL_BLOCKS.len()];
    out
}

/// Model input: per-frame video features, one audio feature vector, and a
/// token prompt. Prompts normally open with an instruction or question head;
/// ops that need a specific head validate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub video_tokens: Vec<Vec<f64>>,
    pub audio_vector: Vec<f64>,
    pub prompt_tokens: Vec<TokenId>,
}

/// Parameters bound to a tape for one forward pass.
pub struct BoundModel<'a> {
    tape: &'a Tape,
    blocks: Vec<Tensor>,
    leaf_ids: Vec<Option<NodeId>>,
}

impl<'a> BoundModel<'a> {
    fn b(&self, b: Block) -> &Tensor {
        &self.blocks[b.index()]
    }

    pub fn tape(&self) -> &Tape {
        self.tape
    }

    /// Tape leaf for a block, present when the block was bound trainable.
    pub fn leaf_id(&self, b: Block) -> Option<NodeId> {
        self.leaf_ids[b.index()]
    }

    /// Gradient of the most recent backward pass for a block.
    pub fn grad_of<'g>(&self, grads: &'g GradientMap, b: Block) -> Option<&'g Tensor> {
        self.leaf_id(b).and_then(|id| grads.get(id))
    }

    /// Mean-pools projected frames, the projected audio token, and prompt
    /// embeddings, then maps through the conditioning layer:
    /// `h = tanh(W_c * meanpool + b_c)`.
    pub fn encode_context(&self, ctx: &Context) -> Result<Tensor> {
        if ctx.video_tokens.is_empty() {
            return Err(Error::Input("context has no video frames".into()));
        }
        if ctx.video_tokens.len() > MAX_FRAMES {
            return Err(Error::Input(format!(
                "frame count {} exceeds the {MAX_FRAMES}-frame limit",
                ctx.video_tokens.len()
            )));
        }
        let t = self.tape;
        let mut items: Vec<Tensor> = Vec::with_capacity(ctx.video_tokens.len() + 1 + ctx.prompt_tokens.len());
        for frame in &ctx.video_tokens {
            items.push(t.matmul(self.b(Block::PVideo), &Tensor::column(frame))?);
        }
        let audio = t.matmul(self.b(Block::WAudio), &Tensor::column(&ctx.audio_vector))?;
        items.push(t.add(&audio, self.b(Block::BAudio))?);
        for &tok in &ctx.prompt_tokens {
            items.push(self.embedding(tok)?);
        }

        let mut pooled = items[0].clone();
        for item in &items[1..] {
            pooled = t.add(&pooled, item)?;
        }
        let pooled = t.scale(&pooled, 1.0 / items.len() as f64);
        let pre = t.add(&t.matmul(self.b(Block::WCond), &pooled)?, self.b(Block::BCond))?;
        Ok(t.tanh(&pre))
    }

    /// Embedding row as a column vector.
    fn embedding(&self, tok: TokenId) -> Result<Tensor> {
        let row = self.tape.row(self.b(Block::Embed), tok)?;
        Ok(self.tape.transpose(&row))
    }

    /// Next-token logits given the conditioning vector and previous token.
    pub fn step_logits(&self, h: &Tensor, prev: TokenId) -> Result<Tensor> {
        let t = self.tape;
        let stacked = t.concat_rows(h, &self.embedding(prev)?)?;
        let z = t.tanh(&t.add(&t.matmul(self.b(Block::WFuse), &stacked)?, self.b(Block::BFuse))?);
        t.matmul(self.b(Block::Head), &z)
    }

    /// Log-probability of `y` under the context, summed autoregressively
    /// with the previous token starting at BOS. `y` must end with EOS.
    pub fn sequence_logprob(&self, ctx: &Context, y: &[TokenId]) -> Result<Tensor> {
        if y.last() != Some(&tokens::EOS) {
            return Err(Error::Input("target sequence must end with EOS".into()));
        }
        let h = self.encode_context(ctx)?;
        self.sequence_logprob_from(&h, tokens::BOS, y)
    }

    /// Log-probability contribution of `y` continuing from `prev` under a
    /// fixed conditioning vector. Exactly additive over prefix splits.
    pub fn sequence_logprob_from(&self, h: &Tensor, prev: TokenId, y: &[TokenId]) -> Result<Tensor> {
        if y.is_empty() {
            return Err(Error::Input("target sequence is empty".into()));
        }
        let t = self.tape;
        let mut prev = prev;
        let mut total: Option<Tensor> = None;
        for &tok in y {
            let logits = self.step_logits(&h.clone(), prev)?;
            let lp = t.log_softmax_pick(&logits, tok)?;
            total = Some(match total {
                None => lp,
                Some(acc) => t.add(&acc, &lp)?,
            });
            prev = tok;
        }
        Ok(total.expect("y is nonempty"))
    }
}

/// Greedy argmax decoding. BOS is masked from the output alphabet; ties
/// break toward the lowest token id; decoding stops at EOS or `max_len`.
pub fn greedy_decode(params: &ModelParams, ctx: &Context, max_len: usize) -> Result<Vec<TokenId>> {
    if max_len > params.config().max_len {
        return Err(Error::Input(format!(
            "max_len {} exceeds the configured limit {}",
            max_len,
            params.config().max_len
        )));
    }
    let tape = Tape::new();
    let model = params.bind_frozen(&tape);
    let h = model.encode_context(ctx)?;
    let mut out = Vec::new();
    let mut prev = tokens::BOS;
    for _ in 0..max_len {
        let logits = model.step_logits(&h, prev)?;
        let data = logits.data();
        let mut best = tokens::EOS;
        let mut best_v = f64::NEG_INFINITY;
        for (tok, &v) in data.iter().enumerate() {
            if tok == tokens::BOS {
                continue;
            }
            if v > best_v {
                best_v = v;
                best = tok;
            }
        }
        out.push(best);
        if best == tokens::EOS {
            break;
        }
        prev = best;
    }
    Ok(out)
}

/// First-step log-probabilities of YES and NO under a question context.
pub fn yes_no_score(params: &ModelParams, ctx: &Context) -> Result<(f64, f64)> {
    match ctx.prompt_tokens.first() {
        Some(&t) if t == tokens::Q_HEAR || t == tokens::Q_SEE => {}
        _ => {
            return Err(Error::Input(
                "yes/no scoring needs a prompt starting with a question head".into(),
            ))
        }
    }
    let tape = Tape::new();
    let model = params.bind_frozen(&tape);
    let h = model.encode_context(ctx)?;
    let logits = model.step_logits(&h, tokens::BOS)?;
    let yes = tape.log_softmax_pick(&logits, tokens::YES)?.value();
    let no = tape.log_softmax_pick(&logits, tokens::NO)?.value();
    Ok((yes, no))
}

/// Decision rule for yes/no scores: confirm only on a strict margin.
pub fn predicts_yes(logp_yes: f64, logp_no: f64) -> bool {
    logp_yes > logp_no
}

/// Untracked sequence log-probability.
pub fn sequence_logprob_value(params: &ModelParams, ctx: &Context, y: &[TokenId]) -> Result<f64> {
    let tape = Tape::new();
    Ok(params.bind_frozen(&tape).sequence_logprob(ctx, y)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check::{max_grad_mismatch, numerical_grad};

    fn config(seed: u64) -> ModelConfig {
        ModelConfig {
            seed,
            ..ModelConfig::default()
        }
    }

    fn random_ctx(rng: &mut SplitMix64, cfg: &ModelConfig, n_frames: usize) -> Context {
        Context {
            video_tokens: (0..n_frames)
                .map(|_| (0..cfg.d_video).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect(),
            audio_vector: (0..cfg.d_audio).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            prompt_tokens: vec![tokens::PROMPT_AV],
        }
    }

    fn zero_params(cfg: ModelConfig) -> ModelParams {
        let mut p = ModelParams::init(cfg).unwrap();
        for b in ALL_BLOCKS {
            let shape = p.block(b).shape();
            p.set_block(b, Tensor::zeros(shape.0, shape.1)).unwrap();
        }
        p
    }

    #[test]
    fn zero_params_encode_to_zero() {
        let cfg = config(1);
        let p = zero_params(cfg);
        let ctx = random_ctx(&mut SplitMix64::new(5), &cfg, 3);
        let tape = Tape::new();
        let h = p.bind_frozen(&tape).encode_context(&ctx).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_item_pool_is_the_mean() {
        let cfg = config(2);
        let params = ModelParams::init(cfg).unwrap();
        let mut rng = SplitMix64::new(9);
        let frame: Vec<f64> = (0..cfg.d_video).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let ctx = Context {
            video_tokens: vec![frame.clone()],
            audio_vector: vec![0.0; cfg.d_audio],
            prompt_tokens: vec![],
        };
        let tape = Tape::new();
        let h = params.bind_frozen(&tape).encode_context(&ctx).unwrap();

        // Hand arithmetic: pooled = (P_v f + b_a) / 2.
        let pv = params.block(Block::PVideo);
        let ba = params.block(Block::BAudio);
        let wc = params.block(Block::WCond);
        let bc = params.block(Block::BCond);
        let mut pooled = vec![0.0; cfg.d_model];
        for (i, p) in pooled.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, f) in frame.iter().enumerate() {
                acc += pv.get(i, j) * f;
            }
            *p = 0.5 * (acc + ba.get(i, 0));
        }
        for i in 0..cfg.d_model {
            let mut acc = bc.get(i, 0);
            for (j, p) in pooled.iter().enumerate() {
                acc += wc.get(i, j) * p;
            }
            assert!((h.get(i, 0) - acc.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn audio_pool_weight_shrinks_with_frames() {
        // With only the audio path active, h = tanh(W_a g / (n_frames + 1)).
        let cfg = config(3);
        let mut params = zero_params(cfg);
        let mut rng = SplitMix64::new(21);
        params
            .set_block(Block::WAudio, Tensor::uniform(cfg.d_model, cfg.d_audio, 0.5, &mut rng))
            .unwrap();
        // Identity conditioning to observe the pooled vector directly.
        let mut eye = Tensor::zeros(cfg.d_model, cfg.d_model);
        for i in 0..cfg.d_model {
            eye.set(i, i, 1.0);
        }
        params.set_block(Block::WCond, eye).unwrap();

        let audio: Vec<f64> = (0..cfg.d_audio).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let h_at = |n_frames: usize, prompt_len: usize| {
            let ctx = Context {
                video_tokens: vec![vec![0.0; cfg.d_video]; n_frames],
                audio_vector: audio.clone(),
                prompt_tokens: vec![tokens::PROMPT_AV; prompt_len],
            };
            let tape = Tape::new();
            params.bind_frozen(&tape).encode_context(&ctx).unwrap()
        };

        let h1 = h_at(1, 0);
        let h3 = h_at(3, 2);
        for i in 0..cfg.d_model {
            let a1 = h1.get(i, 0).atanh(); // (W_a g)_i / 2
            let a3 = h3.get(i, 0).atanh(); // (W_a g)_i / 6
            if a1.abs() > 1e-9 {
                assert!((a3 / a1 - 2.0 / 6.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_frames_rejected() {
        let cfg = config(4);
        let params = ModelParams::init(cfg).unwrap();
        let ctx = Context {
            video_tokens: vec![],
            audio_vector: vec![0.0; cfg.d_audio],
            prompt_tokens: vec![tokens::PROMPT_AV],
        };
        let tape = Tape::new();
        assert!(params.bind_frozen(&tape).encode_context(&ctx).is_err());
    }

    #[test]
    fn uniform_head_gives_uniform_logprob() {
        let cfg = config(5);
        let mut params = ModelParams::init(cfg).unwrap();
        params
            .set_block(Block::Head, Tensor::zeros(cfg.vocab_size, cfg.d_model))
            .unwrap();
        let ctx = random_ctx(&mut SplitMix64::new(1), &cfg, 2);
        let y = vec![tokens::VIS_MARK, 12, 13, tokens::EOS];
        let lp = sequence_logprob_value(&params, &ctx, &y).unwrap();
        let expect = -(y.len() as f64) * (cfg.vocab_size as f64).ln();
        assert!((lp - expect).abs() < 1e-9);
    }

    #[test]
    fn logprob_is_nonpositive() {
        let cfg = config(6);
        let params = ModelParams::init(cfg).unwrap();
        let mut rng = SplitMix64::new(17);
        for _ in 0..10 {
            let frames = 1 + rng.index(4);
            let ctx = random_ctx(&mut rng, &cfg, frames);
            let len = 1 + rng.index(5);
            let mut y: Vec<TokenId> = (0..len).map(|_| 2 + rng.index(cfg.vocab_size - 2)).collect();
            y.push(tokens::EOS);
            assert!(sequence_logprob_value(&params, &ctx, &y).unwrap() <= 0.0);
        }
    }

    #[test]
    fn logprob_matches_plain_softmax_oracle() {
        let cfg = config(7);
        let params = ModelParams::init(cfg).unwrap();
        let mut rng = SplitMix64::new(40);
        let ctx = random_ctx(&mut rng, &cfg, 2);
        let y = vec![14, 30, tokens::EOS];

        // Independent oracle: explicit pooled context, fusion, softmax.
        let d = cfg.d_model;
        let matvec = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..m.rows())
                .map(|i| (0..m.cols()).map(|j| m.get(i, j) * v[j]).sum())
                .collect()
        };
        let mut items: Vec<Vec<f64>> = Vec::new();
        for f in &ctx.video_tokens {
            items.push(matvec(params.block(Block::PVideo), f));
        }
        let mut audio = matvec(params.block(Block::WAudio), &ctx.audio_vector);
        for (i, a) in audio.iter_mut().enumerate() {
            *a += params.block(Block::BAudio).get(i, 0);
        }
        items.push(audio);
        for &t in &ctx.prompt_tokens {
            items.push((0..d).map(|j| params.block(Block::Embed).get(t, j)).collect());
        }
        let mut pooled = vec![0.0; d];
        for item in &items {
            for (p, x) in pooled.iter_mut().zip(item) {
                *p += x / items.len() as f64;
            }
        }
        let mut h = matvec(params.block(Block::WCond), &pooled);
        for (i, v) in h.iter_mut().enumerate() {
            *v = (*v + params.block(Block::BCond).get(i, 0)).tanh();
        }
        let mut prev = tokens::BOS;
        let mut total = 0.0;
        for &tok in &y {
            let mut stacked = h.clone();
            stacked.extend((0..d).map(|j| params.block(Block::Embed).get(prev, j)));
            let mut z = matvec(params.block(Block::WFuse), &stacked);
            for (i, v) in z.iter_mut().enumerate() {
                *v = (*v + params.block(Block::BFuse).get(i, 0)).tanh();
            }
            let logits = matvec(params.block(Block::Head), &z);
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            total += logits[tok] - denom.ln();
            prev = tok;
        }

        let got = sequence_logprob_value(&params, &ctx, &y).unwrap();
        assert!((got - total).abs() < 1e-9, "got {got}, oracle {total}");
    }

    #[test]
    fn logprob_additive_over_prefix_splits() {
        let cfg = config(8);
        let params = ModelParams::init(cfg).unwrap();
        let ctx = random_ctx(&mut SplitMix64::new(2), &cfg, 3);
        let y = vec![9, 14, 10, 25, tokens::EOS];

        let tape = Tape::new();
        let model = params.bind_frozen(&tape);
        let h = model.encode_context(&ctx).unwrap();
        let full = model.sequence_logprob_from(&h, tokens::BOS, &y).unwrap().value();
        for k in 1..y.len() {
            let head = model.sequence_logprob_from(&h, tokens::BOS, &y[..k]).unwrap().value();
            let tail = model.sequence_logprob_from(&h, y[k - 1], &y[k..]).unwrap().value();
            assert!((full - (head + tail)).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocab_token_is_an_index_error() {
        let cfg = config(9);
        let params = ModelParams::init(cfg).unwrap();
        let ctx = random_ctx(&mut SplitMix64::new(3), &cfg, 1);
        let err = sequence_logprob_value(&params, &ctx, &[cfg.vocab_size, tokens::EOS]);
        assert!(matches!(err, Err(Error::Index { .. })));
    }

    #[test]
    fn projector_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            d_audio: 5,
            d_video: 4,
            d_model: 6,
            vocab_size: 16,
            max_len: 8,
            seed: 10,
        };
        let mut params = ModelParams::init(cfg).unwrap();
        params.set_trainable(&[Block::WAudio, Block::BAudio]).unwrap();
        let ctx = random_ctx(&mut SplitMix64::new(4), &cfg, 2);
        let y = vec![12, 3, tokens::EOS];

        let tape = Tape::new();
        let model = params.bind(&tape);
        let lp = model.sequence_logprob(&ctx, &y).unwrap();
        let grads = tape.backward(&lp).unwrap();

        for block in [Block::WAudio, Block::BAudio] {
            let analytic = model.grad_of(&grads, block).unwrap();
            let numeric = numerical_grad(
                params.block(block),
                |t| {
                    let mut probe = params.clone();
                    probe.set_block(block, t.detach()).unwrap();
                    sequence_logprob_value(&probe, &ctx, &y).unwrap()
                },
                1e-5,
            );
            assert!(
                max_grad_mismatch(analytic, &numeric, 1e-4).is_none(),
                "finite differences disagree for {}",
                block.name()
            );
        }
    }

    #[test]
    fn frozen_blocks_get_no_gradients() {
        let cfg = config(11);
        let mut params = ModelParams::init(cfg).unwrap();
        params.set_trainable(&[Block::WAudio, Block::BAudio]).unwrap();
        let ctx = random_ctx(&mut SplitMix64::new(6), &cfg, 2);

        let tape = Tape::new();
        let model = params.bind(&tape);
        let lp = model.sequence_logprob(&ctx, &[12, tokens::EOS]).unwrap();
        let grads = tape.backward(&lp).unwrap();

        for b in ALL_BLOCKS {
            let got = model.grad_of(&grads, b).is_some();
            let want = matches!(b, Block::WAudio | Block::BAudio);
            assert_eq!(got, want, "block {}", b.name());
        }
    }

    #[test]
    fn video_projector_cannot_be_marked_trainable() {
        let cfg = config(12);
        let mut params = ModelParams::init(cfg).unwrap();
        assert!(params.set_trainable(&[Block::PVideo]).is_err());
    }

    #[test]
    fn zero_head_decodes_eos_immediately() {
        let cfg = config(13);
        let mut params = ModelParams::init(cfg).unwrap();
        params
            .set_block(Block::Head, Tensor::zeros(cfg.vocab_size, cfg.d_model))
            .unwrap();
        let ctx = random_ctx(&mut SplitMix64::new(8), &cfg, 2);
        // Uniform logits: argmax tie breaks to the lowest non-BOS id, EOS.
        assert_eq!(greedy_decode(&params, &ctx, 8).unwrap(), vec![tokens::EOS]);
    }

    #[test]
    fn decode_is_deterministic_and_never_emits_bos() {
        let cfg = config(14);
        let params = ModelParams::init(cfg).unwrap();
        let mut rng = SplitMix64::new(31);
        for _ in 0..10 {
            let frames = 1 + rng.index(4);
            let ctx = random_ctx(&mut rng, &cfg, frames);
            let a = greedy_decode(&params, &ctx, cfg.max_len).unwrap();
            let b = greedy_decode(&params, &ctx, cfg.max_len).unwrap();
            assert_eq!(a, b);
            assert!(!a.contains(&tokens::BOS));
            assert!(a.len() <= cfg.max_len);
        }
        assert!(greedy_decode(&params, &random_ctx(&mut rng, &cfg, 1), cfg.max_len + 1).is_err());
    }

    #[test]
    fn yes_no_tie_predicts_no() {
        let cfg = config(15);
        let mut params = ModelParams::init(cfg).unwrap();
        params
            .set_block(Block::Head, Tensor::zeros(cfg.vocab_size, cfg.d_model))
            .unwrap();
        let ctx = Context {
            prompt_tokens: vec![tokens::Q_HEAR, 20],
            ..random_ctx(&mut SplitMix64::new(9), &cfg, 2)
        };
        let (yes, no) = yes_no_score(&params, &ctx).unwrap();
        let uniform = -(cfg.vocab_size as f64).ln();
        assert!((yes - uniform).abs() < 1e-12);
        assert!((no - uniform).abs() < 1e-12);
        assert!(!predicts_yes(yes, no));
    }

    #[test]
    fn head_shift_leaves_decision_unchanged() {
        // Adding a constant to every entry of U shifts all logits by the
        // same amount, which log-softmax normalization cancels.
        let cfg = config(16);
        let params = ModelParams::init(cfg).unwrap();
        let mut shifted = params.clone();
        let mut u = shifted.block(Block::Head).detach();
        for i in 0..u.rows() {
            for j in 0..u.cols() {
                let v = u.get(i, j) + 3.7;
                u.set(i, j, v);
            }
        }
        shifted.set_block(Block::Head, u).unwrap();

        let mut rng = SplitMix64::new(10);
        for _ in 0..20 {
            let frames = 1 + rng.index(4);
            let ctx = Context {
                prompt_tokens: vec![tokens::Q_SEE, 15],
                ..random_ctx(&mut rng, &cfg, frames)
            };
            let (yes, no) = yes_no_score(&params, &ctx).unwrap();
            let (yes2, no2) = yes_no_score(&shifted, &ctx).unwrap();
            assert_eq!(predicts_yes(yes, no), predicts_yes(yes2, no2));
            assert!((yes - yes2).abs() < 1e-9 && (no - no2).abs() < 1e-9);
        }
    }

    #[test]
    fn yes_no_requires_question_head() {
        let cfg = config(17);
        let params = ModelParams::init(cfg).unwrap();
        let ctx = random_ctx(&mut SplitMix64::new(11), &cfg, 1);
        assert!(matches!(yes_no_score(&params, &ctx), Err(Error::Input(_))));
    }

    #[test]
    fn concurrent_scoring_matches_sequential() {
        let cfg = config(19);
        let params = ModelParams::init(cfg).unwrap();
        let mut rng = SplitMix64::new(77);
        let contexts: Vec<Context> = (0..8)
            .map(|_| {
                let frames = 1 + rng.index(3);
                random_ctx(&mut rng, &cfg, frames)
            })
            .collect();
        let y = vec![12, 30, tokens::EOS];

        let sequential: Vec<u64> = contexts
            .iter()
            .map(|ctx| sequence_logprob_value(&params, ctx, &y).unwrap().to_bits())
            .collect();

        let parallel: Vec<u64> = std::thread::scope(|scope| {
            let handles: Vec<_> = contexts
                .iter()
                .map(|ctx| {
                    let params = &params;
                    let y = &y;
                    scope.spawn(move || sequence_logprob_value(params, ctx, y).unwrap().to_bits())
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(sequential, parallel);
    }

    #[test]
    fn snapshot_is_deep_and_frozen() {
        let cfg = config(18);
        let mut params = ModelParams::init(cfg).unwrap();
        params.set_trainable(&[Block::WAudio, Block::BAudio]).unwrap();
        let snap = snapshot_reference(&params);

        for b in ALL_BLOCKS {
            assert_eq!(params.block(b).data(), snap.block(b).data());
            assert!(!snap.is_trainable(b));
        }

        let mut contexts = Vec::new();
        let mut rng = SplitMix64::new(12);
        for _ in 0..10 {
            let frames = 1 + rng.index(3);
            contexts.push(random_ctx(&mut rng, &cfg, frames));
        }
        let y = vec![11, 24, tokens::EOS];
        for ctx in &contexts {
            let a = sequence_logprob_value(&params, ctx, &y).unwrap();
            let b = sequence_logprob_value(&snap, ctx, &y).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // Mutating the source must not leak into the snapshot.
        let zero = Tensor::zeros(cfg.d_model, cfg.d_audio);
        params.set_block(Block::WAudio, zero).unwrap();
        assert_ne!(params.block(Block::WAudio).data(), snap.block(Block::WAudio).data());
    }
}
