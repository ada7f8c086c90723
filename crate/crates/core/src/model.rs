//! The networks: a self-attention encoder with a CTC head, the token
//! acoustic extractor, the single-step non-autoregressive decoder, and an
//! autoregressive baseline decoder sharing the same encoder layout.
//!
//! All blocks are pre-norm residual blocks. Parameter names are prefixed by
//! component (`enc.`, `ext.`, `nat.`, `at.`) so an encoder trained alone can
//! be loaded into any full model.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment_map::TriggerMaskSet;
use crate::ctc_lattice::{mix_seed, viterbi_align, PosteriorGrid};
use crate::error::{Error, Result};
use crate::numerics::kernels::log_softmax_rows;
use crate::numerics::{
    sinusoidal_positional_encoding, AttentionMask, ConvGeom, Embedding, FeedForward, KvCache, LayerNorm, Linear,
    MaskMode, MultiHeadAttention, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::synth_data::Utterance;

/// Start- and end-of-sequence id of the autoregressive decoder. It shares
/// the blank id, which never occurs in a transcript.
pub const SOS: usize = 0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frontend {
    /// Stack `subsample_factor` consecutive frames, then project.
    #[default]
    Stack,
    /// Stride-2 3×3 convolutions, one per factor of two.
    Conv,
}

impl std::str::FromStr for Frontend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stack" | "stack-project" => Ok(Self::Stack),
            "conv" => Ok(Self::Conv),
            o => Err(Error::Config(format!("unknown frontend `{o}`"))),
        }
    }
}

impl fmt::Display for Frontend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stack => "stack",
            Self::Conv => "conv",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_enc: usize,
    pub n_self: usize,
    pub n_mix: usize,
    /// Blocks of the autoregressive baseline decoder.
    pub n_at_dec: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Number of real tokens; ids run `1..=vocab`, 0 is blank.
    pub vocab: usize,
    pub d_feat: usize,
    pub subsample_factor: usize,
    pub frontend: Frontend,
    pub conv_channels: usize,
    pub dropout: f64,
    pub label_smooth: f64,
    /// Weight of the CTC term in the joint loss.
    pub task_ratio: f64,
    pub mask_mode: MaskMode,
    pub extend_last: bool,
    /// Whether the extractor has a feed-forward sublayer after its attention.
    pub extractor_ffn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_enc: 4,
            n_self: 2,
            n_mix: 2,
            n_at_dec: 4,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab: 32,
            d_feat: 16,
            subsample_factor: 4,
            frontend: Frontend::Stack,
            conv_channels: 16,
            dropout: 0.1,
            label_smooth: 0.1,
            task_ratio: 1.0,
            mask_mode: MaskMode::PreSoftmax,
            extend_last: false,
            extractor_ffn: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads must divide d_model");
        }
        if self.subsample_factor == 0 {
            return bad("subsample_factor must be at least 1");
        }
        if self.frontend == Frontend::Conv && !self.subsample_factor.is_power_of_two() {
            return bad("the conv frontend needs a power-of-two subsample_factor");
        }
        if !(self.task_ratio >= 0.0 && self.task_ratio.is_finite()) {
            return bad("task_ratio must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smooth) {
            return bad("dropout and label_smooth must be in [0, 1)");
        }
        if self.vocab == 0 || self.d_feat == 0 || self.d_model == 0 || self.n_enc == 0 {
            return bad("vocab, d_feat, d_model and n_enc must be positive");
        }
        if self.n_at_dec == 0 || self.n_self + self.n_mix == 0 {
            return bad("decoders need at least one block");
        }
        Ok(())
    }

    /// Output classes of every head: blank plus the vocabulary.
    pub fn classes(&self) -> usize {
        self.vocab + 1
    }

    pub fn encoder_frames(&self, raw_frames: usize) -> usize {
        raw_frames.div_ceil(self.subsample_factor)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

#[derive(Clone, Debug)]
struct SelfBlock {
    ln_att: LayerNorm,
    att: MultiHeadAttention,
    ln_ff: LayerNorm,
    ffn: FeedForward,
}

impl SelfBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            ln_att: LayerNorm::new(store, &format!("{name}.ln_att"), cfg.d_model),
            att: MultiHeadAttention::new(store, &format!("{name}.att"), cfg.d_model, cfg.heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng),
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        let h = self.ln_att.forward(tape, x)?;
        let h = self.att.forward(tape, h, h, mask)?;
        let h = tape.dropout(h);
        let x = tape.add(x, h)?;
        residual_ffn(tape, x, &self.ln_ff, &self.ffn)
    }
}

fn residual_ffn(tape: &mut Tape, x: Var, ln: &LayerNorm, ffn: &FeedForward) -> Result<Var> {
    let h = ln.forward(tape, x)?;
    let h = ffn.forward(tape, h)?;
    let h = tape.dropout(h);
    tape.add(x, h)
}

/// Self-attention, then source attention over encoder frames, then FFN.
#[derive(Clone, Debug)]
struct MixBlock {
    ln_self: LayerNorm,
    self_att: MultiHeadAttention,
    ln_src: LayerNorm,
    src_att: MultiHeadAttention,
    ln_ff: LayerNorm,
    ffn: FeedForward,
}

impl MixBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), cfg.d_model),
            self_att: MultiHeadAttention::new(store, &format!("{name}.self_att"), cfg.d_model, cfg.heads, rng)?,
            ln_src: LayerNorm::new(store, &format!("{name}.ln_src"), cfg.d_model),
            src_att: MultiHeadAttention::new(store, &format!("{name}.src_att"), cfg.d_model, cfg.heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng),
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        self_mask: &Arc<AttentionMask>,
        src: &KvCache,
        src_mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let h = self.ln_self.forward(tape, x)?;
        let h = self.self_att.forward(tape, h, h, self_mask)?;
        let h = tape.dropout(h);
        let x = tape.add(x, h)?;
        self.source_and_ffn(tape, x, src, src_mask)
    }

    fn source_and_ffn(&self, tape: &mut Tape, x: Var, src: &KvCache, src_mask: &Arc<AttentionMask>) -> Result<Var> {
        let h = self.ln_src.forward(tape, x)?;
        let h = self.src_att.attend(tape, h, src, src_mask)?;
        let h = tape.dropout(h);
        let x = tape.add(x, h)?;
        residual_ffn(tape, x, &self.ln_ff, &self.ffn)
    }
}

#[derive(Clone, Debug)]
enum FrontendLayers {
    Stack(Linear),
    Conv { convs: Vec<(ParamId, ParamId)>, proj: Linear },
}

/// Encoder hidden states and CTC logits of one utterance.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub ctc_logits: Var,
    /// `true` for frames backed by real input.
    pub pad_mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn valid_frames(&self) -> usize {
        self.pad_mask.iter().filter(|&&b| b).count()
    }

    /// CTC posteriors over the valid frames.
    pub fn grid(&self, tape: &Tape) -> Result<PosteriorGrid> {
        let logits = tape.value(self.ctc_logits);
        let valid = self.valid_frames();
        PosteriorGrid::from_logits(valid, logits.cols(), &logits.data()[..valid * logits.cols()])
    }

    fn source_mask(&self, rows: usize) -> Result<Arc<AttentionMask>> {
        if self.pad_mask.iter().all(|&b| b) {
            Ok(Arc::new(AttentionMask::full(rows, self.frames())))
        } else {
            Ok(Arc::new(AttentionMask::keys_valid(rows, &self.pad_mask)?))
        }
    }

    /// Trigger masks widened with blocked columns for padding frames.
    fn trigger_mask(&self, masks: &TriggerMaskSet) -> Result<Arc<AttentionMask>> {
        let valid = self.valid_frames();
        if masks.frame_count != valid {
            return Err(Error::Shape(format!(
                "trigger masks cover {} frames, encoder has {valid}",
                masks.frame_count
            )));
        }
        let total = self.frames();
        if total == valid {
            return Ok(masks.masks.clone());
        }
        let mut bits = vec![false; masks.token_count() * total];
        for u in 0..masks.token_count() {
            bits[u * total..u * total + valid].copy_from_slice(masks.masks.row(u));
        }
        Ok(Arc::new(AttentionMask::new(masks.token_count(), total, bits)?))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    frontend: FrontendLayers,
    blocks: Vec<SelfBlock>,
    norm: LayerNorm,
    ctc: Linear,
    factor: usize,
    d_feat: usize,
    d_model: usize,
    channels: usize,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let frontend = match cfg.frontend {
            Frontend::Stack => FrontendLayers::Stack(Linear::new(
                store,
                "enc.front.proj",
                cfg.subsample_factor * cfg.d_feat,
                cfg.d_model,
                rng,
            )),
            Frontend::Conv => {
                let n = cfg.subsample_factor.trailing_zeros() as usize;
                let mut convs = Vec::with_capacity(n);
                let mut width = cfg.d_feat;
                for i in 0..n {
                    let c_in = if i == 0 { 1 } else { cfg.conv_channels };
                    let fan = ((c_in + cfg.conv_channels) * 9) as f64;
                    let w = Tensor::matrix(
                        cfg.conv_channels,
                        c_in * 9,
                        uniform(rng, cfg.conv_channels * c_in * 9, (6.0 / fan).sqrt()),
                    )?;
                    convs.push((
                        store.add(format!("enc.front.conv{i}.w"), w),
                        store.add(format!("enc.front.conv{i}.b"), Tensor::zeros(&[cfg.conv_channels])),
                    ));
                    width = width.div_ceil(2);
                }
                let c_last = if n == 0 { 1 } else { cfg.conv_channels };
                let proj = Linear::new(store, "enc.front.proj", c_last * width, cfg.d_model, rng);
                FrontendLayers::Conv { convs, proj }
            }
        };
        let blocks = (0..cfg.n_enc)
            .map(|i| SelfBlock::new(store, &format!("enc.blk{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            frontend,
            blocks,
            norm: LayerNorm::new(store, "enc.norm", cfg.d_model),
            ctc: Linear::new(store, "enc.ctc", cfg.d_model, cfg.classes(), rng),
            factor: cfg.subsample_factor,
            d_feat: cfg.d_feat,
            d_model: cfg.d_model,
            channels: cfg.conv_channels,
        })
    }

    /// Encode `features` (`T × d_feat`); rows at or beyond `valid_raw` are
    /// padding and are masked out of every attention.
    pub fn forward(&self, tape: &mut Tape, features: &Tensor, valid_raw: usize) -> Result<EncoderOutput> {
        let (t, d) = (features.rows(), features.cols());
        if d != self.d_feat {
            return Err(Error::Shape(format!("features have {d} dims, model expects {}", self.d_feat)));
        }
        if valid_raw < self.factor || valid_raw > t {
            return Err(Error::Shape(format!(
                "{valid_raw} valid frames of {t}; need at least {}",
                self.factor
            )));
        }
        let frames = t.div_ceil(self.factor);
        let valid = valid_raw.div_ceil(self.factor);
        let x = match &self.frontend {
            FrontendLayers::Stack(proj) => {
                let mut data = features.data().to_vec();
                data.resize(frames * self.factor * d, 0.0);
                let x = tape.constant(Tensor::matrix(frames, self.factor * d, data)?);
                proj.forward(tape, x)?
            }
            FrontendLayers::Conv { convs, proj } => {
                let mut x = tape.constant(features.clone());
                let (mut h, mut w, mut c) = (t, d, 1);
                for &(wp, bp) in convs {
                    let geom = ConvGeom {
                        c_in: c,
                        c_out: self.channels,
                        h_in: h,
                        w_in: w,
                    };
                    let (wv, bv) = (tape.param(wp), tape.param(bp));
                    x = tape.conv2d(x, wv, bv, geom)?;
                    x = tape.relu(x);
                    (h, w, c) = (geom.h_out(), geom.w_out(), self.channels);
                }
                proj.forward(tape, x)?
            }
        };
        let pe = tape.constant(sinusoidal_positional_encoding(frames, self.d_model)?);
        let x = tape.add(x, pe)?;
        let mut x = tape.dropout(x);
        let pad_mask: Vec<bool> = (0..frames).map(|i| i < valid).collect();
        let mask = if valid == frames {
            Arc::new(AttentionMask::full(frames, frames))
        } else {
            Arc::new(AttentionMask::keys_valid(frames, &pad_mask)?)
        };
        for block in &self.blocks {
            x = block.forward(tape, x, &mask)?;
        }
        let hidden = self.norm.forward(tape, x)?;
        let ctc_logits = self.ctc.forward(tape, hidden)?;
        Ok(EncoderOutput {
            hidden,
            ctc_logits,
            pad_mask,
        })
    }
}

/// One source-attention layer whose queries are positional encodings and
/// whose attention is restricted by the trigger masks.
#[derive(Clone, Debug)]
pub struct Extractor {
    att: MultiHeadAttention,
    ffn: Option<(LayerNorm, FeedForward)>,
    d_model: usize,
}

impl Extractor {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let att = MultiHeadAttention::new(store, "ext.att", cfg.d_model, cfg.heads, rng)?;
        let ffn = cfg.extractor_ffn.then(|| {
            (
                LayerNorm::new(store, "ext.ln_ff", cfg.d_model),
                FeedForward::new(store, "ext.ffn", cfg.d_model, cfg.d_ff, rng),
            )
        });
        Ok(Self {
            att,
            ffn,
            d_model: cfg.d_model,
        })
    }

    pub fn project(&self, tape: &mut Tape, hidden: Var) -> Result<KvCache> {
        self.att.project_kv(tape, hidden)
    }

    pub fn forward(&self, tape: &mut Tape, memory: &KvCache, mask: &Arc<AttentionMask>) -> Result<Var> {
        let q = tape.constant(sinusoidal_positional_encoding(mask.rows(), self.d_model)?);
        let a = self.att.attend(tape, q, memory, mask)?;
        let a = tape.dropout(a);
        let x = tape.add(q, a)?;
        match &self.ffn {
            Some((ln, ffn)) => residual_ffn(tape, x, ln, ffn),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NatDecoder {
    self_blocks: Vec<SelfBlock>,
    mix_blocks: Vec<MixBlock>,
    norm: LayerNorm,
    out: Linear,
}

impl NatDecoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            self_blocks: (0..cfg.n_self)
                .map(|i| SelfBlock::new(store, &format!("nat.self{i}"), cfg, rng))
                .collect::<Result<_>>()?,
            mix_blocks: (0..cfg.n_mix)
                .map(|i| MixBlock::new(store, &format!("nat.mix{i}"), cfg, rng))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, "nat.norm", cfg.d_model),
            out: Linear::new(store, "nat.out", cfg.d_model, cfg.classes(), rng),
        })
    }

    /// Source-attention memories of every mix block.
    pub fn project(&self, tape: &mut Tape, hidden: Var) -> Result<Vec<KvCache>> {
        self.mix_blocks.iter().map(|b| b.src_att.project_kv(tape, hidden)).collect()
    }

    /// All positions in one pass with bidirectional self-attention.
    pub fn forward(
        &self,
        tape: &mut Tape,
        emb: Var,
        memories: &[KvCache],
        src_mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let u = tape.value(emb).rows();
        let self_mask = Arc::new(AttentionMask::full(u, u));
        let mut x = emb;
        for b in &self.self_blocks {
            x = b.forward(tape, x, &self_mask)?;
        }
        for (b, mem) in self.mix_blocks.iter().zip(memories) {
            x = b.forward(tape, x, &self_mask, mem, src_mask)?;
        }
        let x = self.norm.forward(tape, x)?;
        self.out.forward(tape, x)
    }
}

#[derive(Clone, Debug)]
pub struct AtDecoder {
    embed: Embedding,
    blocks: Vec<MixBlock>,
    norm: LayerNorm,
    out: Linear,
    d_model: usize,
}

impl AtDecoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            embed: Embedding::new(store, "at.emb", cfg.classes(), cfg.d_model, rng),
            blocks: (0..cfg.n_at_dec)
                .map(|i| MixBlock::new(store, &format!("at.blk{i}"), cfg, rng))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, "at.norm", cfg.d_model),
            out: Linear::new(store, "at.out", cfg.d_model, cfg.classes(), rng),
            d_model: cfg.d_model,
        })
    }

    pub fn project(&self, tape: &mut Tape, hidden: Var) -> Result<Vec<KvCache>> {
        self.blocks.iter().map(|b| b.src_att.project_kv(tape, hidden)).collect()
    }

    fn embed(&self, tape: &mut Tape, ids: &[usize], offset: usize) -> Result<Var> {
        let e = self.embed.forward(tape, ids)?;
        let e = tape.scale(e, (self.d_model as f64).sqrt());
        let pe = sinusoidal_positional_encoding(offset + ids.len(), self.d_model)?;
        let rows = pe.data()[offset * self.d_model..].to_vec();
        let pe = tape.constant(Tensor::matrix(ids.len(), self.d_model, rows)?);
        let x = tape.add(e, pe)?;
        Ok(tape.dropout(x))
    }

    /// Logits for every position of `input` under a causal self-attention mask.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &[usize],
        memories: &[KvCache],
        src_mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let mut x = self.embed(tape, input, 0)?;
        let causal = Arc::new(AttentionMask::causal(input.len()));
        for (b, mem) in self.blocks.iter().zip(memories) {
            x = b.forward(tape, x, &causal, mem, src_mask)?;
        }
        let x = self.norm.forward(tape, x)?;
        self.out.forward(tape, x)
    }

    /// Logits of the newest position, reusing per-block self-attention
    /// memories of the earlier positions.
    fn step(
        &self,
        tape: &mut Tape,
        token: usize,
        position: usize,
        cache: &mut Vec<KvCache>,
        memories: &[KvCache],
        src_mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let mut x = self.embed(tape, &[token], position)?;
        for (i, (b, mem)) in self.blocks.iter().zip(memories).enumerate() {
            let h = b.ln_self.forward(tape, x)?;
            let kv = b.self_att.project_kv(tape, h)?;
            if i < cache.len() {
                cache[i].extend(tape, &kv)?;
            } else {
                cache.push(kv);
            }
            let mask = Arc::new(AttentionMask::full(1, cache[i].len()));
            let a = b.self_att.attend(tape, h, &cache[i], &mask)?;
            x = tape.add(x, a)?;
            x = b.source_and_ffn(tape, x, mem, src_mask)?;
        }
        let x = self.norm.forward(tape, x)?;
        self.out.forward(tape, x)
    }
}

fn build_store(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore, Encoder, ChaCha8Rng)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let encoder = Encoder::new(&mut store, cfg, &mut rng)?;
    Ok((store, encoder, ChaCha8Rng::seed_from_u64(mix_seed(seed, 2))))
}

fn load_into(store: &mut ParamStore, source: &ParamStore) -> Result<()> {
    if source.len() != store.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, model has {}",
            source.len(),
            store.len()
        )));
    }
    store.load_all(source)
}

/// Features of an utterance as a `T × d_feat` tensor.
pub fn features_tensor(utt: &Utterance) -> Result<Tensor> {
    Tensor::matrix(utt.n_frames(), utt.d_feat, utt.features_f64())
}

/// Encoder and CTC head alone, used for encoder pre-training.
#[derive(Clone, Debug)]
pub struct CtcModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
}

impl CtcModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (params, encoder, _) = build_store(&config, seed)?;
        Ok(Self {
            config,
            params,
            encoder,
        })
    }

    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        load_into(&mut m.params, params)?;
        Ok(m)
    }
}

/// The full non-autoregressive model.
#[derive(Clone, Debug)]
pub struct CassNat {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub extractor: Extractor,
    pub decoder: NatDecoder,
}

impl CassNat {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (mut params, encoder, mut rng) = build_store(&config, seed)?;
        let extractor = Extractor::new(&mut params, &config, &mut rng)?;
        let decoder = NatDecoder::new(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            extractor,
            decoder,
        })
    }

    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        load_into(&mut m.params, params)?;
        Ok(m)
    }

    /// Copy `enc.*` tensors from a pre-trained encoder.
    pub fn load_encoder(&mut self, encoder: &ParamStore) -> Result<usize> {
        self.params.load_matching(encoder, &["enc."])
    }

    pub fn encode(&self, tape: &mut Tape, features: &Tensor, valid_raw: usize) -> Result<EncoderOutput> {
        self.encoder.forward(tape, features, valid_raw)
    }

    /// Token-level acoustic embeddings, `U' × d_model`.
    pub fn extract_token_embeddings(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        masks: &TriggerMaskSet,
    ) -> Result<Var> {
        let memory = self.extractor.project(tape, enc.hidden)?;
        let mask = enc.trigger_mask(masks)?;
        self.extractor.forward(tape, &memory, &mask)
    }

    /// Logits for all `U'` positions in one pass.
    pub fn decode_nat(&self, tape: &mut Tape, emb: Var, enc: &EncoderOutput) -> Result<Var> {
        let memories = self.decoder.project(tape, enc.hidden)?;
        let src = enc.source_mask(tape.value(emb).rows())?;
        self.decoder.forward(tape, emb, &memories, &src)
    }
}

/// Encoder plus autoregressive decoder.
#[derive(Clone, Debug)]
pub struct AtModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: AtDecoder,
}

impl AtModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (mut params, encoder, mut rng) = build_store(&config, seed)?;
        let decoder = AtDecoder::new(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        load_into(&mut m.params, params)?;
        Ok(m)
    }

    pub fn load_encoder(&mut self, encoder: &ParamStore) -> Result<usize> {
        self.params.load_matching(encoder, &["enc."])
    }

    /// Logits for every position of `prefix` (which starts with [`SOS`]).
    pub fn decode_at(&self, tape: &mut Tape, prefix: &[usize], enc: &EncoderOutput) -> Result<Var> {
        if prefix.first() != Some(&SOS) {
            return Err(Error::Config("autoregressive prefix must start with SOS".into()));
        }
        let memories = self.decoder.project(tape, enc.hidden)?;
        let src = enc.source_mask(prefix.len())?;
        self.decoder.forward(tape, prefix, &memories, &src)
    }
}

/// Loss of one batch, averaged over the utterances that were usable.
pub struct BatchLoss {
    pub total: Var,
    /// Mean decoder (or sole) term per used utterance.
    pub primary: f64,
    /// Mean CTC term per used utterance.
    pub ctc: f64,
    pub used: usize,
    pub skipped: usize,
    /// Viterbi labels used for each utterance (NAT loss only).
    pub alignments: Vec<Option<Vec<usize>>>,
}

fn finish(tape: &mut Tape, terms: Vec<Var>, primary: f64, ctc: f64, skipped: usize, alignments: Vec<Option<Vec<usize>>>) -> Result<BatchLoss> {
    let used = terms.len();
    let total = match terms.split_first() {
        None => tape.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            tape.scale(acc, 1.0 / used as f64)
        }
    };
    let n = used.max(1) as f64;
    Ok(BatchLoss {
        total,
        primary: primary / n,
        ctc: ctc / n,
        used,
        skipped,
        alignments,
    })
}

/// Summed label-smoothed cross entropy over the rows of `logits`.
fn summed_ce(tape: &mut Tape, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
    let ce = tape.cross_entropy_ls(logits, targets, eps)?;
    Ok(tape.scale(ce, targets.len() as f64))
}

fn ctc_term(tape: &mut Tape, enc: &EncoderOutput, reference: &[usize]) -> Result<Var> {
    let valid = enc.valid_frames();
    let logits = if valid == enc.frames() {
        enc.ctc_logits
    } else {
        tape.slice_rows(enc.ctc_logits, 0, valid)?
    };
    tape.ctc_loss(logits, reference)
}

fn skip(utt: &Utterance, e: &Error) {
    log::warn!("skipping utterance {}: {e}", utt.id);
}

/// CTC-only loss for encoder pre-training.
pub fn ctc_only_loss(model: &CtcModel, tape: &mut Tape, batch: &[&Utterance]) -> Result<BatchLoss> {
    let mut terms = Vec::new();
    let (mut sum, mut skipped) = (0.0, 0);
    for utt in batch {
        let feats = features_tensor(utt)?;
        let enc = model.encoder.forward(tape, &feats, feats.rows())?;
        match ctc_term(tape, &enc, &utt.tokens) {
            Ok(l) => {
                sum += tape.value(l).item();
                terms.push(l);
            }
            Err(e @ Error::Infeasible { .. }) => {
                skip(utt, &e);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    finish(tape, terms, sum, sum, skipped, Vec::new())
}

/// Decoder loss plus `task_ratio` times the CTC loss.
///
/// The decoder input comes from the Viterbi alignment of the reference
/// against the current CTC posteriors (or from `fixed` when given); the
/// alignment itself carries no gradient.
pub fn joint_loss(
    model: &CassNat,
    tape: &mut Tape,
    batch: &[&Utterance],
    fixed: Option<&[Option<Vec<usize>>]>,
) -> Result<BatchLoss> {
    let cfg = &model.config;
    let mut terms = Vec::new();
    let mut alignments = Vec::with_capacity(batch.len());
    let (mut dec_sum, mut ctc_sum, mut skipped) = (0.0, 0.0, 0);
    for (i, utt) in batch.iter().enumerate() {
        let feats = features_tensor(utt)?;
        let enc = model.encode(tape, &feats, feats.rows())?;
        let ctc = match ctc_term(tape, &enc, &utt.tokens) {
            Ok(l) => l,
            Err(e @ Error::Infeasible { .. }) => {
                skip(utt, &e);
                skipped += 1;
                alignments.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        let labels = match fixed.and_then(|f| f.get(i).cloned().flatten()) {
            Some(l) => l,
            None => viterbi_align(&enc.grid(tape)?, &utt.tokens)?.labels,
        };
        let masks = crate::alignment_map::trigger_masks(&labels, cfg.extend_last)?;
        let emb = model.extract_token_embeddings(tape, &enc, &masks)?;
        let logits = model.decode_nat(tape, emb, &enc)?;
        let dec = summed_ce(tape, logits, &utt.tokens, cfg.label_smooth)?;
        dec_sum += tape.value(dec).item();
        ctc_sum += tape.value(ctc).item();
        let weighted = tape.scale(ctc, cfg.task_ratio);
        terms.push(tape.add(dec, weighted)?);
        alignments.push(Some(labels));
    }
    finish(tape, terms, dec_sum, ctc_sum, skipped, alignments)
}

/// Teacher-forced decoder loss (targets followed by end-of-sequence) plus
/// `task_ratio` times the CTC loss.
pub fn at_loss(model: &AtModel, tape: &mut Tape, batch: &[&Utterance]) -> Result<BatchLoss> {
    let cfg = &model.config;
    let mut terms = Vec::new();
    let (mut dec_sum, mut ctc_sum, mut skipped) = (0.0, 0.0, 0);
    for utt in batch {
        let feats = features_tensor(utt)?;
        let enc = model.encoder.forward(tape, &feats, feats.rows())?;
        let ctc = match ctc_term(tape, &enc, &utt.tokens) {
            Ok(l) => l,
            Err(e @ Error::Infeasible { .. }) => {
                skip(utt, &e);
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut input = vec![SOS];
        input.extend_from_slice(&utt.tokens);
        let mut targets = utt.tokens.clone();
        targets.push(SOS);
        let logits = model.decode_at(tape, &input, &enc)?;
        let dec = summed_ce(tape, logits, &targets, cfg.label_smooth)?;
        dec_sum += tape.value(dec).item();
        ctc_sum += tape.value(ctc).item();
        let weighted = tape.scale(ctc, cfg.task_ratio);
        terms.push(tape.add(dec, weighted)?);
    }
    finish(tape, terms, dec_sum, ctc_sum, skipped, Vec::new())
}

fn log_softmax_tensor(t: &Tensor) -> Result<Tensor> {
    Tensor::matrix(t.rows(), t.cols(), log_softmax_rows(t.data(), t.rows(), t.cols()))
}

/// Forward-only decoding state for one utterance: the encoder runs once and
/// every candidate alignment reuses its projected memories.
pub struct NatSession<'m> {
    model: &'m CassNat,
    tape: Tape<'m>,
    enc: EncoderOutput,
    grid: PosteriorGrid,
    extractor_memory: KvCache,
    decoder_memories: Vec<KvCache>,
    mark: usize,
}

impl<'m> NatSession<'m> {
    pub fn new(model: &'m CassNat, features: &Tensor) -> Result<Self> {
        let mut tape = Tape::inference(&model.params).with_mask_mode(model.config.mask_mode);
        let enc = model.encode(&mut tape, features, features.rows())?;
        let grid = enc.grid(&tape)?;
        let extractor_memory = model.extractor.project(&mut tape, enc.hidden)?;
        let decoder_memories = model.decoder.project(&mut tape, enc.hidden)?;
        let mark = tape.mark();
        Ok(Self {
            model,
            tape,
            enc,
            grid,
            extractor_memory,
            decoder_memories,
            mark,
        })
    }

    pub fn grid(&self) -> &PosteriorGrid {
        &self.grid
    }

    /// Decoder log-posteriors, `U' × classes`, for one set of trigger masks.
    pub fn decode(&mut self, masks: &TriggerMaskSet) -> Result<Tensor> {
        self.tape.rewind(self.mark);
        let mask = self.enc.trigger_mask(masks)?;
        let emb = self.model.extractor.forward(&mut self.tape, &self.extractor_memory, &mask)?;
        let src = self.enc.source_mask(masks.token_count())?;
        let logits = self
            .model
            .decoder
            .forward(&mut self.tape, emb, &self.decoder_memories, &src)?;
        log_softmax_tensor(self.tape.value(logits))
    }
}

/// Forward-only autoregressive decoding state for one utterance.
pub struct AtSession<'m> {
    model: &'m AtModel,
    tape: Tape<'m>,
    enc: EncoderOutput,
    grid: PosteriorGrid,
    memories: Vec<KvCache>,
    mark: usize,
}

impl<'m> AtSession<'m> {
    pub fn new(model: &'m AtModel, features: &Tensor) -> Result<Self> {
        let mut tape = Tape::inference(&model.params).with_mask_mode(model.config.mask_mode);
        let enc = model.encoder.forward(&mut tape, features, features.rows())?;
        let grid = enc.grid(&tape)?;
        let memories = model.decoder.project(&mut tape, enc.hidden)?;
        let mark = tape.mark();
        Ok(Self {
            model,
            tape,
            enc,
            grid,
            memories,
            mark,
        })
    }

    pub fn grid(&self) -> &PosteriorGrid {
        &self.grid
    }

    /// Log-posteriors for every position of `input` in one causal pass.
    pub fn log_probs(&mut self, input: &[usize]) -> Result<Tensor> {
        if input.first() != Some(&SOS) {
            return Err(Error::Config("autoregressive prefix must start with SOS".into()));
        }
        self.tape.rewind(self.mark);
        let src = self.enc.source_mask(input.len())?;
        let logits = self
            .model
            .decoder
            .forward(&mut self.tape, input, &self.memories, &src)?;
        log_softmax_tensor(self.tape.value(logits))
    }

    /// Next-token log-posteriors after `prefix`.
    pub fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let lp = self.log_probs(prefix)?;
        Ok(lp.row(lp.rows() - 1).to_vec())
    }

    /// Teacher-forced `log P(tokens, end)`.
    pub fn score(&mut self, tokens: &[usize]) -> Result<f64> {
        let mut input = vec![SOS];
        input.extend_from_slice(tokens);
        let lp = self.log_probs(&input)?;
        let mut targets = tokens.to_vec();
        targets.push(SOS);
        Ok(targets.iter().enumerate().map(|(i, &y)| lp.row(i)[y]).sum())
    }

    /// Greedy left-to-right decoding with cached self-attention memories.
    /// Stops at the end symbol or after `max_len` tokens.
    pub fn greedy(&mut self, max_len: usize) -> Result<Vec<usize>> {
        self.tape.rewind(self.mark);
        let src = self.enc.source_mask(1)?;
        let mut cache = Vec::with_capacity(self.memories.len());
        let mut out = Vec::new();
        let mut token = SOS;
        for position in 0..max_len {
            let logits = self
                .model
                .decoder
                .step(&mut self.tape, token, position, &mut cache, &self.memories, &src)?;
            let row = self.tape.value(logits).row(0);
            token = argmax(row);
            if token == SOS {
                break;
            }
            out.push(token);
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
