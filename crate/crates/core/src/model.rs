//! The fused vision-language-speech encoder-decoder.
//!
//! Vision and speech features are projected to the text width, tagged with a
//! learned segment embedding and per-segment positions, and concatenated in
//! the fixed order `[vision, speech, text]`. A joint transformer encoder
//! self-attends over the whole sequence; the decoder cross-attends to it in
//! every layer. The output projection is tied to the token embedding table.

use serde::{Deserialize, Serialize};

use crate::encoders::{
    FeatureSequence, Media, Modality, SpeechEncoder, SpeechEncoderConfig, VisionEncoder, VisionEncoderConfig,
};
use crate::error::{Error, Result};
use crate::nn::{positions, table_row, DecoderBlock, EncoderBlock, LayerNorm, Linear};
use crate::rng::SeededRng;
use crate::tensor::{causal_mask, key_mask, Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use crate::text::{TokenId, BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Rows of each positional table; bounds every segment and the target.
    pub max_positions: usize,
    pub vision: VisionEncoderConfig,
    pub speech: SpeechEncoderConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            enc_layers: 4,
            dec_layers: 4,
            heads: 4,
            ff_mult: 4,
            max_positions: 128,
            vision: VisionEncoderConfig::default(),
            speech: SpeechEncoderConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and fast tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ff_mult: 2,
            max_positions: 16,
            vision: VisionEncoderConfig {
                patch: 2,
                temporal_stride: 2,
                layers: 1,
                heads: 2,
                dim: 6,
                ff_mult: 2,
                max_tokens: 16,
            },
            speech: SpeechEncoderConfig {
                strides: vec![2, 3],
                conv_channels: 3,
                layers: 1,
                heads: 2,
                dim: 4,
                ff_mult: 2,
                num_buckets: 8,
                max_distance: 16,
            },
            seed: 0,
        }
    }
}

/// Encoder inputs for one example: optional modality features already in the
/// graph, text ids (prompt ++ input, no framing) and optional validity masks
/// per segment (all valid when `None`).
#[derive(Clone, Debug, Default)]
pub struct MultimodalInput {
    pub vision: Option<FeatureSequence>,
    pub speech: Option<FeatureSequence>,
    pub text_ids: Vec<TokenId>,
    pub vision_valid: Option<Vec<bool>>,
    pub speech_valid: Option<Vec<bool>>,
    pub text_valid: Option<Vec<bool>>,
}

/// Output of the joint encoder.
#[derive(Clone, Debug)]
pub struct FusedMemory {
    pub node: NodeId,
    pub len: usize,
    pub valid: Vec<bool>,
}

/// An example with its text already tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub media: Media,
    pub text_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub mode: DecodeMode,
    pub max_len: usize,
    /// Beam width; ignored by greedy decoding.
    pub width: usize,
    /// Exponent `p` of the beam score `logprob / len^p`.
    pub length_penalty: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_len: 32,
            width: 4,
            length_penalty: 1.0,
        }
    }
}

impl GenerationConfig {
    pub fn beam(width: usize, length_penalty: f64, max_len: usize) -> Self {
        Self {
            mode: DecodeMode::Beam,
            max_len,
            width,
            length_penalty,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.mode == DecodeMode::Beam && self.width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }
}

pub const VISION_SEGMENT: usize = 0;
pub const SPEECH_SEGMENT: usize = 1;
pub const TEXT_SEGMENT: usize = 2;

#[derive(Clone, Debug)]
pub struct TrimodalModel<F> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub vision: VisionEncoder,
    pub speech: SpeechEncoder,
    pub proj_vision: Linear,
    pub proj_speech: Linear,
    pub tok_embed: ParamId,
    pub enc_pos: ParamId,
    pub seg_embed: ParamId,
    pub fusion: Vec<EncoderBlock>,
    pub fusion_ln: LayerNorm,
    pub dec_pos: ParamId,
    pub decoder: Vec<DecoderBlock>,
    pub dec_ln: LayerNorm,
}

impl<F: Real> TrimodalModel<F> {
    /// Seeded random initialization. Parameter order (and therefore the
    /// checkpoint layout) is fixed by construction order.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("d_model {d} is not divisible by {} heads", cfg.heads)));
        }
        if cfg.vocab_size <= EOS {
            return Err(Error::Config("vocab_size is too small".into()));
        }
        let mut rng = SeededRng::new(cfg.seed);
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(&mut store, &cfg.vision, &mut rng)?;
        let speech = SpeechEncoder::new(&mut store, &cfg.speech, &mut rng)?;
        let proj_vision = Linear::new(&mut store, "proj.vision", cfg.vision.dim, d, &mut rng)?;
        let proj_speech = Linear::new(&mut store, "proj.speech", cfg.speech.dim, d, &mut rng)?;
        let emb_bound = 1.0 / (d as f64).sqrt();
        let tok_embed = store.add("embed.tokens", Tensor::uniform(&[cfg.vocab_size, d], emb_bound, &mut rng))?;
        let enc_pos = store.add(
            "embed.enc_pos",
            Tensor::uniform(&[cfg.max_positions, d], emb_bound, &mut rng),
        )?;
        let seg_embed = store.add("embed.segments", Tensor::uniform(&[3, d], emb_bound, &mut rng))?;
        let fusion = (0..cfg.enc_layers)
            .map(|i| EncoderBlock::new(&mut store, &format!("fusion.layers.{i}"), d, cfg.heads, cfg.ff_mult, &mut rng))
            .collect::<Result<_>>()?;
        let fusion_ln = LayerNorm::new(&mut store, "fusion.ln_f", d)?;
        let dec_pos = store.add(
            "decoder.pos",
            Tensor::uniform(&[cfg.max_positions, d], emb_bound, &mut rng),
        )?;
        let decoder = (0..cfg.dec_layers)
            .map(|i| DecoderBlock::new(&mut store, &format!("decoder.layers.{i}"), d, cfg.heads, cfg.ff_mult, &mut rng))
            .collect::<Result<_>>()?;
        let dec_ln = LayerNorm::new(&mut store, "decoder.ln_f", d)?;
        Ok(Self {
            cfg,
            store,
            vision,
            speech,
            proj_vision,
            proj_speech,
            tok_embed,
            enc_pos,
            seg_embed,
            fusion,
            fusion_ln,
            dec_pos,
            decoder,
            dec_ln,
        })
    }

    pub fn count_parameters(&self, trainable_only: bool) -> usize {
        self.store.count(trainable_only)
    }

    /// Freezes or unfreezes every parameter of the two modality encoders.
    pub fn set_encoders_frozen(&mut self, vision: bool, speech: bool) {
        self.store.set_frozen_prefix(VisionEncoder::PREFIX, vision);
        self.store.set_frozen_prefix(SpeechEncoder::PREFIX, speech);
    }

    /// Runs the modality encoders over whatever media is present. An image
    /// takes precedence over nothing; a video is used when there is no image.
    pub fn encode_media(
        &self,
        g: &mut Graph<F>,
        media: &Media,
    ) -> Result<(Option<FeatureSequence>, Option<FeatureSequence>)> {
        let s = &self.store;
        let vision = match (&media.image, &media.video) {
            (Some(_), Some(_)) => {
                return Err(Error::Schema("an example may carry an image or a video, not both".into()))
            }
            (Some(img), None) => Some(self.vision.encode_image(g, s, img)?),
            (None, Some(vid)) => Some(self.vision.encode_video(g, s, vid)?),
            (None, None) => None,
        };
        let speech = match &media.audio {
            Some(a) => Some(self.speech.encode_audio(g, s, a)?),
            None => None,
        };
        Ok((vision, speech))
    }

    fn segment(
        &self,
        g: &mut Graph<F>,
        content: NodeId,
        len: usize,
        segment: usize,
        what: &str,
    ) -> Result<NodeId> {
        if len > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "{what} segment of length {len} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let s = &self.store;
        let pos = positions(g, s, self.enc_pos, len)?;
        let seg = table_row(g, s, self.seg_embed, segment)?;
        let x = g.add(content, pos)?;
        g.add_bias(x, seg)
    }

    fn projected(
        &self,
        g: &mut Graph<F>,
        f: &FeatureSequence,
        proj: &Linear,
        modality: Modality,
        segment: usize,
    ) -> Result<NodeId> {
        let what = format!("{modality:?}").to_lowercase();
        if f.modality != modality || g.shape(f.node) != [f.len, proj.input] {
            return Err(Error::Shape(format!(
                "{what} segment has shape {:?}, expected [{}, {}]",
                g.shape(f.node),
                f.len,
                proj.input
            )));
        }
        let x = proj.forward(g, &self.store, f.node)?;
        self.segment(g, x, f.len, segment, &what)
    }

    /// Projects, tags and concatenates the present segments, then applies the
    /// joint encoder with padding positions masked out as keys.
    pub fn fuse_and_encode(&self, g: &mut Graph<F>, input: &MultimodalInput) -> Result<FusedMemory> {
        let mut parts = Vec::new();
        let mut valid = Vec::new();
        let mut push_valid = |mask: &Option<Vec<bool>>, len: usize, what: &str| -> Result<()> {
            match mask {
                Some(m) if m.len() != len => Err(Error::Shape(format!(
                    "{what} validity mask has {} entries for {len} positions",
                    m.len()
                ))),
                Some(m) => {
                    valid.extend_from_slice(m);
                    Ok(())
                }
                None => {
                    valid.extend(std::iter::repeat_n(true, len));
                    Ok(())
                }
            }
        };
        if let Some(v) = &input.vision {
            parts.push(self.projected(g, v, &self.proj_vision, Modality::Vision, VISION_SEGMENT)?);
            push_valid(&input.vision_valid, v.len, "vision")?;
        }
        if let Some(sp) = &input.speech {
            parts.push(self.projected(g, sp, &self.proj_speech, Modality::Speech, SPEECH_SEGMENT)?);
            push_valid(&input.speech_valid, sp.len, "speech")?;
        }
        if !input.text_ids.is_empty() {
            if let Some(&bad) = input.text_ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
                return Err(Error::Index(format!("text id {bad} out of range for vocab {}", self.cfg.vocab_size)));
            }
            let table = g.param(&self.store, self.tok_embed);
            let e = g.embedding(table, &input.text_ids)?;
            parts.push(self.segment(g, e, input.text_ids.len(), TEXT_SEGMENT, "text")?);
            push_valid(&input.text_valid, input.text_ids.len(), "text")?;
        }
        if parts.is_empty() {
            return Err(Error::Usage("multimodal input has no segment".into()));
        }
        let mut x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let len = valid.len();
        let mask = valid.iter().any(|v| !v).then(|| key_mask(len, &valid));
        for b in &self.fusion {
            x = b.forward(g, &self.store, x, None, mask.as_ref())?;
        }
        let x = self.fusion_ln.forward(g, &self.store, x)?;
        Ok(FusedMemory { node: x, len, valid })
    }

    /// Encodes media and text in one go.
    pub fn memory(&self, g: &mut Graph<F>, media: &Media, text_ids: &[TokenId]) -> Result<FusedMemory> {
        let (vision, speech) = self.encode_media(g, media)?;
        let input = MultimodalInput {
            vision,
            speech,
            text_ids: text_ids.to_vec(),
            ..Default::default()
        };
        self.fuse_and_encode(g, &input)
    }

    /// Decoder logits `[L×V]` for decoder inputs `BOS ++ tokens`.
    pub fn forward_teacher_forced(&self, g: &mut Graph<F>, memory: &FusedMemory, dec_input: &[TokenId]) -> Result<NodeId> {
        if dec_input.is_empty() {
            return Err(Error::Usage("decoder input is empty".into()));
        }
        let len = dec_input.len();
        if len > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "target of length {len} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        if let Some(&bad) = dec_input.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Index(format!("target id {bad} out of range for vocab {}", self.cfg.vocab_size)));
        }
        let s = &self.store;
        let table = g.param(s, self.tok_embed);
        let e = g.embedding(table, dec_input)?;
        let pos = positions(g, s, self.dec_pos, len)?;
        let mut x = g.add(e, pos)?;
        let causal = causal_mask(len);
        let mmask = memory.valid.iter().any(|v| !v).then(|| key_mask(len, &memory.valid));
        for b in &self.decoder {
            x = b.forward(g, s, x, memory.node, &causal, mmask.as_ref())?;
        }
        let x = self.dec_ln.forward(g, s, x)?;
        let et = g.transpose(table)?;
        g.matmul(x, et)
    }

    /// Mean token cross-entropy over a batch (labels `target ++ EOS`).
    pub fn batch_loss(&self, g: &mut Graph<F>, batch: &[&EncodedExample]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let mut logits = Vec::with_capacity(batch.len());
        let mut labels = Vec::new();
        for ex in batch {
            let memory = self.memory(g, &ex.media, &ex.text_ids)?;
            let mut dec_in = Vec::with_capacity(ex.target_ids.len() + 1);
            dec_in.push(BOS);
            dec_in.extend_from_slice(&ex.target_ids);
            logits.push(self.forward_teacher_forced(g, &memory, &dec_in)?);
            labels.extend_from_slice(&ex.target_ids);
            labels.push(EOS);
        }
        let all = if logits.len() == 1 {
            logits[0]
        } else {
            g.concat_rows(&logits)?
        };
        g.cross_entropy(all, &labels, PAD)
    }

    /// Teacher-forced loss of a batch without recording gradients.
    pub fn eval_loss(&self, batch: &[&EncodedExample]) -> Result<f64> {
        let mut g = Graph::inference();
        let l = self.batch_loss(&mut g, batch)?;
        Ok(g.value(l).data()[0].as_f64())
    }

    fn next_logits(&self, memory: &Tensor<F>, valid: &[bool], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let node = g.input(memory.clone());
        let mem = FusedMemory {
            node,
            len: valid.len(),
            valid: valid.to_vec(),
        };
        let logits = self.forward_teacher_forced(&mut g, &mem, prefix)?;
        let v = g.value(logits);
        Ok(v.row(prefix.len() - 1).iter().map(|x| x.as_f64()).collect())
    }

    /// Autoregressive decoding. The returned ids exclude BOS and EOS.
    pub fn generate(&self, media: &Media, text_ids: &[TokenId], cfg: &GenerationConfig) -> Result<Vec<TokenId>> {
        cfg.validate()?;
        let mut g = Graph::inference();
        let mem = self.memory(&mut g, media, text_ids)?;
        let memory = g.value(mem.node).clone();
        let max_len = cfg.max_len.min(self.cfg.max_positions - 1);
        match cfg.mode {
            DecodeMode::Greedy => {
                let mut seq = vec![BOS];
                while seq.len() <= max_len {
                    let logits = self.next_logits(&memory, &mem.valid, &seq)?;
                    let next = argmax(&logits);
                    if next == EOS {
                        break;
                    }
                    seq.push(next);
                }
                Ok(seq[1..].to_vec())
            }
            DecodeMode::Beam => self.beam_search(&memory, &mem.valid, cfg.width, cfg.length_penalty, max_len),
        }
    }

    fn beam_search(
        &self,
        memory: &Tensor<F>,
        valid: &[bool],
        width: usize,
        length_penalty: f64,
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        struct Hyp {
            tokens: Vec<TokenId>,
            logprob: f64,
        }
        let score = |logprob: f64, len: usize| logprob / (len.max(1) as f64).powf(length_penalty);
        let mut live = vec![Hyp {
            tokens: vec![BOS],
            logprob: 0.0,
        }];
        let mut finished: Vec<(f64, Vec<TokenId>)> = Vec::new();
        for _ in 0..=max_len {
            // (score, beam, token, logprob)
            let mut cands: Vec<(f64, usize, TokenId, f64)> = Vec::new();
            for (bi, h) in live.iter().enumerate() {
                let logits = self.next_logits(memory, valid, &h.tokens)?;
                let lse = log_sum_exp(&logits);
                let gen_len = h.tokens.len(); // generated tokens after this step
                for (t, &l) in logits.iter().enumerate() {
                    if t != EOS && h.tokens.len() > max_len {
                        continue;
                    }
                    let lp = h.logprob + (l - lse);
                    cands.push((score(lp, gen_len), bi, t, lp));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (sc, bi, t, lp) in cands.into_iter().take(width) {
                let mut tokens = live[bi].tokens.clone();
                if t == EOS {
                    finished.push((sc, tokens[1..].to_vec()));
                } else {
                    tokens.push(t);
                    next.push(Hyp { tokens, logprob: lp });
                }
            }
            live = next;
            if live.is_empty() || finished.len() >= width {
                break;
            }
        }
        for h in live {
            let len = h.tokens.len() - 1;
            finished.push((score(h.logprob, len), h.tokens[1..].to_vec()));
        }
        finished.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        Ok(finished.into_iter().next().map(|f| f.1).unwrap_or_default())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
