//! Vision and speech encoders.
//!
//! Vision: a convolutional patch tokenizer (kernel = stride = patch size; a
//! separate 3-D tokenizer for video) followed by a transformer stack shared by
//! images and videos. Speech: a strided 1-D convolutional featurizer over the
//! raw waveform followed by transformer layers with a gated, bucketed relative
//! position bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{positions, EncoderBlock, LayerNorm, Linear};
use crate::rng::SeededRng;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};

/// RGB image, values in `[0, 1]`, stored row-major as `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Stack of frames, `[T, H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Mono waveform, samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTensor {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Value("image values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || data.len() != frames * height * width * 3 {
            return Err(Error::Shape(format!(
                "video {frames}x{height}x{width}x3 needs {} values, got {}",
                frames * height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Value("video values must lie in [0, 1]".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn from_frames(frames: &[ImageTensor]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("video needs at least one frame".into()))?;
        if frames.iter().any(|f| f.height != first.height || f.width != first.width) {
            return Err(Error::Shape("video frames differ in size".into()));
        }
        let data = frames.iter().flat_map(|f| f.data.iter().copied()).collect();
        Self::new(frames.len(), first.height, first.width, data)
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.height + y) * self.width + x) * 3 + c]
    }
}

impl AudioTensor {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("audio has no samples".into()));
        }
        if samples.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Value("audio samples must lie in [-1, 1]".into()));
        }
        Ok(Self { samples, sample_rate })
    }
}

/// The raw media attached to one example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Media {
    pub image: Option<ImageTensor>,
    pub video: Option<VideoTensor>,
    pub audio: Option<AudioTensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Vision,
    Speech,
}

/// Encoder output living in a graph: `[len×dim]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSequence {
    pub node: NodeId,
    pub len: usize,
    pub dim: usize,
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionEncoderConfig {
    pub patch: usize,
    pub temporal_stride: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_mult: usize,
    /// Size of the learned positional table.
    pub max_tokens: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            temporal_stride: 2,
            layers: 2,
            heads: 4,
            dim: 64,
            ff_mult: 4,
            max_tokens: 256,
        }
    }
}

impl VisionEncoderConfig {
    pub fn image_tokens(&self, height: usize, width: usize) -> Result<usize> {
        let p = self.patch;
        if height == 0 || width == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(Error::Shape(format!(
                "image {height}x{width} is not divisible by patch size {p} (H={height}, W={width}, P={p})"
            )));
        }
        Ok((height / p) * (width / p))
    }

    pub fn video_tokens(&self, frames: usize, height: usize, width: usize) -> Result<usize> {
        let st = self.temporal_stride;
        if frames == 0 || !frames.is_multiple_of(st) {
            return Err(Error::Shape(format!(
                "video of {frames} frames is not divisible by temporal stride {st}"
            )));
        }
        Ok(frames / st * self.image_tokens(height, width)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeechEncoderConfig {
    /// Kernel = stride of each 1-D convolution, in order.
    pub strides: Vec<usize>,
    pub conv_channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_mult: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
}

impl Default for SpeechEncoderConfig {
    fn default() -> Self {
        Self {
            strides: vec![8, 20],
            conv_channels: 32,
            layers: 2,
            heads: 4,
            dim: 64,
            ff_mult: 4,
            num_buckets: 32,
            max_distance: 128,
        }
    }
}

impl SpeechEncoderConfig {
    /// Samples covered by one output frame.
    pub fn receptive_field(&self) -> usize {
        self.strides.iter().product()
    }

    /// Frame count after the featurizer: floor division by each stride.
    pub fn frames(&self, samples: usize) -> Result<usize> {
        let rf = self.receptive_field();
        if samples < rf {
            return Err(Error::Shape(format!(
                "audio of {samples} samples is shorter than the minimum length {rf}"
            )));
        }
        Ok(self.strides.iter().fold(samples, |n, s| n / s))
    }
}

/// Relative position bucket for key offset `delta = j - i`. Half of the
/// buckets cover each direction; offsets below `num_buckets / 4` get their own
/// bucket, larger ones are log-spaced up to `max_distance`.
pub fn relative_bucket(delta: isize, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let offset = if delta > 0 { half } else { 0 };
    let n = delta.unsigned_abs();
    let max_exact = half / 2;
    let b = if n < max_exact {
        n
    } else {
        let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
        let v = max_exact + (ratio * (half - max_exact) as f64) as usize;
        v.min(half - 1)
    };
    offset + b
}

/// Shared transformer stack plus the two patch tokenizers.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub cfg: VisionEncoderConfig,
    pub patch2d: Linear,
    pub patch3d: Linear,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: crate::nn::LayerNorm,
}

impl VisionEncoder {
    pub const PREFIX: &'static str = "vision.";

    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &VisionEncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        let (p, st, d) = (cfg.patch, cfg.temporal_stride, cfg.dim);
        let patch2d = Linear::new(store, "vision.patch2d", 3 * p * p, d, rng)?;
        let patch3d = Linear::new(store, "vision.patch3d", 3 * st * p * p, d, rng)?;
        let pos = store.add(
            "vision.pos",
            Tensor::uniform(&[cfg.max_tokens, d], 1.0 / (d as f64).sqrt(), rng),
        )?;
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(store, &format!("vision.layers.{i}"), d, cfg.heads, cfg.ff_mult, rng))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "vision.ln_f", d)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch2d,
            patch3d,
            pos,
            blocks,
            ln_f,
        })
    }

    /// Flattened non-overlapping `P×P` patches, row-major over the patch
    /// grid, each patch flattened as `(dy, dx, channel)`.
    pub fn image_patches<F: Real>(&self, img: &ImageTensor) -> Result<Tensor<F>> {
        let n = self.cfg.image_tokens(img.height, img.width)?;
        let p = self.cfg.patch;
        let cols = img.width / p;
        let mut out = Vec::with_capacity(n * 3 * p * p);
        for t in 0..n {
            let (py, px) = (t / cols, t % cols);
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..3 {
                        out.push(F::lit(img.pixel(py * p + dy, px * p + dx, c) as f64));
                    }
                }
            }
        }
        Tensor::new(vec![n, 3 * p * p], out)
    }

    /// Flattened `S_t×P×P` tubelets ordered by (time block, row, column), each
    /// flattened as `(dt, dy, dx, channel)`.
    pub fn video_patches<F: Real>(&self, vid: &VideoTensor) -> Result<Tensor<F>> {
        let n = self.cfg.video_tokens(vid.frames, vid.height, vid.width)?;
        let (p, st) = (self.cfg.patch, self.cfg.temporal_stride);
        let (rows, cols) = (vid.height / p, vid.width / p);
        let mut out = Vec::with_capacity(n * 3 * st * p * p);
        for tb in 0..vid.frames / st {
            for py in 0..rows {
                for px in 0..cols {
                    for dt in 0..st {
                        for dy in 0..p {
                            for dx in 0..p {
                                for c in 0..3 {
                                    let v = vid.pixel(tb * st + dt, py * p + dy, px * p + dx, c);
                                    out.push(F::lit(v as f64));
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, 3 * st * p * p], out)
    }

    fn transform<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, tokens: NodeId) -> Result<FeatureSequence> {
        let len = g.shape(tokens)[0];
        if len > self.cfg.max_tokens {
            return Err(Error::Shape(format!(
                "{len} vision tokens exceed the positional table of {}",
                self.cfg.max_tokens
            )));
        }
        let pos = positions(g, s, self.pos, len)?;
        let mut x = g.add(tokens, pos)?;
        for b in &self.blocks {
            x = b.forward(g, s, x, None, None)?;
        }
        let x = self.ln_f.forward(g, s, x)?;
        Ok(FeatureSequence {
            node: x,
            len,
            dim: self.cfg.dim,
            modality: Modality::Vision,
        })
    }

    pub fn encode_image<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, img: &ImageTensor) -> Result<FeatureSequence> {
        let patches = g.input(self.image_patches(img)?);
        let tokens = self.patch2d.forward(g, s, patches)?;
        self.transform(g, s, tokens)
    }

    pub fn encode_video<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, vid: &VideoTensor) -> Result<FeatureSequence> {
        let patches = g.input(self.video_patches(vid)?);
        let tokens = self.patch3d.forward(g, s, patches)?;
        self.transform(g, s, tokens)
    }
}

#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub cfg: SpeechEncoderConfig,
    pub convs: Vec<Linear>,
    pub rel_bias: ParamId,
    pub gates: Vec<ParamId>,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
}

impl SpeechEncoder {
    pub const PREFIX: &'static str = "speech.";

    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &SpeechEncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        if cfg.strides.is_empty() || cfg.strides.contains(&0) {
            return Err(Error::Config("speech strides must be a non-empty list of positive integers".into()));
        }
        let mut convs = Vec::new();
        let mut channels = 1;
        for (i, &s) in cfg.strides.iter().enumerate() {
            let out = if i + 1 == cfg.strides.len() {
                cfg.dim
            } else {
                cfg.conv_channels
            };
            convs.push(Linear::new(store, &format!("speech.conv{i}"), s * channels, out, rng)?);
            channels = out;
        }
        let rel_bias = store.add(
            "speech.rel_bias",
            Tensor::uniform(&[cfg.num_buckets, cfg.heads], 0.1, rng),
        )?;
        let mut gates = Vec::new();
        let mut blocks = Vec::new();
        for i in 0..cfg.layers {
            gates.push(store.add(format!("speech.layers.{i}.gate"), Tensor::zeros(&[cfg.heads]))?);
            blocks.push(EncoderBlock::new(
                store,
                &format!("speech.layers.{i}"),
                cfg.dim,
                cfg.heads,
                cfg.ff_mult,
                rng,
            )?);
        }
        let ln_f = LayerNorm::new(store, "speech.ln_f", cfg.dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            convs,
            rel_bias,
            gates,
            blocks,
            ln_f,
        })
    }

    /// Convolutional featurizer output, `[frames×dim]`, before the
    /// transformer layers.
    pub fn featurize<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, audio: &AudioTensor) -> Result<NodeId> {
        let frames = self.cfg.frames(audio.samples.len())?;
        let s0 = self.cfg.strides[0];
        let l0 = audio.samples.len() / s0;
        let wav: Vec<F> = audio.samples[..l0 * s0].iter().map(|&v| F::lit(v as f64)).collect();
        let mut x = g.input(Tensor::new(vec![l0, s0], wav)?);
        let mut len = l0;
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                let st = self.cfg.strides[i];
                let ch = g.shape(x)[1];
                let keep = len / st;
                if keep * st != len {
                    x = g.slice_rows(x, 0, keep * st)?;
                }
                x = g.reshape(x, &[keep, st * ch])?;
                len = keep;
            }
            x = conv.forward(g, s, x)?;
            x = g.gelu(x);
        }
        debug_assert_eq!(len, frames);
        Ok(x)
    }

    pub fn encode_audio<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, audio: &AudioTensor) -> Result<FeatureSequence> {
        self.encode_audio_with(g, s, audio, true)
    }

    /// `rel_bias = false` runs the same layers without the position bias.
    pub fn encode_audio_with<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        audio: &AudioTensor,
        rel_bias: bool,
    ) -> Result<FeatureSequence> {
        let mut x = self.featurize(g, s, audio)?;
        let len = g.shape(x)[0];
        let buckets: Vec<usize> = (0..len * len)
            .map(|ij| {
                let (i, j) = ((ij / len) as isize, (ij % len) as isize);
                relative_bucket(j - i, self.cfg.num_buckets, self.cfg.max_distance)
            })
            .collect();
        for (block, &gate) in self.blocks.iter().zip(&self.gates) {
            let bias = if rel_bias {
                let table = g.param(s, self.rel_bias);
                let gate = g.param(s, gate);
                Some(g.rel_pos_bias(table, gate, &buckets, len, len)?)
            } else {
                None
            };
            x = block.forward(g, s, x, bias, None)?;
        }
        let x = self.ln_f.forward(g, s, x)?;
        Ok(FeatureSequence {
            node: x,
            len,
            dim: self.cfg.dim,
            modality: Modality::Speech,
        })
    }
}
