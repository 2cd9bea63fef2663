//! Synthetic corpora whose media deterministically encode their text.
//!
//! Every word of the word table owns a solid RGB color and a pure tone. An
//! image is a one-row grid of color blocks, one per caption word; a video
//! repeats that grid over frames with one block inverted on odd frames; an
//! utterance is one tone segment of one hop per word. Captioning and
//! transcription are therefore solvable from the media alone.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{AudioTensor, ImageTensor, Media, VideoTensor};
use crate::error::{Error, Result};
use crate::objectives::{build_example, RawRecord, SpanMaskSpec, TrainingExample, EMOTION_LABELS, SENTIMENT_LABELS};
use crate::rng::SeededRng;
use crate::task::TaskKind;
use crate::text::PromptRegistry;

use super::records::write_records;
use super::tensor_file::{audio_tensor, encode, image_tensor, video_tensor};
use super::write_atomic;

pub const WORDS: [&str; 64] = [
    "apple", "river", "stone", "cloud", "tiger", "lamp", "forest", "candle", "bridge", "violin", "desert", "window",
    "garden", "rocket", "pepper", "island", "mirror", "castle", "feather", "engine", "pillow", "harbor", "meadow",
    "lantern", "falcon", "copper", "thunder", "basket", "glacier", "saddle", "orchid", "compass", "marble", "ladder",
    "canyon", "whistle", "button", "dolphin", "velvet", "anchor", "puzzle", "comet", "blanket", "spider", "tunnel",
    "walnut", "beacon", "oyster", "quartz", "ribbon", "summit", "kettle", "lizard", "mango", "parrot", "saffron",
    "trumpet", "umbrella", "wagon", "yarn", "zebra", "hammock", "igloo", "jasmine",
];

/// Frequency of word `i`'s tone: `100 (i + 1)` Hz.
pub fn tone_frequency(word: usize) -> f64 {
    100.0 * (word + 1) as f64
}

/// RGB of word `i`: its base-4 digits scaled to `{0, 1/3, 2/3, 1}`.
pub fn block_color(word: usize) -> [f32; 3] {
    let level = |d: usize| d as f32 / 3.0;
    [level(word / 16 % 4), level(word / 4 % 4), level(word % 4)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    /// How many entries of the word table are used.
    pub vocab_size: usize,
    pub examples_per_task: usize,
    /// Per-task overrides of `examples_per_task`.
    pub task_sizes: BTreeMap<String, usize>,
    pub min_len: usize,
    pub max_len: usize,
    /// Side of one color block in pixels.
    pub block: usize,
    pub frames: usize,
    /// Samples per word tone.
    pub hop: usize,
    pub sample_rate: u32,
    pub amplitude: f32,
    pub seed: u64,
    /// Task names to generate; empty means all nine pretraining tasks.
    pub tasks: Vec<String>,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            examples_per_task: 32,
            task_sizes: BTreeMap::new(),
            min_len: 3,
            max_len: 6,
            block: 8,
            frames: 4,
            hop: 160,
            sample_rate: 16_000,
            amplitude: 0.5,
            seed: 0,
            tasks: Vec::new(),
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.vocab_size > WORDS.len() {
            return bad(format!(
                "vocab_size {} must lie in 1..={} (size of the color and tone tables)",
                self.vocab_size,
                WORDS.len()
            ));
        }
        if tone_frequency(self.vocab_size - 1) * 2.0 >= self.sample_rate as f64 {
            return bad(format!("sample_rate {} cannot represent every tone", self.sample_rate));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if self.block == 0 || self.frames == 0 || self.hop == 0 {
            return bad("block, frames and hop must be positive".into());
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return bad("amplitude must lie in (0, 1]".into());
        }
        for t in self.tasks.iter().chain(self.task_sizes.keys()) {
            let kind = TaskKind::parse(t, None)?;
            if !TaskKind::pretraining().contains(&kind) {
                return bad(format!("`{t}` is not a pretraining task"));
            }
        }
        Ok(())
    }

    pub fn task_list(&self) -> Vec<TaskKind> {
        TaskKind::pretraining()
            .iter()
            .filter(|t| self.tasks.is_empty() || self.tasks.iter().any(|n| n == t.name()))
            .cloned()
            .collect()
    }

    fn size_of(&self, task: &TaskKind) -> usize {
        self.task_sizes.get(task.name()).copied().unwrap_or(self.examples_per_task)
    }

    /// Draws a sentence as word-table indices.
    pub fn sentence(&self, rng: &mut SeededRng, min: usize, max: usize) -> Vec<usize> {
        let len = min + rng.below(max - min + 1);
        (0..len).map(|_| rng.below(self.vocab_size)).collect()
    }

    pub fn render_image(&self, words: &[usize]) -> ImageTensor {
        let (b, w) = (self.block, self.block * words.len());
        let mut data = Vec::with_capacity(b * w * 3);
        for _ in 0..b {
            for &word in words {
                let c = block_color(word);
                for _ in 0..b {
                    data.extend_from_slice(&c);
                }
            }
        }
        ImageTensor::new(b, w, data).expect("valid image")
    }

    /// Block `animated` is inverted on odd frames.
    pub fn render_video(&self, words: &[usize], animated: usize) -> VideoTensor {
        let base = self.render_image(words);
        let frames: Vec<ImageTensor> = (0..self.frames)
            .map(|t| {
                let mut f = base.clone();
                if t % 2 == 1 {
                    for y in 0..self.block {
                        for x in animated * self.block..(animated + 1) * self.block {
                            for c in 0..3 {
                                let i = (y * f.width + x) * 3 + c;
                                f.data[i] = 1.0 - f.data[i];
                            }
                        }
                    }
                }
                f
            })
            .collect();
        VideoTensor::from_frames(&frames).expect("valid video")
    }

    pub fn render_audio(&self, words: &[usize]) -> AudioTensor {
        let sr = self.sample_rate as f64;
        let samples = words
            .iter()
            .flat_map(|&w| {
                let f = tone_frequency(w);
                (0..self.hop).map(move |n| (2.0 * std::f64::consts::PI * f * n as f64 / sr).sin())
            })
            .map(|s| self.amplitude * s as f32)
            .collect();
        AudioTensor::new(samples, self.sample_rate).expect("valid audio")
    }
}

pub fn words_text(words: &[usize]) -> String {
    words.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" ")
}

/// Class index from a hash of the content, so labels are a fixed function
/// of the utterance.
pub fn hashed_class(salt: &str, text: &str, classes: usize) -> usize {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    let d = h.finalize();
    (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % classes as u64) as usize
}

/// One generated record with its media held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub record: RawRecord,
    pub media: Media,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub task: TaskKind,
    pub records: Vec<SynthRecord>,
}

impl SynthDataset {
    /// Training examples, span-corrupted exactly as [`super::load_examples`]
    /// would after a round trip through files.
    pub fn examples(&self, prompts: &PromptRegistry, span: &SpanMaskSpec, seed: u64) -> Result<Vec<TrainingExample>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut rng = SeededRng::derive(seed, i as u64);
                build_example(&r.record, &self.task, r.media.clone(), prompts, Some((span, &mut rng)))
            })
            .collect()
    }
}

fn media_name(task: &TaskKind, i: usize, kind: &str) -> String {
    format!("media/{}-{i:05}.{kind}.mmt", task.name())
}

fn generate_task(spec: &SyntheticCorpusSpec, task: &TaskKind, task_index: usize) -> SynthDataset {
    let mut rng = SeededRng::derive(spec.seed, task_index as u64);
    let (lo, hi) = (spec.min_len, spec.max_len);
    let records = (0..spec.size_of(task))
        .map(|i| {
            let mut rec = RawRecord {
                task: task.name().to_string(),
                ..Default::default()
            };
            let mut media = Media::default();
            let words = match task {
                TaskKind::LanguageReconstruction => spec.sentence(&mut rng, 2 * lo, 2 * hi),
                _ => spec.sentence(&mut rng, lo, hi),
            };
            let text = words_text(&words);
            match task {
                TaskKind::ImageCaptioning | TaskKind::VisionTextReconstruction => {
                    media.image = Some(spec.render_image(&words));
                    rec.image = Some(media_name(task, i, "image"));
                    rec.text_target = text;
                }
                TaskKind::VideoCaptioning => {
                    let animated = rng.below(words.len());
                    media.video = Some(spec.render_video(&words, animated));
                    rec.video = Some(media_name(task, i, "video"));
                    rec.text_target = text;
                }
                TaskKind::VisionQA => {
                    let n = rng.below(words.len());
                    media.image = Some(spec.render_image(&words));
                    rec.image = Some(media_name(task, i, "image"));
                    rec.text_input = Some(format!("what is block {}", n + 1));
                    rec.text_target = WORDS[words[n]].to_string();
                }
                TaskKind::SpeechSentiment | TaskKind::SpeechEmotion => {
                    let labels: &[&str] = if *task == TaskKind::SpeechSentiment {
                        &SENTIMENT_LABELS
                    } else {
                        &EMOTION_LABELS
                    };
                    media.audio = Some(spec.render_audio(&words));
                    rec.audio = Some(media_name(task, i, "audio"));
                    rec.label = Some(labels[hashed_class(task.name(), &text, labels.len())].to_string());
                }
                TaskKind::SpeechTranscription | TaskKind::SpeechTextReconstruction => {
                    media.audio = Some(spec.render_audio(&words));
                    rec.audio = Some(media_name(task, i, "audio"));
                    rec.text_target = text;
                }
                _ => rec.text_target = text,
            }
            SynthRecord { record: rec, media }
        })
        .collect();
    SynthDataset {
        task: task.clone(),
        records,
    }
}

/// Generates every requested task. A pure function of the spec.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<SynthDataset>> {
    spec.validate()?;
    Ok(TaskKind::pretraining()
        .iter()
        .enumerate()
        .filter(|(_, t)| spec.task_list().contains(t))
        .map(|(i, t)| generate_task(spec, t, i))
        .collect())
}

/// Writes `{task}.jsonl` per task plus one tensor file per media item under
/// `media/`. Returns the record file paths.
pub fn write_corpus(spec: &SyntheticCorpusSpec, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let corpus = generate_corpus(spec)?;
    std::fs::create_dir_all(dir.join("media")).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for ds in &corpus {
        for r in &ds.records {
            let m = &r.media;
            let items = [
                (&r.record.image, m.image.as_ref().map(image_tensor)),
                (&r.record.video, m.video.as_ref().map(video_tensor)),
                (&r.record.audio, m.audio.as_ref().map(audio_tensor)),
            ];
            for (name, t) in items {
                if let (Some(name), Some(t)) = (name, t) {
                    write_atomic(&dir.join(name), &encode(&t)?)?;
                }
            }
        }
        let recs: Vec<RawRecord> = ds.records.iter().map(|r| r.record.clone()).collect();
        let path = dir.join(format!("{}.jsonl", ds.task.name()));
        write_records(&path, &recs)?;
        paths.push(path);
    }
    Ok(paths)
}
