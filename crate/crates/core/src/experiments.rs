//! Small end-to-end training experiments on synthetic corpora, shared by the
//! runnable examples and the acceptance suite.

use crate::encoders::Media;
use crate::error::Result;
use crate::io::commands::{build_vocab, encode_datasets, mean_loss};
use crate::io::synth::{generate_corpus, words_text};
use crate::io::SyntheticCorpusSpec;
use crate::model::{EncodedExample, GenerationConfig, ModelConfig, TrimodalModel};
use crate::objectives::{SpanMaskSpec, TrainingExample};
use crate::rng::SeededRng;
use crate::task::TaskKind;
use crate::text::PromptRegistry;
use crate::train::{Dataset, DatasetPool, StepReport, TrainConfig, Trainer};

/// Outcome of overfitting a captioning corpus.
#[derive(Clone, Debug)]
pub struct CaptionOutcome {
    pub loss: f64,
    pub exact: usize,
    pub total: usize,
}

fn exact_matches(model: &TrimodalModel<f32>, examples: &[EncodedExample]) -> Result<usize> {
    let mut n = 0;
    for e in examples {
        n += (model.generate(&e.media, &e.text_ids, &GenerationConfig::default())? == e.target_ids) as usize;
    }
    Ok(n)
}

fn overfit_config(steps: u64) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        batch_size: 8,
        accumulation_steps: 1,
        ..Default::default()
    }
}

/// The captioning corpus: 32 two-word captions rendered as block images.
pub fn caption_corpus() -> Result<(usize, Dataset)> {
    let spec = SyntheticCorpusSpec {
        tasks: vec!["image_captioning".into()],
        examples_per_task: 32,
        seed: 7,
        min_len: 2,
        max_len: 2,
        ..Default::default()
    };
    let corpus = generate_corpus(&spec)?;
    let examples = corpus[0].examples(&PromptRegistry::new(), &SpanMaskSpec::default(), 0)?;
    let vocab = build_vocab(&examples, 4096)?;
    let sets = vec![("image_captioning".to_string(), examples)];
    let mut data = encode_datasets(&sets, &vocab);
    Ok((vocab.len(), data.remove(0)))
}

/// Trains the default-size model on [`caption_corpus`] for `steps` steps,
/// optionally with every image removed, and reports teacher-forced loss and
/// exact greedy reproductions.
pub fn caption_learning(steps: u64, text_only: bool, log: impl FnMut(&StepReport) -> Result<()>) -> Result<CaptionOutcome> {
    let (vocab_size, mut data) = caption_corpus()?;
    if text_only {
        for e in &mut data.examples {
            e.media.image = None;
        }
    }
    let eval = data.examples.clone();
    let model = TrimodalModel::<f32>::new(ModelConfig {
        vocab_size,
        ..Default::default()
    })?;
    let mut t = Trainer::new(model, DatasetPool::new(vec![data], 0)?, overfit_config(steps))?;
    t.run(log)?;
    Ok(CaptionOutcome {
        loss: mean_loss(&t.model, &eval, 8)?,
        exact: exact_matches(&t.model, &eval)?,
        total: eval.len(),
    })
}

/// Outcome of the two-prompt experiment.
#[derive(Clone, Debug)]
pub struct PromptOutcome {
    pub captions: usize,
    pub transcripts: usize,
    /// Pairs where both prompts produced their own target.
    pub both: usize,
    pub pairs: usize,
}

/// 50 inputs, each an image showing one sentence and audio speaking
/// another, used under both the captioning and the transcription prompt.
pub fn prompt_corpus() -> Result<(usize, Vec<Dataset>)> {
    let spec = SyntheticCorpusSpec {
        min_len: 2,
        max_len: 4,
        ..Default::default()
    };
    let prompts = PromptRegistry::new();
    let mut rng = SeededRng::new(11);
    let mut caption = Vec::new();
    let mut transcribe = Vec::new();
    for _ in 0..50 {
        let seen = spec.sentence(&mut rng, spec.min_len, spec.max_len);
        let heard = spec.sentence(&mut rng, spec.min_len, spec.max_len);
        let media = Media {
            image: Some(spec.render_image(&seen)),
            audio: Some(spec.render_audio(&heard)),
            video: None,
        };
        for (task, target, out) in [
            (TaskKind::ImageCaptioning, &seen, &mut caption),
            (TaskKind::SpeechTranscription, &heard, &mut transcribe),
        ] {
            out.push(TrainingExample {
                prompt_text: prompts.prompt_for(&task)?,
                task,
                image: media.image.clone(),
                video: None,
                audio: media.audio.clone(),
                input_text: String::new(),
                target_text: words_text(target),
            });
        }
    }
    let vocab = build_vocab(caption.iter().chain(&transcribe), 4096)?;
    let sets = vec![
        ("image_captioning".to_string(), caption),
        ("speech_transcription".to_string(), transcribe),
    ];
    Ok((vocab.len(), encode_datasets(&sets, &vocab)))
}

/// Trains jointly on both prompts of [`prompt_corpus`] and checks which
/// target each prompt produces.
pub fn prompt_following(steps: u64, log: impl FnMut(&StepReport) -> Result<()>) -> Result<PromptOutcome> {
    let (vocab_size, data) = prompt_corpus()?;
    let model = TrimodalModel::<f32>::new(ModelConfig {
        vocab_size,
        ..Default::default()
    })?;
    let mut t = Trainer::new(model, DatasetPool::new(data.clone(), 0)?, overfit_config(steps))?;
    t.run(log)?;
    let pairs = data[0].examples.len();
    let mut hits = [vec![false; pairs], vec![false; pairs]];
    for (d, h) in data.iter().zip(&mut hits) {
        for (e, hit) in d.examples.iter().zip(h.iter_mut()) {
            *hit = t.model.generate(&e.media, &e.text_ids, &GenerationConfig::default())? == e.target_ids;
        }
    }
    Ok(PromptOutcome {
        captions: hits[0].iter().filter(|&&h| h).count(),
        transcripts: hits[1].iter().filter(|&&h| h).count(),
        both: (0..pairs).filter(|&i| hits[0][i] && hits[1][i]).count(),
        pairs,
    })
}

/// Steps-to-target comparison for one seed.
#[derive(Clone, Copy, Debug)]
pub struct AblationOutcome {
    pub seed: u64,
    pub pretrained: Option<u64>,
    pub scratch: Option<u64>,
}

pub const ABLATION_TARGET: f64 = 0.3;
pub const ABLATION_PRETRAIN_STEPS: u64 = 600;
pub const ABLATION_LIMIT: u64 = 2000;
const ABLATION_EVAL_EVERY: u64 = 20;

fn steps_to_target(model: TrimodalModel<f32>, data: &Dataset, seed: u64) -> Result<Option<u64>> {
    let cfg = TrainConfig {
        max_steps: ABLATION_LIMIT,
        batch_size: 8,
        accumulation_steps: 1,
        warmup_steps: 0,
        freeze_vision: Some(false),
        freeze_speech: Some(false),
        seed,
        ..Default::default()
    };
    let mut t = Trainer::new(model, DatasetPool::new(vec![data.clone()], seed)?, cfg)?;
    while t.step() < ABLATION_LIMIT {
        t.train_step()?;
        if t.step() % ABLATION_EVAL_EVERY == 0 && mean_loss(&t.model, &data.examples, 16)? < ABLATION_TARGET {
            return Ok(Some(t.step()));
        }
    }
    Ok(None)
}

/// Pretrains on captioning, transcription and text reconstruction, then
/// finetunes on the held-out visual question answering task and counts the
/// steps until its loss drops below [`ABLATION_TARGET`]. The same count is
/// taken for an identically initialized model without pretraining.
pub fn pretraining_ablation(seed: u64) -> Result<AblationOutcome> {
    let prompts = PromptRegistry::new();
    let spec = SyntheticCorpusSpec {
        tasks: ["image_captioning", "vision_qa", "speech_transcription", "language_reconstruction"]
            .map(String::from)
            .to_vec(),
        examples_per_task: 64,
        seed,
        ..Default::default()
    };
    let corpus = generate_corpus(&spec)?;
    let sets: Vec<(String, Vec<TrainingExample>)> = corpus
        .iter()
        .map(|d| Ok((d.task.name().to_string(), d.examples(&prompts, &SpanMaskSpec::default(), seed)?)))
        .collect::<Result<_>>()?;
    let vocab = build_vocab(sets.iter().flat_map(|(_, e)| e), 4096)?;
    let mut data = encode_datasets(&sets, &vocab);
    let downstream = data.remove(data.iter().position(|d| d.name == "vision_qa").expect("vision_qa is generated"));
    let mcfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        enc_layers: 2,
        dec_layers: 2,
        seed,
        ..Default::default()
    };
    let pre_cfg = TrainConfig {
        max_steps: ABLATION_PRETRAIN_STEPS,
        batch_size: 8,
        accumulation_steps: 1,
        seed,
        ..Default::default()
    };
    let mut pre = Trainer::new(TrimodalModel::new(mcfg.clone())?, DatasetPool::new(data, seed)?, pre_cfg)?;
    pre.run(|_| Ok(()))?;
    Ok(AblationOutcome {
        seed,
        pretrained: steps_to_target(pre.model, &downstream, seed)?,
        scratch: steps_to_target(TrimodalModel::new(mcfg)?, &downstream, seed)?,
    })
}
