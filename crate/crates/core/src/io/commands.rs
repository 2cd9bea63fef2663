//! The five pipeline commands. The binary is a thin argument parser over
//! these functions.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{EncodedExample, GenerationConfig, ModelConfig, TrimodalModel};
use crate::objectives::{corrupt_spans, label_set, RawRecord, SpanMaskSpec, TrainingExample};
use crate::rng::SeededRng;
use crate::task::TaskKind;
use crate::text::{PromptRegistry, Vocab};
use crate::train::{Dataset, DatasetPool, StepReport, TrainConfig, Trainer};

use super::config::RunConfig;
use super::records::{encode_example, load_examples, load_media, read_records};
use super::synth::{write_corpus, SyntheticCorpusSpec};
use super::write_atomic;

/// Name of the final checkpoint directory inside the output directory.
pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const LOG_FILE: &str = "log.jsonl";

/// Model element type used by the commands.
pub type Model = TrimodalModel<f32>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub final_loss: Option<f64>,
}

/// Seed of a dataset's span corruption, tied to its name so that filtering
/// other datasets does not change it.
pub fn dataset_seed(seed: u64, name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    seed ^ u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn dataset_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads the configured record files, keeping those named by the task
/// filter. Every missing file is reported at once.
pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<(String, Vec<TrainingExample>)>> {
    if cfg.data.datasets.is_empty() {
        return Err(Error::Config("no datasets configured".into()));
    }
    let missing: Vec<String> = cfg
        .data
        .datasets
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("missing dataset files: {}", missing.join(", "))));
    }
    let names: Vec<String> = cfg.data.datasets.iter().map(|p| dataset_name(p)).collect();
    for t in &cfg.train.tasks {
        if !names.contains(t) {
            return Err(Error::Config(format!("task filter names unknown dataset `{t}`; have {names:?}")));
        }
    }
    if cfg.span.max_spans > crate::text::DEFAULT_SENTINELS {
        return Err(Error::Config(format!(
            "span.max_spans {} exceeds the {} sentinel tokens",
            cfg.span.max_spans,
            crate::text::DEFAULT_SENTINELS
        )));
    }
    let prompts = PromptRegistry::new();
    cfg.data
        .datasets
        .iter()
        .zip(names)
        .filter(|(_, n)| cfg.train.tasks.is_empty() || cfg.train.tasks.contains(n))
        .map(|(p, n)| {
            let ex = load_examples(p, &prompts, &cfg.span, dataset_seed(cfg.train.seed, &n))?;
            if ex.is_empty() {
                return Err(Error::Config(format!("dataset {} has no records", p.display())));
            }
            Ok((n, ex))
        })
        .collect()
}

/// Vocabulary over encoder texts, targets, and the label names of every
/// classification task seen.
pub fn build_vocab<'a>(examples: impl IntoIterator<Item = &'a TrainingExample>, max_size: usize) -> Result<Vocab> {
    let mut texts: Vec<String> = Vec::new();
    for ex in examples {
        texts.push(ex.encoder_text());
        texts.push(ex.target_text.clone());
        if let Some(labels) = label_set(&ex.task) {
            texts.extend(labels.iter().map(|l| l.to_string()));
        }
    }
    Vocab::build(texts.iter().map(String::as_str), max_size)
}

pub fn encode_datasets(sets: &[(String, Vec<TrainingExample>)], vocab: &Vocab) -> Vec<Dataset> {
    sets.iter()
        .map(|(name, ex)| Dataset {
            name: name.clone(),
            examples: ex.iter().map(|e| encode_example(e, vocab)).collect(),
        })
        .collect()
}

struct StepLog {
    out: BufWriter<File>,
}

impl StepLog {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    fn write(&mut self, r: &StepReport, path: &Path) -> Result<()> {
        serde_json::to_writer(&mut self.out, r).expect("report serializes");
        self.out.write_all(b"\n").and_then(|_| self.out.flush()).map_err(|e| Error::io(path, e))
    }
}

fn run_loop(mut trainer: Trainer<f32>, vocab: &Vocab, cfg: &RunConfig) -> Result<RunOutcome> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let log_path = cfg.output_dir.join(LOG_FILE);
    let mut log = StepLog::create(&log_path)?;
    let mut final_loss = None;
    while trainer.step() < trainer.cfg.max_steps {
        let r = trainer.train_step()?;
        log.write(&r, &log_path)?;
        final_loss = Some(r.loss);
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 && r.step < trainer.cfg.max_steps {
            let dir = cfg.output_dir.join(format!("step-{:06}", r.step));
            let st = trainer.state();
            save_checkpoint(&dir, &trainer.model, &trainer.optimizer, &trainer.cfg, vocab, Some(&st))?;
        }
    }
    let ck = cfg.output_dir.join(FINAL_CHECKPOINT);
    let st = trainer.state();
    save_checkpoint(&ck, &trainer.model, &trainer.optimizer, &trainer.cfg, vocab, Some(&st))?;
    Ok(RunOutcome {
        checkpoint: ck,
        log: log_path,
        steps: trainer.step(),
        final_loss,
    })
}

/// Multitask pretraining from scratch; encoders frozen unless configured.
pub fn pretrain_with(cfg: &RunConfig) -> Result<RunOutcome> {
    let sets = load_datasets(cfg)?;
    let vocab = build_vocab(sets.iter().flat_map(|(_, e)| e), cfg.data.max_vocab)?;
    let mut mcfg = cfg.model.clone().unwrap_or_default();
    mcfg.vocab_size = vocab.len();
    let model = Model::new(mcfg)?;
    let pool = DatasetPool::new(encode_datasets(&sets, &vocab), cfg.train.seed)?;
    let mut tcfg = cfg.train.clone();
    tcfg.freeze_vision.get_or_insert(true);
    tcfg.freeze_speech.get_or_insert(true);
    run_loop(Trainer::new(model, pool, tcfg)?, &vocab, cfg)
}

pub fn pretrain(config: &Path) -> Result<RunOutcome> {
    pretrain_with(&RunConfig::load(config)?)
}

/// Checks a config's model section against a checkpoint's model.
fn check_dims(given: &Option<ModelConfig>, stored: &ModelConfig) -> Result<()> {
    if let Some(g) = given {
        let mut g = g.clone();
        g.vocab_size = stored.vocab_size;
        g.seed = stored.seed;
        if &g != stored {
            return Err(Error::Integrity(format!(
                "config model section does not match the checkpoint: {g:?} vs {stored:?}"
            )));
        }
    }
    Ok(())
}

/// Continues from a checkpoint on downstream data with a fresh optimizer;
/// every parameter trainable unless configured otherwise.
pub fn finetune_with(cfg: &RunConfig, checkpoint: &Path) -> Result<RunOutcome> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    check_dims(&cfg.model, &ck.model.cfg)?;
    let sets = load_datasets(cfg)?;
    let pool = DatasetPool::new(encode_datasets(&sets, &ck.vocab), cfg.train.seed)?;
    let mut tcfg = cfg.train.clone();
    tcfg.freeze_vision.get_or_insert(false);
    tcfg.freeze_speech.get_or_insert(false);
    run_loop(Trainer::new(ck.model, pool, tcfg)?, &ck.vocab, cfg)
}

pub fn finetune(config: &Path, checkpoint: &Path) -> Result<RunOutcome> {
    finetune_with(&RunConfig::load(config)?, checkpoint)
}

/// Encoder text of a record at inference time. Reconstruction records
/// without an explicit `text_input` are span-corrupted from their target.
pub fn inference_text(
    record: &RawRecord,
    task: &TaskKind,
    prompts: &PromptRegistry,
    span: &SpanMaskSpec,
    rng: &mut SeededRng,
) -> Result<String> {
    if task.is_reconstruction() && record.text_input.is_none() {
        let words: Vec<&str> = record.text_target.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Schema(format!("{task} record needs `text_input` or `text_target`")));
        }
        let (masked, _) = corrupt_spans(&words, span, rng)?;
        return Ok(format!("{}{}", prompts.prompt_for(task)?, masked.join(" ")));
    }
    let input = if task.signature().has_input_text || task.is_reconstruction() {
        record.text_input.clone().unwrap_or_default()
    } else {
        String::new()
    };
    Ok(format!("{}{input}", prompts.prompt_for(task)?))
}

/// Generates one output per record of a record file.
pub fn generate_records(
    model: &Model,
    vocab: &Vocab,
    records: &[RawRecord],
    base: &Path,
    gen: &GenerationConfig,
    span: &SpanMaskSpec,
    seed: u64,
) -> Result<Vec<String>> {
    let prompts = PromptRegistry::new();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let task = TaskKind::parse(&r.task, r.style.as_deref())?;
            let media = load_media(r, base)?;
            let sig = task.signature();
            for (needed, present, what) in [
                (sig.needs_image, media.image.is_some(), "image"),
                (sig.needs_video, media.video.is_some(), "video"),
                (sig.needs_audio, media.audio.is_some(), "audio"),
            ] {
                if needed && !present {
                    return Err(Error::Schema(format!("record {}: {task} needs field `{what}`", i + 1)));
                }
            }
            let mut rng = SeededRng::derive(seed, i as u64);
            let text = inference_text(r, &task, &prompts, span, &mut rng)?;
            let ids = model.generate(&media, &vocab.encode(&text), gen)?;
            vocab.decode(&ids)
        })
        .collect()
}

pub fn generate(config: &Path, checkpoint: &Path, input: &Path, output: &Path) -> Result<usize> {
    let cfg = RunConfig::load(config)?;
    let ck = load_checkpoint::<f32>(checkpoint)?;
    check_dims(&cfg.model, &ck.model.cfg)?;
    let records = read_records(input)?;
    let base = input.parent().unwrap_or(Path::new("."));
    let outs = generate_records(&ck.model, &ck.vocab, &records, base, &cfg.generation, &cfg.span, cfg.train.seed)?;
    let mut text = String::new();
    for o in &outs {
        text.push_str(o);
        text.push('\n');
    }
    write_atomic(output, text.as_bytes())?;
    Ok(outs.len())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Scores a generations file against a references file, line by line.
pub fn eval(hyp: &Path, reference: &Path, metrics: &str, out: Option<&Path>) -> Result<EvalReport> {
    let gens = read_lines(hyp)?;
    let refs = read_lines(reference)?;
    let names: Vec<&str> = metrics.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::Usage("no metrics requested".into()));
    }
    let report = evaluate(&gens, &refs, &names)?;
    if let Some(out) = out {
        write_atomic(out, &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    }
    Ok(report)
}

pub fn synth(spec: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    let spec: SyntheticCorpusSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    write_corpus(&spec, out)
}

/// Teacher-forced loss of a model on encoded examples, batched.
pub fn mean_loss(model: &Model, examples: &[EncodedExample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in examples.chunks(batch.max(1)) {
        let refs: Vec<&EncodedExample> = chunk.iter().collect();
        total += model.eval_loss(&refs)? * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Training config with every knob spelled out, for callers that do not
/// read a file.
pub fn train_config(steps: u64, lr: f64, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        accumulation_steps: 1,
        max_steps: steps,
        seed,
        ..Default::default()
    }
}
