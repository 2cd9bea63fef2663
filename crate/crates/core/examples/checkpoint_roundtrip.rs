//! Saves a checkpoint, reloads it bitwise, then shows the integrity check
//! rejecting a tampered parameter file.
//!
//! `cargo run --example checkpoint_roundtrip`

use trimodal::checkpoint::{checkpoint_digest, load_checkpoint, read_manifest, save_checkpoint};
use trimodal::model::{ModelConfig, TrimodalModel};
use trimodal::text::Vocab;
use trimodal::train::{OptimizerState, TrainConfig};

fn main() -> trimodal::Result<()> {
    let vocab = Vocab::build(["red green blue"], 64)?;
    let model = TrimodalModel::<f32>::new(ModelConfig::tiny(vocab.len()))?;
    let opt = OptimizerState::new(model.store.len());
    let dir = std::env::temp_dir().join(format!("trimodal-ckpt-{}", std::process::id()));
    save_checkpoint(&dir, &model, &opt, &TrainConfig::default(), &vocab, None)?;
    println!("saved {} ({} parameters)", dir.display(), model.count_parameters(false));
    println!("digest {}", checkpoint_digest(&dir)?);

    let back = load_checkpoint::<f32>(&dir)?;
    let same = model.store.iter().zip(back.model.store.iter()).all(|((_, a), (_, b))| a.value.bitwise_eq(&b.value));
    println!("reloaded parameters bitwise equal: {same}");

    let manifest = read_manifest(&dir)?;
    let victim = dir.join(&manifest.params[0].data.file);
    let mut bytes = std::fs::read(&victim).map_err(|e| trimodal::Error::io(&victim, e))?;
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).map_err(|e| trimodal::Error::io(&victim, e))?;
    match load_checkpoint::<f32>(&dir) {
        Ok(_) => println!("tampered checkpoint loaded (unexpected)"),
        Err(e) => println!("tampered checkpoint rejected (exit code {}): {e}", e.exit_code()),
    }
    std::fs::remove_dir_all(&dir).map_err(|e| trimodal::Error::io(&dir, e))?;
    Ok(())
}
