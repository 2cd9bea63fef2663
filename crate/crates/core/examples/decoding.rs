//! Greedy and beam decoding from a briefly trained captioning model.
//!
//! `cargo run --release --example decoding [STEPS]`

use trimodal::io::commands::{build_vocab, encode_datasets};
use trimodal::io::{generate_corpus, SyntheticCorpusSpec};
use trimodal::model::{GenerationConfig, ModelConfig, TrimodalModel};
use trimodal::objectives::SpanMaskSpec;
use trimodal::text::PromptRegistry;
use trimodal::train::{DatasetPool, TrainConfig, Trainer};

fn main() -> trimodal::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let spec = SyntheticCorpusSpec {
        tasks: vec!["image_captioning".into()],
        examples_per_task: 16,
        min_len: 2,
        max_len: 3,
        ..Default::default()
    };
    let examples = generate_corpus(&spec)?[0].examples(&PromptRegistry::new(), &SpanMaskSpec::default(), 0)?;
    let vocab = build_vocab(&examples, 4096)?;
    let data = encode_datasets(&[("image_captioning".into(), examples.clone())], &vocab);
    let model = TrimodalModel::<f32>::new(ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        enc_layers: 2,
        dec_layers: 2,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        max_steps: steps,
        batch_size: 8,
        accumulation_steps: 1,
        ..Default::default()
    };
    let mut t = Trainer::new(model, DatasetPool::new(data.clone(), 0)?, cfg)?;
    t.run(|r| {
        if r.step % 100 == 0 {
            println!("step {:4} loss {:.4}", r.step, r.loss);
        }
        Ok(())
    })?;
    let decoders = [
        ("greedy", GenerationConfig::default()),
        ("beam 4", GenerationConfig::beam(4, 1.0, 32)),
    ];
    for (e, raw) in data[0].examples.iter().zip(&examples).take(4) {
        println!("reference  {}", raw.target_text);
        for (name, g) in &decoders {
            let ids = t.model.generate(&e.media, &e.text_ids, g)?;
            println!("{name:10} {}", vocab.decode(&ids)?);
        }
    }
    Ok(())
}
