//! Writes a synthetic trimodal corpus: JSONL records per task plus image,
//! video and audio tensors whose content encodes the text.
//!
//! `cargo run --example synth_corpus [OUT_DIR]`

use std::path::PathBuf;

use trimodal::io::synth::{block_color, tone_frequency, WORDS};
use trimodal::io::{write_corpus, SyntheticCorpusSpec};

fn main() -> trimodal::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("trimodal-corpus"));
    let spec = SyntheticCorpusSpec {
        examples_per_task: 8,
        ..Default::default()
    };
    for (w, word) in WORDS.iter().enumerate().take(4) {
        println!("{word:8} color {:?} tone {} Hz", block_color(w), tone_frequency(w));
    }
    for path in write_corpus(&spec, &out)? {
        let first = std::fs::read_to_string(&path).map_err(|e| trimodal::Error::io(&path, e))?;
        println!("{}\n  {}", path.display(), first.lines().next().unwrap_or(""));
    }
    Ok(())
}
