//! One model, one paired (image, audio) input, two prompts: captioning
//! returns what the image shows, transcription returns what the audio says.
//!
//! `cargo run --release --example prompt_following [STEPS]`

use std::time::Instant;

use trimodal::experiments::prompt_following;

fn main() -> trimodal::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let start = Instant::now();
    let out = prompt_following(steps, |r| {
        if r.step % 250 == 0 {
            println!("step {:5} loss {:.4}", r.step, r.loss);
        }
        Ok(())
    })?;
    println!(
        "captions {}/{}, transcripts {}/{}, both {}/{}, {:.1}s",
        out.captions,
        out.pairs,
        out.transcripts,
        out.pairs,
        out.both,
        out.pairs,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
