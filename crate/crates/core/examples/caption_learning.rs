//! Overfits the model on 32 synthetic image captions and compares against a
//! text-only ablation that never sees the image.
//!
//! `cargo run --release --example caption_learning [STEPS]`

use std::time::Instant;

use trimodal::experiments::caption_learning;

fn main() -> trimodal::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    for text_only in [false, true] {
        let start = Instant::now();
        let out = caption_learning(steps, text_only, |r| {
            if r.step % 100 == 0 {
                println!("step {:5} loss {:.4}", r.step, r.loss);
            }
            Ok(())
        })?;
        println!(
            "{}: loss {:.4}, exact {}/{}, {:.1}s",
            if text_only { "text only" } else { "with image" },
            out.loss,
            out.exact,
            out.total,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
