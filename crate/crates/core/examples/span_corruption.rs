//! Span corruption: masks random spans with sentinels and splices them back.
//!
//! `cargo run --example span_corruption [SEED]`

use trimodal::objectives::{corrupt_spans, reconstruct, SpanMaskSpec};
use trimodal::rng::SeededRng;

fn main() -> trimodal::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let text = "the quick brown fox jumps over the lazy dog while the small cat sleeps in the warm afternoon sun";
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let spec = SpanMaskSpec {
        mask_rate: 0.3,
        ..Default::default()
    };
    let (input, target) = corrupt_spans(&tokens, &spec, &mut SeededRng::new(seed))?;
    println!("original: {text}");
    println!("input:    {}", input.join(" "));
    println!("target:   {}", target.join(" "));
    let back = reconstruct(&input, &target)?;
    println!("restored: {}", back.join(" "));
    assert_eq!(back, tokens);
    Ok(())
}
