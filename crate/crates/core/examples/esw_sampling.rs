//! Exponentially smoothed dataset weights: `p_i^S / Σ p_j^S` for dataset
//! shares `p_i`, compared with empirical draws.
//!
//! `cargo run --example esw_sampling`

use trimodal::rng::SeededRng;
use trimodal::train::{esw_weights, EswSampler};

fn main() -> trimodal::Result<()> {
    let sizes = [9000, 900, 100];
    println!("dataset sizes {sizes:?}");
    for s in [1.0, 0.7, 0.5, 0.3, 0.1] {
        let w = esw_weights(&sizes, s)?;
        let sampler = EswSampler::new(&sizes, s)?;
        let mut rng = SeededRng::new(0);
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sampler.sample(&mut rng)] += 1;
        }
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
        println!("S = {s:.1}  weights {}  empirical {}", fmt(&w), fmt(&empirical));
    }
    Ok(())
}
