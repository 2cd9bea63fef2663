//! Steps needed to reach a target loss on a downstream task, starting from a
//! multitask-pretrained model versus from random initialization.
//!
//! `cargo run --release --example pretraining_ablation`

use trimodal::experiments::{pretraining_ablation, ABLATION_TARGET};

fn main() -> trimodal::Result<()> {
    println!("steps until vision_qa loss < {ABLATION_TARGET}");
    for seed in 0..3 {
        let out = pretraining_ablation(seed)?;
        println!("seed {seed}: pretrained {:?}, scratch {:?}", out.pretrained, out.scratch);
    }
    Ok(())
}
