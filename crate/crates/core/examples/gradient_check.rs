//! Verifies reverse-mode gradients against central finite differences, for a
//! small attention block and for the full model in 64-bit precision.
//!
//! `cargo run --release --example gradient_check`

use trimodal::encoders::{AudioTensor, ImageTensor, Media};
use trimodal::model::{EncodedExample, ModelConfig, TrimodalModel};
use trimodal::rng::SeededRng;
use trimodal::tensor::{finite_diff_check, finite_diff_check_sampled, ParamStore, Tensor};

fn main() -> trimodal::Result<()> {
    let mut rng = SeededRng::new(1);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::uniform(&[4, 6], 1.0, &mut rng))?;
    let w = store.add("w", Tensor::uniform(&[6, 6], 1.0, &mut rng))?;
    let gain = store.add("gain", Tensor::uniform(&[6], 1.0, &mut rng))?;
    let bias = store.add("bias", Tensor::uniform(&[6], 1.0, &mut rng))?;
    let err = finite_diff_check(&mut store, 1e-5, |g, s| {
        let (x, w, gain, bias) = (g.param(s, x), g.param(s, w), g.param(s, gain), g.param(s, bias));
        let h = g.matmul(x, w)?;
        let h = g.layer_norm(h, gain, bias, 1e-5)?;
        let h = g.gelu(h);
        let p = g.softmax(h, 1)?;
        let sq = g.mul(p, h)?;
        Ok(g.sum(sq))
    })?;
    println!("matmul -> layer_norm -> gelu -> softmax: max relative error {err:.3e}");

    let mut model = TrimodalModel::<f64>::new(ModelConfig::tiny(16))?;
    let audio: Vec<f32> = (0..18).map(|i| (i as f32 * 0.7).sin() * 0.8).collect();
    let pixels: Vec<f32> = (0..24).map(|_| rng.uniform() as f32).collect();
    let ex = EncodedExample {
        media: Media {
            image: Some(ImageTensor::new(2, 4, pixels)?),
            video: None,
            audio: Some(AudioTensor::new(audio, 16_000)?),
        },
        text_ids: vec![5, 9, 12],
        target_ids: vec![7, 4, 11],
    };
    let mut store = std::mem::take(&mut model.store);
    let err = finite_diff_check_sampled(&mut store, 1e-5, 4, 0, |g, s| {
        let mut view = model.clone();
        view.store = s.clone();
        view.batch_loss(g, &[&ex])
    })?;
    println!(
        "full model ({} parameters, 4 probes per tensor): max relative error {err:.3e}",
        store.count(false)
    );
    Ok(())
}
