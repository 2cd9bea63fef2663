//! Text generation metrics on small hand-checkable cases, then a corpus
//! report as written by `trimodal eval`.
//!
//! `cargo run --example metrics`

use trimodal::metrics::{bleu4, evaluate, label_of_generation, rouge_l, rouge_n, token_f1, wer, METRIC_NAMES};

fn main() -> trimodal::Result<()> {
    println!("rouge1  'a b c' vs 'a b d'       = {:.6}", rouge_n("a b c", "a b d", 1));
    println!("rouge2  'a b c' vs 'a b d'       = {:.6}", rouge_n("a b c", "a b d", 2));
    println!("rougeL  'a c e' vs 'a b c d e'   = {:.6}", rouge_l("a c e", "a b c d e"));
    println!("rougeL  'c b a' vs 'a b c'       = {:.6}", rouge_l("c b a", "a b c"));
    println!("f1      'a a b' vs 'a b b'       = {:.6}", token_f1("a a b", "a b b"));
    println!("wer     'a x c' vs 'a b c'       = {:.6}", wer("a x c", "a b c")?);
    println!("wer     'w x y z' vs 'a b'       = {:.6}", wer("w x y z", "a b")?);
    println!("bleu4   'a b c d' vs 8 tokens    = {:.6} (e^-1 = {:.6})", bleu4("a b c d", &["a b c d e f g h"]), (-1f64).exp());
    let labels = ["funny".to_string(), "not funny".to_string()];
    println!("label of 'very funny'            = {}", label_of_generation("very funny", &labels));

    let hyp: Vec<String> = ["a red apple", "the river runs", "positive"].map(String::from).to_vec();
    let refs: Vec<String> = ["a red apple", "the river is cold", "negative"].map(String::from).to_vec();
    let report = evaluate(&hyp, &refs, &METRIC_NAMES)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
