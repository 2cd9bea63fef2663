//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use trimodal::encoders::{
    AudioTensor, FeatureSequence, ImageTensor, Media, Modality, SpeechEncoder, SpeechEncoderConfig, VideoTensor,
    VisionEncoder, VisionEncoderConfig,
};
use trimodal::io::commands::{build_vocab, encode_datasets, mean_loss};
use std::path::Path;

use trimodal::checkpoint::checkpoint_digest;
use trimodal::io::config::DataConfig;
use trimodal::io::{generate_corpus, read_records, RunConfig, SyntheticCorpusSpec};
use trimodal::metrics::{bleu4, rouge_l, rouge_n, token_f1, wer};
use trimodal::objectives::{corrupt_spans, reconstruct, SpanMaskSpec, TrainingExample};
use trimodal::text::PromptRegistry;
use trimodal::train::{esw_weights, Dataset, DatasetPool, EswSampler, TrainConfig, Trainer};
use trimodal::model::{EncodedExample, ModelConfig, MultimodalInput, TrimodalModel};
use trimodal::rng::SeededRng;
use trimodal::tensor::{finite_diff_check, finite_diff_check_sampled, Graph, NodeId, ParamStore, Tensor, MASK_NEG};
use trimodal::Result;

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

fn rand_t(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// `sum(x ⊙ w)` with a fixed random `w`, so no output symmetry cancels the
/// gradient (softmax rows, for instance, sum to one).
pub fn weighted_sum(g: &mut Graph<f64>, x: NodeId, rng_seed: u64) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let w = g.input(rand_t(&shape, &mut SeededRng::new(rng_seed ^ 0xABCD)));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

type Case = (&'static str, fn(u64) -> Result<f64>);

macro_rules! params {
    ($store:ident, $rng:ident; $($name:ident : $shape:expr),*) => {
        $(let $name = $store.add(stringify!($name), rand_t(&$shape, &mut $rng))?;)*
    };
}

/// One finite-difference check per differentiable operation and per model
/// component. Each returns the worst relative error for a seed.
pub fn grad_cases() -> Vec<Case> {
    vec![
        ("add", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; a: [3, 4], b: [3, 4]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                let y = g.add(a, b)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("mul", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; a: [3, 4], b: [3, 4]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                let y = g.mul(a, b)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("scale", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; a: [5]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let a = g.param(s, a);
                let y = g.scale(a, -1.7);
                weighted_sum(g, y, seed)
            })
        }),
        ("add_bias", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; x: [3, 4], b: [4]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let (x, b) = (g.param(s, x), g.param(s, b));
                let y = g.add_bias(x, b)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("matmul", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; a: [3, 5], b: [5, 2]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                let y = g.matmul(a, b)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("linear", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; x: [4, 3], w: [3, 6], b: [6]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
                let y = g.linear(x, w, b)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("transpose_reshape", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; a: [3, 4]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let a = g.param(s, a);
                let t = g.transpose(a)?;
                let r = g.reshape(t, &[2, 6])?;
                let q = g.mul(r, r)?;
                weighted_sum(g, q, seed)
            })
        }),
        ("gelu", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            s.add("a", Tensor::uniform(&[12], 3.0, &mut rng))?;
            let a = s.id("a").unwrap();
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let a = g.param(s, a);
                let y = g.gelu(a);
                weighted_sum(g, y, seed)
            })
        }),
        ("softmax", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; a: [3, 4]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let a = g.param(s, a);
                let y0 = g.softmax(a, 0)?;
                let y1 = g.softmax(a, 1)?;
                let y = g.add(y0, y1)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("layer_norm", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; x: [3, 5], gain: [5], bias: [5]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let (x, ga, b) = (g.param(s, x), g.param(s, gain), g.param(s, bias));
                let y = g.layer_norm(x, ga, b, 1e-5)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("embedding", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; table: [6, 3]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let t = g.param(s, table);
                let y = g.embedding(t, &[4, 0, 4, 2])?;
                weighted_sum(g, y, seed)
            })
        }),
        ("concat_slice", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; a: [2, 3], b: [3, 3]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                let c = g.concat_rows(&[a, b, a])?;
                let y = g.slice_rows(c, 1, 5)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("attention", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; q: [3, 4], k: [5, 4], v: [5, 4], bias: [2, 3, 5]);
            let mut mask = Tensor::<f64>::zeros(&[3, 5]);
            mask.data_mut()[3] = MASK_NEG;
            mask.data_mut()[6] = MASK_NEG;
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let (q, k, v, b) = (g.param(s, q), g.param(s, k), g.param(s, v), g.param(s, bias));
                let y = g.attention(q, k, v, 2, Some(b), Some(&mask))?;
                weighted_sum(g, y, seed)
            })
        }),
        ("rel_pos_bias", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; table: [4, 2], gate: [2]);
            let buckets = [0, 1, 2, 3, 0, 1, 3, 2, 1];
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let (t, ga) = (g.param(s, table), g.param(s, gate));
                let y = g.rel_pos_bias(t, ga, &buckets, 3, 3)?;
                weighted_sum(g, y, seed)
            })
        }),
        ("cross_entropy", |seed| {
            let (mut s, mut rng) = (ParamStore::new(), SeededRng::new(seed));
            params!(s, rng; logits: [4, 6]);
            finite_diff_check(&mut s, FD_STEP, |g, s| {
                let l = g.param(s, logits);
                g.cross_entropy(l, &[1, 0, 5, 3], 0)
            })
        }),
        ("vision_encoder", |seed| {
            let cfg = ModelConfig::tiny(16);
            let mut s = ParamStore::<f64>::new();
            let enc = VisionEncoder::new(&mut s, &cfg.vision, &mut SeededRng::new(seed))?;
            let media = tiny_media(seed, true, true, false);
            finite_diff_check_sampled(&mut s, FD_STEP, 6, seed, |g, s| {
                let a = enc.encode_image(g, s, media.image.as_ref().unwrap())?;
                let b = enc.encode_video(g, s, media.video.as_ref().unwrap())?;
                let c = g.concat_rows(&[a.node, b.node])?;
                weighted_sum(g, c, seed)
            })
        }),
        ("speech_encoder", |seed| {
            let cfg = ModelConfig::tiny(16);
            let mut s = ParamStore::<f64>::new();
            let enc = SpeechEncoder::new(&mut s, &cfg.speech, &mut SeededRng::new(seed))?;
            // Open the gates so the bias table receives a gradient.
            for (_, p) in s.iter_mut() {
                if p.name.ends_with(".gate") {
                    p.value.data_mut().iter_mut().for_each(|v| *v = 0.3);
                }
            }
            let media = tiny_media(seed, false, false, true);
            finite_diff_check_sampled(&mut s, FD_STEP, 6, seed, |g, s| {
                let a = enc.encode_audio(g, s, media.audio.as_ref().unwrap())?;
                weighted_sum(g, a.node, seed)
            })
        }),
        ("trimodal_model", |seed| {
            let mut m = tiny_model(seed);
            let ex = tiny_example(seed, 16);
            let mut store = std::mem::take(&mut m.store);
            let r = finite_diff_check_sampled(&mut store, FD_STEP, 4, seed, |g, s| {
                let mut view = m.clone();
                view.store = s.clone();
                view.batch_loss(g, &[&ex])
            });
            m.store = store;
            r
        }),
    ]
}

/// Media sized for [`ModelConfig::tiny`]: patch 2, audio hop 6.
pub fn tiny_media(seed: u64, image: bool, video: bool, audio: bool) -> Media {
    let mut rng = SeededRng::new(seed ^ 0x5EED);
    let mut px = |n: usize| (0..n).map(|_| rng.uniform() as f32).collect::<Vec<f32>>();
    let img = image.then(|| ImageTensor::new(2, 4, px(2 * 4 * 3)).unwrap());
    let vid = video.then(|| VideoTensor::new(2, 2, 4, px(2 * 2 * 4 * 3)).unwrap());
    let aud = audio.then(|| {
        let s: Vec<f32> = (0..18).map(|i| ((i as f32) * 0.7 + seed as f32).sin() * 0.8).collect();
        AudioTensor::new(s, 16000).unwrap()
    });
    Media {
        image: img,
        video: vid,
        audio: aud,
    }
}

pub fn tiny_model(seed: u64) -> TrimodalModel<f64> {
    let mut cfg = ModelConfig::tiny(16);
    cfg.seed = seed;
    TrimodalModel::new(cfg).unwrap()
}

pub fn tiny_example(seed: u64, vocab: usize) -> EncodedExample {
    let mut rng = SeededRng::new(seed ^ 0xE7);
    let mut ids = |n: usize| (0..n).map(|_| 4 + rng.below(vocab - 4)).collect::<Vec<usize>>();
    EncodedExample {
        media: tiny_media(seed, true, false, true),
        text_ids: ids(3),
        target_ids: ids(3),
    }
}

// ---- metric oracles: exhaustive and independent of the library code ----

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

/// Σ over distinct candidate n-grams of min(count in c, count in r).
fn overlap(c: &[Vec<String>], r: &[Vec<String>]) -> usize {
    let mut seen: Vec<&Vec<String>> = Vec::new();
    let mut total = 0;
    for g in c {
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        let cc = c.iter().filter(|x| *x == g).count();
        let rc = r.iter().filter(|x| *x == g).count();
        total += cc.min(rc);
    }
    total
}

fn f1(m: usize, c: usize, r: usize) -> f64 {
    if c == 0 && r == 0 {
        return 1.0;
    }
    if c == 0 || r == 0 || m == 0 {
        return 0.0;
    }
    let (p, rc) = (m as f64 / c as f64, m as f64 / r as f64);
    2.0 * p * rc / (p + rc)
}

pub fn oracle_rouge_n(c: &str, r: &str, n: usize) -> f64 {
    let (c, r) = (toks(c), toks(r));
    if c.is_empty() || r.is_empty() {
        return f1(0, c.len(), r.len());
    }
    let (gc, gr) = (grams(&c, n), grams(&r, n));
    f1(overlap(&gc, &gr), gc.len(), gr.len())
}

fn is_subsequence(s: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    s.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn oracle_rouge_l(c: &str, r: &str) -> f64 {
    let (c, r) = (toks(c), toks(r));
    if c.is_empty() || r.is_empty() {
        return f1(0, c.len(), r.len());
    }
    f1(brute_lcs(&c, &r), c.len(), r.len())
}

/// Levenshtein distance by unmemoized recursion.
pub fn brute_edits(a: &[String], b: &[String]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_edits(ra, rb) + usize::from(x != y);
            sub.min(brute_edits(ra, b) + 1).min(brute_edits(a, rb) + 1)
        }
    }
}

pub fn oracle_wer(h: &str, r: &str) -> f64 {
    let (h, r) = (toks(h), toks(r));
    brute_edits(&h, &r) as f64 / r.len() as f64
}

pub fn oracle_f1(c: &str, r: &str) -> f64 {
    let (c, r) = (toks(c), toks(r));
    if c.is_empty() || r.is_empty() {
        return f1(0, c.len(), r.len());
    }
    f1(overlap(&grams(&c, 1), &grams(&r, 1)), c.len(), r.len())
}

/// Sentence BLEU-4 from the textbook formula: clipped precisions against
/// the per-n-gram maximum reference count, add-one on zero counts for
/// n ≥ 2, brevity penalty against the closest reference length.
pub fn oracle_bleu4(c: &str, refs: &[&str]) -> f64 {
    let c = toks(c);
    let refs: Vec<Vec<String>> = refs.iter().map(|r| toks(r)).collect();
    if c.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut logp = 0.0;
    for n in 1..=4 {
        let gc = grams(&c, n);
        let mut matched = 0;
        let mut seen: Vec<&Vec<String>> = Vec::new();
        for g in &gc {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let cc = gc.iter().filter(|x| *x == g).count();
            let maxr = refs
                .iter()
                .map(|r| grams(r, n).iter().filter(|x| *x == g).count())
                .max()
                .unwrap_or(0);
            matched += cc.min(maxr);
        }
        let p = match (matched, n) {
            (0, 1) => return 0.0,
            (0, _) => 1.0 / (gc.len() + 1) as f64,
            _ => matched as f64 / gc.len() as f64,
        };
        logp += p.ln() / 4.0;
    }
    let cl = c.len() as f64;
    let mut best: Option<usize> = None;
    for r in &refs {
        let better = match best {
            None => true,
            Some(b) => {
                let (d, db) = ((r.len() as f64 - cl).abs(), (b as f64 - cl).abs());
                d < db || (d == db && r.len() < b)
            }
        };
        if better {
            best = Some(r.len());
        }
    }
    let rl = best.unwrap() as f64;
    let bp = if cl >= rl { 1.0 } else { (1.0 - rl / cl).exp() };
    bp * logp.exp()
}

/// Random short token string over a small alphabet, so overlaps are common.
pub fn random_sentence(rng: &mut SeededRng, max_len: usize) -> String {
    const ALPHA: [&str; 5] = ["a", "b", "c", "D", "e"];
    let n = rng.below(max_len + 1);
    (0..n).map(|_| ALPHA[rng.below(ALPHA.len())]).collect::<Vec<_>>().join(" ")
}

// ---- fusion and causality invariants ----

fn features(g: &mut Graph<f64>, len: usize, dim: usize, modality: Modality, seed: u64) -> FeatureSequence {
    let node = g.input(Tensor::uniform(&[len, dim], 1.0, &mut SeededRng::new(seed)));
    FeatureSequence {
        node,
        len,
        dim,
        modality,
    }
}

/// Memory length equals the sum of present segment lengths for every
/// non-empty subset of {vision 16, speech 10, text 7}.
pub fn check_memory_lengths() -> std::result::Result<(), String> {
    let model = tiny_model(1);
    let (vd, sd) = (model.cfg.vision.dim, model.cfg.speech.dim);
    for mask in 1u8..8 {
        let (v, s, t) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let mut g = Graph::inference();
        let input = MultimodalInput {
            vision: v.then(|| features(&mut g, 16, vd, Modality::Vision, 1)),
            speech: s.then(|| features(&mut g, 10, sd, Modality::Speech, 2)),
            text_ids: if t { vec![5; 7] } else { vec![] },
            ..Default::default()
        };
        let mem = model.fuse_and_encode(&mut g, &input).map_err(|e| e.to_string())?;
        let want = 16 * v as usize + 10 * s as usize + 7 * t as usize;
        if mem.len != want || g.shape(mem.node) != [want, model.cfg.d_model] || mem.valid.len() != want {
            return Err(format!("subset v={v} s={s} t={t}: length {} shape {:?}, expected {want}", mem.len, g.shape(mem.node)));
        }
    }
    Ok(())
}

fn decoder_logits(model: &TrimodalModel<f64>, ex: &EncodedExample, dec_in: &[usize]) -> Tensor<f64> {
    let mut g = Graph::inference();
    let mem = model.memory(&mut g, &ex.media, &ex.text_ids).unwrap();
    let l = model.forward_teacher_forced(&mut g, &mem, dec_in).unwrap();
    g.value(l).clone()
}

/// Perturbing decoder input position `t` leaves logit rows `< t` bitwise
/// unchanged, and changes row `t`.
pub fn check_causality(seed: u64) -> std::result::Result<(), String> {
    let model = tiny_model(seed);
    let ex = tiny_example(seed, 16);
    let mut rng = SeededRng::new(seed);
    let dec: Vec<usize> = (0..6).map(|_| 4 + rng.below(12)).collect();
    let base = decoder_logits(&model, &ex, &dec);
    for t in 1..dec.len() {
        let mut alt = dec.clone();
        alt[t] = 4 + (alt[t] - 4 + 1 + rng.below(11)) % 12;
        let out = decoder_logits(&model, &ex, &alt);
        for row in 0..dec.len() {
            let same = base.row(row).iter().zip(out.row(row)).all(|(a, b)| a.to_bits() == b.to_bits());
            if row < t && !same {
                return Err(format!("seed {seed}: perturbing position {t} changed logits at {row}"));
            }
            if row == t && same {
                return Err(format!("seed {seed}: perturbing position {t} left its own logits unchanged"));
            }
        }
    }
    Ok(())
}

/// Loss with a segment present but fully masked out minus loss with the
/// segment absent, maximized over vision and speech.
pub fn padded_vs_absent_gap(seed: u64) -> f64 {
    let model = tiny_model(seed);
    let ex = tiny_example(seed, 16);
    let loss = |pad_vision: Option<bool>, pad_speech: Option<bool>| -> f64 {
        let mut g = Graph::inference();
        let (v, s) = model.encode_media(&mut g, &ex.media).unwrap();
        let input = MultimodalInput {
            vision_valid: pad_vision.map(|p| vec![!p; v.unwrap().len]),
            speech_valid: pad_speech.map(|p| vec![!p; s.unwrap().len]),
            vision: pad_vision.and(v),
            speech: pad_speech.and(s),
            text_ids: ex.text_ids.clone(),
            text_valid: None,
        };
        let mem = model.fuse_and_encode(&mut g, &input).unwrap();
        let mut dec = vec![trimodal::text::BOS];
        dec.extend_from_slice(&ex.target_ids);
        let mut labels = ex.target_ids.clone();
        labels.push(trimodal::text::EOS);
        let logits = model.forward_teacher_forced(&mut g, &mem, &dec).unwrap();
        let l = g.cross_entropy(logits, &labels, trimodal::text::PAD).unwrap();
        g.value(l).data()[0]
    };
    let none = loss(None, None);
    let cases = [
        (Some(true), None),
        (None, Some(true)),
        (Some(true), Some(true)),
    ];
    let mut gap = 0.0f64;
    for (pv, ps) in cases {
        gap = gap.max((loss(pv, ps) - none).abs());
    }
    // Sanity: with the segments present and valid, the loss does differ.
    assert!((loss(Some(false), Some(false)) - none).abs() > 1e-9);
    gap
}

// ---- small synthetic training fixtures ----

/// A model small enough to train in milliseconds on the synthetic corpus
/// (8-pixel blocks, 160-sample tones).
pub fn small_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ff_mult: 2,
        max_positions: 32,
        vision: VisionEncoderConfig {
            patch: 8,
            temporal_stride: 2,
            layers: 1,
            heads: 2,
            dim: 8,
            ff_mult: 2,
            max_tokens: 32,
        },
        speech: SpeechEncoderConfig {
            strides: vec![8, 20],
            conv_channels: 4,
            layers: 1,
            heads: 2,
            dim: 8,
            ff_mult: 2,
            num_buckets: 8,
            max_distance: 32,
        },
        seed,
    }
}

/// Encoded synthetic datasets for `tasks` and the vocabulary size.
pub fn synthetic_pool(tasks: &[&str], per_task: usize, seed: u64) -> (usize, Vec<Dataset>) {
    let spec = SyntheticCorpusSpec {
        tasks: tasks.iter().map(|t| t.to_string()).collect(),
        examples_per_task: per_task,
        seed,
        ..Default::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let prompts = PromptRegistry::new();
    let sets: Vec<(String, Vec<TrainingExample>)> = corpus
        .iter()
        .map(|d| (d.task.name().to_string(), d.examples(&prompts, &SpanMaskSpec::default(), seed).unwrap()))
        .collect();
    let vocab = build_vocab(sets.iter().flat_map(|(_, e)| e), 4096).unwrap();
    (vocab.len(), encode_datasets(&sets, &vocab))
}

pub fn params_with_prefix(model: &TrimodalModel<f32>, prefix: &str) -> Vec<Tensor<f32>> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| p.value.clone())
        .collect()
}

fn bitwise_same(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y))
}

/// With both freeze flags on, 10 steps leave both encoders bitwise
/// unchanged while the pool loss drops; with both off, both encoders get a
/// nonzero gradient. Returns (loss before, loss after).
pub fn check_freeze_contract() -> std::result::Result<(f64, f64), String> {
    let (vocab, data) = synthetic_pool(&["image_captioning", "speech_transcription", "video_captioning"], 16, 3);
    let all: Vec<EncodedExample> = data.iter().flat_map(|d| d.examples.clone()).collect();
    let model = TrimodalModel::<f32>::new(small_config(vocab, 3)).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        warmup_steps: 0,
        batch_size: 4,
        accumulation_steps: 2,
        max_steps: 10,
        freeze_vision: Some(true),
        freeze_speech: Some(true),
        ..Default::default()
    };
    let before = mean_loss(&model, &all, 16).map_err(|e| e.to_string())?;
    let (v0, s0) = (params_with_prefix(&model, "vision."), params_with_prefix(&model, "speech."));
    let mut t = Trainer::new(model, DatasetPool::new(data.clone(), 0).unwrap(), cfg.clone()).map_err(|e| e.to_string())?;
    t.run(|_| Ok(())).map_err(|e| e.to_string())?;
    if !bitwise_same(&v0, &params_with_prefix(&t.model, "vision.")) {
        return Err("vision encoder changed while frozen".into());
    }
    if !bitwise_same(&s0, &params_with_prefix(&t.model, "speech.")) {
        return Err("speech encoder changed while frozen".into());
    }
    let after = mean_loss(&t.model, &all, 16).map_err(|e| e.to_string())?;
    if after.is_nan() || after >= before {
        return Err(format!("loss did not decrease: {before} -> {after}"));
    }

    let mut model = t.model;
    model.set_encoders_frozen(false, false);
    model.store.zero_grads();
    let batch: Vec<&EncodedExample> = all.iter().step_by(5).collect();
    let mut g = Graph::new();
    let loss = model.batch_loss(&mut g, &batch).map_err(|e| e.to_string())?;
    g.backward(loss, &mut model.store).map_err(|e| e.to_string())?;
    let (gv, gs) = (model.store.grad_norm_prefix("vision."), model.store.grad_norm_prefix("speech."));
    if !(gv > 0.0 && gs > 0.0) {
        return Err(format!("unfrozen encoder grad norms vision {gv}, speech {gs}"));
    }
    Ok((before, after))
}

// ---- command-line pipeline ----

fn fail(stage: &'static str) -> impl Fn((i32, String)) -> String {
    move |(code, err)| format!("{stage} exited {code}: {err}")
}

pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_trimodal"))
}

/// Runs the binary and returns stdout, or the exit code and stderr.
pub fn run_bin(args: &[&str]) -> std::result::Result<String, (i32, String)> {
    let out = bin().args(args).output().expect("binary runs");
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err((out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned()))
    }
}

pub const PRETRAIN_TASKS: [&str; 4] = ["image_captioning", "speech_transcription", "language_reconstruction", "vision_qa"];
pub const ALL_METRICS: &str = "rouge1,rouge2,rougeL,f1,wer,bleu4,accuracy";

pub fn run_config(datasets: &[&str], out: &str, steps: u64, seed: u64) -> RunConfig {
    RunConfig {
        model: Some(small_config(0, seed)),
        train: TrainConfig {
            learning_rate: 3e-3,
            batch_size: 4,
            accumulation_steps: 2,
            max_steps: steps,
            warmup_steps: 20,
            seed,
            ..Default::default()
        },
        data: DataConfig {
            datasets: datasets.iter().map(|d| format!("corpus/{d}.jsonl").into()).collect(),
            ..Default::default()
        },
        output_dir: out.into(),
        ..Default::default()
    }
}

pub fn write_file(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[derive(Debug, PartialEq)]
pub struct PipelineRun {
    pub report: String,
    pub pretrain_digest: String,
    pub finetune_digest: String,
    pub generations: String,
}

/// synth -> pretrain (200 steps) -> finetune on vision_qa (100 steps) ->
/// generate -> eval, all through the binary, inside `dir`.
pub fn run_pipeline(dir: &Path, seed: u64) -> std::result::Result<PipelineRun, String> {
    let p = |name: &str| dir.join(name).display().to_string();
    let spec = SyntheticCorpusSpec {
        tasks: PRETRAIN_TASKS.map(String::from).to_vec(),
        examples_per_task: 16,
        seed,
        ..Default::default()
    };
    write_file(&dir.join("spec.toml"), &toml::to_string(&spec).unwrap());
    run_bin(&["synth", "--spec", &p("spec.toml"), "--out", &p("corpus")]).map_err(fail("synth"))?;
    write_file(&dir.join("pretrain.toml"), &run_config(&PRETRAIN_TASKS, "pre", 200, seed).to_toml());
    run_bin(&["pretrain", "--config", &p("pretrain.toml")]).map_err(fail("pretrain"))?;
    write_file(&dir.join("finetune.toml"), &run_config(&["vision_qa"], "ft", 100, seed).to_toml());
    run_bin(&["finetune", "--config", &p("finetune.toml"), "--checkpoint", &p("pre/checkpoint")]).map_err(fail("finetune"))?;
    let input = p("corpus/vision_qa.jsonl");
    run_bin(&["generate", "--config", &p("finetune.toml"), "--checkpoint", &p("ft/checkpoint"), "--input", &input, "--output", &p("gen.txt")])
        .map_err(fail("generate"))?;
    let refs: String = read_records(Path::new(&input))
        .unwrap()
        .iter()
        .map(|r| format!("{}\n", r.text_target))
        .collect();
    write_file(&dir.join("ref.txt"), &refs);
    run_bin(&["eval", "--hyp", &p("gen.txt"), "--ref", &p("ref.txt"), "--metrics", ALL_METRICS, "--out", &p("report.json")])
        .map_err(fail("eval"))?;
    Ok(PipelineRun {
        report: std::fs::read_to_string(dir.join("report.json")).unwrap(),
        pretrain_digest: checkpoint_digest(&dir.join("pre/checkpoint")).unwrap(),
        finetune_digest: checkpoint_digest(&dir.join("ft/checkpoint")).unwrap(),
        generations: std::fs::read_to_string(dir.join("gen.txt")).unwrap(),
    })
}

// ---- sampling, span corruption and metric checks ----

/// ESW weights by direct evaluation of `p_i^S / Σ p_j^S`.
pub fn oracle_esw(sizes: &[usize], s: f64) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    let raised: Vec<f64> = sizes.iter().map(|&n| (n as f64 / total as f64).powf(s)).collect();
    let z: f64 = raised.iter().sum();
    raised.iter().map(|w| w / z).collect()
}

/// Closed form, the 100k-draw empirical check and `S = 1` proportions.
pub fn check_esw() -> std::result::Result<String, String> {
    let w = esw_weights(&[9, 1], 0.5).map_err(|e| e.to_string())?;
    if (w[0] - 0.75).abs() > 1e-12 || (w[1] - 0.25).abs() > 1e-12 {
        return Err(format!("esw([9,1], 0.5) = {w:?}"));
    }
    let sampler = EswSampler::new(&[9, 1], 0.5).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(2024);
    let draws = 100_000;
    let first = (0..draws).filter(|_| sampler.sample(&mut rng) == 0).count() as f64 / draws as f64;
    if (first - 0.75).abs() > 0.01 {
        return Err(format!("empirical share {first} is not within 0.01 of 0.75"));
    }
    for sizes in [vec![9, 1], vec![3, 5, 7, 100], vec![1, 1, 2]] {
        let total: usize = sizes.iter().sum();
        let w = esw_weights(&sizes, 1.0).map_err(|e| e.to_string())?;
        for (wi, &n) in w.iter().zip(&sizes) {
            if (wi - n as f64 / total as f64).abs() > 1e-12 {
                return Err(format!("S=1 on {sizes:?} gives {w:?}"));
            }
        }
    }
    Ok(format!("empirical share {first:.4}"))
}

pub fn random_tokens(rng: &mut SeededRng, len: usize) -> Vec<String> {
    (0..len).map(|_| format!("w{}", rng.below(50))).collect()
}

/// `n` corruption round trips over random lengths 1..=60.
pub fn check_span_round_trips(n: usize, seed: u64) -> std::result::Result<(), String> {
    let mut rng = SeededRng::new(seed);
    let spec = SpanMaskSpec::default();
    for i in 0..n {
        let len = 1 + rng.below(60);
        let tokens = random_tokens(&mut rng, len);
        let (input, target) = corrupt_spans(&tokens, &spec, &mut rng).map_err(|e| format!("trial {i}: {e}"))?;
        let back = reconstruct(&input, &target).map_err(|e| format!("trial {i}: {e}"))?;
        if back != tokens {
            return Err(format!("trial {i}: {tokens:?} came back as {back:?}"));
        }
    }
    Ok(())
}

/// Fraction of tokens moved into spans over `total` tokens in sentences of
/// 100.
pub fn masked_fraction(spec: &SpanMaskSpec, total: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut masked = 0;
    for _ in 0..total / 100 {
        let tokens = random_tokens(&mut rng, 100);
        let (_, target) = corrupt_spans(&tokens, spec, &mut rng).expect("100 tokens fit the sentinel budget");
        masked += target.iter().filter(|t| !t.starts_with("<extra_")).count();
    }
    masked as f64 / (total / 100 * 100) as f64
}

/// Library metrics against the brute-force oracles on random pairs. Returns
/// the largest absolute difference seen.
pub fn metric_oracle_gap(pairs: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let c = random_sentence(&mut rng, 8);
        let r = random_sentence(&mut rng, 8);
        let r2 = random_sentence(&mut rng, 8);
        let mut gaps = vec![
            rouge_n(&c, &r, 1) - oracle_rouge_n(&c, &r, 1),
            rouge_n(&c, &r, 2) - oracle_rouge_n(&c, &r, 2),
            rouge_l(&c, &r) - oracle_rouge_l(&c, &r),
            token_f1(&c, &r) - oracle_f1(&c, &r),
            bleu4(&c, &[&r]) - oracle_bleu4(&c, &[&r]),
            bleu4(&c, &[&r, &r2]) - oracle_bleu4(&c, &[&r, &r2]),
        ];
        if !toks(&r).is_empty() {
            gaps.push(wer(&c, &r).expect("reference is non-empty") - oracle_wer(&c, &r));
        }
        worst = gaps.iter().fold(worst, |m, g| m.max(g.abs()));
    }
    worst
}

/// Hand-evaluated metric cases: `(description, computed, expected)`.
pub fn metric_hand_cases() -> Vec<(&'static str, f64, f64)> {
    vec![
        ("rouge1 identical", rouge_n("a b c", "a b c", 1), 1.0),
        ("rouge1 a b c / a b d", rouge_n("a b c", "a b d", 1), 2.0 / 3.0),
        ("rouge1 disjoint", rouge_n("a b", "c d", 1), 0.0),
        ("rouge1 both empty", rouge_n("", "", 1), 1.0),
        ("rouge1 one empty", rouge_n("", "a", 1), 0.0),
        ("rougeL a c e / a b c d e", rouge_l("a c e", "a b c d e"), 0.75),
        ("rougeL reversed", rouge_l("c b a", "a b c"), 1.0 / 3.0),
        ("wer identical", wer("a b c", "a b c").unwrap_or(f64::NAN), 0.0),
        ("wer one substitution", wer("a x c", "a b c").unwrap_or(f64::NAN), 1.0 / 3.0),
        ("wer empty hypothesis", wer("", "a b c d").unwrap_or(f64::NAN), 1.0),
        ("wer twice as long, disjoint", wer("w x y z", "a b").unwrap_or(f64::NAN), 2.0),
        ("f1 a a b / a b b", token_f1("a a b", "a b b"), 2.0 / 3.0),
        ("f1 disjoint", token_f1("a", "b"), 0.0),
        ("bleu4 identical", bleu4("the cat sat on the mat", &["the cat sat on the mat"]), 1.0),
        ("bleu4 half length", bleu4("a b c d", &["a b c d e f g h"]), (-1.0f64).exp()),
        ("bleu4 disjoint", bleu4("w x y z", &["a b c d"]), 0.0),
    ]
}
