mod common;

use common::*;
use proptest::prelude::*;
use trimodal::encoders::Media;
use trimodal::model::{argmax, DecodeMode, GenerationConfig, ModelConfig, MultimodalInput, TrimodalModel};
use trimodal::nn::{Linear, LN_EPS};
use trimodal::rng::SeededRng;
use trimodal::tensor::{Graph, ParamStore};
use trimodal::text::{BOS, EOS};

#[test]
fn memory_length_is_sum_of_present_segments() {
    check_memory_lengths().unwrap();
}

#[test]
fn memory_length_from_real_media() {
    let model = tiny_model(0);
    // 2x4 image, patch 2 -> 2 tokens; 18 samples, strides [2, 3] -> 3 frames.
    for (img, aud, text, want) in [(true, true, 5, 10), (true, false, 0, 2), (false, true, 1, 4)] {
        let media = tiny_media(0, img, false, aud);
        let mut g = Graph::inference();
        let mem = model.memory(&mut g, &media, &vec![6; text]).unwrap();
        assert_eq!(mem.len, want);
    }
}

#[test]
fn text_only_memory_is_the_text_segment() {
    let model = tiny_model(2);
    let mut g = Graph::inference();
    let a = model.memory(&mut g, &Media::default(), &[4, 5, 6]).unwrap();
    let input = MultimodalInput {
        text_ids: vec![4, 5, 6],
        ..Default::default()
    };
    let b = model.fuse_and_encode(&mut g, &input).unwrap();
    assert_eq!(a.len, 3);
    assert!(g.value(a.node).bitwise_eq(g.value(b.node)));
}

#[test]
fn empty_input_and_wrong_feature_width_are_rejected() {
    let model = tiny_model(0);
    let mut g = Graph::inference();
    assert!(model.fuse_and_encode(&mut g, &MultimodalInput::default()).is_err());
    let mut cfg = ModelConfig::tiny(16);
    cfg.speech.dim = 6;
    let other = TrimodalModel::<f64>::new(cfg).unwrap();
    let (_, speech) = other.encode_media(&mut g, &tiny_media(0, false, false, true)).unwrap();
    let input = MultimodalInput {
        speech,
        ..Default::default()
    };
    let err = model.fuse_and_encode(&mut g, &input).unwrap_err().to_string();
    assert!(err.contains("speech"), "{err}");
}

#[test]
fn projections_are_modality_specific() {
    let mut cfg = ModelConfig::tiny(16);
    cfg.speech.dim = cfg.vision.dim;
    let model = TrimodalModel::<f64>::new(cfg).unwrap();
    let mut swapped = model.clone();
    std::mem::swap(&mut swapped.proj_vision, &mut swapped.proj_speech);
    let media = tiny_media(3, true, false, true);
    let run = |m: &TrimodalModel<f64>| {
        let mut g = Graph::inference();
        let mem = m.memory(&mut g, &media, &[4, 7]).unwrap();
        g.value(mem.node).clone()
    };
    assert!(!run(&model).bitwise_eq(&run(&swapped)));
}

#[test]
fn logits_are_causal() {
    for seed in 0..5 {
        check_causality(seed).unwrap();
    }
}

#[test]
fn memory_perturbation_reaches_every_position() {
    let model = tiny_model(4);
    let ex = tiny_example(4, 16);
    let dec = [BOS, 5, 6, 7, 8];
    let run = |bump: bool| {
        let mut g = Graph::inference();
        let mut mem = model.memory(&mut g, &ex.media, &ex.text_ids).unwrap();
        let mut value = g.value(mem.node).clone();
        if bump {
            value.data_mut()[0] += 0.5;
        }
        mem.node = g.input(value);
        let l = model.forward_teacher_forced(&mut g, &mem, &dec).unwrap();
        g.value(l).clone()
    };
    let (a, b) = (run(false), run(true));
    for row in 0..dec.len() {
        assert_ne!(a.row(row), b.row(row), "row {row}");
    }
}

#[test]
fn padded_segment_matches_absent_segment() {
    for seed in 0..5 {
        let gap = padded_vs_absent_gap(seed);
        assert!(gap < 1e-5, "seed {seed}: {gap}");
    }
}

fn zero_layer_model(seed: u64) -> TrimodalModel<f64> {
    let mut cfg = ModelConfig::tiny(16);
    cfg.dec_layers = 0;
    cfg.seed = seed;
    TrimodalModel::new(cfg).unwrap()
}

#[test]
fn zero_layer_decoder_is_layernormed_embedding_times_table() {
    let mut model = zero_layer_model(5);
    let mut rng = SeededRng::new(9);
    for id in [model.dec_ln.gain, model.dec_ln.bias] {
        for v in model.store.get_mut(id).value.data_mut() {
            *v = rng.uniform_range(-1.5, 1.5);
        }
    }
    let dec = [BOS, 9, 4, 12];
    let ex = tiny_example(5, 16);
    let mut g = Graph::inference();
    let mem = model.memory(&mut g, &ex.media, &ex.text_ids).unwrap();
    let logits = model.forward_teacher_forced(&mut g, &mem, &dec).unwrap();
    let got = g.value(logits);

    let s = &model.store;
    let e = &s.get(model.tok_embed).value;
    let p = &s.get(model.dec_pos).value;
    let gain = s.get(model.dec_ln.gain).value.data();
    let bias = s.get(model.dec_ln.bias).value.data();
    let d = model.cfg.d_model;
    for (t, &tok) in dec.iter().enumerate() {
        let x: Vec<f64> = (0..d).map(|j| e.row(tok)[j] + p.row(t)[j]).collect();
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let h: Vec<f64> = (0..d)
            .map(|j| (x[j] - mean) / (var + LN_EPS).sqrt() * gain[j] + bias[j])
            .collect();
        for v in 0..model.cfg.vocab_size {
            let want: f64 = (0..d).map(|j| h[j] * e.row(v)[j]).sum();
            let diff = (got.row(t)[v] - want).abs();
            assert!(diff < 1e-12, "pos {t} token {v}: {diff}");
        }
    }
}

#[test]
fn crafted_weights_generate_one_token_then_stop() {
    // Zero-layer decoder: logits(t) = LN(E[tok_t] + P[t]) · Eᵀ. Every embedding
    // row is zero except `a` and EOS, which point along orthogonal
    // zero-mean directions x and y. P[0] = x makes `a` the argmax after BOS;
    // P[1] = y - x turns the next input (`a`) into y, so EOS follows.
    const A: usize = 7;
    let mut model = zero_layer_model(0);
    let x = [1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let y = [0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0];
    let d = model.cfg.d_model;
    let (emb, pos) = (model.tok_embed, model.dec_pos);
    let e = model.store.get_mut(emb).value.data_mut();
    e.fill(0.0);
    e[A * d..(A + 1) * d].copy_from_slice(&x);
    e[EOS * d..(EOS + 1) * d].copy_from_slice(&y);
    let p = model.store.get_mut(pos).value.data_mut();
    p.fill(0.0);
    p[..d].copy_from_slice(&x);
    for j in 0..d {
        p[d + j] = y[j] - x[j];
    }
    let media = tiny_media(0, true, false, true);
    let greedy = model.generate(&media, &[4, 5], &GenerationConfig::default()).unwrap();
    assert_eq!(greedy, vec![A]);
    let beam = model.generate(&media, &[4, 5], &GenerationConfig::beam(3, 1.0, 8)).unwrap();
    assert_eq!(beam, vec![A]);
}

#[test]
fn greedy_generation_is_deterministic() {
    let model = tiny_model(6);
    let media = tiny_media(6, false, true, true);
    let cfg = GenerationConfig {
        max_len: 10,
        ..Default::default()
    };
    let a = model.generate(&media, &[4, 8, 9], &cfg).unwrap();
    let b = model.generate(&media, &[4, 8, 9], &cfg).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty());
}

#[test]
fn beam_width_one_equals_greedy_on_random_models() {
    for seed in 0..20 {
        let mut cfg = ModelConfig::tiny(16);
        cfg.seed = 100 + seed;
        let model = TrimodalModel::<f64>::new(cfg).unwrap();
        let media = tiny_media(seed, seed % 2 == 0, seed % 2 == 1, seed % 3 != 0);
        let mut rng = SeededRng::new(seed);
        let text: Vec<usize> = (0..1 + rng.below(4)).map(|_| 4 + rng.below(12)).collect();
        let greedy = model
            .generate(&media, &text, &GenerationConfig { max_len: 8, ..Default::default() })
            .unwrap();
        for lp in [0.0, 1.0, 2.0] {
            let beam = model.generate(&media, &text, &GenerationConfig::beam(1, lp, 8)).unwrap();
            assert_eq!(beam, greedy, "seed {seed} penalty {lp}");
        }
    }
}

#[test]
fn wider_beam_never_scores_below_greedy() {
    for seed in 0..5 {
        let mut cfg = ModelConfig::tiny(16);
        cfg.seed = 200 + seed;
        let model = TrimodalModel::<f64>::new(cfg).unwrap();
        let media = tiny_media(seed, true, false, false);
        let logprob = |seq: &[usize]| {
            let mut g = Graph::inference();
            let mem = model.memory(&mut g, &media, &[4]).unwrap();
            let mut dec = vec![BOS];
            dec.extend_from_slice(seq);
            let l = model.forward_teacher_forced(&mut g, &mem, &dec).unwrap();
            let v = g.value(l);
            let mut labels = seq.to_vec();
            labels.push(EOS);
            let mut total = 0.0;
            for (t, &y) in labels.iter().enumerate() {
                let row = v.row(t);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                total += row[y] - lse;
            }
            total
        };
        let greedy = model.generate(&media, &[4], &GenerationConfig { max_len: 4, ..Default::default() }).unwrap();
        let beam = model.generate(&media, &[4], &GenerationConfig::beam(4, 0.0, 4)).unwrap();
        // With no length penalty, a finished greedy hypothesis is in the
        // beam's search space, so the beam result is at least as likely.
        if greedy.len() < 4 {
            assert!(logprob(&beam) >= logprob(&greedy) - 1e-12, "seed {seed}");
        }
    }
}

#[test]
fn generation_config_is_validated() {
    let model = tiny_model(0);
    let bad = GenerationConfig {
        mode: DecodeMode::Beam,
        width: 0,
        ..Default::default()
    };
    assert!(model.generate(&Media::default(), &[4], &bad).is_err());
    let bad = GenerationConfig {
        max_len: 0,
        ..Default::default()
    };
    assert!(model.generate(&Media::default(), &[4], &bad).is_err());
}

#[test]
fn linear_layer_has_d_squared_plus_d_parameters() {
    for d in [1, 7, 64] {
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::new(&mut store, "lin", d, d, &mut SeededRng::new(0)).unwrap();
        assert_eq!(store.count(false), d * d + d);
        assert_eq!(lin.num_params(), d * d + d);
    }
}

#[test]
fn freezing_encoders_removes_exactly_their_parameters() {
    let mut model = TrimodalModel::<f32>::new(ModelConfig::default()).unwrap();
    let all = model.count_parameters(true);
    let enc = model.store.count_prefix("vision.") + model.store.count_prefix("speech.");
    model.set_encoders_frozen(true, true);
    assert_eq!(model.count_parameters(true), all - enc);
    assert_eq!(model.count_parameters(false), all);
    model.set_encoders_frozen(false, false);
    assert_eq!(model.count_parameters(true), all);
}

#[test]
fn default_config_matches_hand_ledger() {
    // d = 64, vocab 256, 128 positions, feed-forward 4d.
    // attention: q, v, o with bias (3 * (d*d + d)) + k without bias (d*d)
    //   = 4*4096 + 3*64 = 16576
    // feed-forward: d*4d + 4d + 4d*d + d = 32768 + 256 + 64 = 33088
    // layer norm: 2d = 128
    // encoder block: 2 LN + attention + feed-forward = 256 + 16576 + 33088 = 49920
    // decoder block: 3 LN + 2 attention + feed-forward = 384 + 33152 + 33088 = 66624
    let vision = 12_352   // patch2d: 3*8*8 -> 64, 192*64 + 64
        + 24_640          // patch3d: 3*2*8*8 -> 64, 384*64 + 64
        + 16_384          // positions: 256 x 64
        + 2 * 49_920      // two blocks
        + 128; //            final LN
    let speech = 288      // conv0: 8*1 -> 32, 256 + 32
        + 41_024          // conv1: 20*32 -> 64, 40960 + 64
        + 128             // relative bias: 32 buckets x 4 heads
        + 2 * 4           // per-layer gates
        + 2 * 49_920      // two blocks
        + 128; //            final LN
    let fusion = 2 * 4_160  // projections: 64 -> 64 with bias
        + 16_384            // token embeddings (tied output)
        + 8_192             // encoder positions
        + 192               // three segment embeddings
        + 4 * 49_920        // four joint encoder blocks
        + 128; //              final LN
    let decoder = 8_192 + 4 * 66_624 + 128;
    assert_eq!(vision, 153_344);
    assert_eq!(speech, 141_416);
    let model = TrimodalModel::<f32>::new(ModelConfig::default()).unwrap();
    assert_eq!(model.store.count_prefix("vision."), vision);
    assert_eq!(model.store.count_prefix("speech."), speech);
    assert_eq!(model.count_parameters(false), vision + speech + fusion + decoder);
    assert_eq!(model.count_parameters(false), 802_472);
}

proptest! {
    #[test]
    fn argmax_ignores_a_constant_shift(
        v in prop::collection::vec(-64i32..64, 1..40),
        c in -1000i32..1000,
    ) {
        // Eighths are exact in binary, so the shifted values carry no rounding.
        let a: Vec<f64> = v.iter().map(|&x| x as f64 / 8.0).collect();
        let b: Vec<f64> = a.iter().map(|&x| x + c as f64 / 8.0).collect();
        prop_assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index(n in 2usize..20, hi in 0usize..20) {
        let hi = hi % n;
        let mut v = vec![0.0; n];
        v[hi] = 1.0;
        v[n - 1] = 1.0;
        prop_assert_eq!(argmax(&v), hi);
    }
}

#[test]
fn tied_output_has_no_separate_projection() {
    let model = TrimodalModel::<f32>::new(ModelConfig::tiny(16)).unwrap();
    let names: Vec<&str> = model.store.iter().map(|(_, p)| p.name.as_str()).collect();
    assert!(!names.iter().any(|n| n.contains("lm_head") || n.contains("output")));
    let table = &model.store.get(model.tok_embed).value;
    assert_eq!(table.shape(), &[16, 8]);
}
