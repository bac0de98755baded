use std::collections::BTreeSet;

use cosformer::model::attention::{exact_attention, nystrom_attention, AttentionKind, MultiHeadAttention};
use cosformer::model::decoder::sinusoidal_positions;
use cosformer::model::{
    Conditioning, Cosformer, HeadKind, ModelConfig, Projection, BOS, EOS,
};
use cosformer::numerics::{layer_norm, softmax_rows, Graph, ParamStore, Tensor};
use cosformer::rng::substream;
use rand::Rng;

fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn embed(word: &str) -> Vec<f64> {
    let mut rng = substream(7, word);
    (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn words(s: &[&str]) -> Vec<String> {
    s.iter().map(|w| w.to_string()).collect()
}

fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let d = q.cols() as f64;
    let mut out = Tensor::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let scores: Vec<f64> = (0..k.rows())
            .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / d.sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..v.cols() {
            let val: f64 = (0..k.rows()).map(|j| e[j] / z * v.get(j, c)).sum();
            out.set(i, c, val);
        }
    }
    out
}

#[test]
fn exact_attention_matches_naive_loops() {
    let mut rng = substream(1, "attn");
    let q = random(&mut rng, 4, 8);
    let k = random(&mut rng, 4, 8);
    let v = random(&mut rng, 4, 8);
    let out = exact_attention(&q, &k, &v, false);
    assert!(out.max_abs_diff(&naive_attention(&q, &k, &v)) < 1e-12);
}

#[test]
fn causal_attention_ignores_future_rows() {
    let mut rng = substream(2, "attn");
    let q = random(&mut rng, 5, 4);
    let k = random(&mut rng, 5, 4);
    let v = random(&mut rng, 5, 4);
    let out = exact_attention(&q, &k, &v, true);
    for i in 0..5 {
        let sub = naive_attention(
            &q.slice_rows(i, 1),
            &k.slice_rows(0, i + 1),
            &v.slice_rows(0, i + 1),
        );
        assert!(out.slice_rows(i, 1).max_abs_diff(&sub) < 1e-12);
    }
}

#[test]
fn nystrom_with_singleton_segments_is_exact() {
    let mut rng = substream(3, "nys");
    for n in 1..=16 {
        let q = random(&mut rng, n, 16);
        let k = random(&mut rng, n, 16);
        let v = random(&mut rng, n, 16);
        let approx = nystrom_attention(&q, &k, &v, n, 24).unwrap();
        let exact = exact_attention(&q, &k, &v, false);
        assert!(approx.max_abs_diff(&exact) < 1e-5, "n={n}");
    }
}

#[test]
fn nystrom_on_duplicated_rows() {
    let mut rng = substream(4, "nys");
    let base = random(&mut rng, 4, 8);
    let rows: Vec<Vec<f64>> = (0..8).map(|i| base.row(i / 2).to_vec()).collect();
    let x = Tensor::from_rows(&rows).unwrap();
    let approx = nystrom_attention(&x, &x, &x, 4, 24).unwrap();
    let exact = exact_attention(&x, &x, &x, false);
    assert!(approx.max_abs_diff(&exact) < 1e-3);
}

#[test]
fn multi_head_nystrom_falls_back_to_exact_on_short_bags() {
    let mut rng = substream(5, "mha");
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "t", 32, 4, 8, 24).unwrap();
    let x = random(&mut rng, 8, 32);
    let run = |kind| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let o = mha.forward(&mut g, &store, xv, xv, kind).unwrap();
        g.value(o).clone()
    };
    let auto = run(AttentionKind::Nystrom);
    let exact = run(AttentionKind::Exact { causal: false });
    let forced = run(AttentionKind::NystromForced(8));
    assert_eq!(auto, exact);
    assert!(forced.max_abs_diff(&exact) < 1e-5);
}

fn param(model: &Cosformer, name: &str) -> Tensor {
    model.store.value(model.store.id(name).unwrap()).clone()
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = x.matmul(w);
    for r in 0..y.rows() {
        for c in 0..y.cols() {
            y.set(r, c, y.get(r, c) + b.get(0, c));
        }
    }
    y
}

/// Multi-head attention assembled from per-row loops.
fn traced_mha(model: &Cosformer, prefix: &str, q_src: &Tensor, kv_src: &Tensor, causal: bool) -> Tensor {
    let p = |n: &str| param(model, &format!("{prefix}.{n}"));
    let q = affine(q_src, &p("wq"), &p("bq"));
    let k = affine(kv_src, &p("wk"), &p("bk"));
    let v = affine(kv_src, &p("wv"), &p("bv"));
    let heads = model.config.heads;
    let dh = model.config.d_model / heads;
    let mut cat = Tensor::zeros(q.rows(), model.config.d_model);
    for h in 0..heads {
        let (qh, kh, vh) = (q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh));
        for i in 0..q.rows() {
            let visible = if causal { i + 1 } else { kh.rows() };
            let row = naive_attention(&qh.slice_rows(i, 1), &kh.slice_rows(0, visible), &vh.slice_rows(0, visible));
            for c in 0..dh {
                cat.set(i, h * dh + c, row.get(0, c));
            }
        }
    }
    affine(&cat, &p("wo"), &p("bo"))
}

fn traced_norm(model: &Cosformer, prefix: &str, x: &Tensor) -> Tensor {
    layer_norm(
        x,
        &param(model, &format!("{prefix}.gain")),
        &param(model, &format!("{prefix}.bias")),
        model.config.ln_eps,
    )
    .unwrap()
}

fn small_decoder_model(seed: u64, decoder_layers: usize) -> Cosformer {
    let config = ModelConfig {
        encoder_layers: 0,
        decoder_layers,
        ..ModelConfig::default()
    };
    let mut rng = substream(seed, "init");
    let mut m = Cosformer::new(config, &embed, &mut rng).unwrap();
    m.add_task(0, &[words(&["invasive", "ductal", "carcinoma"]), words(&["lobular"])], &embed, &mut rng)
        .unwrap();
    m
}

#[test]
fn decode_step_matches_hand_trace() {
    let model = small_decoder_model(11, 1);
    let mut rng = substream(11, "memory");
    let memory = random(&mut rng, 6, 32);
    let prefix = [BOS, 2, 3];
    let table = param(&model, "dec.words");
    let rows: Vec<&[f64]> = prefix.iter().map(|&t| table.row(t)).collect();
    let emb = Tensor::from_rows(&rows).unwrap();
    let h = affine(&emb, &param(&model, "dec.in.w"), &param(&model, "dec.in.b"))
        .add(&sinusoidal_positions(prefix.len(), 32));
    let s = traced_mha(&model, "dec.0.self", &h, &h, true);
    let h1 = h.add(&traced_norm(&model, "dec.0.self_norm", &s));
    let c = traced_mha(&model, "dec.0.cross", &h1, &memory, false);
    let x = h1.add(&traced_norm(&model, "dec.0.cross_norm", &c));
    let ff = affine(&x, &param(&model, "dec.0.ffn.w1"), &param(&model, "dec.0.ffn.b1")).map(|v| v.max(0.0));
    let out = affine(&ff, &param(&model, "dec.0.ffn.w2"), &param(&model, "dec.0.ffn.b2"));
    let head_b = param(&model, "dec.head.b").transpose();
    let logits = affine(&out.slice_rows(2, 1), &param(&model, "dec.head.w").transpose(), &head_b);

    let got = model.decode_step(&memory, &prefix).unwrap();
    assert_eq!(got.len(), model.vocab.len());
    let diff = got.iter().zip(logits.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "diff {diff}");
}

#[test]
fn decode_step_is_causal() {
    let model = small_decoder_model(12, 2);
    let mut rng = substream(12, "memory");
    let memory = random(&mut rng, 5, 32);
    let long = [BOS, 2, 4, 3, 5];
    for k in 1..=long.len() {
        let step = model.decode_step(&memory, &long[..k]).unwrap();
        let mut alt = long[..k].to_vec();
        alt.extend([5, 2]);
        let cosformer::model::Head::Decoder(dec) = model.head() else { unreachable!() };
        let mut g = Graph::new();
        let m = g.constant(memory.clone());
        let h = dec.hidden(&mut g, &model.store, m, &alt).unwrap();
        let l = dec.logits(&mut g, &model.store, h);
        let row = g.value(l).slice_rows(k - 1, 1);
        assert_eq!(row.data(), &step[..]);
    }
}

#[test]
fn decode_step_rejects_bad_prefixes() {
    let model = small_decoder_model(13, 1);
    let memory = Tensor::zeros(3, 32);
    assert!(model.decode_step(&memory, &[]).is_err());
    assert!(model.decode_step(&memory, &[2]).is_err());
    assert!(model.decode_step(&memory, &[BOS, 99]).is_err());
}

#[test]
fn head_growth_preserves_old_logits() {
    let mut model = small_decoder_model(14, 2);
    let mut rng = substream(14, "memory");
    let memory = random(&mut rng, 4, 32);
    let before = model.decode_step(&memory, &[BOS, 2]).unwrap();
    let old_head = param(&model, "dec.head.w");
    let n = model.vocab.len();
    let mut grow = substream(14, "grow");
    model
        .add_task(1, &[words(&["squamous", "cell", "carcinoma"]), words(&["adenocarcinoma"])], &embed, &mut grow)
        .unwrap();
    assert_eq!(model.vocab.len(), n + 3);
    let after = model.decode_step(&memory, &[BOS, 2]).unwrap();
    assert_eq!(after.len(), n + 3);
    assert_eq!(&after[..n], &before[..]);
    assert_eq!(param(&model, "dec.head.w").slice_rows(0, n), old_head);
}

#[test]
fn encoder_stack_is_layer_composition() {
    let config = ModelConfig {
        projection: Projection::SharedLinear,
        ..ModelConfig::default()
    };
    let mut rng = substream(15, "init");
    let model = Cosformer::new(config, &embed, &mut rng).unwrap();
    for n in [3, 12] {
        let bag = random(&mut rng, n, 16);
        let memory = model.encode(&bag, &Conditioning::task_agnostic()).unwrap();
        assert_eq!(memory.shape(), [n, 32]);
        let mut z = bag.matmul(&param(&model, "ec.general"));
        for layer in &model.encoder().layers {
            let mut g = Graph::new();
            let x = g.constant(z.clone());
            let a = layer.attention.forward(&mut g, &model.store, x, x, AttentionKind::Nystrom).unwrap();
            let normed = layer.norm.forward(&mut g, &model.store, a);
            let y = g.add(x, normed);
            z = g.value(y).clone();
        }
        assert!(memory.max_abs_diff(&z) < 1e-12);
    }
}

#[test]
fn empty_encoder_is_identity() {
    let config = ModelConfig {
        encoder_layers: 0,
        d_model: 16,
        projection: Projection::SharedLinear,
        ..ModelConfig::default()
    };
    let mut rng = substream(16, "init");
    let mut model = Cosformer::new(config, &embed, &mut rng).unwrap();
    let id = model.store.id("ec.general").unwrap();
    *model.store.value_mut(id) = Tensor::identity(16);
    let bag = random(&mut rng, 5, 16);
    assert_eq!(model.encode(&bag, &Conditioning::task_agnostic()).unwrap(), bag);
}

#[test]
fn task_il_decoding_stays_inside_woi() {
    for seed in 0..20 {
        let mut model = small_decoder_model(100 + seed, 2);
        let mut rng = substream(seed, "extra");
        model
            .add_task(1, &[words(&["squamous", "cell"]), words(&["normal"])], &embed, &mut rng)
            .unwrap();
        let memory = random(&mut rng, 4, 32);
        for task in 0..2 {
            let d = model.greedy_decode(&memory, Some(task), 8).unwrap();
            let woi: &BTreeSet<usize> = model.vocab.woi(task).unwrap();
            assert!(d.tokens.iter().all(|t| woi.contains(t) && *t != EOS));
        }
    }
}

#[test]
fn linear_head_grows_per_class() {
    let config = ModelConfig {
        head: HeadKind::Linear,
        projection: Projection::SharedLinear,
        ..ModelConfig::default()
    };
    let mut rng = substream(17, "init");
    let mut model = Cosformer::new(config, &embed, &mut rng).unwrap();
    model.add_task(0, &[words(&["a"]), words(&["b"])], &embed, &mut rng).unwrap();
    model.add_task(1, &[words(&["c"]), words(&["d"]), words(&["e"])], &embed, &mut rng).unwrap();
    assert_eq!(model.output_width(), 5);
    assert_eq!(model.class_offset(1), 2);
    let bag = random(&mut rng, 4, 16);
    let full = model.forced_logits(&bag, 1, 2, &Conditioning::task_agnostic()).unwrap();
    let task = model.forced_logits(&bag, 1, 2, &Conditioning::task_aware(1, 1.0, 0.0)).unwrap();
    assert_eq!(full.shape(), [1, 5]);
    assert_eq!(task, full.slice_cols(2, 3));
    let e = model.embedding(&bag, &Conditioning::task_agnostic()).unwrap();
    assert_eq!(e.len(), 32);
    let _ = softmax_rows(&full).unwrap();
}
