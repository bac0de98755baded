use std::collections::BTreeSet;

use cosformer::continual::buffer::{importance_score, kmeans, text_retrieval_picks, Candidate};
use cosformer::continual::{
    checkpoint, evaluate_task, freeze_past_experts, past_to_present_loss, register_task,
    run_sequence, select_representatives, snapshot_logits, train_task, BufferEntry,
    BufferStrategy, RehearsalBuffer, Sample, Scenario, TaskSpec, TrainConfig,
};
use cosformer::model::{Cosformer, ModelConfig};
use cosformer::numerics::{Graph, Tensor};
use cosformer::rng::substream;
use cosformer::synthdata::{make_stream, word_embedding, Split, Stream, StreamConfig};
use cosformer::Error;
use rand::Rng;

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        landmarks: 4,
        encoder_layers: 1,
        decoder_layers: 1,
        ..ModelConfig::default()
    }
}

fn small_stream(tasks: usize, bags_per_class: usize, seed: u64) -> Stream {
    make_stream(&StreamConfig {
        tasks,
        bags_per_class,
        bag_size: [4, 8],
        seed,
        ..StreamConfig::default()
    })
    .unwrap()
}

fn words(labels: &[&[&str]]) -> Vec<Vec<String>> {
    labels
        .iter()
        .map(|l| l.iter().map(|w| w.to_string()).collect())
        .collect()
}

fn embed(w: &str) -> Vec<f64> {
    word_embedding(w, 16)
}

fn new_model(config: ModelConfig) -> Cosformer {
    Cosformer::new(config, &embed, &mut substream(0, "init")).unwrap()
}

fn random_bag(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn registration_grows_append_only() {
    let mut model = new_model(small_model());
    let mut rng = substream(0, "grow");
    let t0 = TaskSpec::from_words(0, &words(&[&["clear", "carcinoma"], &["normal"]]));
    register_task(&mut model, &t0, &embed, &mut rng).unwrap();
    assert_eq!(model.committee().expert_count(), 1);
    assert_eq!(model.vocab.len(), 2 + 3);

    let head = model.store.id("dec.head.w").unwrap();
    let before = model.store.value(head).clone();
    let t1 = TaskSpec::from_words(1, &words(&[&["squamous", "carcinoma"], &["tumor"]]));
    register_task(&mut model, &t1, &embed, &mut rng).unwrap();
    assert_eq!(model.vocab.len(), 5 + 2, "carcinoma is reused");
    assert_eq!(
        model.vocab.label(1, 0).unwrap()[1],
        model.vocab.id("carcinoma").unwrap()
    );
    let after = model.store.value(head);
    assert_eq!(after.rows(), 7);
    assert_eq!(after.slice_rows(0, 5).data(), before.data());

    let dup = TaskSpec::from_words(1, &words(&[&["x"]]));
    assert!(matches!(
        register_task(&mut model, &dup, &embed, &mut rng),
        Err(Error::Contract(_))
    ));
}

fn expert_frozen(model: &Cosformer, t: usize) -> bool {
    let id = model.store.id(&format!("ec.expert.{t}")).unwrap();
    model.store.is_frozen(id)
}

#[test]
fn freezing_marks_only_past_experts() {
    let mut model = new_model(small_model());
    let mut rng = substream(0, "grow");
    for t in 0..3 {
        let spec = TaskSpec::from_words(t, &words(&[&[&format!("a{t}")], &[&format!("b{t}")]]));
        register_task(&mut model, &spec, &embed, &mut rng).unwrap();
    }
    freeze_past_experts(&mut model, 0);
    assert!((0..3).all(|t| !expert_frozen(&model, t)));
    freeze_past_experts(&mut model, 2);
    assert!(expert_frozen(&model, 0) && expert_frozen(&model, 1));
    assert!(!expert_frozen(&model, 2));
    for name in ["ec.general", "ec.router.fc1.w", "dec.head.w"] {
        assert!(!model.store.is_frozen(model.store.id(name).unwrap()), "{name}");
    }
}

fn past_params(model: &Cosformer, upto: usize) -> Vec<(String, Tensor)> {
    model
        .store
        .iter()
        .filter(|(_, p)| {
            (0..upto).any(|t| {
                p.name == format!("ec.expert.{t}") || p.name.starts_with(&format!("ec.router.fc2.{t}."))
            })
        })
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

#[test]
fn frozen_experts_survive_later_tasks_bitwise() {
    let stream = small_stream(3, 12, 4);
    let config = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let mut snapshots: Vec<Vec<(String, Tensor)>> = Vec::new();
    let mut hook = |stage: usize, m: &Cosformer, _: &RehearsalBuffer| {
        for (t, earlier) in snapshots.iter().enumerate() {
            let now = past_params(m, t + 1);
            assert_eq!(now.len(), earlier.len());
            for ((n1, v1), (n2, v2)) in now.iter().zip(earlier) {
                assert_eq!(n1, n2);
                assert_eq!(v1.data(), v2.data(), "{n1} changed at stage {stage}");
            }
        }
        snapshots.push(past_params(m, stage + 1));
        Ok(())
    };
    run_sequence(&stream, &[0, 1, 2], &small_model(), &config, Some(&mut hook)).unwrap();
    assert_eq!(snapshots.len(), 3);
}

#[test]
fn importance_score_is_order_free() {
    let mut rng = substream(3, "score");
    let bag = random_bag(&mut rng, 7, 5);
    let emb: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rows: Vec<Vec<f64>> = (0..7).rev().map(|r| bag.row(r).to_vec()).collect();
    let reversed = Tensor::from_rows(&rows).unwrap();
    assert_eq!(
        importance_score(&bag, &emb).unwrap(),
        importance_score(&reversed, &emb).unwrap()
    );
    let single = Tensor::row_vector(vec![0.5, -1.0, 2.0, 0.0, 1.0]);
    assert_eq!(importance_score(&single, &[1.0, 1.0, 1.0, 1.0, 1.0]).unwrap(), 2.5);
}

fn brute_force_score(bag: &Tensor, emb: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for r in 0..bag.rows() {
        let mut s = 0.0;
        for c in 0..bag.cols() {
            s += bag.get(r, c) * emb[c];
        }
        if s > best {
            best = s;
        }
    }
    best
}

#[test]
fn text_retrieval_matches_brute_force_argmax() {
    for trial in 0..20u64 {
        let mut rng = substream(trial, "buffer-config");
        let d = 4;
        let n = rng.random_range(6..20);
        let bags: Vec<Tensor> = (0..n)
            .map(|_| {
                let rows = rng.random_range(1..6);
                random_bag(&mut rng, rows, d)
            })
            .collect();
        let classes: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let embs: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cands: Vec<Candidate<'_>> = (0..n)
            .map(|i| Candidate {
                bag_id: 100 + i,
                class: classes[i],
                patches: &bags[i],
            })
            .collect();
        let k = 1 + (trial as usize % 3);
        let picks = text_retrieval_picks(&cands, &embs, k, &mut substream(trial, "km")).unwrap();

        // Same cluster assignment, then an exhaustive argmax per cluster.
        let mut km_rng = substream(trial, "km");
        let mut expected = Vec::new();
        for (class, emb) in embs.iter().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| classes[i] == class).collect();
            let means: Vec<Vec<f64>> = members
                .iter()
                .map(|&i| {
                    (0..d)
                        .map(|c| (0..bags[i].rows()).map(|r| bags[i].get(r, c)).sum::<f64>() / bags[i].rows() as f64)
                        .collect()
                })
                .collect();
            let assign = kmeans(&means, k, &mut km_rng).unwrap();
            let clusters: BTreeSet<usize> = assign.iter().copied().collect();
            for cl in clusters {
                let mut best: Option<(usize, f64)> = None;
                for (j, &i) in members.iter().enumerate() {
                    if assign[j] != cl {
                        continue;
                    }
                    let s = brute_force_score(&bags[i], emb);
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((i, s));
                    }
                }
                expected.push(best.unwrap());
            }
        }
        let got: BTreeSet<usize> = picks.iter().map(|p| p.0).collect();
        let want: BTreeSet<usize> = expected.iter().map(|p| p.0).collect();
        assert_eq!(got, want, "trial {trial}");
        for (i, s) in &picks {
            assert_eq!(*s, brute_force_score(&bags[*i], &embs[classes[*i]]));
        }
    }
}

#[test]
fn ties_go_to_the_lowest_bag_id() {
    let bag = Tensor::row_vector(vec![1.0, 0.0]);
    let cands: Vec<Candidate<'_>> = [7, 3, 5]
        .iter()
        .map(|&id| Candidate {
            bag_id: id,
            class: 0,
            patches: &bag,
        })
        .collect();
    let picks = text_retrieval_picks(&cands, &[vec![1.0, 0.0]], 1, &mut substream(0, "t")).unwrap();
    assert_eq!(picks, vec![(1, 1.0)]);
}

fn task_model(stream: &Stream, tasks: usize) -> Cosformer {
    let e = stream.embedder();
    let mut model = Cosformer::new(small_model(), &e, &mut substream(0, "init")).unwrap();
    let mut rng = substream(0, "grow");
    for t in 0..tasks {
        let spec = TaskSpec::from_words(t, &stream.tasks[t].label_words());
        register_task(&mut model, &spec, &e, &mut rng).unwrap();
    }
    model
}

fn candidates(stream: &Stream, task: usize) -> Vec<Candidate<'_>> {
    stream
        .bags_of(task, Split::Train)
        .map(|b| Candidate {
            bag_id: b.id,
            class: b.class,
            patches: &b.patches,
        })
        .collect()
}

fn class_embeddings(stream: &Stream, task: usize) -> Vec<Vec<f64>> {
    (0..stream.tasks[task].classes.len())
        .map(|c| stream.class_embedding(task, c).unwrap())
        .collect()
}

#[test]
fn buffer_caps_and_is_deterministic() {
    let stream = small_stream(1, 30, 2);
    let model = task_model(&stream, 1);
    let cands = candidates(&stream, 0);
    let embs = class_embeddings(&stream, 0);
    let config = TrainConfig {
        n_clusters: 15,
        ..TrainConfig::default()
    };
    let fill = || {
        let mut buf = RehearsalBuffer::new(26);
        select_representatives(&model, 0, &cands, &embs, &mut buf, &config).unwrap();
        buf
    };
    let a = fill();
    assert_eq!(a.len(), 26, "30 candidates are cut to the capacity");
    assert_eq!(a, fill());
    for e in &a.entries {
        let bag = &stream.bag(e.bag_id).unwrap().patches;
        assert_eq!(e.score, brute_force_score(bag, &embs[e.class]));
        assert_eq!(stream.bag(e.bag_id).unwrap().split, Split::Train);
    }

    let few = TrainConfig {
        n_clusters: 2,
        ..TrainConfig::default()
    };
    let mut b = RehearsalBuffer::new(26);
    select_representatives(&model, 0, &cands, &embs, &mut b, &few).unwrap();
    assert_eq!(b.len(), 4, "no deletion below the capacity");
}

#[test]
fn baseline_strategies_respect_capacity() {
    let stream = small_stream(1, 30, 2);
    let model = task_model(&stream, 1);
    let cands = candidates(&stream, 0);
    let embs = class_embeddings(&stream, 0);
    for strategy in [BufferStrategy::Reservoir, BufferStrategy::Random, BufferStrategy::None] {
        let config = TrainConfig {
            buffer: strategy,
            n_clusters: 20,
            ..TrainConfig::default()
        };
        let mut buf = RehearsalBuffer::new(26);
        select_representatives(&model, 0, &cands, &embs, &mut buf, &config).unwrap();
        let expected = match strategy {
            BufferStrategy::None => 0,
            _ => 26,
        };
        assert_eq!(buf.len(), expected, "{strategy:?}");
    }
}

#[test]
fn snapshots_cover_every_step_at_current_width() {
    let stream = small_stream(2, 4, 5);
    let model = task_model(&stream, 2);
    let config = TrainConfig::default();
    let bag = &stream.bags_of(1, Split::Train).next().unwrap().patches;
    for class in 0..2 {
        let label = model.vocab.label(1, class).unwrap().len();
        let snap = snapshot_logits(&model, bag, 1, class, &config).unwrap();
        assert_eq!(snap.rows(), label + 1);
        assert_eq!(snap.cols(), model.vocab.len());
        assert_eq!(snap, snapshot_logits(&model, bag, 1, class, &config).unwrap());
    }
}

fn reference_ce(logits: &Tensor, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / targets.len() as f64
}

fn targets(model: &Cosformer, task: usize, class: usize) -> Vec<usize> {
    let mut t = model.vocab.label(task, class).unwrap().to_vec();
    t.push(cosformer::model::EOS);
    t
}

/// Two one-word classes give a vocabulary of four and two decoding steps.
fn hand_model() -> Cosformer {
    let mut model = new_model(small_model());
    let spec = TaskSpec::from_words(0, &words(&[&["tumor"], &["normal"]]));
    register_task(&mut model, &spec, &embed, &mut substream(0, "grow")).unwrap();
    assert_eq!(model.vocab.len(), 4);
    model
}

#[test]
fn replay_loss_matches_hand_sum() {
    let model = hand_model();
    let config = TrainConfig::default();
    let mut rng = substream(9, "hand");
    let cur = random_bag(&mut rng, 5, 16);
    let old = random_bag(&mut rng, 6, 16);
    let snapshot = Tensor::new(2, 4, vec![0.3, -0.2, 1.0, 0.5, -1.0, 0.0, 0.25, 2.0]).unwrap();
    let entry = BufferEntry {
        bag_id: 1,
        task: 0,
        class: 1,
        score: 0.0,
        patches: old.clone(),
        snapshot: snapshot.clone(),
    };
    let current = [Sample {
        patches: &cur,
        task: 0,
        class: 0,
    }];
    let mut g = Graph::new();
    let loss = past_to_present_loss(&mut g, &model, &current, &[&entry], &config)
        .unwrap()
        .unwrap();

    let cond = config.conditioning(0);
    let lc = model.forced_logits(&cur, 0, 0, &cond).unwrap();
    let lo = model.forced_logits(&old, 0, 1, &cond).unwrap();
    let mut mse = 0.0;
    for r in 0..2 {
        for c in 0..4 {
            mse += (lo.get(r, c) - snapshot.get(r, c)).powi(2);
        }
    }
    let expected = reference_ce(&lc, &targets(&model, 0, 0)) + reference_ce(&lo, &targets(&model, 0, 1)) + mse / 8.0;
    assert!((g.value(loss).item() - expected).abs() < 1e-10);

    // A snapshot equal to the current logits removes the distillation term.
    let same = BufferEntry {
        snapshot: lo.clone(),
        ..entry.clone()
    };
    let mut g = Graph::new();
    let loss = past_to_present_loss(&mut g, &model, &current, &[&same], &config)
        .unwrap()
        .unwrap();
    let ce_only = reference_ce(&lc, &targets(&model, 0, 0)) + reference_ce(&lo, &targets(&model, 0, 1));
    assert!((g.value(loss).item() - ce_only).abs() < 1e-12);

    let bad = BufferEntry {
        snapshot: Tensor::zeros(3, 4),
        ..entry
    };
    let mut g = Graph::new();
    assert!(matches!(
        past_to_present_loss(&mut g, &model, &current, &[&bad], &config),
        Err(Error::Contract(_))
    ));
}

#[test]
fn empty_buffer_is_plain_cross_entropy_bitwise() {
    let stream = small_stream(1, 6, 8);
    let model = task_model(&stream, 1);
    let config = TrainConfig::default();
    let bags: Vec<_> = stream.bags_of(0, Split::Train).take(3).collect();
    let current: Vec<Sample<'_>> = bags
        .iter()
        .map(|b| Sample {
            patches: &b.patches,
            task: 0,
            class: b.class,
        })
        .collect();
    let mut g = Graph::new();
    let loss = past_to_present_loss(&mut g, &model, &current, &[], &config)
        .unwrap()
        .unwrap();
    let mut sum = 0.0;
    for s in &current {
        let logits = model.forced_logits(s.patches, 0, s.class, &config.conditioning(0)).unwrap();
        sum += reference_ce(&logits, &targets(&model, 0, s.class));
    }
    assert_eq!(g.value(loss).item(), sum * (1.0 / 3.0));

    let mut g = Graph::new();
    assert!(past_to_present_loss(&mut g, &model, &[], &[], &config).unwrap().is_none());
}

#[test]
fn empty_training_set_is_rejected() {
    let stream = small_stream(1, 4, 1);
    let mut model = task_model(&stream, 1);
    let buffer = RehearsalBuffer::new(26);
    assert!(matches!(
        train_task(&mut model, 0, &[], &[], &buffer, &TrainConfig::default()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn separable_task_reaches_high_validation_accuracy() {
    let stream = make_stream(&StreamConfig {
        tasks: 1,
        bags_per_class: 100,
        seed: 21,
        ..StreamConfig::default()
    })
    .unwrap();
    let mut model = task_model(&stream, 1);
    let config = TrainConfig::default();
    let split = |s: Split| -> Vec<Sample<'_>> {
        stream
            .bags_of(0, s)
            .map(|b| Sample {
                patches: &b.patches,
                task: 0,
                class: b.class,
            })
            .collect()
    };
    let (train, val) = (split(Split::Train), split(Split::Val));
    let history = train_task(&mut model, 0, &train, &val, &RehearsalBuffer::new(26), &config).unwrap();
    assert!(history.val_loss.len() <= 50);
    let acc = evaluate_task(&model, &val, &config).unwrap();
    assert!(acc >= 0.95, "validation accuracy {acc}");
}

#[test]
fn sequences_fill_the_lower_triangle() {
    let config = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let one = small_stream(1, 8, 3);
    let out = run_sequence(&one, &[0], &small_model(), &config, None).unwrap();
    assert_eq!(out.matrix.stages(), 1);
    assert_eq!(out.matrix.row(0).unwrap().len(), 1);

    let three = small_stream(3, 8, 3);
    let mut sizes = Vec::new();
    let mut hook = |_: usize, _: &Cosformer, b: &RehearsalBuffer| {
        sizes.push(b.len());
        Ok(())
    };
    let a = run_sequence(&three, &[2, 0, 1], &small_model(), &config, Some(&mut hook)).unwrap();
    for s in 0..3 {
        assert_eq!(a.matrix.row(s).unwrap().len(), s + 1);
        assert!(a.matrix.get(s, s + 1).is_none());
    }
    assert!(sizes.iter().all(|&n| n <= 26));
    assert_eq!(a.model.task_count(), 3);
    let b = run_sequence(&three, &[2, 0, 1], &small_model(), &config, None).unwrap();
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.buffer, b.buffer);

    assert!(run_sequence(&three, &[0, 0, 1], &small_model(), &config, None).is_err());
}

#[test]
fn class_il_sequence_runs_without_a_buffer() {
    let stream = small_stream(2, 8, 6);
    let config = TrainConfig {
        scenario: Scenario::ClassIl,
        buffer: BufferStrategy::None,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let out = run_sequence(&stream, &[0, 1], &small_model(), &config, None).unwrap();
    assert!(out.buffer.is_empty());
    assert_eq!(out.matrix.stages(), 2);
}

#[test]
fn checkpoint_round_trip() {
    let stream = small_stream(2, 8, 7);
    let config = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let out = run_sequence(&stream, &[0, 1], &small_model(), &config, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck").join("task_1.cosc");
    let meta = serde_json::json!({ "stage": 1 });
    checkpoint::save(&path, &out.model, &config, &out.buffer, meta.clone()).unwrap();
    let ck = checkpoint::load(&path).unwrap();
    assert_eq!(ck.train, config);
    assert_eq!(ck.meta, meta);
    assert_eq!(ck.buffer, out.buffer);
    assert_eq!(ck.model.vocab, out.model.vocab);
    for ((_, a), (_, b)) in ck.model.store.iter().zip(out.model.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.frozen, b.frozen);
        assert_eq!(a.value.data(), b.value.data());
    }
    let bag = &stream.bags_of(0, Split::Test).next().unwrap().patches;
    let cond = config.conditioning(0);
    assert_eq!(
        ck.model.forced_logits(bag, 0, 0, &cond).unwrap(),
        out.model.forced_logits(bag, 0, 0, &cond).unwrap()
    );

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Format { .. })));
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Format { .. })));
}
