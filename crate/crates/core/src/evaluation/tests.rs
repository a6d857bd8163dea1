use super::*;
use crate::genome::{tokenize, Origin, Strand};

fn small() -> ModelConfig {
    ModelConfig { d_model: 8, n_layers: 2, n_experts: 2, n_heads: 2, seed: 5, ..ModelConfig::default() }
}

fn window(ids: Vec<u8>, offset: usize) -> TokenSequence {
    TokenSequence { ids, origin: Origin { record: "r".into(), offset }, strand: Strand::Forward }
}

#[test]
fn next_token_distribution_is_normalized_and_repeatable() {
    let m = JanusModel::<f64>::new(small()).unwrap();
    for prefix in [vec![0], vec![0, 1, 2, 3, 2, 1]] {
        let p = predict_next(&m, &prefix).unwrap();
        assert_eq!(p.len(), m.config.vocab_size);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p, predict_next(&m, &prefix).unwrap());
    }
}

#[test]
fn next_token_reads_the_last_forward_fused_row() {
    let m = JanusModel::<f64>::new(small()).unwrap();
    let prefix = [2, 0, 3, 1, 1];
    let mask = build_mask(prefix.len()).unwrap();
    let logits = m.fused_logits(&prefix, Some(&mask)).unwrap();
    let mut want: Vec<f64> = logits.row(prefix.len() - 1).to_vec();
    softmax_in_place(&mut want, None);
    let got = predict_next(&m, &prefix).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn batched_prediction_matches_single() {
    let m = JanusModel::<f64>::new(small()).unwrap();
    let prefixes = vec![vec![0, 1, 2, 3], vec![3, 3, 1, 0], vec![2, 2, 2, 2]];
    let batch = predict_next_batch(&m, &prefixes, true).unwrap();
    for (p, b) in prefixes.iter().zip(&batch) {
        let s = predict_next(&m, p).unwrap();
        for (x, y) in s.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(predict_next_batch(&m, &[vec![0, 1], vec![0]], true).is_err());
}

#[test]
fn masked_reading_ignores_the_hidden_token() {
    let m = JanusModel::<f64>::new(small()).unwrap();
    let p = mlm_last_token_batch(&m, &[vec![0, 1, 2, 0], vec![0, 1, 2, 3]]).unwrap();
    assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (a, b) in p[0].iter().zip(&p[1]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn score_counts_argmax_hits_and_mean_ce() {
    let preds = vec![
        LastTokenPrediction { probs: vec![0.5, 0.25, 0.25], target: 0 },
        LastTokenPrediction { probs: vec![0.4, 0.4, 0.2], target: 1 },
    ];
    let (acc, ce) = score(&preds);
    assert_eq!(acc, 0.5);
    assert!((ce - (-(0.5f64.ln()) - 0.4f64.ln()) / 2.0).abs() < 1e-15);
}

#[test]
fn windows_ending_in_n_are_skipped() {
    let m = JanusModel::<f32>::new(small()).unwrap();
    let test = vec![window(vec![0, 1, 2, 3], 0), window(vec![0, 1, 2, N], 4)];
    let r = eval_last_token(&m, Objective::Janus, &test, "m", "t").unwrap();
    assert_eq!(r.n, 1);
    assert!((r.perplexity - r.ce.exp()).abs() < 1e-12);
    assert!(eval_last_token(&m, Objective::Janus, &test[1..], "m", "t").is_err());
}

#[test]
fn untrained_model_is_near_chance_on_markov_windows() {
    let data = DataConfig { records: 1, test_records: 8, record_len: 512, ..DataConfig::default() };
    let corpus = data.load(32).unwrap();
    let m = JanusModel::<f32>::new(ModelConfig { d_model: 16, n_layers: 2, ..ModelConfig::default() }).unwrap();
    let r = eval_last_token(&m, Objective::Janus, &corpus.test, "init", "markov3").unwrap();
    assert_eq!(r.n, 128);
    assert!(r.accuracy > 0.1 && r.accuracy < 0.5, "{r}");
    assert!(r.ce > 1.0, "{r}");
}

#[test]
fn repeated_sequence_is_learned_exactly() {
    let ids = tokenize("ACGTACGTACGTACGT", &crate::genome::Vocabulary::canonical()).unwrap().ids;
    let windows: Vec<TokenSequence> = (0..4).map(|i| window(ids.clone(), 16 * i)).collect();
    let model = ModelConfig { d_model: 16, n_layers: 2, n_experts: 2, n_heads: 2, ..ModelConfig::default() };
    let train = TrainConfig { steps: 150, batch_size: 2, seq_len: 16, peak_lr: 1e-2, ..TrainConfig::default() };
    let mut t = Trainer::new(model, train, DataConfig::default(), windows.clone()).unwrap();
    t.run(150, |_| Ok(()), None).unwrap();
    let r = eval_last_token(&t.model, Objective::Janus, &windows, "janus", "acgt").unwrap();
    assert_eq!(r.accuracy, 1.0, "{r}");
    assert!(r.ce < 0.1, "{r}");
}

#[test]
fn comparison_rejects_configs_differing_beyond_objective() {
    let data = DataConfig { records: 1, test_records: 1, record_len: 64, ..DataConfig::default() };
    let corpus = data.load(16).unwrap();
    let j = TrainConfig { steps: 2, batch_size: 1, seq_len: 16, ..TrainConfig::default() };
    let m = TrainConfig { objective: Objective::Mlm, seed: 9, ..j.clone() };
    assert!(matches!(compare_paradigms(&small(), &j, &m, &data, &corpus, 1), Err(Error::Config(_))));
    assert!(matches!(compare_paradigms(&small(), &j, &j, &data, &corpus, 1), Err(Error::Config(_))));
}

#[test]
fn comparison_records_every_evaluation_point() {
    let data = DataConfig { records: 1, test_records: 1, record_len: 64, ..DataConfig::default() };
    let corpus = data.load(16).unwrap();
    let j = TrainConfig { steps: 4, batch_size: 1, seq_len: 16, ..TrainConfig::default() };
    let m = TrainConfig { objective: Objective::Mlm, ..j.clone() };
    let c = compare_paradigms(&small(), &j, &m, &data, &corpus, 2).unwrap();
    let steps: Vec<usize> = c.curves.points.iter().map(|p| p.step).collect();
    assert_eq!(steps, [0, 2, 4]);
    assert_eq!(c.janus.step, 4);
    assert_eq!(c.mlm.step, 4);
    let csv = c.curves.to_csv();
    assert!(csv.starts_with(Curves::HEADER));
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(c.janus_report.accuracy, c.curves.last().unwrap().janus_accuracy);
}

#[test]
fn determined_ce_covers_only_determined_targets() {
    let data = DataConfig {
        corpus: "bidir_motif".into(),
        records: 1,
        test_records: 1,
        record_len: 64,
        ..DataConfig::default()
    };
    let corpus = data.load(16).unwrap();
    let m = JanusModel::<f32>::new(small()).unwrap();
    let both = determined_position_ce(&m, &corpus.test, 64, true).unwrap();
    let left = determined_position_ce(&m, &corpus.test, 64, false).unwrap();
    assert!(both.is_finite() && left.is_finite());
    assert!(both != left);
}

#[test]
fn reported_scores_match_a_brute_force_replay() {
    let data = DataConfig { records: 1, test_records: 4, record_len: 400, ..DataConfig::default() };
    let test: Vec<TokenSequence> = data.load(12).unwrap().test.into_iter().take(100).collect();
    assert_eq!(test.len(), 100);
    let m = JanusModel::<f64>::new(small()).unwrap();
    let r = eval_last_token(&m, Objective::Janus, &test, "m", "replay").unwrap();
    let (mut hits, mut ce, mut n) = (0usize, 0.0, 0usize);
    for w in &test {
        let ids = w.indices();
        let target = ids[ids.len() - 1];
        if target >= N as usize {
            continue;
        }
        let prefix = &ids[..ids.len() - 1];
        let logits = m.fused_logits(prefix, Some(&build_mask(prefix.len()).unwrap())).unwrap();
        let row = logits.row(prefix.len() - 1);
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - top).exp()).sum();
        let mut best = 0;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        hits += usize::from(best == target);
        ce += -(row[target] - top - z.ln());
        n += 1;
    }
    assert_eq!(r.n, n);
    assert_eq!(r.accuracy, hits as f64 / n as f64);
    assert!((r.ce - ce / n as f64).abs() < 1e-9, "{} vs {}", r.ce, ce / n as f64);
}

#[test]
fn janus_training_never_consults_the_mask_token() {
    let data = DataConfig { records: 2, test_records: 1, record_len: 256, ..DataConfig::default() };
    let windows = data.load(16).unwrap().train;
    let train = TrainConfig { steps: 4, batch_size: 4, seq_len: 16, ..TrainConfig::default() };
    let mut t = Trainer::new(small(), train, data, windows).unwrap();
    let mask_id = MASK as usize;
    for _ in 0..20 {
        let batch = t.next_batch().unwrap();
        assert!(!batch.ids.contains(&mask_id));
        let mut tape = crate::numerics::Tape::new();
        let p = t.model.bind(&mut tape, true);
        let out = t.loss(&mut tape, &p, &batch).unwrap();
        tape.backward(out.total).unwrap();
        for stack in ["fwd", "bwd"] {
            let id = t.model.store.by_name(&format!("{stack}.embed")).unwrap();
            let g = tape.grad(p[id.0]).unwrap();
            let d = t.model.config.d_model;
            assert!(g[mask_id * d..(mask_id + 1) * d].iter().all(|&x| x == 0.0), "{stack}");
        }
    }
}
