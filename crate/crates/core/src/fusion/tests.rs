use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{JanusModel, ModelConfig};
use crate::numerics::{AttentionSpec, Tape, ValueGrid};

fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ValueGrid<f64> {
    ValueGrid::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn masked_attention(q: &ValueGrid<f64>, k: &ValueGrid<f64>, v: &ValueGrid<f64>, mask: &FusionMask) -> ValueGrid<f64> {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let spec = AttentionSpec { heads: 2, seq_len: mask.size(), mask: Some(mask.shared()), bias: None, relative: None };
    let a = tape.attention(q, k, v, spec).unwrap();
    tape.value(a).clone()
}

#[test]
fn mask_matches_oracle_up_to_64() {
    for t in 2..=64 {
        let mask = build_mask(t).unwrap();
        let inf = influence_oracle(&mask);
        for inst in target_map(t).unwrap().instances {
            let want: BTreeSet<usize> = (0..t).filter(|&p| p != inst.target).collect();
            assert_eq!(inf[inst.row], want, "T={t} row={}", inst.row);
        }
    }
}

#[test]
fn inadmissible_values_are_invisible() {
    let t = 5;
    let mask = build_mask(t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (q, k, v) = (random_grid(&mut rng, 2 * t, 4), random_grid(&mut rng, 2 * t, 4), random_grid(&mut rng, 2 * t, 4));
    let base = masked_attention(&q, &k, &v, &mask);
    for row in 0..2 * t {
        let mut vz = v.clone();
        for kv in (0..2 * t).filter(|&kv| !mask.get(row, kv)) {
            vz.data_mut()[kv * 4..kv * 4 + 4].iter_mut().for_each(|x| *x = 0.0);
        }
        assert_eq!(masked_attention(&q, &k, &vz, &mask).row(row), base.row(row));
    }
}

#[test]
fn single_key_row_copies_value() {
    let mask = build_mask(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, k, v) = (random_grid(&mut rng, 4, 4), random_grid(&mut rng, 4, 4), random_grid(&mut rng, 4, 4));
    assert_eq!(masked_attention(&q, &k, &v, &mask).row(0), v.row(0));
}

fn tiny() -> ModelConfig {
    ModelConfig { d_model: 8, n_layers: 2, n_experts: 2, ffn_mult: 2, n_heads: 2, seed: 5, ..ModelConfig::default() }
}

#[test]
fn no_leakage_small() {
    let r = leakage_check::<f64>(&tiny(), 6, 1e-10).unwrap();
    assert!(r.passed(), "{r:?}");
    assert_eq!(r.max_diff, 0.0);
    assert_eq!(r.checks, (2 * 6 - 2) * 6);
}

#[test]
fn unit_gap_leaks() {
    let model = JanusModel::<f64>::new(tiny()).unwrap();
    let ids = vec![0, 1, 2, 3, 0, 1];
    let r = leakage_check_with_mask(&model, &ids, &FusionMask::with_gap(6, 1).unwrap(), 1e-10).unwrap();
    assert!(!r.passed());
    assert!(r.max_diff > 1e-3);
}

#[test]
fn other_positions_do_matter() {
    let model = JanusModel::<f64>::new(tiny()).unwrap();
    let mask = build_mask(6).unwrap();
    let ids = vec![0, 1, 2, 3, 0, 1];
    let base = model.fused_logits(&ids, Some(&mask)).unwrap();
    for inst in target_map(6).unwrap().instances {
        for k in (0..6).filter(|&k| k != inst.target) {
            let mut c = ids.clone();
            c[k] = (c[k] + 1) % 4;
            let moved = model.fused_logits(&c, Some(&mask)).unwrap();
            assert_ne!(base.row(inst.row), moved.row(inst.row), "row {} pos {k}", inst.row);
        }
    }
}
