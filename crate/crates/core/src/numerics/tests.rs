use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn grid(shape: &[usize], data: &[f64]) -> ValueGrid<f64> {
    ValueGrid::from_f64(shape, data).unwrap()
}

fn random_grid(rng: &mut ChaCha8Rng, shape: &[usize]) -> ValueGrid<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    grid(shape, &data)
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(grid(&[1, 2], &[0.0, 0.0]));
    let y = t.softmax_rows(x, None).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);

    let x = t.constant(grid(&[1, 2], &[1f64.ln(), 3f64.ln()]));
    let y = t.softmax_rows(x, None).unwrap();
    assert!((t.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((t.value(y).data()[1] - 0.75).abs() < 1e-15);

    let x = t.constant(grid(&[1, 3], &[5.0, 9.0, 2.0]));
    let y = t.softmax_rows(x, Some(&[true, false, true])).unwrap();
    let z = 5f64.exp() + 2f64.exp();
    let out = t.value(y).data();
    assert!((out[0] - 5f64.exp() / z).abs() < 1e-15);
    assert_eq!(out[1], 0.0);
    assert!((out[2] - 2f64.exp() / z).abs() < 1e-15);
}

#[test]
fn softmax_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(grid(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let err = t.softmax_rows(x, Some(&[true, false, false, false])).unwrap_err();
    assert!(matches!(err, Error::EmptyAttentionRow { row: 1 }));

    let x = t.constant(grid(&[1, 2], &[f64::NAN, 0.0]));
    assert!(matches!(t.softmax_rows(x, None), Err(Error::NonFinite { .. })));
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(grid(&[1, 5], &[0.3; 5]));
    let l = t.cross_entropy_mean(x, &[3], None).unwrap();
    assert!((t.value(l).item() - 5f64.ln()).abs() < 1e-12);

    let x = t.constant(grid(&[1, 4], &[30.0, 0.0, 0.0, 0.0]));
    let l = t.cross_entropy_mean(x, &[0], None).unwrap();
    assert!(t.value(l).item().abs() < 1e-9);

    // Row 0: p(target) = 1/2, row 1: p(target) = 1/8.
    let x = t.constant(grid(&[2, 2], &[0.0, 0.0, 0.0, 7f64.ln()]));
    let l = t.cross_entropy_mean(x, &[0, 0], Some(&[true, true])).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(grid(&[2, 3], &[0.0; 6]));
    assert!(matches!(t.cross_entropy_mean(x, &[0, 1], Some(&[false, false])), Err(Error::NoInstances)));
    assert!(matches!(t.cross_entropy_mean(x, &[0, 3], None), Err(Error::TargetOutOfRange { target: 3, classes: 3 })));
    // Excluded rows are not range-checked.
    assert!(t.cross_entropy_mean(x, &[0, 9], Some(&[true, false])).is_ok());
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(grid(&[3], &[0.1, -2.0, 7.0]).with_grad());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::<f64>::new();
    let x = t.leaf(grid(&[2], &[2.0, -1.0]).with_grad());
    let sq = t.mul(x, x);
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0, -2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(grid(&[2], &[1.0, 2.0]).with_grad());
    let y = t.scale(x, 2.0);
    assert!(matches!(t.backward(y), Err(Error::NotScalar(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(grid(&[1], &[1000.0]).with_grad());
    let y = t.exp(x);
    let s = t.sum(y);
    assert!(matches!(t.check(), Err(Error::NonFinite { op: "exp" })));
    assert!(t.backward(s).is_err());
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_grid(&mut rng, &[5, 4]);
    let targets = [0usize, 2, 1, 3, 2];
    let mut params = vec![random_grid(&mut rng, &[4, 4]), random_grid(&mut rng, &[4]), random_grid(&mut rng, &[4, 4])];
    let report = grad_check(
        &mut params,
        |t, p| {
            let xv = t.constant(x.clone());
            let h = t.matmul(xv, p[0]);
            let h = t.add_row(h, p[1]);
            let h = t.silu(h);
            let logits = t.matmul(h, p[2]);
            t.cross_entropy_mean(logits, &targets, None)
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
}

/// Builds a scalar from the primitive under test by contracting its output
/// with fixed random weights, so every output coordinate matters.
fn contract(t: &mut Tape<f64>, y: Var, rng_seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = t.value(y).shape().to_vec();
    let w = random_grid(&mut rng, &shape);
    let w = t.constant(w);
    let p = t.mul(y, w);
    t.sum(p)
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var], &mut ChaCha8Rng) -> Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, p, _| t.matmul(p[0], p[1]))),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], Box::new(|t, p, _| t.matmul_nt(p[0], p[1]))),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, p, _| t.add(p[0], p[1]))),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, p, _| t.sub(p[0], p[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, p, _| t.mul(p[0], p[1]))),
        ("add_row", vec![vec![3, 2], vec![2]], Box::new(|t, p, _| t.add_row(p[0], p[1]))),
        ("mul_rows", vec![vec![3, 2], vec![3, 1]], Box::new(|t, p, _| t.mul_rows(p[0], p[1]))),
        ("scale", vec![vec![2, 2]], Box::new(|t, p, _| t.scale(p[0], -1.7))),
        ("sigmoid", vec![vec![2, 3]], Box::new(|t, p, _| t.sigmoid(p[0]))),
        ("silu", vec![vec![2, 3]], Box::new(|t, p, _| t.silu(p[0]))),
        ("exp", vec![vec![2, 3]], Box::new(|t, p, _| t.exp(p[0]))),
        ("sum_axis0", vec![vec![3, 2]], Box::new(|t, p, _| t.sum_axis(p[0], 0))),
        ("sum_axis1", vec![vec![3, 2]], Box::new(|t, p, _| t.sum_axis(p[0], 1))),
        ("mean_axis0", vec![vec![3, 2]], Box::new(|t, p, _| t.mean_axis(p[0], 0))),
        ("mean_axis1", vec![vec![3, 2]], Box::new(|t, p, _| t.mean_axis(p[0], 1))),
        ("gather", vec![vec![4, 3]], Box::new(|t, p, _| t.gather(p[0], &[2, 0, 2, 3]))),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], Box::new(|t, p, _| t.concat_rows(&[p[0], p[1], p[0]]))),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], Box::new(|t, p, _| t.concat_cols(&[p[1], p[0]]))),
        ("select_rows", vec![vec![4, 2]], Box::new(|t, p, _| t.select_rows(p[0], &[3, 1, 1, 0]))),
        ("slice_cols", vec![vec![3, 5]], Box::new(|t, p, _| t.slice_cols(p[0], 1, 3))),
        ("pick", vec![vec![3, 4]], Box::new(|t, p, _| t.pick(p[0], &[0, 3, 1]))),
        ("rms_norm", vec![vec![3, 4], vec![4]], Box::new(|t, p, _| t.rms_norm(p[0], p[1]))),
        ("transpose", vec![vec![2, 3]], Box::new(|t, p, _| t.transpose(p[0]))),
        ("reshape", vec![vec![2, 3]], Box::new(|t, p, _| t.reshape(p[0], &[3, 2]))),
        (
            "softmax_rows",
            vec![vec![3, 4]],
            Box::new(|t, p, rng| {
                let mut mask: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.6)).collect();
                for r in 0..3 {
                    mask[r * 4 + r] = true;
                }
                t.softmax_rows(p[0], Some(&mask)).unwrap()
            }),
        ),
        (
            "cross_entropy_mean",
            vec![vec![4, 5]],
            Box::new(|t, p, rng| {
                let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
                t.cross_entropy_mean(p[0], &targets, Some(&[true, false, true, true])).unwrap()
            }),
        ),
        (
            "linear_scan",
            vec![vec![6, 3], vec![6, 3]],
            Box::new(|t, p, _| {
                let alpha = t.sigmoid(p[0]);
                t.linear_scan(alpha, p[1], 3)
            }),
        ),
        (
            "attention",
            vec![vec![8, 4], vec![8, 4], vec![8, 4], vec![2, 3]],
            Box::new(|t, p, rng| {
                let l = 4;
                let mut mask: Vec<bool> = (0..l * l).map(|_| rng.gen_bool(0.5)).collect();
                for i in 0..l {
                    mask[i * l + i] = true;
                }
                let bias: Vec<f64> = (0..2 * l * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let spec = AttentionSpec {
                    heads: 2,
                    seq_len: l,
                    mask: Some(Rc::from(mask)),
                    bias: Some(Rc::from(bias)),
                    relative: Some(RelativeBias {
                        table: p[3],
                        bucket: (0..l * l).map(|_| rng.gen_range(0..3)).collect(),
                    }),
                };
                t.attention(p[0], p[1], p[2], spec).unwrap()
            }),
        ),
    ]
}

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, shapes, build) in primitive_cases() {
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let mut params: Vec<ValueGrid<f64>> = shapes.iter().map(|s| random_grid(&mut rng, s)).collect();
            let structure_seed = rng.gen::<u64>();
            let report = grad_check(
                &mut params,
                |t, p| {
                    let mut srng = ChaCha8Rng::seed_from_u64(structure_seed);
                    let y = build(t, p, &mut srng);
                    Ok(contract(t, y, structure_seed ^ 0x5eed))
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error() < 1e-4, "{name} trial {trial}: {:?}", report.worst());
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::<f32>::new();
        let a = t.constant(random_grid(&mut rng, &[6, 8]).cast());
        let b = t.constant(random_grid(&mut rng, &[8, 8]).cast());
        let c = t.matmul(a, b);
        let spec = AttentionSpec { heads: 2, seq_len: 3, mask: None, bias: None, relative: None };
        let d = t.attention(c, c, a, spec).unwrap();
        t.value(d).data().to_vec()
    };
    let (x, y) = (run(), run());
    assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        values in prop::collection::vec(-20.0f64..20.0, 12),
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut mask = mask;
        for r in 0..3 {
            mask[r * 4 + (r % 4)] = true;
        }
        let mut t = Tape::<f64>::new();
        let x = t.constant(grid(&[3, 4], &values));
        let y = t.softmax_rows(x, Some(&mask)).unwrap();
        let out = t.value(y);
        for r in 0..3 {
            let row = out.row(r);
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            for c in 0..4 {
                prop_assert!(row[c] >= 0.0);
                if !mask[r * 4 + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }
}
