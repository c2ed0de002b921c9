use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::CilmpError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut t = Tape::new();
    let i = t.constant(Tensor::identity(2));
    let m = t.constant(Tensor::from_rows(&[&[1.5, -2.0], &[0.25, 7.0]]).unwrap());
    let p = t.matmul(i, m).unwrap();
    assert_eq!(t.value(p), t.value(m));

    let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let b = t.constant(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);

    let z = t.constant(Tensor::zeros(&[3, 2]));
    let zm = t.matmul(z, m).unwrap();
    assert!(t.value(zm).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(CilmpError::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn hadamard_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let h = t.hadamard(a, b).unwrap();
    assert_eq!(t.value(h).data(), &[3.0, 8.0]);
    let ones = t.constant(Tensor::ones(&[2]));
    let zeros = t.constant(Tensor::zeros(&[2]));
    let x1 = t.hadamard(a, ones).unwrap();
    let x0 = t.hadamard(a, zeros).unwrap();
    assert_eq!(t.value(x1).data(), &[1.0, 2.0]);
    assert_eq!(t.value(x0).data(), &[0.0, 0.0]);
    let c = t.constant(Tensor::zeros(&[3]));
    assert!(matches!(t.hadamard(a, c), Err(CilmpError::Dimension { .. })));
}

#[test]
fn l2_normalize_examples() {
    let mut t = Tape::new();
    let v = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let n = t.l2_normalize(v).unwrap();
    assert_eq!(t.value(n).data(), &[0.6, 0.8]);
    let u = t.constant(Tensor::vector(vec![0.0, 1.0]));
    let nu = t.l2_normalize(u).unwrap();
    assert_eq!(t.value(nu).data(), &[0.0, 1.0]);
    let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
    assert!(matches!(t.l2_normalize(z), Err(CilmpError::Degenerate(_))));
}

/// Direct evaluation of `-log softmax(row)[y]` without max subtraction.
fn naive_ce(row: &[f64], y: usize) -> f64 {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    -(row[y].exp() / z).ln()
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut t = Tape::new();
    let eq = t.constant(Tensor::from_rows(&[&[0.3, 0.3]]).unwrap());
    let l = t.softmax_cross_entropy(eq, &[1]).unwrap();
    assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

    let sat = t.constant(Tensor::from_rows(&[&[20.0, -20.0]]).unwrap());
    let l = t.softmax_cross_entropy(sat, &[0]).unwrap();
    let v = t.value(l).item();
    assert!(v.is_finite() && (0.0..1e-16).contains(&v));

    let logits = [1.0, 2.0, 3.0];
    let oracle = naive_ce(&logits, 2);
    assert!((oracle - 0.407_605_96).abs() < 1e-8);
    let x = t.constant(Tensor::from_rows(&[&logits]).unwrap());
    let l = t.softmax_cross_entropy(x, &[2]).unwrap();
    assert!((t.value(l).item() - oracle).abs() < 1e-14);

    assert!(matches!(
        t.softmax_cross_entropy(x, &[3]),
        Err(CilmpError::Label { label: 3, classes: 3 })
    ));
}

#[test]
fn gradient_check_polynomial() {
    let err = gradient_check(
        |t, p| t.hadamard(p[0], p[0]),
        &[Tensor::scalar(3.0)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn gradient_check_rejects_bad_step() {
    assert!(gradient_check(|t, p| t.sum(p[0]), &[Tensor::scalar(1.0)], 1e-2).is_err());
}

#[test]
fn gradient_check_cross_entropy_random_logits() {
    for seed in 0..5 {
        let logits = Tensor::randn(&[4, 3], 1.0, &mut rng(seed));
        let err = gradient_check(
            |t, p| t.softmax_cross_entropy(p[0], &[0, 2, 1, 2]),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

type Objective = fn(&mut Tape, &[Var]) -> crate::error::Result<Var>;

/// Each case reduces a differentiable op to a scalar through a fixed random
/// weighting so that every output coordinate contributes.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Objective)> {
    fn weigh(t: &mut Tape, y: Var) -> crate::error::Result<Var> {
        let shape = t.shape(y).to_vec();
        let w: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0)
            .collect();
        let w = t.constant(Tensor::new(shape, w)?);
        let p = t.hadamard(y, w)?;
        t.sum(p)
    }
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, p| {
            let y = t.add(p[0], p[1])?;
            weigh(t, y)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, p| {
            let y = t.sub(p[0], p[1])?;
            weigh(t, y)
        }),
        ("hadamard", vec![vec![3, 4], vec![3, 4]], |t, p| {
            let y = t.hadamard(p[0], p[1])?;
            weigh(t, y)
        }),
        ("scale", vec![vec![2, 5]], |t, p| {
            let y = t.scale(p[0], -1.7)?;
            weigh(t, y)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |t, p| {
            let y = t.add_row(p[0], p[1])?;
            weigh(t, y)
        }),
        ("scale_by", vec![vec![2, 5], vec![1]], |t, p| {
            let y = t.scale_by(p[0], p[1])?;
            weigh(t, y)
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, p| {
            let y = t.matmul(p[0], p[1])?;
            weigh(t, y)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |t, p| {
            let y = t.matmul_nt(p[0], p[1])?;
            weigh(t, y)
        }),
        ("transpose", vec![vec![3, 4]], |t, p| {
            let y = t.transpose(p[0])?;
            weigh(t, y)
        }),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], |t, p| {
            let y = t.concat(&[p[0], p[1]], 0)?;
            weigh(t, y)
        }),
        ("concat_cols", vec![vec![2, 3], vec![2, 2]], |t, p| {
            let y = t.concat(&[p[0], p[1], p[0]], 1)?;
            weigh(t, y)
        }),
        ("slice", vec![vec![5, 3]], |t, p| {
            let y = t.slice(p[0], 0, 1, 3)?;
            let z = t.slice(y, 1, 1, 2)?;
            weigh(t, z)
        }),
        ("mean", vec![vec![3, 3]], |t, p| {
            let y = t.hadamard(p[0], p[0])?;
            t.mean(y)
        }),
        ("exp_log", vec![vec![2, 3]], |t, p| {
            let e = t.exp(p[0])?;
            let y = t.log(e)?;
            let z = t.exp(y)?;
            weigh(t, z)
        }),
        ("gelu", vec![vec![3, 4]], |t, p| {
            let y = t.gelu(p[0])?;
            weigh(t, y)
        }),
        ("l2_normalize", vec![vec![3, 4]], |t, p| {
            let y = t.l2_normalize(p[0])?;
            weigh(t, y)
        }),
        ("softmax_rows", vec![vec![3, 4]], |t, p| {
            let y = t.softmax_rows(p[0], Mask::None)?;
            weigh(t, y)
        }),
        ("softmax_rows_causal", vec![vec![4, 4]], |t, p| {
            let y = t.softmax_rows(p[0], Mask::Causal { offset: 0 })?;
            weigh(t, y)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, p| {
            let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
            weigh(t, y)
        }),
        ("gather_rows", vec![vec![4, 3]], |t, p| {
            let y = t.gather_rows(p[0], &[2, 0, 2])?;
            weigh(t, y)
        }),
        ("segment_attention", vec![vec![6, 2], vec![6, 2], vec![6, 2]], |t, p| {
            let y = t.segment_attention(p[0], p[1], p[2], 3, false, 0.7)?;
            weigh(t, y)
        }),
        ("segment_attention_causal", vec![vec![8, 3], vec![8, 3], vec![8, 3]], |t, p| {
            let y = t.segment_attention(p[0], p[1], p[2], 4, true, 0.5)?;
            weigh(t, y)
        }),
        ("cross_entropy", vec![vec![3, 4]], |t, p| {
            t.softmax_cross_entropy(p[0], &[3, 0, 1])
        }),
    ]
}

#[test]
fn every_op_matches_central_differences_over_twenty_seeds() {
    for (name, shapes, f) in op_cases() {
        for seed in 0..20 {
            let mut r = rng(1000 + seed);
            let params: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
            let err = gradient_check(f, &params, 1e-5).unwrap();
            assert!(err <= 1e-5, "{name} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn transpose_of_product_identity() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let mut t = Tape::new();
        let a = t.constant(Tensor::randn(&[3, 5], 1.0, &mut r));
        let b = t.constant(Tensor::randn(&[5, 4], 1.0, &mut r));
        let ab = t.matmul(a, b).unwrap();
        let abt = t.transpose(ab).unwrap();
        let at = t.transpose(a).unwrap();
        let bt = t.transpose(b).unwrap();
        let btat = t.matmul(bt, at).unwrap();
        assert!(t.value(abt).max_abs_diff(t.value(btat)) <= 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(3);
    let mut t = Tape::new();
    let x = t.constant(Tensor::randn(&[6, 7], 10.0, &mut r));
    for mask in [Mask::None, Mask::Causal { offset: 0 }, Mask::Causal { offset: 2 }] {
        let y = t.softmax_rows(x, mask).unwrap();
        for i in 0..6 {
            let s: f64 = t.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
    let y = t.softmax_rows(x, Mask::Causal { offset: 0 }).unwrap();
    assert_eq!(t.value(y).get(0, 1), 0.0);
    assert_eq!(t.value(y).get(2, 3), 0.0);
}

#[test]
fn shared_subexpressions_accumulate_like_duplicated_nodes() {
    let mut r = rng(9);
    let x0 = Tensor::randn(&[2, 3], 1.0, &mut r);
    let w0 = Tensor::randn(&[3, 3], 1.0, &mut r);

    // Shared: s = x·w feeds two branches.
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let w = t.param(w0.clone());
    let s = t.matmul(x, w).unwrap();
    let a = t.gelu(s).unwrap();
    let b = t.hadamard(s, s).unwrap();
    let y = t.add(a, b).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();

    // Unrolled: the product is recomputed for each use.
    let mut u = Tape::new();
    let ux = u.param(x0);
    let uw = u.param(w0);
    let s1 = u.matmul(ux, uw).unwrap();
    let s2 = u.matmul(ux, uw).unwrap();
    let s3 = u.matmul(ux, uw).unwrap();
    let a = u.gelu(s1).unwrap();
    let b = u.hadamard(s2, s3).unwrap();
    let y = u.add(a, b).unwrap();
    let l = u.sum(y).unwrap();
    let gu = u.backward(l).unwrap();

    assert!(g.get(x).unwrap().max_abs_diff(gu.get(ux).unwrap()) < 1e-12);
    assert!(g.get(w).unwrap().max_abs_diff(gu.get(uw).unwrap()) < 1e-12);
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let p = t.param(Tensor::vector(vec![0.5, 0.5]));
    let y = t.hadamard(c, p).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn exp_overflow_is_an_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::scalar(1000.0));
    assert!(matches!(t.exp(x), Err(CilmpError::Numerical(_))));
}

#[test]
fn segment_attention_matches_per_block_composition() {
    let mut r = rng(77);
    let (seg, d) = (3, 4);
    let q = Tensor::randn(&[2 * seg, d], 1.0, &mut r);
    let k = Tensor::randn(&[2 * seg, d], 1.0, &mut r);
    let v = Tensor::randn(&[2 * seg, d], 1.0, &mut r);
    for causal in [false, true] {
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let fused = t.segment_attention(qv, kv, vv, seg, causal, 0.5).unwrap();
        for s in 0..2 {
            let qs = t.rows(qv, s * seg, seg).unwrap();
            let ks = t.rows(kv, s * seg, seg).unwrap();
            let vs = t.rows(vv, s * seg, seg).unwrap();
            let sc = t.matmul_nt(qs, ks).unwrap();
            let sc = t.scale(sc, 0.5).unwrap();
            let mask = if causal { Mask::Causal { offset: 0 } } else { Mask::None };
            let p = t.softmax_rows(sc, mask).unwrap();
            let o = t.matmul(p, vs).unwrap();
            let f = t.rows(fused, s * seg, seg).unwrap();
            assert!(t.value(o).max_abs_diff(t.value(f)) < 1e-14);
        }
    }
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[5, 2]));
    assert!(matches!(t.segment_attention(a, a, a, 2, false, 1.0), Err(CilmpError::Dimension { .. })));
}
