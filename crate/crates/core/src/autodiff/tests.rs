use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn positive_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap()
}

#[test]
fn tanh_of_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0]));
    let y = t.tanh(x);
    assert_eq!(t.value(y).values(), &[0.0]);
}

#[test]
fn add_vectors() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).values(), &[4.0, 6.0]);
}

#[test]
fn square_gradient_matches_central_difference() {
    let h = 1e-5;
    let f = |x: f64| x * x;
    let numeric = (f(3.0 + h) - f(3.0 - h)) / (2.0 * h);

    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![3.0]));
    let y = t.mul(x, x).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap()[0];
    assert!((g - numeric).abs() < 1e-8, "{g} vs {numeric}");
    assert_eq!(g, 6.0);
}

#[test]
fn matmul_identity_and_concat() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::identity(2));
    let x = t.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
    let y = t.matmul(i2, x).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 1]);
    assert_eq!(t.value(y).values(), &[1.0, 2.0]);

    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0]));
    let c = t.concat(&[a, b], 0).unwrap();
    assert_eq!(t.value(c).values(), &[1.0, 2.0, 3.0]);
    assert_eq!(t.value(c).shape(), &[3]);
}

#[test]
fn matmul_vector_gradient_is_transpose_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, 3, 4);
    let x = rand_tensor(&mut rng, 4, 1);
    let w = rand_tensor(&mut rng, 3, 1);

    // analytic: d(w . Ax)/dx = A^T w
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let xv = t.param(x.clone());
    let wv = t.constant(w.clone());
    let y = t.matmul(av, xv).unwrap();
    let p = t.mul(y, wv).unwrap();
    let s = t.sum(p);
    t.backward(s).unwrap();
    let g = t.grad(xv).unwrap().to_vec();

    let f = |xs: &[f64]| -> f64 { (0..3).map(|i| w.values()[i] * (0..4).map(|k| a.at(i, k) * xs[k]).sum::<f64>()).sum() };
    let h = 1e-5;
    for k in 0..4 {
        let mut up = x.values().to_vec();
        let mut dn = x.values().to_vec();
        up[k] += h;
        dn[k] -= h;
        let numeric = (f(&up) - f(&dn)) / (2.0 * h);
        assert!(relative_error(g[k], numeric) < 1e-8);
        let at_w: f64 = (0..3).map(|i| a.at(i, k) * w.values()[i]).sum();
        assert!((g[k] - at_w).abs() < 1e-14);
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let s = t.softmax(z, 0).unwrap();
    assert_eq!(t.value(s).values(), &[0.5, 0.5]);

    let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = t.softmax(x, 0).unwrap();
    let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
    for (i, v) in t.value(s).values().iter().enumerate() {
        let direct = ((i + 1) as f64).exp() / denom;
        assert!((v - direct).abs() < 1e-15);
    }

    let shifted = t.constant(Tensor::vector(vec![1.0 + 7.5, 2.0 + 7.5, 3.0 + 7.5]));
    let s2 = t.softmax(shifted, 0).unwrap();
    for (a, b) in t.value(s).values().iter().zip(t.value(s2).values()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_axes_on_matrix() {
    let mut t = Tape::new();
    let m = t.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 3.0]]).unwrap());
    let cols = t.softmax(m, 0).unwrap();
    let v = t.value(cols);
    assert!((v.at(0, 0) - 0.5).abs() < 1e-15);
    assert!((v.at(0, 1) + v.at(1, 1) - 1.0).abs() < 1e-15);
    let rows = t.softmax(m, 1).unwrap();
    let v = t.value(rows);
    assert!((v.at(0, 0) + v.at(0, 1) - 1.0).abs() < 1e-15);
    assert!(t.softmax(m, 2).is_err());
}

#[test]
fn log_softmax_matches_log_of_softmax() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-3.0, 0.5, 40.0, 2.0]));
    let ls = t.log_softmax(x, 0).unwrap();
    let s = t.softmax(x, 0).unwrap();
    for (a, b) in t.value(ls).values().iter().zip(t.value(s).values()) {
        if *b > 1e-300 {
            assert!((a - b.ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_lookup_examples() {
    let mut t = Tape::new();
    let table = t.param(Tensor::identity(3));
    let e = t.embedding(table, &[0]).unwrap();
    assert_eq!(t.value(e).values(), &[1.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tab = rand_tensor(&mut rng, 2, 4);
    let tv = t.constant(tab);
    let twice = t.embedding(tv, &[2, 2]).unwrap();
    let v = t.value(twice);
    assert_eq!(v.column_values(0), v.column_values(1));

    assert!(matches!(t.embedding(tv, &[4]), Err(Error::Index(_))));
}

#[test]
fn embedding_backward_scatters_into_looked_up_column() {
    let mut t = Tape::new();
    let table = t.param(Tensor::zeros(&[3, 4]));
    let e = t.embedding(table, &[1]).unwrap();
    let s = t.sum(e);
    t.backward(s).unwrap();
    let g = t.grad(table).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            assert_eq!(g[i * 4 + j], if j == 1 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn backward_of_constant_and_sum() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let c = t.constant(Tensor::scalar(5.0));
    t.backward(c).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::Contract(_))));
}

#[test]
fn shape_and_domain_errors() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
    assert!(matches!(t.mul(a, b), Err(Error::Shape(_))));
    let m = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(t.matmul(m, m), Err(Error::Shape(_))));
    let z = t.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(t.log(z), Err(Error::Domain(_))));
    let neg = t.constant(Tensor::vector(vec![-1.0]));
    assert!(matches!(t.log(neg), Err(Error::Domain(_))));
    let r = t.constant(Tensor::zeros(&[2, 2]));
    let c = t.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(t.concat(&[r, c], 0), Err(Error::Shape(_))));
    assert!(matches!(t.concat(&[r, c], 1), Err(Error::Shape(_))));
}

#[test]
fn broadcast_is_limited_to_columns() {
    let mut t = Tape::new();
    let m = t.constant(Tensor::zeros(&[2, 3]));
    let v = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let out = t.add(m, v).unwrap();
    assert_eq!(t.value(out).values(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    // a row vector is not an accepted broadcast
    let row = t.constant(Tensor::zeros(&[1, 3]));
    assert!(t.add(m, row).is_err());
    // neither is vector + matrix
    assert!(t.add(v, m).is_err());
}

#[test]
fn grad_check_linear_is_exact_to_roundoff() {
    let w = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let x = Tensor::vector(vec![1.0, 2.0, -0.5]);
    let rep = grad_check(
        |t, v| {
            let p = t.mul(v[0], v[1])?;
            Ok(t.sum(p))
        },
        &[w, x],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-9, "{rep:?}");
}

#[test]
fn grad_check_tanh_chain() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, 4, 4);
        let x = rand_tensor(&mut rng, 4, 1);
        let rep = grad_check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.tanh(h);
                let h2 = t.matmul(v[0], h)?;
                let h2 = t.tanh(h2);
                Ok(t.sum(h2))
            },
            &[a, x],
            1e-5,
        )
        .unwrap();
        assert!(rep.passed(1e-4), "seed {seed}: {rep:?}");
    }
}

#[test]
fn grad_check_flags_wrong_backward_rule() {
    let x = Tensor::vector(vec![0.4, -0.7, 1.3]);
    let rep = grad_check(
        |t, v| {
            let value = Tensor::vector(t.value(v[0]).values().iter().map(|x| x * x).collect());
            // true derivative is 2x; this rule claims 3x
            let y =
                t.custom(&[v[0]], value, Box::new(|ins, _out, g| vec![ins[0].values().iter().zip(g).map(|(x, g)| 3.0 * x * g).collect()]));
            Ok(t.sum(y))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error > 0.1, "{rep:?}");
    assert!(!rep.passed(1e-4));
}

#[test]
fn grad_check_reports_nan_as_failure() {
    let x = Tensor::vector(vec![1.0]);
    let rep = grad_check(
        |t, v| {
            let y = t.custom(&[v[0]], Tensor::scalar(1.0), Box::new(|_, _, _| vec![vec![f64::NAN]]));
            Ok(t.sum(y))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(!rep.passed(1e-4));
}

/// Every differentiable primitive on random inputs, 5 seeds, sizes up to 8x8.
#[test]
fn every_primitive_passes_grad_check() {
    type Case = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Tensor>, fn(&mut Tape, &[Var]) -> crate::Result<Var>);
    let cases: Vec<Case> = vec![
        (
            "add",
            |r| vec![rand_tensor(r, 3, 5), rand_tensor(r, 3, 5)],
            |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
        (
            "add_broadcast",
            |r| vec![rand_tensor(r, 4, 6), rand_tensor(r, 4, 1)],
            |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
        (
            "sub_broadcast",
            |r| vec![rand_tensor(r, 4, 6), rand_tensor(r, 4, 1)],
            |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
        (
            "sub_mul",
            |r| vec![rand_tensor(r, 8, 8), rand_tensor(r, 8, 8)],
            |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.mul(y, v[0])?;
                Ok(t.sum(y))
            },
        ),
        (
            "scale_sigmoid",
            |r| vec![rand_tensor(r, 5, 2)],
            |t, v| {
                let y = t.scale(v[0], -2.5);
                let y = t.sigmoid(y);
                Ok(t.sum(y))
            },
        ),
        (
            "exp_log",
            |r| vec![positive_tensor(r, 3, 3)],
            |t, v| {
                let y = t.log(v[0])?;
                let e = t.exp(v[0]);
                let y = t.mul(y, e)?;
                Ok(t.mean(y))
            },
        ),
        (
            "matmul",
            |r| vec![rand_tensor(r, 3, 4), rand_tensor(r, 4, 2)],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
        (
            "transpose",
            |r| vec![rand_tensor(r, 3, 4), rand_tensor(r, 3, 2)],
            |t, v| {
                let at = t.transpose(v[0]);
                let y = t.matmul(at, v[1])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
        (
            "concat_rows",
            |r| vec![rand_tensor(r, 2, 3), rand_tensor(r, 4, 3)],
            |t, v| {
                let y = t.concat(&[v[0], v[1]], 0)?;
                let y = t.softmax(y, 0)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
        ),
        (
            "concat_cols",
            |r| vec![rand_tensor(r, 3, 2), rand_tensor(r, 3, 3)],
            |t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                let y = t.softmax(y, 1)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
        ),
        (
            "slice",
            |r| vec![rand_tensor(r, 6, 5)],
            |t, v| {
                let a = t.slice(v[0], 0, 1, 3)?;
                let b = t.slice(a, 1, 2, 2)?;
                let b = t.tanh(b);
                Ok(t.sum(b))
            },
        ),
        (
            "reshape",
            |r| vec![rand_tensor(r, 2, 6)],
            |t, v| {
                let y = t.reshape(v[0], vec![4, 3])?;
                let y = t.log_softmax(y, 1)?;
                let y = t.mul(y, y)?;
                Ok(t.mean(y))
            },
        ),
        (
            "softmax",
            |r| vec![rand_tensor(r, 4, 3)],
            |t, v| {
                let y = t.softmax(v[0], 0)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
        ),
        (
            "log_softmax",
            |r| vec![rand_tensor(r, 5, 3)],
            |t, v| {
                let y = t.log_softmax(v[0], 0)?;
                let y = t.gather(y, &[(0, 0), (3, 1), (2, 2)])?;
                Ok(t.sum(y))
            },
        ),
        (
            "embedding",
            |r| vec![rand_tensor(r, 3, 6)],
            |t, v| {
                let y = t.embedding(v[0], &[1, 4, 1, 0])?;
                let y = t.tanh(y);
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
        ),
        (
            "select",
            |r| vec![rand_tensor(r, 2, 3), rand_tensor(r, 2, 3)],
            |t, v| {
                let y = t.select(&[true, false, true, false, false, true], v[0], v[1])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
        (
            "straight_through",
            |r| vec![rand_tensor(r, 4, 1), rand_tensor(r, 3, 4)],
            |t, v| {
                // with hard == soft values the ST node is the identity map
                let soft = t.softmax(v[0], 0)?;
                let hard = t.value(soft).clone();
                let st = t.straight_through(soft, hard)?;
                let y = t.matmul(v[1], st)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
        ),
    ];
    for (name, make, f) in cases {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs = make(&mut rng);
            let rep = grad_check(f, &inputs, 1e-5).unwrap();
            assert!(rep.passed(1e-4), "{name} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn forward_backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = rand_tensor(&mut rng, 6, 6);
        let x = rand_tensor(&mut rng, 6, 3);
        let mut t = Tape::new();
        let av = t.param(a);
        let xv = t.param(x);
        let y = t.matmul(av, xv).unwrap();
        let y = t.softmax(y, 0).unwrap();
        let y = t.log(y).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        (t.item(s).to_bits(), t.grad(av).unwrap().to_vec(), t.grad(xv).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

proptest! {
    #[test]
    fn softmax_sums_to_one(xs in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(xs));
        let s = t.softmax(x, 0).unwrap();
        let v = t.value(s).values();
        prop_assert!(v.iter().all(|&p| p >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant(xs in proptest::collection::vec(-20.0f64..20.0, 2..10), c in -20.0f64..20.0) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(xs.clone()));
        let xc = t.constant(Tensor::vector(xs.iter().map(|v| v + c).collect()));
        let a = t.softmax(x, 0).unwrap();
        let b = t.softmax(xc, 0).unwrap();
        for (p, q) in t.value(a).values().iter().zip(t.value(b).values()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
