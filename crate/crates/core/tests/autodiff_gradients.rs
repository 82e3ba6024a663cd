use evalign_core::autodiff::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use evalign_core::autodiff::{ops, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Evaluates `build` with `x` as a trainable leaf and returns (value, grad).
fn eval_with_grad(shape: &[usize], x: &[f64], build: &dyn Fn(&mut Tape, Var) -> Var) -> (f64, Vec<f64>) {
    let t = Tensor::new(shape.to_vec(), x.to_vec()).unwrap().with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&t);
    let root = build(&mut tape, v);
    let grads = tape.backward(root).unwrap();
    (tape.scalar(root).unwrap(), grads.get(v).unwrap().to_vec())
}

fn eval_only(shape: &[usize], x: &[f64], build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let t = Tensor::new(shape.to_vec(), x.to_vec()).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(t);
    let root = build(&mut tape, v);
    tape.scalar(root).unwrap()
}

fn check(shape: &[usize], x: &[f64], tol: f64, build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let (_, analytic) = eval_with_grad(shape, x, build);
    let numeric = central_difference(x, DEFAULT_STEP, |p| eval_only(shape, p, build));
    let err = max_relative_error(&analytic, &numeric);
    assert!(err <= tol, "relative error {err:e} > {tol:e}");
    err
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let b = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
    let a = [0.1, 0.2, -0.3, 0.4, 1.5, -2.0];
    check(&[2, 3], &a, 1e-6, &|tape, a| {
        let b = tape.constant(b.clone());
        let p = tape.matmul(a, b).unwrap();
        tape.sum(p).unwrap()
    });
}

#[test]
fn normalize_gradient_matches_finite_differences() {
    let v = [0.3, -1.2, 2.5, 0.7];
    check(&[4], &v, 1e-6, &|tape, v| {
        let n = tape.l2_normalize(v).unwrap();
        tape.sum(n).unwrap()
    });
}

#[test]
fn each_op_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_vec(&mut rng, 12);
    let w = Tensor::matrix(3, 4, random_vec(&mut rng, 12)).unwrap();
    let c = Tensor::matrix(3, 4, random_vec(&mut rng, 12)).unwrap();
    let weigh = move |tape: &mut Tape, h: Var| {
        let c = tape.constant(c.clone());
        let p = tape.mul(h, c).unwrap();
        tape.sum(p).unwrap()
    };
    type Builder = Box<dyn Fn(&mut Tape, Var) -> Var>;
    let cases: Vec<(&str, Builder)> = vec![
        ("softplus", Box::new(|t: &mut Tape, v| t.softplus(v).unwrap())),
        ("softmax_row", Box::new(|t: &mut Tape, v| t.softmax_row(v).unwrap())),
        ("log_softmax_row", Box::new(|t: &mut Tape, v| t.log_softmax_row(v).unwrap())),
        ("l2_normalize", Box::new(|t: &mut Tape, v| t.l2_normalize(v).unwrap())),
        ("digamma", Box::new(|t: &mut Tape, v| {
            let s = t.softplus(v).unwrap();
            let s = t.add_scalar(s, 1.0).unwrap();
            t.digamma(s).unwrap()
        })),
        ("ln_gamma", Box::new(|t: &mut Tape, v| {
            let s = t.softplus(v).unwrap();
            t.ln_gamma(s).unwrap()
        })),
        ("add_row", Box::new(|t: &mut Tape, v| {
            let r = t.slice_rows(v, 1, 1).unwrap();
            t.add_row(v, r).unwrap()
        })),
        ("broadcast_col", Box::new(|t: &mut Tape, v| {
            let s = t.sum_rows(v).unwrap();
            t.broadcast_col(s, 4).unwrap()
        })),
        ("mean_rows_concat", Box::new(|t: &mut Tape, v| {
            let m = t.mean_rows(v).unwrap();
            let top = t.slice_rows(v, 0, 2).unwrap();
            t.concat_rows(&[top, m]).unwrap()
        })),
        ("gather_rows", Box::new(|t: &mut Tape, v| t.gather_rows(v, &[2, 0, 2]).unwrap())),
        ("transpose_matmul_nt", Box::new(move |t: &mut Tape, v| {
            let w = t.constant(w.clone());
            let s = t.matmul_nt(v, w).unwrap(); // 3×3
            let d = t.diag(s).unwrap(); // 3×1
            let d = t.broadcast_col(d, 4).unwrap();
            let vt = t.transpose(v).unwrap();
            let vtt = t.transpose(vt).unwrap();
            let p = t.mul(d, vtt).unwrap();
            t.sub(p, v).unwrap()
        })),
        ("reshape", Box::new(|t: &mut Tape, v| {
            let r = t.reshape(v, vec![4, 3]).unwrap();
            let r = t.softmax_row(r).unwrap();
            t.reshape(r, vec![3, 4]).unwrap()
        })),
    ];
    for (name, build) in cases {
        let weigh = weigh.clone();
        let full = move |tape: &mut Tape, v: Var| {
            let h = build(tape, v);
            weigh(tape, h)
        };
        let err = check(&[3, 4], &x, 1e-6, &full);
        eprintln!("{name}: max rel err {err:e}");
    }
}

/// Builds a random composed expression of the op set, driven by `seed`.
fn random_expression(seed: u64) -> (Vec<f64>, impl Fn(&mut Tape, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_vec(&mut rng, 12);
    let w = Tensor::matrix(3, 4, random_vec(&mut rng, 12)).unwrap();
    let bias = Tensor::matrix(1, 3, random_vec(&mut rng, 3)).unwrap();
    let weights = Tensor::matrix(3, 3, random_vec(&mut rng, 9)).unwrap();
    let steps: Vec<u8> = (0..4).map(|_| rng.random_range(0..9)).collect();
    let scale = rng.random_range(0.5..2.0);
    let build = move |tape: &mut Tape, x: Var| {
        let w = tape.constant(w.clone());
        let mut h = tape.matmul_nt(x, w).unwrap(); // 3×3
        for &step in &steps {
            h = match step {
                0 => tape.softplus(h).unwrap(),
                1 => tape.softmax_row(h).unwrap(),
                2 => tape.log_softmax_row(h).unwrap(),
                3 => tape.l2_normalize(h).unwrap(),
                4 => tape.scale(h, scale).unwrap(),
                5 => tape.transpose(h).unwrap(),
                6 => {
                    let b = tape.constant(bias.clone());
                    tape.add_row(h, b).unwrap()
                }
                7 => {
                    let s = tape.softplus(h).unwrap();
                    let s = tape.add_scalar(s, 0.5).unwrap();
                    tape.digamma(s).unwrap()
                }
                _ => {
                    let s = tape.softplus(h).unwrap();
                    let s = tape.add_scalar(s, 0.5).unwrap();
                    tape.ln_gamma(s).unwrap()
                }
            };
        }
        let wc = tape.constant(weights.clone());
        let p = tape.mul(h, wc).unwrap();
        tape.sum(p).unwrap()
    };
    (x, build)
}

#[test]
fn composed_expressions_match_finite_differences_over_200_seeds() {
    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        let (x, build) = random_expression(seed);
        worst = worst.max(check(&[3, 4], &x, 1e-4, &build));
    }
    eprintln!("worst relative error over 200 seeds: {worst:e}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_under_large_logits(
        row in proptest::collection::vec(-1e4f64..1e4, 1..16)
    ) {
        let t = Tensor::matrix(1, row.len(), row).unwrap();
        let s = ops::softmax_rows(&t).unwrap();
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(
        row in proptest::collection::vec(-50f64..50.0, 1..8),
        shift in -100f64..100.0,
    ) {
        let a = Tensor::matrix(1, row.len(), row.clone()).unwrap();
        let b = Tensor::matrix(1, row.len(), row.iter().map(|v| v + shift).collect()).unwrap();
        let sa = ops::softmax_rows(&a).unwrap();
        let sb = ops::softmax_rows(&b).unwrap();
        for (x, y) in sa.data().iter().zip(sb.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn softplus_positive_and_monotone(x in -700f64..700.0, dx in 1e-6f64..10.0) {
        let t = Tensor::vector(vec![x, x + dx]).unwrap();
        let s = ops::softplus(&t).unwrap();
        prop_assert!(s.data()[0] > 0.0);
        prop_assert!(s.data()[0] < s.data()[1]);
    }
}
