use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_identity_and_dot() {
    let i = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let c = Tensor::new(vec![3.0, 4.0], &[2, 1]).unwrap();
    assert_eq!(i.matmul(&c).unwrap().to_vec(), vec![3.0, 4.0]);
    let r = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
    assert_eq!(r.matmul(&c).unwrap().to_vec(), vec![11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[5, 7]);
    let b = random(&mut rng, &[7, 3]);
    let c = a.matmul(&b).unwrap();
    let (av, bv) = (a.to_vec(), b.to_vec());
    let mut oracle = vec![0.0; 15];
    for i in 0..5 {
        for j in 0..3 {
            for p in 0..7 {
                oracle[i * 3 + j] += av[i * 7 + p] * bv[p * 3 + j];
            }
        }
    }
    close(&c.to_vec(), &oracle, 1e-12);
    let bt = b.transpose().unwrap().detach();
    close(&a.matmul_t(&bt).unwrap().to_vec(), &oracle, 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let s = Tensor::vector(vec![0.0, 0.0]).softmax(0).unwrap();
    assert_eq!(s.to_vec(), vec![0.5, 0.5]);
    let s = Tensor::vector(vec![1000.0, 0.0]).softmax(0).unwrap().to_vec();
    assert!((s[0] - 1.0).abs() < 1e-300 + 1e-15 && s[1] >= 0.0 && s[1] < 1e-300);
    let s = Tensor::vector(vec![0.9, 0.5]).softmax(0).unwrap().to_vec();
    close(&s, &[0.59869, 0.40131], 1e-5);
    let nan = Tensor::vector(vec![f64::NAN, 0.0]);
    assert!(matches!(nan.softmax(0), Err(Error::NonFinite { .. })));
}

#[test]
fn softmax_slices_sum_to_one_on_either_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[4, 6]).scale(50.0);
    for axis in 0..2 {
        let y = x.softmax(axis).unwrap().to_vec();
        let (rows, cols) = (4, 6);
        if axis == 1 {
            for r in 0..rows {
                let s: f64 = y[r * cols..(r + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        } else {
            for c in 0..cols {
                let s: f64 = (0..rows).map(|r| y[r * cols + c]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn logsumexp_never_overflows_in_range() {
    let x = Tensor::vector(vec![1e4, -1e4, 9999.0, 0.0]);
    let v = x.logsumexp().unwrap().item();
    assert!(v.is_finite());
    assert!((v - (1e4 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
    let y = Tensor::vector(vec![-1e4, -1e4]);
    assert!((y.logsumexp().unwrap().item() - (-1e4 + 2f64.ln())).abs() < 1e-9);
}

#[test]
fn cosine_examples() {
    let v = Tensor::vector(vec![0.3, -2.0, 5.0]);
    assert!((v.cosine_similarity(&v).unwrap().item() - 1.0).abs() < 1e-15);
    let a = Tensor::vector(vec![1.0, 0.0]);
    let b = Tensor::vector(vec![0.0, 1.0]);
    assert_eq!(a.cosine_similarity(&b).unwrap().item(), 0.0);
    let u = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let w = Tensor::vector(vec![4.0, 5.0, 6.0]);
    let c = u.cosine_similarity(&w).unwrap().item();
    assert!((c - 32.0 / (14f64.sqrt() * 77f64.sqrt())).abs() < 1e-12);
    assert!((c - 0.974631).abs() < 1e-5);
    let z = Tensor::vector(vec![0.0, 1e-9]);
    assert!(matches!(z.cosine_similarity(&a), Err(Error::DegenerateVector { .. })));
}

#[test]
fn backward_square_and_constant() {
    let x = Tensor::param(vec![3.0], &[1]).unwrap();
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0]);

    let p = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let c = Tensor::scalar(4.0);
    c.backward().unwrap();
    assert!(p.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(x.scale(2.0).backward(), Err(Error::Shape { .. })));
}

#[test]
fn second_backward_doubles_gradients_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[2, 4]);
    let loss = a.matmul_t(&b).unwrap().gelu().softmax(1).unwrap().log().unwrap().sum();
    loss.backward().unwrap();
    let (ga, gb) = (a.grad().unwrap(), b.grad().unwrap());
    loss.backward().unwrap();
    let (ga2, gb2) = (a.grad().unwrap(), b.grad().unwrap());
    for (x, y) in ga.iter().zip(&ga2).chain(gb.iter().zip(&gb2)) {
        assert_eq!(2.0 * x, *y);
    }
}

#[test]
fn constant_parents_receive_nothing() {
    let w = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let x = Tensor::param(vec![0.5, -0.5], &[1, 2]).unwrap();
    let y = x.matmul_t(&w).unwrap().sum();
    assert!(y.requires_grad());
    y.backward().unwrap();
    assert!(w.grad().is_none());
    assert_eq!(x.grad().unwrap(), vec![4.0, 6.0]);
    let z = w.matmul(&w).unwrap();
    assert!(!z.requires_grad());
}

#[test]
fn quadratic_form_checks_to_roundoff() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random(&mut rng, &[6, 6]).detach();
    let x = random(&mut rng, &[6, 1]);
    let err = grad_check(
        |p| {
            let qx = q.matmul(&p[0])?;
            Ok(p[0].mul(&qx)?.sum())
        },
        &[x],
        1e-5,
        1,
    )
    .unwrap();
    assert!(err <= 1e-7, "{err}");
}

type OpCase = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>);

fn op_cases() -> Vec<(&'static str, OpCase)> {
    fn w(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), &[n]).unwrap()
    }
    vec![
        ("matmul", |r| {
            let (a, b) = (random(r, &[3, 4]), random(r, &[4, 2]));
            let wt = w(r, 6);
            (
                vec![a, b],
                Box::new(move |p| p[0].matmul(&p[1])?.reshape(&[6])?.dot(&wt)),
            )
        }),
        ("matmul_t", |r| {
            let (a, b) = (random(r, &[3, 4]), random(r, &[5, 4]));
            let wt = w(r, 15);
            (
                vec![a, b],
                Box::new(move |p| p[0].matmul_t(&p[1])?.reshape(&[15])?.dot(&wt)),
            )
        }),
        ("transpose", |r| {
            let a = random(r, &[3, 2]);
            let wt = w(r, 6);
            (vec![a], Box::new(move |p| p[0].transpose()?.reshape(&[6])?.dot(&wt)))
        }),
        ("add_sub_mul", |r| {
            let (a, b) = (random(r, &[5]), random(r, &[5]));
            (
                vec![a, b],
                Box::new(|p| p[0].add(&p[1])?.mul(&p[0].sub(&p[1])?)?.mul(&p[1])?.sum().into_ok()),
            )
        }),
        ("add_row", |r| {
            let (a, b) = (random(r, &[3, 4]), random(r, &[4]));
            let wt = w(r, 12);
            (
                vec![a, b],
                Box::new(move |p| p[0].add_row(&p[1])?.reshape(&[12])?.dot(&wt)),
            )
        }),
        ("mul_col", |r| {
            let (a, c) = (random(r, &[3, 4]), random(r, &[3]));
            let wt = w(r, 12);
            (
                vec![a, c],
                Box::new(move |p| p[0].mul_col(&p[1])?.reshape(&[12])?.dot(&wt)),
            )
        }),
        ("mul_scalar", |r| {
            let (a, s) = (random(r, &[4]), random(r, &[]));
            let wt = w(r, 4);
            (vec![a, s], Box::new(move |p| p[0].mul_scalar(&p[1])?.dot(&wt)))
        }),
        ("softmax", |r| {
            let a = random(r, &[3, 4]);
            let wt = w(r, 12);
            let axis = r.random_range(0..2);
            (
                vec![a],
                Box::new(move |p| p[0].scale(3.0).softmax(axis)?.reshape(&[12])?.dot(&wt)),
            )
        }),
        ("log_softmax", |r| {
            let a = random(r, &[2, 5]);
            let wt = w(r, 10);
            (
                vec![a],
                Box::new(move |p| p[0].scale(4.0).log_softmax(1)?.reshape(&[10])?.dot(&wt)),
            )
        }),
        ("logsumexp", |r| {
            let a = random(r, &[6]);
            (vec![a], Box::new(|p| p[0].scale(5.0).logsumexp()))
        }),
        ("exp_log", |r| {
            let a = random(r, &[4]);
            (
                vec![a],
                Box::new(|p| p[0].exp().add(&p[0].exp())?.log().map(|t| t.sum())),
            )
        }),
        ("gelu", |r| {
            let a = random(r, &[7]);
            let wt = w(r, 7);
            (vec![a], Box::new(move |p| p[0].scale(3.0).gelu().dot(&wt)))
        }),
        ("layer_norm", |r| {
            let (x, g, b) = (random(r, &[3, 5]), random(r, &[5]), random(r, &[5]));
            let wt = w(r, 15);
            (
                vec![x, g, b],
                Box::new(move |p| p[0].layer_norm(&p[1], &p[2], 1e-5)?.reshape(&[15])?.dot(&wt)),
            )
        }),
        ("gather_rows", |r| {
            let t = random(r, &[5, 3]);
            let wt = w(r, 12);
            (
                vec![t],
                Box::new(move |p| p[0].gather_rows(&[4, 0, 4, 2])?.reshape(&[12])?.dot(&wt)),
            )
        }),
        ("row_stack", |r| {
            let t = random(r, &[3, 4]);
            let wt = w(r, 8);
            (
                vec![t],
                Box::new(move |p| Tensor::stack(&[p[0].row(2)?, p[0].row(0)?])?.reshape(&[8])?.dot(&wt)),
            )
        }),
        ("slice_concat_cols", |r| {
            let t = random(r, &[2, 6]);
            let wt = w(r, 8);
            (
                vec![t],
                Box::new(move |p| {
                    let left = p[0].slice_cols(0, 2)?;
                    let right = p[0].slice_cols(3, 2)?;
                    Tensor::concat_cols(&[right, left.clone(), left])?
                        .reshape(&[12])?
                        .gather(&[0, 1, 2, 3, 4, 5, 6, 7])?
                        .dot(&wt)
                }),
            )
        }),
        ("gather_index", |r| {
            let t = random(r, &[6]);
            (
                vec![t],
                Box::new(|p| p[0].gather(&[5, 1, 1])?.sum().mul_scalar(&p[0].index(3)?)),
            )
        }),
        ("cosine", |r| {
            let (u, v) = (random(r, &[5]), random(r, &[5]));
            (vec![u, v], Box::new(|p| p[0].cosine_similarity(&p[1])))
        }),
        ("recip", |r| {
            let u = random(r, &[4]);
            (vec![u], Box::new(|p| Ok(p[0].exp().recip()?.sum())))
        }),
        ("mean_neg", |r| {
            let u = random(r, &[5]);
            (vec![u], Box::new(|p| p[0].mul(&p[0])?.neg().mean().into_ok()))
        }),
    ]
}

trait IntoOk: Sized {
    fn into_ok(self) -> Result<Self> {
        Ok(self)
    }
}
impl IntoOk for Tensor {}

#[test]
fn every_op_passes_gradient_check_on_twenty_configurations() {
    for (name, case) in op_cases() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (params, f) = case(&mut rng);
            let err = grad_check(f, &params, 1e-5, seed).unwrap();
            assert!(err <= 1e-4, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn corrupted_rule_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[2, 4]).scale(3.0).deep_copy(true);
    let f = |p: &[Tensor]| Ok(p[0].matmul_t(&p[1])?.sum());
    set_gradient_fault(true);
    let err = grad_check(f, &[a.clone(), b.clone()], 1e-5, 0);
    set_gradient_fault(false);
    assert!(err.unwrap() > 1e-2);
    assert!(grad_check(f, &[a, b], 1e-5, 0).unwrap() <= 1e-7);
}

#[test]
fn grad_check_reports_nan() {
    let x = Tensor::param(vec![f64::NAN], &[1]).unwrap();
    let r = grad_check(|p| Ok(p[0].mul(&p[0])?.sum()), &[x], 1e-5, 0);
    assert!(matches!(r, Err(Error::NonFinite { .. })));
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let p = Tensor::param(vec![1.5, -2.0], &[2]).unwrap();
    let mut state = AdamState::new(std::slice::from_ref(&p), AdamConfig::default());
    p.accumulate_grad(&[0.0, 0.0]);
    state.step(std::slice::from_ref(&p));
    assert_eq!(p.to_vec(), vec![1.5, -2.0]);
    assert_eq!(state.step_count, 1);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let p = Tensor::param(vec![0.0], &[1]).unwrap();
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(std::slice::from_ref(&p), cfg);
    p.accumulate_grad(&[1.0]);
    state.step(std::slice::from_ref(&p));
    // m̂ = 1, v̂ = 1 after bias correction: Δ = 0.1 / (1 + 1e-8)
    assert!((p.item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    assert!(p.grad().is_none());
}

#[test]
fn adam_skips_frozen_tensors() {
    let frozen = Tensor::new(vec![1.0], &[1]).unwrap();
    frozen.accumulate_grad(&[5.0]);
    let mut state = AdamState::new(std::slice::from_ref(&frozen), AdamConfig::default());
    state.step(std::slice::from_ref(&frozen));
    assert_eq!(frozen.item(), 1.0);
}

fn adam_run(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &[4, 3]);
    let x = random(&mut rng, &[5, 3]).detach();
    let mut state = AdamState::new(std::slice::from_ref(&w), AdamConfig::default());
    let mut last_grad = Vec::new();
    for _ in 0..100 {
        let loss = x
            .matmul_t(&w)
            .unwrap()
            .gelu()
            .softmax(1)
            .unwrap()
            .log()
            .unwrap()
            .sum()
            .neg();
        loss.backward().unwrap();
        last_grad = w.grad().unwrap();
        state.step(std::slice::from_ref(&w));
    }
    (w.to_vec(), last_grad)
}

#[test]
fn identical_runs_are_bit_identical() {
    let (a, ga) = adam_run(9);
    let (b, gb) = adam_run(9);
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
