use super::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn randn(rng: &mut StdRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.5f32..1.5)).collect()
}

/// Central finite differences through the f32 implementation, h = 1e-3.
///
/// The probe loss is `sum(w ⊙ f(x))` with O(1) weights, so analytic
/// gradients are O(1); errors are reported relative to max(|num|, |ana|, 1)
/// to keep float32 forward noise from blowing up entries whose true
/// gradient is near zero.
fn fd_check(make_loss: impl Fn(&Tensor) -> Tensor, x0: &[f32], shape: &[usize]) {
    let x = Tensor::param(shape, x0.to_vec()).unwrap();
    let loss = make_loss(&x);
    loss.backward().unwrap();
    let analytic = x.grad().unwrap();

    let h = 1e-3f32;
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += h;
        let mut minus = x0.to_vec();
        minus[i] -= h;
        let lp = make_loss(&Tensor::param(shape, plus).unwrap()).item() as f64;
        let lm = make_loss(&Tensor::param(shape, minus).unwrap()).item() as f64;
        let numeric = ((lp - lm) / (2.0 * h as f64)) as f32;
        let denom = numeric.abs().max(analytic[i].abs()).max(1.0);
        let rel = (numeric - analytic[i]).abs() / denom;
        assert!(
            rel <= 1e-3,
            "grad mismatch at {i}: numeric {numeric} vs analytic {} (rel {rel})",
            analytic[i]
        );
    }
}

fn weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::constant(shape, (0..n).map(|_| rng.gen_range(0.5f32..2.0)).collect()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut rng = StdRng::seed_from_u64(0);
    let a = Tensor::constant(&[3, 3], randn(&mut rng, 9)).unwrap();
    let eye = Tensor::constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let out = eye.matmul(&a).unwrap();
    assert_eq!(out.to_vec(), a.to_vec());
}

#[test]
fn matmul_hand_case() {
    let a = Tensor::constant(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = Tensor::constant(&[2, 1], vec![1., 1.]).unwrap();
    let out = a.matmul(&b).unwrap();
    assert_eq!(out.to_vec(), vec![3., 7.]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = StdRng::seed_from_u64(7);
    let a = randn(&mut rng, 20);
    let b = randn(&mut rng, 24);
    let out = Tensor::constant(&[5, 4], a.clone())
        .unwrap()
        .matmul(&Tensor::constant(&[4, 6], b.clone()).unwrap())
        .unwrap();
    // Element-by-element triple loop in f64.
    for i in 0..5 {
        for j in 0..6 {
            let mut s = 0.0f64;
            for p in 0..4 {
                s += a[i * 4 + p] as f64 * b[p * 6 + j] as f64;
            }
            assert!((out.to_vec()[i * 6 + j] as f64 - s).abs() < 1e-6);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "error should name shapes: {err}");
}

#[test]
fn softmax_symmetry_and_stability() {
    let s = Tensor::constant(&[2], vec![0.0, 0.0])
        .unwrap()
        .softmax_lastdim()
        .unwrap();
    assert!((s.to_vec()[0] - 0.5).abs() < 1e-7);

    let big = Tensor::constant(&[2], vec![1000.0, 1000.0])
        .unwrap()
        .softmax_lastdim()
        .unwrap();
    assert!(big.is_finite());
    assert!((big.to_vec()[0] - 0.5).abs() < 1e-7);
}

#[test]
fn softmax_matches_f64_oracle() {
    let s = Tensor::constant(&[3], vec![1.0, 2.0, 3.0])
        .unwrap()
        .softmax_lastdim()
        .unwrap();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (got, v) in s.to_vec().iter().zip([1.0f64, 2.0, 3.0]) {
        assert!((*got as f64 - v.exp() / denom).abs() < 1e-6);
    }
    let rows: f64 = s.to_vec().iter().map(|&v| v as f64).sum();
    assert!((rows - 1.0).abs() < 1e-6);
}

#[test]
fn softmax_empty_lastdim_rejected() {
    assert!(Tensor::constant(&[0], vec![]).is_err());
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let x = Tensor::constant(&[1, 4], vec![3.0; 4]).unwrap();
    let gain = Tensor::constant(&[4], vec![1.0; 4]).unwrap();
    let bias = Tensor::constant(&[4], vec![0.0; 4]).unwrap();
    let out = x.layer_norm(&gain, &bias, 1e-5).unwrap();
    assert!(out.is_finite());
    assert!(out.to_vec().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn layer_norm_two_point_row() {
    let x = Tensor::constant(&[1, 2], vec![1.0, 3.0]).unwrap();
    let gain = Tensor::constant(&[2], vec![1.0; 2]).unwrap();
    let bias = Tensor::constant(&[2], vec![0.0; 2]).unwrap();
    let out = x.layer_norm(&gain, &bias, 1e-5).unwrap().to_vec();
    assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_matches_f64_oracle() {
    let mut rng = StdRng::seed_from_u64(3);
    let xs = randn(&mut rng, 8);
    let gain = Tensor::constant(&[8], vec![1.0; 8]).unwrap();
    let bias = Tensor::constant(&[8], vec![0.0; 8]).unwrap();
    let out = Tensor::constant(&[1, 8], xs.clone())
        .unwrap()
        .layer_norm(&gain, &bias, 1e-5)
        .unwrap()
        .to_vec();
    let mean: f64 = xs.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
    let var: f64 = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
    for (got, &x) in out.iter().zip(&xs) {
        let want = (x as f64 - mean) / (var + 1e-5).sqrt();
        assert!((*got as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn layer_norm_rejects_nonpositive_eps() {
    let x = Tensor::zeros(&[1, 2]);
    let g = Tensor::zeros(&[2]);
    let b = Tensor::zeros(&[2]);
    assert!(matches!(
        x.layer_norm(&g, &b, 0.0),
        Err(crate::error::Error::Config(_))
    ));
}

#[test]
fn backward_sum_gives_ones() {
    let x = Tensor::param(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_sum_of_squares_gives_2x() {
    let vals = vec![1.0f32, -2.0, 0.5];
    let x = Tensor::param(&[3], vals.clone()).unwrap();
    x.mul(&x).unwrap().sum_all().backward().unwrap();
    for (g, v) in x.grad().unwrap().iter().zip(&vals) {
        assert!((g - 2.0 * v).abs() < 1e-6);
    }
}

#[test]
fn backward_accumulates_across_uses() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    // x appears twice: grad should be 1 + 1 = 2 per element.
    x.add(&x).unwrap().sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn backward_rejects_nonscalar_and_detached() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(
        x.backward(),
        Err(crate::error::Error::NonScalarLoss(_))
    ));
    let c = Tensor::scalar(1.0);
    assert!(matches!(c.backward(), Err(crate::error::Error::EmptyGraph)));
}

#[test]
fn composite_loss_passes_finite_difference_check() {
    let mut rng = StdRng::seed_from_u64(11);
    let x0 = randn(&mut rng, 12);
    let w = Tensor::constant(&[3, 3], randn(&mut rng, 9)).unwrap();
    let gain = Tensor::constant(&[3], vec![1.1, 0.9, 1.0]).unwrap();
    let bias = Tensor::constant(&[3], vec![0.1, -0.1, 0.0]).unwrap();
    fd_check(
        |x| {
            let h = x.matmul(&w.transpose().unwrap()).unwrap();
            let h = h.layer_norm(&gain, &bias, 1e-5).unwrap();
            let h = h.gelu();
            let s = h.softmax_lastdim().unwrap();
            s.mul(&h).unwrap().sum_all()
        },
        &x0,
        &[4, 3],
    );
}

#[test]
fn unary_ops_pass_finite_difference_checks() {
    let mut rng = StdRng::seed_from_u64(13);
    let x0 = randn(&mut rng, 10);
    let w = weights(&[10], 5);
    fd_check(|x| x.gelu().mul(&w).unwrap().sum_all(), &x0, &[10]);
    fd_check(|x| x.sigmoid().mul(&w).unwrap().sum_all(), &x0, &[10]);
    fd_check(|x| x.softplus().mul(&w).unwrap().sum_all(), &x0, &[10]);
    fd_check(|x| x.elu_plus_one().mul(&w).unwrap().sum_all(), &x0, &[10]);
    let pos: Vec<f32> = x0.iter().map(|v| v.abs() + 0.3).collect();
    fd_check(|x| x.sqrt_eps(1e-6).mul(&w).unwrap().sum_all(), &pos, &[10]);
}

#[test]
fn structural_ops_pass_finite_difference_checks() {
    let mut rng = StdRng::seed_from_u64(17);
    let x0 = randn(&mut rng, 12);
    let w23 = weights(&[2, 3], 1);
    let w43 = weights(&[4, 3], 2);
    let w64 = weights(&[6, 4], 3);
    let v = Tensor::constant(&[4], vec![0.5, -1.0, 2.0, 1.5]).unwrap();
    fd_check(
        |x| x.slice_rows(1, 2).unwrap().mul(&w23).unwrap().sum_all(),
        &x0,
        &[4, 3],
    );
    fd_check(
        |x| {
            let a = x.slice_cols(0, 2).unwrap();
            let b = x.slice_cols(2, 1).unwrap();
            let joined = Tensor::concat_cols(&[b, a]).unwrap();
            joined.mul(&w43).unwrap().sum_all()
        },
        &x0,
        &[4, 3],
    );
    fd_check(
        |x| x.scale_rows(&v).unwrap().mul(&w43).unwrap().sum_all(),
        &x0,
        &[4, 3],
    );
    fd_check(
        |x| {
            let t = x.transpose().unwrap();
            Tensor::concat_rows(&[t.clone(), t]).unwrap().mul(&w64).unwrap().sum_all()
        },
        &x0,
        &[4, 3],
    );
}

#[test]
fn binary_ops_pass_finite_difference_checks() {
    let mut rng = StdRng::seed_from_u64(19);
    let x0 = randn(&mut rng, 8);
    let other = Tensor::constant(&[8], randn(&mut rng, 8)).unwrap();
    let denom = Tensor::constant(&[8], (0..8).map(|_| rng.gen_range(0.5f32..2.0)).collect()).unwrap();
    let w = weights(&[8], 4);
    let w24 = weights(&[2, 4], 6);
    fd_check(|x| x.mul(&other).unwrap().mul(&w).unwrap().sum_all(), &x0, &[8]);
    fd_check(|x| x.div(&denom).unwrap().mul(&w).unwrap().sum_all(), &x0, &[8]);
    fd_check(|x| x.sub(&other).unwrap().mul(&w).unwrap().sum_all(), &x0, &[8]);
    fd_check(
        |x| x.softmax_lastdim().unwrap().mul(&w24).unwrap().sum_all(),
        &x0,
        &[2, 4],
    );
    fd_check(|x| x.cross_entropy(&[1, 0]).unwrap(), &x0, &[2, 4]);
    let row = Tensor::constant(&[4], vec![0.3, -0.2, 0.7, 0.1]).unwrap();
    fd_check(|x| x.add_row(&row).unwrap().mul(&w24).unwrap().sum_all(), &x0, &[2, 4]);
}

#[test]
fn matmul_passes_finite_difference_check_both_sides() {
    let mut rng = StdRng::seed_from_u64(23);
    let a0 = randn(&mut rng, 6);
    let b0 = randn(&mut rng, 8);
    let w = weights(&[3, 4], 6);
    let bc = Tensor::constant(&[2, 4], b0.clone()).unwrap();
    fd_check(
        |a| a.matmul(&bc).unwrap().mul(&w).unwrap().sum_all(),
        &a0,
        &[3, 2],
    );
    let ac = Tensor::constant(&[3, 2], a0).unwrap();
    fd_check(
        |b| ac.matmul(b).unwrap().mul(&w).unwrap().sum_all(),
        &b0,
        &[2, 4],
    );
}

#[test]
fn cross_entropy_matches_f64_oracle() {
    let logits = vec![0.2f32, -1.0, 0.7, 1.5, 0.0, -0.5];
    let t = Tensor::constant(&[2, 3], logits.clone()).unwrap();
    let loss = t.cross_entropy(&[2, 0]).unwrap().item() as f64;
    let mut want = 0.0f64;
    for (row, label) in [(0usize, 2usize), (1, 0)] {
        let r: Vec<f64> = logits[row * 3..row * 3 + 3].iter().map(|&v| v as f64).collect();
        let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - r[label];
    }
    want /= 2.0;
    assert!((loss - want).abs() < 1e-6);
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let p = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    p.add_to_grad(&[0.0, 0.0, 0.0]);
    let mut states = vec![AdamState::new(3, 0.1)];
    adam_step(&[p.clone()], &mut states, 0.1).unwrap();
    assert_eq!(p.to_vec(), vec![1.0, 2.0, 3.0]);
    assert_eq!(states[0].step, 1);
    assert!(p.grad().is_none(), "grads are consumed by the step");
}

#[test]
fn adam_first_step_closed_form() {
    let p = Tensor::param(&[1], vec![0.5]).unwrap();
    p.add_to_grad(&[1.0]);
    let mut states = vec![AdamState::new(1, 0.1)];
    adam_step(&[p.clone()], &mut states, 0.1).unwrap();
    // Bias-corrected first step with g = 1 moves by ≈ −lr.
    assert!((p.to_vec()[0] - (0.5 - 0.1)).abs() < 1e-5);
}

#[test]
fn adam_missing_grad_is_state_error() {
    let p = Tensor::param(&[1], vec![0.5]).unwrap();
    let mut states = vec![AdamState::new(1, 0.1)];
    assert!(matches!(
        adam_step(&[p], &mut states, 0.1),
        Err(crate::error::Error::State(_))
    ));
}

#[test]
fn adam_converges_on_quadratic_and_tracks_f64_reference() {
    let p = Tensor::param(&[1], vec![1.0]).unwrap();
    let mut states = vec![AdamState::new(1, 0.1)];

    // 64-bit reference Adam on f(w) = w^2.
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let (b1, b2, eps) = (0.9f64, 0.999, 1e-8);

    for step in 1..=100 {
        let loss = p.mul(&p).unwrap().sum_all();
        loss.backward().unwrap();
        adam_step(&[p.clone()], &mut states, 0.1).unwrap();

        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(step));
        let vh = v / (1.0 - b2.powi(step));
        w -= 0.1 * mh / (vh.sqrt() + eps);
    }
    assert!(w.abs() < 0.1, "reference failed to converge: {w}");
    assert!((p.to_vec()[0] as f64 - w).abs() < 1e-3);
    assert!(p.to_vec()[0].abs() < 0.1);
}

#[test]
fn cosine_schedule_endpoints() {
    assert!((cosine_lr(1e-3, 1e-4, 0, 100) - 1e-3).abs() < 1e-9);
    assert!((cosine_lr(1e-3, 1e-4, 99, 100) - 1e-4).abs() < 1e-9);
    let mid = cosine_lr(1e-3, 1e-4, 50, 101);
    assert!((mid - 5.5e-4).abs() < 1e-6);
}

#[test]
fn identical_seeds_give_bitwise_identical_results() {
    let run = || {
        let mut rng = StdRng::seed_from_u64(42);
        let x = Tensor::param(&[4, 4], randn(&mut rng, 16)).unwrap();
        let w = Tensor::param(&[4, 4], randn(&mut rng, 16)).unwrap();
        let mut states = vec![AdamState::new(16, 1e-2), AdamState::new(16, 1e-2)];
        for _ in 0..5 {
            let y = x.matmul(&w).unwrap().gelu().softmax_lastdim().unwrap();
            let loss = y.mul(&y).unwrap().sum_all();
            loss.backward().unwrap();
            adam_step(&[x.clone(), w.clone()], &mut states, 1e-2).unwrap();
        }
        (x.to_vec(), w.to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn finite_inputs_stay_finite_through_ops() {
    let extremes = Tensor::constant(&[2, 3], vec![-100.0, 0.0, 100.0, 1e20, -1e20, 1e-20]).unwrap();
    assert!(extremes.softmax_lastdim().unwrap().is_finite());
    assert!(extremes.softplus().is_finite());
    assert!(extremes.sigmoid().is_finite());
    assert!(extremes.gelu().is_finite());
    let gain = Tensor::constant(&[3], vec![1.0; 3]).unwrap();
    let bias = Tensor::constant(&[3], vec![0.0; 3]).unwrap();
    assert!(extremes.layer_norm(&gain, &bias, 1e-5).unwrap().is_finite());
}

#[test]
fn dropout_zero_probability_is_identity() {
    let mut rng = StdRng::seed_from_u64(1);
    let x = Tensor::constant(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = x.dropout(0.0, &mut rng);
    assert_eq!(y.to_vec(), x.to_vec());
}
