//! Objective heads: concept grounding, shared concept neurons with
//! weighted BCE, and the parameter-free class-anchor classifier.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const COSINE_EPS: f32 = 1e-8;
const NORM_EPS: f32 = 1e-12;

/// Single affine map shared by all concepts: recovers anchor vectors from
/// concept outputs. Its shape never changes as concepts are added.
#[derive(Debug)]
pub struct GroundingHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl GroundingHead {
    pub fn new<R: Rng>(dim: usize, init_std: f32, rng: &mut R) -> Result<Self> {
        let data = (0..dim * dim)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen::<f64>();
                ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
                    * init_std
            })
            .collect();
        Ok(GroundingHead {
            w: Tensor::param(&[dim, dim], data)?,
            b: Tensor::param(&[dim], vec![0.0; dim])?,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("ground.w".into(), self.w.clone()),
            ("ground.b".into(), self.b.clone()),
        ]
    }
}

/// One shared scalar head applied independently per concept output.
#[derive(Debug)]
pub struct ConceptNeuronHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConceptNeuronHead {
    pub fn new<R: Rng>(dim: usize, init_std: f32, rng: &mut R) -> Result<Self> {
        let data = (0..dim)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen::<f64>();
                ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
                    * init_std
            })
            .collect();
        Ok(ConceptNeuronHead {
            w: Tensor::param(&[dim, 1], data)?,
            b: Tensor::param(&[1], vec![0.0])?,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("neuron.w".into(), self.w.clone()),
            ("neuron.b".into(), self.b.clone()),
        ]
    }
}

/// Loss weights of the combined objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f32,
    pub lambda2: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 5.0,
            lambda2: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean negative cosine between anchors and recovered concept vectors:
/// `-(1/n) Σ cos(c_k, Wᵀc'_k + b)`, in `[-1, 1]`.
pub fn grounding_loss(
    concept_outputs: &Tensor,
    anchors: &Tensor,
    head: &GroundingHead,
) -> Result<Tensor> {
    let (cs, an) = (concept_outputs.shape(), anchors.shape());
    if cs != an || cs[0] == 0 {
        return Err(Error::Validation(format!(
            "grounding needs matching non-empty outputs/anchors, got {cs:?} vs {an:?}"
        )));
    }
    let d = cs[1];
    let ones = Tensor::full(&[d, 1], 1.0);
    let recovered = concept_outputs.matmul(&head.w)?.add_row(&head.b)?;
    let dots = recovered.mul(anchors)?.matmul(&ones)?;
    let rnorm = recovered.mul(&recovered)?.matmul(&ones)?.sqrt_eps(NORM_EPS);
    let anorm = anchors.mul(anchors)?.matmul(&ones)?.sqrt_eps(NORM_EPS);
    let denom = rnorm.mul(&anorm)?.add_scalar(COSINE_EPS);
    Ok(dots.div(&denom)?.mean_all().neg())
}

/// Per-concept logits `[n,1]` from the shared neuron head.
pub fn concept_logits(concept_outputs: &Tensor, head: &ConceptNeuronHead) -> Result<Tensor> {
    concept_outputs.matmul(&head.w)?.add_row(&head.b)
}

/// Binary presence predictions: sigmoid(logit) thresholded at 0.5.
pub fn threshold_active(logits: &[f32]) -> Vec<bool> {
    logits.iter().map(|&z| z > 0.0).collect()
}

/// Weighted BCE over concept logits.
///
/// Active concepts are weighted by the inactive fraction and vice versa,
/// with fractions computed per sample; all-active and all-inactive masks
/// therefore contribute exactly zero.
pub fn wbce_loss(logits: &Tensor, active_mask: &[bool]) -> Result<Tensor> {
    let n = logits.numel();
    if active_mask.len() != n {
        return Err(Error::Validation(format!(
            "mask length {} does not match {} logits",
            active_mask.len(),
            n
        )));
    }
    let n_active = active_mask.iter().filter(|&&a| a).count();
    let n_inactive = n - n_active;
    let (w_active, w_inactive) = (n_inactive as f32 / n as f32, n_active as f32 / n as f32);
    let shape = logits.shape().to_vec();
    let weights: Vec<f32> = active_mask
        .iter()
        .map(|&a| if a { w_active } else { w_inactive })
        .collect();
    let signs: Vec<f32> = active_mask
        .iter()
        .map(|&a| if a { -1.0 } else { 1.0 })
        .collect();
    let weights = Tensor::constant(&shape, weights)?;
    let signs = Tensor::constant(&shape, signs)?;
    // BCE(σ(z), 1) = softplus(-z); BCE(σ(z), 0) = softplus(z).
    Ok(logits.mul(&signs)?.softplus().mul(&weights)?.sum_all())
}

/// Class logits `[1, n_classes]`: concept outputs summed, then projected
/// onto the fixed class anchors. No trainable parameters.
pub fn class_scores(concept_outputs: &Tensor, class_matrix_t: &Tensor) -> Result<Tensor> {
    let cs = concept_outputs.shape();
    if class_matrix_t.shape()[1] == 0 {
        return Err(Error::Validation("no class anchors registered".into()));
    }
    if cs[1] != class_matrix_t.shape()[0] {
        return Err(Error::Validation(format!(
            "concept dim {} does not match class anchor dim {}",
            cs[1],
            class_matrix_t.shape()[0]
        )));
    }
    let pool = Tensor::full(&[1, cs[0]], 1.0);
    pool.matmul(concept_outputs)?.matmul(class_matrix_t)
}

/// Argmax with ties broken toward the lowest class id.
pub fn predict(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `ce + λ1·wbce + λ2·grounding`, refusing non-finite components.
pub fn total_loss(ce: &Tensor, wbce: &Tensor, grounding: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    for (name, t) in [("cross-entropy", ce), ("wbce", wbce), ("grounding", grounding)] {
        let v = t.item();
        if !v.is_finite() {
            return Err(Error::TrainingAbort {
                component: match name {
                    "cross-entropy" => "cross-entropy",
                    "wbce" => "wbce",
                    _ => "grounding",
                },
                value: v,
            });
        }
    }
    ce.add(&wbce.scale(cfg.lambda1))?.add(&grounding.scale(cfg.lambda2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = StdRng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::constant(&[rows, cols], data).unwrap()
    }

    fn identity_head(d: usize) -> GroundingHead {
        let mut eye = vec![0.0f32; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        GroundingHead {
            w: Tensor::param(&[d, d], eye).unwrap(),
            b: Tensor::param(&[d], vec![0.0; d]).unwrap(),
        }
    }

    #[test]
    fn grounding_perfect_alignment_is_minus_one() {
        let anchors = rand_mat(4, 8, 0);
        let loss = grounding_loss(&anchors, &anchors, &identity_head(8)).unwrap();
        assert!((loss.item() + 1.0).abs() < 1e-5);
    }

    #[test]
    fn grounding_orthogonal_recovery_is_zero() {
        // Outputs on axis 0/1, anchors on axis 2/3: all dots vanish.
        let outputs = Tensor::constant(&[2, 4], vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        let anchors = Tensor::constant(&[2, 4], vec![0., 0., 1., 0., 0., 0., 0., 1.]).unwrap();
        let loss = grounding_loss(&outputs, &anchors, &identity_head(4)).unwrap();
        assert!(loss.item().abs() < 1e-6);
    }

    #[test]
    fn grounding_matches_f64_cosine_oracle() {
        let outputs = rand_mat(3, 8, 1);
        let anchors = rand_mat(3, 8, 2);
        let mut rng = StdRng::seed_from_u64(3);
        let head = GroundingHead::new(8, 0.3, &mut rng).unwrap();
        let loss = grounding_loss(&outputs, &anchors, &head).unwrap().item() as f64;

        let w = head.w.to_vec();
        let b = head.b.to_vec();
        let co = outputs.to_vec();
        let an = anchors.to_vec();
        let mut want = 0.0f64;
        for k in 0..3 {
            let mut rec = vec![0.0f64; 8];
            for j in 0..8 {
                let mut s = b[j] as f64;
                for i in 0..8 {
                    s += co[k * 8 + i] as f64 * w[i * 8 + j] as f64;
                }
                rec[j] = s;
            }
            let dot: f64 = rec.iter().zip(&an[k * 8..(k + 1) * 8]).map(|(&r, &a)| r * a as f64).sum();
            let rn: f64 = rec.iter().map(|v| v * v).sum::<f64>().sqrt();
            let anr: f64 = an[k * 8..(k + 1) * 8].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            want -= dot / (rn * anr + COSINE_EPS as f64) / 3.0;
        }
        assert!((loss - want).abs() < 1e-6, "{loss} vs {want}");
    }

    #[test]
    fn grounding_zero_norm_recovery_is_guarded() {
        let outputs = Tensor::constant(&[2, 4], vec![0.0; 8]).unwrap();
        let anchors = rand_mat(2, 4, 9);
        let head = GroundingHead {
            w: Tensor::param(&[4, 4], vec![0.0; 16]).unwrap(),
            b: Tensor::param(&[4], vec![0.0; 4]).unwrap(),
        };
        let loss = grounding_loss(&outputs, &anchors, &head).unwrap();
        assert!(loss.is_finite());
        assert!(loss.item().abs() < 1e-3);
    }

    #[test]
    fn neuron_head_zero_gives_half_sigmoid() {
        let outputs = rand_mat(5, 8, 4);
        let head = ConceptNeuronHead {
            w: Tensor::param(&[8, 1], vec![0.0; 8]).unwrap(),
            b: Tensor::param(&[1], vec![0.0]).unwrap(),
        };
        let z = concept_logits(&outputs, &head).unwrap();
        assert!(z.to_vec().iter().all(|&v| v == 0.0));
        assert!(z.sigmoid().to_vec().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn neuron_head_is_shared_across_concepts() {
        let row = rand_mat(1, 8, 5).to_vec();
        let mut dup = row.clone();
        dup.extend_from_slice(&row);
        let outputs = Tensor::constant(&[2, 8], dup).unwrap();
        let mut rng = StdRng::seed_from_u64(6);
        let head = ConceptNeuronHead::new(8, 0.5, &mut rng).unwrap();
        let z = concept_logits(&outputs, &head).unwrap().to_vec();
        assert_eq!(z[0], z[1]);
    }

    #[test]
    fn neuron_weight_gradient_matches_finite_differences() {
        let outputs = rand_mat(4, 8, 7);
        let mut rng = StdRng::seed_from_u64(8);
        let head = ConceptNeuronHead::new(8, 0.5, &mut rng).unwrap();
        let mask = [true, false, true, false];
        let loss = |h: &ConceptNeuronHead| {
            wbce_loss(&concept_logits(&outputs, h).unwrap(), &mask).unwrap()
        };
        loss(&head).backward().unwrap();
        let analytic = head.w.grad().unwrap();
        let base = head.w.to_vec();
        let h = 1e-3f32;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            head.w.set_data(&plus);
            let lp = loss(&head).item() as f64;
            let mut minus = base.clone();
            minus[i] -= h;
            head.w.set_data(&minus);
            let lm = loss(&head).item() as f64;
            head.w.set_data(&base);
            let numeric = ((lp - lm) / (2.0 * h as f64)) as f32;
            let denom = numeric.abs().max(analytic[i].abs()).max(1.0);
            assert!((numeric - analytic[i]).abs() / denom <= 1e-3);
        }
    }

    #[test]
    fn wbce_degenerate_masks_are_exactly_zero() {
        let z = rand_mat(4, 1, 10);
        assert_eq!(wbce_loss(&z, &[true; 4]).unwrap().item(), 0.0);
        assert_eq!(wbce_loss(&z, &[false; 4]).unwrap().item(), 0.0);
    }

    #[test]
    fn wbce_hand_case_four_thirds_ln2() {
        let z = Tensor::constant(&[3, 1], vec![0.0; 3]).unwrap();
        let loss = wbce_loss(&z, &[true, false, false]).unwrap().item() as f64;
        // (2/3)·BCE(0.5,1) + (1/3)·2·BCE(0.5,0) = (4/3)·ln 2
        let want = 4.0 / 3.0 * std::f64::consts::LN_2;
        assert!((loss - want).abs() < 1e-6, "{loss} vs {want}");
    }

    #[test]
    fn wbce_rejects_mask_length_mismatch() {
        let z = rand_mat(3, 1, 11);
        assert!(wbce_loss(&z, &[true, false]).is_err());
    }

    #[test]
    fn class_scores_zero_outputs_tie_break_lowest() {
        let outputs = Tensor::constant(&[3, 4], vec![0.0; 12]).unwrap();
        let anchors_t = rand_mat(4, 5, 12);
        let s = class_scores(&outputs, &anchors_t).unwrap();
        assert!(s.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(predict(&s.to_vec()), 0);
    }

    #[test]
    fn class_scores_one_hot_on_matching_anchor() {
        // Orthonormal class anchors along axes; single concept output = y2.
        let mut anchors_t = vec![0.0f32; 4 * 3];
        for k in 0..3 {
            anchors_t[k * 3 + k] = 1.0; // column k = e_k
        }
        let anchors_t = Tensor::constant(&[4, 3], anchors_t).unwrap();
        let output = Tensor::constant(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let s = class_scores(&output, &anchors_t).unwrap().to_vec();
        assert_eq!(s, vec![0.0, 0.0, 1.0]);
        assert_eq!(predict(&s), 2);
    }

    #[test]
    fn class_scores_match_brute_force_double_loop() {
        let outputs = rand_mat(5, 8, 13);
        let anchors_t = rand_mat(8, 4, 14);
        let s = class_scores(&outputs, &anchors_t).unwrap().to_vec();
        let co = outputs.to_vec();
        let at = anchors_t.to_vec();
        for k in 0..4 {
            let mut want = 0.0f64;
            for j in 0..5 {
                for i in 0..8 {
                    want += co[j * 8 + i] as f64 * at[i * 4 + k] as f64;
                }
            }
            assert!((s[k] as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn class_scores_invariant_under_concept_permutation() {
        let outputs = rand_mat(6, 8, 15);
        let anchors_t = rand_mat(8, 3, 16);
        let s1 = class_scores(&outputs, &anchors_t).unwrap().to_vec();
        let src = outputs.to_vec();
        let perm = [5usize, 2, 0, 4, 1, 3];
        let mut permuted = vec![0.0f32; 48];
        for (dst, &s) in perm.iter().enumerate() {
            permuted[dst * 8..(dst + 1) * 8].copy_from_slice(&src[s * 8..(s + 1) * 8]);
        }
        let s2 = class_scores(&Tensor::constant(&[6, 8], permuted).unwrap(), &anchors_t)
            .unwrap()
            .to_vec();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn total_loss_arithmetic_and_passthrough() {
        let ce = Tensor::scalar(1.0).scale(1.0);
        let wbce = Tensor::scalar(0.2).scale(1.0);
        let g = Tensor::scalar(-0.9).scale(1.0);
        let zero = LossConfig { lambda1: 0.0, lambda2: 0.0 };
        assert_eq!(total_loss(&ce, &wbce, &g, &zero).unwrap().item(), 1.0);
        let cfg = LossConfig::default();
        let total = total_loss(&ce, &wbce, &g, &cfg).unwrap().item();
        assert!((total as f64 + 7.0).abs() < 1e-6);
    }

    #[test]
    fn total_loss_rejects_nan_with_attribution() {
        let ce = Tensor::scalar(f32::NAN);
        let ok = Tensor::scalar(0.0);
        let err = total_loss(&ce, &ok, &ok, &LossConfig::default()).unwrap_err();
        match err {
            Error::TrainingAbort { component, .. } => assert_eq!(component, "cross-entropy"),
            other => panic!("unexpected error {other}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn grounding_loss_is_bounded(seed in 0u64..500) {
            let outputs = rand_mat(3, 6, seed);
            let anchors = rand_mat(3, 6, seed.wrapping_add(1));
            let mut rng = StdRng::seed_from_u64(seed);
            let head = GroundingHead::new(6, 0.5, &mut rng).unwrap();
            let v = grounding_loss(&outputs, &anchors, &head).unwrap().item();
            proptest::prop_assert!((-1.0 - 1e-5..=1.0 + 1e-5).contains(&v));
        }

        #[test]
        fn wbce_is_nonnegative_and_finite(seed in 0u64..500, n in 1usize..12) {
            let z = rand_mat(n, 1, seed);
            let mut rng = StdRng::seed_from_u64(seed);
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let v = wbce_loss(&z, &mask).unwrap().item();
            proptest::prop_assert!(v >= 0.0 && v.is_finite());
        }
    }
}
