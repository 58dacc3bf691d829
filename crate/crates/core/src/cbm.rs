//! Incremental concept-bottleneck baseline (joint mode).
//!
//! A small patch-MLP backbone feeds a bottleneck with one logit per
//! registered concept and a linear classifier on top. Both output layers
//! grow when new concepts/classes arrive; existing weights are preserved
//! exactly, and new bottleneck rows never touch old class logits because
//! their classifier entries start at zero.

use crate::anchors::{Image, Registry};
use crate::error::{Error, Result};
use crate::heads::LossConfig;
use crate::model::{LossBundle, ModelKind, StreamModel};
use crate::syndata::Experience;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CbmConfig {
    pub feature_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Init scale for grown rows.
    pub grow_std: f32,
    pub lambda1: f32,
    pub anchor_seed: u64,
    pub init_seed: u64,
}

impl Default for CbmConfig {
    fn default() -> Self {
        CbmConfig {
            feature_dim: 64,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            grow_std: 0.02,
            lambda1: 5.0,
            anchor_seed: 0,
            init_seed: 0,
        }
    }
}

fn gauss_vec<R: Rng>(rng: &mut R, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen::<f64>();
            ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32 * std
        })
        .collect()
}

pub struct CbmModel {
    pub config: CbmConfig,
    pub registry: Registry,
    loss: LossConfig,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    bottleneck_w: Option<Tensor>,
    bottleneck_b: Option<Tensor>,
    classifier_w: Option<Tensor>,
    classifier_b: Option<Tensor>,
    grow_count: u64,
}

impl CbmModel {
    pub fn new(config: CbmConfig) -> Result<Self> {
        if config.patch_size == 0 || config.image_size % config.patch_size != 0 {
            return Err(Error::Validation(format!(
                "image {} not divisible by patch size {}",
                config.image_size, config.patch_size
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(config.init_seed);
        let d = config.feature_dim;
        let n_patches = (config.image_size / config.patch_size).pow(2);
        // Per-patch input carries a one-hot position code so pooled
        // features can still express where a pattern appeared.
        let in_dim = config.patch_size * config.patch_size * config.channels + n_patches;
        // The backbone has no normalization layers; fan-in scaling keeps
        // activations at unit order.
        let std1 = (2.0 / in_dim as f32).sqrt();
        let std2 = (2.0 / d as f32).sqrt();
        Ok(CbmModel {
            registry: Registry::new(d, config.anchor_seed),
            loss: LossConfig {
                lambda1: config.lambda1,
                lambda2: 0.0,
            },
            w1: Tensor::param(&[in_dim, d], gauss_vec(&mut rng, in_dim * d, std1))?,
            b1: Tensor::param(&[d], vec![0.0; d])?,
            w2: Tensor::param(&[d, d], gauss_vec(&mut rng, d * d, std2))?,
            b2: Tensor::param(&[d], vec![0.0; d])?,
            bottleneck_w: None,
            bottleneck_b: None,
            classifier_w: None,
            classifier_b: None,
            grow_count: 0,
            config,
        })
    }

    pub fn concept_width(&self) -> usize {
        self.bottleneck_b.as_ref().map_or(0, |b| b.numel())
    }

    pub fn class_width(&self) -> usize {
        self.classifier_b.as_ref().map_or(0, |b| b.numel())
    }

    /// Widen the bottleneck and classifier. Existing weights are kept
    /// bit-for-bit; new bottleneck rows start with zeroed classifier
    /// entries so logits of existing classes are unchanged.
    pub fn grow(&mut self, n_new_concepts: usize, n_new_classes: usize) -> Result<()> {
        if n_new_concepts == 0 && n_new_classes == 0 {
            return Ok(());
        }
        self.grow_count += 1;
        let mut rng =
            ChaCha20Rng::seed_from_u64(self.config.init_seed ^ (0xC0FFEE << 8) ^ self.grow_count);
        let d = self.config.feature_dim;
        let (c_old, k_old) = (self.concept_width(), self.class_width());
        let (c_new, k_new) = (c_old + n_new_concepts, k_old + n_new_classes);

        if n_new_concepts > 0 {
            let mut w = vec![0.0f32; d * c_new];
            if let Some(old) = &self.bottleneck_w {
                let ov = old.to_vec();
                for r in 0..d {
                    w[r * c_new..r * c_new + c_old].copy_from_slice(&ov[r * c_old..(r + 1) * c_old]);
                }
            }
            let fresh = gauss_vec(&mut rng, d * n_new_concepts, self.config.grow_std);
            for r in 0..d {
                w[r * c_new + c_old..(r + 1) * c_new]
                    .copy_from_slice(&fresh[r * n_new_concepts..(r + 1) * n_new_concepts]);
            }
            let mut b = vec![0.0f32; c_new];
            if let Some(old) = &self.bottleneck_b {
                b[..c_old].copy_from_slice(&old.to_vec());
            }
            self.bottleneck_w = Some(Tensor::param(&[d, c_new], w)?);
            self.bottleneck_b = Some(Tensor::param(&[c_new], b)?);
        }

        let c_now = self.concept_width();
        let mut w = vec![0.0f32; c_now * k_new];
        if let Some(old) = &self.classifier_w {
            let ov = old.to_vec();
            for r in 0..c_old {
                w[r * k_new..r * k_new + k_old].copy_from_slice(&ov[r * k_old..(r + 1) * k_old]);
            }
        }
        // New classifier columns see every concept; new rows keep old
        // class columns at zero.
        if n_new_classes > 0 {
            let fresh = gauss_vec(&mut rng, c_now * n_new_classes, self.config.grow_std);
            for r in 0..c_now {
                w[r * k_new + k_old..(r + 1) * k_new]
                    .copy_from_slice(&fresh[r * n_new_classes..(r + 1) * n_new_classes]);
            }
        }
        let mut b = vec![0.0f32; k_new];
        if let Some(old) = &self.classifier_b {
            b[..k_old].copy_from_slice(&old.to_vec());
        }
        self.classifier_w = Some(Tensor::param(&[c_now, k_new], w)?);
        self.classifier_b = Some(Tensor::param(&[k_new], b)?);
        Ok(())
    }

    fn feature(&self, image: &Image) -> Result<Tensor> {
        let p = self.config.patch_size;
        if image.h != self.config.image_size || image.w != self.config.image_size {
            return Err(Error::Validation("image does not match backbone geometry".into()));
        }
        let (gh, gw) = (image.h / p, image.w / p);
        let n = gh * gw;
        let in_dim = p * p * image.c + n;
        let mut patches = vec![0.0f32; n * in_dim];
        for gy in 0..gh {
            for gx in 0..gw {
                let base = (gy * gw + gx) * in_dim;
                let mut k = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..image.c {
                            patches[base + k] = image.pixel(gy * p + py, gx * p + px, ch);
                            k += 1;
                        }
                    }
                }
                patches[base + k + gy * gw + gx] = 1.0;
            }
        }
        let patch_mat = Tensor::constant(&[n, in_dim], patches)?;
        let h = patch_mat.matmul(&self.w1)?.add_row(&self.b1)?.gelu();
        let pool = Tensor::full(&[1, n], 1.0 / n as f32);
        pool.matmul(&h)?.matmul(&self.w2)?.add_row(&self.b2).map(|t| t.gelu())
    }

    /// Bottleneck and classifier logits, `[1,C]` and `[1,K]`.
    pub fn forward(&self, image: &Image) -> Result<(Tensor, Tensor)> {
        let (bw, bb, cw, cb) = match (
            &self.bottleneck_w,
            &self.bottleneck_b,
            &self.classifier_w,
            &self.classifier_b,
        ) {
            (Some(bw), Some(bb), Some(cw), Some(cb)) => (bw, bb, cw, cb),
            _ => return Err(Error::State("model has not been grown yet".into())),
        };
        let f = self.feature(image)?;
        let concepts = f.matmul(bw)?.add_row(bb)?;
        let classes = concepts.matmul(cw)?.add_row(cb)?;
        Ok((concepts, classes))
    }
}

impl StreamModel for CbmModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Cbm
    }

    fn registry(&self) -> &Registry {
        &self.registry
    }

    fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    fn begin_experience(&mut self, exp: &Experience) -> Result<()> {
        self.registry.extend_concepts(&exp.new_concept_names, exp.index)?;
        self.registry.extend_classes(&exp.new_class_names)?;
        self.grow(exp.new_concepts.len(), exp.new_classes.len())
    }

    fn forward_losses(
        &self,
        image: &Image,
        label: usize,
        mask: &[bool],
        _training: bool,
        _rng: &mut ChaCha20Rng,
    ) -> Result<LossBundle> {
        let (concepts, classes) = self.forward(image)?;
        let ce = classes.cross_entropy(&[label])?;
        let wbce = crate::heads::wbce_loss(&concepts, mask)?;
        Ok(LossBundle {
            ce,
            wbce,
            grounding: Tensor::scalar(0.0),
            scores: classes,
        })
    }

    fn score_values(&self, image: &Image) -> Result<Vec<f32>> {
        Ok(self.forward(image)?.1.to_vec())
    }

    fn concept_logit_values(&self, image: &Image) -> Result<Vec<f32>> {
        Ok(self.forward(image)?.0.to_vec())
    }

    fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("backbone.w1".into(), self.w1.clone()),
            ("backbone.b1".into(), self.b1.clone()),
            ("backbone.w2".into(), self.w2.clone()),
            ("backbone.b2".into(), self.b2.clone()),
        ];
        if let (Some(bw), Some(bb)) = (&self.bottleneck_w, &self.bottleneck_b) {
            out.push(("bottleneck.w".into(), bw.clone()));
            out.push(("bottleneck.b".into(), bb.clone()));
        }
        if let (Some(cw), Some(cb)) = (&self.classifier_w, &self.classifier_b) {
            out.push(("classifier.w".into(), cw.clone()));
            out.push(("classifier.b".into(), cb.clone()));
        }
        out
    }
}
