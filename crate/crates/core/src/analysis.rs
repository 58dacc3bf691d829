//! Post-hoc tooling: concept attention heatmaps, concept interventions,
//! and grounding/alignment diagnostics. Everything here is read-only over
//! a trained model.

use crate::anchors::Image;
use crate::error::{Error, Result};
use crate::heads::COSINE_EPS;
use crate::metrics::ProbeParams;
use crate::model::MucilModel;
use crate::tensor::{Adam, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Attention mass a concept token places on each image patch.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub concept: usize,
    pub layer: usize,
    pub head: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Patch-grid attention values; a subrow of a softmax row, so each
    /// value is in [0,1] and the grid sums to at most 1.
    pub grid: Vec<f32>,
    pub pixel_h: usize,
    pub pixel_w: usize,
    /// Bilinear upscale of `grid` to image resolution.
    pub pixels: Vec<f32>,
}

impl Heatmap {
    pub fn argmax_cell(&self) -> usize {
        crate::heads::predict(&self.grid)
    }

    /// Binary PGM (P5), max-normalized to 0..255.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let max = self.pixels.iter().cloned().fold(0.0f32, f32::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let mut out = format!("P5\n{} {}\n255\n", self.pixel_w, self.pixel_h).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8));
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn bilinear_upscale(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dh * dw];
    for y in 0..dh {
        for x in 0..dw {
            let fy = ((y as f32 + 0.5) * sh as f32 / dh as f32 - 0.5).clamp(0.0, sh as f32 - 1.0);
            let fx = ((x as f32 + 0.5) * sw as f32 / dw as f32 - 0.5).clamp(0.0, sw as f32 - 1.0);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
            let (wy, wx) = (fy - y0 as f32, fx - x0 as f32);
            out[y * dw + x] = src[y0 * sw + x0] * (1.0 - wy) * (1.0 - wx)
                + src[y0 * sw + x1] * (1.0 - wy) * wx
                + src[y1 * sw + x0] * wy * (1.0 - wx)
                + src[y1 * sw + x1] * wy * wx;
        }
    }
    out
}

/// Extract the post-softmax attention row of a concept token over the
/// image patches and upscale it to pixel resolution.
pub fn attention_heatmap(
    model: &MucilModel,
    image: &Image,
    concept: usize,
    layer: usize,
    head: usize,
) -> Result<Heatmap> {
    let n_concepts = model.registry.concept_count();
    if concept >= n_concepts {
        return Err(Error::Validation(format!(
            "concept {concept} not registered ({n_concepts} known)"
        )));
    }
    if layer >= model.config.encoder.num_layers || head >= model.config.encoder.num_heads {
        return Err(Error::Validation(format!(
            "layer {layer}/head {head} outside encoder geometry"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let fwd = model.forward(image, true, false, &mut rng)?;
    let record = &fwd.attention[layer];
    let matrix = &record.heads[head];
    let seq = record.seq_len;
    let n_patches = model.patch.num_patches();
    let row = n_patches + concept;
    let grid: Vec<f32> = matrix[row * seq..row * seq + n_patches].to_vec();
    let grid_side = model.config.image_size / model.config.patch_size;
    let pixels = bilinear_upscale(
        &grid,
        grid_side,
        grid_side,
        model.config.image_size,
        model.config.image_size,
    );
    Ok(Heatmap {
        concept,
        layer,
        head,
        grid_h: grid_side,
        grid_w: grid_side,
        grid,
        pixel_h: model.config.image_size,
        pixel_w: model.config.image_size,
        pixels,
    })
}

/// Softmax-regression probe with frozen weights, reusable for repeated
/// intervention queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedProbe {
    pub feature_count: usize,
    /// Column `k` scores `class_ids[k]`.
    pub class_ids: Vec<usize>,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl TrainedProbe {
    pub fn scores(&self, features: &[f32]) -> Vec<f32> {
        let k = self.class_ids.len();
        let mut out = self.b.clone();
        for (i, &f) in features.iter().enumerate().take(self.feature_count) {
            for (j, o) in out.iter_mut().enumerate() {
                *o += f * self.w[i * k + j];
            }
        }
        out
    }

    pub fn predict(&self, features: &[f32]) -> usize {
        self.class_ids[crate::heads::predict(&self.scores(features))]
    }
}

/// Train a probe on explicit feature rows (logits, sigmoid activations,
/// or ground-truth masks); labels keep their global ids.
pub fn train_probe(rows: &[(Vec<f32>, usize)], params: &ProbeParams) -> Result<TrainedProbe> {
    if rows.is_empty() {
        return Err(Error::Probe("no rows to train a probe on".into()));
    }
    let feature_count = rows[0].0.len();
    let mut class_ids: Vec<usize> = rows.iter().map(|r| r.1).collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    let k = class_ids.len();
    if k < 2 {
        return Err(Error::Probe("probe needs at least two classes".into()));
    }
    let mut data = Vec::with_capacity(rows.len() * feature_count);
    let mut labels = Vec::with_capacity(rows.len());
    for (f, y) in rows {
        data.extend_from_slice(f);
        labels.push(class_ids.binary_search(y).expect("collected above"));
    }
    let x = Tensor::constant(&[rows.len(), feature_count], data)?;
    let w = Tensor::param(&[feature_count, k], vec![0.0; feature_count * k])?;
    let b = Tensor::param(&[k], vec![0.0; k])?;
    let params_t = [w.clone(), b.clone()];
    let mut opt = Adam::new(&params_t, params.lr);
    for _ in 0..params.epochs {
        let loss = x.matmul(&w)?.add_row(&b)?.cross_entropy(&labels)?;
        loss.backward()?;
        opt.step(&params_t, params.lr)?;
    }
    Ok(TrainedProbe {
        feature_count,
        class_ids,
        w: w.to_vec(),
        b: b.to_vec(),
    })
}

/// Outcome of one intervention: predictions before and after overwriting
/// concept activations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub pre: usize,
    pub post: usize,
}

/// Overwrite sigmoid activations with corrected 0/1 values and re-read
/// the probe prediction.
pub fn intervene(
    probe: &TrainedProbe,
    activations: &[f32],
    corrections: &[(usize, bool)],
) -> Result<InterventionOutcome> {
    let pre = probe.predict(activations);
    let mut fixed = activations.to_vec();
    for &(concept, value) in corrections {
        if concept >= fixed.len() {
            return Err(Error::Validation(format!(
                "correction names unknown concept {concept}"
            )));
        }
        fixed[concept] = if value { 1.0 } else { 0.0 };
    }
    Ok(InterventionOutcome {
        pre,
        post: probe.predict(&fixed),
    })
}

fn cos64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + COSINE_EPS as f64)
}

/// Mean squared gap between anchor-pair cosines and the cosines of mean
/// multimodal embeddings.
pub fn alignment_error_from_means(anchors: &[Vec<f32>], means: &[Vec<f64>]) -> Result<f64> {
    let n = anchors.len();
    if n < 2 {
        return Err(Error::Validation(
            "alignment error needs at least two concepts".into(),
        ));
    }
    let anchors64: Vec<Vec<f64>> = anchors
        .iter()
        .map(|v| v.iter().map(|&x| x as f64).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..n {
        for b in (a + 1)..n {
            let gap = cos64(&anchors64[a], &anchors64[b]) - cos64(&means[a], &means[b]);
            total += gap * gap;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Alignment error over a sample set, averaging multimodal embeddings
/// per concept before comparing pairwise cosines with the anchors.
pub fn alignment_error(model: &MucilModel, images: &[&Image]) -> Result<f64> {
    let n = model.registry.concept_count();
    let d = model.registry.dim();
    if images.is_empty() {
        return Err(Error::Validation("alignment error needs samples".into()));
    }
    let mut means = vec![vec![0.0f64; d]; n];
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    for image in images {
        let fwd = model.forward(image, false, false, &mut rng)?;
        let c = fwd.concept_outputs.to_vec();
        for k in 0..n {
            for j in 0..d {
                means[k][j] += c[k * d + j] as f64 / images.len() as f64;
            }
        }
    }
    let anchors: Vec<Vec<f32>> = model.registry.concepts().iter().map(|c| c.vector.clone()).collect();
    alignment_error_from_means(&anchors, &means)
}

/// Mean cosine between each anchor and its recovered vector
/// `Wᵀc'_k + b`, across concepts and samples.
pub fn grounding_similarity(model: &MucilModel, images: &[&Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Validation("grounding similarity needs samples".into()));
    }
    let n = model.registry.concept_count();
    let d = model.registry.dim();
    let w = model.grounding.w.to_vec();
    let b = model.grounding.b.to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for image in images {
        let fwd = model.forward(image, false, false, &mut rng)?;
        let c = fwd.concept_outputs.to_vec();
        for k in 0..n {
            let mut rec = vec![0.0f64; d];
            for j in 0..d {
                let mut s = b[j] as f64;
                for i in 0..d {
                    s += c[k * d + i] as f64 * w[i * d + j] as f64;
                }
                rec[j] = s;
            }
            let anchor: Vec<f64> = model.registry.concepts()[k]
                .vector
                .iter()
                .map(|&v| v as f64)
                .collect();
            total += cos64(&anchor, &rec);
            count += 1;
        }
    }
    Ok(total / count as f64)
}
