//! Shared acceptance-test support: an independent f64 re-implementation
//! of the full forward computation, used as the finite-difference oracle
//! for the gradient suite, plus run fixtures for the stream criteria.

use std::collections::BTreeMap;

pub type Params64 = BTreeMap<String, Vec<f64>>;

#[derive(Clone)]
pub struct ShadowConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_mult: usize,
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
}

pub struct ShadowInputs {
    pub image: Vec<f64>,
    pub concept_anchors: Vec<Vec<f64>>,
    pub class_anchors: Vec<Vec<f64>>,
    pub label: usize,
    pub mask: Vec<bool>,
}

pub struct ShadowLosses {
    pub ce: f64,
    pub wbce: f64,
    pub grounding: f64,
    pub total: f64,
}

// Constants mirrored from the implementation.
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const COSINE_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.797_884_6_f32 as f64;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn layer_norm(x: &mut [f64], rows: usize, d: usize, gain: &[f64], bias: &[f64]) {
    for r in 0..rows {
        let row = &mut x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            row[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
    }
}

fn add_row(x: &mut [f64], rows: usize, d: usize, bias: &[f64]) {
    for r in 0..rows {
        for j in 0..d {
            x[r * d + j] += bias[j];
        }
    }
}

/// Full-attention forward pass and the three loss terms, entirely in f64.
pub fn shadow_losses(cfg: &ShadowConfig, params: &Params64, inputs: &ShadowInputs) -> ShadowLosses {
    let d = cfg.dim;
    let p = cfg.patch_size;
    let (gh, gw) = (cfg.image_h / p, cfg.image_w / p);
    let n_patches = gh * gw;
    let in_dim = p * p * cfg.channels;
    let get = |name: &str| -> &Vec<f64> {
        params
            .get(name)
            .unwrap_or_else(|| panic!("shadow missing param {name}"))
    };

    // Patch extraction in raster order, channels innermost.
    let mut patches = vec![0.0; n_patches * in_dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let base = (gy * gw + gx) * in_dim;
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..cfg.channels {
                        let idx = ((gy * p + py) * cfg.image_w + (gx * p + px)) * cfg.channels + ch;
                        patches[base + k] = inputs.image[idx];
                        k += 1;
                    }
                }
            }
        }
    }
    let proj = matmul(&patches, get("patch.projection"), n_patches, in_dim, d);
    let n_concepts = inputs.concept_anchors.len();
    let seq = n_patches + n_concepts;
    let mut x = vec![0.0; seq * d];
    let bias = get("patch.bias");
    let pos = get("patch.positional");
    for r in 0..n_patches {
        for j in 0..d {
            x[r * d + j] = proj[r * d + j] + bias[j] + pos[r * d + j];
        }
    }
    for (r, anchor) in inputs.concept_anchors.iter().enumerate() {
        x[(n_patches + r) * d..(n_patches + r + 1) * d].copy_from_slice(anchor);
    }

    let dh = d / cfg.heads;
    for layer in 0..cfg.layers {
        let name = |s: &str| format!("enc.l{layer}.{s}");
        let mut h = x.clone();
        layer_norm(&mut h, seq, d, get(&name("ln1.gain")), get(&name("ln1.bias")));
        let mut q = matmul(&h, get(&name("wq")), seq, d, d);
        add_row(&mut q, seq, d, get(&name("bq")));
        let mut k = matmul(&h, get(&name("wk")), seq, d, d);
        add_row(&mut k, seq, d, get(&name("bk")));
        let mut v = matmul(&h, get(&name("wv")), seq, d, d);
        add_row(&mut v, seq, d, get(&name("bv")));

        let mut merged = vec![0.0; seq * d];
        for head in 0..cfg.heads {
            let off = head * dh;
            for i in 0..seq {
                // Row-stable softmax over scores q_i · k_j / sqrt(dh).
                let mut scores = vec![0.0; seq];
                for j in 0..seq {
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += q[i * d + off + t] * k[j * d + off + t];
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for j in 0..seq {
                    let a = (scores[j] - max).exp() / denom;
                    for t in 0..dh {
                        merged[i * d + off + t] += a * v[j * d + off + t];
                    }
                }
            }
        }
        let mut attn_out = matmul(&merged, get(&name("wo")), seq, d, d);
        add_row(&mut attn_out, seq, d, get(&name("bo")));
        for i in 0..seq * d {
            x[i] += attn_out[i];
        }

        let mut h2 = x.clone();
        layer_norm(&mut h2, seq, d, get(&name("ln2.gain")), get(&name("ln2.bias")));
        let hidden = d * cfg.mlp_mult;
        let mut up = matmul(&h2, get(&name("mlp.up.w")), seq, d, hidden);
        add_row(&mut up, seq, hidden, get(&name("mlp.up.b")));
        for v in up.iter_mut() {
            *v = gelu(*v);
        }
        let mut down = matmul(&up, get(&name("mlp.down.w")), seq, hidden, d);
        add_row(&mut down, seq, d, get(&name("mlp.down.b")));
        for i in 0..seq * d {
            x[i] += down[i];
        }
    }
    layer_norm(&mut x, seq, d, get("enc.final.gain"), get("enc.final.bias"));
    let concepts = &x[n_patches * d..];

    // Parameter-free class scores: s_k = Σ_j c'_j · y_k.
    let n_classes = inputs.class_anchors.len();
    let mut pooled = vec![0.0; d];
    for r in 0..n_concepts {
        for j in 0..d {
            pooled[j] += concepts[r * d + j];
        }
    }
    let mut scores = vec![0.0; n_classes];
    for (kk, anchor) in inputs.class_anchors.iter().enumerate() {
        scores[kk] = pooled.iter().zip(anchor).map(|(a, b)| a * b).sum();
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let ce = lse - scores[inputs.label];

    // Concept neurons + weighted BCE.
    let nw = get("neuron.w");
    let nb = get("neuron.b")[0];
    let n_active = inputs.mask.iter().filter(|&&a| a).count();
    let n_inactive = n_concepts - n_active;
    let (w_act, w_inact) = (
        n_inactive as f64 / n_concepts as f64,
        n_active as f64 / n_concepts as f64,
    );
    let mut wbce = 0.0;
    for r in 0..n_concepts {
        let z: f64 = (0..d).map(|j| concepts[r * d + j] * nw[j]).sum::<f64>() + nb;
        if inputs.mask[r] {
            wbce += w_act * softplus(-z);
        } else {
            wbce += w_inact * softplus(z);
        }
    }

    // Grounding: mean negative cosine of anchors vs recovered vectors.
    let gw = get("ground.w");
    let gb = get("ground.b");
    let mut grounding = 0.0;
    for r in 0..n_concepts {
        let mut rec = vec![0.0; d];
        for j in 0..d {
            let mut s = gb[j];
            for i in 0..d {
                s += concepts[r * d + i] * gw[i * d + j];
            }
            rec[j] = s;
        }
        let anchor = &inputs.concept_anchors[r];
        let dot: f64 = rec.iter().zip(anchor).map(|(a, b)| a * b).sum();
        let rn = (rec.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        let an = (anchor.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        grounding -= dot / (rn * an + COSINE_EPS) / n_concepts as f64;
    }

    let total = ce + 5.0 * wbce + 10.0 * grounding;
    ShadowLosses {
        ce,
        wbce,
        grounding,
        total,
    }
}
