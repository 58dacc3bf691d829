//! Multimodal encoder: pre-norm transformer blocks over the concatenated
//! patch + concept token sequence.
//!
//! Concept tokens carry no positional encoding, so concept outputs are
//! equivariant under concept permutations and the parameter count never
//! depends on how many concepts or classes are registered.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Full,
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_mult: usize,
    pub attention_kind: AttentionKind,
    pub dropout: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_mult: 4,
            attention_kind: AttentionKind::Full,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

/// Which token indices are patches vs concepts after [`assemble_sequence`].
#[derive(Debug, Clone)]
pub struct SegmentMap {
    pub num_patches: usize,
    pub num_concepts: usize,
}

impl SegmentMap {
    pub fn len(&self) -> usize {
        self.num_patches + self.num_concepts
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concept_indices(&self) -> std::ops::Range<usize> {
        self.num_patches..self.num_patches + self.num_concepts
    }
}

/// Patches followed by concept anchors, plus the segment bookkeeping.
pub fn assemble_sequence(patches: &Tensor, concept_anchors: &Tensor) -> Result<(Tensor, SegmentMap)> {
    let (ps, cs) = (patches.shape(), concept_anchors.shape());
    if ps.len() != 2 || cs.len() != 2 || ps[1] != cs[1] {
        return Err(Error::Validation(format!(
            "token dimension mismatch: patches {ps:?} vs concepts {cs:?}"
        )));
    }
    if ps[0] == 0 || cs[0] == 0 {
        return Err(Error::Validation("both segments must be non-empty".into()));
    }
    let tokens = Tensor::concat_rows(&[patches.clone(), concept_anchors.clone()])?;
    Ok((
        tokens,
        SegmentMap {
            num_patches: ps[0],
            num_concepts: cs[0],
        },
    ))
}

/// Post-softmax attention rows for one layer, indexed by head.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub seq_len: usize,
    /// `heads[h]` is a flat `[seq_len, seq_len]` matrix.
    pub heads: Vec<Vec<f32>>,
}

/// Encoder output split back into its segments.
#[derive(Debug)]
pub struct MultimodalOutput {
    pub patch_outputs: Tensor,
    pub concept_outputs: Tensor,
    /// One record per layer; populated only for full attention on request.
    pub attention: Vec<AttentionRecord>,
}

struct EncoderLayer {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    w_up: Tensor,
    b_up: Tensor,
    w_down: Tensor,
    b_down: Tensor,
}

impl EncoderLayer {
    fn new<R: Rng>(d: usize, hidden: usize, init_std: f32, rng: &mut R) -> Self {
        let mat = |rng: &mut R, r: usize, c: usize| {
            let data = (0..r * c)
                .map(|_| {
                    // Box-Muller, matching the anchors module.
                    let u1: f64 = 1.0 - rng.gen::<f64>();
                    let u2: f64 = rng.gen::<f64>();
                    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
                        * init_std
                })
                .collect();
            Tensor::param(&[r, c], data).expect("shape is positive")
        };
        let zeros = |n: usize| Tensor::param(&[n], vec![0.0; n]).expect("shape is positive");
        let ones = |n: usize| Tensor::param(&[n], vec![1.0; n]).expect("shape is positive");
        EncoderLayer {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            wq: mat(rng, d, d),
            bq: zeros(d),
            wk: mat(rng, d, d),
            bk: zeros(d),
            wv: mat(rng, d, d),
            bv: zeros(d),
            wo: mat(rng, d, d),
            bo: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w_up: mat(rng, d, hidden),
            b_up: zeros(hidden),
            w_down: mat(rng, hidden, d),
            b_down: zeros(d),
        }
    }

    fn params(&self, layer: usize) -> Vec<(String, Tensor)> {
        let p = |suffix: &str, t: &Tensor| (format!("enc.l{layer}.{suffix}"), t.clone());
        vec![
            p("ln1.gain", &self.ln1_gain),
            p("ln1.bias", &self.ln1_bias),
            p("wq", &self.wq),
            p("bq", &self.bq),
            p("wk", &self.wk),
            p("bk", &self.bk),
            p("wv", &self.wv),
            p("bv", &self.bv),
            p("wo", &self.wo),
            p("bo", &self.bo),
            p("ln2.gain", &self.ln2_gain),
            p("ln2.bias", &self.ln2_bias),
            p("mlp.up.w", &self.w_up),
            p("mlp.up.b", &self.b_up),
            p("mlp.down.w", &self.w_down),
            p("mlp.down.b", &self.b_down),
        ]
    }
}

/// Stack of pre-norm transformer blocks with a closing layer norm.
pub struct Encoder {
    pub config: EncoderConfig,
    layers: Vec<EncoderLayer>,
    final_gain: Tensor,
    final_bias: Tensor,
}

const LN_EPS: f32 = 1e-5;
const LINEAR_ATTN_EPS: f32 = 1e-6;

impl Encoder {
    pub fn new<R: Rng>(config: EncoderConfig, init_std: f32, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let hidden = config.dim * config.mlp_mult;
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::new(config.dim, hidden, init_std, rng))
            .collect();
        Ok(Encoder {
            final_gain: Tensor::param(&[config.dim], vec![1.0; config.dim])?,
            final_bias: Tensor::param(&[config.dim], vec![0.0; config.dim])?,
            config,
            layers,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.params(i));
        }
        out.push(("enc.final.gain".into(), self.final_gain.clone()));
        out.push(("enc.final.bias".into(), self.final_bias.clone()));
        out
    }

    /// Trainable scalars in the encoder alone.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Run the stack over an assembled sequence.
    ///
    /// `record_attention` stores post-softmax matrices (full attention
    /// only); the linear variant rejects the request.
    pub fn encode<R: Rng>(
        &self,
        tokens: &Tensor,
        segment: &SegmentMap,
        record_attention: bool,
        training: bool,
        rng: &mut R,
    ) -> Result<MultimodalOutput> {
        if tokens.shape()[0] < 2 {
            return Err(Error::Validation(format!(
                "encoder expects at least 2 tokens, got {}",
                tokens.shape()[0]
            )));
        }
        if tokens.shape()[1] != self.config.dim {
            return Err(Error::Config(format!(
                "token dim {} does not match encoder dim {}",
                tokens.shape()[1],
                self.config.dim
            )));
        }
        if record_attention && self.config.attention_kind == AttentionKind::Linear {
            return Err(Error::Unsupported(
                "attention records are undefined for linear attention".into(),
            ));
        }
        let seq = tokens.shape()[0];
        let mut x = tokens.clone();
        let mut records = Vec::new();
        for layer in &self.layers {
            let normed = x.layer_norm(&layer.ln1_gain, &layer.ln1_bias, LN_EPS)?;
            let q = normed.matmul(&layer.wq)?.add_row(&layer.bq)?;
            let k = normed.matmul(&layer.wk)?.add_row(&layer.bk)?;
            let v = normed.matmul(&layer.wv)?.add_row(&layer.bv)?;

            let dh = self.config.head_dim();
            let mut head_outs = Vec::with_capacity(self.config.num_heads);
            let mut head_records = Vec::new();
            for h in 0..self.config.num_heads {
                let qh = q.slice_cols(h * dh, dh)?;
                let kh = k.slice_cols(h * dh, dh)?;
                let vh = v.slice_cols(h * dh, dh)?;
                let out = match self.config.attention_kind {
                    AttentionKind::Full => {
                        let scores = qh
                            .matmul(&kh.transpose()?)?
                            .scale(1.0 / (dh as f32).sqrt());
                        let probs = scores.softmax_lastdim()?;
                        if record_attention {
                            head_records.push(probs.to_vec());
                        }
                        probs.matmul(&vh)?
                    }
                    AttentionKind::Linear => {
                        let fq = qh.elu_plus_one();
                        let fk = kh.elu_plus_one();
                        let kv = fk.transpose()?.matmul(&vh)?;
                        let numer = fq.matmul(&kv)?;
                        let ksum = fk.transpose()?.matmul(&Tensor::full(&[seq, 1], 1.0))?;
                        let denom = fq.matmul(&ksum)?.add_scalar(LINEAR_ATTN_EPS);
                        let inv = Tensor::full(&[seq, 1], 1.0).div(&denom)?;
                        numer.scale_rows(&inv)?
                    }
                };
                head_outs.push(out);
            }
            if record_attention {
                records.push(AttentionRecord {
                    seq_len: seq,
                    heads: head_records,
                });
            }
            let merged = Tensor::concat_cols(&head_outs)?;
            let mut attn_out = merged.matmul(&layer.wo)?.add_row(&layer.bo)?;
            if training && self.config.dropout > 0.0 {
                attn_out = attn_out.dropout(self.config.dropout, rng);
            }
            x = x.add(&attn_out)?;

            let normed2 = x.layer_norm(&layer.ln2_gain, &layer.ln2_bias, LN_EPS)?;
            let up = normed2.matmul(&layer.w_up)?.add_row(&layer.b_up)?.gelu();
            let mut mlp_out = up.matmul(&layer.w_down)?.add_row(&layer.b_down)?;
            if training && self.config.dropout > 0.0 {
                mlp_out = mlp_out.dropout(self.config.dropout, rng);
            }
            x = x.add(&mlp_out)?;
        }
        let x = x.layer_norm(&self.final_gain, &self.final_bias, LN_EPS)?;
        Ok(MultimodalOutput {
            patch_outputs: x.slice_rows(0, segment.num_patches)?,
            concept_outputs: x.slice_rows(segment.num_patches, segment.num_concepts)?,
            attention: records,
        })
    }
}
