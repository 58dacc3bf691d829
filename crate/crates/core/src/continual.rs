//! Experience-stream training: reservoir replay, ER / A-GEM / DER++, and
//! per-experience checkpoint snapshots.

use crate::ckpt::save_checkpoint;
use crate::error::{Error, Result};
use crate::heads::total_loss;
use crate::model::{AnyModel, StreamModel};
use crate::syndata::{Experience, Sample};
use crate::tensor::{cosine_lr, Adam, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClAlgo {
    Er,
    Agem,
    Derpp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algo: ClAlgo,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub epochs_per_experience: usize,
    pub base_lr: f32,
    pub floor_lr: f32,
    /// Replay stored concept masks alongside labels.
    pub concept_replay: bool,
    pub derpp_alpha: f32,
    pub derpp_beta: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algo: ClAlgo::Er,
            buffer_capacity: 500,
            batch_size: 16,
            epochs_per_experience: 4,
            base_lr: 1e-3,
            floor_lr: 1e-4,
            concept_replay: true,
            derpp_alpha: 0.5,
            derpp_beta: 0.5,
            seed: 0,
        }
    }
}

/// Stable per-purpose sub-seed derivation from a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut h = master ^ 0x9e3779b97f4a7c15;
    h ^= stream.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h.wrapping_mul(0xbf58476d1ce4e5b9)
}

/// Everything a reproducible run needs; serialized to `config.json` in
/// the run directory before training starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: String,
    pub model_kind: crate::model::ModelKind,
    pub mucil: crate::model::ModelConfig,
    pub cbm: crate::cbm::CbmConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunConfig {
    /// Derive model/training sub-seeds from the master seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.mucil.anchor_seed = derive_seed(seed, 0);
        self.mucil.init_seed = derive_seed(seed, 1);
        self.cbm.anchor_seed = derive_seed(seed, 0);
        self.cbm.init_seed = derive_seed(seed, 2);
        self.train.seed = derive_seed(seed, 3);
    }

    pub fn build_model(&self) -> Result<AnyModel> {
        Ok(match self.model_kind {
            crate::model::ModelKind::Mucil => {
                AnyModel::Mucil(crate::model::MucilModel::new(self.mucil.clone())?)
            }
            crate::model::ModelKind::Cbm => {
                AnyModel::Cbm(crate::cbm::CbmModel::new(self.cbm.clone())?)
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer_pretty(std::fs::File::create(path)?, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

/// One buffered sample. The mask is frozen at insertion-time registry
/// size and padded as inactive for concepts introduced later.
#[derive(Debug, Clone)]
pub struct BufferItem {
    pub image: crate::anchors::Image,
    pub class_id: usize,
    pub mask: Vec<bool>,
    /// Class-score vector at insertion (used by DER++ distillation).
    pub scores: Vec<f32>,
    pub experience: usize,
}

impl BufferItem {
    /// Mask padded with `false` up to the current registry size.
    pub fn padded_mask(&self, len: usize) -> Vec<bool> {
        let mut m = self.mask.clone();
        m.resize(len, false);
        m
    }
}

/// Reservoir-sampled replay memory.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub items: Vec<BufferItem>,
    pub seen_count: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            seen_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Standard reservoir sampling: after `n` insertions every stream
    /// element is retained with probability `capacity / n`.
    pub fn reservoir_insert<R: Rng>(&mut self, item: BufferItem, rng: &mut R) {
        self.seen_count += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = rng.gen_range(0..self.seen_count);
            if j < self.capacity {
                self.items[j] = item;
            }
        }
    }

    /// Up to `n` distinct items, uniformly without replacement.
    pub fn sample<'a, R: Rng>(&'a self, n: usize, rng: &mut R) -> Vec<&'a BufferItem> {
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx.into_iter().map(|i| &self.items[i]).collect()
    }
}

/// Averaged-GEM projection: when the candidate gradient conflicts with
/// the reference gradient, remove the conflicting component.
pub fn agem_project(g: &[f32], g_ref: &[f32]) -> Result<Vec<f32>> {
    if g.len() != g_ref.len() {
        return Err(Error::Dimension {
            op: "agem_project",
            lhs: vec![g.len()],
            rhs: vec![g_ref.len()],
        });
    }
    let dot: f64 = g.iter().zip(g_ref).map(|(&a, &b)| a as f64 * b as f64).sum();
    let ref_sq: f64 = g_ref.iter().map(|&b| (b as f64).powi(2)).sum();
    if ref_sq == 0.0 || dot >= 0.0 {
        return Ok(g.to_vec());
    }
    // f64 interior: the only residual left is the final f32 rounding.
    let scale = dot / ref_sq;
    Ok(g
        .iter()
        .zip(g_ref)
        .map(|(&a, &b)| (a as f64 - scale * b as f64) as f32)
        .collect())
}

/// Scalar loss components of one optimization step.
#[derive(Debug, Clone, Serialize)]
pub struct StepLosses {
    pub ce: f32,
    pub wbce: f32,
    pub grounding: f32,
    pub replay: f32,
    pub total: f32,
}

struct BatchItem<'a> {
    image: &'a crate::anchors::Image,
    label: usize,
    mask: Vec<bool>,
}

/// Mean CE/WBCE/grounding over a batch plus the combined objective and
/// per-sample score nodes.
fn batch_losses<M: StreamModel>(
    model: &M,
    items: &[BatchItem<'_>],
    use_masks: bool,
    training: bool,
    rng: &mut ChaCha20Rng,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Vec<Tensor>)> {
    let mut ces = Vec::with_capacity(items.len());
    let mut wbces = Vec::with_capacity(items.len());
    let mut grounds = Vec::with_capacity(items.len());
    let mut scores = Vec::with_capacity(items.len());
    for it in items {
        let bundle = model.forward_losses(it.image, it.label, &it.mask, training, rng)?;
        ces.push(bundle.ce);
        if use_masks {
            wbces.push(bundle.wbce);
        }
        grounds.push(bundle.grounding);
        scores.push(bundle.scores);
    }
    let inv = 1.0 / items.len() as f32;
    let ce = Tensor::add_n(&ces)?.scale(inv);
    let wbce = if use_masks {
        Tensor::add_n(&wbces)?.scale(inv)
    } else {
        Tensor::scalar(0.0)
    };
    let grounding = Tensor::add_n(&grounds)?.scale(inv);
    let total = total_loss(&ce, &wbce, &grounding, model.loss_config())?;
    Ok((total, ce, wbce, grounding, scores))
}

fn flat_grads(params: &[Tensor]) -> Vec<f32> {
    let mut out = Vec::new();
    for p in params {
        match p.grad() {
            Some(g) => out.extend_from_slice(&g),
            None => out.extend(std::iter::repeat(0.0).take(p.numel())),
        }
    }
    out
}

fn write_grads(params: &[Tensor], flat: &[f32]) {
    let mut off = 0;
    for p in params {
        let n = p.numel();
        p.zero_grad();
        p.add_to_grad(&flat[off..off + n]);
        off += n;
    }
}

fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

/// One optimization step of the chosen CL algorithm; applies exactly one
/// Adam update. Replay terms are skipped while the buffer is empty.
#[allow(clippy::too_many_arguments)]
pub fn train_step<M: StreamModel>(
    model: &M,
    batch: &[&Sample],
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
    params: &[Tensor],
    opt: &mut Adam,
    lr_now: f32,
    rng: &mut ChaCha20Rng,
) -> Result<StepLosses> {
    let n_concepts = model.registry().concept_count();
    let current: Vec<BatchItem> = batch
        .iter()
        .map(|s| BatchItem {
            image: &s.image,
            label: s.class_id,
            mask: s.mask(n_concepts),
        })
        .collect();

    let replay_items = |rng: &mut ChaCha20Rng| -> Vec<BatchItem<'_>> {
        buffer
            .sample(cfg.batch_size, rng)
            .into_iter()
            .map(|it| BatchItem {
                image: &it.image,
                label: it.class_id,
                mask: it.padded_mask(n_concepts),
            })
            .collect()
    };

    let losses = match cfg.algo {
        ClAlgo::Er | ClAlgo::Derpp => {
            let (mut total, ce, wbce, grounding, _) =
                batch_losses(model, &current, true, true, rng)?;
            let mut replay_val = 0.0f32;
            if !buffer.is_empty() {
                let ritems = replay_items(rng);
                let (rtotal, ..) = batch_losses(model, &ritems, cfg.concept_replay, true, rng)?;
                replay_val += rtotal.item();
                total = total.add(&rtotal)?;

                if cfg.algo == ClAlgo::Derpp {
                    // Second replay batch: logit distillation + label replay.
                    let picked = buffer.sample(cfg.batch_size, rng);
                    let mut mses = Vec::new();
                    let mut ces2 = Vec::new();
                    for it in &picked {
                        let item = BatchItem {
                            image: &it.image,
                            label: it.class_id,
                            mask: it.padded_mask(n_concepts),
                        };
                        let bundle =
                            model.forward_losses(item.image, item.label, &item.mask, true, rng)?;
                        // Distill only over classes known at storage time.
                        let k_old = it.scores.len().min(bundle.scores.numel());
                        let stored = Tensor::constant(&[1, k_old], it.scores[..k_old].to_vec())?;
                        let diff = bundle.scores.slice_cols(0, k_old)?.sub(&stored)?;
                        mses.push(diff.mul(&diff)?.mean_all());
                        ces2.push(bundle.ce);
                    }
                    let inv = 1.0 / picked.len() as f32;
                    let mse = Tensor::add_n(&mses)?.scale(inv * cfg.derpp_alpha);
                    let ce2 = Tensor::add_n(&ces2)?.scale(inv * cfg.derpp_beta);
                    replay_val += mse.item() + ce2.item();
                    total = total.add(&mse)?.add(&ce2)?;
                }
            }
            let out = StepLosses {
                ce: ce.item(),
                wbce: wbce.item(),
                grounding: grounding.item(),
                replay: replay_val,
                total: total.item(),
            };
            total.backward()?;
            out
        }
        ClAlgo::Agem => {
            let mut g_ref = None;
            if !buffer.is_empty() {
                let ritems = replay_items(rng);
                let (rtotal, ..) = batch_losses(model, &ritems, cfg.concept_replay, true, rng)?;
                rtotal.backward()?;
                g_ref = Some(flat_grads(params));
                zero_grads(params);
            }
            let (total, ce, wbce, grounding, _) =
                batch_losses(model, &current, true, true, rng)?;
            let out = StepLosses {
                ce: ce.item(),
                wbce: wbce.item(),
                grounding: grounding.item(),
                replay: 0.0,
                total: total.item(),
            };
            total.backward()?;
            if let Some(g_ref) = g_ref {
                let projected = agem_project(&flat_grads(params), &g_ref)?;
                write_grads(params, &projected);
            }
            out
        }
    };
    opt.step(params, lr_now)?;
    Ok(losses)
}

/// Fraction of samples whose argmax score matches the label.
pub fn evaluate_accuracy<M: StreamModel>(model: &M, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        let scores = model.score_values(&s.image)?;
        if crate::heads::predict(&scores) == s.class_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Outcome of a full stream run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    /// `accuracy_rows[t-1][i-1]` = accuracy on experience `i` after
    /// training through experience `t`.
    pub accuracy_rows: Vec<Vec<f64>>,
    pub param_counts: Vec<usize>,
}

/// Train across the experience stream, snapshotting a checkpoint and an
/// accuracy-matrix row after every experience.
pub fn run_stream(
    experiences: &[Experience],
    model: &mut AnyModel,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<RunSummary> {
    std::fs::create_dir_all(run_dir)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(run_dir.join("log.csv"))?);
    writeln!(log, "experience,step,ce,wbce,grounding,replay,total,lr")?;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut accuracy_rows: Vec<Vec<f64>> = Vec::new();
    let mut param_counts = Vec::new();

    for exp in experiences {
        model.begin_experience(exp)?;
        param_counts.push(model.param_count());
        let named = model.params();
        let params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
        let mut opt = Adam::new(&params, cfg.base_lr);

        let steps_per_epoch = exp.train.len().div_ceil(cfg.batch_size).max(1);
        let total_steps = steps_per_epoch * cfg.epochs_per_experience;
        let mut step = 0usize;
        for epoch in 0..cfg.epochs_per_experience {
            let mut order: Vec<usize> = (0..exp.train.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &exp.train[i]).collect();
                let lr = cosine_lr(cfg.base_lr, cfg.floor_lr, step, total_steps);
                let losses =
                    train_step(model, &batch, &buffer, cfg, &params, &mut opt, lr, &mut rng)?;
                writeln!(
                    log,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    exp.index, step, losses.ce, losses.wbce, losses.grounding, losses.replay,
                    losses.total, lr
                )?;
                step += 1;

                // Every training sample is offered to the reservoir once
                // per experience (first epoch), keeping stream-wide
                // inclusion uniform.
                if epoch == 0 {
                    let n_concepts = model.registry().concept_count();
                    for s in &batch {
                        let scores = if cfg.algo == ClAlgo::Derpp {
                            model.score_values(&s.image)?
                        } else {
                            Vec::new()
                        };
                        buffer.reservoir_insert(
                            BufferItem {
                                image: s.image.clone(),
                                class_id: s.class_id,
                                mask: s.mask(n_concepts),
                                scores,
                                experience: exp.index,
                            },
                            &mut rng,
                        );
                    }
                }
            }
        }

        let mut row = Vec::with_capacity(exp.index);
        for past in &experiences[..exp.index] {
            row.push(evaluate_accuracy(model, &past.val)?);
        }
        accuracy_rows.push(row);

        let ckpt_dir = run_dir.join(format!("ckpt_e{}", exp.index));
        if let Err(e) = save_checkpoint(&ckpt_dir, model, exp.index, &accuracy_rows) {
            let _ = std::fs::write(
                run_dir.join("PARTIAL"),
                format!("aborted at experience {}: {e}\n", exp.index),
            );
            return Err(e);
        }
    }
    log.flush()?;
    Ok(RunSummary {
        accuracy_rows,
        param_counts,
    })
}
