//! Forgetting and concept-retention metrics over run checkpoints.
//!
//! Linear probes train a fresh softmax regression on frozen concept-neuron
//! logits; probe hyperparameters are fixed so that accuracy differences
//! between snapshots reflect the representations, not probe noise.

use crate::ckpt::{load_checkpoint, read_manifest};
use crate::error::{Error, Result};
use crate::model::StreamModel;
use crate::syndata::Experience;
use crate::tensor::{Adam, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Lower-triangular validation accuracy: `acc(i, t)` is accuracy on
/// experience `i` after training through `t` (both 1-based).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn acc(&self, i: usize, t: usize) -> f64 {
        self.rows[t - 1][i - 1]
    }

    pub fn t_final(&self) -> usize {
        self.rows.len()
    }
}

/// Final average accuracy and average forgetting after experience `t`.
pub fn compute_faa_af(matrix: &AccuracyMatrix, t: usize) -> Result<(f64, Option<f64>)> {
    if t == 0 || matrix.rows.len() < t || matrix.rows[t - 1].len() < t {
        return Err(Error::Validation(format!(
            "accuracy matrix not filled through experience {t}"
        )));
    }
    let faa = (1..=t).map(|i| matrix.acc(i, t)).sum::<f64>() / t as f64;
    if t == 1 {
        return Ok((faa, None));
    }
    let af = (1..t)
        .map(|i| matrix.acc(i, i) - matrix.acc(i, t))
        .sum::<f64>()
        / (t - 1) as f64;
    Ok((faa, Some(af)))
}

/// Probe features for one validation sample.
#[derive(Debug, Clone)]
pub struct FeatureRow {
    pub logits: Vec<f32>,
    pub class_id: usize,
}

/// Concept-neuron logits of every validation sample, per experience, under
/// one checkpoint.
#[derive(Debug, Clone)]
pub struct SnapshotFeatures {
    pub snapshot: usize,
    pub concept_count: usize,
    /// `per_experience[i-1]` holds rows for experience `i`'s val pool.
    pub per_experience: Vec<Vec<FeatureRow>>,
}

/// Fixed probe protocol.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeParams {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            epochs: 200,
            lr: 0.01,
            seed: 17,
            train_fraction: 0.8,
        }
    }
}

/// A probe request: snapshot, class set, concept prefix.
#[derive(Debug, Clone)]
pub struct ProbeSpec {
    pub snapshot: usize,
    pub class_ids: Vec<usize>,
    pub concept_prefix: usize,
    pub params: ProbeParams,
}

/// Train a softmax regression on (features, labels) and report held-out
/// accuracy. Deterministic: zero init, fixed split seed, full batches.
pub fn linear_probe(rows: &[(Vec<f32>, usize)], params: &ProbeParams) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Probe("no samples for probe".into()));
    }
    let feat_dim = rows[0].0.len();
    let mut labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Probe("probe needs at least two classes".into()));
    }
    let class_of = |raw: usize| labels.binary_search(&raw).expect("label seen above");

    // Stratified 80/20 split, shuffled per class under the probe seed.
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for &label in &labels {
        let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].1 == label).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(params.seed ^ (label as u64).wrapping_mul(0x9e37));
        idx.shuffle(&mut rng);
        let cut = ((idx.len() as f64) * params.train_fraction).round() as usize;
        let cut = cut.clamp(1, idx.len().saturating_sub(1).max(1));
        train_idx.extend_from_slice(&idx[..cut]);
        test_idx.extend_from_slice(&idx[cut..]);
    }
    if test_idx.is_empty() {
        return Err(Error::Probe("split left no held-out samples".into()));
    }

    let gather = |idx: &[usize]| -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * feat_dim);
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&rows[i].0);
            ys.push(class_of(rows[i].1));
        }
        (
            Tensor::constant(&[idx.len(), feat_dim], data).expect("consistent rows"),
            ys,
        )
    };
    let (x_train, y_train) = gather(&train_idx);
    let (x_test, y_test) = gather(&test_idx);

    let w = Tensor::param(&[feat_dim, labels.len()], vec![0.0; feat_dim * labels.len()])?;
    let b = Tensor::param(&[labels.len()], vec![0.0; labels.len()])?;
    let params_t = [w.clone(), b.clone()];
    let mut opt = Adam::new(&params_t, params.lr);
    for _ in 0..params.epochs {
        let logits = x_train.matmul(&w)?.add_row(&b)?;
        let loss = logits.cross_entropy(&y_train)?;
        loss.backward()?;
        opt.step(&params_t, params.lr)?;
    }

    let preds = x_test.matmul(&w)?.add_row(&b)?;
    let pv = preds.to_vec();
    let k = labels.len();
    let mut hits = 0usize;
    for (row, &want) in y_test.iter().enumerate() {
        let slice = &pv[row * k..(row + 1) * k];
        if crate::heads::predict(slice) == want {
            hits += 1;
        }
    }
    Ok(hits as f64 / y_test.len() as f64)
}

/// Everything needed to evaluate a finished run.
pub struct RunEval {
    pub run_dir: PathBuf,
    pub t_final: usize,
    pub accuracy: AccuracyMatrix,
    pub snapshots: Vec<SnapshotFeatures>,
    /// Concept id → experience that introduced it.
    pub concept_intro: Vec<usize>,
    /// Experience (1-based) → class ids introduced there.
    pub exp_new_classes: Vec<Vec<usize>>,
    pub probe: ProbeParams,
    la_cache: RefCell<BTreeMap<(usize, Vec<usize>, usize), f64>>,
}

impl RunEval {
    /// Load checkpoints `ckpt_e1..` from `run_dir` and extract concept
    /// logits for every (snapshot, validation sample) pair. Snapshots are
    /// processed with up to `threads` workers.
    pub fn load(run_dir: &Path, experiences: &[Experience], threads: usize) -> Result<Self> {
        let mut t_final = 0;
        while run_dir.join(format!("ckpt_e{}", t_final + 1)).exists() {
            t_final += 1;
        }
        if t_final == 0 {
            return Err(Error::Probe(format!(
                "no checkpoints under {}",
                run_dir.display()
            )));
        }
        if experiences.len() < t_final {
            return Err(Error::Validation(
                "dataset has fewer experiences than the run".into(),
            ));
        }
        let final_manifest = read_manifest(&run_dir.join(format!("ckpt_e{t_final}")))?;
        let accuracy = AccuracyMatrix {
            rows: final_manifest.accuracy_rows.clone(),
        };
        let concept_intro: Vec<usize> = final_manifest
            .registry
            .concepts
            .iter()
            .map(|(_, e)| *e)
            .collect();
        let exp_new_classes: Vec<Vec<usize>> = experiences[..t_final]
            .iter()
            .map(|e| e.new_classes.clone())
            .collect();

        let snapshots = extract_all_features(run_dir, experiences, t_final, threads)?;
        Ok(RunEval {
            run_dir: run_dir.to_path_buf(),
            t_final,
            accuracy,
            snapshots,
            concept_intro,
            exp_new_classes,
            probe: ProbeParams::default(),
            la_cache: RefCell::new(BTreeMap::new()),
        })
    }

    /// Concept count known at experience `t`.
    pub fn concepts_through(&self, t: usize) -> usize {
        self.concept_intro.iter().filter(|&&e| e <= t).count()
    }

    pub fn all_classes_through(&self, t: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.exp_new_classes[..t].iter().flatten().copied().collect();
        out.sort_unstable();
        out
    }

    fn experience_of_class(&self, class_id: usize) -> Option<usize> {
        self.exp_new_classes
            .iter()
            .position(|classes| classes.contains(&class_id))
            .map(|i| i + 1)
    }

    /// Probe rows: samples of `class_ids` (from their experiences' val
    /// pools) with logits restricted to the first `prefix` concepts.
    pub fn probe_rows(
        &self,
        snapshot: usize,
        class_ids: &[usize],
        prefix: usize,
    ) -> Result<Vec<(Vec<f32>, usize)>> {
        let snap = self
            .snapshots
            .get(snapshot - 1)
            .ok_or_else(|| Error::Probe(format!("missing snapshot {snapshot}")))?;
        if prefix > snap.concept_count {
            return Err(Error::Probe(format!(
                "prefix {prefix} exceeds snapshot concept count {}",
                snap.concept_count
            )));
        }
        let mut rows = Vec::new();
        for &class in class_ids {
            let exp = self.experience_of_class(class).ok_or_else(|| {
                Error::Probe(format!("class {class} not part of the evaluated stream"))
            })?;
            for row in &snap.per_experience[exp - 1] {
                if row.class_id == class {
                    rows.push((row.logits[..prefix].to_vec(), row.class_id));
                }
            }
        }
        Ok(rows)
    }

    /// Linear accuracy `LA(snapshot, class set, concept prefix)`, memoized.
    pub fn la(&self, snapshot: usize, class_ids: &[usize], prefix: usize) -> Result<f64> {
        let key = (snapshot, class_ids.to_vec(), prefix);
        if let Some(&v) = self.la_cache.borrow().get(&key) {
            return Ok(v);
        }
        let rows = self.probe_rows(snapshot, class_ids, prefix)?;
        let acc = linear_probe(&rows, &self.probe)?;
        self.la_cache.borrow_mut().insert(key, acc);
        Ok(acc)
    }

    pub fn la_spec(&self, spec: &ProbeSpec) -> Result<f64> {
        let rows = self.probe_rows(spec.snapshot, &spec.class_ids, spec.concept_prefix)?;
        linear_probe(&rows, &spec.params)
    }

    /// Concept-class relationship forgetting and its per-experience series.
    ///
    /// Each term compares how well experience `k`'s concepts separate the
    /// classes introduced at `k`, probed at snapshot `k` versus a later
    /// snapshot `t`; negative terms mean later training helped.
    pub fn ccrf(&self) -> Result<(f64, Vec<f64>)> {
        if self.t_final < 2 {
            return Err(Error::Validation(
                "CCRF is undefined for a single experience".into(),
            ));
        }
        let mut series = Vec::new();
        let mut total = 0.0;
        for t in 2..=self.t_final {
            let mut sum = 0.0;
            for k in 1..t {
                let classes = &self.exp_new_classes[k - 1];
                let prefix = self.concepts_through(k);
                let at_k = self.la(k, classes, prefix)?;
                let at_t = self.la(t, classes, prefix)?;
                sum += at_k - at_t;
            }
            let value = sum / (t - 1) as f64;
            series.push(value);
            total += value;
        }
        Ok((total / (self.t_final - 1) as f64, series))
    }

    /// Active concept ratios under the final snapshot.
    ///
    /// `acr[i-1][j-1]`: over experience-`j` validation images, predicted-
    /// active concepts introduced at `i` divided by predicted-active
    /// concepts among all concepts known at `i`.
    pub fn acr(&self) -> Result<AcrMatrix> {
        let snap = self
            .snapshots
            .last()
            .ok_or_else(|| Error::Probe("no final snapshot".into()))?;
        let t = self.t_final;
        let mut entries = vec![vec![None; t]; t];
        for i in 1..=t {
            let known = self.concepts_through(i);
            for j in 1..=t {
                let mut new_active = 0u64;
                let mut known_active = 0u64;
                for row in &snap.per_experience[j - 1] {
                    for (cid, &z) in row.logits.iter().enumerate().take(snap.concept_count) {
                        if z > 0.0 {
                            if self.concept_intro[cid] == i {
                                new_active += 1;
                            }
                            if cid < known {
                                known_active += 1;
                            }
                        }
                    }
                }
                if known_active > 0 {
                    entries[i - 1][j - 1] = Some(new_active as f64 / known_active as f64);
                }
            }
        }
        Ok(AcrMatrix { entries })
    }
}

/// ACR over all experience pairs; `None` marks zero-denominator entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcrMatrix {
    pub entries: Vec<Vec<Option<f64>>>,
}

impl AcrMatrix {
    pub fn mean_diagonal(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.entries.len())
            .filter_map(|i| self.entries[i][i])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let mut vals = Vec::new();
        for i in 0..self.entries.len() {
            for j in 0..self.entries[i].len() {
                if i != j {
                    if let Some(v) = self.entries[i][j] {
                        vals.push(v);
                    }
                }
            }
        }
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// One probe result entry in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaEntry {
    pub snapshot: usize,
    pub class_ids: Vec<usize>,
    pub concept_prefix: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub alignment_error: Option<f64>,
    pub grounding_similarity: Option<f64>,
}

/// The `report.json` payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub faa: Option<f64>,
    pub af: Option<f64>,
    pub la_table: Vec<LaEntry>,
    pub ccrf: Option<f64>,
    pub ccrf_series: Vec<f64>,
    pub acr_matrix: Vec<Vec<Option<f64>>>,
    pub alignment: AlignmentReport,
    pub probe: ProbeParams,
}

/// Which metric families to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSelection {
    pub faa_af: bool,
    pub la: bool,
    pub ccrf: bool,
    pub acr: bool,
    pub alignment: bool,
}

impl MetricSelection {
    pub fn all() -> Self {
        MetricSelection {
            faa_af: true,
            la: true,
            ccrf: true,
            acr: true,
            alignment: true,
        }
    }

    /// Parse a comma list like `faa,af,ccrf,acr`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut sel = MetricSelection {
            faa_af: false,
            la: false,
            ccrf: false,
            acr: false,
            alignment: false,
        };
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "faa" | "af" => sel.faa_af = true,
                "la" => sel.la = true,
                "ccrf" => sel.ccrf = true,
                "acr" => sel.acr = true,
                "alignment" => sel.alignment = true,
                "all" => sel = MetricSelection::all(),
                other => {
                    return Err(Error::Validation(format!("unknown metric '{other}'")));
                }
            }
        }
        Ok(sel)
    }
}

/// Evaluate a finished run directory into a [`MetricsReport`].
///
/// Deterministic: a second invocation with the same inputs produces a
/// byte-identical report.
pub fn evaluate_run(
    run_dir: &Path,
    experiences: &[Experience],
    selection: MetricSelection,
    threads: usize,
) -> Result<(MetricsReport, AccuracyMatrix)> {
    let eval = RunEval::load(run_dir, experiences, threads)?;
    let t = eval.t_final;

    let (faa, af) = if selection.faa_af {
        let (faa, af) = compute_faa_af(&eval.accuracy, t)?;
        (Some(faa), af)
    } else {
        (None, None)
    };

    let mut la_table = Vec::new();
    if selection.la {
        let classes = eval.all_classes_through(t);
        let prefix = eval.concepts_through(t);
        la_table.push(LaEntry {
            snapshot: t,
            class_ids: classes.clone(),
            concept_prefix: prefix,
            accuracy: eval.la(t, &classes, prefix)?,
        });
    }

    let (ccrf, ccrf_series) = if selection.ccrf && t >= 2 {
        let (v, series) = eval.ccrf()?;
        if selection.la {
            for snap_t in 2..=t {
                for k in 1..snap_t {
                    let classes = &eval.exp_new_classes[k - 1];
                    let prefix = eval.concepts_through(k);
                    for s in [k, snap_t] {
                        la_table.push(LaEntry {
                            snapshot: s,
                            class_ids: classes.clone(),
                            concept_prefix: prefix,
                            accuracy: eval.la(s, classes, prefix)?,
                        });
                    }
                }
            }
            la_table.sort_by(|a, b| {
                (a.snapshot, &a.class_ids, a.concept_prefix)
                    .cmp(&(b.snapshot, &b.class_ids, b.concept_prefix))
            });
            la_table.dedup_by(|a, b| {
                a.snapshot == b.snapshot
                    && a.class_ids == b.class_ids
                    && a.concept_prefix == b.concept_prefix
            });
        }
        (Some(v), series)
    } else {
        (None, Vec::new())
    };

    let acr_matrix = if selection.acr {
        eval.acr()?.entries
    } else {
        Vec::new()
    };

    let alignment = if selection.alignment {
        let (model, _) = load_checkpoint(&run_dir.join(format!("ckpt_e{t}")))?;
        match model.as_mucil() {
            Some(m) => {
                let images: Vec<&crate::anchors::Image> = experiences[..t]
                    .iter()
                    .flat_map(|e| e.val.iter().map(|s| &s.image))
                    .collect();
                AlignmentReport {
                    alignment_error: Some(crate::analysis::alignment_error(m, &images)?),
                    grounding_similarity: Some(crate::analysis::grounding_similarity(m, &images)?),
                }
            }
            None => AlignmentReport {
                alignment_error: None,
                grounding_similarity: None,
            },
        }
    } else {
        AlignmentReport {
            alignment_error: None,
            grounding_similarity: None,
        }
    };

    Ok((
        MetricsReport {
            faa,
            af,
            la_table,
            ccrf,
            ccrf_series,
            acr_matrix,
            alignment,
            probe: eval.probe,
        },
        eval.accuracy,
    ))
}

/// Write `report.json` plus the plotting CSVs next to it.
pub fn write_eval_outputs(
    report: &MetricsReport,
    accuracy: &AccuracyMatrix,
    out_json: &Path,
) -> Result<()> {
    if let Some(parent) = out_json.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let json = serde_json::to_vec_pretty(report)?;
    std::fs::write(out_json, &json)?;

    let dir = out_json.parent().unwrap_or_else(|| Path::new("."));
    let mut acc_csv = String::from("trained_through");
    let t = accuracy.rows.len();
    for i in 1..=t {
        acc_csv.push_str(&format!(",acc_exp{i}"));
    }
    acc_csv.push('\n');
    for (row_idx, row) in accuracy.rows.iter().enumerate() {
        acc_csv.push_str(&format!("{}", row_idx + 1));
        for i in 0..t {
            match row.get(i) {
                Some(v) => acc_csv.push_str(&format!(",{v:.6}")),
                None => acc_csv.push(','),
            }
        }
        acc_csv.push('\n');
    }
    std::fs::write(dir.join("accuracy_matrix.csv"), acc_csv)?;

    let mut acr_csv = String::from("concept_set");
    let n = report.acr_matrix.len();
    for j in 1..=n {
        acr_csv.push_str(&format!(",images_exp{j}"));
    }
    acr_csv.push('\n');
    for (i, row) in report.acr_matrix.iter().enumerate() {
        acr_csv.push_str(&format!("{}", i + 1));
        for cell in row {
            match cell {
                Some(v) => acr_csv.push_str(&format!(",{v:.6}")),
                None => acr_csv.push_str(",nan"),
            }
        }
        acr_csv.push('\n');
    }
    std::fs::write(dir.join("acr.csv"), acr_csv)?;
    Ok(())
}

/// Extract concept logits for every validation sample of experiences
/// `1..=t` under checkpoint `t`.
pub fn snapshot_features(
    run_dir: &Path,
    experiences: &[Experience],
    t: usize,
) -> Result<SnapshotFeatures> {
    extract_snapshot(run_dir, experiences, t)
}

fn extract_snapshot(
    run_dir: &Path,
    experiences: &[Experience],
    t: usize,
) -> Result<SnapshotFeatures> {
    let (model, manifest) = load_checkpoint(&run_dir.join(format!("ckpt_e{t}")))?;
    let mut per_experience = Vec::with_capacity(t);
    for exp in &experiences[..t] {
        let mut rows = Vec::with_capacity(exp.val.len());
        for sample in &exp.val {
            rows.push(FeatureRow {
                logits: model.concept_logit_values(&sample.image)?,
                class_id: sample.class_id,
            });
        }
        per_experience.push(rows);
    }
    Ok(SnapshotFeatures {
        snapshot: t,
        concept_count: manifest.registry.concepts.len(),
        per_experience,
    })
}

fn extract_all_features(
    run_dir: &Path,
    experiences: &[Experience],
    t_final: usize,
    threads: usize,
) -> Result<Vec<SnapshotFeatures>> {
    let threads = threads.max(1).min(t_final);
    if threads == 1 {
        return (1..=t_final)
            .map(|t| extract_snapshot(run_dir, experiences, t))
            .collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(1);
    let results: Vec<std::sync::Mutex<Option<Result<SnapshotFeatures>>>> =
        (0..t_final).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let t = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if t > t_final {
                    break;
                }
                let out = extract_snapshot(run_dir, experiences, t);
                *results[t - 1].lock().expect("no poisoned workers") = Some(out);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("worker finished").expect("slot filled"))
        .collect()
}
