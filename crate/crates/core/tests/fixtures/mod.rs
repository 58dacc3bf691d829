//! Shared heavy fixtures: trained stream runs (and their metric numbers)
//! reused by several acceptance criteria. Built once per test binary.

use mucil_core::cbm::CbmConfig;
use mucil_core::continual::{run_stream, ClAlgo, RunConfig, TrainConfig};
use mucil_core::encoder::{AttentionKind, EncoderConfig};
use mucil_core::heads::LossConfig;
use mucil_core::metrics::{
    compute_faa_af, linear_probe, snapshot_features, AccuracyMatrix, ProbeParams, RunEval,
};
use mucil_core::model::{ModelConfig, ModelKind};
use mucil_core::syndata::{
    generate_schema, split_experiences, write_dataset, Experience, Schema, WebSchema,
};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

pub const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    MucilEr,
    CbmEr,
    MucilLinear,
    MucilNoCr,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [
            Variant::MucilEr,
            Variant::CbmEr,
            Variant::MucilLinear,
            Variant::MucilNoCr,
        ]
    }

    fn dir_name(&self, seed: u64) -> String {
        let tag = match self {
            Variant::MucilEr => "mucil_er",
            Variant::CbmEr => "cbm_er",
            Variant::MucilLinear => "mucil_linear",
            Variant::MucilNoCr => "mucil_nocr",
        };
        format!("run_{tag}_s{seed}")
    }
}

pub struct RunArtifacts {
    pub dir: PathBuf,
    pub faa: f64,
    pub af: f64,
    /// Present for variants whose criteria need probe metrics.
    pub ccrf: Option<f64>,
    pub acr_diag: Option<f64>,
    pub acr_off: Option<f64>,
    /// LA(T, all classes, all concepts) on the final snapshot.
    pub headline_la: Option<f64>,
}

pub struct Fixtures {
    /// Keeps the tree alive for the whole test binary.
    _root: tempfile::TempDir,
    pub schema: Schema,
    pub experiences: Arc<Vec<Experience>>,
    runs: Vec<(Variant, u64, RunArtifacts)>,
}

impl Fixtures {
    pub fn run(&self, variant: Variant, seed: u64) -> &RunArtifacts {
        &self
            .runs
            .iter()
            .find(|(v, s, _)| *v == variant && *s == seed)
            .unwrap_or_else(|| panic!("missing fixture run {variant:?} seed {seed}"))
            .2
    }

    pub fn mean<F: Fn(&RunArtifacts) -> f64>(&self, variant: Variant, f: F) -> f64 {
        SEEDS.iter().map(|&s| f(self.run(variant, s))).sum::<f64>() / SEEDS.len() as f64
    }
}

pub fn eval_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("MUCIL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(available),
        _ => available,
    }
}

/// Stream-training hyperparameters shared by every fixture run.
pub fn stream_train_config(algo: ClAlgo, concept_replay: bool) -> TrainConfig {
    TrainConfig {
        algo,
        buffer_capacity: 200,
        batch_size: 16,
        epochs_per_experience: 3,
        base_lr: 1e-3,
        floor_lr: 1e-4,
        concept_replay,
        derpp_alpha: 0.5,
        derpp_beta: 0.5,
        seed: 0,
    }
}

pub fn run_config(data_dir: &str, variant: Variant, seed: u64) -> RunConfig {
    let (kind, attention, algo, cr) = match variant {
        Variant::MucilEr => (ModelKind::Mucil, AttentionKind::Full, ClAlgo::Er, true),
        Variant::CbmEr => (ModelKind::Cbm, AttentionKind::Full, ClAlgo::Er, true),
        Variant::MucilLinear => (ModelKind::Mucil, AttentionKind::Linear, ClAlgo::Er, true),
        Variant::MucilNoCr => (ModelKind::Mucil, AttentionKind::Full, ClAlgo::Er, false),
    };
    let mut cfg = RunConfig {
        data_dir: data_dir.to_string(),
        model_kind: kind,
        mucil: ModelConfig {
            encoder: EncoderConfig {
                dim: 64,
                num_layers: 2,
                num_heads: 4,
                mlp_mult: 4,
                attention_kind: attention,
                dropout: 0.0,
            },
            loss: LossConfig::default(),
            patch_size: 4,
            image_size: 32,
            channels: 3,
            init_std: 0.02,
            anchor_seed: 0,
            init_seed: 0,
        },
        cbm: CbmConfig::default(),
        train: stream_train_config(algo, cr),
        seed,
    };
    cfg.apply_seed(seed);
    cfg
}

/// LA(T, all classes, all concepts): probe over every final-snapshot
/// validation row.
pub fn headline_la(run_dir: &std::path::Path, experiences: &[Experience]) -> f64 {
    let t = experiences.len();
    let snap = snapshot_features(run_dir, experiences, t).expect("final snapshot");
    let rows: Vec<(Vec<f32>, usize)> = snap
        .per_experience
        .iter()
        .flatten()
        .map(|r| (r.logits.clone(), r.class_id))
        .collect();
    linear_probe(&rows, &ProbeParams::default()).expect("headline probe")
}

fn build_one(
    root: &std::path::Path,
    data_dir: &str,
    experiences: &Arc<Vec<Experience>>,
    variant: Variant,
    seed: u64,
) -> RunArtifacts {
    let cfg = run_config(data_dir, variant, seed);
    let run_dir = root.join(variant.dir_name(seed));
    std::fs::create_dir_all(&run_dir).expect("run dir");
    cfg.save(&run_dir.join("config.json")).expect("config");
    let mut model = cfg.build_model().expect("model");
    let summary = run_stream(experiences, &mut model, &cfg.train, &run_dir).expect("run");

    let matrix = AccuracyMatrix {
        rows: summary.accuracy_rows,
    };
    let t = matrix.rows.len();
    let (faa, af) = compute_faa_af(&matrix, t).expect("faa/af");
    let af = af.expect("t >= 2");

    let (mut ccrf, mut acr_diag, mut acr_off, mut headline) = (None, None, None, None);
    match variant {
        Variant::MucilEr | Variant::CbmEr => {
            // Probe-based metrics; extraction runs single-threaded here
            // because fixture workers already parallelize across runs.
            let eval = RunEval::load(&run_dir, experiences, 1).expect("run eval");
            let (c, _) = eval.ccrf().expect("ccrf");
            ccrf = Some(c);
            if variant == Variant::MucilEr {
                let acr = eval.acr().expect("acr");
                acr_diag = acr.mean_diagonal();
                acr_off = acr.mean_off_diagonal();
                let classes = eval.all_classes_through(t);
                let prefix = eval.concepts_through(t);
                headline = Some(eval.la(t, &classes, prefix).expect("headline la"));
            }
        }
        Variant::MucilNoCr => {
            headline = Some(headline_la(&run_dir, experiences));
        }
        Variant::MucilLinear => {}
    }

    RunArtifacts {
        dir: run_dir,
        faa,
        af,
        ccrf,
        acr_diag,
        acr_off,
        headline_la: headline,
    }
}

fn build_fixtures() -> Fixtures {
    let root = tempfile::tempdir().expect("tempdir");
    let data_dir = root.path().join("data");
    let schema = generate_schema(&WebSchema::default()).expect("default schema");
    let experiences = split_experiences(&schema, WebSchema::default().seed).expect("split");
    write_dataset(&data_dir, &schema, &experiences).expect("write dataset");
    let experiences = Arc::new(experiences);

    let mut jobs: Vec<(Variant, u64)> = Vec::new();
    for variant in Variant::all() {
        for seed in SEEDS {
            jobs.push((variant, seed));
        }
    }

    let data_dir_str = data_dir.to_string_lossy().into_owned();
    let results: Mutex<Vec<(Variant, u64, RunArtifacts)>> = Mutex::new(Vec::new());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let workers = eval_threads().clamp(1, 2);
    let root_path = root.path().to_path_buf();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= jobs.len() {
                    break;
                }
                let (variant, seed) = jobs[idx];
                let artifacts =
                    build_one(&root_path, &data_dir_str, &experiences, variant, seed);
                results
                    .lock()
                    .expect("results lock")
                    .push((variant, seed, artifacts));
            });
        }
    });

    Fixtures {
        _root: root,
        schema,
        experiences,
        runs: results.into_inner().expect("results"),
    }
}

static FIXTURES: OnceLock<Fixtures> = OnceLock::new();

pub fn fixtures() -> &'static Fixtures {
    FIXTURES.get_or_init(build_fixtures)
}
