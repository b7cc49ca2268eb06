#![allow(dead_code)]

use i2i_core::adapter::{AdapterParams, FusionParams};
use i2i_core::backbone::{BackboneParams, TaskHead};
use i2i_core::config::BackboneConfig;
use i2i_core::harness::{Algo, Lab, ParamCounts};
use i2i_core::params::ParamSet;
use i2i_core::rng::Seed;
use i2i_core::tasks::{default_suite, generate_task, Dataset, World};
use i2i_core::train::HyperSet;

pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 24,
        ..BackboneConfig::default()
    }
}

pub fn tiny_hyper() -> HyperSet {
    HyperSet {
        bottleneck: 4,
        ..HyperSet::default()
    }
    .with_epochs(1)
}

pub fn tiny_datasets(config: &BackboneConfig, train: usize, val: usize) -> Vec<Dataset> {
    let world = World::new(config.feature_dim, 8, Seed(1)).unwrap();
    default_suite(train, val, Seed(6))
        .iter()
        .map(|t| generate_task(&world, t).unwrap())
        .collect()
}

/// A randomly initialised, frozen backbone: enough for contract checks.
pub fn tiny_lab() -> Lab {
    let config = tiny_config();
    let mut backbone = BackboneParams::init(&config, Seed(3)).unwrap();
    backbone.freeze();
    let psi0 = TaskHead::init(&config, Seed(4));
    Lab::new(backbone, psi0, tiny_hyper(), tiny_datasets(&config, 64, 24)).unwrap()
}

pub fn task_ids(lab: &Lab) -> Vec<String> {
    lab.datasets.iter().map(|d| d.task_id.clone()).collect()
}

/// Published-style scores (percent) per task, in run order.
pub const TABLE2_TASKS: [&str; 5] = ["vqav2", "visual7w", "vqa_abstract", "vizwiz", "daquar"];

pub const TABLE2_VANILLA: [f64; 5] = [61.42, 24.56, 63.38, 42.04, 23.58];

/// (algo, variant, scores, published per-task transfers).
pub const TABLE2_ROWS: [(&str, Option<&str>, [f64; 5], [f64; 5]); 5] = [
    (
        "adapterfusion",
        None,
        [61.52, 23.23, 60.26, 43.32, 23.41],
        [0.16, -5.40, -4.93, 3.04, -0.74],
    ),
    (
        "closest_task_init",
        None,
        [61.28, 24.82, 65.22, 42.76, 24.03],
        [-0.22, 1.05, 2.90, 1.71, 1.90],
    ),
    (
        "i2i",
        Some("LL"),
        [61.32, 25.24, 62.92, 43.29, 23.45],
        [-0.16, 2.78, -0.72, 2.97, -0.55],
    ),
    (
        "i2i",
        Some("FL"),
        [61.62, 25.23, 63.80, 43.90, 23.42],
        [0.32, 2.71, 0.66, 4.42, -0.68],
    ),
    (
        "i2i",
        Some("FF"),
        [61.47, 25.60, 65.26, 43.66, 24.68],
        [0.08, 4.22, 2.96, 3.86, 4.65],
    ),
];

/// A record carrying only scores, as if read back from a run.
pub fn synthetic_record(
    algo: &str,
    variant: Option<&str>,
    ids: &[&str],
    scores: &[f64],
) -> i2i_core::harness::CLRunRecord {
    use i2i_core::harness::{
        Algo, CLRunRecord, CLSchedule, ParamCounts, RunMetrics, TaskRecord, SCHEMA_VERSION,
    };
    use i2i_core::i2i::{I2IVariant, PhaseTrace};
    let algo = Algo::parse(algo).unwrap();
    let schedule = CLSchedule::new(
        ids.iter().map(|s| s.to_string()).collect(),
        algo,
        variant.map(|v| I2IVariant::preset(v).unwrap()),
        Seed(0),
    );
    let tasks = ids
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (id, &score))| TaskRecord {
            step: i + 1,
            task_id: id.to_string(),
            score,
            phases: PhaseTrace::default(),
            steps: 0,
            params: ParamCounts {
                training_forward: 0,
                inference: 0,
                total: 0,
            },
            checkpoint_file: format!("tasks/{:02}_{id}.ckpt", i + 1),
            checkpoint_sha256: String::new(),
            vanilla_score: None,
            knowledge_free_score: None,
            closest: None,
        })
        .collect();
    CLRunRecord {
        schema_version: SCHEMA_VERSION,
        algo,
        variant_name: variant.map(str::to_string),
        schedule,
        config_digest: String::new(),
        backbone_digest: String::new(),
        hyper: HyperSet::default(),
        tasks,
        metrics: RunMetrics::default(),
    }
}

/// Cosine similarities between the five published VQA tasks.
pub const TABLE6: &str = "task,VQAv2,Visual7W,VQA-Abs,VizWiz,DAQUAR
VQAv2,-,0.9167,0.9480,0.9877,0.9816
Visual7W,0.9167,-,0.9771,0.8670,0.9280
VQA-Abs,0.9480,0.9771,-,0.9070,0.9541
VizWiz,0.9877,0.8670,0.9070,-,0.9673
DAQUAR,0.9816,0.9820,0.9541,0.9673,-
";

pub struct Sizes {
    pub b: usize,
    pub phi: usize,
    pub psi: usize,
    pub f: usize,
}

pub fn closed_form(config: &BackboneConfig, r: usize) -> Sizes {
    Sizes {
        b: BackboneParams::init(config, Seed(0))
            .unwrap()
            .count_params(),
        phi: AdapterParams::closed_form_count(config.n_points(), config.d_model, r),
        psi: TaskHead::init(config, Seed(0)).count_params(),
        f: FusionParams::closed_form_count(config.n_points(), config.d_model),
    }
}

/// Expected counts at 1-based step `k`, enumerated by hand.
pub fn expected(algo: Algo, k: usize, s: &Sizes) -> ParamCounts {
    let single = s.b + s.phi + s.psi;
    let grown = s.b + k * (s.phi + s.psi);
    match algo {
        Algo::Vanilla | Algo::ClosestTaskInit => ParamCounts {
            training_forward: single,
            inference: single,
            total: grown,
        },
        Algo::I2I => ParamCounts {
            training_forward: if k <= 2 {
                single
            } else {
                s.b + s.psi + (k - 1) * s.phi + s.f
            },
            inference: single,
            total: grown,
        },
        Algo::AdapterFusion => {
            let wide = if k == 1 {
                single
            } else {
                s.b + s.psi + k * s.phi + s.f
            };
            ParamCounts {
                training_forward: wide,
                inference: wide,
                total: grown + (k - 1) * s.f,
            }
        }
    }
}
