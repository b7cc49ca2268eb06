//! Task-incremental runs: schedule execution, the task store, the forgetting
//! audit, run records and parameter accounting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, FusionParams};
use crate::backbone::{BackboneParams, TaskHead};
use crate::baselines::{
    closest_task_init, knowledge_free, train_adapterfusion, train_vanilla, AdapterOutput,
    PriorTask, TaskSimilarityMatrix,
};
use crate::checkpoint::Checkpoint;
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::forward::{encode_pooled, Model, Modules};
use crate::i2i::{
    i2i_step, improvise, lowshot_seed, phase_seed, subsample, I2IStep, I2IVariant, ImproviseOutput,
    Phase, PhaseContext, PhaseTrace,
};
use crate::metrics;
use crate::params::{digest, ParamSet};
use crate::rng::{sha256_hex, Seed};
use crate::tasks::{Dataset, Example};
use crate::tensor::Tensor;
use crate::train::HyperSet;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algo {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "adapterfusion")]
    AdapterFusion,
    #[serde(rename = "closest_task_init")]
    ClosestTaskInit,
    #[serde(rename = "i2i")]
    I2I,
}

impl Algo {
    pub const ALL: [Algo; 4] = [
        Algo::Vanilla,
        Algo::AdapterFusion,
        Algo::ClosestTaskInit,
        Algo::I2I,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Vanilla => "vanilla",
            Algo::AdapterFusion => "adapterfusion",
            Algo::ClosestTaskInit => "closest_task_init",
            Algo::I2I => "i2i",
        }
    }

    pub fn parse(s: &str) -> Result<Algo> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditMode {
    /// Re-evaluate every stored task after every task.
    #[default]
    EveryTask,
    /// Re-evaluate every stored task once, after the last task.
    Final,
}

fn yes() -> bool {
    true
}

/// What to run: the task order, the algorithm and the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CLSchedule {
    pub tasks: Vec<String>,
    pub algo: Algo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<I2IVariant>,
    pub seed: Seed,
    /// Also train the head-only control on each improvise subset (I2I only).
    #[serde(default)]
    pub knowledge_free: bool,
    /// Train the vanilla reference of every task for transfer metrics.
    #[serde(default = "yes")]
    pub reference: bool,
    #[serde(default)]
    pub audit: AuditMode,
}

impl CLSchedule {
    pub fn new(
        tasks: Vec<String>,
        algo: Algo,
        variant: Option<I2IVariant>,
        seed: Seed,
    ) -> CLSchedule {
        CLSchedule {
            tasks,
            algo,
            variant,
            seed,
            knowledge_free: false,
            reference: true,
            audit: AuditMode::EveryTask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("a schedule needs at least one task".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t) {
                return Err(Error::Config(format!("task {t:?} appears twice")));
            }
        }
        match (self.algo, &self.variant) {
            (Algo::I2I, None) => return Err(Error::Config("i2i needs a variant".into())),
            (Algo::I2I, Some(v)) => v.validate().map_err(|e| Error::Config(e.to_string()))?,
            (a, Some(_)) => return Err(Error::Config(format!("{} takes no variant", a.name()))),
            _ => {}
        }
        if self.knowledge_free && self.algo != Algo::I2I {
            return Err(Error::Config(
                "the knowledge-free control runs only with i2i".into(),
            ));
        }
        Ok(())
    }

    pub fn variant_name(&self) -> Option<String> {
        self.variant.map(|v| {
            v.name()
                .map(str::to_string)
                .unwrap_or_else(|| format!("{}-{}", v.improvise_fraction, v.initialize_fraction))
        })
    }

    /// Seed of one task; independent of the task's position.
    pub fn task_seed(&self, task_id: &str) -> Seed {
        self.seed.child(task_id)
    }
}

/// Task data with a firewall: once a task is done its training split can no
/// longer be read.
pub struct DataVault<'a> {
    sets: BTreeMap<&'a str, &'a Dataset>,
    revoked: BTreeSet<String>,
}

impl<'a> DataVault<'a> {
    pub fn new(datasets: &'a [Dataset]) -> Self {
        DataVault {
            sets: datasets.iter().map(|d| (d.task_id.as_str(), d)).collect(),
            revoked: BTreeSet::new(),
        }
    }

    fn get(&self, id: &str) -> Result<&'a Dataset> {
        self.sets
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no dataset for task {id:?}")))
    }

    pub fn train(&self, id: &str) -> Result<&'a [Example]> {
        let ds = self.get(id)?;
        if self.revoked.contains(id) {
            return Err(Error::RevokedAccess(id.to_string()));
        }
        Ok(&ds.train)
    }

    /// Validation data stays readable for the forgetting audit.
    pub fn val(&self, id: &str) -> Result<&'a [Example]> {
        Ok(&self.get(id)?.val)
    }

    pub fn revoke(&mut self, id: &str) {
        self.revoked.insert(id.to_string());
    }

    pub fn is_revoked(&self, id: &str) -> bool {
        self.revoked.contains(id)
    }
}

/// Everything persisted for one finished task.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTask {
    pub task_id: String,
    pub adapter: AdapterParams,
    pub head: TaskHead,
    pub fusion: Option<FusionParams>,
    /// Mean pooled encoder state of the task's training data under Ψ₀.
    pub representation: Option<Vec<f64>>,
}

impl StoredTask {
    pub fn to_checkpoint(&self, config_digest: &str) -> Checkpoint {
        let mut c = Checkpoint::new(config_digest);
        c.push_set("adapter.", &self.adapter);
        c.push_set("head.", &self.head);
        if let Some(f) = &self.fusion {
            c.push_set("fusion.", f);
        }
        if let Some(r) = &self.representation {
            c.push(
                "representation",
                Tensor::new(vec![r.len()], r.clone()).expect("vector shape"),
            );
        }
        c
    }

    pub fn from_checkpoint(
        task_id: &str,
        c: &Checkpoint,
        config: &BackboneConfig,
    ) -> Result<StoredTask> {
        if c.config_digest != config.digest() {
            return Err(Error::Format(format!(
                "checkpoint for {task_id} was written for another backbone config"
            )));
        }
        let bottleneck = c
            .get("adapter.0.down")?
            .shape()
            .get(1)
            .copied()
            .unwrap_or(0);
        let mut adapter = AdapterParams::init(config, bottleneck, Seed(0))?;
        c.load_set("adapter.", &mut adapter)?;
        let mut head = TaskHead::init(config, Seed(0));
        c.load_set("head.", &mut head)?;
        let fusion = if c.has_prefix("fusion.") {
            let mut f = FusionParams::init(config, Seed(0));
            c.load_set("fusion.", &mut f)?;
            Some(f)
        } else {
            None
        };
        let representation = c.get("representation").ok().map(|t| t.data().to_vec());
        let blocks = adapter.named_tensors().len()
            + head.named_tensors().len()
            + fusion.as_ref().map_or(0, |f| f.named_tensors().len())
            + representation.is_some() as usize;
        if blocks != c.blocks.len() {
            return Err(Error::Format(format!(
                "checkpoint for {task_id} has unexpected blocks"
            )));
        }
        Ok(StoredTask {
            task_id: task_id.to_string(),
            adapter,
            head,
            fusion,
            representation,
        })
    }

    fn sizes(&self) -> TaskSizes {
        TaskSizes {
            adapter: self.adapter.count_params(),
            head: self.head.count_params(),
            fusion: self.fusion.as_ref().map(ParamSet::count_params),
        }
    }
}

/// Scores task `j` of the store with its own parameters (and, for a fusion
/// task, the adapters of tasks `1..=j`).
pub fn evaluate_stored(
    backbone: &BackboneParams,
    store: &[StoredTask],
    j: usize,
    val: &[Example],
    batch_size: usize,
) -> Result<f64> {
    let t = &store[j];
    match &t.fusion {
        Some(fusion) => {
            let adapters: Vec<&AdapterParams> = store[..=j].iter().map(|s| &s.adapter).collect();
            Model::new(
                backbone,
                &t.head,
                Modules::Fusion {
                    adapters: &adapters,
                    fusion,
                },
            )
            .evaluate(val, batch_size)
        }
        None => {
            Model::new(backbone, &t.head, Modules::Adapter(&t.adapter)).evaluate(val, batch_size)
        }
    }
}

/// Parameter sizes of one stored task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSizes {
    pub adapter: usize,
    pub head: usize,
    pub fusion: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Parameters active in a training forward pass, at the widest phase.
    pub training_forward: usize,
    /// Parameters active when answering for the task.
    pub inference: usize,
    /// Backbone plus everything persisted so far.
    pub total: usize,
}

/// Counts after the last task in `tasks`. `fusion` is the size of one fusion
/// layer, used for the I2I improvise phase whose fusion is never persisted.
pub fn param_counts(
    algo: Algo,
    backbone: usize,
    fusion: usize,
    tasks: &[TaskSizes],
) -> Result<ParamCounts> {
    let Some(cur) = tasks.last() else {
        return Err(Error::InvalidArgument(
            "parameter counts of an empty store".into(),
        ));
    };
    let k = tasks.len();
    let adapters_before: usize = tasks[..k - 1].iter().map(|t| t.adapter).sum();
    let single = backbone + cur.adapter + cur.head;
    let training_forward = match (algo, k) {
        (_, 1) | (Algo::Vanilla | Algo::ClosestTaskInit, _) => single,
        (Algo::I2I, 2) => backbone + tasks[0].adapter + cur.head,
        (Algo::I2I, _) => backbone + cur.head + adapters_before + fusion,
        (Algo::AdapterFusion, _) => {
            backbone + cur.head + adapters_before + cur.adapter + cur.fusion.unwrap_or(0)
        }
    };
    let inference = match cur.fusion {
        Some(f) => backbone + cur.head + adapters_before + cur.adapter + f,
        None => single,
    };
    let total = backbone
        + tasks
            .iter()
            .map(|t| t.adapter + t.head + t.fusion.unwrap_or(0))
            .sum::<usize>();
    Ok(ParamCounts {
        training_forward,
        inference,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRow {
    pub task_step: usize,
    pub algo: String,
    pub counts: ParamCounts,
}

/// Parameter growth over a run, one row per task step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
}

pub const PARAM_HEADER: &str = "task_step,algo,training_forward,inference,total";

impl ParamReport {
    /// Recomputes the report from checkpoints alone.
    pub fn from_checkpoints(
        algo: Algo,
        label: &str,
        backbone: usize,
        fusion: usize,
        checkpoints: &[Checkpoint],
    ) -> Result<ParamReport> {
        let block_sum = |c: &Checkpoint, prefix: &str| -> usize {
            c.blocks
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, t)| t.numel())
                .sum()
        };
        let sizes: Vec<TaskSizes> = checkpoints
            .iter()
            .map(|c| TaskSizes {
                adapter: block_sum(c, "adapter."),
                head: block_sum(c, "head."),
                fusion: c.has_prefix("fusion.").then(|| block_sum(c, "fusion.")),
            })
            .collect();
        let mut rows = Vec::new();
        for k in 1..=sizes.len() {
            rows.push(ParamRow {
                task_step: k,
                algo: label.to_string(),
                counts: param_counts(algo, backbone, fusion, &sizes[..k])?,
            });
        }
        Ok(ParamReport { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{PARAM_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.task_step, r.algo, r.counts.training_forward, r.counts.inference, r.counts.total
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ParamReport> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == PARAM_HEADER => {}
            _ => {
                return Err(Error::Format(format!(
                    "parameter report must start with {PARAM_HEADER:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for line in lines {
            let c: Vec<&str> = line.split(',').map(str::trim).collect();
            if c.len() != 5 {
                return Err(Error::Format(format!("bad parameter row {line:?}")));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad count {s:?}")))
            };
            rows.push(ParamRow {
                task_step: num(c[0])?,
                algo: c[1].to_string(),
                counts: ParamCounts {
                    training_forward: num(c[2])?,
                    inference: num(c[3])?,
                    total: num(c[4])?,
                },
            });
        }
        Ok(ParamReport { rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosestChoice {
    /// Task id whose adapter and head were copied.
    pub source: String,
    /// Similarity to every earlier task, in run order.
    pub similarities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub step: usize,
    pub task_id: String,
    /// Final validation exact match.
    pub score: f64,
    pub phases: PhaseTrace,
    /// Optimizer steps spent on this task.
    pub steps: u64,
    pub params: ParamCounts,
    pub checkpoint_file: String,
    pub checkpoint_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vanilla_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_free_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closest: Option<ClosestChoice>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Transfer of tasks `2..K` against their vanilla reference.
    pub transfer: BTreeMap<String, f64>,
    pub overall_transfer: Option<f64>,
    /// Distillation decay of tasks `2..K` (I2I only).
    pub decay: BTreeMap<String, f64>,
    pub phase3_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CLRunRecord {
    pub schema_version: u32,
    pub algo: Algo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_name: Option<String>,
    pub schedule: CLSchedule,
    pub config_digest: String,
    pub backbone_digest: String,
    pub hyper: HyperSet,
    pub tasks: Vec<TaskRecord>,
    pub metrics: RunMetrics,
}

impl CLRunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain record") + "\n"
    }

    pub fn from_json(text: &str) -> Result<CLRunRecord> {
        let r: CLRunRecord =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("run record: {e}")))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported record schema {}",
                r.schema_version
            )));
        }
        for t in &r.tasks {
            if !(0.0..=100.0).contains(&t.score) {
                return Err(Error::Format(format!(
                    "score {} of {} outside [0, 100]",
                    t.score, t.task_id
                )));
            }
        }
        Ok(r)
    }

    pub fn read(path: &Path) -> Result<CLRunRecord> {
        CLRunRecord::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn score(&self, task_id: &str) -> Option<f64> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .map(|t| t.score)
    }

    pub fn param_report(&self) -> ParamReport {
        let label = match &self.variant_name {
            Some(v) => format!("{}_{v}", self.algo.name()),
            None => self.algo.name().to_string(),
        };
        ParamReport {
            rows: self
                .tasks
                .iter()
                .map(|t| ParamRow {
                    task_step: t.step,
                    algo: label.clone(),
                    counts: t.params,
                })
                .collect(),
        }
    }
}

fn run_metrics(algo: Algo, tasks: &[TaskRecord]) -> RunMetrics {
    let mut m = RunMetrics::default();
    let mut later = Vec::new();
    let mut pairs = Vec::new();
    let mut gain_defined = true;
    for t in tasks.iter().skip(1) {
        if let Some(tr) = t
            .vanilla_score
            .and_then(|v| metrics::knowledge_transfer(t.score, v).ok())
        {
            m.transfer.insert(t.task_id.clone(), tr);
            later.push(tr);
        }
        if algo == Algo::I2I {
            let (f, p, a3) = (
                t.phases.score(Phase::Improvise),
                t.phases.score(Phase::Initialize),
                t.phases.score(Phase::Train),
            );
            if let (Some(f), Some(p)) = (f, p) {
                if let Ok(d) = metrics::distillation_decay(f, p) {
                    m.decay.insert(t.task_id.clone(), d);
                }
            }
            match (p, a3) {
                (Some(a2), Some(a3)) if a2 > 0.0 => pairs.push((a2, a3)),
                _ => gain_defined = false,
            }
        }
    }
    if later.len() + 1 == tasks.len() && !later.is_empty() {
        m.overall_transfer = metrics::overall_transfer(&later).ok();
    }
    if gain_defined && !pairs.is_empty() {
        m.phase3_gain = metrics::phase3_gain(&pairs).ok();
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub step: usize,
    pub task_id: String,
    pub seconds: f64,
}

/// Wall-clock per task, kept apart from the record so that records stay
/// byte-identical across reruns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub tasks: Vec<TaskTiming>,
    pub audit_seconds: f64,
    pub total_seconds: f64,
}

pub struct RunOutput {
    pub record: CLRunRecord,
    pub store: Vec<StoredTask>,
    pub checkpoints: Vec<Checkpoint>,
    pub timings: Timings,
    /// ClosestTaskInit runs only.
    pub similarity: Option<TaskSimilarityMatrix>,
}

impl RunOutput {
    /// Writes `record.json`, `params.csv`, `timings.json`, the task
    /// checkpoints and, for ClosestTaskInit, `similarity.csv`. Refuses to
    /// write into a directory that already holds a record.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let record_path = dir.join("record.json");
        if record_path.exists() {
            return Err(Error::AlreadyExists(record_path.display().to_string()));
        }
        std::fs::create_dir_all(dir.join("tasks"))?;
        for (t, c) in self.record.tasks.iter().zip(&self.checkpoints) {
            c.write(&dir.join(&t.checkpoint_file))?;
        }
        std::fs::write(dir.join("params.csv"), self.record.param_report().to_csv())?;
        if let Some(s) = &self.similarity {
            std::fs::write(dir.join("similarity.csv"), s.to_csv())?;
        }
        std::fs::write(
            dir.join("timings.json"),
            serde_json::to_string_pretty(&self.timings)? + "\n",
        )?;
        std::fs::write(record_path, self.record.to_json())?;
        Ok(())
    }
}

/// Results reused across runs that share a frozen backbone, Ψ₀, budgets and
/// datasets. Every entry is keyed by everything its computation reads, so a
/// hit returns exactly what recomputation would.
#[derive(Default)]
pub struct Memo {
    vanilla: HashMap<String, AdapterOutput>,
    improvise: HashMap<String, ImproviseOutput>,
    step: HashMap<String, I2IStep>,
    knowledge_free: HashMap<String, f64>,
    representation: HashMap<String, Vec<f64>>,
    pub hits: usize,
    pub misses: usize,
}

impl Memo {
    fn lookup<T: Clone>(
        map: &mut HashMap<String, T>,
        hits: &mut usize,
        misses: &mut usize,
        key: String,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        if let Some(v) = map.get(&key) {
            *hits += 1;
            return Ok(v.clone());
        }
        *misses += 1;
        let v = compute()?;
        map.insert(key, v.clone());
        Ok(v)
    }
}

/// A frozen backbone, Ψ₀, phase budgets and the task datasets.
pub struct Lab {
    pub backbone: BackboneParams,
    pub psi0: TaskHead,
    pub hyper: HyperSet,
    pub datasets: Vec<Dataset>,
    pub memo: Memo,
}

impl Lab {
    pub fn new(
        backbone: BackboneParams,
        psi0: TaskHead,
        hyper: HyperSet,
        datasets: Vec<Dataset>,
    ) -> Result<Lab> {
        if !backbone.is_frozen() {
            return Err(Error::InvalidArgument(
                "continual-learning runs need a frozen backbone".into(),
            ));
        }
        hyper.validate()?;
        Ok(Lab {
            backbone,
            psi0,
            hyper,
            datasets,
            memo: Memo::default(),
        })
    }

    pub fn context(&self) -> PhaseContext<'_> {
        PhaseContext {
            backbone: &self.backbone,
            psi0: &self.psi0,
            hyper: &self.hyper,
        }
    }

    pub fn dataset(&self, id: &str) -> Option<&Dataset> {
        self.datasets.iter().find(|d| d.task_id == id)
    }

    /// Size of one fusion layer for this backbone.
    pub fn fusion_size(&self) -> usize {
        FusionParams::init(&self.backbone.config, Seed(0)).count_params()
    }

    /// Executes the schedule task by task. After each task its training
    /// split is revoked and every stored task is re-scored from its
    /// checkpoint bytes; any score that is not bit-identical to the recorded
    /// one aborts the run.
    pub fn run_schedule(&mut self, schedule: &CLSchedule) -> Result<RunOutput> {
        schedule.validate()?;
        for id in &schedule.tasks {
            if self.dataset(id).is_none() {
                return Err(Error::Config(format!("no dataset for task {id:?}")));
            }
        }
        let started = Instant::now();
        let Lab {
            backbone,
            psi0,
            hyper,
            datasets,
            memo,
        } = self;
        let ctx = PhaseContext {
            backbone,
            psi0,
            hyper,
        };
        let config_digest = backbone.config.digest();
        let backbone_size = backbone.count_params();
        let fusion_size = FusionParams::init(&backbone.config, Seed(0)).count_params();
        let eval_batch = hyper.adapter.eval_batch_size;
        let mut vault = DataVault::new(datasets);
        let mut store: Vec<StoredTask> = Vec::new();
        let mut checkpoints: Vec<Checkpoint> = Vec::new();
        let mut records: Vec<TaskRecord> = Vec::new();
        let mut timings = Timings::default();
        let Memo {
            vanilla: vanilla_memo,
            improvise: improvise_memo,
            step: step_memo,
            knowledge_free: kf_memo,
            representation: rep_memo,
            hits,
            misses,
        } = memo;

        for (i, id) in schedule.tasks.iter().enumerate() {
            let k = i + 1;
            let t0 = Instant::now();
            let task_seed = schedule.task_seed(id);
            let train = vault.train(id)?;
            let val = vault.val(id)?;
            let mut vanilla = |hits: &mut usize, misses: &mut usize| {
                Memo::lookup(
                    vanilla_memo,
                    hits,
                    misses,
                    format!("{}/{id}", task_seed.0),
                    || train_vanilla(ctx, train, val, task_seed.child("adapter")),
                )
            };
            let prev: Vec<&AdapterParams> = store.iter().map(|s| &s.adapter).collect();
            let mut phases = PhaseTrace::default();
            let mut knowledge_free_score = None;
            let mut closest = None;
            let mut representation = None;
            let (adapter, head, fusion, score, steps) = match (schedule.algo, k) {
                (_, 1) | (Algo::Vanilla, _) => {
                    let out = vanilla(hits, misses)?;
                    (out.adapter, out.head, None, out.score, out.report.steps)
                }
                (Algo::AdapterFusion, _) => {
                    let extracted = vanilla(hits, misses)?;
                    let out = train_adapterfusion(
                        ctx,
                        k,
                        train,
                        val,
                        &prev,
                        task_seed.child("adapter"),
                        Some(extracted),
                    )?;
                    let steps = out.extraction.steps + out.composition.steps;
                    (out.adapter, out.head, Some(out.fusion), out.score, steps)
                }
                (Algo::ClosestTaskInit, _) => {
                    let priors: Vec<PriorTask> = store
                        .iter()
                        .map(|s| PriorTask {
                            adapter: &s.adapter,
                            head: &s.head,
                            representation: s.representation.as_deref().unwrap_or(&[]),
                        })
                        .collect();
                    let out =
                        closest_task_init(ctx, train, val, &priors, task_seed.child("closest"))?;
                    closest = Some(ClosestChoice {
                        source: store[out.source].task_id.clone(),
                        similarities: out.similarities.clone(),
                    });
                    representation = Some(out.query_representation);
                    (out.adapter, out.head, None, out.score, out.report.steps)
                }
                (Algo::I2I, _) => {
                    let variant = schedule.variant.expect("validated");
                    let prev_key: Vec<String> = prev.iter().map(|a| digest(*a)).collect();
                    let prev_key = sha256_hex(prev_key.join(",").as_bytes());
                    let imp_key = format!(
                        "{}/{id}/{k}/{}/{prev_key}",
                        task_seed.0,
                        variant.improvise_fraction.to_bits()
                    );
                    // The second task copies its single prior adapter, so the
                    // initialize budget does not matter there.
                    let init_bits = if k == 2 {
                        0
                    } else {
                        variant.initialize_fraction.to_bits()
                    };
                    let step_key = format!("{imp_key}/{init_bits}");
                    let step = match step_memo.get(&step_key) {
                        Some(s) => {
                            *hits += 1;
                            s.clone()
                        }
                        None => {
                            *misses += 1;
                            let improvised =
                                Memo::lookup(improvise_memo, hits, misses, imp_key, || {
                                    let subset = subsample(
                                        train,
                                        variant.improvise_fraction,
                                        lowshot_seed(task_seed),
                                    )?;
                                    improvise(
                                        ctx,
                                        k,
                                        &subset,
                                        val,
                                        &prev,
                                        phase_seed(task_seed, Phase::Improvise),
                                    )
                                })?;
                            let s = i2i_step(
                                ctx,
                                k,
                                variant,
                                train,
                                val,
                                &prev,
                                task_seed,
                                Some(improvised),
                            )?;
                            step_memo.insert(step_key, s.clone());
                            s
                        }
                    };
                    if schedule.knowledge_free {
                        let key = format!(
                            "{}/{id}/{}",
                            task_seed.0,
                            variant.improvise_fraction.to_bits()
                        );
                        knowledge_free_score =
                            Some(Memo::lookup(kf_memo, hits, misses, key, || {
                                let subset = subsample(
                                    train,
                                    variant.improvise_fraction,
                                    lowshot_seed(task_seed),
                                )?;
                                Ok(knowledge_free(
                                    ctx,
                                    &subset,
                                    val,
                                    phase_seed(task_seed, Phase::Improvise),
                                )?
                                .1
                                .score)
                            })?);
                    }
                    let steps = step.trace.phases.iter().map(|p| p.steps).sum();
                    phases = step.trace;
                    (step.adapter, step.head, None, step.score, steps)
                }
            };
            let vanilla_score = match schedule.algo {
                Algo::Vanilla => Some(score),
                _ if schedule.reference => Some(vanilla(hits, misses)?.score),
                _ => None,
            };
            if schedule.algo == Algo::ClosestTaskInit && representation.is_none() {
                representation = Some(Memo::lookup(rep_memo, hits, misses, id.clone(), || {
                    encode_pooled(backbone, psi0, train, eval_batch)
                })?);
            }
            let stored = StoredTask {
                task_id: id.clone(),
                adapter,
                head,
                fusion,
                representation,
            };
            let ckpt = stored.to_checkpoint(&config_digest);
            store.push(stored);
            let sizes: Vec<TaskSizes> = store.iter().map(StoredTask::sizes).collect();
            records.push(TaskRecord {
                step: k,
                task_id: id.clone(),
                score,
                phases,
                steps,
                params: param_counts(schedule.algo, backbone_size, fusion_size, &sizes)?,
                checkpoint_file: format!("tasks/{k:02}_{id}.ckpt"),
                checkpoint_sha256: ckpt.digest(),
                vanilla_score,
                knowledge_free_score,
                closest,
            });
            checkpoints.push(ckpt);
            vault.revoke(id);
            timings.tasks.push(TaskTiming {
                step: k,
                task_id: id.clone(),
                seconds: t0.elapsed().as_secs_f64(),
            });
            if schedule.audit == AuditMode::EveryTask || k == schedule.tasks.len() {
                let a0 = Instant::now();
                audit(backbone, &vault, &checkpoints, &records, eval_batch)?;
                timings.audit_seconds += a0.elapsed().as_secs_f64();
            }
        }

        let similarity = if schedule.algo == Algo::ClosestTaskInit {
            let reps: Vec<Vec<f64>> = store
                .iter()
                .map(|s| s.representation.clone().unwrap_or_default())
                .collect();
            Some(TaskSimilarityMatrix::from_representations(
                &schedule.tasks,
                &reps,
            )?)
        } else {
            None
        };
        timings.total_seconds = started.elapsed().as_secs_f64();
        let record = CLRunRecord {
            schema_version: SCHEMA_VERSION,
            algo: schedule.algo,
            variant_name: schedule.variant_name(),
            schedule: schedule.clone(),
            config_digest,
            backbone_digest: digest(&*backbone),
            hyper: hyper.clone(),
            metrics: run_metrics(schedule.algo, &records),
            tasks: records,
        };
        Ok(RunOutput {
            record,
            store,
            checkpoints,
            timings,
            similarity,
        })
    }
}

/// Re-scores every stored task from its checkpoint bytes and compares the
/// result bit for bit with the recorded score.
pub fn audit(
    backbone: &BackboneParams,
    vault: &DataVault,
    checkpoints: &[Checkpoint],
    records: &[TaskRecord],
    batch_size: usize,
) -> Result<()> {
    let reloaded = records
        .iter()
        .zip(checkpoints)
        .map(|(r, c)| {
            let bytes = c.to_bytes();
            if sha256_hex(&bytes) != r.checkpoint_sha256 {
                return Err(Error::DigestMismatch {
                    path: r.checkpoint_file.clone(),
                    expected: r.checkpoint_sha256.clone(),
                    found: sha256_hex(&bytes),
                });
            }
            StoredTask::from_checkpoint(
                &r.task_id,
                &Checkpoint::from_bytes(&bytes)?,
                &backbone.config,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for (j, r) in records.iter().enumerate() {
        let again = evaluate_stored(backbone, &reloaded, j, vault.val(&r.task_id)?, batch_size)?;
        if again.to_bits() != r.score.to_bits() {
            return Err(Error::ForgettingAudit {
                task: r.task_id.clone(),
                recorded: r.score,
                reevaluated: again,
            });
        }
    }
    Ok(())
}
