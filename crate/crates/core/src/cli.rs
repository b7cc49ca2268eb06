//! The `i2i` command line: dataset generation, pretraining, runs, metric
//! tables, the gradient suite and plots.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::BackboneConfig;
use crate::data::{ensure_pretrain, ensure_task, GenStatus};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, GradCheckOptions};
use crate::harness::{Algo, AuditMode, CLRunRecord, CLSchedule, Lab};
use crate::i2i::I2IVariant;
use crate::metrics::metric_table;
use crate::pretrain::{load_backbone, pretrain_backbone, save_backbone};
use crate::rng::Seed;
use crate::tasks::{
    default_suite, majority_baseline, task_orders, Dataset, QATask, World, QUESTION_LEN,
};
use crate::train::{HyperSet, PhaseHyper};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "I2I_OUT";
pub const DEFAULT_OUT: &str = "runs";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_AUDIT: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "i2i",
    version,
    about = "Continual-learning lab for adapter initialization by fusion distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate (or verify) the task datasets and the pretraining corpus.
    Gen(ConfigArgs),
    /// Pretrain and freeze the backbone and the shared head initializer.
    Pretrain(ConfigArgs),
    /// Run one continual-learning schedule.
    Run(RunArgs),
    /// Transfer table from a vanilla record and candidate records.
    Metrics {
        vanilla: PathBuf,
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the model loss.
    Gradcheck,
    /// Render a parameter report or metric table as SVG.
    Plot {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set hyper.train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root (data, backbone and runs live below it).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    /// One of the three fixed task orders, 1-based.
    #[arg(long)]
    pub order: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_slots: usize,
    pub world_seed: Seed,
    pub seed: Seed,
    pub train_size: usize,
    pub val_size: usize,
    /// Task definitions; the default five-task suite when absent.
    pub suite: Option<Vec<QATask>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_slots: 8,
            world_seed: Seed(1),
            seed: Seed(6),
            train_size: 2000,
            val_size: 500,
            suite: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seed: Seed,
    pub corpus_seed: Seed,
    pub train_size: usize,
    pub val_size: usize,
    pub hyper: PhaseHyper,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: Seed(3),
            corpus_seed: Seed(2),
            train_size: 5000,
            val_size: 1000,
            hyper: PhaseHyper {
                epochs: 3,
                ..PhaseHyper::default()
            },
        }
    }
}

/// The single source of truth for every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub algo: String,
    pub variant: Option<String>,
    pub order: usize,
    /// Explicit task order; overrides `order`.
    pub tasks: Option<Vec<String>>,
    pub knowledge_free: bool,
    pub reference: bool,
    pub audit: AuditMode,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub hyper: HyperSet,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: None,
            seed: 0,
            algo: "vanilla".into(),
            variant: None,
            order: 1,
            tasks: None,
            knowledge_free: false,
            reference: true,
            audit: AuditMode::EveryTask,
            backbone: BackboneConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            hyper: HyperSet::default(),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `dotted.key = value` in a TOML table, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads the config file (if any), applies overrides in order and
    /// validates the result. Unknown keys are rejected.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.hyper
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.pretrain
            .hyper
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let algo = Algo::parse(&self.algo)?;
        let variant = self.variant()?;
        if !(1..=3).contains(&self.order) {
            return Err(Error::Config(format!(
                "order must be 1, 2 or 3, got {}",
                self.order
            )));
        }
        if self.data.n_slots + QUESTION_LEN > self.backbone.max_src_len {
            return Err(Error::Config(format!(
                "{} slots plus a {QUESTION_LEN}-token question exceed max_src_len {}",
                self.data.n_slots, self.backbone.max_src_len
            )));
        }
        if self.data.train_size == 0 || self.data.val_size == 0 {
            return Err(Error::Config(
                "train and validation sizes must be at least 1".into(),
            ));
        }
        let suite = self.suite();
        for t in &suite {
            t.query
                .validate()
                .map_err(|e| Error::Config(format!("task {}: {e}", t.id)))?;
            let longest = t.answer_space().iter().map(Vec::len).max().unwrap_or(0);
            if longest + 1 > self.backbone.max_tgt_len {
                return Err(Error::Config(format!(
                    "answers of task {} do not fit max_tgt_len",
                    t.id
                )));
            }
        }
        self.schedule_for(algo, variant, &suite)?.validate()
    }

    pub fn algo(&self) -> Result<Algo> {
        Algo::parse(&self.algo)
    }

    pub fn variant(&self) -> Result<Option<I2IVariant>> {
        self.variant.as_deref().map(I2IVariant::preset).transpose()
    }

    pub fn suite(&self) -> Vec<QATask> {
        self.data.suite.clone().unwrap_or_else(|| {
            default_suite(self.data.train_size, self.data.val_size, self.data.seed)
        })
    }

    fn schedule_for(
        &self,
        algo: Algo,
        variant: Option<I2IVariant>,
        suite: &[QATask],
    ) -> Result<CLSchedule> {
        let tasks = match &self.tasks {
            Some(t) => t.clone(),
            None => task_orders(suite.len())[self.order - 1]
                .iter()
                .map(|&i| suite[i].id.clone())
                .collect(),
        };
        for t in &tasks {
            if !suite.iter().any(|q| &q.id == t) {
                return Err(Error::Config(format!("task {t:?} is not in the suite")));
            }
        }
        Ok(CLSchedule {
            tasks,
            algo,
            variant,
            seed: Seed(self.seed),
            knowledge_free: self.knowledge_free,
            reference: self.reference,
            audit: self.audit,
        })
    }

    pub fn schedule(&self) -> Result<CLSchedule> {
        self.schedule_for(self.algo()?, self.variant()?, &self.suite())
    }

    /// Output root: the config's `out`, else the environment, else `runs`.
    pub fn out_root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_root().join("data")
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.out_root().join("backbone.ckpt")
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        let mut label = self.algo.clone();
        if let Some(v) = &self.variant {
            label.push('_');
            label.push_str(v);
        }
        let order = match &self.tasks {
            Some(_) => "custom".to_string(),
            None => format!("order{}", self.order),
        };
        Ok(self
            .out_root()
            .join("runs")
            .join(format!("{label}_seed{}_{order}", self.seed)))
    }

    pub fn world(&self) -> Result<World> {
        World::new(
            self.backbone.feature_dim,
            self.data.n_slots,
            self.data.world_seed,
        )
    }
}

fn common_overrides(a: &ConfigArgs) -> Vec<String> {
    let mut o = a.set.clone();
    if let Some(s) = a.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(p) = &a.out {
        o.push(format!(
            "out={}",
            toml::Value::String(p.display().to_string())
        ));
    }
    o
}

fn run_overrides(a: &RunArgs) -> Vec<String> {
    let mut o = common_overrides(&a.common);
    if let Some(v) = &a.algo {
        o.push(format!("algo={}", toml::Value::String(v.clone())));
    }
    if let Some(v) = &a.variant {
        o.push(format!("variant={}", toml::Value::String(v.clone())));
    }
    if let Some(v) = a.order {
        o.push(format!("order={v}"));
    }
    o
}

fn status(s: GenStatus) -> &'static str {
    match s {
        GenStatus::Created => "created",
        GenStatus::UpToDate => "up-to-date",
    }
}

/// Ensures every dataset exists and matches its manifest.
pub fn gen(cfg: &RunConfig, log: &mut dyn FnMut(String)) -> Result<(Vec<Dataset>, bool)> {
    let world = cfg.world()?;
    let dir = cfg.data_dir();
    let mut all_fresh = true;
    let mut sets = Vec::new();
    for task in cfg.suite() {
        let (ds, st) = ensure_task(&dir, &world, cfg.data.world_seed, &task)?;
        all_fresh &= st == GenStatus::UpToDate;
        log(format!("{:<28} {}", task.id, status(st)));
        sets.push(ds);
    }
    let (_, _, st) = ensure_pretrain(
        &dir,
        &world,
        cfg.data.world_seed,
        cfg.pretrain.corpus_seed,
        cfg.pretrain.train_size,
        cfg.pretrain.val_size,
    )?;
    all_fresh &= st == GenStatus::UpToDate;
    log(format!("{:<28} {}", "pretrain", status(st)));
    Ok((sets, all_fresh))
}

#[derive(Serialize)]
struct PretrainSummary<'a> {
    checkpoint_sha256: String,
    config_digest: String,
    report: &'a crate::train::FitReport,
    majority_baseline: f64,
}

pub fn pretrain(cfg: &RunConfig, log: &mut dyn FnMut(String)) -> Result<String> {
    let path = cfg.backbone_path();
    if path.exists() {
        return Err(Error::AlreadyExists(path.display().to_string()));
    }
    let world = cfg.world()?;
    let (train, val, _) = ensure_pretrain(
        &cfg.data_dir(),
        &world,
        cfg.data.world_seed,
        cfg.pretrain.corpus_seed,
        cfg.pretrain.train_size,
        cfg.pretrain.val_size,
    )?;
    let (backbone, psi0, report) = pretrain_backbone(
        &cfg.backbone,
        &train,
        &val,
        &cfg.pretrain.hyper,
        cfg.pretrain.seed,
    )?;
    let sha = save_backbone(&path, &backbone, &psi0)?;
    let summary = PretrainSummary {
        checkpoint_sha256: sha.clone(),
        config_digest: cfg.backbone.digest(),
        report: &report,
        majority_baseline: majority_baseline(&val),
    };
    std::fs::write(
        cfg.out_root().join("pretrain.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    log(format!(
        "pretrained: val exact match {:.2} (majority {:.2}), {}",
        report.score,
        summary.majority_baseline,
        path.display()
    ));
    Ok(sha)
}

pub fn run(cfg: &RunConfig, log: &mut dyn FnMut(String)) -> Result<CLRunRecord> {
    let schedule = cfg.schedule()?;
    let dir = cfg.run_dir()?;
    if dir.join("record.json").exists() {
        return Err(Error::AlreadyExists(
            dir.join("record.json").display().to_string(),
        ));
    }
    let path = cfg.backbone_path();
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "no backbone at {}; run `i2i pretrain` first",
            path.display()
        )));
    }
    let (backbone, psi0) = load_backbone(&path, &cfg.backbone)?;
    let (datasets, _) = gen(cfg, &mut |_| {})?;
    let mut lab = Lab::new(backbone, psi0, cfg.hyper.clone(), datasets)?;
    let out = lab.run_schedule(&schedule)?;
    out.write(&dir)?;
    for t in &out.record.tasks {
        log(format!("{:>2} {:<28} {:6.2}", t.step, t.task_id, t.score));
    }
    if let Some(o) = out.record.metrics.overall_transfer {
        log(format!("overall transfer {o:.2}"));
    }
    log(format!("record written to {}", dir.display()));
    Ok(out.record)
}

pub fn metrics(vanilla: &Path, candidates: &[PathBuf]) -> Result<String> {
    let v = CLRunRecord::read(vanilla)?;
    let c = candidates
        .iter()
        .map(|p| CLRunRecord::read(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(metric_table(&v, &c)?.to_csv())
}

/// Prints one line per suite entry; returns whether all passed.
pub fn gradcheck(log: &mut dyn FnMut(String)) -> Result<bool> {
    let entries = run_suite(GradCheckOptions::default())?;
    let mut ok = true;
    for e in &entries {
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        ok &= e.passed();
        let linear = e
            .linear
            .as_ref()
            .map(|r| format!("  linear {:.2e}", r.max_rel_error))
            .unwrap_or_default();
        log(format!(
            "{:<18} {:>4}  max rel err {:.2e} over {} coords{linear}",
            e.name, verdict, e.report.max_rel_error, e.report.coords_checked
        ));
    }
    Ok(ok)
}

pub fn plot(input: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    let svg = crate::plot::svg_from_csv(&text)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, svg)?;
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::ForgettingAudit { .. } => EXIT_AUDIT,
        _ => EXIT_RUNTIME,
    }
}

/// Runs a parsed command; returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let mut log = |s: String| println!("{s}");
    let result: Result<i32> = (|| match cli.command {
        Command::Gen(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &common_overrides(&a))?;
            let (_, fresh) = gen(&cfg, &mut log)?;
            if fresh {
                println!("up-to-date");
            }
            Ok(EXIT_OK)
        }
        Command::Pretrain(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &common_overrides(&a))?;
            pretrain(&cfg, &mut log)?;
            Ok(EXIT_OK)
        }
        Command::Run(a) => {
            let cfg = RunConfig::load(a.common.config.as_deref(), &run_overrides(&a))?;
            run(&cfg, &mut log)?;
            Ok(EXIT_OK)
        }
        Command::Metrics {
            vanilla,
            candidates,
            out,
        } => {
            let csv = metrics(&vanilla, &candidates)?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck => Ok(if gradcheck(&mut log)? {
            EXIT_OK
        } else {
            EXIT_AUDIT
        }),
        Command::Plot { input, out } => {
            plot(&input, &out)?;
            Ok(EXIT_OK)
        }
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (program name first) and runs the command. Usage errors
/// exit as config errors; help and version exit cleanly.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_OK
            }
        }
    }
}
