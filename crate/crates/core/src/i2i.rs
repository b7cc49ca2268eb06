//! Improvise → Initialize → Train.
//!
//! Task 1 is trained as a plain adapter. Every later task first improvises
//! with the adapters learned so far (only the head through the single prior
//! adapter for the second task, a fusion layer plus head afterwards), then
//! distils that improvised model into a fresh adapter, then trains the adapter
//! on the full task data. The fusion layer is thrown away after distillation.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, FusionParams};
use crate::backbone::{BackboneParams, TaskHead};
use crate::error::{invalid, Error, Result};
use crate::forward::{Model, Modules};
use crate::params::{digest, ParamSet};
use crate::rng::Seed;
use crate::tasks::Example;
use crate::train::{
    fit_distill, fit_supervised, BackboneSlot, DistillReport, FitReport, HyperSet, Teacher,
    TrainModules,
};

/// Data fractions for the improvise and initialize phases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct I2IVariant {
    pub improvise_fraction: f64,
    pub initialize_fraction: f64,
}

impl I2IVariant {
    pub const FF: I2IVariant = I2IVariant {
        improvise_fraction: 1.0,
        initialize_fraction: 1.0,
    };
    pub const FL: I2IVariant = I2IVariant {
        improvise_fraction: 1.0,
        initialize_fraction: 0.05,
    };
    pub const LL: I2IVariant = I2IVariant {
        improvise_fraction: 0.05,
        initialize_fraction: 0.05,
    };

    pub fn preset(name: &str) -> Result<I2IVariant> {
        match name {
            "FF" => Ok(Self::FF),
            "FL" => Ok(Self::FL),
            "LL" => Ok(Self::LL),
            other => Err(Error::Config(format!(
                "unknown I2I variant {other:?}; expected FF, FL or LL"
            ))),
        }
    }

    pub fn name(&self) -> Option<&'static str> {
        [("FF", Self::FF), ("FL", Self::FL), ("LL", Self::LL)]
            .into_iter()
            .find(|(_, v)| v == self)
            .map(|(n, _)| n)
    }

    pub fn validate(&self) -> Result<()> {
        for f in [self.improvise_fraction, self.initialize_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("data fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Indices of a uniform sample without replacement of `⌈fraction·n⌉` of `n`
/// items, in ascending order. Samples drawn with one seed are nested: a
/// smaller fraction always selects a subset of a larger one.
pub fn subsample_indices(n: usize, fraction: f64, seed: Seed) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("fraction {fraction} outside (0, 1]"));
    }
    if n == 0 {
        return invalid("cannot subsample an empty dataset");
    }
    if fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let take = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut perm: Vec<usize> = (0..n).collect();
    seed.rng().shuffle(&mut perm);
    let mut picked = perm[..take].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn subsample<T: Clone>(data: &[T], fraction: f64, seed: Seed) -> Result<Vec<T>> {
    Ok(subsample_indices(data.len(), fraction, seed)?
        .into_iter()
        .map(|i| data[i].clone())
        .collect())
}

/// Shared, read-only inputs of every phase.
#[derive(Clone, Copy)]
pub struct PhaseContext<'a> {
    pub backbone: &'a BackboneParams,
    pub psi0: &'a TaskHead,
    pub hyper: &'a HyperSet,
}

impl PhaseContext<'_> {
    pub fn evaluate(
        &self,
        head: &TaskHead,
        modules: Modules,
        val: &[Example],
        batch: usize,
    ) -> Result<f64> {
        Model::new(self.backbone, head, modules).evaluate(val, batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Improvise,
    Initialize,
    Train,
}

/// What one phase did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    /// Training examples the phase touched.
    pub examples: usize,
    pub steps: u64,
    /// Per-epoch mean training loss (distillation loss in the initialize phase).
    pub losses: Vec<f64>,
    /// Per-epoch validation exact match (empty for distillation).
    pub val_scores: Vec<f64>,
    /// Validation score at the end of the phase.
    pub score: f64,
    /// Digest of the parameters the phase produced.
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_initial_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_final_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub phases: Vec<PhaseRecord>,
}

impl PhaseTrace {
    pub fn get(&self, phase: Phase) -> Option<&PhaseRecord> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    pub fn score(&self, phase: Phase) -> Option<f64> {
        self.get(phase).map(|p| p.score)
    }
}

fn phase_digest(parts: &[&dyn DigestPart]) -> String {
    let joined: Vec<String> = parts.iter().map(|p| p.part_digest()).collect();
    crate::rng::sha256_hex(joined.join(",").as_bytes())
}

trait DigestPart {
    fn part_digest(&self) -> String;
}

impl<P: ParamSet> DigestPart for P {
    fn part_digest(&self) -> String {
        digest(self)
    }
}

#[derive(Clone)]
pub struct ImproviseOutput {
    pub fusion: Option<FusionParams>,
    pub head: TaskHead,
    pub score: f64,
    pub report: FitReport,
    pub record: PhaseRecord,
}

/// Phase One. `k` is the 1-based position of the task; `prev` holds the
/// adapters of tasks `1..k`. With a single prior adapter only the head is
/// trained; with more, a fresh fusion layer and the head are trained.
pub fn improvise(
    ctx: PhaseContext,
    k: usize,
    train: &[Example],
    val: &[Example],
    prev: &[&AdapterParams],
    seed: Seed,
) -> Result<ImproviseOutput> {
    if k < 2 {
        return invalid("improvise needs at least one earlier task");
    }
    if prev.len() != k - 1 {
        return invalid(format!(
            "task {k} expects {} earlier adapters, got {}",
            k - 1,
            prev.len()
        ));
    }
    if train.is_empty() {
        return invalid("improvise on an empty subsample");
    }
    let hyper = &ctx.hyper.improvise;
    let mut head = ctx.psi0.clone();
    if k == 2 {
        let report = fit_supervised(
            BackboneSlot::Frozen(ctx.backbone),
            &mut head,
            TrainModules::FrozenAdapter(prev[0]),
            train,
            val,
            hyper,
            seed,
        )?;
        let record = PhaseRecord {
            phase: Phase::Improvise,
            examples: train.len(),
            steps: report.steps,
            losses: report.train_loss.clone(),
            val_scores: report.val_score.clone(),
            score: report.score,
            digest: phase_digest(&[&head]),
            distill_initial_loss: None,
            distill_final_loss: None,
        };
        return Ok(ImproviseOutput {
            fusion: None,
            score: report.score,
            head,
            report,
            record,
        });
    }
    let mut fusion = FusionParams::init(&ctx.backbone.config, seed.child("fusion-init"));
    let report = fit_supervised(
        BackboneSlot::Frozen(ctx.backbone),
        &mut head,
        TrainModules::Fusion {
            adapters: prev,
            fusion: &mut fusion,
        },
        train,
        val,
        hyper,
        seed,
    )?;
    let record = PhaseRecord {
        phase: Phase::Improvise,
        examples: train.len(),
        steps: report.steps,
        losses: report.train_loss.clone(),
        val_scores: report.val_score.clone(),
        score: report.score,
        digest: phase_digest(&[&head, &fusion]),
        distill_initial_loss: None,
        distill_final_loss: None,
    };
    Ok(ImproviseOutput {
        fusion: Some(fusion),
        score: report.score,
        head,
        report,
        record,
    })
}

pub struct InitializeOutput {
    pub adapter: AdapterParams,
    pub head: TaskHead,
    pub score: f64,
    pub distill: Option<DistillReport>,
    pub record: PhaseRecord,
}

/// Phase Two. For the second task the single prior adapter is copied and no
/// optimisation happens. Later tasks distil the improvised teacher into a
/// fresh adapter whose head starts as a copy of the teacher's.
pub fn initialize(
    ctx: PhaseContext,
    k: usize,
    prev: &[&AdapterParams],
    teacher_fusion: Option<&FusionParams>,
    teacher_head: &TaskHead,
    subset: &[Example],
    val: &[Example],
    seed: Seed,
) -> Result<InitializeOutput> {
    if k < 2 || prev.len() != k - 1 {
        return invalid(format!(
            "initialize for task {k} with {} earlier adapters",
            prev.len()
        ));
    }
    let hyper = &ctx.hyper.initialize;
    if k == 2 {
        let adapter = prev[0].clone();
        let head = teacher_head.clone();
        let score = ctx.evaluate(
            &head,
            Modules::Adapter(&adapter),
            val,
            hyper.eval_batch_size,
        )?;
        let record = PhaseRecord {
            phase: Phase::Initialize,
            examples: 0,
            steps: 0,
            losses: vec![],
            val_scores: vec![],
            score,
            digest: phase_digest(&[&head, &adapter]),
            distill_initial_loss: None,
            distill_final_loss: None,
        };
        return Ok(InitializeOutput {
            adapter,
            head,
            score,
            distill: None,
            record,
        });
    }
    let fusion = teacher_fusion.ok_or_else(|| {
        Error::InvalidArgument("initialize needs the improvised fusion teacher".into())
    })?;
    if subset.is_empty() {
        return invalid("initialize on an empty subset");
    }
    let teacher = Teacher {
        head: teacher_head,
        modules: Modules::Fusion {
            adapters: prev,
            fusion,
        },
    };
    let mut adapter = AdapterParams::init(
        &ctx.backbone.config,
        ctx.hyper.bottleneck,
        seed.child("adapter-init"),
    )?;
    let mut head = teacher_head.clone();
    let report = fit_distill(
        ctx.backbone,
        &teacher,
        &mut head,
        &mut adapter,
        subset,
        hyper,
        seed,
    )?;
    let score = ctx.evaluate(
        &head,
        Modules::Adapter(&adapter),
        val,
        hyper.eval_batch_size,
    )?;
    let record = PhaseRecord {
        phase: Phase::Initialize,
        examples: subset.len(),
        steps: report.steps,
        losses: report.epoch_loss.clone(),
        val_scores: vec![],
        score,
        digest: phase_digest(&[&head, &adapter]),
        distill_initial_loss: Some(report.initial_loss),
        distill_final_loss: Some(report.final_loss),
    };
    Ok(InitializeOutput {
        adapter,
        head,
        score,
        distill: Some(report),
        record,
    })
}

pub struct TrainOutput {
    pub adapter: AdapterParams,
    pub head: TaskHead,
    pub score: f64,
    pub report: FitReport,
    pub record: PhaseRecord,
}

/// Phase Three: supervised training of the initialised adapter and head on
/// the full task data.
pub fn train_adapter(
    ctx: PhaseContext,
    mut adapter: AdapterParams,
    mut head: TaskHead,
    train: &[Example],
    val: &[Example],
    seed: Seed,
) -> Result<TrainOutput> {
    let report = fit_supervised(
        BackboneSlot::Frozen(ctx.backbone),
        &mut head,
        TrainModules::Adapter(&mut adapter),
        train,
        val,
        &ctx.hyper.train,
        seed,
    )?;
    let record = PhaseRecord {
        phase: Phase::Train,
        examples: train.len(),
        steps: report.steps,
        losses: report.train_loss.clone(),
        val_scores: report.val_score.clone(),
        score: report.score,
        digest: phase_digest(&[&head, &adapter]),
        distill_initial_loss: None,
        distill_final_loss: None,
    };
    Ok(TrainOutput {
        score: report.score,
        adapter,
        head,
        report,
        record,
    })
}

/// Result of one I2I step for task `k ≥ 2`.
#[derive(Clone)]
pub struct I2IStep {
    pub adapter: AdapterParams,
    pub head: TaskHead,
    pub score: f64,
    pub trace: PhaseTrace,
    pub distill: Option<DistillReport>,
}

/// Phase seeds of one task, derived from the task seed.
pub fn phase_seed(task_seed: Seed, phase: Phase) -> Seed {
    match phase {
        Phase::Improvise => task_seed.child("improvise"),
        Phase::Initialize => task_seed.child("initialize"),
        Phase::Train => task_seed.child("train"),
    }
}

/// Low-shot subset shared by every variant, so that smaller budgets see a
/// subset of what larger ones see.
pub fn lowshot_seed(task_seed: Seed) -> Seed {
    task_seed.child("lowshot")
}

/// Runs the three phases for task `k ≥ 2`. `improvised` lets a caller
/// supply an already computed Phase One result for identical inputs.
pub fn i2i_step(
    ctx: PhaseContext,
    k: usize,
    variant: I2IVariant,
    train: &[Example],
    val: &[Example],
    prev: &[&AdapterParams],
    task_seed: Seed,
    improvised: Option<ImproviseOutput>,
) -> Result<I2IStep> {
    variant.validate()?;
    let improvise_set = subsample(train, variant.improvise_fraction, lowshot_seed(task_seed))?;
    let phase1 = match improvised {
        Some(p) => p,
        None => improvise(
            ctx,
            k,
            &improvise_set,
            val,
            prev,
            phase_seed(task_seed, Phase::Improvise),
        )?,
    };
    let init_set = subsample(train, variant.initialize_fraction, lowshot_seed(task_seed))?;
    let phase2 = initialize(
        ctx,
        k,
        prev,
        phase1.fusion.as_ref(),
        &phase1.head,
        &init_set,
        val,
        phase_seed(task_seed, Phase::Initialize),
    )?;
    // The fusion layer ends its life here.
    drop(phase1.fusion);
    let phase3 = train_adapter(
        ctx,
        phase2.adapter,
        phase2.head,
        train,
        val,
        phase_seed(task_seed, Phase::Train),
    )?;
    Ok(I2IStep {
        adapter: phase3.adapter,
        head: phase3.head,
        score: phase3.score,
        trace: PhaseTrace {
            phases: vec![phase1.record, phase2.record, phase3.record],
        },
        distill: phase2.distill,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(I2IVariant::preset("FL").unwrap(), I2IVariant::FL);
        assert_eq!(I2IVariant::LL.name(), Some("LL"));
        assert!(I2IVariant::preset("XX").is_err());
        assert!(I2IVariant {
            improvise_fraction: 0.0,
            initialize_fraction: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ceiling_sizes() {
        assert_eq!(subsample_indices(100, 0.05, Seed(1)).unwrap().len(), 5);
        assert_eq!(subsample_indices(2000, 0.05, Seed(1)).unwrap().len(), 100);
        assert_eq!(subsample_indices(7, 0.05, Seed(1)).unwrap().len(), 1);
        assert_eq!(
            subsample_indices(10, 1.0, Seed(1)).unwrap(),
            (0..10).collect::<Vec<_>>()
        );
        assert!(subsample_indices(10, 1.5, Seed(1)).is_err());
        assert!(subsample_indices(0, 0.5, Seed(1)).is_err());
    }
}
