//! Vanilla adapters, AdapterFusion, ClosestTaskInit, the knowledge-free
//! head-only control and full finetuning.

use crate::adapter::{AdapterParams, FusionParams};
use crate::backbone::TaskHead;
use crate::error::{invalid, Error, Result};
use crate::forward::encode_pooled;
use crate::i2i::PhaseContext;
use crate::rng::Seed;
use crate::tasks::Example;
use crate::train::{fit_supervised, BackboneSlot, FitReport, TrainModules};

#[derive(Clone)]
pub struct AdapterOutput {
    pub adapter: AdapterParams,
    pub head: TaskHead,
    pub score: f64,
    pub report: FitReport,
}

/// A fresh adapter and a copy of Ψ₀ trained on the task alone.
pub fn train_vanilla(
    ctx: PhaseContext,
    train: &[Example],
    val: &[Example],
    seed: Seed,
) -> Result<AdapterOutput> {
    let mut adapter = AdapterParams::init(
        &ctx.backbone.config,
        ctx.hyper.bottleneck,
        seed.child("adapter-init"),
    )?;
    let mut head = ctx.psi0.clone();
    let report = fit_supervised(
        BackboneSlot::Frozen(ctx.backbone),
        &mut head,
        TrainModules::Adapter(&mut adapter),
        train,
        val,
        &ctx.hyper.adapter,
        seed,
    )?;
    Ok(AdapterOutput {
        score: report.score,
        adapter,
        head,
        report,
    })
}

pub struct FusionOutput {
    pub adapter: AdapterParams,
    pub fusion: FusionParams,
    pub head: TaskHead,
    pub score: f64,
    pub extraction: FitReport,
    pub composition: FitReport,
}

/// Two-phase AdapterFusion for task `k ≥ 2`: a fresh adapter is trained
/// exactly as [`train_vanilla`] would, then a fusion layer over all `k`
/// frozen adapters is trained together with the head. `extracted` may carry
/// a precomputed first phase for identical inputs.
pub fn train_adapterfusion(
    ctx: PhaseContext,
    k: usize,
    train: &[Example],
    val: &[Example],
    prev: &[&AdapterParams],
    seed: Seed,
    extracted: Option<AdapterOutput>,
) -> Result<FusionOutput> {
    if k < 2 || prev.len() != k - 1 {
        return invalid(format!(
            "AdapterFusion for task {k} with {} earlier adapters",
            prev.len()
        ));
    }
    let first = match extracted {
        Some(e) => e,
        None => train_vanilla(ctx, train, val, seed)?,
    };
    let mut all: Vec<&AdapterParams> = prev.to_vec();
    all.push(&first.adapter);
    let mut fusion = FusionParams::init(&ctx.backbone.config, seed.child("fusion-init"));
    let mut head = first.head.clone();
    let composition = fit_supervised(
        BackboneSlot::Frozen(ctx.backbone),
        &mut head,
        TrainModules::Fusion {
            adapters: &all,
            fusion: &mut fusion,
        },
        train,
        val,
        &ctx.hyper.fusion,
        seed.child("fusion"),
    )?;
    Ok(FusionOutput {
        adapter: first.adapter,
        fusion,
        head,
        score: composition.score,
        extraction: first.report,
        composition,
    })
}

/// Cosine similarity. Identical nonzero vectors give exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid("cosine needs two nonempty vectors of equal length");
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let (na, nb) = (dot(a, a), dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return invalid("cosine with a zero vector");
    }
    let c = dot(a, b) / (na * nb).sqrt();
    Ok(c.clamp(-1.0, 1.0))
}

/// Index of the largest similarity; ties go to the earliest entry.
pub fn select_closest(similarities: &[f64]) -> Result<usize> {
    if similarities.is_empty() {
        return invalid("no earlier tasks to choose from");
    }
    let mut best = 0;
    for (i, &s) in similarities.iter().enumerate() {
        if s > similarities[best] {
            best = i;
        }
    }
    Ok(best)
}

/// One earlier task as seen by ClosestTaskInit.
pub struct PriorTask<'a> {
    pub adapter: &'a AdapterParams,
    pub head: &'a TaskHead,
    pub representation: &'a [f64],
}

pub struct ClosestOutput {
    pub source: usize,
    pub similarities: Vec<f64>,
    /// Pooled representation of the new task under Ψ₀, used for selection.
    pub query_representation: Vec<f64>,
    pub adapter: AdapterParams,
    pub head: TaskHead,
    pub score: f64,
    pub report: FitReport,
}

/// Copies the adapter and head of the most similar earlier task, then trains
/// them on the new task.
pub fn closest_task_init(
    ctx: PhaseContext,
    train: &[Example],
    val: &[Example],
    priors: &[PriorTask],
    seed: Seed,
) -> Result<ClosestOutput> {
    if priors.is_empty() {
        return invalid("ClosestTaskInit needs at least one earlier task");
    }
    let query = encode_pooled(
        ctx.backbone,
        ctx.psi0,
        train,
        ctx.hyper.adapter.eval_batch_size,
    )?;
    let similarities = priors
        .iter()
        .map(|p| cosine(&query, p.representation))
        .collect::<Result<Vec<_>>>()?;
    let source = select_closest(&similarities)?;
    let mut adapter = priors[source].adapter.clone();
    let mut head = priors[source].head.clone();
    let report = fit_supervised(
        BackboneSlot::Frozen(ctx.backbone),
        &mut head,
        TrainModules::Adapter(&mut adapter),
        train,
        val,
        &ctx.hyper.adapter,
        seed,
    )?;
    Ok(ClosestOutput {
        source,
        similarities,
        query_representation: query,
        adapter,
        head,
        score: report.score,
        report,
    })
}

/// Cosine similarities between task representations.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSimilarityMatrix {
    pub labels: Vec<String>,
    /// `None` on the diagonal.
    pub values: Vec<Vec<Option<f64>>>,
}

impl TaskSimilarityMatrix {
    pub fn from_representations(labels: &[String], reps: &[Vec<f64>]) -> Result<Self> {
        if labels.len() != reps.len() {
            return invalid("one representation per label");
        }
        let n = reps.len();
        let mut values = vec![vec![None; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let c = cosine(&reps[i], &reps[j])?;
                values[i][j] = Some(c);
                values[j][i] = Some(c);
            }
        }
        Ok(TaskSimilarityMatrix {
            labels: labels.to_vec(),
            values,
        })
    }

    /// Which earlier task the task at `row` would copy from, given that the
    /// tasks in `earlier` have already been learned.
    pub fn select(&self, row: usize, earlier: &[usize]) -> Result<usize> {
        let sims = earlier
            .iter()
            .map(|&j| {
                self.values[row][j].ok_or_else(|| {
                    Error::InvalidArgument("a task is never compared to itself".into())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(earlier[select_closest(&sims)?])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                out.push(',');
                match v {
                    Some(x) => out.push_str(&format!("{x:.4}")),
                    None => out.push('-'),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty similarity table".into()))?;
        let labels: Vec<String> = header
            .split(',')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        let mut values = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != labels.len() + 1 {
                return Err(Error::Format(format!(
                    "row {:?} has {} cells",
                    cells[0],
                    cells.len()
                )));
            }
            let row = cells[1..]
                .iter()
                .map(|c| match c.trim() {
                    "-" | "" => Ok(None),
                    s => s
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::Format(format!("bad similarity {s:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        if values.len() != labels.len() {
            return Err(Error::Format("similarity table is not square".into()));
        }
        Ok(TaskSimilarityMatrix { labels, values })
    }
}

/// Trains only a copy of Ψ₀; no adapters anywhere.
pub fn knowledge_free(
    ctx: PhaseContext,
    train: &[Example],
    val: &[Example],
    seed: Seed,
) -> Result<(TaskHead, FitReport)> {
    let mut head = ctx.psi0.clone();
    let report = fit_supervised(
        BackboneSlot::Frozen(ctx.backbone),
        &mut head,
        TrainModules::None,
        train,
        val,
        &ctx.hyper.knowledge_free,
        seed,
    )?;
    Ok((head, report))
}

/// Trains a private copy of the whole backbone together with a copy of Ψ₀.
/// The shared backbone is never touched.
pub fn full_finetune(
    ctx: PhaseContext,
    train: &[Example],
    val: &[Example],
    seed: Seed,
) -> Result<FitReport> {
    let mut backbone = ctx.backbone.thawed_copy();
    let mut head = ctx.psi0.clone();
    fit_supervised(
        BackboneSlot::Trainable(&mut backbone),
        &mut head,
        TrainModules::None,
        train,
        val,
        &ctx.hyper.full_finetune,
        seed,
    )
}
