//! Supervised training with early stopping, and hidden-state distillation.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, FusionParams};
use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneParams, TaskHead};
use crate::error::{invalid, Error, Result};
use crate::forward::{forward_on_tape, Batch, Dropout, Model, Modules};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{BoundSet, ParamSet};
use crate::rng::Seed;
use crate::tasks::Example;
use crate::tensor::Tensor;

/// Budget and optimiser settings of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for PhaseHyper {
    fn default() -> Self {
        PhaseHyper {
            epochs: 6,
            batch_size: 32,
            eval_batch_size: 250,
            patience: 3,
            adam: AdamConfig::default(),
        }
    }
}

impl PhaseHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(Error::Config(format!("invalid adam settings {a:?}")));
        }
        Ok(())
    }
}

/// The backbone of a training run: shared and frozen, or a private copy
/// being finetuned.
pub enum BackboneSlot<'a> {
    Frozen(&'a BackboneParams),
    Trainable(&'a mut BackboneParams),
}

/// Task modules of a training run and which of them learn.
pub enum TrainModules<'a> {
    None,
    FrozenAdapter(&'a AdapterParams),
    Adapter(&'a mut AdapterParams),
    Fusion {
        adapters: &'a [&'a AdapterParams],
        fusion: &'a mut FusionParams,
    },
}

/// Per-epoch history of a supervised fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub val_score: Vec<f64>,
    pub steps: u64,
    /// 1-based epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    /// Validation score of the returned parameters.
    pub score: f64,
}

struct Trainer<'a, 'b> {
    backbone: BackboneSlot<'a>,
    head: &'b mut TaskHead,
    modules: TrainModules<'a>,
}

#[derive(Clone)]
struct Snapshot {
    head: TaskHead,
    adapter: Option<AdapterParams>,
    fusion: Option<FusionParams>,
    backbone: Option<BackboneParams>,
}

impl Trainer<'_, '_> {
    fn backbone(&self) -> &BackboneParams {
        match &self.backbone {
            BackboneSlot::Frozen(b) => b,
            BackboneSlot::Trainable(b) => b,
        }
    }

    fn model(&self) -> Model<'_> {
        let modules = match &self.modules {
            TrainModules::None => Modules::None,
            TrainModules::FrozenAdapter(a) => Modules::Adapter(a),
            TrainModules::Adapter(a) => Modules::Adapter(a),
            TrainModules::Fusion { adapters, fusion } => Modules::Fusion { adapters, fusion },
        };
        Model::new(self.backbone(), self.head, modules)
    }

    fn trainable_tensors(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.head.tensors_mut();
        match &mut self.modules {
            TrainModules::Adapter(a) => out.extend(a.tensors_mut()),
            TrainModules::Fusion { fusion, .. } => out.extend(fusion.tensors_mut()),
            TrainModules::None | TrainModules::FrozenAdapter(_) => {}
        }
        if let BackboneSlot::Trainable(b) = &mut self.backbone {
            out.extend(b.tensors_mut());
        }
        out
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            head: self.head.clone(),
            adapter: match &self.modules {
                TrainModules::Adapter(a) => Some((**a).clone()),
                _ => None,
            },
            fusion: match &self.modules {
                TrainModules::Fusion { fusion, .. } => Some((**fusion).clone()),
                _ => None,
            },
            backbone: match &self.backbone {
                BackboneSlot::Trainable(b) => Some((**b).clone()),
                BackboneSlot::Frozen(_) => None,
            },
        }
    }

    fn restore(&mut self, s: Snapshot) {
        *self.head = s.head;
        if let (TrainModules::Adapter(a), Some(v)) = (&mut self.modules, s.adapter) {
            **a = v;
        }
        if let (TrainModules::Fusion { fusion, .. }, Some(v)) = (&mut self.modules, s.fusion) {
            **fusion = v;
        }
        if let (BackboneSlot::Trainable(b), Some(v)) = (&mut self.backbone, s.backbone) {
            **b = v;
        }
    }

    /// One forward/backward on `batch`; returns the loss and the gradients
    /// in `trainable_tensors` order.
    fn gradients(&self, batch: &Batch, dropout_seed: Seed) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let bb_trainable = matches!(self.backbone, BackboneSlot::Trainable(_));
        let bbv = self.backbone().bind(&mut tape, bb_trainable)?;
        let hv = self.head.bind(&mut tape, true);
        let (mods, module_vars): (_, Vec<Var>) = match &self.modules {
            TrainModules::None => (Modules::None.bind(&mut tape, false, false)?, vec![]),
            TrainModules::FrozenAdapter(a) => {
                (Modules::Adapter(a).bind(&mut tape, false, false)?, vec![])
            }
            TrainModules::Adapter(a) => {
                let m = Modules::Adapter(a).bind(&mut tape, true, false)?;
                let vars = match &m {
                    crate::forward::BoundModules::Adapter(v) => v.var_list(),
                    _ => unreachable!(),
                };
                (m, vars)
            }
            TrainModules::Fusion { adapters, fusion } => {
                let m = Modules::Fusion { adapters, fusion }.bind(&mut tape, false, true)?;
                let vars = match &m {
                    crate::forward::BoundModules::Fusion { fusion, .. } => fusion.var_list(),
                    _ => unreachable!(),
                };
                (m, vars)
            }
        };
        let cfg = &self.backbone().config;
        let mut rng = dropout_seed.rng();
        let dropout = (cfg.dropout > 0.0).then(|| Dropout {
            rate: cfg.dropout,
            rng: &mut rng,
        });
        let out = forward_on_tape(&mut tape, &bbv, &hv, &mods, batch, cfg.n_heads, dropout)?;
        let loss = tape.cross_entropy(out.logits, &batch.targets)?;
        let loss_value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let mut vars = hv.var_list();
        vars.extend(module_vars);
        if bb_trainable {
            vars.extend(bbv.var_list());
        }
        Ok((
            loss_value,
            vars.into_iter().map(|v| grads.take(v)).collect(),
        ))
    }
}

fn shuffled<'e>(data: &'e [Example], seed: Seed) -> Vec<&'e Example> {
    let mut order: Vec<&Example> = data.iter().collect();
    seed.rng().shuffle(&mut order);
    order
}

/// Cross-entropy training of the head and whichever modules are trainable.
/// After every epoch the validation exact match is measured; training stops
/// after `patience` epochs without improvement and the best epoch's
/// parameters are restored. With zero epochs nothing changes and the current
/// score is reported.
pub fn fit_supervised(
    backbone: BackboneSlot,
    head: &mut TaskHead,
    modules: TrainModules,
    train: &[Example],
    val: &[Example],
    hyper: &PhaseHyper,
    seed: Seed,
) -> Result<FitReport> {
    hyper.validate()?;
    if train.is_empty() || val.is_empty() {
        return invalid("training and validation sets must be nonempty");
    }
    let mut t = Trainer {
        backbone,
        head,
        modules,
    };
    let mut report = FitReport::default();
    if hyper.epochs == 0 {
        report.score = t.model().evaluate(val, hyper.eval_batch_size)?;
        return Ok(report);
    }
    let mut adam = {
        let tensors = t.trainable_tensors();
        let refs: Vec<&Tensor> = tensors.iter().map(|x| &**x).collect();
        AdamState::new(hyper.adam, &refs)
    };
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut since_best = 0;
    for epoch in 1..=hyper.epochs {
        let order = shuffled(train, seed.child_idx("shuffle", epoch));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch = Batch::from_examples(&t.backbone().config, chunk)?;
            let (loss, grads) =
                t.gradients(&batch, seed.child_idx("dropout", epoch * 1_000_003 + b))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(|g| g.as_ref()).collect();
            let mut params = t.trainable_tensors();
            adam.step(&mut params, &grad_refs)?;
            total += loss;
            batches += 1;
        }
        report.train_loss.push(total / batches as f64);
        let score = t.model().evaluate(val, hyper.eval_batch_size)?;
        report.val_score.push(score);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, t.snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
            if hyper.patience > 0 && since_best >= hyper.patience {
                break;
            }
        }
    }
    report.steps = adam.steps();
    let (score, epoch, snap) = best.expect("at least one epoch ran");
    t.restore(snap);
    report.best_epoch = epoch;
    report.score = score;
    Ok(report)
}

/// A frozen network whose final hidden states are distillation targets.
pub struct Teacher<'a> {
    pub head: &'a TaskHead,
    pub modules: Modules<'a>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// Mean distillation loss over the data before any update.
    pub initial_loss: f64,
    /// Same measure after training.
    pub final_loss: f64,
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

struct TeacherCache {
    target_len: usize,
    h_enc: Vec<Vec<f64>>,
    h_dec: Vec<Vec<f64>>,
}

impl TeacherCache {
    fn build(
        backbone: &BackboneParams,
        teacher: &Teacher,
        data: &[Example],
        chunk: usize,
    ) -> Result<TeacherCache> {
        let target_len = data.iter().map(|e| e.answer.len() + 1).max().unwrap_or(1);
        let model = Model::new(backbone, teacher.head, teacher.modules);
        let mut h_enc = Vec::with_capacity(data.len());
        let mut h_dec = Vec::with_capacity(data.len());
        for part in data.chunks(chunk.max(1)) {
            let refs: Vec<&Example> = part.iter().collect();
            let batch = Batch::with_target_len(&backbone.config, &refs, target_len)?;
            let out = model.forward(&batch)?;
            let (se, sd) = (
                out.h_enc.numel() / part.len(),
                out.h_dec.numel() / part.len(),
            );
            h_enc.extend(out.h_enc.data().chunks(se).map(<[f64]>::to_vec));
            h_dec.extend(out.h_dec.data().chunks(sd).map(<[f64]>::to_vec));
        }
        Ok(TeacherCache {
            target_len,
            h_enc,
            h_dec,
        })
    }

    fn targets(&self, idx: &[usize], d: usize) -> Result<(Tensor, Tensor)> {
        let cat = |rows: &Vec<Vec<f64>>| -> Result<Tensor> {
            let data: Vec<f64> = idx.iter().flat_map(|&i| rows[i].iter().copied()).collect();
            let n = data.len() / d;
            Tensor::new(vec![n, d], data)
        };
        Ok((cat(&self.h_enc)?, cat(&self.h_dec)?))
    }
}

fn distill_loss_on_tape(
    tape: &mut Tape,
    backbone: &BackboneParams,
    student_head: &TaskHead,
    student: &AdapterParams,
    batch: &Batch,
    targets: (Tensor, Tensor),
    trainable: bool,
) -> Result<(Var, Vec<Var>)> {
    let bbv = backbone.bind(tape, false)?;
    let hv = student_head.bind(tape, trainable);
    let mods = Modules::Adapter(student).bind(tape, trainable, false)?;
    let out = forward_on_tape(tape, &bbv, &hv, &mods, batch, backbone.config.n_heads, None)?;
    let te = tape.constant(targets.0);
    let td = tape.constant(targets.1);
    let le = tape.mse(out.h_enc, te)?;
    let ld = tape.mse(out.h_dec, td)?;
    let loss = tape.add(le, ld)?;
    let mut vars = hv.var_list();
    if let crate::forward::BoundModules::Adapter(a) = &mods {
        vars.extend(a.var_list());
    }
    Ok((loss, vars))
}

/// Mean of the distillation loss over `data` in chunks.
fn mean_distill_loss(
    backbone: &BackboneParams,
    head: &TaskHead,
    student: &AdapterParams,
    cache: &TeacherCache,
    data: &[Example],
    chunk: usize,
) -> Result<f64> {
    let d = backbone.config.d_model;
    let mut total = 0.0;
    let mut seen = 0;
    for (c, part) in data.chunks(chunk.max(1)).enumerate() {
        let refs: Vec<&Example> = part.iter().collect();
        let idx: Vec<usize> = (c * chunk..c * chunk + part.len()).collect();
        let batch = Batch::with_target_len(&backbone.config, &refs, cache.target_len)?;
        let mut tape = Tape::new();
        let (loss, _) = distill_loss_on_tape(
            &mut tape,
            backbone,
            head,
            student,
            &batch,
            cache.targets(&idx, d)?,
            false,
        )?;
        total += tape.value(loss).item() * part.len() as f64;
        seen += part.len();
    }
    Ok(total / seen as f64)
}

/// Trains `student` and `student_head` so that the frozen backbone with the
/// student reproduces the teacher's final encoder and decoder states:
/// `MSE(h_enc) + MSE(h_dec)` under teacher forcing. Answer tokens only feed
/// the decoder; no label loss is used.
pub fn fit_distill(
    backbone: &BackboneParams,
    teacher: &Teacher,
    student_head: &mut TaskHead,
    student: &mut AdapterParams,
    data: &[Example],
    hyper: &PhaseHyper,
    seed: Seed,
) -> Result<DistillReport> {
    hyper.validate()?;
    if data.is_empty() {
        return invalid("distillation needs at least one example");
    }
    let d = backbone.config.d_model;
    let cache = TeacherCache::build(backbone, teacher, data, hyper.eval_batch_size)?;
    let mut report = DistillReport {
        initial_loss: mean_distill_loss(
            backbone,
            student_head,
            student,
            &cache,
            data,
            hyper.eval_batch_size,
        )?,
        ..Default::default()
    };
    let mut adam = {
        let mut refs: Vec<&Tensor> = student_head
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        refs.extend(student.named_tensors().into_iter().map(|(_, t)| t));
        AdamState::new(hyper.adam, &refs)
    };
    for epoch in 1..=hyper.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        seed.child_idx("shuffle", epoch).rng().shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(hyper.batch_size) {
            let refs: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let batch = Batch::with_target_len(&backbone.config, &refs, cache.target_len)?;
            let mut tape = Tape::new();
            let (loss, vars) = distill_loss_on_tape(
                &mut tape,
                backbone,
                student_head,
                student,
                &batch,
                cache.targets(idx, d)?,
                true,
            )?;
            let lv = tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let owned: Vec<Option<Tensor>> = vars.into_iter().map(|v| grads.take(v)).collect();
            let grad_refs: Vec<Option<&Tensor>> = owned.iter().map(|g| g.as_ref()).collect();
            let mut params = student_head.tensors_mut();
            params.extend(student.tensors_mut());
            adam.step(&mut params, &grad_refs)?;
            total += lv;
            batches += 1;
        }
        report.epoch_loss.push(total / batches as f64);
    }
    report.steps = adam.steps();
    report.final_loss = mean_distill_loss(
        backbone,
        student_head,
        student,
        &cache,
        data,
        hyper.eval_batch_size,
    )?;
    Ok(report)
}

/// Per-phase budgets of every algorithm, plus the adapter bottleneck.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSet {
    pub bottleneck: usize,
    /// Vanilla adapters, AdapterFusion's first phase, ClosestTaskInit and
    /// the first task of every schedule.
    pub adapter: PhaseHyper,
    pub improvise: PhaseHyper,
    pub initialize: PhaseHyper,
    /// Final supervised phase of I2I.
    pub train: PhaseHyper,
    /// AdapterFusion's composition phase.
    pub fusion: PhaseHyper,
    pub knowledge_free: PhaseHyper,
    pub full_finetune: PhaseHyper,
}

impl Default for HyperSet {
    fn default() -> Self {
        HyperSet {
            bottleneck: 8,
            adapter: PhaseHyper::default(),
            improvise: PhaseHyper::default(),
            initialize: PhaseHyper::default(),
            train: PhaseHyper::default(),
            fusion: PhaseHyper::default(),
            knowledge_free: PhaseHyper::default(),
            full_finetune: PhaseHyper::default(),
        }
    }
}

impl HyperSet {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 {
            return Err(Error::Config("bottleneck must be at least 1".into()));
        }
        for h in [
            &self.adapter,
            &self.improvise,
            &self.initialize,
            &self.train,
            &self.fusion,
            &self.knowledge_free,
            &self.full_finetune,
        ] {
            h.validate()?;
        }
        Ok(())
    }

    /// Sets the epoch budget of every phase.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        for h in [
            &mut self.adapter,
            &mut self.improvise,
            &mut self.initialize,
            &mut self.train,
            &mut self.fusion,
            &mut self.knowledge_free,
            &mut self.full_finetune,
        ] {
            h.epochs = epochs;
        }
        self
    }
}
