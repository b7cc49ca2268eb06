//! Forward pass of the encoder–decoder with optional adapters or fusion,
//! greedy decoding and pooled encoder representations.

use crate::adapter::{
    adapter_forward, fusion_forward, AdapterParams, AdapterVars, FusionParams, FusionVars,
};
use crate::autodiff::{AttnLayout, Tape, Var};
use crate::backbone::{
    AttnVars, BackboneParams, BackboneVars, FeedForwardVars, NormVars, TaskHead, TaskHeadVars,
};
use crate::config::BackboneConfig;
use crate::error::{invalid, Result};
use crate::rng::Rng64;
use crate::tasks::{vocab, Example};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Fixed-shape minibatch. Every example must share its slot count and
/// question length; decoder rows are padded to the longest answer + EOS.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub n_slots: usize,
    pub question_len: usize,
    /// Decoder length (longest answer in the batch plus EOS).
    pub target_len: usize,
    /// `[size·n_slots × feature_dim]`
    pub features: Tensor,
    pub questions: Vec<usize>,
    /// BOS followed by the answer, PAD-filled.
    pub decoder_inputs: Vec<usize>,
    /// Answer followed by EOS; `None` past the end.
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    pub fn from_examples(config: &BackboneConfig, examples: &[&Example]) -> Result<Batch> {
        Batch::build(config, examples, None)
    }

    /// Like [`Batch::from_examples`] with a fixed decoder length, so batches
    /// of different composition line up row for row.
    pub fn with_target_len(
        config: &BackboneConfig,
        examples: &[&Example],
        target_len: usize,
    ) -> Result<Batch> {
        Batch::build(config, examples, Some(target_len))
    }

    fn build(
        config: &BackboneConfig,
        examples: &[&Example],
        fixed_len: Option<usize>,
    ) -> Result<Batch> {
        let first = match examples.first() {
            Some(e) => e,
            None => return invalid("empty batch"),
        };
        let f = config.feature_dim;
        if first.features.is_empty() || first.features.len() % f != 0 {
            return invalid(format!(
                "scene features of length {} do not split into rows of {f}",
                first.features.len()
            ));
        }
        let n_slots = first.features.len() / f;
        let question_len = first.question.len();
        if question_len == 0 {
            return invalid("empty question");
        }
        if n_slots + question_len > config.max_src_len {
            return invalid(format!(
                "source length {} exceeds max_src_len {}",
                n_slots + question_len,
                config.max_src_len
            ));
        }
        let mut target_len = 1;
        for e in examples {
            if e.features.len() != first.features.len() || e.question.len() != question_len {
                return invalid("examples in one batch must share slot count and question length");
            }
            if e.answer.len() + 1 > config.max_tgt_len {
                return invalid(format!(
                    "answer of {} tokens exceeds max_tgt_len {}",
                    e.answer.len(),
                    config.max_tgt_len
                ));
            }
            for &t in e.question.iter().chain(&e.answer) {
                if t >= config.vocab_size {
                    return invalid(format!(
                        "token id {t} outside vocabulary of {}",
                        config.vocab_size
                    ));
                }
            }
            target_len = target_len.max(e.answer.len() + 1);
        }
        if let Some(t) = fixed_len {
            if t < target_len || t > config.max_tgt_len {
                return invalid(format!(
                    "decoder length {t} cannot hold answers needing {target_len}"
                ));
            }
            target_len = t;
        }
        let size = examples.len();
        let mut features = Vec::with_capacity(size * n_slots * f);
        let mut questions = Vec::with_capacity(size * question_len);
        let mut decoder_inputs = Vec::with_capacity(size * target_len);
        let mut targets = Vec::with_capacity(size * target_len);
        for e in examples {
            features.extend_from_slice(&e.features);
            questions.extend_from_slice(&e.question);
            for t in 0..target_len {
                decoder_inputs.push(match t {
                    0 => vocab::BOS,
                    t if t <= e.answer.len() => e.answer[t - 1],
                    _ => vocab::PAD,
                });
                targets.push(match t {
                    t if t < e.answer.len() => Some(e.answer[t]),
                    t if t == e.answer.len() => Some(vocab::EOS),
                    _ => None,
                });
            }
        }
        Ok(Batch {
            size,
            n_slots,
            question_len,
            target_len,
            features: Tensor::new(vec![size * n_slots, f], features)?,
            questions,
            decoder_inputs,
            targets,
        })
    }

    pub fn src_len(&self) -> usize {
        self.n_slots + self.question_len
    }
}

/// Task-specific modules present in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Modules<'a> {
    None,
    Adapter(&'a AdapterParams),
    Fusion {
        adapters: &'a [&'a AdapterParams],
        fusion: &'a FusionParams,
    },
}

/// Modules bound to a tape.
#[derive(Clone, Debug)]
pub enum BoundModules {
    None,
    Adapter(AdapterVars),
    Fusion {
        adapters: Vec<AdapterVars>,
        fusion: FusionVars,
    },
}

impl<'a> Modules<'a> {
    /// Binds every module; `trainable` selects which ones need gradients.
    pub fn bind(
        &self,
        tape: &mut Tape,
        adapter_trainable: bool,
        fusion_trainable: bool,
    ) -> Result<BoundModules> {
        Ok(match *self {
            Modules::None => BoundModules::None,
            Modules::Adapter(a) => BoundModules::Adapter(a.bind(tape, adapter_trainable)),
            Modules::Fusion { adapters, fusion } => {
                if adapters.is_empty() {
                    return invalid("fusion requires at least one adapter");
                }
                BoundModules::Fusion {
                    adapters: adapters.iter().map(|a| a.bind(tape, false)).collect(),
                    fusion: fusion.bind(tape, fusion_trainable),
                }
            }
        })
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[size·target_len × vocab]`
    pub logits: Var,
    /// Final encoder states, `[size·src_len × d]`.
    pub h_enc: Var,
    /// Final decoder states, `[size·target_len × d]`.
    pub h_dec: Var,
    /// Per-example mean over encoder positions, `[size × d]`.
    pub pooled: Var,
    /// Fusion weights per insertion point, `[rows × adapters]` row-major.
    pub fusion_alpha: Vec<Vec<f64>>,
}

/// Optional dropout source; `None` runs the deterministic forward.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut Rng64,
}

struct Ctx<'m, 'r> {
    modules: &'m BoundModules,
    dropout: Option<Dropout<'r>>,
    alphas: Vec<Vec<f64>>,
    heads: usize,
}

impl Ctx<'_, '_> {
    fn drop(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(d) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if d.rate == 0.0 {
            return Ok(x);
        }
        let t = tape.value(x);
        let keep = 1.0 / (1.0 - d.rate);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if d.rng.uniform() < d.rate { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(t.shape().to_vec(), mask)?);
        tape.mul(x, m)
    }

    fn point(&mut self, tape: &mut Tape, idx: usize, x: Var) -> Result<Var> {
        match self.modules {
            BoundModules::None => Ok(x),
            BoundModules::Adapter(a) => adapter_forward(tape, &a[idx], x),
            BoundModules::Fusion { adapters, fusion } => {
                let outs = adapters
                    .iter()
                    .map(|a| adapter_forward(tape, &a[idx], x))
                    .collect::<Result<Vec<_>>>()?;
                let (y, alpha) = fusion_forward(tape, &fusion[idx], x, &outs)?;
                self.alphas.push(alpha);
                Ok(y)
            }
        }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_tiled(y, b)
}

fn norm(tape: &mut Tape, x: Var, n: &NormVars) -> Result<Var> {
    tape.layernorm(x, n.gain, n.bias, LN_EPS)
}

fn attend(tape: &mut Tape, q_in: Var, kv_in: Var, p: &AttnVars, layout: AttnLayout) -> Result<Var> {
    let q = linear(tape, q_in, p.wq, p.bq)?;
    let k = linear(tape, kv_in, p.wk, p.bk)?;
    let v = linear(tape, kv_in, p.wv, p.bv)?;
    let a = tape.attention(q, k, v, layout)?;
    linear(tape, a, p.wo, p.bo)
}

fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForwardVars) -> Result<Var> {
    let h = linear(tape, x, p.w1, p.b1)?;
    let h = tape.relu(h)?;
    linear(tape, h, p.w2, p.b2)
}

fn encode(
    tape: &mut Tape,
    bb: &BackboneVars,
    head: &TaskHeadVars,
    batch: &Batch,
    ctx: &mut Ctx,
) -> Result<Var> {
    let feats = tape.constant(batch.features.clone());
    let projected = linear(tape, feats, head.weight, head.bias)?;
    let question = tape.gather(bb.token_embedding, &batch.questions)?;
    let x = tape.concat_seq(projected, question, batch.size)?;
    let pos = tape.slice_rows(bb.enc_positions, 0, batch.src_len())?;
    let mut x = tape.add_tiled(x, pos)?;
    let layout = AttnLayout {
        batch: batch.size,
        heads: ctx.heads,
        q_len: batch.src_len(),
        kv_len: batch.src_len(),
        causal: false,
    };
    for (l, layer) in bb.encoder.iter().enumerate() {
        let h = norm(tape, x, &layer.norm_attn)?;
        let a = attend(tape, h, h, &layer.attn, layout)?;
        let a = ctx.drop(tape, a)?;
        x = tape.add(x, a)?;
        let h = norm(tape, x, &layer.norm_ff)?;
        let f = feed_forward(tape, h, &layer.ff)?;
        let f = ctx.drop(tape, f)?;
        x = tape.add(x, f)?;
        x = ctx.point(tape, l, x)?;
    }
    norm(tape, x, &bb.enc_norm)
}

fn decode(
    tape: &mut Tape,
    bb: &BackboneVars,
    h_enc: Var,
    batch_size: usize,
    src_len: usize,
    inputs: &[usize],
    ctx: &mut Ctx,
) -> Result<Var> {
    let t_len = inputs.len() / batch_size;
    let y = tape.gather(bb.token_embedding, inputs)?;
    let pos = tape.slice_rows(bb.dec_positions, 0, t_len)?;
    let mut y = tape.add_tiled(y, pos)?;
    let self_layout = AttnLayout {
        batch: batch_size,
        heads: ctx.heads,
        q_len: t_len,
        kv_len: t_len,
        causal: true,
    };
    let cross_layout = AttnLayout {
        kv_len: src_len,
        causal: false,
        ..self_layout
    };
    let offset = bb.encoder.len();
    for (l, layer) in bb.decoder.iter().enumerate() {
        let h = norm(tape, y, &layer.norm_self)?;
        let a = attend(tape, h, h, &layer.self_attn, self_layout)?;
        let a = ctx.drop(tape, a)?;
        y = tape.add(y, a)?;
        let h = norm(tape, y, &layer.norm_cross)?;
        let c = attend(tape, h, h_enc, &layer.cross_attn, cross_layout)?;
        let c = ctx.drop(tape, c)?;
        y = tape.add(y, c)?;
        let h = norm(tape, y, &layer.norm_ff)?;
        let f = feed_forward(tape, h, &layer.ff)?;
        let f = ctx.drop(tape, f)?;
        y = tape.add(y, f)?;
        y = ctx.point(tape, offset + l, y)?;
    }
    norm(tape, y, &bb.dec_norm)
}

/// Full teacher-forced forward pass on an existing tape.
pub fn forward_on_tape(
    tape: &mut Tape,
    backbone: &BackboneVars,
    head: &TaskHeadVars,
    modules: &BoundModules,
    batch: &Batch,
    n_heads: usize,
    dropout: Option<Dropout>,
) -> Result<ForwardVars> {
    let mut ctx = Ctx {
        modules,
        dropout,
        alphas: Vec::new(),
        heads: n_heads,
    };
    let h_enc = encode(tape, backbone, head, batch, &mut ctx)?;
    let h_dec = decode(
        tape,
        backbone,
        h_enc,
        batch.size,
        batch.src_len(),
        &batch.decoder_inputs,
        &mut ctx,
    )?;
    let logits = tape.matmul_t(h_dec, backbone.token_embedding)?;
    let pooled = tape.mean_pool(h_enc, batch.size)?;
    Ok(ForwardVars {
        logits,
        h_enc,
        h_dec,
        pooled,
        fusion_alpha: ctx.alphas,
    })
}

/// Concrete forward results.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub h_enc: Tensor,
    pub h_dec: Tensor,
    pub pooled: Tensor,
    pub fusion_alpha: Vec<Vec<f64>>,
}

/// A backbone, a task head and optional modules, evaluated without gradients.
#[derive(Clone, Copy, Debug)]
pub struct Model<'a> {
    pub backbone: &'a BackboneParams,
    pub head: &'a TaskHead,
    pub modules: Modules<'a>,
}

impl<'a> Model<'a> {
    pub fn new(backbone: &'a BackboneParams, head: &'a TaskHead, modules: Modules<'a>) -> Self {
        Model {
            backbone,
            head,
            modules,
        }
    }

    fn bind(&self, tape: &mut Tape) -> Result<(BackboneVars, TaskHeadVars, BoundModules)> {
        let bb = self.backbone.bind(tape, false)?;
        let head = self.head.bind(tape, false);
        let mods = self.modules.bind(tape, false, false)?;
        Ok((bb, head, mods))
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let (bb, head, mods) = self.bind(&mut tape)?;
        let out = forward_on_tape(
            &mut tape,
            &bb,
            &head,
            &mods,
            batch,
            self.backbone.config.n_heads,
            None,
        )?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            h_enc: tape.value(out.h_enc).clone(),
            h_dec: tape.value(out.h_dec).clone(),
            pooled: tape.value(out.pooled).clone(),
            fusion_alpha: out.fusion_alpha,
        })
    }

    /// Greedy decoding. Stops at EOS or after `max_tgt_len` tokens; the EOS
    /// itself is not part of the returned answer. Ties in the argmax go to
    /// the lowest token id.
    pub fn generate(&self, examples: &[&Example]) -> Result<Vec<Vec<usize>>> {
        let config = &self.backbone.config;
        let batch = Batch::from_examples(config, examples)?;
        let mut tape = Tape::new();
        let (bb, head, mods) = self.bind(&mut tape)?;
        let mut ctx = Ctx {
            modules: &mods,
            dropout: None,
            alphas: Vec::new(),
            heads: config.n_heads,
        };
        let h_enc = encode(&mut tape, &bb, &head, &batch, &mut ctx)?;
        let n = batch.size;
        let mut seqs: Vec<Vec<usize>> = vec![vec![vocab::BOS]; n];
        let mut done = vec![false; n];
        let mut answers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for step in 0..config.max_tgt_len {
            let inputs: Vec<usize> = seqs.iter().flatten().copied().collect();
            let h_dec = decode(&mut tape, &bb, h_enc, n, batch.src_len(), &inputs, &mut ctx)?;
            let last_rows: Vec<usize> = (0..n).map(|e| e * (step + 1) + step).collect();
            let logits = {
                let hd = tape.value(h_dec);
                let d = hd.cols();
                let mut rows = Vec::with_capacity(n * d);
                for &r in &last_rows {
                    rows.extend_from_slice(hd.row(r));
                }
                let last = tape.constant(Tensor::new(vec![n, d], rows)?);
                tape.matmul_t(last, bb.token_embedding)?
            };
            let lt = tape.value(logits).clone();
            for e in 0..n {
                let tok = argmax(lt.row(e));
                seqs[e].push(tok);
                if done[e] {
                    continue;
                }
                if tok == vocab::EOS {
                    done[e] = true;
                } else {
                    answers[e].push(tok);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(answers)
    }

    /// Exact-match score of greedy decoding over `examples`.
    ///
    /// The decoder is causal, so greedy decoding reproduces an answer
    /// exactly when the teacher-forced argmax equals the answer followed by
    /// EOS at every position. That needs one forward pass per chunk instead
    /// of one per generated token.
    pub fn evaluate(&self, examples: &[Example], batch_size: usize) -> Result<f64> {
        if examples.is_empty() {
            return invalid("evaluation over an empty set");
        }
        let mut hits = 0usize;
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let batch = Batch::from_examples(&self.backbone.config, &refs)?;
            let mut tape = Tape::new();
            let (bb, head, mods) = self.bind(&mut tape)?;
            let out = forward_on_tape(
                &mut tape,
                &bb,
                &head,
                &mods,
                &batch,
                self.backbone.config.n_heads,
                None,
            )?;
            let logits = tape.value(out.logits);
            let t_len = batch.target_len;
            hits += (0..batch.size)
                .filter(|&e| {
                    (0..t_len).all(|t| match batch.targets[e * t_len + t] {
                        Some(tok) => argmax(logits.row(e * t_len + t)) == tok,
                        None => true,
                    })
                })
                .count();
        }
        Ok(100.0 * hits as f64 / examples.len() as f64)
    }

    /// Exact-match score computed by running [`Model::generate`]; slower
    /// than [`Model::evaluate`] and equal to it.
    pub fn evaluate_by_decoding(&self, examples: &[Example], batch_size: usize) -> Result<f64> {
        if examples.is_empty() {
            return invalid("evaluation over an empty set");
        }
        let mut preds = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().collect();
            preds.extend(self.generate(&refs)?);
        }
        let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.answer.clone()).collect();
        crate::tasks::score_exact_match(&preds, &refs)
    }
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over examples of the per-example mean encoder state, computed with
/// `head` and no adapters.
pub fn encode_pooled(
    backbone: &BackboneParams,
    head: &TaskHead,
    examples: &[Example],
    batch_size: usize,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return invalid("cannot pool an empty dataset");
    }
    let model = Model::new(backbone, head, Modules::None);
    let d = backbone.config.d_model;
    let mut sum = vec![0.0; d];
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&backbone.config, &refs)?;
        let mut tape = Tape::new();
        let (bb, hv, mods) = model.bind(&mut tape)?;
        let mut ctx = Ctx {
            modules: &mods,
            dropout: None,
            alphas: Vec::new(),
            heads: backbone.config.n_heads,
        };
        let h_enc = encode(&mut tape, &bb, &hv, &batch, &mut ctx)?;
        let pooled = tape.mean_pool(h_enc, batch.size)?;
        for row in tape.value(pooled).data().chunks(d) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    let inv = 1.0 / examples.len() as f64;
    Ok(sum.into_iter().map(|s| s * inv).collect())
}
