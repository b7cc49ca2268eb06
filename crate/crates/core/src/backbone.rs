//! Parameters of the frozen encoder–decoder backbone and the per-task
//! feature projection head.

use crate::autodiff::{Tape, Var};
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::{param_group, BoundSet, ParamSet};
use crate::rng::{Rng64, Seed};
use crate::tensor::Tensor;

param_group!(
    /// Row-wise layer normalisation gain and bias.
    NormParams,
    NormVars { gain, bias }
);

param_group!(
    /// Multi-head attention projections.
    AttnParams,
    AttnVars { wq, bq, wk, bk, wv, bv, wo, bo }
);

param_group!(FeedForwardParams, FeedForwardVars { w1, b1, w2, b2 });

param_group!(
    /// Projection of continuous scene features into the embedding space.
    TaskHead,
    TaskHeadVars { weight, bias }
);

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm_attn: NormParams,
    pub attn: AttnParams,
    pub norm_ff: NormParams,
    pub ff: FeedForwardParams,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub norm_attn: NormVars,
    pub attn: AttnVars,
    pub norm_ff: NormVars,
    pub ff: FeedForwardVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm_self: NormParams,
    pub self_attn: AttnParams,
    pub norm_cross: NormParams,
    pub cross_attn: AttnParams,
    pub norm_ff: NormParams,
    pub ff: FeedForwardParams,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerVars {
    pub norm_self: NormVars,
    pub self_attn: AttnVars,
    pub norm_cross: NormVars,
    pub cross_attn: AttnVars,
    pub norm_ff: NormVars,
    pub ff: FeedForwardVars,
}

/// The backbone. Token embeddings double as the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub token_embedding: Tensor,
    pub enc_positions: Tensor,
    pub dec_positions: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub enc_norm: NormParams,
    pub dec_norm: NormParams,
    frozen: bool,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub token_embedding: Var,
    pub enc_positions: Var,
    pub dec_positions: Var,
    pub encoder: Vec<EncoderLayerVars>,
    pub decoder: Vec<DecoderLayerVars>,
    pub enc_norm: NormVars,
    pub dec_norm: NormVars,
}

fn linear(rng: &mut Rng64, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

fn norm(d: usize) -> NormParams {
    NormParams {
        gain: Tensor::full(&[d], 1.0),
        bias: Tensor::zeros(&[d]),
    }
}

fn attn(rng: &mut Rng64, d: usize) -> AttnParams {
    AttnParams {
        wq: linear(rng, d, d),
        bq: Tensor::zeros(&[d]),
        wk: linear(rng, d, d),
        bk: Tensor::zeros(&[d]),
        wv: linear(rng, d, d),
        bv: Tensor::zeros(&[d]),
        wo: linear(rng, d, d),
        bo: Tensor::zeros(&[d]),
    }
}

fn feed_forward(rng: &mut Rng64, d: usize, ff: usize) -> FeedForwardParams {
    FeedForwardParams {
        w1: linear(rng, d, ff),
        b1: Tensor::zeros(&[ff]),
        w2: linear(rng, ff, d),
        b2: Tensor::zeros(&[d]),
    }
}

impl TaskHead {
    pub fn init(config: &BackboneConfig, seed: Seed) -> TaskHead {
        let mut rng = seed.rng();
        TaskHead {
            weight: linear(&mut rng, config.feature_dim, config.d_model),
            bias: Tensor::zeros(&[config.d_model]),
        }
    }
}

impl BackboneParams {
    /// Random initialisation; the result is trainable until [`freeze`]d.
    ///
    /// [`freeze`]: BackboneParams::freeze
    pub fn init(config: &BackboneConfig, seed: Seed) -> Result<BackboneParams> {
        config.validate()?;
        let d = config.d_model;
        let emb_std = 1.0 / (d as f64).sqrt();
        let mut rng = seed.child("embeddings").rng();
        let token_embedding = Tensor::randn(&[config.vocab_size, d], emb_std, &mut rng);
        let enc_positions = Tensor::randn(&[config.max_src_len, d], emb_std, &mut rng);
        let dec_positions = Tensor::randn(&[config.max_tgt_len, d], emb_std, &mut rng);
        let encoder = (0..config.n_enc_layers)
            .map(|i| {
                let mut rng = seed.child_idx("encoder", i).rng();
                EncoderLayer {
                    norm_attn: norm(d),
                    attn: attn(&mut rng, d),
                    norm_ff: norm(d),
                    ff: feed_forward(&mut rng, d, config.d_ff),
                }
            })
            .collect();
        let decoder = (0..config.n_dec_layers)
            .map(|i| {
                let mut rng = seed.child_idx("decoder", i).rng();
                DecoderLayer {
                    norm_self: norm(d),
                    self_attn: attn(&mut rng, d),
                    norm_cross: norm(d),
                    cross_attn: attn(&mut rng, d),
                    norm_ff: norm(d),
                    ff: feed_forward(&mut rng, d, config.d_ff),
                }
            })
            .collect();
        Ok(BackboneParams {
            config: config.clone(),
            token_embedding,
            enc_positions,
            dec_positions,
            encoder,
            decoder,
            enc_norm: norm(d),
            dec_norm: norm(d),
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// An unfrozen deep copy, for full-model finetuning.
    pub fn thawed_copy(&self) -> BackboneParams {
        BackboneParams {
            frozen: false,
            ..self.clone()
        }
    }

    /// Records every tensor on `tape`. Asking for gradients on a frozen
    /// backbone is an error.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BackboneVars> {
        if trainable && self.frozen {
            return Err(Error::InvalidArgument(
                "the backbone is frozen and cannot receive gradients".into(),
            ));
        }
        Ok(BackboneVars {
            token_embedding: tape.leaf(self.token_embedding.clone(), trainable),
            enc_positions: tape.leaf(self.enc_positions.clone(), trainable),
            dec_positions: tape.leaf(self.dec_positions.clone(), trainable),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayerVars {
                    norm_attn: l.norm_attn.bind(tape, trainable),
                    attn: l.attn.bind(tape, trainable),
                    norm_ff: l.norm_ff.bind(tape, trainable),
                    ff: l.ff.bind(tape, trainable),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayerVars {
                    norm_self: l.norm_self.bind(tape, trainable),
                    self_attn: l.self_attn.bind(tape, trainable),
                    norm_cross: l.norm_cross.bind(tape, trainable),
                    cross_attn: l.cross_attn.bind(tape, trainable),
                    norm_ff: l.norm_ff.bind(tape, trainable),
                    ff: l.ff.bind(tape, trainable),
                })
                .collect(),
            enc_norm: self.enc_norm.bind(tape, trainable),
            dec_norm: self.dec_norm.bind(tape, trainable),
        })
    }

    /// Rebuilds a backbone from named tensors as produced by `visit`.
    pub fn from_named(
        config: &BackboneConfig,
        frozen: bool,
        lookup: &mut dyn FnMut(&str) -> Result<Tensor>,
    ) -> Result<BackboneParams> {
        let mut b = BackboneParams::init(config, Seed(0))?;
        let names: Vec<String> = b.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(b.tensors_mut()) {
            let t = lookup(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        b.frozen = frozen;
        Ok(b)
    }
}

impl ParamSet for EncoderLayer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.norm_attn.visit(&format!("{prefix}norm_attn."), out);
        self.attn.visit(&format!("{prefix}attn."), out);
        self.norm_ff.visit(&format!("{prefix}norm_ff."), out);
        self.ff.visit(&format!("{prefix}ff."), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.norm_attn.visit_mut(out);
        self.attn.visit_mut(out);
        self.norm_ff.visit_mut(out);
        self.ff.visit_mut(out);
    }
}

impl BoundSet for EncoderLayerVars {
    fn vars(&self, out: &mut Vec<Var>) {
        self.norm_attn.vars(out);
        self.attn.vars(out);
        self.norm_ff.vars(out);
        self.ff.vars(out);
    }
}

impl ParamSet for DecoderLayer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.norm_self.visit(&format!("{prefix}norm_self."), out);
        self.self_attn.visit(&format!("{prefix}self_attn."), out);
        self.norm_cross.visit(&format!("{prefix}norm_cross."), out);
        self.cross_attn.visit(&format!("{prefix}cross_attn."), out);
        self.norm_ff.visit(&format!("{prefix}norm_ff."), out);
        self.ff.visit(&format!("{prefix}ff."), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.norm_self.visit_mut(out);
        self.self_attn.visit_mut(out);
        self.norm_cross.visit_mut(out);
        self.cross_attn.visit_mut(out);
        self.norm_ff.visit_mut(out);
        self.ff.visit_mut(out);
    }
}

impl BoundSet for DecoderLayerVars {
    fn vars(&self, out: &mut Vec<Var>) {
        self.norm_self.vars(out);
        self.self_attn.vars(out);
        self.norm_cross.vars(out);
        self.cross_attn.vars(out);
        self.norm_ff.vars(out);
        self.ff.vars(out);
    }
}

impl ParamSet for BackboneParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}token_embedding"), &self.token_embedding));
        out.push((format!("{prefix}enc_positions"), &self.enc_positions));
        out.push((format!("{prefix}dec_positions"), &self.dec_positions));
        self.encoder.visit(&format!("{prefix}encoder."), out);
        self.decoder.visit(&format!("{prefix}decoder."), out);
        self.enc_norm.visit(&format!("{prefix}enc_norm."), out);
        self.dec_norm.visit(&format!("{prefix}dec_norm."), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.token_embedding);
        out.push(&mut self.enc_positions);
        out.push(&mut self.dec_positions);
        self.encoder.visit_mut(out);
        self.decoder.visit_mut(out);
        self.enc_norm.visit_mut(out);
        self.dec_norm.visit_mut(out);
    }
}

impl BoundSet for BackboneVars {
    fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.token_embedding);
        out.push(self.enc_positions);
        out.push(self.dec_positions);
        self.encoder.vars(out);
        self.decoder.vars(out);
        self.enc_norm.vars(out);
        self.dec_norm.vars(out);
    }
}
