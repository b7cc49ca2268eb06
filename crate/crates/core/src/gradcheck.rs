//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Tensors larger than this are checked on a seeded sample of this many
    /// coordinates instead of exhaustively.
    pub max_coords_per_tensor: usize,
    pub seed: Seed,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_tensor: 64,
            seed: Seed(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (tensor index, coordinate) of the worst agreement.
    pub worst: Option<(usize, usize)>,
}

/// Gradients smaller than this are treated as zero when normalising. At
/// `eps = 1e-5` rounding in an O(1) objective already leaves about 1e-11 of
/// noise in a central difference, so a true zero (for example the gradient
/// of an attention key bias, which softmax cancels) cannot be resolved below
/// this scale.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences at
/// `params`. `f` builds a scalar loss from the parameter handles it is given.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.numel() <= opts.max_coords_per_tensor {
            (0..p.numel()).collect()
        } else {
            let mut idx = opts
                .seed
                .child_idx("coords", pi)
                .rng()
                .sample_indices(p.numel(), opts.max_coords_per_tensor);
            idx.sort_unstable();
            idx
        };
        for c in coords {
            let analytic = grads.get(vars[pi]).map_or(0.0, |g| g.data()[c]);
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + opts.eps;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - opts.eps;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let rel = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

/// One line of the gradient suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
    /// Second check of an at most bilinear objective at [`LINEAR_EPS`].
    pub linear: Option<GradCheckReport>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < SUITE_TOLERANCE
            && self
                .linear
                .as_ref()
                .is_none_or(|r| r.max_rel_error < LINEAR_TOLERANCE)
    }
}

/// Bound for every primitive and the model losses.
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Bound for objectives that are at most bilinear in their inputs. Central
/// differences are exact for those at any step, so they are also checked at
/// [`LINEAR_EPS`], where rounding in the objective no longer dominates.
pub const LINEAR_TOLERANCE: f64 = 1e-10;
pub const LINEAR_EPS: f64 = 1e-2;

type Objective = fn(&mut Tape, &[Var]) -> Result<Var>;

fn randn(shape: &[usize], seed: Seed, i: usize) -> Tensor {
    Tensor::randn(shape, 1.0, &mut seed.child_idx("suite", i).rng())
}

fn weighted_sum(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

/// Every tape primitive, each inside a small scalar objective, followed by
/// two full teacher-forced model losses (adapter path and fusion path).
pub fn run_suite(opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    use crate::autodiff::AttnLayout;
    let s = opts.seed;
    let causal = AttnLayout {
        batch: 2,
        heads: 2,
        q_len: 3,
        kv_len: 3,
        causal: true,
    };
    let cross = AttnLayout {
        batch: 2,
        heads: 2,
        q_len: 3,
        kv_len: 4,
        causal: false,
    };
    let cases: Vec<(&'static str, bool, Objective, Vec<Vec<usize>>)> = vec![
        (
            "matmul",
            true,
            |t, p| {
                let y = t.matmul(p[0], p[1])?;
                weighted_sum(t, y, p[2])
            },
            vec![vec![3, 4], vec![4, 2], vec![3, 2]],
        ),
        (
            "matmul_t",
            true,
            |t, p| {
                let y = t.matmul_t(p[0], p[1])?;
                weighted_sum(t, y, p[2])
            },
            vec![vec![3, 4], vec![2, 4], vec![3, 2]],
        ),
        (
            "add_sub",
            true,
            |t, p| {
                let y = t.add(p[0], p[1])?;
                let y = t.sub(y, p[2])?;
                weighted_sum(t, y, p[3])
            },
            vec![vec![2, 3]; 4],
        ),
        (
            "mul",
            true,
            |t, p| {
                let y = t.mul(p[0], p[1])?;
                t.sum(y)
            },
            vec![vec![3, 3], vec![3, 3]],
        ),
        (
            "add_tiled",
            true,
            |t, p| {
                let y = t.add_tiled(p[0], p[1])?;
                weighted_sum(t, y, p[2])
            },
            vec![vec![6, 3], vec![2, 3], vec![6, 3]],
        ),
        (
            "scale_sum",
            true,
            |t, p| {
                let y = t.scale(p[0], -1.7)?;
                weighted_sum(t, y, p[1])
            },
            vec![vec![4, 2], vec![4, 2]],
        ),
        (
            "relu",
            false,
            |t, p| {
                let y = t.relu(p[0])?;
                weighted_sum(t, y, p[1])
            },
            vec![vec![5, 4], vec![5, 4]],
        ),
        (
            "mean_pool",
            true,
            |t, p| {
                let y = t.mean_pool(p[0], 2)?;
                weighted_sum(t, y, p[1])
            },
            vec![vec![6, 3], vec![2, 3]],
        ),
        (
            "layernorm",
            false,
            |t, p| {
                let y = t.layernorm(p[0], p[1], p[2], 1e-5)?;
                weighted_sum(t, y, p[3])
            },
            vec![vec![4, 5], vec![5], vec![5], vec![4, 5]],
        ),
        (
            "softmax_rows",
            false,
            |t, p| {
                let y = t.softmax(p[0], 1)?;
                weighted_sum(t, y, p[1])
            },
            vec![vec![3, 5], vec![3, 5]],
        ),
        (
            "softmax_columns",
            false,
            |t, p| {
                let y = t.softmax(p[0], 0)?;
                weighted_sum(t, y, p[1])
            },
            vec![vec![4, 3], vec![4, 3]],
        ),
        (
            "attention_causal",
            false,
            |t, p| {
                let y = t.attention(
                    p[0],
                    p[1],
                    p[2],
                    AttnLayout {
                        batch: 2,
                        heads: 2,
                        q_len: 3,
                        kv_len: 3,
                        causal: true,
                    },
                )?;
                weighted_sum(t, y, p[3])
            },
            vec![vec![causal.batch * causal.q_len, 4]; 4],
        ),
        (
            "attention_cross",
            false,
            |t, p| {
                let y = t.attention(
                    p[0],
                    p[1],
                    p[2],
                    AttnLayout {
                        batch: 2,
                        heads: 2,
                        q_len: 3,
                        kv_len: 4,
                        causal: false,
                    },
                )?;
                weighted_sum(t, y, p[3])
            },
            vec![
                vec![6, 4],
                vec![cross.batch * cross.kv_len, 4],
                vec![8, 4],
                vec![6, 4],
            ],
        ),
        (
            "mix",
            false,
            |t, p| {
                let (y, _) = t.mix(p[0], &[p[1], p[2], p[3]], &[p[4], p[5], p[6]])?;
                weighted_sum(t, y, p[7])
            },
            vec![vec![4, 3]; 8],
        ),
        (
            "gather",
            true,
            |t, p| {
                let y = t.gather(p[0], &[2, 0, 2, 1])?;
                weighted_sum(t, y, p[1])
            },
            vec![vec![3, 4], vec![4, 4]],
        ),
        (
            "concat_seq",
            true,
            |t, p| {
                let y = t.concat_seq(p[0], p[1], 2)?;
                weighted_sum(t, y, p[2])
            },
            vec![vec![4, 3], vec![2, 3], vec![6, 3]],
        ),
        (
            "slice_rows",
            true,
            |t, p| {
                let y = t.slice_rows(p[0], 1, 3)?;
                weighted_sum(t, y, p[1])
            },
            vec![vec![5, 2], vec![3, 2]],
        ),
        (
            "cross_entropy",
            false,
            |t, p| t.cross_entropy(p[0], &[Some(1), None, Some(3), Some(0)]),
            vec![vec![4, 5]],
        ),
        (
            "mse",
            false,
            |t, p| t.mse(p[0], p[1]),
            vec![vec![3, 4], vec![3, 4]],
        ),
    ];
    let mut out = Vec::new();
    for (ci, (name, linear, f, shapes)) in cases.into_iter().enumerate() {
        let params: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, sh)| randn(sh, s.child_idx("case", ci), i))
            .collect();
        let report = grad_check(f, &params, opts)?;
        let linear = if linear {
            Some(grad_check(
                f,
                &params,
                GradCheckOptions {
                    eps: LINEAR_EPS,
                    ..opts
                },
            )?)
        } else {
            None
        };
        out.push(SuiteEntry {
            name,
            report,
            linear,
        });
    }
    for (name, fusion) in [("model_adapter", false), ("model_fusion", true)] {
        out.push(SuiteEntry {
            name,
            report: model_grad_check(fusion, opts)?,
            linear: None,
        });
    }
    Ok(out)
}

/// A configuration small enough for finite differences over every tensor.
pub fn tiny_config() -> crate::config::BackboneConfig {
    crate::config::BackboneConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 12,
        vocab_size: 40,
        max_src_len: 8,
        max_tgt_len: 4,
        feature_dim: 4,
        dropout: 0.0,
    }
}

fn randomise<P: crate::params::ParamSet>(p: &mut P, std: f64, seed: Seed) {
    for (i, t) in p.tensors_mut().into_iter().enumerate() {
        *t = Tensor::randn(t.shape(), std, &mut seed.child_idx("randomise", i).rng());
    }
}

/// Differentiated tensors of the model check, in gradient order.
fn live<'a>(
    with_fusion: bool,
    bb: &'a mut crate::backbone::BackboneParams,
    head: &'a mut crate::backbone::TaskHead,
    adapters: &'a mut [crate::adapter::AdapterParams],
    fusion: &'a mut crate::adapter::FusionParams,
) -> Vec<&'a mut Tensor> {
    use crate::params::ParamSet;
    let mut all = bb.tensors_mut();
    all.extend(head.tensors_mut());
    if with_fusion {
        all.extend(fusion.tensors_mut());
    } else {
        all.extend(adapters[0].tensors_mut());
    }
    all
}

/// Cross-entropy of the teacher-forced logits plus a squared error on the
/// pooled encoder state, differentiated with respect to the backbone, the
/// head and either one adapter or a fusion layer over two frozen adapters.
pub fn model_grad_check(with_fusion: bool, opts: GradCheckOptions) -> Result<GradCheckReport> {
    use crate::adapter::{AdapterParams, FusionParams};
    use crate::backbone::{BackboneParams, TaskHead};
    use crate::forward::{forward_on_tape, Batch, BoundModules, Modules};
    use crate::params::BoundSet;
    use crate::tasks::Example;

    let cfg = tiny_config();
    let s = opts.seed.child(if with_fusion {
        "model-fusion"
    } else {
        "model-adapter"
    });
    let mut backbone = BackboneParams::init(&cfg, s.child("backbone"))?;
    let mut head = TaskHead::init(&cfg, s.child("head"));
    let mut adapters = vec![
        AdapterParams::init(&cfg, 3, s.child("a0"))?,
        AdapterParams::init(&cfg, 3, s.child("a1"))?,
    ];
    randomise(&mut adapters[0], 0.3, s.child("ra0"));
    randomise(&mut adapters[1], 0.3, s.child("ra1"));
    let mut fusion = FusionParams::init(&cfg, s.child("fusion"));
    randomise(&mut fusion, 0.3, s.child("rf"));
    let mut rng = s.child("data").rng();
    let examples: Vec<Example> = [(vec![3, 8, 0], vec![31]), (vec![7, 9, 10], vec![23, 16])]
        .into_iter()
        .map(|(question, answer)| Example {
            features: (0..2 * cfg.feature_dim).map(|_| rng.normal()).collect(),
            question,
            answer,
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Batch::from_examples(&cfg, &refs)?;
    let pooled_target = Tensor::randn(&[2, cfg.d_model], 1.0, &mut s.child("target").rng());

    let loss_on = |tape: &mut Tape,
                   bb: &BackboneParams,
                   head: &TaskHead,
                   adapters: &[AdapterParams],
                   fusion: &FusionParams,
                   trainable: bool|
     -> Result<(Var, Vec<Var>)> {
        let bbv = bb.bind(tape, trainable)?;
        let hv = head.bind(tape, trainable);
        let refs: Vec<&AdapterParams> = adapters.iter().collect();
        let mods = if with_fusion {
            Modules::Fusion {
                adapters: &refs,
                fusion,
            }
            .bind(tape, false, trainable)?
        } else {
            Modules::Adapter(&adapters[0]).bind(tape, trainable, false)?
        };
        let out = forward_on_tape(tape, &bbv, &hv, &mods, &batch, cfg.n_heads, None)?;
        let ce = tape.cross_entropy(out.logits, &batch.targets)?;
        let target = tape.constant(pooled_target.clone());
        let se = tape.mse(out.pooled, target)?;
        let loss = tape.add(ce, se)?;
        let mut vars = bbv.var_list();
        vars.extend(hv.var_list());
        match &mods {
            BoundModules::Adapter(v) => vars.extend(v.var_list()),
            BoundModules::Fusion { fusion, .. } => vars.extend(fusion.var_list()),
            BoundModules::None => {}
        }
        Ok((loss, vars))
    };

    let mut tape = Tape::new();
    let (loss, vars) = loss_on(&mut tape, &backbone, &head, &adapters, &fusion, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|v| grads.get(*v).cloned()).collect();

    let eval = |bb: &BackboneParams,
                head: &TaskHead,
                adapters: &[AdapterParams],
                fusion: &FusionParams|
     -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = loss_on(&mut tape, bb, head, adapters, fusion, false)?;
        Ok(tape.value(loss).item())
    };

    let numel: Vec<usize> = live(
        with_fusion,
        &mut backbone,
        &mut head,
        &mut adapters,
        &mut fusion,
    )
    .iter()
    .map(|t| t.numel())
    .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (pi, &n) in numel.iter().enumerate() {
        let coords: Vec<usize> = if n <= opts.max_coords_per_tensor {
            (0..n).collect()
        } else {
            let mut idx = s
                .child_idx("coords", pi)
                .rng()
                .sample_indices(n, opts.max_coords_per_tensor);
            idx.sort_unstable();
            idx
        };
        for c in coords {
            let orig = live(
                with_fusion,
                &mut backbone,
                &mut head,
                &mut adapters,
                &mut fusion,
            )[pi]
                .data()[c];
            live(
                with_fusion,
                &mut backbone,
                &mut head,
                &mut adapters,
                &mut fusion,
            )[pi]
                .data_mut()[c] = orig + opts.eps;
            let up = eval(&backbone, &head, &adapters, &fusion)?;
            live(
                with_fusion,
                &mut backbone,
                &mut head,
                &mut adapters,
                &mut fusion,
            )[pi]
                .data_mut()[c] = orig - opts.eps;
            let down = eval(&backbone, &head, &adapters, &fusion)?;
            live(
                with_fusion,
                &mut backbone,
                &mut head,
                &mut adapters,
                &mut fusion,
            )[pi]
                .data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g.data()[c]);
            let rel = relative_error(a, numeric);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}
