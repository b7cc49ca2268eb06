//! Bottleneck adapters and the attention layer that fuses several of them.

use crate::autodiff::{Tape, Var};
use crate::config::BackboneConfig;
use crate::error::{invalid, Result};
use crate::params::{param_group, ParamSet};
use crate::rng::Seed;
use crate::tensor::Tensor;

/// Standard deviation of the random parts of adapter and fusion init.
pub const INIT_STD: f64 = 0.02;

param_group!(
    /// One residual bottleneck: `x + up(relu(down(x)))`.
    AdapterPoint,
    AdapterPointVars { down, down_bias, up, up_bias }
);

param_group!(
    /// Query, key and value maps of one fusion layer (no biases).
    FusionPoint,
    FusionPointVars { query, key, value }
);

/// Adapter weights for every insertion point of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub points: Vec<AdapterPoint>,
}

pub type AdapterVars = Vec<AdapterPointVars>;

/// Fusion weights for every insertion point.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub points: Vec<FusionPoint>,
}

pub type FusionVars = Vec<FusionPointVars>;

impl AdapterParams {
    /// Down-projection ~ N(0, 0.02²); up-projection and both biases zero, so
    /// a fresh adapter is the identity map.
    pub fn init(config: &BackboneConfig, bottleneck: usize, seed: Seed) -> Result<AdapterParams> {
        if bottleneck == 0 {
            return invalid("adapter bottleneck must be at least 1");
        }
        let d = config.d_model;
        let points = (0..config.n_points())
            .map(|i| {
                let mut rng = seed.child_idx("adapter", i).rng();
                AdapterPoint {
                    down: Tensor::randn(&[d, bottleneck], INIT_STD, &mut rng),
                    down_bias: Tensor::zeros(&[bottleneck]),
                    up: Tensor::zeros(&[bottleneck, d]),
                    up_bias: Tensor::zeros(&[d]),
                }
            })
            .collect();
        Ok(AdapterParams { points })
    }

    pub fn bottleneck(&self) -> usize {
        self.points.first().map_or(0, |p| p.down.cols())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        self.points
            .iter()
            .map(|p| p.bind(tape, trainable))
            .collect()
    }

    /// `n_points · (2·d·r + r + d)`.
    pub fn closed_form_count(n_points: usize, d_model: usize, r: usize) -> usize {
        n_points * (2 * d_model * r + r + d_model)
    }
}

impl FusionParams {
    /// Value map = identity, query and key ~ N(0, 0.02²).
    pub fn init(config: &BackboneConfig, seed: Seed) -> FusionParams {
        let d = config.d_model;
        let points = (0..config.n_points())
            .map(|i| {
                let mut rng = seed.child_idx("fusion", i).rng();
                FusionPoint {
                    query: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                    key: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                    value: Tensor::eye(d),
                }
            })
            .collect();
        FusionParams { points }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> FusionVars {
        self.points
            .iter()
            .map(|p| p.bind(tape, trainable))
            .collect()
    }

    /// `n_points · 3 · d²`.
    pub fn closed_form_count(n_points: usize, d_model: usize) -> usize {
        n_points * 3 * d_model * d_model
    }
}

impl ParamSet for AdapterParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.points.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.points.visit_mut(out);
    }
}

impl ParamSet for FusionParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.points.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.points.visit_mut(out);
    }
}

/// Parameter count of a fusion layer over `adapters_fused` adapters. Fusion
/// over an empty adapter list is undefined.
pub fn fusion_count(fusion: &FusionParams, adapters_fused: usize) -> Result<usize> {
    if adapters_fused == 0 {
        return invalid("a fusion layer needs at least one adapter");
    }
    Ok(fusion.count_params())
}

/// Applies one adapter insertion point to hidden rows `x` (`[n × d]`).
pub fn adapter_forward(tape: &mut Tape, point: &AdapterPointVars, x: Var) -> Result<Var> {
    let h = tape.matmul(x, point.down)?;
    let h = tape.add_tiled(h, point.down_bias)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, point.up)?;
    let h = tape.add_tiled(h, point.up_bias)?;
    tape.add(x, h)
}

/// Fusion at one insertion point: attention with query `x·Q` over keys
/// `Φᵢ(x)·K` and values `Φᵢ(x)·V`. Takes the already computed adapter
/// outputs and returns the fused rows with the `[n × k]` weights.
pub fn fusion_forward(
    tape: &mut Tape,
    point: &FusionPointVars,
    x: Var,
    adapter_outputs: &[Var],
) -> Result<(Var, Vec<f64>)> {
    if adapter_outputs.is_empty() {
        return invalid("fusion over an empty adapter list");
    }
    let q = tape.matmul(x, point.query)?;
    let mut keys = Vec::with_capacity(adapter_outputs.len());
    let mut vals = Vec::with_capacity(adapter_outputs.len());
    for &a in adapter_outputs {
        keys.push(tape.matmul(a, point.key)?);
        vals.push(tape.matmul(a, point.value)?);
    }
    tape.mix(q, &keys, &vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};

    fn cfg() -> BackboneConfig {
        BackboneConfig::default()
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let a = AdapterParams::init(&cfg(), 8, Seed(3)).unwrap();
        let x = Tensor::randn(&[5, 64], 1.0, &mut Seed(9).rng());
        let mut tape = Tape::new();
        let vars = a.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        for p in &vars {
            let y = adapter_forward(&mut tape, p, xv).unwrap();
            assert!(tape.value(y).bit_eq(&x));
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = AdapterParams::init(&cfg(), 8, Seed(3)).unwrap();
        let b = AdapterParams::init(&cfg(), 8, Seed(3)).unwrap();
        let c = AdapterParams::init(&cfg(), 8, Seed(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.points[0].down, c.points[0].down);
        assert!(AdapterParams::init(&cfg(), 0, Seed(3)).is_err());
        assert_eq!(
            FusionParams::init(&cfg(), Seed(1)),
            FusionParams::init(&cfg(), Seed(1))
        );
    }

    #[test]
    fn hand_computed_bottleneck() {
        // d = 1, r = 1: x + u·relu(w·x + b) + c
        let point = AdapterPoint {
            down: Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            down_bias: Tensor::new(vec![1], vec![-1.0]).unwrap(),
            up: Tensor::new(vec![1, 1], vec![0.5]).unwrap(),
            up_bias: Tensor::new(vec![1], vec![0.25]).unwrap(),
        };
        let mut tape = Tape::new();
        let p = point.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 0.2]).unwrap());
        let y = adapter_forward(&mut tape, &p, x).unwrap();
        // 3 + 0.5·relu(5) + 0.25 = 5.75 ; 0.2 + 0.5·relu(-0.6) + 0.25 = 0.45
        assert_eq!(tape.value(y).data(), &[5.75, 0.45]);
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let mut rng = Seed(5).rng();
        let params = vec![
            Tensor::randn(&[4, 2], 0.5, &mut rng),
            Tensor::randn(&[2], 0.5, &mut rng),
            Tensor::randn(&[2, 4], 0.5, &mut rng),
            Tensor::randn(&[4], 0.5, &mut rng),
            Tensor::randn(&[3, 4], 1.0, &mut rng),
        ];
        let r = grad_check(
            |tape, p| {
                let point = AdapterPointVars {
                    down: p[0],
                    down_bias: p[1],
                    up: p[2],
                    up_bias: p[3],
                };
                let y = adapter_forward(tape, &point, p[4])?;
                tape.sum(y)
            },
            &params,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    fn fusion_point(q: Tensor, k: Tensor, v: Tensor) -> FusionPoint {
        FusionPoint {
            query: q,
            key: k,
            value: v,
        }
    }

    #[test]
    fn single_adapter_fusion_is_value_map() {
        let mut rng = Seed(2).rng();
        let f = fusion_point(
            Tensor::randn(&[3, 3], 1.0, &mut rng),
            Tensor::randn(&[3, 3], 1.0, &mut rng),
            Tensor::randn(&[3, 3], 1.0, &mut rng),
        );
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let fv = f.bind(&mut tape, false);
        let (xv, av) = (tape.constant(x), tape.constant(a));
        let (out, alpha) = fusion_forward(&mut tape, &fv, xv, &[av]).unwrap();
        assert!(alpha.iter().all(|w| *w == 1.0));
        let expected = tape.matmul(av, fv.value).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(expected)) < 1e-15);
    }

    #[test]
    fn fresh_fusion_reproduces_a_lone_adapter() {
        let f = FusionParams::init(&cfg(), Seed(8));
        let x = Tensor::randn(&[5, 64], 1.0, &mut Seed(1).rng());
        let a = Tensor::randn(&[5, 64], 1.0, &mut Seed(2).rng());
        let mut tape = Tape::new();
        let fv = f.bind(&mut tape, false);
        let (xv, av) = (tape.constant(x), tape.constant(a.clone()));
        let (out, _) = fusion_forward(&mut tape, &fv[0], xv, &[av]).unwrap();
        assert!(tape.value(out).bit_eq(&a));
        // Two identical adapters: any convex combination is the adapter.
        let (out, alpha) = fusion_forward(&mut tape, &fv[1], xv, &[av, av]).unwrap();
        assert!(tape.value(out).max_abs_diff(&a) < 1e-14);
        for row in alpha.chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_adapter_fusion_matches_explicit_attention() {
        let q = Tensor::from_rows(&[&[1.0, 0.0], &[0.5, -1.0]]).unwrap();
        let k = Tensor::from_rows(&[&[0.0, 1.0], &[2.0, 0.0]]).unwrap();
        let v = Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 3.0]]).unwrap();
        let x = [0.3, -0.7];
        let a1 = [1.0, 2.0];
        let a2 = [-1.0, 0.5];
        // Hand computation with row vectors: y = x·M.
        let mv = |v: &[f64; 2], m: &[[f64; 2]; 2]| {
            [
                v[0] * m[0][0] + v[1] * m[1][0],
                v[0] * m[0][1] + v[1] * m[1][1],
            ]
        };
        let (qm, km, vm) = (
            [[1.0, 0.0], [0.5, -1.0]],
            [[0.0, 1.0], [2.0, 0.0]],
            [[1.0, 1.0], [0.0, 3.0]],
        );
        let qq = mv(&x, &qm);
        let k1 = mv(&a1, &km);
        let k2 = mv(&a2, &km);
        let s1 = (qq[0] * k1[0] + qq[1] * k1[1]) / 2f64.sqrt();
        let s2 = (qq[0] * k2[0] + qq[1] * k2[1]) / 2f64.sqrt();
        let w1 = s1.exp() / (s1.exp() + s2.exp());
        let w2 = 1.0 - w1;
        let v1 = mv(&a1, &vm);
        let v2 = mv(&a2, &vm);
        let expected = [w1 * v1[0] + w2 * v2[0], w1 * v1[1] + w2 * v2[1]];

        let f = fusion_point(q, k, v);
        let mut tape = Tape::new();
        let fv = f.bind(&mut tape, false);
        let xv = tape.constant(Tensor::new(vec![1, 2], x.to_vec()).unwrap());
        let a1v = tape.constant(Tensor::new(vec![1, 2], a1.to_vec()).unwrap());
        let a2v = tape.constant(Tensor::new(vec![1, 2], a2.to_vec()).unwrap());
        let (out, alpha) = fusion_forward(&mut tape, &fv, xv, &[a1v, a2v]).unwrap();
        assert!((alpha[0] - w1).abs() < 1e-14);
        for (o, e) in tape.value(out).data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_fusion_is_rejected() {
        let f = FusionParams::init(&cfg(), Seed(8));
        assert!(fusion_count(&f, 0).is_err());
        let mut tape = Tape::new();
        let fv = f.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 64]));
        assert!(fusion_forward(&mut tape, &fv[0], x, &[]).is_err());
    }

    #[test]
    fn counts_match_closed_forms() {
        let c = cfg();
        let a = AdapterParams::init(&c, 8, Seed(0)).unwrap();
        assert_eq!(a.count_params(), 4384);
        assert_eq!(a.count_params(), AdapterParams::closed_form_count(4, 64, 8));
        let f = FusionParams::init(&c, Seed(0));
        assert_eq!(fusion_count(&f, 2).unwrap(), 49152);
        assert_eq!(f.count_params(), FusionParams::closed_form_count(4, 64));
    }
}
