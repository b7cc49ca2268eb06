//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Each
//! primitive appends a node holding its output and whatever it needs for the
//! vector-Jacobian product; [`Tape::backward`] replays the nodes in reverse.
//! A tape is rebuilt for every optimisation step and can be differentiated
//! once.

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Static layout of a batched multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled {
        x: Var,
        t: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu(Var),
    Sum(Var),
    MeanPool {
        x: Var,
        groups: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Mix {
        q: Var,
        keys: Vec<Var>,
        vals: Vec<Var>,
        alpha: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatSeq {
        a: Var,
        b: Var,
        batch: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `c (+)= a · b` for row-major `a: m×k`, `b: k×n` given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and `c` (m×n); callers pass slices sized accordingly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Tensor>, shape: &[usize], src: &[f64]) {
    match dst {
        Some(t) => {
            for (d, s) in t.data_mut().iter_mut().zip(src) {
                *d += s;
            }
        }
        None => {
            *dst = Some(Tensor::new(shape.to_vec(), src.to_vec()).expect("shape matches"));
        }
    }
}

/// A tape allocates its whole working set per step and frees it at once.
/// glibc would hand that memory back to the kernel every time and fault it
/// in again on the next step, which costs more than the arithmetic at this
/// model size, so the heap is told to keep it.
fn retain_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}

impl Tape {
    pub fn new() -> Self {
        retain_heap();
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return shape_err(format!("{what} expects a matrix, got {s:?}"));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            value,
            rg,
            Op::MatMul {
                a,
                b,
                b_transposed: false,
            },
            "matmul",
        )
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return shape_err(format!("matmul_t inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (1, k),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            value,
            rg,
            Op::MatMul {
                a,
                b,
                b_transposed: true,
            },
            "matmul_t",
        )
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("{name}: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::Mul(a, b), "mul")
    }

    /// Adds the rows of `t` to the rows of `x`, cycling through `t`: row `i`
    /// of the output is `x[i] + t[i mod rows(t)]`. Covers bias addition
    /// (`t` has one row) and positional embeddings.
    pub fn add_tiled(&mut self, x: Var, t: Var) -> Result<Var> {
        let (tx, tt) = (self.value(x), self.value(t));
        if tx.cols() != tt.cols() || tx.rows() % tt.rows() != 0 {
            return shape_err(format!("add_tiled: {:?} by {:?}", tx.shape(), tt.shape()));
        }
        let (d, p) = (tt.cols(), tt.rows());
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(d).enumerate() {
            let trow = tt.row(i % p);
            for (o, b) in row.iter_mut().zip(trow) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, t]);
        self.push(value, rg, Op::AddTiled { x, t }, "add_tiled")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v * c).collect(),
        )?;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Scale { x, c }, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v.max(0.0)).collect(),
        )?;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu(x), "relu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x), "sum")
    }

    /// Averages consecutive blocks of rows: `[groups·len × d] → [groups × d]`.
    pub fn mean_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        if groups == 0 || n % groups != 0 {
            return shape_err(format!("mean_pool: {n} rows into {groups} groups"));
        }
        let len = n / groups;
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            for r in 0..len {
                let row = tx.row(g * len + r);
                for (o, v) in out[g * d..(g + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![groups, d], out)?;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::MeanPool { x, groups }, "mean_pool")
    }

    /// Normalises every row of `x` to zero mean and unit variance, then
    /// applies `gain` and `bias` (both of length `cols(x)`).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return shape_err(format!("layernorm gain/bias must have length {d}"));
        }
        let tx = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        let (xhat, inv_std) = if rg {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layernorm",
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let mut data = tx.data().to_vec();
        for_each_lane(&shape, axis, |idx| {
            let max = idx
                .clone()
                .map(|i| data[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in idx.clone() {
                data[i] = (data[i] - max).exp();
                total += data[i];
            }
            for i in idx {
                data[i] /= total;
            }
        });
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Softmax { x, axis }, "softmax")
    }

    /// Scaled dot-product attention over rows laid out as
    /// `[batch·len × heads·head_dim]`, one softmax per head and query.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let AttnLayout {
            batch,
            heads,
            q_len,
            kv_len,
            causal,
        } = layout;
        let d = self.value(q).cols();
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("model width {d} not divisible by {heads} heads"));
        }
        if self.value(q).rows() != batch * q_len
            || self.value(k).rows() != batch * kv_len
            || self.value(v).rows() != batch * kv_len
            || self.value(k).cols() != d
            || self.value(v).cols() != d
        {
            return shape_err("attention operands do not match layout");
        }
        if causal && q_len != kv_len {
            return shape_err("causal attention needs equal query and key lengths");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * q_len * kv_len];
        let mut out = vec![0.0; batch * q_len * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qrow = &tq[(b * q_len + i) * d + off..][..dh];
                    let p = &mut probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                    let visible = if causal { i + 1 } else { kv_len };
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        let krow = &tk[(b * kv_len + j) * d + off..][..dh];
                        let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                        *pj = s;
                        max = max.max(s);
                    }
                    let mut total = 0.0;
                    for pj in p.iter_mut().take(visible) {
                        *pj = (*pj - max).exp();
                        total += *pj;
                    }
                    let orow = &mut out[(b * q_len + i) * d + off..][..dh];
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        *pj /= total;
                        let vrow = &tv[(b * kv_len + j) * d + off..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += *pj * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch * q_len, d], out)?;
        let rg = self.rg(&[q, k, v]);
        let probs = if rg { probs } else { Vec::new() };
        self.push(
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            "attention",
        )
    }

    /// Per-row attention of a query over a small set of candidates:
    /// `α = softmax_i(q·keyᵢ / √d)`, output `Σᵢ αᵢ valᵢ`. Returns the output
    /// and the `[rows × candidates]` weight matrix.
    pub fn mix(&mut self, q: Var, keys: &[Var], vals: &[Var]) -> Result<(Var, Vec<f64>)> {
        if keys.is_empty() || keys.len() != vals.len() {
            return invalid("mix needs at least one key and matching values");
        }
        let shape = self.value(q).shape().to_vec();
        for &t in keys.iter().chain(vals) {
            if self.value(t).shape() != shape.as_slice() {
                return shape_err("mix operands must share the query's shape");
            }
        }
        let (rows, d) = (self.value(q).rows(), self.value(q).cols());
        let kc = keys.len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut alpha = vec![0.0; rows * kc];
        let mut out = vec![0.0; rows * d];
        let tq = self.value(q).data();
        for r in 0..rows {
            let qrow = &tq[r * d..(r + 1) * d];
            let a = &mut alpha[r * kc..(r + 1) * kc];
            for (i, key) in keys.iter().enumerate() {
                let krow = &self.nodes[key.0].value.data()[r * d..(r + 1) * d];
                a[i] = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
            }
            let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ai in a.iter_mut() {
                *ai = (*ai - max).exp();
                total += *ai;
            }
            let orow = &mut out[r * d..(r + 1) * d];
            for (i, val) in vals.iter().enumerate() {
                a[i] /= total;
                let vrow = &self.nodes[val.0].value.data()[r * d..(r + 1) * d];
                for (o, v) in orow.iter_mut().zip(vrow) {
                    *o += a[i] * v;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let mut all = vec![q];
        all.extend_from_slice(keys);
        all.extend_from_slice(vals);
        let rg = self.rg(&all);
        let var = self.push(
            value,
            rg,
            Op::Mix {
                q,
                keys: keys.to_vec(),
                vals: vals.to_vec(),
                alpha: alpha.clone(),
            },
            "mix",
        )?;
        Ok((var, alpha))
    }

    /// Row lookup: `[ids.len() × d]` from a `[V × d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return invalid(format!("token id {id} outside vocabulary of {v}"));
            }
            out.extend_from_slice(tt.row(id));
        }
        if ids.is_empty() {
            return shape_err("gather needs at least one id");
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        self.push(
            value,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            "gather",
        )
    }

    /// Per-example concatenation along the sequence axis:
    /// `[batch·la × d] ++ [batch·lb × d] → [batch·(la+lb) × d]`.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() || batch == 0 || ta.rows() % batch != 0 || tb.rows() % batch != 0
        {
            return shape_err("concat_seq operands do not split into the batch");
        }
        let d = ta.cols();
        let (la, lb) = (ta.rows() / batch, tb.rows() / batch);
        let mut out = Vec::with_capacity((ta.rows() + tb.rows()) * d);
        for e in 0..batch {
            out.extend_from_slice(&ta.data()[e * la * d..(e + 1) * la * d]);
            out.extend_from_slice(&tb.data()[e * lb * d..(e + 1) * lb * d]);
        }
        let value = Tensor::new(vec![batch * (la + lb), d], out)?;
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::ConcatSeq { a, b, batch }, "concat_seq")
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        if len == 0 || start + len > n {
            return shape_err(format!("slice_rows {start}..{} of {n} rows", start + len));
        }
        let value = Tensor::new(
            vec![len, d],
            tx.data()[start * d..(start + len) * d].to_vec(),
        )?;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::SliceRows { x, start }, "slice_rows")
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = (tl.rows(), tl.cols());
        if targets.len() != n {
            return shape_err(format!("{} targets for {n} logit rows", targets.len()));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return invalid("cross_entropy: every position is ignored");
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return invalid(format!("target {t} outside vocabulary of {v}"));
            }
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut total = 0.0;
            for (pi, x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                total += *pi;
            }
            loss += max + total.ln() - row[t];
            p.iter_mut().for_each(|pi| *pi /= total);
        }
        let value = Tensor::scalar(loss / count as f64);
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        self.push(value, rg, op, "cross_entropy")
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("mse: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let total: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / ta.numel() as f64);
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::Mse { a, b }, "mse")
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward("tape already differentiated".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        // Accumulate `src` into the gradient slot of `v` when `v` needs it.
        let acc = |grads: &mut [Option<Tensor>], v: Var, src: &[f64]| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], self.nodes[v.0].value.shape(), src);
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    if *b_transposed {
                        // b: n×k, da = g · b
                        gemm(m, n, k, gd, (n, 1), tb.data(), (k, 1), &mut da, false);
                    } else {
                        // b: k×n, da = g · bᵀ
                        gemm(m, n, k, gd, (n, 1), tb.data(), (1, n), &mut da, false);
                    }
                    acc(grads, *a, &da);
                }
                if needs(*b) {
                    if *b_transposed {
                        // db (n×k) = gᵀ · a
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, gd, (1, n), ta.data(), (k, 1), &mut db, false);
                        acc(grads, *b, &db);
                    } else {
                        // db (k×n) = aᵀ · g
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), (1, k), gd, (n, 1), &mut db, false);
                        acc(grads, *b, &db);
                    }
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, gd);
                acc(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gd);
                if needs(*b) {
                    let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                    acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let da: Vec<f64> = gd.iter().zip(tb).map(|(x, y)| x * y).collect();
                    acc(grads, *a, &da);
                }
                if needs(*b) {
                    let db: Vec<f64> = gd.iter().zip(ta).map(|(x, y)| x * y).collect();
                    acc(grads, *b, &db);
                }
            }
            Op::AddTiled { x, t } => {
                acc(grads, *x, gd);
                if needs(*t) {
                    let tt = self.value(*t);
                    let (p, d) = (tt.rows(), tt.cols());
                    let mut dt = vec![0.0; p * d];
                    for (i, row) in gd.chunks(d).enumerate() {
                        let r = i % p;
                        for (o, v) in dt[r * d..(r + 1) * d].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(grads, *t, &dt);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = gd.iter().map(|v| v * c).collect();
                acc(grads, *x, &dx);
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(tx)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![gd[0]; self.value(*x).numel()];
                acc(grads, *x, &dx);
            }
            Op::MeanPool { x, groups } => {
                let tx = self.value(*x);
                let (n, d) = (tx.rows(), tx.cols());
                let len = n / groups;
                let inv = 1.0 / len as f64;
                let mut dx = vec![0.0; n * d];
                for (r, row) in dx.chunks_mut(d).enumerate() {
                    let grow = &gd[(r / len) * d..(r / len + 1) * d];
                    for (o, v) in row.iter_mut().zip(grow) {
                        *o = v * inv;
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*x).cols();
                let rows = xhat.len() / d;
                let gn = self.value(*gain).data();
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    acc(grads, *gain, &dg);
                    acc(grads, *bias, &db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gn[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gn[j];
                            dx[r * d + j] =
                                inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for_each_lane(node.value.shape(), *axis, |idx| {
                    let dot: f64 = idx.clone().map(|i| gd[i] * y[i]).sum();
                    for i in idx {
                        dx[i] = y[i] * (gd[i] - dot);
                    }
                });
                acc(grads, *x, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let AttnLayout {
                    batch,
                    heads,
                    q_len,
                    kv_len,
                    causal,
                } = *layout;
                let d = self.value(*q).cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (tq, tk, tv) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tk.len()];
                let mut dv = vec![0.0; tv.len()];
                let mut dp = vec![0.0; kv_len];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..q_len {
                            let visible = if causal { i + 1 } else { kv_len };
                            let p = &probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                            let grow = &gd[(b * q_len + i) * d + off..][..dh];
                            let mut dot = 0.0;
                            for j in 0..visible {
                                let vrow = &tv[(b * kv_len + j) * d + off..][..dh];
                                dp[j] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                dot += dp[j] * p[j];
                                let dvrow = &mut dv[(b * kv_len + j) * d + off..][..dh];
                                for (o, gg) in dvrow.iter_mut().zip(grow) {
                                    *o += p[j] * gg;
                                }
                            }
                            let qrow = &tq[(b * q_len + i) * d + off..][..dh];
                            for j in 0..visible {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &tk[(b * kv_len + j) * d + off..][..dh];
                                let dqrow = &mut dq[(b * q_len + i) * d + off..][..dh];
                                for (o, kk) in dqrow.iter_mut().zip(krow) {
                                    *o += ds * kk;
                                }
                                let dkrow = &mut dk[(b * kv_len + j) * d + off..][..dh];
                                for (o, qq) in dkrow.iter_mut().zip(qrow) {
                                    *o += ds * qq;
                                }
                            }
                        }
                    }
                }
                acc(grads, *q, &dq);
                acc(grads, *k, &dk);
                acc(grads, *v, &dv);
            }
            Op::Mix {
                q,
                keys,
                vals,
                alpha,
            } => {
                let d = self.value(*q).cols();
                let rows = self.value(*q).rows();
                let kc = keys.len();
                let scale = 1.0 / (d as f64).sqrt();
                let tq = self.value(*q).data();
                let mut dq = vec![0.0; rows * d];
                let mut dkeys = vec![vec![0.0; rows * d]; kc];
                let mut dvals = vec![vec![0.0; rows * d]; kc];
                let mut da = vec![0.0; kc];
                for r in 0..rows {
                    let grow = &gd[r * d..(r + 1) * d];
                    let a = &alpha[r * kc..(r + 1) * kc];
                    let mut dot = 0.0;
                    for i in 0..kc {
                        let vrow = &self.value(vals[i]).data()[r * d..(r + 1) * d];
                        da[i] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        dot += a[i] * da[i];
                        for (o, gg) in dvals[i][r * d..(r + 1) * d].iter_mut().zip(grow) {
                            *o += a[i] * gg;
                        }
                    }
                    let qrow = &tq[r * d..(r + 1) * d];
                    for i in 0..kc {
                        let ds = a[i] * (da[i] - dot) * scale;
                        let krow = &self.value(keys[i]).data()[r * d..(r + 1) * d];
                        for j in 0..d {
                            dq[r * d + j] += ds * krow[j];
                            dkeys[i][r * d + j] += ds * qrow[j];
                        }
                    }
                }
                acc(grads, *q, &dq);
                for i in 0..kc {
                    acc(grads, keys[i], &dkeys[i]);
                    acc(grads, vals[i], &dvals[i]);
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let mut dt = vec![0.0; tt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += gd[r * d + j];
                        }
                    }
                    acc(grads, *table, &dt);
                }
            }
            Op::ConcatSeq { a, b, batch } => {
                let d = node.value.cols();
                let la = self.value(*a).rows() / batch;
                let lb = self.value(*b).rows() / batch;
                let mut da = Vec::with_capacity(batch * la * d);
                let mut db = Vec::with_capacity(batch * lb * d);
                for e in 0..*batch {
                    let base = e * (la + lb) * d;
                    da.extend_from_slice(&gd[base..base + la * d]);
                    db.extend_from_slice(&gd[base + la * d..base + (la + lb) * d]);
                }
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let d = tx.cols();
                let mut dx = vec![0.0; tx.numel()];
                dx[start * d..start * d + gd.len()].copy_from_slice(gd);
                acc(grads, *x, &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = gd[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        dl[r * v + j] = probs[r * v + j] * scale;
                    }
                    dl[r * v + t] -= scale;
                }
                acc(grads, *logits, &dl);
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * gd[0] / ta.len() as f64;
                let diff: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| c * (x - y)).collect();
                acc(grads, *a, &diff);
                if needs(*b) {
                    let neg: Vec<f64> = diff.iter().map(|x| -x).collect();
                    acc(grads, *b, &neg);
                }
            }
        }
        Ok(())
    }
}

/// Calls `f` once per lane along `axis` with an iterator over the flat
/// indices of that lane.
fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            f((start..start + len * inner).step_by(inner));
        }
    }
}
