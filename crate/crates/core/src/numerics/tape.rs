//! Reverse-mode differentiation over a recorded tape of coarse tensor ops.
//!
//! Every op pushes one node holding its forward value plus whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into the inputs that require them. Matrices are
//! row-major `[rows, cols]`; ops that take "rows" treat the last axis as the
//! column axis.

use std::collections::BTreeMap;
use std::ops::Range;

use super::gemm::{gemm, View};
use super::params::{GradMap, ParamStore};
use super::sampling::{bilinear_weights, BilinearTap};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Geometry of one level inside a flattened multi-level value matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
    /// First row of this level in the flattened matrix.
    pub offset: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRow {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Im2Col {
        x: Var,
        height: usize,
        width: usize,
        channels: usize,
        stride: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Range<usize>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    L1 {
        pred: Var,
        target: Vec<f64>,
    },
    Giou {
        pred: Var,
        grads: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
    DeformSample {
        values: Var,
        levels: Vec<LevelShape>,
        loc: Var,
        weights: Var,
        heads: usize,
        taps: Vec<BilinearTap>,
    },
    Bilinear {
        feat: Var,
        points: Var,
        taps: Vec<BilinearTap>,
        width: usize,
        height: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter used on the tape, keyed by path.
    /// Parameters that were recorded but received no gradient get zeros.
    pub fn into_param_grads(mut self, store: &ParamStore) -> GradMap {
        let mut out = GradMap::new();
        for (path, var) in &self.params {
            if store.is_frozen(path) {
                continue;
            }
            let len = store.get(path).map(|t| t.len()).unwrap_or(0);
            let g = self.grads[var.0].take().unwrap_or_else(|| vec![0.0; len]);
            out.insert(path.clone(), g);
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Norms below this are clamped when normalizing rows.
pub const NORM_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node in creation order.
    pub fn vars(&self) -> impl DoubleEndedIterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf input that collects a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records parameter `path` from `store`. Repeated calls return the same node,
    /// so a parameter used twice accumulates both contributions.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let t = store
            .get(path)
            .ok_or_else(|| Error::Lookup(format!("parameter '{path}' not in store")))?;
        let trainable = !store.is_frozen(path);
        let v = self.push(
            Tensor::from_parts(t.shape().to_vec(), t.values().to_vec()),
            Op::Leaf,
            trainable,
        );
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    /// `op(a) · op(b)` with optional transposition of each operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err!(
                "matmul inner axes differ: lhs has {k} columns, rhs has {k2} rows"
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.values(a),
            View::rm(ac, ta),
            self.values(b),
            View::rm(bc, tb),
            0.0,
            &mut out,
            View::rm(n, false),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Adds vector `b` (length = columns of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(b).len() != c {
            return Err(dim_err!(
                "row bias has {} entries but rows have {c} columns",
                self.value(b).len()
            ));
        }
        let bv = self.values(b);
        let mut out = self.values(x).to_vec();
        for row in out.chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        let shape = self.shape(x).to_vec();
        let _ = r;
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow { x, b }, ng))
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(dim_err!(
                "{what}: operands have shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, out), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        Ok(self.zip_op(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        Ok(self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        Ok(self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.values(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), ng)
    }

    fn map_op(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.values(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, out), op, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_op(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), ng))
    }

    /// Per-row normalization followed by the affine `gamma * xhat + beta`.
    /// A zero-variance row normalizes to 0, so the output is `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(dim_err!(
                "layer norm affine widths ({}, {}) differ from row width {c}",
                self.value(gamma).len(),
                self.value(beta).len()
            ));
        }
        let xs = self.values(x);
        let g = self.values(gamma);
        let b = self.values(beta);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention over `heads` column groups of already
    /// projected queries `[m, d]`, keys `[s, d]` and values `[s, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (m, d) = self.dims(q);
        let (s, dk) = self.dims(k);
        let (sv, dv) = self.dims(v);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        if dk != d || dv != d || sv != s {
            return Err(dim_err!(
                "attention shapes q [{m},{d}], k [{s},{dk}], v [{sv},{dv}] do not conform"
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * m * s];
        let mut out = vec![0.0; m * d];
        {
            let qv = self.values(q);
            let kv = self.values(k);
            let vv = self.values(v);
            for h in 0..heads {
                let p = &mut probs[h * m * s..(h + 1) * m * s];
                gemm(
                    m,
                    dh,
                    s,
                    &qv[h * dh..],
                    View::strided(d, 1),
                    &kv[h * dh..],
                    View::strided(1, d),
                    0.0,
                    p,
                    View::rm(s, false),
                );
                for row in p.chunks_mut(s) {
                    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
                    let mut z = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e * scale - mx).exp();
                        z += *e;
                    }
                    for e in row.iter_mut() {
                        *e /= z;
                    }
                }
                gemm(
                    m,
                    s,
                    dh,
                    p,
                    View::rm(s, false),
                    &vv[h * dh..],
                    View::strided(d, 1),
                    0.0,
                    &mut out[h * dh..],
                    View::strided(d, 1),
                );
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::from_parts(vec![m, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Attention weights recorded by an [`Tape::attention`] node, as
    /// `[heads][queries][keys]` flattened.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Unfolds 3×3 patches (padding 1) of an HWC map stored as `[h*w, c]` into
    /// `[oh*ow, 9c]`, columns ordered (ky, kx, channel).
    pub fn im2col(
        &mut self,
        x: Var,
        height: usize,
        width: usize,
        stride: usize,
    ) -> Result<Var> {
        let (r, channels) = self.dims(x);
        if r != height * width {
            return Err(dim_err!(
                "im2col expects {height}x{width} = {} rows, found {r}",
                height * width
            ));
        }
        let (oh, ow) = conv_out(height, width, stride);
        let xs = self.values(x);
        let cols = 9 * channels;
        let mut out = vec![0.0; oh * ow * cols];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * cols;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let src = (iy as usize * width + ix as usize) * channels;
                        let dst = base + (ky * 3 + kx) * channels;
                        out[dst..dst + channels].copy_from_slice(&xs[src..src + channels]);
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![oh * ow, cols], out),
            Op::Im2Col {
                x,
                height,
                width,
                channels,
                stride,
            },
            ng,
        ))
    }

    /// Rows `x[index[i]]`, in order; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(dim_err!("row index {bad} out of range for {r} rows"));
        }
        if index.is_empty() {
            return Err(dim_err!("gather with an empty index"));
        }
        let xs = self.values(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), c], out),
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(dim_err!("concat_rows: column counts {c} and {pc} differ"));
            }
            rows += r;
            out.extend_from_slice(self.values(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let mut width = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(dim_err!("concat_cols: row counts {r} and {pr} differ"));
            }
            width += pc;
        }
        let mut out = vec![0.0; r * width];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.dims(p);
            let src = self.values(p);
            for i in 0..r {
                out[i * width + off..i * width + off + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![r, width], out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Scales every row to unit Euclidean norm (norm clamped at [`NORM_FLOOR`]).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xs = self.values(x);
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(
            Tensor::from_parts(shape, out),
            Op::NormalizeRows { x, norms },
            ng,
        )
    }

    fn check_segments(&self, x: Var, segments: &[Range<usize>]) -> Result<(usize, usize)> {
        let (r, c) = self.dims(x);
        for s in segments {
            if s.start >= s.end || s.end > c {
                return Err(dim_err!("column segment {s:?} invalid for {c} columns"));
            }
        }
        if segments.is_empty() {
            return Err(dim_err!("no column segments given"));
        }
        Ok((r, c))
    }

    /// Per row, the maximum over each column segment: `[r, c] -> [r, segments]`.
    pub fn segment_max(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let (r, c) = self.check_segments(x, segments)?;
        let k = segments.len();
        let xs = self.values(x);
        let mut out = vec![0.0; r * k];
        let mut argmax = vec![0; r * k];
        for i in 0..r {
            for (j, s) in segments.iter().enumerate() {
                let mut best = s.start;
                for col in s.clone() {
                    if xs[i * c + col] > xs[i * c + best] {
                        best = col;
                    }
                }
                out[i * k + j] = xs[i * c + best];
                argmax[i * k + j] = i * c + best;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![r, k], out),
            Op::SegmentMax { x, argmax },
            ng,
        ))
    }

    /// Per row, the mean over each column segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let (r, c) = self.check_segments(x, segments)?;
        let k = segments.len();
        let xs = self.values(x);
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            for (j, s) in segments.iter().enumerate() {
                let sum: f64 = xs[i * c + s.start..i * c + s.end].iter().sum();
                out[i * k + j] = sum / s.len() as f64;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![r, k], out),
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            ng,
        ))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i])` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r || weights.len() != r {
            return Err(dim_err!(
                "cross entropy over {r} rows got {} targets and {} weights",
                targets.len(),
                weights.len()
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Validation(format!("target class {t} out of range for {c} classes")));
        }
        let probs = softmax_rows(self.value(logits))?;
        let mut loss = 0.0;
        for i in 0..r {
            loss -= weights[i] * probs[i * c + targets[i]].ln();
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over rows of the L1 distance between `pred` rows and constant `target` rows.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let (r, _) = self.dims(pred);
        if target.len() != self.value(pred).len() {
            return Err(dim_err!(
                "l1 target has {} values, prediction {}",
                target.len(),
                self.value(pred).len()
            ));
        }
        let sum: f64 = self
            .values(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).abs())
            .sum();
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(sum / r as f64),
            Op::L1 {
                pred,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over rows of `1 − GIoU` between `pred` boxes `[n, 4]` (cx, cy, w, h)
    /// and constant `target` boxes in the same layout.
    pub fn giou_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let (r, c) = self.dims(pred);
        if c != 4 || target.len() != r * 4 {
            return Err(dim_err!(
                "giou loss expects [n,4] predictions and matching targets, got {:?} and {} values",
                self.shape(pred),
                target.len()
            ));
        }
        let pv = self.values(pred);
        let mut grads = vec![0.0; r * 4];
        let mut sum = 0.0;
        for i in 0..r {
            let p: [f64; 4] = pv[i * 4..i * 4 + 4].try_into().expect("row of 4");
            let t: [f64; 4] = target[i * 4..i * 4 + 4].try_into().expect("row of 4");
            let (g, dg) = crate::geometry::giou_cxcywh_with_grad(p, t);
            sum += 1.0 - g;
            for j in 0..4 {
                grads[i * 4 + j] = -dg[j] / r as f64;
            }
        }
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(sum / r as f64),
            Op::Giou { pred, grads },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values(x).iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let out = self.values(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Reshape(x), ng))
    }

    /// Differentiable bilinear sampling of an HWC map `[h*w, d]` at normalized
    /// points `[n, 2]` (x, y); output `[n, d]`.
    pub fn bilinear_sample(&mut self, feat: Var, height: usize, width: usize, points: Var) -> Result<Var> {
        let (r, d) = self.dims(feat);
        if r != height * width {
            return Err(dim_err!("feature map has {r} rows, expected {height}x{width}"));
        }
        let (n, pc) = self.dims(points);
        if pc != 2 {
            return Err(dim_err!("points must be [n, 2], got {:?}", self.shape(points)));
        }
        let fv = self.values(feat);
        let pv = self.values(points);
        let mut out = vec![0.0; n * d];
        let mut taps = Vec::with_capacity(n);
        for i in 0..n {
            let tap = bilinear_weights(pv[2 * i], pv[2 * i + 1], height, width);
            tap.accumulate(fv, d, 0, 0..d, 1.0, &mut out[i * d..(i + 1) * d]);
            taps.push(tap);
        }
        let ng = self.needs(feat) || self.needs(points);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::Bilinear {
                feat,
                points,
                taps,
                width,
                height,
            },
            ng,
        ))
    }

    /// Multi-scale deformable sampling core.
    ///
    /// `values` is `[tokens, d]`, every level stacked row-wise as described by
    /// `levels`. `loc` is `[nq, heads*L*P*2]` normalized (x, y) sample points and
    /// `weights` is `[nq, heads*L*P]`. Head `h` reads channels
    /// `h*d/heads..(h+1)*d/heads` and the output is `[nq, d]`.
    pub fn deform_sample(
        &mut self,
        values: Var,
        levels: &[LevelShape],
        loc: Var,
        weights: Var,
        heads: usize,
    ) -> Result<Var> {
        let (tokens, d) = self.dims(values);
        if levels.is_empty() {
            return Err(Error::Config("deformable sampling needs at least one level".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        for l in levels {
            if l.offset + l.height * l.width > tokens {
                return Err(dim_err!("level {l:?} exceeds {tokens} value rows"));
            }
        }
        let (nq, wc) = self.dims(weights);
        let (lq, lc) = self.dims(loc);
        if wc % (heads * levels.len()) != 0 || lq != nq || lc != 2 * wc {
            return Err(dim_err!(
                "deformable shapes loc {:?} and weights {:?} do not conform",
                self.shape(loc),
                self.shape(weights)
            ));
        }
        let points = wc / (heads * levels.len());
        let dh = d / heads;
        let vv = self.values(values);
        let lv = self.values(loc);
        let wv = self.values(weights);
        let mut out = vec![0.0; nq * d];
        let mut taps = Vec::with_capacity(nq * wc);
        for q in 0..nq {
            for h in 0..heads {
                for (li, lvl) in levels.iter().enumerate() {
                    for p in 0..points {
                        let s = (h * levels.len() + li) * points + p;
                        let px = lv[q * lc + 2 * s];
                        let py = lv[q * lc + 2 * s + 1];
                        let tap = bilinear_weights(px, py, lvl.height, lvl.width);
                        let w = wv[q * wc + s];
                        tap.accumulate(
                            vv,
                            d,
                            lvl.offset,
                            h * dh..(h + 1) * dh,
                            w,
                            &mut out[q * d..(q + 1) * d],
                        );
                        taps.push(tap);
                    }
                }
            }
        }
        let ng = self.needs(values) || self.needs(loc) || self.needs(weights);
        Ok(self.push(
            Tensor::from_parts(vec![nq, d], out),
            Op::DeformSample {
                values,
                levels: levels.to_vec(),
                loc,
                weights,
                heads,
                taps,
            },
            ng,
        ))
    }

    /// Back-propagates from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(dim_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
        if let (Some(buf), Some(dst)) = (buf, self.acc(grads, v)) {
            for (o, x) in dst.iter_mut().zip(&buf) {
                *o += x;
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let av = self.values(a);
                let bv = self.values(b);
                let a_view = View::rm(self.dims(a).1, ta);
                let b_view = View::rm(self.dims(b).1, tb);
                if let Some(ga) = self.acc(grads, a) {
                    // d op(a) = g · op(b)^T
                    let out = if ta { View::strided(1, m) } else { View::strided(k, 1) };
                    gemm(m, n, k, g, View::rm(n, false), bv, b_view.t(), 1.0, ga, out);
                }
                if let Some(gb) = self.acc(grads, b) {
                    // d op(b) = op(a)^T · g
                    let out = if tb { View::strided(1, k) } else { View::strided(n, 1) };
                    gemm(k, m, n, av, a_view.t(), g, View::rm(n, false), 1.0, gb, out);
                }
            }
            &Op::AddRow { x, b } => {
                let c = self.dims(x).1;
                if let Some(gx) = self.acc(grads, x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for row in g.chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if let Some(gv) = self.acc(grads, v) {
                        for (o, x) in gv.iter_mut().zip(g) {
                            *o += sign * x;
                        }
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if let Some(gv) = self.acc(grads, v) {
                        for (o, x) in gv.iter_mut().zip(g) {
                            *o += sign * x;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.values(a), self.values(b));
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.values(x);
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = node.value.values();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = node.value.values();
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, x) {
                    for (i, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gam = self.values(*gamma);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (i, gi) in g.iter().enumerate() {
                        gg[i % c] += gi * xhat[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, s) in rstd.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let dxhat: Vec<f64> =
                            g[row.clone()].iter().zip(gam).map(|(a, b)| a * b).collect();
                        let xh = &xhat[row.clone()];
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += s * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            &Op::Im2Col {
                x,
                height,
                width,
                channels,
                stride,
            } => {
                if let Some(gx) = self.acc(grads, x) {
                    let (oh, ow) = conv_out(height, width, stride);
                    let cols = 9 * channels;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let base = (oy * ow + ox) * cols;
                            for ky in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= height as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix < 0 || ix >= width as isize {
                                        continue;
                                    }
                                    let dst = (iy as usize * width + ix as usize) * channels;
                                    let src = base + (ky * 3 + kx) * channels;
                                    for ch in 0..channels {
                                        gx[dst + ch] += g[src + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        for (o, v) in gp.iter_mut().zip(&g[off..off + len]) {
                            *o += v;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let width = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..rows {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * width + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let y = node.value.values();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        if n <= NORM_FLOOR {
                            for j in row {
                                gx[j] += g[j] / n;
                            }
                            continue;
                        }
                        let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            gx[j] += (g[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let c = self.dims(*x).1;
                let k = segments.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..node.value.rows() {
                        for (j, s) in segments.iter().enumerate() {
                            let share = g[r * k + j] / s.len() as f64;
                            for col in s.clone() {
                                gx[r * c + col] += share;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.dims(*logits).1;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += g[0] * w * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::L1 { pred, target } => {
                let rows = self.dims(*pred).0 as f64;
                let pv = self.values(*pred);
                if let Some(gp) = self.acc(grads, *pred) {
                    for i in 0..pv.len() {
                        let d = pv[i] - target[i];
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gp[i] += g[0] * s / rows;
                    }
                }
            }
            Op::Giou { pred, grads: dg } => {
                if let Some(gp) = self.acc(grads, *pred) {
                    for (o, d) in gp.iter_mut().zip(dg) {
                        *o += g[0] * d;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Bilinear {
                feat,
                points,
                taps,
                width,
                height,
            } => {
                let d = self.dims(*feat).1;
                let fv = self.values(*feat);
                if let Some(gf) = self.acc(grads, *feat) {
                    for (i, tap) in taps.iter().enumerate() {
                        tap.scatter(&g[i * d..(i + 1) * d], d, 0, 0..d, 1.0, gf);
                    }
                }
                if let Some(gp) = self.acc(grads, *points) {
                    for (i, tap) in taps.iter().enumerate() {
                        let (dx, dy) = tap.grad_point(fv, d, 0, 0..d, &g[i * d..(i + 1) * d], *height, *width);
                        gp[2 * i] += dx;
                        gp[2 * i + 1] += dy;
                    }
                }
            }
            Op::DeformSample {
                values,
                levels,
                loc,
                weights,
                heads,
                taps,
            } => {
                let (_, d) = self.dims(*values);
                let dh = d / heads;
                let (nq, wc) = self.dims(*weights);
                let points = wc / (heads * levels.len());
                let vv = self.values(*values);
                let wv = self.values(*weights);
                let mut gval = self.needs(*values).then(|| vec![0.0; vv.len()]);
                let mut gloc = self.needs(*loc).then(|| vec![0.0; nq * 2 * wc]);
                let mut gw = self.needs(*weights).then(|| vec![0.0; nq * wc]);
                for q in 0..nq {
                    let gq = &g[q * d..(q + 1) * d];
                    for h in 0..*heads {
                        let ch = h * dh..(h + 1) * dh;
                        for (li, lvl) in levels.iter().enumerate() {
                            for p in 0..points {
                                let s = (h * levels.len() + li) * points + p;
                                let tap = &taps[q * wc + s];
                                let w = wv[q * wc + s];
                                if let Some(gw) = gw.as_mut() {
                                    gw[q * wc + s] += tap.dot(vv, d, lvl.offset, ch.clone(), gq);
                                }
                                if let Some(gv) = gval.as_mut() {
                                    tap.scatter(gq, d, lvl.offset, ch.clone(), w, gv);
                                }
                                if let Some(gl) = gloc.as_mut() {
                                    let (dx, dy) = tap.grad_point(
                                        vv,
                                        d,
                                        lvl.offset,
                                        ch.clone(),
                                        gq,
                                        lvl.height,
                                        lvl.width,
                                    );
                                    gl[q * 2 * wc + 2 * s] += w * dx;
                                    gl[q * 2 * wc + 2 * s + 1] += w * dy;
                                }
                            }
                        }
                    }
                }
                self.add_into(grads, *values, gval);
                self.add_into(grads, *loc, gloc);
                self.add_into(grads, *weights, gw);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (m, d) = self.dims(q);
        let (s, _) = self.dims(k);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.values(q);
        let kv = self.values(k);
        let vv = self.values(v);
        let mut gq = self.needs(q).then(|| vec![0.0; m * d]);
        let mut gk = self.needs(k).then(|| vec![0.0; s * d]);
        let mut gv = self.needs(v).then(|| vec![0.0; s * d]);
        let mut ds = vec![0.0; m * s];
        for h in 0..heads {
            let p = &probs[h * m * s..(h + 1) * m * s];
            if let Some(gv) = gv.as_mut() {
                // dV_h += P^T · dO_h
                gemm(
                    s,
                    m,
                    dh,
                    p,
                    View::strided(1, s),
                    &g[h * dh..],
                    View::strided(d, 1),
                    1.0,
                    &mut gv[h * dh..],
                    View::strided(d, 1),
                );
            }
            if gq.is_none() && gk.is_none() {
                continue;
            }
            // dP = dO_h · V_h^T
            gemm(
                m,
                dh,
                s,
                &g[h * dh..],
                View::strided(d, 1),
                &vv[h * dh..],
                View::strided(1, d),
                0.0,
                &mut ds,
                View::rm(s, false),
            );
            for (dr, pr) in ds.chunks_mut(s).zip(p.chunks(s)) {
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = pp * (*x - dot) * scale;
                }
            }
            if let Some(gq) = gq.as_mut() {
                gemm(
                    m,
                    s,
                    dh,
                    &ds,
                    View::rm(s, false),
                    &kv[h * dh..],
                    View::strided(d, 1),
                    1.0,
                    &mut gq[h * dh..],
                    View::strided(d, 1),
                );
            }
            if let Some(gk) = gk.as_mut() {
                gemm(
                    s,
                    m,
                    dh,
                    &ds,
                    View::strided(1, s),
                    &qv[h * dh..],
                    View::strided(d, 1),
                    1.0,
                    &mut gk[h * dh..],
                    View::strided(d, 1),
                );
            }
        }
        self.add_into(grads, q, gq);
        self.add_into(grads, k, gk);
        self.add_into(grads, v, gv);
    }
}

/// Output size of a 3×3, padding-1 convolution.
pub fn conv_out(height: usize, width: usize, stride: usize) -> (usize, usize) {
    ((height - 1) / stride + 1, (width - 1) / stride + 1)
}

/// Row-wise softmax of a tensor whose last axis is the class axis.
pub fn softmax_rows(t: &Tensor) -> Result<Vec<f64>> {
    let c = t.cols();
    if c == 0 {
        return Err(dim_err!("softmax over an empty axis"));
    }
    let mut out = t.values().to_vec();
    for row in out.chunks_mut(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for e in row.iter_mut() {
            *e = (*e - mx).exp();
            z += *e;
        }
        for e in row.iter_mut() {
            *e /= z;
        }
    }
    Ok(out)
}
