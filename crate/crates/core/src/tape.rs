//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A `Tape` records one forward computation as a sequence of nodes; `Var`
//! is an index into that sequence. Parameters are copied onto the tape with
//! [`Tape::param`] and gradients are read back after [`Tape::backward`].
//! One backward pass per tape; reuse is a state error.
//!
//! Storage is f32; reductions (dot products, row sums, statistics)
//! accumulate in f64. Every op checks its output for non-finite values.

use crate::error::{CkbError, Result};
use crate::tensor::{numel, shape_str, Tensor};

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    AddRow { m: Var, v: Var },
    AddN { xs: Vec<Var> },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    SoftmaxRows { x: Var },
    Transpose { x: Var },
    ConcatRows { xs: Vec<Var> },
    ConcatCols { xs: Vec<Var> },
    MeanRows { x: Var },
    MaxRows { x: Var, argmax: Vec<usize> },
    Unfold { x: Var, w: usize },
    Embed { table: Var, ids: Vec<usize> },
    Reshape { x: Var },
    SliceRows { x: Var, from: usize },
    ClipRowsNorm { x: Var, scales: Vec<f64> },
    CosineDistance { a: Var, b: Var, saved: Vec<RowCosine> },
    LayerNormRows { x: Var, gamma: Var, beta: Var, saved: Vec<RowStats> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
}

struct RowCosine {
    dot: f64,
    norm_a: f64,
    norm_b: f64,
}

struct RowStats {
    mean: f64,
    inv_std: f64,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    /// Full-precision value for scalar reduction outputs.
    scalar_f64: Option<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const COSINE_NORM_EPS: f64 = 1e-8;

fn erf(x: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26, |error| <= 1.5e-7.
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal pdf.
fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU: x * Phi(x).
pub fn gelu_scalar(x: f64) -> f64 {
    x * phi(x)
}

fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copy a tensor onto the tape, tracking gradients per its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Copy a tensor onto the tape as a constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(CkbError::shape(
                "constant",
                format!("{} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(self.push_leaf(vec![rows, cols], data, false))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            scalar_f64: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f32>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CkbError::Numeric {
                op: op_name.to_string(),
                detail: format!("non-finite output of shape {}", shape_str(&shape)),
            });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            scalar_f64: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Scale { x, .. }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::SoftmaxRows { x }
            | Op::Transpose { x }
            | Op::MeanRows { x }
            | Op::MaxRows { x, .. }
            | Op::Unfold { x, .. }
            | Op::Reshape { x }
            | Op::SliceRows { x, .. }
            | Op::ClipRowsNorm { x, .. } => vec![*x],
            Op::AddRow { m, v } => vec![*m, *v],
            Op::AddN { xs } | Op::ConcatRows { xs } | Op::ConcatCols { xs } => xs.clone(),
            Op::Embed { table, .. } => vec![*table],
            Op::CosineDistance { a, b, .. } => vec![*a, *b],
            Op::LayerNormRows { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node is always well-formed")
    }

    pub fn grad_of(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar value at full precision where the op retained it
    /// (reduction heads), else the stored f32 value.
    pub fn value_f64(&self, v: Var) -> f64 {
        self.nodes[v.0]
            .scalar_f64
            .unwrap_or(self.nodes[v.0].data[0] as f64)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        matrix_dims(&self.nodes[v.0].shape).ok_or_else(|| {
            CkbError::shape(op, "rank-2 tensor", shape_str(&self.nodes[v.0].shape))
        })
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(CkbError::shape(
                "matmul",
                format!("inner dims equal, lhs {}", shape_str(self.shape_of(a))),
                shape_str(self.shape_of(b)),
            ));
        }
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &ad[i * ka..(i + 1) * ka];
            for j in 0..n {
                let mut acc = 0.0f64;
                for (k, &av) in arow.iter().enumerate() {
                    acc += av as f64 * bd[k * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        self.push("matmul", vec![m, n], out, Op::Matmul { a, b })
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CkbError::shape(
                name,
                shape_str(&self.nodes[a.0].shape),
                shape_str(&self.nodes[b.0].shape),
            ));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Scalar-times-tensor, the one permitted broadcast.
    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push("scale", shape, data, Op::Scale { x, c })
    }

    /// Add a length-n vector to every row of an m-by-n matrix.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("add_row", m)?;
        let vlen = self.nodes[v.0].data.len();
        if vlen != cols || self.nodes[v.0].shape.len() != 1 {
            return Err(CkbError::shape(
                "add_row",
                format!("vector of length {cols}"),
                shape_str(&self.nodes[v.0].shape),
            ));
        }
        let mut data = self.nodes[m.0].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.nodes[v.0].data[c];
            }
        }
        self.push("add_row", vec![rows, cols], data, Op::AddRow { m, v })
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(CkbError::Input("add_n of empty list".into()))?;
        let shape = self.nodes[first.0].shape.clone();
        for &x in xs {
            if self.nodes[x.0].shape != shape {
                return Err(CkbError::shape(
                    "add_n",
                    shape_str(&shape),
                    shape_str(&self.nodes[x.0].shape),
                ));
            }
        }
        let n = numel(&shape);
        let mut data = vec![0.0f32; n];
        for &x in xs {
            for (d, &s) in data.iter_mut().zip(&self.nodes[x.0].data) {
                *d += s;
            }
        }
        self.push("add_n", shape, data, Op::AddN { xs: xs.to_vec() })
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(name, shape, data, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| gelu_scalar(v as f64) as f32, Op::Gelu { x })
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("softmax_rows", x)?;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - mx) as f64).exp();
                data[r * cols + j] = e as f32;
                sum += e;
            }
            for j in 0..cols {
                data[r * cols + j] = (data[r * cols + j] as f64 / sum) as f32;
            }
        }
        self.push("softmax_rows", vec![rows, cols], data, Op::SoftmaxRows { x })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("transpose", x)?;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = xd[r * cols + c];
            }
        }
        self.push("transpose", vec![cols, rows], data, Op::Transpose { x })
    }

    /// Stack matrices with equal column counts, top to bottom.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(CkbError::Input("concat_rows of empty list".into()))?;
        let (_, cols) = self.dims2("concat_rows", first)?;
        let mut total_rows = 0;
        for &x in xs {
            let (r, c) = self.dims2("concat_rows", x)?;
            if c != cols {
                return Err(CkbError::shape(
                    "concat_rows",
                    format!("{cols} columns"),
                    shape_str(self.shape_of(x)),
                ));
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        for &x in xs {
            data.extend_from_slice(&self.nodes[x.0].data);
        }
        self.push(
            "concat_rows",
            vec![total_rows, cols],
            data,
            Op::ConcatRows { xs: xs.to_vec() },
        )
    }

    /// Concatenate matrices with equal row counts, left to right.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(CkbError::Input("concat_cols of empty list".into()))?;
        let (rows, _) = self.dims2("concat_cols", first)?;
        let mut total_cols = 0;
        for &x in xs {
            let (r, c) = self.dims2("concat_cols", x)?;
            if r != rows {
                return Err(CkbError::shape(
                    "concat_cols",
                    format!("{rows} rows"),
                    shape_str(self.shape_of(x)),
                ));
            }
            total_cols += c;
        }
        let mut data = vec![0.0f32; rows * total_cols];
        for r in 0..rows {
            let mut off = 0;
            for &x in xs {
                let c = self.nodes[x.0].shape[1];
                let src = &self.nodes[x.0].data[r * c..(r + 1) * c];
                data[r * total_cols + off..r * total_cols + off + c].copy_from_slice(src);
                off += c;
            }
        }
        self.push(
            "concat_cols",
            vec![rows, total_cols],
            data,
            Op::ConcatCols { xs: xs.to_vec() },
        )
    }

    /// Column means over rows: m-by-n -> 1-by-n.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("mean_rows", x)?;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0f32; cols];
        for c in 0..cols {
            let mut acc = 0.0f64;
            for r in 0..rows {
                acc += xd[r * cols + c] as f64;
            }
            data[c] = (acc / rows as f64) as f32;
        }
        self.push("mean_rows", vec![1, cols], data, Op::MeanRows { x })
    }

    /// Column-wise max over rows: m-by-n -> 1-by-n. Gradient flows to the
    /// first maximal row per column.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("max_rows", x)?;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![f32::NEG_INFINITY; cols];
        let mut argmax = vec![0usize; cols];
        for c in 0..cols {
            for r in 0..rows {
                let v = xd[r * cols + c];
                if v > data[c] {
                    data[c] = v;
                    argmax[c] = r;
                }
            }
        }
        self.push("max_rows", vec![1, cols], data, Op::MaxRows { x, argmax })
    }

    /// Sliding windows of `w` consecutive rows, each flattened:
    /// T-by-n -> (T-w+1)-by-(w*n).
    pub fn unfold_windows(&mut self, x: Var, w: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("unfold_windows", x)?;
        if w == 0 || w > rows {
            return Err(CkbError::shape(
                "unfold_windows",
                format!("window within {rows} rows"),
                format!("window {w}"),
            ));
        }
        let out_rows = rows - w + 1;
        let xd = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(out_rows * w * cols);
        for t in 0..out_rows {
            data.extend_from_slice(&xd[t * cols..(t + w) * cols]);
        }
        self.push(
            "unfold_windows",
            vec![out_rows, w * cols],
            data,
            Op::Unfold { x, w },
        )
    }

    /// Row gather from an embedding table: ids -> len(ids)-by-d.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2("embed", table)?;
        if ids.is_empty() {
            return Err(CkbError::Input("embed of empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(CkbError::Vocab {
                id: bad,
                vocab_size: vocab,
            });
        }
        let td = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        self.push(
            "embed",
            vec![ids.len(), d],
            data,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.nodes[x.0].data.len() {
            return Err(CkbError::shape(
                "reshape",
                format!("{} values", self.nodes[x.0].data.len()),
                shape_str(&shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        self.push("reshape", shape, data, Op::Reshape { x })
    }

    /// Rows from..to (exclusive) of a matrix.
    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_rows", x)?;
        if from >= to || to > rows {
            return Err(CkbError::shape(
                "slice_rows",
                format!("range within {rows} rows"),
                format!("{from}..{to}"),
            ));
        }
        let data = self.nodes[x.0].data[from * cols..to * cols].to_vec();
        self.push(
            "slice_rows",
            vec![to - from, cols],
            data,
            Op::SliceRows { x, from },
        )
    }

    /// Rescale any row whose Euclidean norm exceeds `max_norm` down onto
    /// the sphere of that radius; rows within the bound pass through.
    pub fn clip_rows_norm(&mut self, x: Var, max_norm: f32) -> Result<Var> {
        let (rows, cols) = self.dims2("clip_rows_norm", x)?;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0f32; rows * cols];
        let mut scales = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            let s = if norm > max_norm as f64 {
                max_norm as f64 / norm
            } else {
                1.0
            };
            for c in 0..cols {
                data[r * cols + c] = (row[c] as f64 * s) as f32;
            }
            scales.push(s);
        }
        self.push(
            "clip_rows_norm",
            vec![rows, cols],
            data,
            Op::ClipRowsNorm { x, scales },
        )
    }

    /// Mean over rows of (1 - cosine similarity). Scalar output in [0, 2].
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("cosine_distance", a)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CkbError::shape(
                "cosine_distance",
                shape_str(&self.nodes[a.0].shape),
                shape_str(&self.nodes[b.0].shape),
            ));
        }
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut saved = Vec::with_capacity(rows);
        let mut acc = 0.0f64;
        for r in 0..rows {
            let ra = &ad[r * cols..(r + 1) * cols];
            let rb = &bd[r * cols..(r + 1) * cols];
            let mut dot = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for (&x, &y) in ra.iter().zip(rb) {
                dot += x as f64 * y as f64;
                na += x as f64 * x as f64;
                nb += y as f64 * y as f64;
            }
            let na = na.sqrt();
            let nb = nb.sqrt();
            if na < COSINE_NORM_EPS || nb < COSINE_NORM_EPS {
                return Err(CkbError::DegenerateInput {
                    op: "cosine_distance",
                    row: r,
                });
            }
            acc += 1.0 - dot / (na * nb);
            saved.push(RowCosine {
                dot,
                norm_a: na,
                norm_b: nb,
            });
        }
        let mean = acc / rows as f64;
        let out = self.push(
            "cosine_distance",
            vec![1],
            vec![mean as f32],
            Op::CosineDistance { a, b, saved },
        )?;
        self.nodes[out.0].scalar_f64 = Some(mean);
        Ok(out)
    }

    /// Row-wise layer norm with affine parameters gamma, beta (length n).
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("layer_norm", x)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].data.len() != cols || self.nodes[v.0].shape.len() != 1 {
                return Err(CkbError::shape(
                    "layer_norm",
                    format!("{name} of length {cols}"),
                    shape_str(&self.nodes[v.0].shape),
                ));
            }
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut data = vec![0.0f32; rows * cols];
        let mut saved = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..cols {
                let xh = (row[c] as f64 - mean) * inv_std;
                data[r * cols + c] = (xh * gd[c] as f64 + bd[c] as f64) as f32;
            }
            saved.push(RowStats { mean, inv_std });
        }
        self.push(
            "layer_norm",
            vec![rows, cols],
            data,
            Op::LayerNormRows { x, gamma, beta, saved },
        )
    }

    /// Mean softmax cross-entropy over rows of logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2("cross_entropy", logits)?;
        if labels.len() != rows {
            return Err(CkbError::shape(
                "cross_entropy",
                format!("{rows} labels"),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(CkbError::Label {
                got: bad.to_string(),
                classes: cols,
            });
        }
        let xd = &self.nodes[logits.0].data;
        let mut probs = vec![0.0f32; rows * cols];
        let mut loss = 0.0f64;
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - mx) as f64).exp();
                probs[r * cols + j] = e as f32;
                sum += e;
            }
            for j in 0..cols {
                probs[r * cols + j] = (probs[r * cols + j] as f64 / sum) as f32;
            }
            loss -= ((row[labels[r]] - mx) as f64 - sum.ln()) / rows as f64;
        }
        let out = self.push(
            "cross_entropy",
            vec![1],
            vec![loss as f32],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )?;
        self.nodes[out.0].scalar_f64 = Some(loss);
        Ok(out)
    }

    /// Scaled dot-product attention: softmax(Q Kᵀ / sqrt(d)) V.
    /// Returns the output and the attention-weight node (rows sum to 1).
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let (_, dq) = self.dims2("attention", q)?;
        let (rk, dk) = self.dims2("attention", k)?;
        let (rv, _) = self.dims2("attention", v)?;
        if dq != dk {
            return Err(CkbError::shape(
                "attention",
                format!("key width {dq}"),
                format!("key width {dk}"),
            ));
        }
        if rk != rv {
            return Err(CkbError::shape(
                "attention",
                format!("{rk} value rows"),
                format!("{rv} value rows"),
            ));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (dq as f32).sqrt())?;
        let weights = self.softmax_rows(scaled)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each tape runs backward once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(CkbError::State("tape already consumed by backward".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(CkbError::shape(
                "backward",
                "scalar loss",
                shape_str(&self.nodes[loss.0].shape),
            ));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[f32]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, grad: &[f32]) {
        // The op is moved out to appease the borrow checker and restored after.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = matrix_dims(&self.nodes[a.0].shape).unwrap();
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let bd = &self.nodes[b.0].data;
                    let mut da = vec![0.0f32; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += grad[r * n + j] as f64 * bd[c * n + j] as f64;
                            }
                            da[r * k + c] = acc as f32;
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let ad = &self.nodes[a.0].data;
                    let mut db = vec![0.0f32; k * n];
                    for c in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0f64;
                            for r in 0..m {
                                acc += ad[r * k + c] as f64 * grad[r * n + j] as f64;
                            }
                            db[c * n + j] = acc as f32;
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, grad);
                let neg: Vec<f32> = grad.iter().map(|&g| -g).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f32> = grad
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f32> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f32> = grad.iter().map(|&g| g * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::AddRow { m, v } => {
                self.accumulate(*m, grad);
                if self.nodes[v.0].requires_grad {
                    let cols = self.nodes[v.0].data.len();
                    let rows = grad.len() / cols;
                    let mut dv = vec![0.0f32; cols];
                    for c in 0..cols {
                        let mut acc = 0.0f64;
                        for r in 0..rows {
                            acc += grad[r * cols + c] as f64;
                        }
                        dv[c] = acc as f32;
                    }
                    self.accumulate(*v, &dv);
                }
            }
            Op::AddN { xs } => {
                for &x in xs {
                    self.accumulate(x, grad);
                }
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f32> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&g, &s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Tanh { x } => {
                let dx: Vec<f32> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&g, &t)| g * (1.0 - t * t))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f32> = grad
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<f32> = grad
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&g, &v)| {
                        let v = v as f64;
                        (g as f64 * (phi(v) + v * phi_pdf(v))) as f32
                    })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxRows { x } => {
                if self.nodes[x.0].requires_grad {
                    let (rows, cols) = matrix_dims(&self.nodes[i].shape).unwrap();
                    let s = &self.nodes[i].data;
                    let mut dx = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        let mut dot = 0.0f64;
                        for c in 0..cols {
                            dot += grad[r * cols + c] as f64 * s[r * cols + c] as f64;
                        }
                        for c in 0..cols {
                            dx[r * cols + c] =
                                (s[r * cols + c] as f64 * (grad[r * cols + c] as f64 - dot)) as f32;
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Transpose { x } => {
                let (out_rows, out_cols) = matrix_dims(&self.nodes[i].shape).unwrap();
                let mut dx = vec![0.0f32; grad.len()];
                for r in 0..out_rows {
                    for c in 0..out_cols {
                        dx[c * out_rows + r] = grad[r * out_cols + c];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].data.len();
                    let chunk = grad[off..off + n].to_vec();
                    self.accumulate(x, &chunk);
                    off += n;
                }
            }
            Op::ConcatCols { xs } => {
                let (rows, total_cols) = matrix_dims(&self.nodes[i].shape).unwrap();
                let mut off = 0;
                for &x in xs {
                    let c = self.nodes[x.0].shape[1];
                    let mut dx = vec![0.0f32; rows * c];
                    for r in 0..rows {
                        dx[r * c..(r + 1) * c]
                            .copy_from_slice(&grad[r * total_cols + off..r * total_cols + off + c]);
                    }
                    self.accumulate(x, &dx);
                    off += c;
                }
            }
            Op::MeanRows { x } => {
                if self.nodes[x.0].requires_grad {
                    let (rows, cols) = matrix_dims(&self.nodes[x.0].shape).unwrap();
                    let mut dx = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = grad[c] / rows as f32;
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::MaxRows { x, argmax } => {
                if self.nodes[x.0].requires_grad {
                    let cols = self.nodes[i].shape[1];
                    let xrows = self.nodes[x.0].shape[0];
                    let mut dx = vec![0.0f32; xrows * cols];
                    for c in 0..cols {
                        dx[argmax[c] * cols + c] = grad[c];
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Unfold { x, w } => {
                if self.nodes[x.0].requires_grad {
                    let (rows, cols) = matrix_dims(&self.nodes[x.0].shape).unwrap();
                    let out_rows = rows - w + 1;
                    let mut dx = vec![0.0f32; rows * cols];
                    for t in 0..out_rows {
                        for u in 0..*w {
                            for c in 0..cols {
                                dx[(t + u) * cols + c] += grad[t * w * cols + u * cols + c];
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Embed { table, ids } => {
                if self.nodes[table.0].requires_grad {
                    let (vocab, d) = matrix_dims(&self.nodes[table.0].shape).unwrap();
                    let mut dt = vec![0.0f32; vocab * d];
                    for (t, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += grad[t * d + c];
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }
            Op::Reshape { x } => {
                self.accumulate(*x, grad);
            }
            Op::SliceRows { x, from } => {
                if self.nodes[x.0].requires_grad {
                    let (rows, cols) = matrix_dims(&self.nodes[x.0].shape).unwrap();
                    let mut dx = vec![0.0f32; rows * cols];
                    dx[from * cols..from * cols + grad.len()].copy_from_slice(grad);
                    self.accumulate(*x, &dx);
                }
            }
            Op::ClipRowsNorm { x, scales } => {
                if self.nodes[x.0].requires_grad {
                    let (rows, cols) = matrix_dims(&self.nodes[x.0].shape).unwrap();
                    let xd = &self.nodes[x.0].data;
                    let mut dx = vec![0.0f32; rows * cols];
                    for (r, &s) in scales.iter().enumerate() {
                        let row = &xd[r * cols..(r + 1) * cols];
                        let grow = &grad[r * cols..(r + 1) * cols];
                        if s >= 1.0 {
                            dx[r * cols..(r + 1) * cols].copy_from_slice(grow);
                        } else {
                            // y = c * x / |x|: dy/dx = s (I - xhat xhat^T).
                            let norm = row
                                .iter()
                                .map(|&v| v as f64 * v as f64)
                                .sum::<f64>()
                                .sqrt();
                            let mut dot = 0.0f64;
                            for c in 0..cols {
                                dot += grow[c] as f64 * row[c] as f64 / norm;
                            }
                            for c in 0..cols {
                                let xhat = row[c] as f64 / norm;
                                dx[r * cols + c] = (s * (grow[c] as f64 - dot * xhat)) as f32;
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::CosineDistance { a, b, saved } => {
                let g = grad[0] as f64;
                let (rows, cols) = matrix_dims(&self.nodes[a.0].shape).unwrap();
                let scale = g / rows as f64;
                if self.nodes[a.0].requires_grad {
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    let mut da = vec![0.0f32; rows * cols];
                    for (r, s) in saved.iter().enumerate() {
                        let cosine = s.dot / (s.norm_a * s.norm_b);
                        for c in 0..cols {
                            let x = ad[r * cols + c] as f64;
                            let y = bd[r * cols + c] as f64;
                            da[r * cols + c] = (scale
                                * (-(y / (s.norm_a * s.norm_b)) + cosine * x / (s.norm_a * s.norm_a)))
                                as f32;
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    let mut db = vec![0.0f32; rows * cols];
                    for (r, s) in saved.iter().enumerate() {
                        let cosine = s.dot / (s.norm_a * s.norm_b);
                        for c in 0..cols {
                            let x = ad[r * cols + c] as f64;
                            let y = bd[r * cols + c] as f64;
                            db[r * cols + c] = (scale
                                * (-(x / (s.norm_a * s.norm_b)) + cosine * y / (s.norm_b * s.norm_b)))
                                as f32;
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::LayerNormRows { x, gamma, beta, saved } => {
                let (rows, cols) = matrix_dims(&self.nodes[x.0].shape).unwrap();
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                let mut dx = vec![0.0f32; rows * cols];
                let mut dgamma = vec![0.0f32; cols];
                let mut dbeta = vec![0.0f32; cols];
                for (r, s) in saved.iter().enumerate() {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let grow = &grad[r * cols..(r + 1) * cols];
                    let xhat: Vec<f64> = row
                        .iter()
                        .map(|&v| (v as f64 - s.mean) * s.inv_std)
                        .collect();
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .zip(gd.iter())
                        .map(|(&g, &gm)| g as f64 * gm as f64)
                        .collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let n = cols as f64;
                    for c in 0..cols {
                        dgamma[c] += (grow[c] as f64 * xhat[c]) as f32;
                        dbeta[c] += grow[c];
                        dx[r * cols + c] = (s.inv_std / n
                            * (n * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat))
                            as f32;
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.nodes[logits.0].requires_grad {
                    let (rows, cols) = matrix_dims(&self.nodes[logits.0].shape).unwrap();
                    let g = grad[0];
                    let mut dl = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let target = if c == labels[r] { 1.0 } else { 0.0 };
                            dl[r * cols + c] = g * (probs[r * cols + c] - target) / rows as f32;
                        }
                    }
                    self.accumulate(*logits, &dl);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Watch an ordered parameter group; pair with [`harvest_all`].
pub fn watch_all(tape: &mut Tape, params: &[&Tensor]) -> Vec<Var> {
    params.iter().map(|t| tape.param(t)).collect()
}

/// Pull gradients for a watched group back into the owning tensors.
pub fn harvest_all(tape: &Tape, vars: &[Var], params: &mut [&mut Tensor]) {
    debug_assert_eq!(vars.len(), params.len());
    for (v, p) in vars.iter().zip(params.iter_mut()) {
        if let Some(g) = tape.grad_of(*v) {
            p.accumulate_grad(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_with_floor, F32_NOISE_FLOOR};
    use crate::rng::SeededRng;

    fn t_mat(r: usize, c: usize, data: Vec<f32>) -> Tensor {
        Tensor::matrix(r, c, data).unwrap()
    }

    fn p_mat(r: usize, c: usize, data: Vec<f32>) -> Tensor {
        let mut t = t_mat(r, c, data);
        t.requires_grad = true;
        t
    }

    /// Elementwise triple-loop matrix product in f64.
    fn matmul_oracle(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(&t_mat(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(&t_mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = tape.constant(&t_mat(1, 2, vec![1.0, 2.0]));
        let b = tape.constant(&t_mat(2, 1, vec![3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SeededRng::new(7);
        let a = rng.uniform_vec(12, 2.0);
        let b = rng.uniform_vec(8, 2.0);
        let mut tape = Tape::new();
        let av = tape.constant(&t_mat(3, 4, a.clone()));
        let bv = tape.constant(&t_mat(4, 2, b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        let oracle = matmul_oracle(&a, &b, 3, 4, 2);
        for (got, want) in tape.value(c).iter().zip(&oracle) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_dimension_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&t_mat(2, 3, vec![0.0; 6]));
        let b = tape.constant(&t_mat(2, 2, vec![0.0; 4]));
        match tape.matmul(a, b) {
            Err(CkbError::Shape { expected, got, .. }) => {
                assert!(expected.contains("[2x3]"));
                assert!(got.contains("[2x2]"));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(&t_mat(1, 2, vec![0.0, 0.0]));
        let s = tape.sigmoid(x).unwrap();
        let t = tape.tanh(x).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
        assert_eq!(tape.value(t), &[0.0, 0.0]);
    }

    #[test]
    fn gelu_matches_independent_erf_oracle() {
        // Oracle: x * Phi(x) through statrs' erf, independent of the
        // approximation used by the op.
        let oracle = |x: f64| x * 0.5 * (1.0 + statrs::function::erf::erf(x / 2.0f64.sqrt()));
        let mut tape = Tape::new();
        let xs = vec![-3.0f32, -1.0, -0.25, 0.0, 0.5, 1.0, 2.5];
        let x = tape.constant(&t_mat(1, xs.len(), xs.clone()));
        let g = tape.gelu(x).unwrap();
        for (i, &xi) in xs.iter().enumerate() {
            let want = oracle(xi as f64);
            let got = tape.value(g)[i] as f64;
            assert!((got - want).abs() < 1e-6, "gelu({xi}) = {got}, want {want}");
        }
    }

    #[test]
    fn elementwise_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(&t_mat(1, 2, vec![0.0; 2]));
        let b = tape.constant(&t_mat(2, 1, vec![0.0; 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.sub(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn softmax_uniform_on_constant_row() {
        let mut tape = Tape::new();
        let x = tape.constant(&t_mat(1, 3, vec![4.2, 4.2, 4.2]));
        let s = tape.softmax_rows(x).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_ln3_row() {
        let mut tape = Tape::new();
        let x = tape.constant(&t_mat(1, 2, vec![0.0, 3.0f32.ln()]));
        let s = tape.softmax_rows(x).unwrap();
        assert!((tape.value(s)[0] - 0.25).abs() < 1e-6);
        assert!((tape.value(s)[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(&t_mat(1, 2, vec![1000.0, 1000.5]));
        let s = tape.softmax_rows(x).unwrap();
        // Oracle on shifted inputs in f64.
        let (a, b) = (0.0f64, 0.5f64);
        let z = a.exp() + b.exp();
        assert!(tape.value(s).iter().all(|v| v.is_finite()));
        assert!((tape.value(s)[0] as f64 - a.exp() / z).abs() < 1e-6);
        assert!((tape.value(s)[1] as f64 - b.exp() / z).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = SeededRng::new(11);
        for seed in 0..20u64 {
            let mut r = rng.split(&format!("case/{seed}"));
            let data = r.uniform_vec(12, 3.0);
            let shifted: Vec<f32> = data.iter().map(|&v| v + 7.5).collect();
            let mut tape = Tape::new();
            let x = tape.constant(&t_mat(3, 4, data));
            let y = tape.constant(&t_mat(3, 4, shifted));
            let sx = tape.softmax_rows(x).unwrap();
            let sy = tape.softmax_rows(y).unwrap();
            for row in 0..3 {
                let sum: f64 = tape.value(sx)[row * 4..(row + 1) * 4]
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
            for (a, b) in tape.value(sx).iter().zip(tape.value(sy)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut rng = SeededRng::new(3);
        let mut tape = Tape::new();
        let q = tape.constant(&t_mat(3, 2, rng.uniform_vec(6, 5.0)));
        let k = tape.constant(&t_mat(1, 2, rng.uniform_vec(2, 5.0)));
        let v_row = rng.uniform_vec(2, 5.0);
        let v = tape.constant(&t_mat(1, 2, v_row.clone()));
        let (out, _) = tape.attention(q, k, v).unwrap();
        for row in 0..3 {
            assert_eq!(&tape.value(out)[row * 2..(row + 1) * 2], &v_row[..]);
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut rng = SeededRng::new(4);
        let mut tape = Tape::new();
        let q = tape.constant(&t_mat(1, 2, rng.uniform_vec(2, 1.0)));
        let key_row = rng.uniform_vec(2, 1.0);
        let mut keys = key_row.clone();
        keys.extend_from_slice(&key_row);
        keys.extend_from_slice(&key_row);
        let k = tape.constant(&t_mat(3, 2, keys));
        let vals = rng.uniform_vec(6, 1.0);
        let v = tape.constant(&t_mat(3, 2, vals.clone()));
        let (out, _) = tape.attention(q, k, v).unwrap();
        for c in 0..2 {
            let mean = (vals[c] as f64 + vals[2 + c] as f64 + vals[4 + c] as f64) / 3.0;
            assert!((tape.value(out)[c] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_matches_step_by_step_oracle() {
        let mut rng = SeededRng::new(5);
        let qd = rng.uniform_vec(4, 1.0);
        let kd = rng.uniform_vec(6, 1.0);
        let vd = rng.uniform_vec(6, 1.0);
        let mut tape = Tape::new();
        let q = tape.constant(&t_mat(2, 2, qd.clone()));
        let k = tape.constant(&t_mat(3, 2, kd.clone()));
        let v = tape.constant(&t_mat(3, 2, vd.clone()));
        let (out, _) = tape.attention(q, k, v).unwrap();

        // Oracle: scores = Q K^T / sqrt(d); softmax; weighted values.
        let mut expect = vec![0.0f64; 4];
        for i in 0..2 {
            let mut scores = [0.0f64; 3];
            for r in 0..3 {
                for c in 0..2 {
                    scores[r] += qd[i * 2 + c] as f64 * kd[r * 2 + c] as f64;
                }
                scores[r] /= 2.0f64.sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..2 {
                for r in 0..3 {
                    expect[i * 2 + c] += exps[r] / z * vd[r * 2 + c] as f64;
                }
            }
        }
        for (got, want) in tape.value(out).iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_distance_limits() {
        let mut tape = Tape::new();
        let a = tape.constant(&t_mat(1, 2, vec![1.0, 0.0]));
        let b = tape.constant(&t_mat(1, 2, vec![0.0, 1.0]));
        let c = tape.constant(&t_mat(1, 2, vec![-1.0, 0.0]));
        let orth = tape.cosine_distance(a, b).unwrap();
        let anti = tape.cosine_distance(a, c).unwrap();
        let same = tape.cosine_distance(a, a).unwrap();
        assert!((tape.value(orth)[0] - 1.0).abs() < 1e-7);
        assert!((tape.value(anti)[0] - 2.0).abs() < 1e-7);
        assert!(tape.value(same)[0].abs() < 1e-6);
    }

    #[test]
    fn cosine_distance_is_symmetric_and_bounded() {
        let mut rng = SeededRng::new(6);
        for seed in 0..20u64 {
            let mut r = rng.split(&format!("case/{seed}"));
            let a = r.uniform_vec(8, 2.0);
            let b = r.uniform_vec(8, 2.0);
            let mut tape = Tape::new();
            let av = tape.constant(&t_mat(2, 4, a.clone()));
            let bv = tape.constant(&t_mat(2, 4, b.clone()));
            let ab = tape.cosine_distance(av, bv).unwrap();
            let ba = tape.cosine_distance(bv, av).unwrap();
            let d1 = tape.value(ab)[0];
            let d2 = tape.value(ba)[0];
            assert!((d1 - d2).abs() < 1e-7);
            assert!((0.0..=2.0).contains(&d1));
        }
    }

    #[test]
    fn cosine_distance_flags_degenerate_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(&t_mat(2, 2, vec![1.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(&t_mat(2, 2, vec![1.0, 0.0, 1.0, 1.0]));
        match tape.cosine_distance(a, b) {
            Err(CkbError::DegenerateInput { row: 1, .. }) => {}
            other => panic!("expected degenerate row 1, got {other:?}"),
        }
    }

    fn sum_all(tape: &mut Tape, x: Var) -> Var {
        // Explicit sum: column-mean then row-mean, scaled back up.
        let shape = tape.shape_of(x).to_vec();
        let n = (shape[0] * shape[1]) as f32;
        let col = tape.mean_rows(x).unwrap();
        let colt = tape.transpose(col).unwrap();
        let m = tape.mean_rows(colt).unwrap();
        let s = tape.scale(m, n).unwrap();
        tape.reshape(s, vec![1]).unwrap()
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&p_mat(2, 3, vec![0.3, -1.0, 2.0, 0.1, 0.0, 5.0]));
        let loss = sum_all(&mut tape, x);
        tape.backward(loss).unwrap();
        for &g in tape.grad_of(x).unwrap() {
            assert!((g - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(&p_mat(1, 1, vec![3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.reshape(sq, vec![1]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(&p_mat(1, 2, vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(CkbError::Shape { .. })
        ));
    }

    #[test]
    fn tape_reuse_is_a_state_error() {
        let mut tape = Tape::new();
        let x = tape.param(&p_mat(1, 1, vec![2.0]));
        let loss = tape.reshape(x, vec![1]).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(CkbError::State(_))));
    }

    #[test]
    fn gradients_accumulate_across_fanout() {
        // loss = sum(x) + sum(x): each element receives gradient 2.
        let mut tape = Tape::new();
        let x = tape.param(&p_mat(1, 3, vec![1.0, 2.0, 3.0]));
        let a = sum_all(&mut tape, x);
        let b = sum_all(&mut tape, x);
        let loss = tape.add(a, b).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad_of(x).unwrap() {
            assert!((g - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn composed_graph_matches_finite_differences() {
        // matmul -> tanh -> cosine_distance against a fixed target.
        let mut rng = SeededRng::new(9);
        let target = t_mat(2, 3, rng.uniform_vec(6, 1.0));
        let a = {
            let mut t = t_mat(2, 4, rng.uniform_vec(8, 1.0));
            t.requires_grad = true;
            t
        };
        let w = {
            let mut t = t_mat(4, 3, rng.uniform_vec(12, 1.0));
            t.requires_grad = true;
            t
        };
        let build = move |tape: &mut Tape, vars: &[Var]| {
            let prod = tape.matmul(vars[0], vars[1])?;
            let act = tape.tanh(prod)?;
            let tv = tape.constant(&target);
            tape.cosine_distance(act, tv)
        };
        let mut params = [a, w];
        let err = grad_check_with_floor(&build, &mut params, 1e-3, 24, F32_NOISE_FLOOR, &mut rng).unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn every_op_passes_finite_difference_checks() {
        // One composed graph touching every differentiable op, 20 seeds.
        for seed in 0..20u64 {
            let mut rng = SeededRng::new(100 + seed);
            let table = {
                let mut t = t_mat(6, 4, rng.uniform_vec(24, 1.0));
                t.requires_grad = true;
                t
            };
            let w = {
                let mut t = t_mat(2, 4, rng.uniform_vec(8, 1.0));
                t.requires_grad = true;
                t
            };
            let gamma = {
                let mut t = Tensor::vector(rng.uniform_vec(4, 1.0));
                t.requires_grad = true;
                t
            };
            let beta = {
                let mut t = Tensor::vector(rng.uniform_vec(4, 1.0));
                t.requires_grad = true;
                t
            };
            let bias = {
                let mut t = Tensor::vector(rng.uniform_vec(8, 1.0));
                t.requires_grad = true;
                t
            };
            let target = t_mat(1, 8, rng.uniform_vec(8, 1.0));
            let ids = vec![0usize, 2, 4, 5, 1];
            let build = move |tape: &mut Tape, vars: &[Var]| {
                let emb = tape.embed(vars[0], &ids)?;            // 5 x 4
                let ln = tape.layer_norm_rows(emb, vars[2], vars[3])?;
                let act = tape.gelu(ln)?;
                let sig = tape.sigmoid(act)?;
                let rl = tape.relu(sig)?;
                let th = tape.tanh(rl)?;
                let (att, _) = tape.attention(th, vars[1], vars[1])?; // 5 x 4
                let win = tape.unfold_windows(att, 2)?;           // 4 x 8
                let biased = tape.add_row(win, vars[4])?;
                let soft = tape.softmax_rows(biased)?;
                let smx = tape.mean_rows(soft)?;                  // 1 x 8
                let mn = tape.mean_rows(win)?;                    // 1 x 8
                let both = tape.add(smx, mn)?;
                let scaled = tape.scale(both, 1.5)?;
                let halves_a = tape.slice_rows(scaled, 0, 1)?;
                let joined = tape.concat_cols(&[halves_a])?;
                let stacked = tape.concat_rows(&[joined])?;
                let tv = tape.constant(&target);
                let sub = tape.sub(stacked, tv)?;
                let addn = tape.add_n(&[sub, sub])?;
                let tv2 = tape.constant(&target);
                tape.cosine_distance(addn, tv2)
            };
            let mut params = [table, w, gamma, beta, bias];
            let err =
                grad_check_with_floor(&build, &mut params, 1e-3, 10, F32_NOISE_FLOOR, &mut rng)
                    .unwrap();
            assert!(err < 1e-3, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn max_rows_gradient_with_separated_maxima() {
        // The max is non-differentiable at ties; separate the winning row
        // by a margin far wider than the probe step.
        for seed in 0..20u64 {
            let mut rng = SeededRng::new(300 + seed);
            let mut data = rng.uniform_vec(12, 0.3);
            for c in 0..4 {
                let winner = (seed as usize + c) % 3;
                data[winner * 4 + c] += 2.0;
            }
            let mut x = t_mat(3, 4, data);
            x.requires_grad = true;
            let target = t_mat(1, 4, rng.uniform_vec(4, 1.0));
            let build = move |tape: &mut Tape, vars: &[Var]| {
                let mx = tape.max_rows(vars[0])?;
                let tv = tape.constant(&target);
                tape.cosine_distance(mx, tv)
            };
            let mut params = [x];
            let err =
                grad_check_with_floor(&build, &mut params, 1e-3, 12, F32_NOISE_FLOOR, &mut rng)
                    .unwrap();
            assert!(err < 1e-3, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn deterministic_replay_is_bit_identical() {
        let run = || -> Vec<f32> {
            let mut rng = SeededRng::new(77);
            let a = t_mat(3, 3, rng.uniform_vec(9, 1.0));
            let b = t_mat(3, 3, rng.uniform_vec(9, 1.0));
            let mut tape = Tape::new();
            let av = tape.constant(&a);
            let bv = tape.constant(&b);
            let c = tape.matmul(av, bv).unwrap();
            let s = tape.sigmoid(c).unwrap();
            let (out, _) = tape.attention(s, av, bv).unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(&t_mat(1, 1, vec![f32::MAX]));
        match tape.scale(x, 2.0) {
            Err(CkbError::Numeric { op, .. }) => assert_eq!(op, "scale"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
