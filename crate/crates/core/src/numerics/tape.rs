//! Wengert-list reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node holding its forward value. Node indices
//! are assigned in creation order, so walking the list backwards visits
//! each node after all of its consumers.

use std::rc::Rc;

use super::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `a [m,k] · bᵀ` with `b [n,k]`.
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Exp { a: Var },
    Log { a: Var },
    Sigmoid { a: Var },
    Swish { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    MaskedSoftmax { a: Var },
    Glu { a: Var },
    DepthwiseConv { x: Var, w: Var, b: Var, k: usize },
    Im2Col { x: Var, k: usize, stride: usize, pad: usize },
    Embedding { table: Var, ids: Rc<[usize]> },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    Gather { x: Var, idx: Rc<[usize]> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Sum { a: Var },
    MeanRows { a: Var },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    StraightThrough { soft: Var },
    ScalarJacobian { input: Var, jac: Vec<f64> },
    RelPosBias { table: Var, head: usize, width: usize, max_dist: usize },
    Reshape { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` means the root does not depend on `v` through any
    /// differentiable path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros for unreached nodes.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let c = shape[shape.len() - 1];
            (shape[..shape.len() - 1].iter().product(), c)
        }
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

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        rows_cols(self.shape(v)).0
    }

    pub fn cols(&self, v: Var) -> usize {
        rows_cols(self.shape(v)).1
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a node's value out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Records a tensor as a leaf; it receives a gradient iff the tensor
    /// is flagged `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, NumericsError> {
        let t = Tensor::new(shape, data)?.with_requires_grad(true);
        Ok(self.leaf(&t))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, NumericsError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        if k != k2 || self.shape(b).len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `a · bᵀ` for `a [m,k]`, `b [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = rows_cols(self.shape(a));
        let (n, k2) = rows_cols(self.shape(b));
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_t",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMulT { a, b, m, k, n }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add { a, b }, ng))
    }

    /// Adds a `[cols]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (_, c) = rows_cols(self.shape(a));
        if self.value(row).len() != c {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c.max(1))
            .flat_map(|r| r.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::AddRow { a, row }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(&[a]);
        self.push(out, self.shape(a).to_vec(), Op::Scale { a, s }, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let ng = self.ng(&[a]);
        self.push(out, self.shape(a).to_vec(), Op::Exp { a }, ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        let ng = self.ng(&[a]);
        self.push(out, self.shape(a).to_vec(), Op::Log { a }, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.ng(&[a]);
        self.push(out, self.shape(a).to_vec(), Op::Sigmoid { a }, ng)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let ng = self.ng(&[a]);
        self.push(out, self.shape(a).to_vec(), Op::Swish { a }, ng)
    }

    /// Row-wise layer normalization followed by per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(x));
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            out,
            self.shape(x).to_vec(),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, c) = rows_cols(self.shape(a));
        let out = row_softmax(self.value(a), c, None);
        let ng = self.ng(&[a]);
        self.push(out, self.shape(a).to_vec(), Op::Softmax { a }, ng)
    }

    /// Softmax where entries with `allowed[i] == false` get probability
    /// exactly zero. Each row must allow at least one entry.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var, NumericsError> {
        if allowed.len() != self.value(a).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape(a).to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let (_, c) = rows_cols(self.shape(a));
        let out = row_softmax(self.value(a), c, Some(allowed));
        let ng = self.ng(&[a]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::MaskedSoftmax { a }, ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, self.shape(a).to_vec(), Op::LogSoftmax { a }, ng)
    }

    /// Gated linear unit over the last axis: first half times sigmoid of
    /// the second half.
    pub fn glu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(a));
        if c % 2 != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "glu",
                lhs: self.shape(a).to_vec(),
                rhs: vec![2],
            });
        }
        let h = c / 2;
        let av = self.value(a);
        let mut out = vec![0.0; r * h];
        for i in 0..r {
            for j in 0..h {
                out[i * h + j] = av[i * c + j] * sigmoid(av[i * c + h + j]);
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, vec![r, h], Op::Glu { a }, ng))
    }

    /// Per-channel 1-D convolution over rows with zero "same" padding.
    /// `x [T,C]`, `w [K,C]`, `b [C]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (t, c) = rows_cols(self.shape(x));
        let (k, c2) = rows_cols(self.shape(w));
        if c != c2 || self.value(b).len() != c {
            return Err(NumericsError::ShapeMismatch {
                op: "depthwise_conv",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let pl = (k - 1) / 2;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            out[ti * c..(ti + 1) * c].copy_from_slice(bv);
            for kk in 0..k {
                let src = ti + kk;
                if src < pl || src - pl >= t {
                    continue;
                }
                let s = src - pl;
                for ci in 0..c {
                    out[ti * c + ci] += wv[kk * c + ci] * xv[s * c + ci];
                }
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(out, vec![t, c], Op::DepthwiseConv { x, w, b, k }, ng))
    }

    /// Unfolds `x [T,C]` into `[T_out, K·C]` windows for a strided
    /// convolution; `T_out = (T + 2·pad − K)/stride + 1`.
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var, NumericsError> {
        let (t, c) = rows_cols(self.shape(x));
        if t + 2 * pad < k || stride == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "im2col",
                lhs: self.shape(x).to_vec(),
                rhs: vec![k, stride, pad],
            });
        }
        let t_out = (t + 2 * pad - k) / stride + 1;
        let xv = self.value(x);
        let mut out = vec![0.0; t_out * k * c];
        for o in 0..t_out {
            for kk in 0..k {
                let src = o * stride + kk;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = src - pad;
                let dst = o * k * c + kk * c;
                out[dst..dst + c].copy_from_slice(&xv[s * c..(s + 1) * c]);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, vec![t_out, k * c], Op::Im2Col { x, k, stride, pad }, ng))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (v, d) = rows_cols(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.into(),
            },
            ng,
        ))
    }

    /// Column-wise maximum over rows, `[T,D] → [1,D]`. Ties route the
    /// gradient to the earliest row.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (t, d) = rows_cols(self.shape(x));
        if t == 0 {
            return Err(NumericsError::Empty("max_pool_rows"));
        }
        let xv = self.value(x);
        let mut out = xv[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for ti in 1..t {
            for j in 0..d {
                let v = xv[ti * d + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = ti;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, vec![1, d], Op::MaxPoolRows { x, argmax }, ng))
    }

    /// Picks flat elements of `x` into a new tensor of `shape`.
    pub fn gather(&mut self, x: Var, idx: &[usize], shape: Vec<usize>) -> Result<Var, NumericsError> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: n });
        }
        if shape.iter().product::<usize>() != idx.len() {
            return Err(NumericsError::DataLength {
                shape,
                len: idx.len(),
            });
        }
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(out, shape, Op::Gather { x, idx: idx.into() }, ng))
    }

    /// Selects whole rows of a rank-2 node.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (_, c) = rows_cols(self.shape(x));
        let idx: Vec<usize> = rows.iter().flat_map(|&r| (r * c)..(r * c + c)).collect();
        self.gather(x, &idx, vec![rows.len(), c])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat_rows"))?;
        let c = self.cols(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(
            out,
            vec![rows, c],
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(x));
        if start + len > r {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: r,
            });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(out, vec![len, c], Op::SliceRows { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat_cols"))?;
        let r = self.rows(first);
        for &p in parts {
            if self.rows(p) != r {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            out,
            vec![r, total],
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(x));
        if start + len > c {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: c,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, vec![r, len], Op::SliceCols { x, start }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(vec![s], vec![1], Op::Sum { a }, ng)
    }

    /// Mean over rows, `[T,D] → [1,D]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = rows_cols(self.shape(a));
        if r == 0 {
            return Err(NumericsError::Empty("mean_rows"));
        }
        let av = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, vec![1, c], Op::MeanRows { a }, ng))
    }

    /// `x / sqrt(|x|² + eps)` per row.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, self.shape(a).to_vec(), Op::L2NormalizeRows { a, norms }, ng)
    }

    /// Row-wise one-hot of the argmax (ties → lowest column) in the
    /// forward pass; identity gradient to `soft` in the backward pass.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let (r, c) = rows_cols(self.shape(soft));
        let sv = self.value(soft);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let j = argmax(&sv[i * c..(i + 1) * c]);
            out[i * c + j] = 1.0;
        }
        let ng = self.ng(&[soft]);
        self.push(out, self.shape(soft).to_vec(), Op::StraightThrough { soft }, ng)
    }

    /// A scalar whose value and gradient with respect to `input` were
    /// computed outside the tape.
    pub fn scalar_jacobian(&mut self, input: Var, value: f64, jac: Vec<f64>) -> Result<Var, NumericsError> {
        if jac.len() != self.value(input).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "scalar_jacobian",
                lhs: self.shape(input).to_vec(),
                rhs: vec![jac.len()],
            });
        }
        let ng = self.ng(&[input]);
        Ok(self.push(vec![value], vec![1], Op::ScalarJacobian { input, jac }, ng))
    }

    /// Expands one head's row of a `[H, 2R+1]` relative-position table
    /// into a `[T,T]` bias with offsets clipped to `[-R, R]`.
    pub fn rel_pos_bias(&mut self, table: Var, head: usize, t: usize) -> Result<Var, NumericsError> {
        let (h, width) = rows_cols(self.shape(table));
        if head >= h || width % 2 == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "rel_pos_bias",
                lhs: self.shape(table).to_vec(),
                rhs: vec![head],
            });
        }
        let max_dist = width / 2;
        let tv = &self.value(table)[head * width..(head + 1) * width];
        let mut out = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                out[i * t + j] = tv[rel_index(i, j, max_dist)];
            }
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            out,
            vec![t, t],
            Op::RelPosBias {
                table,
                head,
                width,
                max_dist,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(out, shape, Op::Reshape { a }, ng))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let rs = &self.nodes[root.0];
        if rs.value.len() != 1 {
            return Err(NumericsError::NonScalarRoot(rs.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    let bv = val(b);
                    let ga = accumulate(grads, a, m * k);
                    for i in 0..m {
                        let drow = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if needs(b) {
                    let av = val(a);
                    let gb = accumulate(grads, b, k * n);
                    for i in 0..m {
                        let drow = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let grow = &mut gb[p * n..(p + 1) * n];
                            for (g, d) in grow.iter_mut().zip(drow) {
                                *g += x * d;
                            }
                        }
                    }
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                if needs(a) {
                    let bv = val(b);
                    let ga = accumulate(grads, a, m * k);
                    for i in 0..m {
                        let grow = &mut ga[i * k..(i + 1) * k];
                        for j in 0..n {
                            let d = dy[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for (g, y) in grow.iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *g += d * y;
                            }
                        }
                    }
                }
                if needs(b) {
                    let av = val(a);
                    let gb = accumulate(grads, b, n * k);
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let d = dy[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for (g, x) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *g += d * x;
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if needs(v) {
                        let g = accumulate(grads, v, dy.len());
                        for (g, d) in g.iter_mut().zip(dy) {
                            *g += d;
                        }
                    }
                }
            }
            &Op::AddRow { a, row } => {
                if needs(a) {
                    let g = accumulate(grads, a, dy.len());
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if needs(row) {
                    let c = len(row);
                    let g = accumulate(grads, row, c);
                    for chunk in dy.chunks(c.max(1)) {
                        for (g, d) in g.iter_mut().zip(chunk) {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Sub { a, b } => {
                if needs(a) {
                    let g = accumulate(grads, a, dy.len());
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if needs(b) {
                    let g = accumulate(grads, b, dy.len());
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g -= d;
                    }
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    let bv = val(b);
                    let g = accumulate(grads, a, dy.len());
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                }
                if needs(b) {
                    let av = val(a);
                    let g = accumulate(grads, b, dy.len());
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            &Op::Scale { a, s } => {
                let g = accumulate(grads, a, dy.len());
                for (g, d) in g.iter_mut().zip(dy) {
                    *g += d * s;
                }
            }
            &Op::Exp { a } => {
                let y = &node.value;
                let g = accumulate(grads, a, dy.len());
                for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * y;
                }
            }
            &Op::Log { a } => {
                let x = val(a);
                let g = accumulate(grads, a, dy.len());
                for ((g, d), x) in g.iter_mut().zip(dy).zip(x) {
                    *g += d / x;
                }
            }
            &Op::Sigmoid { a } => {
                let y = &node.value;
                let g = accumulate(grads, a, dy.len());
                for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * y * (1.0 - y);
                }
            }
            &Op::Swish { a } => {
                let x = val(a);
                let g = accumulate(grads, a, dy.len());
                for ((g, d), &x) in g.iter_mut().zip(dy).zip(x) {
                    let s = sigmoid(x);
                    *g += d * (s + x * s * (1.0 - s));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = rows_cols(&node.shape);
                let gv = val(*gain);
                if needs(*gain) {
                    let gg = accumulate(grads, *gain, c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += dy[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = accumulate(grads, *bias, c);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += dy[i * c + j];
                        }
                    }
                }
                if needs(*x) {
                    let gx = accumulate(grads, *x, r * c);
                    let cf = c as f64;
                    for i in 0..r {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let dh = dy[i * c + j] * gv[j];
                            sum_d += dh;
                            sum_dx += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = dy[i * c + j] * gv[j];
                            gx[i * c + j] += inv_std[i] / cf * (cf * dh - sum_d - xhat[i * c + j] * sum_dx);
                        }
                    }
                }
            }
            &Op::Softmax { a } | &Op::MaskedSoftmax { a } => {
                let (r, c) = rows_cols(&node.shape);
                let y = &node.value;
                let g = accumulate(grads, a, r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for j in 0..c {
                        g[i * c + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                let (r, c) = rows_cols(&node.shape);
                let y = &node.value;
                let g = accumulate(grads, a, r * c);
                for i in 0..r {
                    let dr = &dy[i * c..(i + 1) * c];
                    let total: f64 = dr.iter().sum();
                    for j in 0..c {
                        g[i * c + j] += dr[j] - y[i * c + j].exp() * total;
                    }
                }
            }
            &Op::Glu { a } => {
                let (r, h) = rows_cols(&node.shape);
                let c = 2 * h;
                let av = val(a);
                let g = accumulate(grads, a, r * c);
                for i in 0..r {
                    for j in 0..h {
                        let lhs = av[i * c + j];
                        let s = sigmoid(av[i * c + h + j]);
                        let d = dy[i * h + j];
                        g[i * c + j] += d * s;
                        g[i * c + h + j] += d * lhs * s * (1.0 - s);
                    }
                }
            }
            &Op::DepthwiseConv { x, w, b, k } => {
                let (t, c) = rows_cols(&node.shape);
                let pl = (k - 1) / 2;
                let xv = val(x);
                let wv = val(w);
                if needs(b) {
                    let gb = accumulate(grads, b, c);
                    for ti in 0..t {
                        for ci in 0..c {
                            gb[ci] += dy[ti * c + ci];
                        }
                    }
                }
                if needs(w) {
                    let gw = accumulate(grads, w, k * c);
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti + kk;
                            if src < pl || src - pl >= t {
                                continue;
                            }
                            let s = src - pl;
                            for ci in 0..c {
                                gw[kk * c + ci] += dy[ti * c + ci] * xv[s * c + ci];
                            }
                        }
                    }
                }
                if needs(x) {
                    let gx = accumulate(grads, x, t * c);
                    for ti in 0..t {
                        for kk in 0..k {
                            let src = ti + kk;
                            if src < pl || src - pl >= t {
                                continue;
                            }
                            let s = src - pl;
                            for ci in 0..c {
                                gx[s * c + ci] += dy[ti * c + ci] * wv[kk * c + ci];
                            }
                        }
                    }
                }
            }
            &Op::Im2Col { x, k, stride, pad } => {
                let (t, c) = rows_cols(self.shape(x));
                let t_out = node.shape[0];
                let gx = accumulate(grads, x, t * c);
                for o in 0..t_out {
                    for kk in 0..k {
                        let src = o * stride + kk;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let s = src - pad;
                        let from = o * k * c + kk * c;
                        for ci in 0..c {
                            gx[s * c + ci] += dy[from + ci];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = rows_cols(self.shape(*table));
                let gt = accumulate(grads, *table, v * d);
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += dy[row * d + j];
                    }
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                let (t, d) = rows_cols(self.shape(*x));
                let gx = accumulate(grads, *x, t * d);
                for (j, &ti) in argmax.iter().enumerate() {
                    gx[ti * d + j] += dy[j];
                }
            }
            Op::Gather { x, idx } => {
                let n = len(*x);
                let gx = accumulate(grads, *x, n);
                for (o, &i) in idx.iter().enumerate() {
                    gx[i] += dy[o];
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = len(p);
                    if needs(p) {
                        let g = accumulate(grads, p, n);
                        for (g, d) in g.iter_mut().zip(&dy[off..off + n]) {
                            *g += d;
                        }
                    }
                    off += n;
                }
            }
            &Op::SliceRows { x, start } => {
                let (_, c) = rows_cols(&node.shape);
                let n = len(x);
                let g = accumulate(grads, x, n);
                for (g, d) in g[start * c..start * c + dy.len()].iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total) = rows_cols(&node.shape);
                let mut col = 0;
                for &p in parts {
                    let c = self.cols(p);
                    if needs(p) {
                        let g = accumulate(grads, p, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += dy[i * total + col + j];
                            }
                        }
                    }
                    col += c;
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, l) = rows_cols(&node.shape);
                let c = self.cols(x);
                let g = accumulate(grads, x, r * c);
                for i in 0..r {
                    for j in 0..l {
                        g[i * c + start + j] += dy[i * l + j];
                    }
                }
            }
            &Op::Sum { a } => {
                let g = accumulate(grads, a, len(a));
                for g in g.iter_mut() {
                    *g += dy[0];
                }
            }
            &Op::MeanRows { a } => {
                let (r, c) = rows_cols(self.shape(a));
                let g = accumulate(grads, a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += dy[j] / r as f64;
                    }
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let (r, c) = rows_cols(&node.shape);
                let y = &node.value;
                let g = accumulate(grads, *a, r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for j in 0..c {
                        g[i * c + j] += (dr[j] - yr[j] * dot) / norms[i];
                    }
                }
            }
            &Op::StraightThrough { soft } | &Op::Reshape { a: soft } => {
                let g = accumulate(grads, soft, dy.len());
                for (g, d) in g.iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::ScalarJacobian { input, jac } => {
                let g = accumulate(grads, *input, jac.len());
                for (g, j) in g.iter_mut().zip(jac) {
                    *g += dy[0] * j;
                }
            }
            &Op::RelPosBias {
                table,
                head,
                width,
                max_dist,
            } => {
                let t = node.shape[0];
                let n = len(table);
                let g = accumulate(grads, table, n);
                for i in 0..t {
                    for j in 0..t {
                        g[head * width + rel_index(i, j, max_dist)] += dy[i * t + j];
                    }
                }
            }
        }
    }
}

fn rel_index(i: usize, j: usize, max_dist: usize) -> usize {
    let d = j as isize - i as isize;
    let m = max_dist as isize;
    (d.clamp(-m, m) + m) as usize
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Numerically stable `log Σ exp(x)`; `-∞` for an empty or all `-∞` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn row_softmax(x: &[f64], c: usize, allowed: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (i, row) in x.chunks(c.max(1)).enumerate() {
        let ok = |j: usize| allowed.map_or(true, |a| a[i * c + j]);
        let m = (0..c)
            .filter(|&j| ok(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            if ok(j) {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
        }
        for j in 0..c {
            out[i * c + j] /= z;
        }
    }
    out
}
