//! Wengert-list reverse-mode autodiff.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Nodes only reference earlier nodes, so the list is a
//! DAG in topological order and `backward` is a single reverse sweep.

use std::fmt;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Additive bias that removes a key from attention.
pub const MASK_BIAS: f64 = -1e30;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-supplied elementwise-or-not unary op:
/// `(input, output, upstream) -> input gradient`.
pub type CustomVjp = Box<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu { x: Var, cdf: Vec<f64> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        p: Var,
        target: Vec<f64>,
    },
    KlDivergence {
        s: Var,
        target: Vec<f64>,
    },
    MeanSquaredError {
        s: Var,
        target: Vec<f64>,
    },
    Custom {
        x: Var,
        vjp: CustomVjp,
    },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDivergence { .. } => "kl_divergence",
            Op::MeanSquaredError { .. } => "mean_squared_error",
            Op::Custom { .. } => "custom",
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Leaf that tracks gradients.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears every leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
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

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape(v).to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let out = kernels::transpose(self.value(x).data(), r, c);
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(x), needs))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), needs))
    }

    /// Adds a length-`n` bias to every row of `x[... x n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRowBias(x, bias), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x);
        let out: Vec<f64> = value.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, c), needs)
    }

    /// Exact-erf GELU: `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let cdf: Vec<f64> = value.data().iter().map(|&v| normal_cdf(v)).collect();
        let out: Vec<f64> = value.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let t = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        let cdf = if needs { cdf } else { Vec::new() };
        self.push(t, Op::Gelu { x, cdf }, needs)
    }

    /// Per-row normalization over the last axis (biased variance), then
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::contract("layer_norm: eps must be positive"));
        }
        let d = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut normalized = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std.push(rstd);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * rstd;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            softmax_into(row, &mut out);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::SoftmaxRows(x), needs)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::contract(format!(
                "slice_cols: columns {start}..{} out of range for width {c}",
                start + width
            )));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&data[i * c + start..i * c + start + width]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(r, width, out)?, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols: no inputs"))?;
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::matrix(r, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows: no inputs"))?;
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::matrix(rows, c, out)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::contract("gather_rows: empty row list"));
        }
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!(
                "gather_rows: row {bad} out of range for {r} rows"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(xv.row(i));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::matrix(rows.len(), c, out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// `-sum_i y_i ln max(p_i, PROB_FLOOR)` against a fixed target `y`.
    pub fn cross_entropy(&mut self, target: &[f64], p: Var) -> Result<Var> {
        self.check_target("cross_entropy", target, p)?;
        let loss = -self
            .value(p)
            .data()
            .iter()
            .zip(target)
            .filter(|(_, &y)| y != 0.0)
            .map(|(&pi, &y)| y * pi.max(PROB_FLOOR).ln())
            .sum::<f64>();
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// `sum_i t_i (ln t_i - ln max(s_i, PROB_FLOOR))` with `0 ln 0 = 0`;
    /// the target `t` is a constant.
    pub fn kl_divergence(&mut self, target: &[f64], s: Var) -> Result<Var> {
        self.check_target("kl_divergence", target, s)?;
        let loss = self
            .value(s)
            .data()
            .iter()
            .zip(target)
            .filter(|(_, &t)| t > 0.0)
            .map(|(&si, &t)| t * (t.ln() - si.max(PROB_FLOOR).ln()))
            .sum::<f64>();
        let needs = self.needs(s);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDivergence {
                s,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// Mean over all elements of `(t - s)^2`; the target `t` is a constant.
    pub fn mean_squared_error(&mut self, target: &[f64], s: Var) -> Result<Var> {
        self.check_target("mean_squared_error", target, s)?;
        let sv = self.value(s).data();
        let loss = sv
            .iter()
            .zip(target)
            .map(|(si, t)| (t - si) * (t - si))
            .sum::<f64>()
            / sv.len() as f64;
        let needs = self.needs(s);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MeanSquaredError {
                s,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    fn check_target(&self, op: &'static str, target: &[f64], v: Var) -> Result<()> {
        if target.len() != self.value(v).numel() {
            return Err(Error::Dimension {
                op,
                lhs: vec![target.len()],
                rhs: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    /// Unary op with a caller-provided forward map and vector-Jacobian product.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&[f64]) -> Vec<f64>,
        vjp: CustomVjp,
    ) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), forward(xv.data()))?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Custom { x, vjp }, needs))
    }

    /// Propagates `d root / d leaf` into every gradient-tracking leaf
    /// reachable from `root`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward: root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => kernels::add_into(acc, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, bv.data(), &mut da, m, k, n);
                    send(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(av.data(), g, &mut db, m, k, n);
                    send(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                send(*x, kernels::transpose(g, r, c));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddRowBias(x, bias) => {
                send(*x, g.to_vec());
                if self.needs(*bias) {
                    let n = out.last_dim();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        kernels::add_into(&mut db, row);
                    }
                    send(*bias, db);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.needs(*b) {
                    send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::Gelu { x, cdf } => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .zip(cdf)
                        .map(|((g, &v), &c)| g * (c + v * normal_pdf(v)))
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (grow, xrow) in g.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    send(*gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        kernels::add_into(&mut db, row);
                    }
                    send(*beta, db);
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, xrow), &rstd) in
                        g.chunks(d).zip(normalized.chunks(d)).zip(inv_std.iter())
                    {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xrow[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = grow[j] * gv[j];
                            dx.push(rstd * (dxh - mean_dxh - xrow[j] * mean_dxh_xh));
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::SoftmaxRows(x) => {
                let n = out.last_dim();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(out.data().chunks(n)) {
                    let inner = kernels::dot(grow, yrow);
                    dx.extend(grow.iter().zip(yrow).map(|(gi, yi)| yi * (gi - inner)));
                }
                send(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let xs = self.shape(*x);
                let (r, c) = (xs[0], xs[1]);
                let w = out.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        send(p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        send(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, rows } => {
                let c = out.shape()[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (k, &i) in rows.iter().enumerate() {
                    kernels::add_into(&mut dx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::CrossEntropy { p, target } => {
                let pv = self.value(*p).data();
                let dp = pv
                    .iter()
                    .zip(target)
                    .map(|(&pi, &y)| {
                        if y == 0.0 || pi <= PROB_FLOOR {
                            0.0
                        } else {
                            -g[0] * y / pi
                        }
                    })
                    .collect();
                send(*p, dp);
            }
            Op::KlDivergence { s, target } => {
                let sv = self.value(*s).data();
                let ds = sv
                    .iter()
                    .zip(target)
                    .map(|(&si, &t)| {
                        if t <= 0.0 || si <= PROB_FLOOR {
                            0.0
                        } else {
                            -g[0] * t / si
                        }
                    })
                    .collect();
                send(*s, ds);
            }
            Op::MeanSquaredError { s, target } => {
                let sv = self.value(*s).data();
                let scale = 2.0 * g[0] / sv.len() as f64;
                send(
                    *s,
                    sv.iter().zip(target).map(|(si, t)| scale * (si - t)).collect(),
                );
            }
            Op::Custom { x, vjp } => {
                send(*x, vjp(self.value(*x).data(), out.data(), g));
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    (-0.5 * x * x).exp() * INV_SQRT_2PI
}

/// Appends `softmax(row)` to `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e /= total;
    }
}
