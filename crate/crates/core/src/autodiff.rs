//! Dynamic tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly, appends its result to the [`Tape`], and
//! remembers how to pull a gradient back to its inputs. [`Tape::backward`]
//! replays the tape in reverse and accumulates `d loss / d leaf` into each
//! leaf that was created with `requires_grad`.

use std::cell::RefCell;

use libm::erf;

use crate::error::{Error, Result};
use crate::kan;
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    AddRowBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Silu(Var),
    Tanh(Var),
    Gelu(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Kan {
        input: Var,
        coeffs: Var,
        base: Option<Var>,
        grid: Vec<f64>,
        width: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves with `requires_grad` keep one.
    grad: Option<Vec<f64>>,
}

/// Records operations for one computation graph.
///
/// A tape is single-threaded; independent graphs (e.g. separate CV folds)
/// each own their own tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        let n = value.len();
        self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: Some(vec![0.0; n]),
        })
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` for constants and interior nodes.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push_node(Node {
            value,
            op,
            requires_grad,
            grad: None,
        })
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    // ── Operations ──────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |x, y| -> Result<Tensor> {
            match (x.shape(), y.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => {
                    Tensor::new(vec![m, n], matmul_raw(x.data(), y.data(), m, k, n))
                }
                _ => Err(Error::Shape {
                    op: "matmul",
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                }),
            }
        })?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.with2(a, b, |x, y| {
            if x.shape() != y.shape() {
                return Err(Error::Shape {
                    op: name,
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.shape().to_vec(), data)
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |p, q| p - q)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |p, q| p * q)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = self.with1(a, |x| map_tensor(x, |v| v * factor));
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Multiplies row `i` of a matrix by the constant `factors[i]`.
    pub fn scale_rows(&self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let value = self.with1(a, |x| -> Result<Tensor> {
            let (rows, cols) = x.dims2()?;
            if rows != factors.len() {
                return Err(Error::Shape {
                    op: "scale_rows",
                    lhs: x.shape().to_vec(),
                    rhs: vec![factors.len()],
                });
            }
            let mut data = x.data().to_vec();
            for (row, &f) in data.chunks_mut(cols).zip(&factors) {
                row.iter_mut().for_each(|v| *v *= f);
            }
            Tensor::new(vec![rows, cols], data)
        })?;
        Ok(self.push(value, Op::ScaleRows(a, factors), &[a]))
    }

    /// `x[m×n] + bias[n]`, bias broadcast over rows.
    pub fn add_row_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let value = self.with2(x, bias, |x, b| -> Result<Tensor> {
            let (rows, cols) = x.dims2()?;
            if b.len() != cols {
                return Err(Error::Shape {
                    op: "add_row_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
            }
            Tensor::new(vec![rows, cols], data)
        })?;
        Ok(self.push(value, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = self.with1(a, |x| Tensor::scalar(x.data().iter().sum()));
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = self.with1(a, |x| {
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        });
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn silu(&self, a: Var) -> Var {
        let value = self.with1(a, |x| map_tensor(x, silu));
        self.push(value, Op::Silu(a), &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.with1(a, |x| map_tensor(x, f64::tanh));
        self.push(value, Op::Tanh(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let value = self.with1(a, |x| map_tensor(x, gelu));
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.with1(a, |x| -> Result<Tensor> {
            let (r, c) = x.dims2()?;
            Tensor::new(vec![c, r], transpose_raw(x.data(), r, c))
        })?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::validation("concat_rows of nothing"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (_, cols) = nodes[parts[0].0].value.dims2()?;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                let (r, c) = t.dims2()?;
                if c != cols {
                    return Err(Error::Shape {
                        op: "concat_rows",
                        lhs: nodes[parts[0].0].value.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::validation("concat_cols of nothing"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (rows, _) = nodes[parts[0].0].value.dims2()?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                let (r, c) = t.dims2()?;
                if r != rows {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        lhs: nodes[parts[0].0].value.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.0].value.data()[i * w..(i + 1) * w]);
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.with1(a, |x| -> Result<Tensor> {
            let (r, c) = x.dims2()?;
            if len == 0 || start + len > r {
                return Err(Error::validation(format!(
                    "row slice {start}..{} out of range for {r} rows",
                    start + len
                )));
            }
            Tensor::new(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())
        })?;
        Ok(self.push(value, Op::SliceRows { input: a, start }, &[a]))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.with1(a, |x| -> Result<Tensor> {
            let (r, c) = x.dims2()?;
            if len == 0 || start + len > c {
                return Err(Error::validation(format!(
                    "column slice {start}..{} out of range for {c} columns",
                    start + len
                )));
            }
            let data = x
                .data()
                .chunks(c)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            Tensor::new(vec![r, len], data)
        })?;
        Ok(self.push(value, Op::SliceCols { input: a, start }, &[a]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = self.with1(a, |x| -> Result<Tensor> {
            let (outer, len, inner) = axis_split(x.shape(), axis)?;
            let mut out = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let max = (0..len).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..len {
                        let e = (out[idx(k)] - max).exp();
                        out[idx(k)] = e;
                        total += e;
                    }
                    for k in 0..len {
                        out[idx(k)] /= total;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        })?;
        Ok(self.push(value, Op::Softmax { input: a, axis }, &[a]))
    }

    /// Row-wise layer normalization over the last dimension of a matrix.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (value, normalized, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, g, b) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let (rows, cols) = xv.dims2()?;
            if g.len() != cols || b.len() != cols {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let mut normalized = Vec::with_capacity(rows * cols);
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(rows * cols);
            for row in xv.data().chunks(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for (j, v) in row.iter().enumerate() {
                    let n = (v - mean) * is;
                    normalized.push(n);
                    out.push(n * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::new(vec![rows, cols], out)?, normalized, inv_std)
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` row-wise.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, probs) = self.with1(logits, |x| -> Result<(Tensor, Vec<f64>)> {
            let (rows, classes) = x.dims2()?;
            if rows != labels.len() {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    lhs: x.shape().to_vec(),
                    rhs: vec![labels.len()],
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::validation(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
            let mut probs = Vec::with_capacity(rows * classes);
            let mut loss = 0.0;
            for (row, &label) in x.data().chunks(classes).zip(labels) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[label];
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            Ok((Tensor::scalar(loss / rows as f64), probs))
        })?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Fused KAN layer: `y[b,j] = Σ_i base[j,i]·silu(x[b,i]) + Σ_i Σ_k coeffs[j,i,k]·φ_k(x[b,i])`
    /// with `φ_k` the reflectional switch basis centred on `grid[k]`.
    pub fn kan_layer(
        &self,
        input: Var,
        coeffs: Var,
        base: Option<Var>,
        grid: &[f64],
        width: f64,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let c = &nodes[coeffs.0].value;
            let (batch, in_dim) = x.dims2()?;
            let g = grid.len();
            let &[out_dim, c_in, c_g] = c.shape() else {
                return Err(Error::Shape {
                    op: "kan_layer",
                    lhs: x.shape().to_vec(),
                    rhs: c.shape().to_vec(),
                });
            };
            if c_in != in_dim || c_g != g {
                return Err(Error::Shape {
                    op: "kan_layer",
                    lhs: x.shape().to_vec(),
                    rhs: c.shape().to_vec(),
                });
            }
            let basis = kan::basis_matrix(x.data(), grid, width);
            // basis: batch × (in·G); coeffs viewed as out × (in·G)
            let mut y = matmul_nt_raw(&basis, c.data(), batch, in_dim * g, out_dim);
            if let Some(bw) = base {
                let w = &nodes[bw.0].value;
                if w.shape() != [out_dim, in_dim] {
                    return Err(Error::Shape {
                        op: "kan_layer",
                        lhs: vec![out_dim, in_dim],
                        rhs: w.shape().to_vec(),
                    });
                }
                let s: Vec<f64> = x.data().iter().map(|&v| silu(v)).collect();
                let lin = matmul_nt_raw(&s, w.data(), batch, in_dim, out_dim);
                y.iter_mut().zip(lin).for_each(|(a, b)| *a += b);
            }
            Tensor::new(vec![batch, out_dim], y)?
        };
        let mut inputs = vec![input, coeffs];
        inputs.extend(base);
        Ok(self.push(
            value,
            Op::Kan {
                input,
                coeffs,
                base,
                grid: grid.to_vec(),
                width,
            },
            &inputs,
        ))
    }

    // ── Reverse pass ────────────────────────────────────────────────

    /// Accumulates `d loss / d leaf` into every trainable leaf.
    ///
    /// Calling it twice without [`Tape::zero_grad`] sums the gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            for (target, contrib) in pullback(&nodes, node, &g) {
                if !nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let (Some(g), Some(acc)) = (g, nodes[id].grad.as_mut()) {
                acc.iter_mut().zip(g).for_each(|(a, c)| *a += c);
            }
        }
        Ok(())
    }
}

fn pullback(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            let mut out = Vec::with_capacity(2);
            if needs(*a) {
                out.push((*a, matmul_nt_raw(g, val(*b).data(), m, n, k)));
            }
            if needs(*b) {
                out.push((*b, matmul_tn_raw(val(*a).data(), g, m, k, n)));
            }
            out
        }
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let (x, y) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect()),
                (*b, g.iter().zip(x).map(|(gi, xi)| gi * xi).collect()),
            ]
        }
        Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
        Op::ScaleRows(a, factors) => {
            let cols = val(*a).shape()[1];
            let mut out = g.to_vec();
            for (row, f) in out.chunks_mut(cols).zip(factors) {
                row.iter_mut().for_each(|v| *v *= f);
            }
            vec![(*a, out)]
        }
        Op::AddRowBias(x, b) => {
            let cols = val(*b).len();
            let mut gb = vec![0.0; cols];
            for row in g.chunks(cols) {
                gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
            }
            vec![(*x, g.to_vec()), (*b, gb)]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::Mean(a) => {
            let n = val(*a).len();
            vec![(*a, vec![g[0] / n as f64; n])]
        }
        Op::Silu(a) => vec![(
            *a,
            val(*a)
                .data()
                .iter()
                .zip(g)
                .map(|(&x, gi)| gi * silu_grad(x))
                .collect(),
        )],
        Op::Tanh(a) => vec![(
            *a,
            node.value
                .data()
                .iter()
                .zip(g)
                .map(|(y, gi)| gi * (1.0 - y * y))
                .collect(),
        )],
        Op::Gelu(a) => vec![(
            *a,
            val(*a)
                .data()
                .iter()
                .zip(g)
                .map(|(&x, gi)| gi * gelu_grad(x))
                .collect(),
        )],
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            // g is c×r
            vec![(*a, transpose_raw(g, c, r))]
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let n = val(*p).len();
                    let piece = g[offset..offset + n].to_vec();
                    offset += n;
                    (*p, piece)
                })
                .collect()
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.shape()[0];
            let total = node.value.shape()[1];
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let w = val(*p).shape()[1];
                    let mut piece = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        piece.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    (*p, piece)
                })
                .collect()
        }
        Op::SliceRows { input, start } => {
            let cols = val(*input).shape()[1];
            let mut out = vec![0.0; val(*input).len()];
            out[start * cols..start * cols + g.len()].copy_from_slice(g);
            vec![(*input, out)]
        }
        Op::SliceCols { input, start } => {
            let cols = val(*input).shape()[1];
            let len = node.value.shape()[1];
            let mut out = vec![0.0; val(*input).len()];
            for (row, grow) in out.chunks_mut(cols).zip(g.chunks(len)) {
                row[*start..start + len].copy_from_slice(grow);
            }
            vec![(*input, out)]
        }
        Op::Softmax { input, axis } => {
            let y = node.value.data();
            let (outer, len, inner) =
                axis_split(node.value.shape(), *axis).expect("validated on forward");
            let mut out = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                    for k in 0..len {
                        out[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            vec![(*input, out)]
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let cols = val(*gain).len();
            let gv = val(*gain).data();
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; cols];
            let mut gbias = vec![0.0; cols];
            for (r, (grow, nrow)) in g.chunks(cols).zip(normalized.chunks(cols)).enumerate() {
                let mut mean_dn = 0.0;
                let mut mean_dn_n = 0.0;
                for j in 0..cols {
                    let dn = grow[j] * gv[j];
                    mean_dn += dn;
                    mean_dn_n += dn * nrow[j];
                    gg[j] += grow[j] * nrow[j];
                    gbias[j] += grow[j];
                }
                mean_dn /= cols as f64;
                mean_dn_n /= cols as f64;
                for j in 0..cols {
                    let dn = grow[j] * gv[j];
                    gx[r * cols + j] = inv_std[r] * (dn - mean_dn - nrow[j] * mean_dn_n);
                }
            }
            vec![(*input, gx), (*gain, gg), (*bias, gbias)]
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let classes = val(*logits).shape()[1];
            let scale = g[0] / labels.len() as f64;
            let mut out = probs.clone();
            for (row, &label) in out.chunks_mut(classes).zip(labels) {
                row[label] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            vec![(*logits, out)]
        }
        Op::Kan {
            input,
            coeffs,
            base,
            grid,
            width,
        } => {
            let x = val(*input);
            let c = val(*coeffs);
            let (batch, in_dim) = (x.shape()[0], x.shape()[1]);
            let out_dim = c.shape()[0];
            let gk = grid.len();
            let mut out = Vec::with_capacity(3);
            if needs(*coeffs) {
                let basis = kan::basis_matrix(x.data(), grid, *width);
                // gᵀ[out×batch] · basis[batch×(in·G)]
                out.push((*coeffs, matmul_tn_raw(g, &basis, batch, out_dim, in_dim * gk)));
            }
            if let Some(bw) = base {
                if needs(*bw) {
                    let s: Vec<f64> = x.data().iter().map(|&v| silu(v)).collect();
                    out.push((*bw, matmul_tn_raw(g, &s, batch, out_dim, in_dim)));
                }
            }
            if needs(*input) {
                // Σ_j g[b,j]·c[j,i,k] → batch × (in·G)
                let gc = matmul_raw(g, c.data(), batch, out_dim, in_dim * gk);
                let dbasis = kan::basis_derivative_matrix(x.data(), grid, *width);
                let mut gx: Vec<f64> = gc
                    .chunks(gk)
                    .zip(dbasis.chunks(gk))
                    .map(|(a, d)| a.iter().zip(d).map(|(p, q)| p * q).sum())
                    .collect();
                if let Some(bw) = base {
                    let gw = matmul_raw(g, val(*bw).data(), batch, out_dim, in_dim);
                    for ((gxi, gwi), &xi) in gx.iter_mut().zip(gw).zip(x.data()) {
                        *gxi += gwi * silu_grad(xi);
                    }
                }
                out.push((*input, gx));
            }
            out
        }
    }
}

fn map_tensor(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

fn transpose_raw(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::validation(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}
