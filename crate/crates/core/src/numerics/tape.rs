//! Reverse-mode tape. Every op records its inputs and whatever forward
//! cache its hand-derived backward needs.

use std::rc::Rc;

use crate::error::{contract, Result};

use super::ops::{self, AttentionMask, PairRotation};
use super::param::{ParamId, ParamStore};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
    Rotate { x: Var, rot: Rc<PairRotation> },
    Gather { x: Var, index: Rc<Vec<usize>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanSquare(Var),
    Sum(Var),
    SumCols(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` did not influence the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Adds parameter-leaf gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (id, g) in self.param_grads(tape) {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            for (acc, v) in p.tensor.grad_mut().iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    /// Gradient of every parameter leaf on the tape, in tape order. A
    /// parameter loaded twice appears twice.
    pub fn param_grads<'a>(&'a self, tape: &'a Tape) -> impl Iterator<Item = (ParamId, &'a [f64])> {
        tape.nodes.iter().enumerate().filter_map(|(i, node)| match (&node.op, &self.grads[i]) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }
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

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        value.clear_grad();
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).tensor.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// `a[r, c] + row[0, c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(row).shape() != [1, c] {
            return Err(contract(format!(
                "add_row: row {:?} does not broadcast onto {:?}",
                self.value(row).shape(),
                self.value(a).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = ops::gelu(self.value(a));
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.layer_norm_eps(x, ops::LN_EPS)
    }

    pub fn layer_norm_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = ops::layer_norm_with_stats(self.value(x), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, inv_std }))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
        let (out, probs) =
            ops::attention_with_probs(self.value(q), self.value(k), self.value(v), mask)?;
        Ok(self.push(out, Op::Attention { q, k, v, probs }))
    }

    pub fn rotate(&mut self, x: Var, rot: &Rc<PairRotation>) -> Result<Var> {
        let out = rot.apply(self.value(x))?;
        Ok(self.push(
            out,
            Op::Rotate {
                x,
                rot: Rc::clone(rot),
            },
        ))
    }

    /// Flat gather: `out.data[j] = x.data[index[j]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(contract(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather { x, index }))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (r * c)..(r * c + c))
            .collect();
        self.gather(x, Rc::new(index), vec![rows.len(), c])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(contract(format!(
                "slice_cols {start}..{} exceeds {c} columns",
                start + len
            )));
        }
        let index: Vec<usize> = (0..r)
            .flat_map(|i| (i * c + start)..(i * c + start + len))
            .collect();
        self.gather(x, Rc::new(index), vec![r, len])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat_rows of nothing"))?;
        let c = self.value(*first).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(contract(format!(
                    "concat_rows: width {pc} does not match {c}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat_cols of nothing"))?;
        let r = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(contract(format!(
                    "concat_cols: {pr} rows do not match {r}"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().map(|a| a * a).sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(v), Op::MeanSquare(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let d = self.value(x).data();
        let out: Vec<f64> = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        let out = Tensor::matrix(r, 1, out)?;
        Ok(self.push(out, Op::SumCols(x)))
    }

    /// Rows scaled to unit norm, `x / sqrt(|x|^2 + eps^2)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps * eps).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }))
    }

    /// `x @ w + b` for a weight `[in, out]` and bias `[1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(contract("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                let ga = acc(grads, *a, m * k);
                ops::matmul_bt_into(g, val(*b).data(), ga, m, n, k);
                let gb = acc(grads, *b, k * n);
                ops::matmul_at_into(val(*a).data(), g, gb, m, k, n);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let gv = acc(grads, *v, g.len());
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                let gb = acc(grads, *b, g.len());
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let ga = acc(grads, *a, g.len());
                for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                    *x += gi * bi;
                }
                let gb = acc(grads, *b, g.len());
                for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                    *x += gi * ai;
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::AddScalar(a) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::AddRow(a, row) => {
                let c = val(*row).cols();
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                let gr = acc(grads, *row, c);
                for chunk in g.chunks(c) {
                    gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
            Op::Gelu(a) => {
                let av = val(*a).data();
                let ga = acc(grads, *a, g.len());
                for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                    *x += gi * ops::gelu_grad_scalar(*ai);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = acc(grads, *x, g.len());
                for (r, inv) in inv_std.iter().enumerate() {
                    let gy = &g[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let mean_g = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[r * c + j] += inv * (gy[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            }
            Op::Attention { q, k, v, probs } => {
                let (n, dh) = (val(*q).rows(), val(*q).cols());
                let dv = val(*v).cols();
                let scale = 1.0 / (dh as f64).sqrt();
                // dV = P^T dO
                let gv = acc(grads, *v, n * dv);
                ops::matmul_at_into(probs, g, gv, n, n, dv);
                // dP = dO V^T ; dS = P * (dP - rowsum(dP * P))
                let mut ds = vec![0.0; n * n];
                ops::matmul_bt_into(g, val(*v).data(), &mut ds, n, dv, n);
                for p in 0..n {
                    let pr = &probs[p * n..(p + 1) * n];
                    let dr = &mut ds[p * n..(p + 1) * n];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (d, pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                let gq = acc(grads, *q, n * dh);
                ops::matmul_into(&ds, val(*k).data(), gq, n, n, dh);
                let gk = acc(grads, *k, n * dh);
                ops::matmul_at_into(&ds, val(*q).data(), gk, n, n, dh);
            }
            Op::Rotate { x, rot } => {
                let mut back = vec![0.0; g.len()];
                rot.apply_inverse_slice(g, &mut back);
                let gx = acc(grads, *x, g.len());
                gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
            Op::Gather { x, index } => {
                let n = val(*x).numel();
                let gx = acc(grads, *x, n);
                for (&j, gi) in index.iter().zip(g) {
                    gx[j] += gi;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).numel();
                    let gp = acc(grads, *p, len);
                    gp.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut col = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let gp = acc(grads, *p, r * w);
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + col + j];
                        }
                    }
                    col += w;
                }
            }
            Op::MeanSquare(x) => {
                let xv = val(*x).data();
                let m = xv.len() as f64;
                let gx = acc(grads, *x, xv.len());
                for (a, xi) in gx.iter_mut().zip(xv) {
                    *a += 2.0 * xi / m * g[0];
                }
            }
            Op::Sum(x) => {
                let gx = acc(grads, *x, val(*x).numel());
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::SumCols(x) => {
                let c = val(*x).cols();
                let gx = acc(grads, *x, val(*x).numel());
                for (r, gr) in g.iter().enumerate() {
                    gx[r * c..(r + 1) * c].iter_mut().for_each(|a| *a += gr);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = acc(grads, *x, g.len());
                for (r, n) in norms.iter().enumerate() {
                    let gy = &g[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += (gy[j] - yr[j] * dot) / n;
                    }
                }
            }
        }
    }
}
