//! Forward kernels shared by the eager API and the tape.

use crate::error::{contract, Result};

use super::Tensor;

/// LayerNorm stabilizer.
pub const LN_EPS: f64 = 1e-6;

// tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(contract(format!(
            "matmul inner extents disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::matrix(m, n, out)
}

/// `out[m,n] += a[m,k] * b[k,n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Parameter-free LayerNorm over the last axis. Returns the output and the
/// per-row inverse standard deviations (used by backward).
pub(crate) fn layer_norm_with_stats(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let cols = x.cols();
    if cols < 2 {
        return Err(contract("layer_norm needs a last extent of at least 2"));
    }
    let rows = x.numel() / cols;
    let mut out = x.clone();
    out.clear_grad();
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    Ok((out, inv_std))
}

pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    layer_norm_with_stats(x, LN_EPS).map(|(t, _)| t)
}

/// Binary query-by-key attention mask; `allowed(p, q)` means query `p` may
/// read key `q`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn all_visible(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for p in 0..n {
            for q in 0..n {
                allowed.push(f(p, q));
            }
        }
        Self { n, allowed }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |p, q| p == q)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, p: usize, q: usize) -> bool {
        self.allowed[p * self.n + q]
    }

    pub fn row(&self, p: usize) -> &[bool] {
        &self.allowed[p * self.n..(p + 1) * self.n]
    }

    pub fn set(&mut self, p: usize, q: usize, v: bool) {
        self.allowed[p * self.n + q] = v;
    }
}

/// Scaled dot-product attention for one head. Returns output and the
/// softmax probabilities (zero where masked).
pub(crate) fn attention_with_probs(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<(Tensor, Vec<f64>)> {
    let (n, dh) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, dv) = v.dims2()?;
    if nk != n || nv != n || dk != dh {
        return Err(contract(format!(
            "attention operand shapes disagree: q{:?} k{:?} v{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if mask.len() != n {
        return Err(contract(format!(
            "mask is {0}x{0} but sequence has {1} tokens",
            mask.len(),
            n
        )));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; n * n];
    matmul_bt_into(q.data(), k.data(), &mut probs, n, dh, n);
    for p in 0..n {
        let row = &mut probs[p * n..(p + 1) * n];
        let allow = mask.row(p);
        let mut max = f64::NEG_INFINITY;
        for (s, &a) in row.iter().zip(allow) {
            if a {
                max = max.max(*s * scale);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(contract(format!("query row {p} has no allowed keys")));
        }
        let mut z = 0.0;
        for (s, &a) in row.iter_mut().zip(allow) {
            *s = if a { (*s * scale - max).exp() } else { 0.0 };
            z += *s;
        }
        for s in row.iter_mut() {
            *s /= z;
        }
    }
    let mut out = vec![0.0; n * dv];
    matmul_into(&probs, v.data(), &mut out, n, n, dv);
    Ok((Tensor::matrix(n, dv, out)?, probs))
}

pub fn masked_softmax_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    attention_with_probs(q, k, v, mask).map(|(o, _)| o)
}

/// Per-row rotation of adjacent column pairs `(2j, 2j+1)` by fixed angles.
#[derive(Clone, Debug)]
pub struct PairRotation {
    rows: usize,
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl PairRotation {
    /// `angles` is `rows x pairs`, row-major.
    pub fn from_angles(rows: usize, pairs: usize, angles: &[f64]) -> Result<Self> {
        if angles.len() != rows * pairs {
            return Err(contract("rotation angle table has the wrong size"));
        }
        Ok(Self {
            rows,
            pairs,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.pairs * 2
    }

    fn rotate(&self, x: &[f64], out: &mut [f64], inverse: bool) {
        let d = self.cols();
        for r in 0..self.rows {
            for j in 0..self.pairs {
                let (c, mut s) = (self.cos[r * self.pairs + j], self.sin[r * self.pairs + j]);
                if inverse {
                    s = -s;
                }
                let (a, b) = (x[r * d + 2 * j], x[r * d + 2 * j + 1]);
                out[r * d + 2 * j] = a * c - b * s;
                out[r * d + 2 * j + 1] = a * s + b * c;
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = vec![0.0; x.numel()];
        self.rotate(x.data(), &mut out, false);
        Tensor::matrix(self.rows, self.cols(), out)
    }

    pub(crate) fn apply_inverse_slice(&self, g: &[f64], out: &mut [f64]) {
        self.rotate(g, out, true);
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (r, c) = x.dims2()?;
        if r != self.rows || c != self.cols() {
            return Err(contract(format!(
                "rotation table is {}x{} but input is {r}x{c}",
                self.rows,
                self.cols()
            )));
        }
        Ok(())
    }
}
