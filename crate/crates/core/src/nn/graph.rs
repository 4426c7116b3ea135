//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! the leaves that were created with [`Graph::param`]. Nodes whose inputs do
//! not require gradients are skipped entirely during the backward pass.

use std::sync::Arc;

use rustfft::num_complex::Complex64;

use super::tensor::{gemm, gemm_strided, Tensor};
use super::NnError;
use crate::dsp::StftPlan;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    LogFloor(Var, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        segments: Vec<(usize, usize)>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        train: bool,
    },
    Embed(Var, Vec<usize>),
    Mse(Var, Vec<f64>),
    Sum(Var),
    GmAttention {
        alpha: Var,
        beta: Var,
        kappa: Var,
        memory: Var,
        lengths: Vec<usize>,
        phi: Vec<f64>,
    },
    AssembleMemory {
        fwd: Vec<Var>,
        bwd: Vec<Var>,
        lengths: Vec<usize>,
    },
    StackSteps(Vec<Var>),
    StftMag {
        x: Var,
        plan: Arc<StftPlan>,
        spectra: Vec<Complex64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with fixed running statistics.
    Fixed {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` when the leaf received no gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

fn mismatch(msg: impl Into<String>) -> NnError {
    NnError::ShapeMismatch(msg.into())
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), NnError> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(mismatch(format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(), NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(format!(
                "{:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(mismatch(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let cols = self.value(x).cols();
        if self.value(b).len() != cols {
            return Err(mismatch(format!(
                "bias length {} vs {} columns",
                self.value(b).len(),
                cols
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NnError> {
        self.same_shape(a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape");
        self.push(out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |a| a * c, Op::Scale(x, c))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var, NnError> {
        if c.len() != self.value(x).len() {
            return Err(mismatch(format!(
                "constant length {} vs {}",
                c.len(),
                self.value(x).len()
            )));
        }
        let v = self.value(x);
        let data = v.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(x, c), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow for large `x`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus_scalar, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// `ln(max(x, floor))`.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, move |a| a.max(floor).ln(), Op::LogFloor(x, floor))
    }

    /// Concatenates matrices along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(mismatch("concat of nothing"));
        }
        let rows = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(mismatch(format!("concat rows {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, NnError> {
        let (rows, cols) = self.dims2(x)?;
        if start + width > cols {
            return Err(mismatch(format!("slice {start}+{width} beyond {cols} columns")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let t = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(t, Op::SliceCols(x, start), &[x]))
    }

    /// Selects rows by index; `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Option<usize>>) -> Result<Var, NnError> {
        let (rows, cols) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; idx.len() * cols];
        for (i, r) in idx.iter().enumerate() {
            if let Some(r) = *r {
                if r >= rows {
                    return Err(mismatch(format!("row {r} out of {rows}")));
                }
                out[i * cols..(i + 1) * cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(t, Op::GatherRows(x, idx), &[x]))
    }

    /// Same-padded 1-D convolution over the rows of `x: [T × c_in]`.
    ///
    /// `w` has shape `[kernel, c_in, c_out]`. Each `(start, len)` segment is
    /// convolved independently with zero padding at its boundaries.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        segments: &[(usize, usize)],
    ) -> Result<Var, NnError> {
        let (t_total, c_in) = self.dims2(x)?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(mismatch(format!("conv weight {ws:?} for {c_in} input channels")));
        }
        let kernel = ws[0];
        if kernel % 2 == 0 {
            return Err(mismatch(format!("conv kernel {kernel} must be odd")));
        }
        let c_out = ws[2];
        if self.value(b).len() != c_out {
            return Err(mismatch("conv bias length"));
        }
        for &(s, l) in segments {
            if s + l > t_total {
                return Err(mismatch("conv segment out of range"));
            }
        }
        let half = kernel / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; t_total * c_out];
        for row in out.chunks_mut(c_out) {
            row.copy_from_slice(bd);
        }
        for &(s, l) in segments {
            for j in 0..kernel {
                // output rows t with source row t + j - half inside the segment
                let (t0, t1, src0) = tap_range(l, j, half);
                if t1 <= t0 {
                    continue;
                }
                let n = t1 - t0;
                gemm(
                    n,
                    c_in,
                    c_out,
                    &xd[(s + src0) * c_in..(s + src0 + n) * c_in],
                    &wd[j * c_in * c_out..(j + 1) * c_in * c_out],
                    &mut out[(s + t0) * c_out..(s + t1) * c_out],
                    true,
                );
            }
        }
        let t = Tensor::new(vec![t_total, c_out], out)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                segments: segments.to_vec(),
            },
            &[x, w, b],
        ))
    }

    /// Per-column batch normalization of `x: [N × C]` followed by
    /// `gamma * x̂ + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<'_>) -> Result<Var, NnError> {
        let (n, c) = self.dims2(x)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(mismatch("batch norm affine size"));
        }
        let xd = self.value(x).data();
        let (mean, var, eps, train) = match stats {
            NormStats::Batch { eps } => {
                if n < 2 {
                    return Err(NnError::DegenerateBatch);
                }
                let mut mean = vec![0.0; c];
                for row in xd.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in xd.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("running stats size"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for j in 0..c {
                let h = (xd[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + bt[j];
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean and (biased) variance used by a batch-norm node.
    pub fn norm_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// Row lookup into `table: [V × d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let (v, d) = self.dims2(table)?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(NnError::IdOutOfRange(pos));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::Embed(table, ids.to_vec()), &[table]))
    }

    /// Mean squared error against a constant target; returns a scalar.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var, NnError> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(mismatch(format!("mse {:?} vs {:?}", p.shape(), target.shape())));
        }
        let n = p.len().max(1) as f64;
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target.data().to_vec()), &[pred]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Unnormalized Gaussian-mixture attention.
    ///
    /// `alpha`, `beta`, `kappa` are `[B × K]`, `memory` is `[B × T × D]` and
    /// `lengths[b]` bounds the positions attended in lane `b`. Returns the
    /// context `[B × D]`; the position weights are available through
    /// [`Graph::attention_weights`].
    pub fn gm_attention(
        &mut self,
        alpha: Var,
        beta: Var,
        kappa: Var,
        memory: Var,
        lengths: &[usize],
    ) -> Result<Var, NnError> {
        let (bsz, k) = self.dims2(alpha)?;
        self.same_shape(alpha, beta)?;
        self.same_shape(alpha, kappa)?;
        let ms = self.value(memory).shape().to_vec();
        if ms.len() != 3 || ms[0] != bsz || lengths.len() != bsz {
            return Err(mismatch(format!("attention memory {ms:?} for batch {bsz}")));
        }
        let (t_max, d) = (ms[1], ms[2]);
        if lengths.iter().any(|&l| l > t_max) {
            return Err(mismatch("attention length exceeds memory"));
        }
        if lengths.iter().any(|&l| l == 0) {
            return Err(NnError::EmptyMemory);
        }
        let a = self.value(alpha).data();
        let be = self.value(beta).data();
        let ka = self.value(kappa).data();
        let mem = self.value(memory).data();
        let mut phi = vec![0.0; bsz * t_max];
        let mut ctx = vec![0.0; bsz * d];
        for b in 0..bsz {
            for u in 0..lengths[b] {
                let mut w = 0.0;
                for j in 0..k {
                    let diff = ka[b * k + j] - u as f64;
                    w += a[b * k + j] * (-be[b * k + j] * diff * diff).exp();
                }
                phi[b * t_max + u] = w;
                let row = &mem[(b * t_max + u) * d..(b * t_max + u + 1) * d];
                for (c, m) in ctx[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *c += w * m;
                }
            }
        }
        let t = Tensor::new(vec![bsz, d], ctx)?;
        Ok(self.push(
            t,
            Op::GmAttention {
                alpha,
                beta,
                kappa,
                memory,
                lengths: lengths.to_vec(),
                phi,
            },
            &[alpha, beta, kappa, memory],
        ))
    }

    /// Position weights `φ: [B × T]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::GmAttention { phi, .. } => Some(phi),
            _ => None,
        }
    }

    /// Builds `[B × T × 2H]` bidirectional memory from per-step outputs.
    ///
    /// `fwd[t]` row `b` lands at position `t`; `bwd[t]` row `b` is the
    /// backward pass at step `t`, which corresponds to position
    /// `lengths[b] - 1 - t`. Positions past a lane's length are zero.
    pub fn assemble_memory(&mut self, fwd: &[Var], bwd: &[Var], lengths: &[usize]) -> Result<Var, NnError> {
        if fwd.len() != bwd.len() || fwd.is_empty() {
            return Err(mismatch("memory step count"));
        }
        let t_max = fwd.len();
        let (bsz, h) = self.dims2(fwd[0])?;
        if lengths.len() != bsz || lengths.iter().any(|&l| l > t_max) {
            return Err(mismatch("memory lengths"));
        }
        for v in fwd.iter().chain(bwd) {
            if self.dims2(*v)? != (bsz, h) {
                return Err(mismatch("memory step shape"));
            }
        }
        let mut out = vec![0.0; bsz * t_max * 2 * h];
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..len {
                let f = &self.value(fwd[t]).data()[b * h..(b + 1) * h];
                let dst = (b * t_max + t) * 2 * h;
                out[dst..dst + h].copy_from_slice(f);
                let r = &self.value(bwd[t]).data()[b * h..(b + 1) * h];
                let dst = (b * t_max + (len - 1 - t)) * 2 * h + h;
                out[dst..dst + h].copy_from_slice(r);
            }
        }
        let t = Tensor::new(vec![bsz, t_max, 2 * h], out)?;
        let inputs: Vec<Var> = fwd.iter().chain(bwd).copied().collect();
        Ok(self.push(
            t,
            Op::AssembleMemory {
                fwd: fwd.to_vec(),
                bwd: bwd.to_vec(),
                lengths: lengths.to_vec(),
            },
            &inputs,
        ))
    }

    /// Stacks per-step `[B × C]` matrices into `[B × S × C]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var, NnError> {
        if steps.is_empty() {
            return Err(mismatch("stack of nothing"));
        }
        let (bsz, c) = self.dims2(steps[0])?;
        let s_len = steps.len();
        let mut out = vec![0.0; bsz * s_len * c];
        for (s, &v) in steps.iter().enumerate() {
            if self.dims2(v)? != (bsz, c) {
                return Err(mismatch("stack step shape"));
            }
            let src = self.value(v).data();
            for b in 0..bsz {
                let dst = (b * s_len + s) * c;
                out[dst..dst + c].copy_from_slice(&src[b * c..(b + 1) * c]);
            }
        }
        let t = Tensor::new(vec![bsz, s_len, c], out)?;
        Ok(self.push(t, Op::StackSteps(steps.to_vec()), steps))
    }

    /// Short-time Fourier magnitudes `[N × bins]` of a 1-D signal.
    pub fn stft_mag(&mut self, x: Var, plan: Arc<StftPlan>) -> Result<Var, NnError> {
        let signal = self.value(x).data();
        let frames = plan
            .frame_count(signal.len())
            .ok_or_else(|| mismatch(format!("signal of {} samples shorter than window", signal.len())))?;
        let spectra = plan.spectra(signal);
        let mags: Vec<f64> = spectra.iter().map(|c| c.norm()).collect();
        let t = Tensor::new(vec![frames, plan.bins()], mags)?;
        Ok(self.push(t, Op::StftMag { x, plan, spectra }, &[x]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].value.len() != 1 {
            return Err(mismatch("backward from a non-scalar"));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        // only leaf gradients survive
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<(), NnError> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let n = self.dims2(*b)?.1;
                if let Some(da) = self.slot(grads, *a) {
                    // da = g · bᵀ
                    let bd = self.value(*b).data();
                    gemm_strided(m, n, k, g, (n as isize, 1), bd, (1, n as isize), da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    // db = aᵀ · g
                    let ad = self.value(*a).data();
                    gemm_strided(k, m, n, ad, (1, k as isize), g, (n as isize, 1), db, true);
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    let c = db.len();
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), bb) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * bb;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, gv), aa) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * aa;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::MulConst(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), cv) in dx.iter_mut().zip(g).zip(c) {
                        *d += gv * cv;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), xx) in dx.iter_mut().zip(g).zip(xv) {
                        if *xx > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), yy) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yy * (1.0 - yy);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), yy) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yy * yy);
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), xx) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * sigmoid_scalar(*xx);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), yy) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yy;
                    }
                }
            }
            Op::LogFloor(x, floor) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), xx) in dx.iter_mut().zip(g).zip(xv) {
                        if *xx > *floor {
                            *d += gv / xx;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let rows = node.value.rows();
                let w = node.value.cols();
                let cols = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        add_into(&mut dx[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let cols = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, r) in idx.iter().enumerate() {
                        if let Some(r) = r {
                            add_into(&mut dx[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                segments,
            } => {
                let (_, c_in) = self.dims2(*x)?;
                let c_out = node.value.cols();
                let half = kernel / 2;
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(c_out) {
                        add_into(db, row);
                    }
                }
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if let Some(dw) = self.slot(grads, *w) {
                    for &(s, l) in segments {
                        for j in 0..*kernel {
                            let (t0, t1, src0) = tap_range(l, j, half);
                            if t1 <= t0 {
                                continue;
                            }
                            let n = t1 - t0;
                            // dw[j] += x_shiftedᵀ · g_rows
                            gemm_strided(
                                c_in,
                                n,
                                c_out,
                                &xd[(s + src0) * c_in..(s + src0 + n) * c_in],
                                (1, c_in as isize),
                                &g[(s + t0) * c_out..(s + t1) * c_out],
                                (c_out as isize, 1),
                                &mut dw[j * c_in * c_out..(j + 1) * c_in * c_out],
                                true,
                            );
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for &(s, l) in segments {
                        for j in 0..*kernel {
                            let (t0, t1, src0) = tap_range(l, j, half);
                            if t1 <= t0 {
                                continue;
                            }
                            let n = t1 - t0;
                            // dx_shifted += g_rows · w[j]ᵀ
                            gemm_strided(
                                n,
                                c_out,
                                c_in,
                                &g[(s + t0) * c_out..(s + t1) * c_out],
                                (c_out as isize, 1),
                                &wd[j * c_in * c_out..(j + 1) * c_in * c_out],
                                (1, c_out as isize),
                                &mut dx[(s + src0) * c_in..(s + src0 + n) * c_in],
                                true,
                            );
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                ..
            } => {
                let c = node.value.cols();
                let n = node.value.rows();
                let gm = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (r, row) in g.chunks(c).enumerate() {
                        for j in 0..c {
                            dg[j] += row[j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    for row in g.chunks(c) {
                        add_into(dbeta, row);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    if *train {
                        let mut sum_dh = vec![0.0; c];
                        let mut sum_dh_h = vec![0.0; c];
                        for r in 0..n {
                            for j in 0..c {
                                let dh = g[r * c + j] * gm[j];
                                sum_dh[j] += dh;
                                sum_dh_h[j] += dh * xhat[r * c + j];
                            }
                        }
                        let nf = n as f64;
                        for r in 0..n {
                            for j in 0..c {
                                let dh = g[r * c + j] * gm[j];
                                dx[r * c + j] +=
                                    inv_std[j] / nf * (nf * dh - sum_dh[j] - xhat[r * c + j] * sum_dh_h[j]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                dx[r * c + j] += g[r * c + j] * gm[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Embed(table, ids) => {
                let d = node.value.cols();
                if let Some(dt) = self.slot(grads, *table) {
                    for (pos, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[pos * d..(pos + 1) * d]);
                    }
                }
            }
            Op::Mse(pred, target) => {
                let p = self.value(*pred).data();
                let scale = 2.0 * g[0] / p.len().max(1) as f64;
                if let Some(dp) = self.slot(grads, *pred) {
                    for ((d, a), b) in dp.iter_mut().zip(p).zip(target) {
                        *d += scale * (a - b);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::GmAttention {
                alpha,
                beta,
                kappa,
                memory,
                lengths,
                phi,
            } => {
                let (bsz, k) = self.dims2(*alpha)?;
                let ms = self.value(*memory).shape();
                let (t_max, d) = (ms[1], ms[2]);
                let a = self.value(*alpha).data();
                let be = self.value(*beta).data();
                let ka = self.value(*kappa).data();
                let mem = self.value(*memory).data();
                // dφ[b,u] = <g[b], memory[b,u]>
                let mut dphi = vec![0.0; bsz * t_max];
                for b in 0..bsz {
                    let gb = &g[b * d..(b + 1) * d];
                    for u in 0..lengths[b] {
                        let row = &mem[(b * t_max + u) * d..(b * t_max + u + 1) * d];
                        dphi[b * t_max + u] = gb.iter().zip(row).map(|(x, y)| x * y).sum();
                    }
                }
                if let Some(dm) = self.slot(grads, *memory) {
                    for b in 0..bsz {
                        let gb = &g[b * d..(b + 1) * d];
                        for u in 0..lengths[b] {
                            let w = phi[b * t_max + u];
                            let row = &mut dm[(b * t_max + u) * d..(b * t_max + u + 1) * d];
                            for (r, gv) in row.iter_mut().zip(gb) {
                                *r += w * gv;
                            }
                        }
                    }
                }
                let mut da = vec![0.0; bsz * k];
                let mut dbe = vec![0.0; bsz * k];
                let mut dka = vec![0.0; bsz * k];
                for b in 0..bsz {
                    for j in 0..k {
                        let i = b * k + j;
                        for u in 0..lengths[b] {
                            let diff = ka[i] - u as f64;
                            let gauss = (-be[i] * diff * diff).exp();
                            let dp = dphi[b * t_max + u];
                            da[i] += dp * gauss;
                            let e = a[i] * gauss * dp;
                            dbe[i] -= e * diff * diff;
                            dka[i] -= e * 2.0 * be[i] * diff;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *alpha) {
                    add_into(s, &da);
                }
                if let Some(s) = self.slot(grads, *beta) {
                    add_into(s, &dbe);
                }
                if let Some(s) = self.slot(grads, *kappa) {
                    add_into(s, &dka);
                }
            }
            Op::AssembleMemory { fwd, bwd, lengths } => {
                let t_max = fwd.len();
                let h = self.value(fwd[0]).cols();
                for t in 0..t_max {
                    if let Some(df) = self.slot(grads, fwd[t]) {
                        for (b, &len) in lengths.iter().enumerate() {
                            if t < len {
                                let src = (b * t_max + t) * 2 * h;
                                add_into(&mut df[b * h..(b + 1) * h], &g[src..src + h]);
                            }
                        }
                    }
                    if let Some(dr) = self.slot(grads, bwd[t]) {
                        for (b, &len) in lengths.iter().enumerate() {
                            if t < len {
                                let src = (b * t_max + (len - 1 - t)) * 2 * h + h;
                                add_into(&mut dr[b * h..(b + 1) * h], &g[src..src + h]);
                            }
                        }
                    }
                }
            }
            Op::StackSteps(steps) => {
                let s_len = steps.len();
                let c = node.value.cols();
                let bsz = node.value.shape()[0];
                for (s, &v) in steps.iter().enumerate() {
                    if let Some(dv) = self.slot(grads, v) {
                        for b in 0..bsz {
                            let src = (b * s_len + s) * c;
                            add_into(&mut dv[b * c..(b + 1) * c], &g[src..src + c]);
                        }
                    }
                }
            }
            Op::StftMag { x, plan, spectra } => {
                let len = self.value(*x).len();
                if let Some(dx) = self.slot(grads, *x) {
                    plan.magnitude_backward(spectra, g, len, dx);
                }
            }
        }
        Ok(())
    }
}

/// Output-row range `[t0, t1)` and first source row for tap `j`.
fn tap_range(len: usize, j: usize, half: usize) -> (usize, usize, usize) {
    // source = t + j - half must lie in [0, len)
    let t0 = half.saturating_sub(j);
    let t1 = (len + half).saturating_sub(j).min(len);
    let src0 = (t0 + j).saturating_sub(half);
    (t0, t1, src0)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
