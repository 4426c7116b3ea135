use rand::Rng;

use super::{Graph, NnError, Tensor, Var};

/// `x · w + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Inverted dropout: kept units are scaled by `1 / keep_prob`.
///
/// Inactive dropout, or `keep_prob >= 1`, returns `x` unchanged and draws
/// nothing from `rng`.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    keep_prob: f64,
    rng: &mut R,
    active: bool,
) -> Result<Var, NnError> {
    if !active || keep_prob >= 1.0 {
        return Ok(x);
    }
    let scale = 1.0 / keep_prob;
    let n = g.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < keep_prob { scale } else { 0.0 })
        .collect();
    g.mul_const(x, mask)
}

/// Hidden and cell state of an LSTM layer, `[batch × hidden]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmCellState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.all_finite() && self.c.all_finite()
    }

    pub fn norm_sq(&self) -> f64 {
        self.h.norm_sq() + self.c.norm_sq()
    }

    /// Zeroes the rows of lanes flagged in `reset`.
    pub fn reset_rows(&mut self, reset: &[bool]) {
        for t in [&mut self.h, &mut self.c] {
            let cols = t.cols();
            for (r, flag) in reset.iter().enumerate() {
                if *flag {
                    t.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
}

/// LSTM weights on the tape. Gates are packed `[i, f, g, o]` along columns.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

/// One LSTM step with optional recurrent cell dropout.
///
/// When active, the candidate update `tanh(z_g)` entering the cell is
/// multiplied by a Bernoulli(`cell_keep_prob`) / `cell_keep_prob` mask.
pub fn lstm_step<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    state: LstmVars,
    p: &LstmParams,
    cell_keep_prob: f64,
    rng: &mut R,
    active: bool,
) -> Result<LstmVars, NnError> {
    let hidden = g.value(p.wh).shape()[0];
    if g.value(p.wh).cols() != 4 * hidden || g.value(p.wx).cols() != 4 * hidden {
        return Err(NnError::ShapeMismatch(format!(
            "lstm weights for hidden size {hidden}"
        )));
    }
    let zx = g.matmul(x, p.wx)?;
    let zh = g.matmul(state.h, p.wh)?;
    let z = g.add(zx, zh)?;
    let z = g.add_row(z, p.b)?;
    let zi = g.slice_cols(z, 0, hidden)?;
    let zf = g.slice_cols(z, hidden, hidden)?;
    let zg = g.slice_cols(z, 2 * hidden, hidden)?;
    let zo = g.slice_cols(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let cand = dropout(g, cand, cell_keep_prob, rng, active)?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmVars { h, c })
}

/// Row-wise select: rows with `take_new[r]` come from `new`, others from `old`.
pub fn blend_rows(g: &mut Graph, new: Var, old: Var, take_new: &[bool]) -> Result<Var, NnError> {
    if take_new.iter().all(|&t| t) {
        return Ok(new);
    }
    let cols = g.value(new).cols();
    let m: Vec<f64> = take_new
        .iter()
        .flat_map(|&t| std::iter::repeat(if t { 1.0 } else { 0.0 }).take(cols))
        .collect();
    let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
    let a = g.mul_const(new, m)?;
    let b = g.mul_const(old, inv)?;
    g.add(a, b)
}
