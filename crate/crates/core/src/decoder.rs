//! Pre-net, Gaussian-mixture attention and the skip-connected LSTM decoder.

use rand::Rng;

use crate::frontend::MixedSequence;
use crate::model::{Bound, Mode, ModelConfig, ModelError, ParamStore};
use crate::nn::{dropout, linear, lstm_step, Graph, LstmCellState, LstmParams, LstmVars, Tensor, Var};

/// Attention mixture parameters and the attention LSTM state, per lane.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    /// Component means in symbol positions, `[B × K]`.
    pub kappa: Tensor,
    pub alpha: Tensor,
    pub beta: Tensor,
    pub lstm: LstmCellState,
    /// Previous context vector, `[B × 2H]`.
    pub context: Tensor,
}

/// Everything carried from one decode step (or TBPTT window) to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub attention: AttentionState,
    pub layers: Vec<LstmCellState>,
    /// `[B × n_mels]`.
    pub prev_frame: Tensor,
}

impl DecoderState {
    pub fn zeros(cfg: &ModelConfig, batch: usize) -> Self {
        let k = cfg.num_mixes;
        Self {
            attention: AttentionState {
                kappa: Tensor::zeros(&[batch, k]),
                alpha: Tensor::from_fn(&[batch, k], |_| 1.0),
                beta: Tensor::from_fn(&[batch, k], |_| 1.0),
                lstm: LstmCellState::zeros(batch, cfg.attn_hidden),
                context: Tensor::zeros(&[batch, cfg.memory_dim()]),
            },
            layers: (0..cfg.dec_layers)
                .map(|_| LstmCellState::zeros(batch, cfg.dec_hidden))
                .collect(),
            prev_frame: Tensor::zeros(&[batch, cfg.n_mels]),
        }
    }

    pub fn batch(&self) -> usize {
        self.prev_frame.rows()
    }

    /// Zeroes the lanes flagged in `reset` (mixture weights back to one).
    pub fn reset_rows(&mut self, reset: &[bool]) {
        let a = &mut self.attention;
        a.lstm.reset_rows(reset);
        for t in [&mut a.kappa, &mut a.context, &mut self.prev_frame] {
            zero_rows(t, reset, 0.0);
        }
        for t in [&mut a.alpha, &mut a.beta] {
            zero_rows(t, reset, 1.0);
        }
        for l in &mut self.layers {
            l.reset_rows(reset);
        }
    }

    /// Squared norm of all recurrent quantities of lane `b`.
    pub fn lane_norm_sq(&self, b: usize) -> f64 {
        let a = &self.attention;
        let mut tensors = vec![&a.kappa, &a.context, &a.lstm.h, &a.lstm.c, &self.prev_frame];
        for l in &self.layers {
            tensors.push(&l.h);
            tensors.push(&l.c);
        }
        tensors.iter().map(|t| t.row(b).iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn is_finite(&self) -> bool {
        let a = &self.attention;
        a.kappa.all_finite()
            && a.context.all_finite()
            && a.lstm.is_finite()
            && self.layers.iter().all(LstmCellState::is_finite)
            && self.prev_frame.all_finite()
    }
}

fn zero_rows(t: &mut Tensor, reset: &[bool], value: f64) {
    let cols = t.cols();
    for (r, &flag) in reset.iter().enumerate() {
        if flag {
            t.data_mut()[r * cols..(r + 1) * cols].fill(value);
        }
    }
}

/// Tape handles for the decoder parameters.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub prenet: Vec<(Var, Var)>,
    pub attn_lstm: LstmParams,
    pub attn_out: (Var, Var),
    pub layers: Vec<LstmParams>,
    pub proj: (Var, Var),
}

impl DecoderParams {
    pub fn bind(cfg: &ModelConfig, params: &Bound) -> Result<Self, ModelError> {
        Ok(Self {
            prenet: (0..cfg.prenet_layers)
                .map(|l| Ok((params.get(&format!("prenet.{l}.w"))?, params.get(&format!("prenet.{l}.b"))?)))
                .collect::<Result<_, ModelError>>()?,
            attn_lstm: params.lstm("attn.lstm")?,
            attn_out: (params.get("attn.out.w")?, params.get("attn.out.b")?),
            layers: (0..cfg.dec_layers)
                .map(|l| params.lstm(&format!("dec.{l}")))
                .collect::<Result<_, ModelError>>()?,
            proj: (params.get("proj.w")?, params.get("proj.b")?),
        })
    }
}

/// Decoder state as tape nodes.
#[derive(Clone, Debug)]
pub struct StateVars {
    pub kappa: Var,
    pub alpha: Var,
    pub beta: Var,
    pub attn: LstmVars,
    pub context: Var,
    pub layers: Vec<LstmVars>,
    pub prev_frame: Var,
}

impl StateVars {
    /// Places a carried state on the tape as constants (no gradient crosses
    /// into the previous window).
    pub fn constant(g: &mut Graph, s: &DecoderState) -> Self {
        let a = &s.attention;
        Self {
            kappa: g.constant(a.kappa.clone()),
            alpha: g.constant(a.alpha.clone()),
            beta: g.constant(a.beta.clone()),
            attn: LstmVars {
                h: g.constant(a.lstm.h.clone()),
                c: g.constant(a.lstm.c.clone()),
            },
            context: g.constant(a.context.clone()),
            layers: s
                .layers
                .iter()
                .map(|l| LstmVars {
                    h: g.constant(l.h.clone()),
                    c: g.constant(l.c.clone()),
                })
                .collect(),
            prev_frame: g.constant(s.prev_frame.clone()),
        }
    }

    pub fn read(&self, g: &Graph) -> DecoderState {
        let cell = |v: &LstmVars| LstmCellState {
            h: g.value(v.h).clone(),
            c: g.value(v.c).clone(),
        };
        DecoderState {
            attention: AttentionState {
                kappa: g.value(self.kappa).clone(),
                alpha: g.value(self.alpha).clone(),
                beta: g.value(self.beta).clone(),
                lstm: cell(&self.attn),
                context: g.value(self.context).clone(),
            },
            layers: self.layers.iter().map(cell).collect(),
            prev_frame: g.value(self.prev_frame).clone(),
        }
    }
}

/// Two (or more) linear layers, each followed by dropout that stays on at
/// inference.
pub fn prenet<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &DecoderParams,
    frame: Var,
    keep: f64,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let mut h = frame;
    for &(w, b) in &p.prenet {
        h = linear(g, h, w, b)?;
        h = dropout(g, h, keep, rng, true)?;
    }
    Ok(h)
}

/// Output of one attention step.
#[derive(Clone, Debug)]
pub struct AttentionStep {
    pub context: Var,
    pub kappa: Var,
    pub alpha: Var,
    pub beta: Var,
    pub lstm: LstmVars,
}

/// Attention LSTM over `[pre-net; previous context]`, then a Gaussian
/// mixture over memory positions whose means advance by a softplus step.
#[allow(clippy::too_many_arguments)]
pub fn gm_attention_step<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &DecoderParams,
    prenet_out: Var,
    state: &StateVars,
    memory: Var,
    lengths: &[usize],
    rng: &mut R,
) -> Result<AttentionStep, ModelError> {
    let k = cfg.num_mixes;
    let input = g.concat(&[prenet_out, state.context])?;
    let lstm = lstm_step(g, input, state.attn, &p.attn_lstm, 1.0, rng, false)?;
    let raw = linear(g, lstm.h, p.attn_out.0, p.attn_out.1)?;
    let a_hat = g.slice_cols(raw, 0, k)?;
    let b_hat = g.slice_cols(raw, k, k)?;
    let k_hat = g.slice_cols(raw, 2 * k, k)?;
    let alpha = g.exp(a_hat);
    let beta = g.exp(b_hat);
    let step = g.softplus(k_hat);
    let kappa = g.add(state.kappa, step)?;
    let context = g.gm_attention(alpha, beta, kappa, memory, lengths)?;
    Ok(AttentionStep {
        context,
        kappa,
        alpha,
        beta,
        lstm,
    })
}

/// One decoder step from `state.prev_frame`. The returned state's
/// `prev_frame` is the prediction, as used in free-running generation.
#[allow(clippy::too_many_arguments)]
pub fn decode_step<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &DecoderParams,
    state: &StateVars,
    memory: Var,
    lengths: &[usize],
    rng: &mut R,
    mode: Mode,
) -> Result<(Var, StateVars, AttentionStep), ModelError> {
    let pre = prenet(g, p, state.prev_frame, cfg.prenet_keep, rng)?;
    let att = gm_attention_step(g, cfg, p, pre, state, memory, lengths, rng)?;
    let train = mode == Mode::Train;
    let mut layers = Vec::with_capacity(p.layers.len());
    let mut below: Option<Var> = None;
    for (lp, st) in p.layers.iter().zip(&state.layers) {
        let input = match below {
            None => g.concat(&[pre, att.context])?,
            Some(h) => g.concat(&[pre, att.context, h])?,
        };
        let next = lstm_step(g, input, *st, lp, cfg.cell_keep, rng, train)?;
        below = Some(next.h);
        layers.push(next);
    }
    let top = below.expect("at least one decoder layer");
    let frame = linear(g, top, p.proj.0, p.proj.1)?;
    let next = StateVars {
        kappa: att.kappa,
        alpha: att.alpha,
        beta: att.beta,
        attn: att.lstm,
        context: att.context,
        layers,
        prev_frame: frame,
    };
    Ok((frame, next, att))
}

/// Result of a teacher-forced window.
#[derive(Debug)]
pub struct WindowOutput {
    pub loss: Var,
    /// `[B × S × n_mels]`.
    pub predictions: Var,
    /// State after the window, with `prev_frame` set to the last target frame.
    pub final_state: StateVars,
    /// Mixture means after each step, `S` tensors of `[B × K]`.
    pub kappas: Vec<Tensor>,
}

/// Steps the decoder over `targets: [B × S × n_mels]`, feeding the previous
/// ground-truth frame (the carried one at the first step) through the
/// pre-net, and returns the mean squared error over every value.
#[allow(clippy::too_many_arguments)]
pub fn teacher_forced_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &DecoderParams,
    state: StateVars,
    memory: Var,
    lengths: &[usize],
    targets: &Tensor,
    rng: &mut R,
    mode: Mode,
) -> Result<WindowOutput, ModelError> {
    let shape = targets.shape();
    let batch = g.value(state.prev_frame).rows();
    if shape.len() != 3 || shape[0] != batch || shape[2] != cfg.n_mels || shape[1] == 0 {
        return Err(ModelError::Invalid(format!("targets of shape {shape:?} for batch {batch}")));
    }
    let steps = shape[1];
    let n = cfg.n_mels;
    let frame_at = |s: usize| -> Tensor {
        let mut out = Vec::with_capacity(batch * n);
        for b in 0..batch {
            let off = (b * steps + s) * n;
            out.extend_from_slice(&targets.data()[off..off + n]);
        }
        Tensor::new(vec![batch, n], out).expect("frame shape")
    };
    let mut state = state;
    let mut preds = Vec::with_capacity(steps);
    let mut kappas = Vec::with_capacity(steps);
    for s in 0..steps {
        if s > 0 {
            state.prev_frame = g.constant(frame_at(s - 1));
        }
        let (pred, next, _) = decode_step(g, cfg, p, &state, memory, lengths, rng, mode)?;
        kappas.push(g.value(next.kappa).clone());
        preds.push(pred);
        state = next;
    }
    state.prev_frame = g.constant(frame_at(steps - 1));
    let predictions = g.stack_steps(&preds)?;
    let loss = g.mse(predictions, targets)?;
    Ok(WindowOutput {
        loss,
        predictions,
        final_state: state,
        kappas,
    })
}

/// A free-running decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// `[N × n_mels]` in the model's (normalized) output domain.
    pub frames: Tensor,
    /// Mixture means after each step.
    pub kappas: Vec<Vec<f64>>,
    /// Whether the attention stop rule fired before `max_frames`.
    pub stopped: bool,
}

/// Attention must sit past the last symbol by this many positions...
pub const STOP_MARGIN: f64 = 2.0;
/// ...for this many consecutive steps before generation stops.
pub const STOP_PATIENCE: usize = 5;

/// Feeds predictions back through the pre-net (dropout on) until the
/// α-weighted mean of κ passes the end of the sequence or `max_frames`.
pub fn generate<R: Rng + ?Sized>(
    seq: &MixedSequence,
    store: &ParamStore,
    cfg: &ModelConfig,
    max_frames: usize,
    rng: &mut R,
) -> Result<Generation, ModelError> {
    if max_frames == 0 {
        return Err(ModelError::Invalid("max_frames must be at least 1".into()));
    }
    let mut g = Graph::new();
    let params = store.bind(&mut g);
    let x = crate::embedding::embed_graph(&mut g, &params, &[seq])?;
    let enc = crate::encoder::encode_graph(&mut g, cfg, &params, store, x, &[(0, seq.len())], Mode::Eval)?;
    let p = DecoderParams::bind(cfg, &params)?;
    let mut state = StateVars::constant(&mut g, &DecoderState::zeros(cfg, 1));
    let end = seq.len() as f64 - 1.0 + STOP_MARGIN;
    let mut frames = Vec::new();
    let mut kappas = Vec::new();
    let mut past_end = 0;
    let mut stopped = false;
    for step in 0..max_frames {
        let (pred, next, _) = decode_step(&mut g, cfg, &p, &state, enc.memory, &enc.lengths, rng, Mode::Eval)?;
        let frame = g.value(pred);
        if !frame.all_finite() {
            return Err(ModelError::NonFiniteFrame(step));
        }
        frames.extend_from_slice(frame.data());
        let kappa = g.value(next.kappa).data().to_vec();
        let alpha = g.value(next.alpha).data();
        let weight: f64 = alpha.iter().sum();
        let mean = alpha.iter().zip(&kappa).map(|(a, k)| a * k).sum::<f64>() / weight;
        kappas.push(kappa);
        state = next;
        past_end = if mean > end { past_end + 1 } else { 0 };
        if past_end >= STOP_PATIENCE {
            stopped = true;
            break;
        }
    }
    let n = frames.len() / cfg.n_mels;
    Ok(Generation {
        frames: Tensor::new(vec![n, cfg.n_mels], frames)?,
        kappas,
        stopped,
    })
}
