//! Stacked multi-scale residual convolutions followed by a bidirectional LSTM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddedSequence;
use crate::model::{Bound, Mode, ModelConfig, ModelError, ParamStore};
use crate::nn::{blend_rows, lstm_step, Graph, LstmVars, NormStats, Tensor, Var};

/// Batch statistics observed by one batch-norm layer in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub stack: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ParamStore {
    /// Folds batch statistics into the running buffers:
    /// `running = momentum · running + (1 − momentum) · batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) -> Result<(), ModelError> {
        for u in updates {
            for (suffix, batch) in [("mean", &u.mean), ("var", &u.var)] {
                let name = format!("enc.stack{}.bn.{suffix}", u.stack);
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
        Ok(())
    }
}

/// Memory for a batch of sequences on the tape.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// `[B × T_max × 2H]`, zero past each lane's length.
    pub memory: Var,
    pub lengths: Vec<usize>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Encoder memory for a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[T × 2H]`: forward half, then backward half.
    pub memory: Tensor,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.memory.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// SMRC over rows of `x: [ΣT × d]`, each `(start, len)` segment being one
/// sequence. Returns `[ΣT × width]` and the batch statistics used.
pub fn smrc_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &Bound,
    store: &ParamStore,
    x: Var,
    segments: &[(usize, usize)],
    mode: Mode,
) -> Result<(Var, Vec<BnUpdate>), ModelError> {
    let mut h = g.conv1d(x, params.get("enc.proj.w")?, params.get("enc.proj.b")?, segments)?;
    let mut updates = Vec::new();
    for s in 0..cfg.smrc_stacks {
        let mut branches = Vec::with_capacity(cfg.smrc_kernels.len());
        for &k in &cfg.smrc_kernels {
            let w = params.get(&format!("enc.stack{s}.k{k}.w"))?;
            let b = params.get(&format!("enc.stack{s}.k{k}.b"))?;
            branches.push(g.conv1d(h, w, b, segments)?);
        }
        let cat = g.concat(&branches)?;
        let gamma = params.get(&format!("enc.stack{s}.bn.gamma"))?;
        let beta = params.get(&format!("enc.stack{s}.bn.beta"))?;
        let normed = match mode {
            Mode::Train => {
                let v = g.batch_norm(cat, gamma, beta, NormStats::Batch { eps: cfg.bn_eps })?;
                let (mean, var) = g.norm_stats(v).expect("batch norm node");
                updates.push(BnUpdate {
                    stack: s,
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                });
                v
            }
            Mode::Eval => {
                let mean = store.buffer(&format!("enc.stack{s}.bn.mean"))?;
                let var = store.buffer(&format!("enc.stack{s}.bn.var"))?;
                g.batch_norm(
                    cat,
                    gamma,
                    beta,
                    NormStats::Fixed {
                        mean: mean.data(),
                        var: var.data(),
                        eps: cfg.bn_eps,
                    },
                )?
            }
        };
        let act = g.relu(normed);
        h = g.add(act, h)?;
    }
    Ok((h, updates))
}

/// Bidirectional LSTM over the segments of `x`, assembled into padded memory.
pub fn bilstm_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &Bound,
    x: Var,
    segments: &[(usize, usize)],
) -> Result<Var, ModelError> {
    let lengths: Vec<usize> = segments.iter().map(|s| s.1).collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    let batch = segments.len();
    // the encoder has no dropout, so this generator is never drawn from
    let mut idle = ChaCha8Rng::seed_from_u64(0);
    let mut outputs = [Vec::with_capacity(t_max), Vec::with_capacity(t_max)];
    for (dir, out) in outputs.iter_mut().enumerate() {
        let p = params.lstm(if dir == 0 { "enc.fwd" } else { "enc.bwd" })?;
        let mut state = LstmVars {
            h: g.constant(Tensor::zeros(&[batch, cfg.enc_hidden])),
            c: g.constant(Tensor::zeros(&[batch, cfg.enc_hidden])),
        };
        for t in 0..t_max {
            let live: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
            let idx = segments
                .iter()
                .map(|&(start, len)| {
                    (t < len).then(|| if dir == 0 { start + t } else { start + len - 1 - t })
                })
                .collect();
            let xt = g.gather_rows(x, idx)?;
            let next = lstm_step(g, xt, state, &p, 1.0, &mut idle, false)?;
            state = LstmVars {
                h: blend_rows(g, next.h, state.h, &live)?,
                c: blend_rows(g, next.c, state.c, &live)?,
            };
            out.push(state.h);
        }
    }
    Ok(g.assemble_memory(&outputs[0], &outputs[1], &lengths)?)
}

/// Full encoder over stacked embeddings `x: [ΣT × d]`.
pub fn encode_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &Bound,
    store: &ParamStore,
    x: Var,
    segments: &[(usize, usize)],
    mode: Mode,
) -> Result<EncodedBatch, ModelError> {
    if segments.iter().any(|s| s.1 == 0) {
        return Err(ModelError::Invalid("empty input sequence".into()));
    }
    let (h, bn_updates) = smrc_graph(g, cfg, params, store, x, segments, mode)?;
    let memory = bilstm_graph(g, cfg, params, h, segments)?;
    Ok(EncodedBatch {
        memory,
        lengths: segments.iter().map(|s| s.1).collect(),
        bn_updates,
    })
}

/// SMRC output `[T × width]` for one embedded sequence.
pub fn smrc_forward(e_f: &EmbeddedSequence, store: &ParamStore, cfg: &ModelConfig, mode: Mode) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let params = store.bind(&mut g);
    let x = g.constant(e_f.vectors.clone());
    let (h, _) = smrc_graph(&mut g, cfg, &params, store, x, &[(0, e_f.len())], mode)?;
    Ok(g.value(h).clone())
}

/// Encoder memory `[T × 2H]` for one embedded sequence.
pub fn encode(e_f: &EmbeddedSequence, store: &ParamStore, cfg: &ModelConfig, mode: Mode) -> Result<EncoderOutput, ModelError> {
    let mut g = Graph::new();
    let params = store.bind(&mut g);
    let x = g.constant(e_f.vectors.clone());
    let out = encode_graph(&mut g, cfg, &params, store, x, &[(0, e_f.len())], mode)?;
    let t = e_f.len();
    let memory = g.value(out.memory).clone().reshape(&[t, cfg.memory_dim()])?;
    Ok(EncoderOutput { memory })
}
