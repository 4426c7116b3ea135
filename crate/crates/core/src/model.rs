//! Model configuration and the named parameter store shared by the
//! embedding, encoder and decoder.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::frontend::FrontendError;
use crate::nn::init::{orthonormal, truncated_normal};
use crate::nn::{Gradients, Graph, LstmParams, NnError, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {got:?}, expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("non-finite frame at step {0}")]
    NonFiniteFrame(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Architecture sizes and regularization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Output channels of each convolution branch.
    pub smrc_channels: usize,
    pub smrc_stacks: usize,
    pub smrc_kernels: Vec<usize>,
    /// Units per direction of the encoder LSTM.
    pub enc_hidden: usize,
    pub prenet_hidden: usize,
    pub prenet_layers: usize,
    pub prenet_keep: f64,
    pub attn_hidden: usize,
    pub num_mixes: usize,
    pub dec_hidden: usize,
    pub dec_layers: usize,
    pub cell_keep: f64,
    pub n_mels: usize,
    pub init_scale: f64,
    /// Bias of the mean-step pre-activation at initialization.
    pub attn_step_bias: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// Sizes from the published architecture table.
    pub fn paper() -> Self {
        Self {
            vocab_size: crate::frontend::VOCAB_SIZE,
            embed_dim: 15,
            smrc_channels: 128,
            smrc_stacks: 3,
            smrc_kernels: vec![1, 3, 5],
            enc_hidden: 128,
            prenet_hidden: 128,
            prenet_layers: 2,
            prenet_keep: 0.5,
            attn_hidden: 512,
            num_mixes: 10,
            dec_hidden: 512,
            dec_layers: 2,
            cell_keep: 0.925,
            n_mels: crate::dsp::N_MELS,
            init_scale: 0.075,
            attn_step_bias: -2.25,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    /// Desk-scale variant: every hidden size divided by four.
    pub fn desk() -> Self {
        Self {
            smrc_channels: 32,
            enc_hidden: 32,
            prenet_hidden: 32,
            attn_hidden: 128,
            dec_hidden: 128,
            ..Self::paper()
        }
    }

    /// A very small model for tests.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 4,
            smrc_channels: 3,
            smrc_stacks: 1,
            enc_hidden: 3,
            prenet_hidden: 4,
            attn_hidden: 5,
            num_mixes: 2,
            dec_hidden: 4,
            ..Self::paper()
        }
    }

    pub fn smrc_width(&self) -> usize {
        self.smrc_channels * self.smrc_kernels.len()
    }

    pub fn memory_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("smrc_channels", self.smrc_channels),
            ("enc_hidden", self.enc_hidden),
            ("prenet_hidden", self.prenet_hidden),
            ("prenet_layers", self.prenet_layers),
            ("attn_hidden", self.attn_hidden),
            ("num_mixes", self.num_mixes),
            ("dec_hidden", self.dec_hidden),
            ("dec_layers", self.dec_layers),
            ("n_mels", self.n_mels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Invalid(format!("{name} must be positive")));
        }
        if self.smrc_kernels.is_empty() || self.smrc_kernels.iter().any(|k| k % 2 == 0) {
            return Err(ModelError::Invalid("smrc kernels must be odd".into()));
        }
        for (name, p) in [("prenet_keep", self.prenet_keep), ("cell_keep", self.cell_keep)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(ModelError::Invalid(format!("{name} must be in (0, 1]")));
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Named parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Fresh parameters for `config`, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::default();
        let c = config;
        let v = c.vocab_size;
        let d = c.embed_dim;
        store.put("embed.char", truncated_normal(&[v, d], 1.0 / (v as f64).sqrt(), &mut rng));
        store.put("embed.phone", truncated_normal(&[v, d], 1.0 / (v as f64).sqrt(), &mut rng));
        store.put("embed.mask", truncated_normal(&[2, d], 1.0 / 2f64.sqrt(), &mut rng));

        let width = c.smrc_width();
        store.put("enc.proj.w", orthonormal(&[1, d, width], &mut rng));
        store.put("enc.proj.b", Tensor::zeros(&[width]));
        for s in 0..c.smrc_stacks {
            for &k in &c.smrc_kernels {
                store.put(&format!("enc.stack{s}.k{k}.w"), orthonormal(&[k, width, c.smrc_channels], &mut rng));
                store.put(&format!("enc.stack{s}.k{k}.b"), Tensor::zeros(&[c.smrc_channels]));
            }
            store.put(&format!("enc.stack{s}.bn.gamma"), Tensor::from_fn(&[width], |_| 1.0));
            store.put(&format!("enc.stack{s}.bn.beta"), Tensor::zeros(&[width]));
            store
                .buffers
                .insert(format!("enc.stack{s}.bn.mean"), Tensor::zeros(&[width]));
            store
                .buffers
                .insert(format!("enc.stack{s}.bn.var"), Tensor::from_fn(&[width], |_| 1.0));
        }
        for dir in ["fwd", "bwd"] {
            store.put_lstm(&format!("enc.{dir}"), width, c.enc_hidden, c.init_scale, &mut rng);
        }

        let mut input = c.n_mels;
        for l in 0..c.prenet_layers {
            store.put(&format!("prenet.{l}.w"), orthonormal(&[input, c.prenet_hidden], &mut rng));
            store.put(&format!("prenet.{l}.b"), Tensor::zeros(&[c.prenet_hidden]));
            input = c.prenet_hidden;
        }
        let mem = c.memory_dim();
        store.put_lstm("attn.lstm", c.prenet_hidden + mem, c.attn_hidden, c.init_scale, &mut rng);
        store.put(
            "attn.out.w",
            truncated_normal(&[c.attn_hidden, 3 * c.num_mixes], c.init_scale, &mut rng),
        );
        let k = c.num_mixes;
        store.put(
            "attn.out.b",
            Tensor::from_fn(&[3 * k], |i| if i >= 2 * k { c.attn_step_bias } else { 0.0 }),
        );
        for l in 0..c.dec_layers {
            let input = c.prenet_hidden + mem + if l > 0 { c.dec_hidden } else { 0 };
            store.put_lstm(&format!("dec.{l}"), input, c.dec_hidden, c.init_scale, &mut rng);
        }
        store.put("proj.w", truncated_normal(&[c.dec_hidden, c.n_mels], c.init_scale, &mut rng));
        store.put("proj.b", Tensor::zeros(&[c.n_mels]));
        Ok(store)
    }

    fn put(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    fn put_lstm(&mut self, prefix: &str, input: usize, hidden: usize, scale: f64, rng: &mut ChaCha8Rng) {
        self.put(&format!("{prefix}.wx"), truncated_normal(&[input, 4 * hidden], scale, rng));
        self.put(&format!("{prefix}.wh"), truncated_normal(&[hidden, 4 * hidden], scale, rng));
        self.put(&format!("{prefix}.b"), Tensor::zeros(&[4 * hidden]));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.buffers
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks that every tensor expected by `config` exists with the right shape.
    pub fn check_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let reference = Self::init(config, 0)?;
        for (group, mine) in [(&reference.params, &self.params), (&reference.buffers, &self.buffers)] {
            for (name, want) in group {
                let got = mine.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
                if got.shape() != want.shape() {
                    return Err(ModelError::ParamShape {
                        name: name.clone(),
                        got: got.shape().to_vec(),
                        want: want.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(name, t)| (name.clone(), g.param(t.clone())))
                .collect(),
        }
    }
}

/// Tape handles for the parameters of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles for externally placed variables, e.g. when every parameter
    /// is a perturbation input of a gradient check.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn lstm(&self, prefix: &str) -> Result<LstmParams, ModelError> {
        Ok(LstmParams {
            wx: self.get(&format!("{prefix}.wx"))?,
            wh: self.get(&format!("{prefix}.wh"))?,
            b: self.get(&format!("{prefix}.b"))?,
        })
    }

    /// Gradients by parameter name; parameters the loss did not reach get zeros.
    pub fn collect(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, g.value(v).len())))
            .collect()
    }
}

/// Whether dropout (other than the always-on pre-net) and batch statistics
/// are in training mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_complete() {
        let cfg = ModelConfig::tiny();
        let a = ParamStore::init(&cfg, 7).unwrap();
        let b = ParamStore::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ParamStore::init(&cfg, 8).unwrap());
        a.check_against(&cfg).unwrap();
        assert!(a.check_against(&ModelConfig::desk()).is_err());
    }

    #[test]
    fn paper_sizes() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.smrc_width(), 384);
        assert_eq!(cfg.memory_dim(), 256);
        let desk = ModelConfig::desk();
        assert_eq!(desk.attn_hidden * 4, cfg.attn_hidden);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = ModelConfig::tiny();
        cfg.smrc_kernels = vec![2];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.cell_keep = 0.0;
        assert!(cfg.validate().is_err());
    }
}
