//! Truncated-BPTT training over continuously packed minibatches.

mod checkpoint;
mod config;
mod dataset;
mod packing;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::TrainConfig;
pub use dataset::{prepare, Corpus, PrepareSummary, TrainUtterance, LEXICON_FILE, MEL_DIR, RECORDS_FILE};
pub use packing::{pack_minibatches, LaneCursor, LaneWindow, PackOrder, Packer, PackerState, WindowPlan};

use crate::decoder::{teacher_forced_loss, DecoderParams, DecoderState, StateVars};
use crate::dsp::{DspError, MelStats};
use crate::embedding::embed_graph;
use crate::encoder::encode_graph;
use crate::frontend::{encode_fixed, mix_words, EncodeMode, FrontendError, MixedSequence};
use crate::model::{Mode, ModelConfig, ModelError, ParamStore};
use crate::nn::{Graph, LstmCellState, NnError, Tensor};
use crate::rng::derived_rng;

const MIX_TAG: u64 = 0x4d49_58;
const STEP_TAG: u64 = 0x5354_4550;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: u64, dump: String },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(e.into())
    }
}

/// One TBPTT window of training data.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatchWindow {
    /// Normalized targets `[B × S × 80]`, zero past each lane's length.
    pub frames: Tensor,
    /// True when the lane starts a new utterance (or is idle).
    pub reset_flags: Vec<bool>,
    pub linguistic_refs: Vec<Option<Arc<MixedSequence>>>,
    pub lane_offsets: Vec<usize>,
    /// Valid frames per lane.
    pub lengths: Vec<usize>,
    pub utterances: Vec<Option<usize>>,
}

impl PackedBatchWindow {
    pub fn steps(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Sum of squares over every gradient, square-rooted.
pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Factor that brings `norm` down to `max_norm` (1 when already below).
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = store
            .params
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
            .collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update with gradients multiplied by `scale`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, scale: f64) -> Result<(), TrainError> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let p = store.get_mut(name)?;
            let m = self.m.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let v = self.v.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-step training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    adam_t: u64,
    packer: PackerState,
}

/// The model, optimizer, data iterator and carried recurrent state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub adam: Adam,
    pub corpus: Corpus,
    pub step: u64,
    packer: Packer,
    lane_state: DecoderState,
    lane_mixes: Vec<Option<Arc<MixedSequence>>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: Corpus) -> Result<Self, TrainError> {
        config.validate()?;
        let store = ParamStore::init(&config.model, config.seed)?;
        let adam = Adam::new(&config, &store);
        let packer = Packer::new(
            corpus.frame_counts(),
            config.batch_size,
            config.tbptt_length,
            config.seed,
            PackOrder::Cycle,
        )?;
        Ok(Self {
            lane_state: DecoderState::zeros(&config.model, config.batch_size),
            lane_mixes: vec![None; config.batch_size],
            config,
            store,
            adam,
            corpus,
            step: 0,
            packer,
        })
    }

    /// Mixed rendering of utterance `utt` on its `encounter`-th pull.
    pub fn mix_for(&self, utt: usize, encounter: u64) -> Result<MixedSequence, TrainError> {
        let mut rng = derived_rng(self.config.seed, &[MIX_TAG, utt as u64, encounter]);
        Ok(mix_words(
            &self.corpus.utterances[utt].record,
            &self.corpus.lexicon,
            self.config.p_phone,
            &mut rng,
        )?)
    }

    /// Advances the packer and assembles the next window.
    pub fn next_window(&mut self) -> Result<PackedBatchWindow, TrainError> {
        let plan = self.packer.next_window().ok_or(TrainError::EmptyCorpus)?;
        let b_total = plan.lanes.len();
        let s = plan.steps;
        let n = self.config.model.n_mels;
        let mut frames = vec![0.0; b_total * s * n];
        let mut window = PackedBatchWindow {
            frames: Tensor::zeros(&[0]),
            reset_flags: Vec::with_capacity(b_total),
            linguistic_refs: Vec::with_capacity(b_total),
            lane_offsets: Vec::with_capacity(b_total),
            lengths: Vec::with_capacity(b_total),
            utterances: Vec::with_capacity(b_total),
        };
        for (b, lane) in plan.lanes.iter().enumerate() {
            let Some(w) = lane else {
                self.lane_mixes[b] = None;
                window.reset_flags.push(true);
                window.linguistic_refs.push(None);
                window.lane_offsets.push(0);
                window.lengths.push(0);
                window.utterances.push(None);
                continue;
            };
            if w.reset || self.lane_mixes[b].is_none() {
                self.lane_mixes[b] = Some(Arc::new(self.mix_for(w.utt, w.encounter)?));
            }
            let src = &self.corpus.utterances[w.utt].frames.data()[w.offset * n..(w.offset + w.len) * n];
            frames[b * s * n..b * s * n + w.len * n].copy_from_slice(src);
            window.reset_flags.push(w.reset);
            window.linguistic_refs.push(self.lane_mixes[b].clone());
            window.lane_offsets.push(w.offset);
            window.lengths.push(w.len);
            window.utterances.push(Some(w.utt));
        }
        window.frames = Tensor::new(vec![b_total, s, n], frames)?;
        Ok(window)
    }

    /// Carried decoder state of every lane.
    pub fn lane_state(&self) -> &DecoderState {
        &self.lane_state
    }

    /// One optimizer step on `window`; gradients stay inside the window.
    pub fn train_step(&mut self, window: &PackedBatchWindow) -> Result<StepReport, TrainError> {
        let cfg = self.config.model.clone();
        let mut state = self.lane_state.clone();
        state.reset_rows(&window.reset_flags);
        let mut g = Graph::new();
        let params = self.store.bind(&mut g);
        let (loss, grads, bn_updates, final_state) = {
            let pad = MixedSequence {
                symbols: vec![0],
                mask: vec![0],
                word_spans: Vec::new(),
            };
            let seqs: Vec<&MixedSequence> = window
                .linguistic_refs
                .iter()
                .map(|r| r.as_deref().unwrap_or(&pad))
                .collect();
            let mut segments = Vec::with_capacity(seqs.len());
            let mut start = 0;
            for s in &seqs {
                segments.push((start, s.len()));
                start += s.len();
            }
            let x = embed_graph(&mut g, &params, &seqs)?;
            let enc = encode_graph(&mut g, &cfg, &params, &self.store, x, &segments, Mode::Train)?;
            let p = DecoderParams::bind(&cfg, &params)?;
            let sv = StateVars::constant(&mut g, &state);
            let mut rng = derived_rng(self.config.seed, &[STEP_TAG, self.step]);
            let out = teacher_forced_loss(
                &mut g,
                &cfg,
                &p,
                sv,
                enc.memory,
                &enc.lengths,
                &window.frames,
                &mut rng,
                Mode::Train,
            )?;
            let loss = g.value(out.loss).item();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: self.step,
                    dump: self.dump(window),
                });
            }
            let grads = params.collect(&g, &g.backward(out.loss)?);
            (loss, grads, enc.bn_updates, out.final_state.read(&g))
        };
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                dump: format!("gradient norm {norm}; {}", self.dump(window)),
            });
        }
        let scale = clip_scale(norm, self.config.clip_norm);
        self.adam.update(&mut self.store, &grads, scale)?;
        self.store.apply_bn_updates(&bn_updates, cfg.bn_momentum)?;
        self.lane_state = final_state;
        let report = StepReport {
            step: self.step,
            loss,
            grad_norm: norm,
            clip_scale: scale,
        };
        self.step += 1;
        Ok(report)
    }

    fn dump(&self, window: &PackedBatchWindow) -> String {
        let worst = self
            .store
            .params
            .iter()
            .map(|(k, t)| (k, t.norm_sq().sqrt()))
            .fold(None::<(&String, f64)>, |acc, (k, n)| match acc {
                Some((_, m)) if !(n > m) && n.is_finite() => acc,
                _ => Some((k, n)),
            });
        format!(
            "utterances {:?}, offsets {:?}, resets {:?}, largest parameter norm {:?}",
            window.utterances, window.lane_offsets, window.reset_flags, worst
        )
    }

    /// Next window plus a step on it.
    pub fn step_once(&mut self) -> Result<StepReport, TrainError> {
        let window = self.next_window()?;
        self.train_step(&window)
    }

    /// Teacher-forced MSE over whole utterances (one batch, phonemes with
    /// character backoff, batch-norm running statistics).
    pub fn evaluate(&self, utterances: &[usize], seed: u64) -> Result<f64, TrainError> {
        teacher_forced_eval(&self.store, &self.config.model, &self.corpus, utterances, seed)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, TrainError> {
        let mut tensors = BTreeMap::new();
        for (k, t) in &self.store.params {
            tensors.insert(format!("param/{k}"), t.clone());
        }
        for (k, t) in &self.store.buffers {
            tensors.insert(format!("buffer/{k}"), t.clone());
        }
        for (prefix, moments) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for (k, v) in moments {
                tensors.insert(format!("{prefix}{k}"), Tensor::vector(v.clone()));
            }
        }
        tensors.insert("mel/mean".into(), Tensor::vector(self.corpus.stats.mean.clone()));
        tensors.insert("mel/std".into(), Tensor::vector(self.corpus.stats.std.clone()));
        for (k, t) in state_tensors(&self.lane_state) {
            tensors.insert(format!("state/{k}"), t);
        }
        let state_json = serde_json::to_string(&SavedState {
            adam_t: self.adam.t,
            packer: self.packer.state().clone(),
        })
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            step: self.step,
            tensors,
            config_text: self.config.to_text(),
            state_json,
        })
    }

    /// Rebuilds a trainer that continues exactly where `ck` left off.
    pub fn resume(ck: &Checkpoint, corpus: Corpus) -> Result<Self, TrainError> {
        let config = TrainConfig::parse(&ck.config_text)?;
        let mut t = Self::new(config, corpus)?;
        let model = load_model(ck)?;
        if model.stats != t.corpus.stats {
            return Err(TrainError::Checkpoint("corpus statistics differ from the checkpoint".into()));
        }
        t.store = model.store;
        for (prefix, moments) in [("adam.m/", &mut t.adam.m), ("adam.v/", &mut t.adam.v)] {
            for (k, v) in moments.iter_mut() {
                let saved = ck.tensor(&format!("{prefix}{k}"))?;
                if saved.len() != v.len() {
                    return Err(TrainError::Checkpoint(format!("moment {k} has the wrong size")));
                }
                v.copy_from_slice(saved.data());
            }
        }
        let saved: SavedState =
            serde_json::from_str(&ck.state_json).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        t.adam.t = saved.adam_t;
        t.packer.restore(saved.packer)?;
        t.lane_state = restore_state(&t.config.model, t.config.batch_size, &ck.group("state/"))?;
        t.step = ck.step;
        Ok(t)
    }
}

fn state_tensors(s: &DecoderState) -> Vec<(String, Tensor)> {
    let a = &s.attention;
    let mut out = vec![
        ("attn.kappa".to_string(), a.kappa.clone()),
        ("attn.alpha".to_string(), a.alpha.clone()),
        ("attn.beta".to_string(), a.beta.clone()),
        ("attn.h".to_string(), a.lstm.h.clone()),
        ("attn.c".to_string(), a.lstm.c.clone()),
        ("attn.context".to_string(), a.context.clone()),
        ("prev_frame".to_string(), s.prev_frame.clone()),
    ];
    for (l, cell) in s.layers.iter().enumerate() {
        out.push((format!("dec.{l}.h"), cell.h.clone()));
        out.push((format!("dec.{l}.c"), cell.c.clone()));
    }
    out
}

fn restore_state(cfg: &ModelConfig, batch: usize, saved: &BTreeMap<String, Tensor>) -> Result<DecoderState, TrainError> {
    let mut s = DecoderState::zeros(cfg, batch);
    let take = |name: &str, like: &Tensor| -> Result<Tensor, TrainError> {
        let t = saved
            .get(name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing state tensor {name}")))?;
        if t.shape() != like.shape() {
            return Err(TrainError::Checkpoint(format!("state tensor {name} has the wrong shape")));
        }
        Ok(t.clone())
    };
    let a = &mut s.attention;
    a.kappa = take("attn.kappa", &a.kappa)?;
    a.alpha = take("attn.alpha", &a.alpha)?;
    a.beta = take("attn.beta", &a.beta)?;
    a.lstm.h = take("attn.h", &a.lstm.h)?;
    a.lstm.c = take("attn.c", &a.lstm.c)?;
    a.context = take("attn.context", &a.context)?;
    s.prev_frame = take("prev_frame", &s.prev_frame)?;
    for (l, cell) in s.layers.iter_mut().enumerate() {
        *cell = LstmCellState {
            h: take(&format!("dec.{l}.h"), &cell.h)?,
            c: take(&format!("dec.{l}.c"), &cell.c)?,
        };
    }
    Ok(s)
}

/// What synthesis needs from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stats: MelStats,
}

pub fn load_model(ck: &Checkpoint) -> Result<LoadedModel, TrainError> {
    let config = TrainConfig::parse(&ck.config_text)?.model;
    let store = ParamStore {
        params: ck.group("param/"),
        buffers: ck.group("buffer/"),
    };
    store.check_against(&config)?;
    let stats = MelStats {
        mean: ck.tensor("mel/mean")?.data().to_vec(),
        std: ck.tensor("mel/std")?.data().to_vec(),
    };
    if stats.mean.len() != config.n_mels || stats.std.len() != config.n_mels {
        return Err(TrainError::Checkpoint("mel statistics have the wrong size".into()));
    }
    Ok(LoadedModel { config, store, stats })
}

/// Teacher-forced MSE of `store` over whole utterances of `corpus`, batched
/// together with zero padding (matching the training loss).
pub fn teacher_forced_eval(
    store: &ParamStore,
    cfg: &ModelConfig,
    corpus: &Corpus,
    utterances: &[usize],
    seed: u64,
) -> Result<f64, TrainError> {
    if utterances.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let n = cfg.n_mels;
    let seqs = utterances
        .iter()
        .map(|&u| encode_fixed(&corpus.utterances[u].record, &corpus.lexicon, EncodeMode::Pwcb))
        .collect::<Result<Vec<_>, _>>()?;
    let steps = utterances.iter().map(|&u| corpus.utterances[u].n_frames()).max().unwrap_or(0);
    let mut frames = vec![0.0; utterances.len() * steps * n];
    for (b, &u) in utterances.iter().enumerate() {
        let src = corpus.utterances[u].frames.data();
        frames[b * steps * n..b * steps * n + src.len()].copy_from_slice(src);
    }
    let targets = Tensor::new(vec![utterances.len(), steps, n], frames)?;
    let mut g = Graph::new();
    let params = store.bind(&mut g);
    let refs: Vec<&MixedSequence> = seqs.iter().collect();
    let mut segments = Vec::new();
    let mut start = 0;
    for s in &refs {
        segments.push((start, s.len()));
        start += s.len();
    }
    let x = embed_graph(&mut g, &params, &refs)?;
    let enc = encode_graph(&mut g, cfg, &params, store, x, &segments, Mode::Eval)?;
    let p = DecoderParams::bind(cfg, &params)?;
    let sv = StateVars::constant(&mut g, &DecoderState::zeros(cfg, utterances.len()));
    let mut rng = derived_rng(seed, &[STEP_TAG]);
    let out = teacher_forced_loss(&mut g, cfg, &p, sv, enc.memory, &enc.lengths, &targets, &mut rng, Mode::Eval)?;
    Ok(g.value(out.loss).item())
}

/// Runs `config.steps` training steps, writing one JSON line per step to
/// `log` and handing a checkpoint to `on_checkpoint` every
/// `config.checkpoint_every` steps and at the end.
pub fn train_loop(
    config: TrainConfig,
    corpus: Corpus,
    log: &mut dyn Write,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<(), TrainError>,
) -> Result<Trainer, TrainError> {
    let trainer = Trainer::new(config, corpus)?;
    continue_training(trainer, log, on_checkpoint)
}

/// Like [`train_loop`] for an existing (possibly resumed) trainer, running
/// until `trainer.config.steps` steps have been taken in total.
pub fn continue_training(
    mut trainer: Trainer,
    log: &mut dyn Write,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<(), TrainError>,
) -> Result<Trainer, TrainError> {
    let start = Instant::now();
    let mut running: Option<f64> = None;
    let every = trainer.config.checkpoint_every.max(1);
    while trainer.step < trainer.config.steps {
        let r = trainer.step_once()?;
        let avg = running.map_or(r.loss, |a| 0.98 * a + 0.02 * r.loss);
        running = Some(avg);
        let line = serde_json::json!({
            "step": r.step + 1,
            "loss": r.loss,
            "running_loss": avg,
            "grad_norm": r.grad_norm,
            "wall_time": start.elapsed().as_secs_f64(),
        });
        writeln!(log, "{line}")?;
        if trainer.step % every == 0 || trainer.step == trainer.config.steps {
            on_checkpoint(&trainer.checkpoint()?)?;
        }
    }
    Ok(trainer)
}
