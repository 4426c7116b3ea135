//! Log-mel to waveform conversion: L-BFGS over the waveform, Griffin-Lim
//! phase reconstruction, and the two-stage pipeline.

mod bench;
mod lbfgs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rustfft::num_complex::Complex64;

pub use bench::{bench_strtf, paper_methods, paper_reference_rows, BenchReport, BENCH_GL_ITERS, PAPER_STRTF};
pub use lbfgs::{minimize, LbfgsOptions, LbfgsOutcome};

use crate::dsp::{DspError, MelFrontend, MelSpectrogram, Waveform, LOG_FLOOR};
use crate::nn::{Graph, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum InversionError {
    #[error("spectrogram has {frames} frames; at least one is needed")]
    TooShort { frames: usize },
    #[error("magnitudes must be finite and non-negative")]
    BadMagnitude,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("bad method {0:?}")]
    BadMethod(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Which inversion to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Lbfgs,
    GriffinLim,
    LbfgsThenGl,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionConfig {
    pub method: Method,
    pub lbfgs_iters: usize,
    pub gl_iters: usize,
    pub history: usize,
    pub seed: u64,
}

impl InversionConfig {
    pub fn lbfgs(iters: usize) -> Self {
        Self {
            method: Method::Lbfgs,
            lbfgs_iters: iters,
            ..Self::default()
        }
    }

    pub fn griffin_lim(iters: usize) -> Self {
        Self {
            method: Method::GriffinLim,
            gl_iters: iters,
            ..Self::default()
        }
    }

    pub fn pipeline(lbfgs_iters: usize, gl_iters: usize) -> Self {
        Self {
            method: Method::LbfgsThenGl,
            lbfgs_iters,
            gl_iters,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Row label in the style of the published compute table.
    pub fn label(&self) -> String {
        match self.method {
            Method::Lbfgs => format!("{} L-BFGS", self.lbfgs_iters),
            Method::GriffinLim => "Modified Griffin-Lim".to_string(),
            Method::LbfgsThenGl => format!("{} L + GL", self.lbfgs_iters),
        }
    }

    /// Parses `lbfgs:N`, `gl:N` or `lbfgs+gl:N:M`.
    pub fn parse(spec: &str) -> Result<Self, InversionError> {
        let bad = || InversionError::BadMethod(spec.to_string());
        let parts: Vec<&str> = spec.split(':').collect();
        let num = |s: &str| s.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(bad);
        match parts[..] {
            ["lbfgs", n] => Ok(Self::lbfgs(num(n)?)),
            ["gl", n] => Ok(Self::griffin_lim(num(n)?)),
            ["lbfgs+gl", n, m] => Ok(Self::pipeline(num(n)?, num(m)?)),
            _ => Err(bad()),
        }
    }

    /// Inverse of [`InversionConfig::parse`].
    pub fn spec(&self) -> String {
        match self.method {
            Method::Lbfgs => format!("lbfgs:{}", self.lbfgs_iters),
            Method::GriffinLim => format!("gl:{}", self.gl_iters),
            Method::LbfgsThenGl => format!("lbfgs+gl:{}:{}", self.lbfgs_iters, self.gl_iters),
        }
    }
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            method: Method::LbfgsThenGl,
            lbfgs_iters: 100,
            gl_iters: 100,
            history: 10,
            seed: 0,
        }
    }
}

/// Result of [`lbfgs_invert`].
#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsResult {
    pub waveform: Waveform,
    pub iterations: usize,
    /// Log-mel MSE at the start and after each accepted step.
    pub losses: Vec<f64>,
    /// The line search gave up before the iteration budget was spent.
    pub line_search_warning: bool,
}

fn raw_frames(target: &MelSpectrogram) -> Result<Tensor, InversionError> {
    let raw = target.denormalized()?;
    if raw.n_frames() == 0 {
        return Err(InversionError::TooShort { frames: 0 });
    }
    Ok(raw.frames)
}

/// Log-mel MSE of a waveform against raw log-mel `target`, with gradient.
pub fn logmel_loss(front: &MelFrontend, samples: &[f64], target: &Tensor) -> Result<(f64, Vec<f64>), InversionError> {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(samples.to_vec()));
    let lm = front.logmel_graph(&mut g, x)?;
    let loss = g.mse(lm, target).map_err(DspError::from)?;
    let grads = g.backward(loss).map_err(DspError::from)?;
    Ok((g.value(loss).item(), grads.get_or_zeros(x, samples.len())))
}

/// Log-mel MSE between a waveform and a raw log-mel target of equal
/// frame count (extra trailing frames on either side are ignored).
pub fn logmel_mse(w: &Waveform, target: &MelSpectrogram) -> Result<f64, InversionError> {
    let got = MelFrontend::new().logmel(w, false, None)?.frames;
    let want = raw_frames(target)?;
    let n = got.len().min(want.len());
    if n == 0 {
        return Err(InversionError::TooShort { frames: 0 });
    }
    Ok(got.data()[..n]
        .iter()
        .zip(&want.data()[..n])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64)
}

fn clip(samples: Vec<f64>) -> Waveform {
    Waveform::new(samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

/// Optimizes a randomly initialized waveform (`N(0, 1e-3²)` samples) so its
/// log-mel matches `target` in mean squared error.
pub fn lbfgs_invert(target: &MelSpectrogram, iters: usize, config: &InversionConfig) -> Result<LbfgsResult, InversionError> {
    let frames = raw_frames(target)?;
    let front = MelFrontend::new();
    let len = front.plan().signal_len(frames.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let x0: Vec<f64> = (0..len).map(|_| rng.sample(normal)).collect();
    let opts = LbfgsOptions {
        iters,
        memory: config.history.max(1),
        ..Default::default()
    };
    let mut failure = None;
    let out = minimize(
        |x| match logmel_loss(&front, x, &frames) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                (f64::NAN, vec![0.0; x.len()])
            }
        },
        x0,
        &opts,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    if !out.losses.last().is_some_and(|l| l.is_finite()) {
        return Err(InversionError::NonFiniteLoss);
    }
    if out.line_search_failed {
        log::warn!("l-bfgs line search failed after {} iterations", out.iterations);
    }
    Ok(LbfgsResult {
        waveform: clip(out.x),
        iterations: out.iterations,
        losses: out.losses,
        line_search_warning: out.line_search_failed,
    })
}

/// Starting phase for [`griffin_lim`].
#[derive(Clone, Debug)]
pub enum InitPhase<'a> {
    /// Uniform random phases from a seed.
    Random(u64),
    /// Phases of the STFT of a waveform.
    FromWaveform(&'a Waveform),
    /// Phases of given complex spectra (`frames × bins`).
    FromSpectra(&'a [Complex64]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GriffinLimResult {
    pub waveform: Waveform,
    /// `‖|STFT(w_i)| − target‖_F / ‖target‖_F` after each iteration.
    pub convergence: Vec<f64>,
}

/// Magnitude-substitution Griffin-Lim with least-squares overlap-add.
///
/// Each iteration resynthesizes the current complex spectrogram, takes its
/// STFT, and keeps only the phases, restoring `mag_target` magnitudes.
pub fn griffin_lim(mag_target: &Tensor, iters: usize, init: InitPhase<'_>) -> Result<GriffinLimResult, InversionError> {
    let front = MelFrontend::new();
    let plan = front.plan();
    let bins = plan.bins();
    let frames = mag_target.rows();
    if mag_target.cols() != bins || mag_target.is_empty() {
        return Err(InversionError::TooShort { frames: 0 });
    }
    let mag = mag_target.data();
    if mag.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(InversionError::BadMagnitude);
    }
    let mut phase: Vec<Complex64> = match init {
        InitPhase::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..mag.len())
                .map(|_| Complex64::from_polar(1.0, rng.gen::<f64>() * std::f64::consts::TAU))
                .collect()
        }
        InitPhase::FromWaveform(w) => unit_phases(&plan.spectra(&w.samples)),
        InitPhase::FromSpectra(s) => unit_phases(s),
    };
    if phase.len() < mag.len() {
        return Err(InversionError::TooShort { frames: phase.len() / bins });
    }
    phase.truncate(mag.len());
    let norm = mag.iter().map(|m| m * m).sum::<f64>().sqrt();
    let mut spectra: Vec<Complex64> = mag.iter().zip(&phase).map(|(m, p)| p * *m).collect();
    let mut signal = plan.istft(&spectra);
    let mut convergence = Vec::with_capacity(iters);
    for i in 0..iters {
        if i > 0 {
            signal = plan.istft(&spectra);
        }
        let rebuilt = plan.spectra(&signal);
        let mut err = 0.0;
        for ((s, r), m) in spectra.iter_mut().zip(&rebuilt).zip(mag) {
            let a = r.norm();
            err += (a - m) * (a - m);
            *s = if a > 0.0 { r * (m / a) } else { Complex64::new(*m, 0.0) };
        }
        convergence.push(if norm > 0.0 { err.sqrt() / norm } else { 0.0 });
    }
    debug_assert_eq!(signal.len(), plan.signal_len(frames));
    Ok(GriffinLimResult {
        waveform: clip(signal),
        convergence,
    })
}

fn unit_phases(s: &[Complex64]) -> Vec<Complex64> {
    s.iter()
        .map(|c| {
            let a = c.norm();
            if a > 0.0 {
                c / a
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
        .collect()
}

/// Non-negative linear magnitudes `[N × 257]` whose mel energies match
/// `exp(target)`, by multiplicative ratio updates starting from `init`
/// (or from the transposed filterbank when `None`).
pub fn mel_to_magnitude(target: &MelSpectrogram, init: Option<&Tensor>, iters: usize) -> Result<Tensor, InversionError> {
    let frames = raw_frames(target)?;
    let front = MelFrontend::new();
    let basis = front.basis();
    let (n_mels, bins) = (basis.rows(), basis.cols());
    let n = frames.rows();
    let energy: Vec<f64> = frames.data().iter().map(|v| v.exp()).collect();
    let colsum: Vec<f64> = (0..bins)
        .map(|k| (0..n_mels).map(|m| basis.data()[m * bins + k]).sum())
        .collect();
    let mut mag = match init {
        Some(t) if t.shape() == [n, bins] => t.clone(),
        Some(_) => return Err(InversionError::BadMagnitude),
        None => {
            let mut m = Tensor::zeros(&[n, bins]);
            for f in 0..n {
                for k in 0..bins {
                    if colsum[k] > 0.0 {
                        let s: f64 = (0..n_mels)
                            .map(|b| basis.data()[b * bins + k] * energy[f * n_mels + b])
                            .sum();
                        m.data_mut()[f * bins + k] = s / colsum[k];
                    }
                }
            }
            m
        }
    };
    for _ in 0..iters {
        let est = front.mel_energies(&mag);
        let d = mag.data_mut();
        for f in 0..n {
            let ratio: Vec<f64> = (0..n_mels)
                .map(|b| energy[f * n_mels + b] / est.data()[f * n_mels + b].max(LOG_FLOOR * 1e-3))
                .collect();
            for k in 0..bins {
                if colsum[k] > 0.0 {
                    let r: f64 = (0..n_mels).map(|b| basis.data()[b * bins + k] * ratio[b]).sum();
                    d[f * bins + k] *= r / colsum[k];
                }
            }
        }
    }
    Ok(mag)
}

/// Standard deviation of the random initial waveform.
pub const INIT_STD: f64 = 1e-3;

/// Iterations of the mel-to-linear estimate used by the Griffin-Lim paths.
pub const MAGNITUDE_ITERS: usize = 30;

/// Griffin-Lim straight from a log-mel target: linear magnitudes are
/// estimated from the mel energies, phases start random.
pub fn modified_griffin_lim(target: &MelSpectrogram, config: &InversionConfig) -> Result<GriffinLimResult, InversionError> {
    let mag = mel_to_magnitude(target, None, MAGNITUDE_ITERS)?;
    griffin_lim(&mag, config.gl_iters, InitPhase::Random(config.seed))
}

/// Outputs of both pipeline stages.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineResult {
    pub stage1: LbfgsResult,
    pub waveform: Waveform,
    pub convergence: Vec<f64>,
}

/// L-BFGS first, then Griffin-Lim seeded with the stage-1 phases. Stage-1
/// magnitudes are refined toward the target mel energies before the
/// Griffin-Lim pass.
pub fn invert_pipeline(target: &MelSpectrogram, config: &InversionConfig) -> Result<PipelineResult, InversionError> {
    let stage1 = lbfgs_invert(target, config.lbfgs_iters, config)?;
    let front = MelFrontend::new();
    let spectra = front.plan().spectra(&stage1.waveform.samples);
    let bins = front.plan().bins();
    let mags = Tensor::new(vec![spectra.len() / bins, bins], spectra.iter().map(|c| c.norm()).collect())
        .expect("spectra are frames × bins");
    let refined = mel_to_magnitude(target, Some(&mags), MAGNITUDE_ITERS)?;
    let gl = griffin_lim(&refined, config.gl_iters, InitPhase::FromSpectra(&spectra))?;
    Ok(PipelineResult {
        stage1,
        waveform: gl.waveform,
        convergence: gl.convergence,
    })
}

/// Runs the configured method and returns the waveform.
pub fn invert(target: &MelSpectrogram, config: &InversionConfig) -> Result<Waveform, InversionError> {
    match config.method {
        Method::Lbfgs => Ok(lbfgs_invert(target, config.lbfgs_iters, config)?.waveform),
        Method::GriffinLim => Ok(modified_griffin_lim(target, config)?.waveform),
        Method::LbfgsThenGl => Ok(invert_pipeline(target, config)?.waveform),
    }
}
