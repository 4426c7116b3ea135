//! Waveform and log-mel feature transforms.
//!
//! Everything runs at 22 050 Hz with a 512-sample Hann window, hop 128, and
//! an 80-band mel filterbank spanning 125 Hz – 7.8 kHz. The log-mel path can
//! also be built on an autodiff [`Graph`] so inversion can optimize a
//! waveform through it.

mod mel;
pub mod speechlike;
mod stft;
mod wav;

use std::io::{Read, Write};
use std::sync::Arc;

pub use mel::{filter_points, hz_to_mel, mel_matrix, mel_to_hz};
pub use stft::StftPlan;
pub use wav::{read_wav, write_wav};

use crate::nn::{Graph, NnError, Tensor, Var};

pub const SAMPLE_RATE: u32 = 22_050;
pub const WINDOW: usize = 512;
pub const HOP: usize = 128;
pub const N_MELS: usize = 80;
pub const F_LO: f64 = 125.0;
pub const F_HI: f64 = 7800.0;
pub const LOG_FLOOR: f64 = 1e-5;

const MEL_MAGIC: &[u8; 8] = b"MIXMEL01";

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("signal of {len} samples is shorter than the {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("bad filterbank range {f_lo} Hz .. {f_hi} Hz")]
    BadRange { f_lo: f64, f_hi: f64 },
    #[error("wav error: {0}")]
    Wav(String),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("spectrogram is normalized but carries no statistics")]
    MissingStats,
    #[error("malformed mel file: {0}")]
    BadMelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Mono samples; loaded audio lies in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Per-band mean and standard deviation of log-mel features.
#[derive(Clone, Debug, PartialEq)]
pub struct MelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelStats {
    /// Statistics over every frame of every spectrogram. Standard
    /// deviations are floored at `1e-5`.
    pub fn from_spectrograms<'a>(specs: impl IntoIterator<Item = &'a MelSpectrogram>) -> Self {
        let mut sum = vec![0.0; N_MELS];
        let mut sum_sq = vec![0.0; N_MELS];
        let mut count = 0usize;
        for s in specs {
            for row in s.frames.data().chunks(N_MELS) {
                for j in 0..N_MELS {
                    sum[j] += row[j];
                    sum_sq[j] += row[j] * row[j];
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-5))
            .collect();
        Self { mean, std }
    }
}

/// Log-mel frames `[N × 80]`, optionally normalized per band.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub normalized: bool,
    pub stats: Option<MelStats>,
}

impl MelSpectrogram {
    pub fn raw(frames: Tensor) -> Self {
        Self {
            frames,
            normalized: false,
            stats: None,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / N_MELS
    }

    pub fn normalized_with(&self, stats: &MelStats) -> Self {
        let mut frames = self.frames.clone();
        for row in frames.data_mut().chunks_mut(N_MELS) {
            for j in 0..N_MELS {
                row[j] = (row[j] - stats.mean[j]) / stats.std[j];
            }
        }
        Self {
            frames,
            normalized: true,
            stats: Some(stats.clone()),
        }
    }

    /// Raw log-mel values; a no-op on unnormalized input.
    pub fn denormalized(&self) -> Result<Self, DspError> {
        if !self.normalized {
            return Ok(self.clone());
        }
        let stats = self.stats.as_ref().ok_or(DspError::MissingStats)?;
        let mut frames = self.frames.clone();
        for row in frames.data_mut().chunks_mut(N_MELS) {
            for j in 0..N_MELS {
                row[j] = row[j] * stats.std[j] + stats.mean[j];
            }
        }
        Ok(Self::raw(frames))
    }

    /// Binary layout: magic `MIXMEL01`, `u8` normalized flag, `u32` frame
    /// count, `u32` band count, frames as little-endian `f64`, then (when
    /// normalized) 80 means and 80 standard deviations.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), DspError> {
        w.write_all(MEL_MAGIC)?;
        w.write_all(&[self.normalized as u8])?;
        w.write_all(&(self.n_frames() as u32).to_le_bytes())?;
        w.write_all(&(N_MELS as u32).to_le_bytes())?;
        for v in self.frames.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        if self.normalized {
            let stats = self.stats.as_ref().ok_or(DspError::MissingStats)?;
            for v in stats.mean.iter().chain(&stats.std) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, DspError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MEL_MAGIC {
            return Err(DspError::BadMelFile("bad magic".into()));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        if u32::from_le_bytes(word) as usize != N_MELS {
            return Err(DspError::BadMelFile("band count".into()));
        }
        let mut read_f64s = |count: usize| -> Result<Vec<f64>, DspError> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let data = read_f64s(n * N_MELS)?;
        let frames = Tensor::new(vec![n, N_MELS], data)?;
        let normalized = flag[0] != 0;
        let stats = if normalized {
            let mean = read_f64s(N_MELS)?;
            let std = read_f64s(N_MELS)?;
            Some(MelStats { mean, std })
        } else {
            None
        };
        Ok(Self {
            frames,
            normalized,
            stats,
        })
    }
}

/// STFT plan plus mel basis; cheap to clone.
#[derive(Clone, Debug)]
pub struct MelFrontend {
    plan: Arc<StftPlan>,
    basis: Tensor,
    basis_t: Tensor,
}

impl Default for MelFrontend {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFrontend {
    pub fn new() -> Self {
        let basis = mel_matrix(N_MELS, F_LO, F_HI, WINDOW, SAMPLE_RATE as f64).expect("static range is valid");
        let bins = WINDOW / 2 + 1;
        let basis_t = Tensor::from_fn(&[bins, N_MELS], |i| basis.data()[(i % N_MELS) * bins + i / N_MELS]);
        Self {
            plan: Arc::new(StftPlan::new(WINDOW, HOP)),
            basis,
            basis_t,
        }
    }

    pub fn plan(&self) -> &Arc<StftPlan> {
        &self.plan
    }

    /// Mel basis `[80 × 257]`.
    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn stft_mag(&self, samples: &[f64]) -> Result<Tensor, DspError> {
        let frames = self.plan.frame_count(samples.len()).ok_or(DspError::TooShort {
            len: samples.len(),
            window: WINDOW,
        })?;
        let mags = self.plan.spectra(samples).iter().map(|c| c.norm()).collect();
        Ok(Tensor::new(vec![frames, self.plan.bins()], mags)?)
    }

    /// Linear mel energies `[N × 80]` from magnitudes `[N × 257]`.
    pub fn mel_energies(&self, mag: &Tensor) -> Tensor {
        let n = mag.rows();
        let mut out = vec![0.0; n * N_MELS];
        crate::nn::tensor_gemm(n, self.plan.bins(), N_MELS, mag.data(), self.basis_t.data(), &mut out);
        Tensor::new(vec![n, N_MELS], out).expect("sized above")
    }

    pub fn logmel(&self, w: &Waveform, normalize: bool, stats: Option<&MelStats>) -> Result<MelSpectrogram, DspError> {
        let mag = self.stft_mag(&w.samples)?;
        let mut energies = self.mel_energies(&mag);
        energies.data_mut().iter_mut().for_each(|v| *v = v.max(LOG_FLOOR).ln());
        let spec = MelSpectrogram::raw(energies);
        match (normalize, stats) {
            (false, _) => Ok(spec),
            (true, Some(s)) => Ok(spec.normalized_with(s)),
            (true, None) => Err(DspError::MissingStats),
        }
    }

    /// Raw log-mel of the 1-D signal `x` on the tape.
    pub fn logmel_graph(&self, g: &mut Graph, x: Var) -> Result<Var, DspError> {
        let len = g.value(x).len();
        if self.plan.frame_count(len).is_none() {
            return Err(DspError::TooShort { len, window: WINDOW });
        }
        let mag = g.stft_mag(x, self.plan.clone())?;
        let basis = g.constant(self.basis_t.clone());
        let mel = g.matmul(mag, basis)?;
        Ok(g.log_floor(mel, LOG_FLOOR))
    }
}

/// Hann-windowed STFT magnitudes `[N × (window/2 + 1)]`.
pub fn stft_mag(w: &Waveform, window: usize, hop: usize) -> Result<Tensor, DspError> {
    let plan = StftPlan::new(window, hop);
    let frames = plan.frame_count(w.len()).ok_or(DspError::TooShort { len: w.len(), window })?;
    let mags = plan.spectra(&w.samples).iter().map(|c| c.norm()).collect();
    Ok(Tensor::new(vec![frames, plan.bins()], mags)?)
}

/// Log-mel spectrogram with the default analysis settings.
pub fn logmel(w: &Waveform, normalize: bool, stats: Option<&MelStats>) -> Result<MelSpectrogram, DspError> {
    MelFrontend::new().logmel(w, normalize, stats)
}
