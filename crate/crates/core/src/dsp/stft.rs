use std::fmt;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;

/// Hann-windowed real STFT with a fixed window and hop, no padding.
///
/// Frame `f` covers samples `[f·hop, f·hop + window)`; a signal of length
/// `L ≥ window` yields `1 + (L − window) / hop` frames.
pub struct StftPlan {
    window_len: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftPlan")
            .field("window_len", &self.window_len)
            .field("hop", &self.hop)
            .finish()
    }
}

impl StftPlan {
    pub fn new(window_len: usize, hop: usize) -> Self {
        assert!(window_len >= 2 && window_len % 2 == 0, "window length must be even");
        assert!(hop >= 1);
        let mut planner = RealFftPlanner::<f64>::new();
        let window = (0..window_len)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window_len as f64).cos())
            .collect();
        Self {
            window_len,
            hop,
            window,
            forward: planner.plan_fft_forward(window_len),
            inverse: planner.plan_fft_inverse(window_len),
        }
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.window_len).then(|| 1 + (len - self.window_len) / self.hop)
    }

    /// Signal length produced by overlap-adding `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            self.window_len + (frames - 1) * self.hop
        }
    }

    /// Complex spectra, `frames × bins`, row-major.
    pub fn spectra(&self, x: &[f64]) -> Vec<Complex64> {
        let frames = self.frame_count(x.len()).unwrap_or(0);
        let bins = self.bins();
        let mut out = vec![Complex64::new(0.0, 0.0); frames * bins];
        let mut input = self.forward.make_input_vec();
        let mut scratch = self.forward.make_scratch_vec();
        for f in 0..frames {
            let start = f * self.hop;
            for ((dst, s), w) in input.iter_mut().zip(&x[start..start + self.window_len]).zip(&self.window) {
                *dst = s * w;
            }
            self.forward
                .process_with_scratch(&mut input, &mut out[f * bins..(f + 1) * bins], &mut scratch)
                .expect("fft buffer sizes");
        }
        out
    }

    /// Gradient of `Σ grad_mag ⊙ |spectra|` with respect to the signal,
    /// accumulated into `dx`.
    pub fn magnitude_backward(&self, spectra: &[Complex64], grad_mag: &[f64], len: usize, dx: &mut [f64]) {
        let bins = self.bins();
        let frames = spectra.len() / bins;
        debug_assert!(self.frame_count(len) == Some(frames));
        let mut spec = self.inverse.make_input_vec();
        let mut out = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        for f in 0..frames {
            for k in 0..bins {
                let x = spectra[f * bins + k];
                let m = x.norm();
                let p = if m > 0.0 {
                    x * (grad_mag[f * bins + k] / m)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                spec[k] = if k == 0 || k == bins - 1 {
                    Complex64::new(p.re, 0.0)
                } else {
                    p * 0.5
                };
            }
            self.inverse
                .process_with_scratch(&mut spec, &mut out, &mut scratch)
                .expect("fft buffer sizes");
            let start = f * self.hop;
            for ((d, o), w) in dx[start..start + self.window_len].iter_mut().zip(&out).zip(&self.window) {
                *d += o * w;
            }
        }
    }

    /// Least-squares overlap-add inverse of `spectra` (`frames × bins`).
    ///
    /// Samples with no window coverage are set to zero.
    pub fn istft(&self, spectra: &[Complex64]) -> Vec<f64> {
        let bins = self.bins();
        let frames = spectra.len() / bins;
        let len = self.signal_len(frames);
        let mut acc = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut spec = self.inverse.make_input_vec();
        let mut out = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        let scale = 1.0 / self.window_len as f64;
        for f in 0..frames {
            spec.copy_from_slice(&spectra[f * bins..(f + 1) * bins]);
            spec[0].im = 0.0;
            spec[bins - 1].im = 0.0;
            self.inverse
                .process_with_scratch(&mut spec, &mut out, &mut scratch)
                .expect("fft buffer sizes");
            let start = f * self.hop;
            for n in 0..self.window_len {
                let w = self.window[n];
                acc[start + n] += w * out[n] * scale;
                norm[start + n] += w * w;
            }
        }
        acc.iter()
            .zip(&norm)
            .map(|(a, n)| if *n > 1e-10 { a / n } else { 0.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_formula() {
        let p = StftPlan::new(512, 128);
        assert_eq!(p.frame_count(511), None);
        assert_eq!(p.frame_count(512), Some(1));
        assert_eq!(p.frame_count(640), Some(2));
        assert_eq!(p.frame_count(767), Some(2));
        assert_eq!(p.signal_len(3), 768);
    }

    #[test]
    fn istft_inverts_interior_samples() {
        let p = StftPlan::new(64, 16);
        let x: Vec<f64> = (0..320).map(|n| ((n * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let y = p.istft(&p.spectra(&x));
        assert_eq!(y.len(), 320);
        for n in 1..320 {
            assert!((x[n] - y[n]).abs() < 1e-12, "sample {n}");
        }
    }
}
