use crate::nn::Tensor;

use super::DspError;

/// HTK-style mel scale, `2595 · log10(1 + f / 700)`.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Edge and center frequencies of the filterbank, `n_mels + 2` points.
pub fn filter_points(n_mels: usize, f_lo: f64, f_hi: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Unit-peak triangular mel filterbank, `[n_mels × (n_fft/2 + 1)]`.
pub fn mel_matrix(n_mels: usize, f_lo: f64, f_hi: f64, n_fft: usize, sample_rate: f64) -> Result<Tensor, DspError> {
    if !(f_lo >= 0.0 && f_lo < f_hi && f_hi <= sample_rate / 2.0) || n_mels == 0 {
        return Err(DspError::BadRange { f_lo, f_hi });
    }
    let bins = n_fft / 2 + 1;
    let pts = filter_points(n_mels, f_lo, f_hi);
    let mut out = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate / n_fft as f64;
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            out[m * bins + k] = w;
        }
    }
    Ok(Tensor::new(vec![n_mels, bins], out).expect("sized above"))
}
