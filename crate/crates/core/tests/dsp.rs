use std::f64::consts::PI;

use mixtts_core::dsp::{
    filter_points, logmel, mel_matrix, read_wav, speechlike, stft_mag, write_wav, DspError, MelFrontend, MelSpectrogram,
    MelStats, StftPlan, Waveform, F_HI, F_LO, LOG_FLOOR, N_MELS, SAMPLE_RATE,
};
use mixtts_core::nn::{grad_check, NnError, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SR: f64 = SAMPLE_RATE as f64;
const BIN_HZ: f64 = SR / 512.0;

fn noise(len: usize, std: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Textbook mel scale written with the natural log.
fn mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

fn inv_mel(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Log-mel by direct DFT sums over each windowed frame.
fn naive_logmel(x: &[f64]) -> Vec<f64> {
    let pts: Vec<f64> = (0..N_MELS + 2)
        .map(|i| inv_mel(mel(F_LO) + (mel(F_HI) - mel(F_LO)) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let frames = 1 + (x.len() - 512) / 128;
    let mut out = Vec::new();
    for f in 0..frames {
        let seg: Vec<f64> = (0..512)
            .map(|n| x[f * 128 + n] * (0.5 - 0.5 * (2.0 * PI * n as f64 / 512.0).cos()))
            .collect();
        let mag: Vec<f64> = (0..257)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, s) in seg.iter().enumerate() {
                    let a = -2.0 * PI * (k * n % 512) as f64 / 512.0;
                    re += s * a.cos();
                    im += s * a.sin();
                }
                re.hypot(im)
            })
            .collect();
        for m in 0..N_MELS {
            let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            let mut e = 0.0;
            for (k, a) in mag.iter().enumerate() {
                let fk = k as f64 * BIN_HZ;
                if fk > lo && fk <= c {
                    e += a * (fk - lo) / (c - lo);
                } else if fk > c && fk < hi {
                    e += a * (hi - fk) / (hi - c);
                }
            }
            out.push(e.max(1e-5).ln());
        }
    }
    out
}

#[test]
fn zero_signal_has_zero_magnitude() {
    let m = stft_mag(&Waveform::new(vec![0.0; 2048]), 512, 128).unwrap();
    assert_eq!(m.shape(), &[13, 257]);
    assert!(m.data().iter().all(|&v| v == 0.0));
}

#[test]
fn bin_centered_tone_peaks_at_its_bin() {
    let f = 50.0 * BIN_HZ;
    assert!((f - 2153.3).abs() < 0.05);
    let w = Waveform::new((0..4096).map(|n| 0.5 * (2.0 * PI * f * n as f64 / SR).sin()).collect());
    let m = stft_mag(&w, 512, 128).unwrap();
    for r in 0..m.rows() {
        let row = m.row(r);
        let argmax = (0..257).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax, 50);
    }
}

#[test]
fn frame_count_and_short_input() {
    assert_eq!(stft_mag(&Waveform::new(vec![0.1; 640]), 512, 128).unwrap().rows(), 2);
    assert_eq!(stft_mag(&Waveform::new(vec![0.1; 512]), 512, 128).unwrap().rows(), 1);
    assert!(matches!(
        stft_mag(&Waveform::new(vec![0.1; 511]), 512, 128),
        Err(DspError::TooShort { len: 511, window: 512 })
    ));
    assert!(logmel(&Waveform::new(vec![]), false, None).is_err());
}

#[test]
fn filterbank_is_zero_outside_the_band() {
    let m = mel_matrix(80, 125.0, 7800.0, 512, SR).unwrap();
    assert_eq!(m.shape(), &[80, 257]);
    for k in 0..257 {
        let f = k as f64 * BIN_HZ;
        if !(125.0..=7800.0).contains(&f) {
            for r in 0..80 {
                assert_eq!(m.row(r)[k], 0.0, "band {r} bin {k}");
            }
        }
    }
}

#[test]
fn every_filter_is_one_non_negative_hump() {
    let m = mel_matrix(80, 125.0, 7800.0, 512, SR).unwrap();
    for r in 0..80 {
        let row = m.row(r);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let support: Vec<usize> = (0..257).filter(|&k| row[k] > 0.0).collect();
        assert!(!support.is_empty(), "band {r} is empty");
        assert_eq!(support.last().unwrap() - support[0] + 1, support.len(), "band {r}");
    }
}

#[test]
fn filter_centers_match_an_independent_mel_scale() {
    let pts = filter_points(80, 125.0, 7800.0);
    let m = mel_matrix(80, 125.0, 7800.0, 512, SR).unwrap();
    let (lo, hi) = (mel(125.0), mel(7800.0));
    for b in 0..80 {
        let center = inv_mel(lo + (hi - lo) * (b + 1) as f64 / 81.0);
        assert!((pts[b + 1] - center).abs() < 0.5 * BIN_HZ);
        assert!((pts[b + 1] - center).abs() < 1e-6);
        // a bin closer than a quarter bin to the center sits near the peak
        let k = (center / BIN_HZ).round() as usize;
        if (k as f64 * BIN_HZ - center).abs() < 0.25 * BIN_HZ {
            let row = m.row(b);
            let peak = (0..257).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
            assert_eq!(peak, k, "band {b}");
        }
    }
    assert!(mel_matrix(80, 7800.0, 125.0, 512, SR).is_err());
    assert!(matches!(mel_matrix(80, 125.0, 12000.0, 512, SR), Err(DspError::BadRange { .. })));
}

#[test]
fn silence_sits_on_the_floor() {
    let s = logmel(&Waveform::new(vec![0.0; 1500]), false, None).unwrap();
    assert_eq!(s.n_frames(), 8);
    assert!(s.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
}

#[test]
fn white_noise_matches_naive_reference() {
    let w = noise(1024, 0.3, 4);
    let fast = logmel(&w, false, None).unwrap();
    let slow = naive_logmel(&w.samples);
    assert_eq!(fast.frames.len(), slow.len());
    for (a, b) in fast.frames.data().iter().zip(&slow) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn normalization_round_trips() {
    let specs: Vec<MelSpectrogram> = (0..3)
        .map(|i| logmel(&speechlike::babble(0.3, i), false, None).unwrap())
        .collect();
    let stats = MelStats::from_spectrograms(&specs);
    let norm = specs[0].normalized_with(&stats);
    assert!(norm.normalized && norm.stats.is_some());
    let back = norm.denormalized().unwrap();
    assert!(!back.normalized);
    for (a, b) in back.frames.data().iter().zip(specs[0].frames.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let all: Vec<MelSpectrogram> = specs.iter().map(|s| s.normalized_with(&stats)).collect();
    let pooled = MelStats::from_spectrograms(&all);
    for j in 0..N_MELS {
        assert!(pooled.mean[j].abs() < 1e-9);
        assert!((pooled.std[j] - 1.0).abs() < 1e-9);
    }
    let w = speechlike::babble(0.2, 9);
    let direct = logmel(&w, true, Some(&stats)).unwrap();
    assert_eq!(direct, logmel(&w, false, None).unwrap().normalized_with(&stats));
    assert!(matches!(logmel(&w, true, None), Err(DspError::MissingStats)));
}

#[test]
fn mel_file_round_trips() {
    let raw = logmel(&speechlike::babble(0.2, 1), false, None).unwrap();
    let stats = MelStats::from_spectrograms([&raw]);
    for spec in [raw.clone(), raw.normalized_with(&stats)] {
        let mut bytes = Vec::new();
        spec.write_to(&mut bytes).unwrap();
        assert_eq!(MelSpectrogram::read_from(&mut bytes.as_slice()).unwrap(), spec);
    }
    assert!(MelSpectrogram::read_from(&mut &b"NOTAMEL0"[..]).is_err());
}

#[test]
fn wav_rejects_stereo() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("st.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    w.write_sample(0i16).unwrap();
    w.write_sample(0i16).unwrap();
    w.finalize().unwrap();
    assert!(matches!(read_wav(&path), Err(DspError::UnsupportedFormat(_))));

    let mono = dir.path().join("m.wav");
    let loud = Waveform::new(vec![2.0, -3.0, 0.25]);
    write_wav(&mono, &loud).unwrap();
    let back = read_wav(&mono).unwrap();
    assert!(back.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn overlap_add_inverts_the_analysis() {
    let plan = StftPlan::new(512, 128);
    let x = noise(512 + 9 * 128, 0.2, 5).samples;
    let y = plan.istft(&plan.spectra(&x));
    assert_eq!(y.len(), x.len());
    // the periodic window vanishes at the very first sample
    assert_eq!(plan.window()[0], 0.0);
    for (a, b) in x.iter().zip(&y).skip(1) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn differentiable_path_matches_finite_differences() {
    let front = MelFrontend::new();
    let x = Tensor::from_fn(&[1024], {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        move |_| 0.2 * rng.sample::<f64, _>(StandardNormal)
    });
    let weights: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (0..5 * N_MELS).map(|_| rng.gen::<f64>() - 0.5).collect()
    };
    let err = grad_check(
        |g, v| {
            let y = front.logmel_graph(g, v[0]).map_err(|e| NnError::ShapeMismatch(e.to_string()))?;
            let z = g.mul_const(y, weights.clone())?;
            Ok(g.sum(z))
        },
        &[x.clone()],
        1e-6,
        Some(128),
        8,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");

    let mut g = mixtts_core::nn::Graph::new();
    let v = g.constant(x.clone());
    let y = front.logmel_graph(&mut g, v).unwrap();
    let direct = front.logmel(&Waveform::new(x.data().to_vec()), false, None).unwrap();
    assert_eq!(g.value(y), &direct.frames);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn frame_count_formula(len in 512usize..5000) {
        let m = stft_mag(&Waveform::new(vec![0.01; len]), 512, 128).unwrap();
        prop_assert_eq!(m.rows(), 1 + (len - 512) / 128);
    }

    #[test]
    fn louder_is_never_quieter(seed in 0u64..1000, c in 1.0f64..8.0, len in 512usize..1500) {
        let w = noise(len, 0.05, seed);
        let loud = Waveform::new(w.samples.iter().map(|s| s * c).collect());
        let a = logmel(&w, false, None).unwrap();
        let b = logmel(&loud, false, None).unwrap();
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn logmel_is_deterministic(seed in 0u64..1000) {
        let w = noise(900, 0.1, seed);
        prop_assert_eq!(logmel(&w, false, None).unwrap(), logmel(&w, false, None).unwrap());
    }
}
