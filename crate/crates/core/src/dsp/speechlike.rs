//! Deterministic source-filter synthesis of speech-like audio.
//!
//! Used to build fixture corpora when no recorded speech is available: each
//! ARPAbet phoneme maps to formant targets and an excitation mix (glottal
//! pulses, noise, or both), rendered through three cascaded resonators with
//! smoothed transitions and a drifting pitch contour.

use rand::{Rng, SeedableRng};
use rand_distr::Normal;
use rand_chacha::ChaCha8Rng;

use super::{Waveform, SAMPLE_RATE};
use crate::frontend::PHONEMES;

#[derive(Clone, Copy, Debug)]
struct Sound {
    formants: [f64; 3],
    voicing: f64,
    noise: f64,
    gain: f64,
}

fn sound(phone: &str) -> Sound {
    let v = |f1, f2, f3| Sound {
        formants: [f1, f2, f3],
        voicing: 1.0,
        noise: 0.02,
        gain: 1.0,
    };
    let c = |f: [f64; 3], voicing: f64, noise: f64, gain: f64| Sound {
        formants: f,
        voicing,
        noise,
        gain,
    };
    match phone {
        "iy" => v(270.0, 2290.0, 3010.0),
        "ih" => v(390.0, 1990.0, 2550.0),
        "eh" => v(530.0, 1840.0, 2480.0),
        "ae" => v(660.0, 1720.0, 2410.0),
        "aa" => v(730.0, 1090.0, 2440.0),
        "ao" => v(570.0, 840.0, 2410.0),
        "uh" => v(440.0, 1020.0, 2240.0),
        "uw" => v(300.0, 870.0, 2240.0),
        "ah" => v(520.0, 1190.0, 2390.0),
        "er" => v(490.0, 1350.0, 1690.0),
        "ey" => v(480.0, 2100.0, 2600.0),
        "ay" => v(700.0, 1300.0, 2500.0),
        "ow" => v(500.0, 900.0, 2400.0),
        "aw" => v(700.0, 1100.0, 2450.0),
        "oy" => v(550.0, 1000.0, 2400.0),
        "m" => c([280.0, 1100.0, 2300.0], 0.8, 0.0, 0.5),
        "n" => c([280.0, 1600.0, 2600.0], 0.8, 0.0, 0.5),
        "ng" => c([280.0, 2000.0, 2800.0], 0.8, 0.0, 0.45),
        "l" => c([360.0, 1100.0, 2700.0], 0.9, 0.0, 0.6),
        "r" => c([420.0, 1300.0, 1600.0], 0.9, 0.0, 0.6),
        "w" => c([300.0, 700.0, 2200.0], 0.9, 0.0, 0.55),
        "y" => c([280.0, 2200.0, 3000.0], 0.9, 0.0, 0.55),
        "s" => c([4500.0, 5800.0, 7200.0], 0.0, 1.0, 0.35),
        "z" => c([4300.0, 5600.0, 7000.0], 0.4, 0.8, 0.35),
        "sh" => c([2500.0, 3500.0, 5200.0], 0.0, 1.0, 0.4),
        "zh" => c([2400.0, 3400.0, 5000.0], 0.4, 0.8, 0.4),
        "f" => c([1800.0, 4500.0, 6500.0], 0.0, 0.8, 0.2),
        "v" => c([1600.0, 4200.0, 6200.0], 0.5, 0.5, 0.25),
        "th" => c([1900.0, 4800.0, 6800.0], 0.0, 0.7, 0.18),
        "dh" => c([1700.0, 4300.0, 6300.0], 0.5, 0.4, 0.25),
        "hh" => c([600.0, 1500.0, 2500.0], 0.0, 0.6, 0.25),
        "p" => c([900.0, 1500.0, 2500.0], 0.0, 0.7, 0.3),
        "b" => c([300.0, 1000.0, 2400.0], 0.6, 0.3, 0.3),
        "t" => c([3000.0, 4500.0, 6000.0], 0.0, 0.8, 0.3),
        "d" => c([400.0, 1700.0, 2600.0], 0.6, 0.3, 0.3),
        "k" => c([1800.0, 2500.0, 3500.0], 0.0, 0.8, 0.3),
        "g" => c([350.0, 2000.0, 2700.0], 0.6, 0.3, 0.3),
        "ch" => c([2600.0, 3600.0, 5300.0], 0.0, 1.0, 0.4),
        "jh" => c([2400.0, 3300.0, 5000.0], 0.5, 0.7, 0.4),
        _ => c([500.0, 1500.0, 2500.0], 0.0, 0.0, 0.0),
    }
}

/// A span of `samples` samples rendering `phone`, or silence for `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub phone: Option<String>,
    pub samples: usize,
}

struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bandwidth: f64) -> f64 {
        let fs = SAMPLE_RATE as f64;
        let r = (-std::f64::consts::PI * bandwidth / fs).exp();
        let b1 = 2.0 * r * (2.0 * std::f64::consts::PI * freq / fs).cos();
        let b2 = -r * r;
        let y = (1.0 - r) * x + b1 * self.y1 + b2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Background noise level (standard deviation), about -66 dBFS.
pub const NOISE_FLOOR: f64 = 5e-4;

/// Renders segments to a waveform peaking near 0.5 over a constant noise
/// floor.
pub fn render(segments: &[Segment], seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let total: usize = segments.iter().map(|s| s.samples).sum();
    let mut out = Vec::with_capacity(total);
    let base_f0 = 100.0 + 60.0 * rng.gen::<f64>();
    let vib_rate = 3.0 + 3.0 * rng.gen::<f64>();
    let vib_phase = rng.gen::<f64>() * std::f64::consts::TAU;
    let mut res = [Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }];
    let mut cur = sound("");
    cur.formants = [500.0, 1500.0, 2500.0];
    let mut phase = 0.0;
    let mut pulse = 0.0;
    // ~8 ms smoothing for articulator targets
    let smooth = 1.0 - (-1.0 / (0.008 * fs)).exp();
    let mut n = 0usize;
    for seg in segments {
        let target = seg.phone.as_deref().map(sound).unwrap_or_else(|| sound(""));
        for _ in 0..seg.samples {
            for i in 0..3 {
                cur.formants[i] += smooth * (target.formants[i] - cur.formants[i]);
            }
            cur.voicing += smooth * (target.voicing - cur.voicing);
            cur.noise += smooth * (target.noise - cur.noise);
            cur.gain += smooth * (target.gain - cur.gain);
            let t = n as f64 / fs;
            let f0 = base_f0 * (1.0 + 0.06 * (std::f64::consts::TAU * vib_rate * t + vib_phase).sin())
                * (1.0 - 0.15 * t / (total as f64 / fs).max(1e-3));
            phase += f0 / fs;
            if phase >= 1.0 {
                phase -= 1.0;
                pulse = 1.0;
            }
            let glottal = pulse;
            pulse *= 0.6;
            let noise = rng.gen::<f64>() * 2.0 - 1.0;
            let mut x = cur.voicing * glottal * 4.0 + cur.noise * noise * 0.5;
            let mut y = 0.0;
            for (i, r) in res.iter_mut().enumerate() {
                let bw = 60.0 + 40.0 * i as f64 + 0.05 * cur.formants[i];
                x = r.step(x, cur.formants[i], bw) * 6.0;
                y += x;
            }
            out.push(cur.gain * y);
            n += 1;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    let hiss = Normal::new(0.0, NOISE_FLOOR).expect("valid normal");
    out.iter_mut().for_each(|v| *v += rng.sample(hiss));
    Waveform::new(out)
}

/// Speech-like audio for a word sequence given as phoneme lists.
///
/// Each phoneme lasts `samples_per_phone` samples; words are separated by a
/// half-length pause and the utterance is padded with silence on both ends.
pub fn utterance(words: &[Vec<String>], samples_per_phone: usize, seed: u64) -> Waveform {
    let mut segs = vec![Segment {
        phone: None,
        samples: samples_per_phone,
    }];
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            segs.push(Segment {
                phone: None,
                samples: samples_per_phone / 2,
            });
        }
        for p in w {
            segs.push(Segment {
                phone: Some(p.clone()),
                samples: samples_per_phone,
            });
        }
    }
    segs.push(Segment {
        phone: None,
        samples: samples_per_phone,
    });
    render(&segs, seed)
}

/// Random phoneme babble of the given duration, with natural-ish durations
/// and occasional pauses.
pub fn babble(duration_secs: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_babb1e);
    let total = (duration_secs * SAMPLE_RATE as f64).round() as usize;
    let mut segs = Vec::new();
    let mut used = 0;
    while used < total {
        let phone = if rng.gen::<f64>() < 0.08 {
            None
        } else {
            Some(PHONEMES[rng.gen_range(0..PHONEMES.len())].to_string())
        };
        let len = rng.gen_range(900..2600).min(total - used);
        used += len;
        segs.push(Segment { phone, samples: len });
    }
    render(&segs, seed)
}
