use std::time::Instant;

use serde::Serialize;

use super::{invert, InversionConfig, InversionError};
use crate::dsp::{MelFrontend, Waveform, SAMPLE_RATE};

/// Published STRTF values by row label, for reference output only.
pub const PAPER_STRTF: &[(&str, f64)] = &[
    ("100 L-BFGS", 3.285),
    ("1000 L-BFGS", 29.08),
    ("Modified Griffin-Lim", 6.206),
    ("100 L + GL", 9.063),
    ("1000 L + GL", 35.28),
    ("WaveNet", 174.7),
    ("100 L + GL + WN", 183.7),
    ("1000 L + GL + WN", 210.0),
];

/// Griffin-Lim iterations in the benchmark configurations.
pub const BENCH_GL_ITERS: usize = 400;

/// The five inversion rows of the published compute table, cheapest first.
pub fn paper_methods(seed: u64) -> Vec<InversionConfig> {
    vec![
        InversionConfig::lbfgs(100),
        InversionConfig::griffin_lim(BENCH_GL_ITERS),
        InversionConfig::pipeline(100, BENCH_GL_ITERS),
        InversionConfig::lbfgs(1000),
        InversionConfig::pipeline(1000, BENCH_GL_ITERS),
    ]
    .into_iter()
    .map(|c| c.with_seed(seed))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub label: String,
    pub seconds_per_sample: Option<f64>,
    pub strtf: Option<f64>,
    pub audio_seconds: f64,
    pub wall_time: f64,
    /// False for rows that are listed but not run.
    pub measured: bool,
    pub paper_strtf: Option<f64>,
}

impl BenchReport {
    pub fn measured(label: String, seconds_per_sample: f64, audio_seconds: f64, wall_time: f64) -> Self {
        let paper_strtf = paper_strtf(&label);
        Self {
            label,
            seconds_per_sample: Some(seconds_per_sample),
            strtf: Some(seconds_per_sample * SAMPLE_RATE as f64),
            audio_seconds,
            wall_time,
            measured: true,
            paper_strtf,
        }
    }
}

fn paper_strtf(label: &str) -> Option<f64> {
    PAPER_STRTF.iter().find(|(l, _)| *l == label).map(|(_, v)| *v)
}

/// Neural-vocoder rows, which this crate does not run.
pub fn paper_reference_rows() -> Vec<BenchReport> {
    ["WaveNet", "100 L + GL + WN", "1000 L + GL + WN"]
        .into_iter()
        .map(|label| BenchReport {
            label: label.to_string(),
            seconds_per_sample: None,
            strtf: None,
            audio_seconds: 0.0,
            wall_time: 0.0,
            measured: false,
            paper_strtf: paper_strtf(label),
        })
        .collect()
}

/// Times each method over the whole fixture set on the calling thread and
/// reports the median of `runs` passes (3 by convention).
pub fn bench_strtf(methods: &[InversionConfig], fixture: &[Waveform], runs: usize) -> Result<Vec<BenchReport>, InversionError> {
    let front = MelFrontend::new();
    let targets = fixture
        .iter()
        .map(|w| front.logmel(w, false, None))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports = Vec::with_capacity(methods.len());
    for method in methods {
        let mut times = Vec::with_capacity(runs.max(1));
        let mut samples = 0usize;
        for _ in 0..runs.max(1) {
            samples = 0;
            let start = Instant::now();
            for t in &targets {
                samples += invert(t, method)?.len();
            }
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let wall = times[times.len() / 2];
        let spp = if samples > 0 { wall / samples as f64 } else { 0.0 };
        reports.push(BenchReport::measured(
            method.label(),
            spp,
            samples as f64 / SAMPLE_RATE as f64,
            wall,
        ));
    }
    Ok(reports)
}
