use std::path::Path;

use super::{DspError, Waveform, SAMPLE_RATE};

/// Reads a 16-bit PCM mono WAV at 22 050 Hz, scaled into `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Waveform, DspError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| DspError::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(DspError::UnsupportedFormat(format!(
            "{}: {} ch, {} Hz, {}-bit {:?} (want 1 ch, {} Hz, 16-bit PCM)",
            path.display(),
            spec.channels,
            spec.sample_rate,
            spec.bits_per_sample,
            spec.sample_format,
            SAMPLE_RATE
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| DspError::Wav(e.to_string()))?;
    Ok(Waveform::new(samples))
}

/// Writes 16-bit PCM mono; samples are clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), DspError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| DspError::Wav(e.to_string()))?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| DspError::Wav(e.to_string()))?;
    }
    writer.finalize().map_err(|e| DspError::Wav(e.to_string()))
}
