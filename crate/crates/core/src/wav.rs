//! 16-bit PCM WAV input/output and windowed-sinc sample-rate conversion.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};
use rubato::{
    Resampler, SincFixedIn, SincInterpolationParameters, SincInterpolationType, WindowFunction,
};

use crate::error::{BinsepError, Result};
use crate::signal::Waveform;

const PCM_SCALE: f64 = 32767.0;

/// Writes one or more equal-length channels as interleaved 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, channels: &[&Waveform]) -> Result<()> {
    let first = channels.first().ok_or_else(|| BinsepError::invalid("write_wav", "no channels"))?;
    if channels.iter().any(|c| c.len() != first.len() || c.sample_rate != first.sample_rate) {
        return Err(BinsepError::invalid("write_wav", "channels differ in length or rate"));
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: first.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec)?;
    for i in 0..first.len() {
        for c in channels {
            w.write_sample(quantize(c.samples[i]))?;
        }
    }
    w.finalize()?;
    Ok(())
}

/// Reads a 16-bit PCM file (integer or float samples) into one waveform per channel.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<Waveform>> {
    let path = path.as_ref();
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let nch = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => {
            r.samples::<i16>().map(|s| s.map(|v| v as f64 / PCM_SCALE)).collect::<std::result::Result<_, _>>()?
        }
        (SampleFormat::Int, bits) if bits <= 32 => {
            let scale = (1i64 << (bits - 1)) as f64;
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>()?
        }
        (SampleFormat::Float, 32) => {
            r.samples::<f32>().map(|s| s.map(|v| v as f64)).collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(BinsepError::data(path, format!("unsupported sample format {fmt:?}/{bits}")));
        }
    };
    if interleaved.is_empty() {
        return Err(BinsepError::data(path, "no samples"));
    }
    (0..nch)
        .map(|c| Waveform::new(interleaved.iter().skip(c).step_by(nch).copied().collect(), spec.sample_rate))
        .collect()
}

fn quantize(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16
}

/// Round trip through 16-bit quantization, matching what [`write_wav`] stores.
pub fn quantize_16bit(w: &Waveform) -> Waveform {
    Waveform {
        samples: w.samples.iter().map(|&v| quantize(v) as f64 / PCM_SCALE).collect(),
        sample_rate: w.sample_rate,
    }
}

/// Windowed-sinc resampling to `target_rate`; output length is `round(len · ratio)`.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(BinsepError::invalid("resample", "target rate must be positive"));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let params = SincInterpolationParameters {
        sinc_len: 128,
        f_cutoff: 0.95,
        oversampling_factor: 128,
        interpolation: SincInterpolationType::Cubic,
        window: WindowFunction::BlackmanHarris2,
    };
    let chunk = 1024;
    let mut rs = SincFixedIn::<f64>::new(ratio, 1.0, params, chunk, 1)
        .map_err(|e| BinsepError::Resample(e.to_string()))?;
    let delay = rs.output_delay();
    let want = (w.len() as f64 * ratio).round() as usize;
    let mut out = Vec::with_capacity(want + delay + chunk);
    let mut pos = 0;
    while pos + chunk <= w.len() {
        let block = rs.process(&[&w.samples[pos..pos + chunk]], None).map_err(|e| BinsepError::Resample(e.to_string()))?;
        out.extend_from_slice(&block[0]);
        pos += chunk;
    }
    let rest = &w.samples[pos..];
    let block = rs.process_partial(Some(&[rest]), None).map_err(|e| BinsepError::Resample(e.to_string()))?;
    out.extend_from_slice(&block[0]);
    // flush the filter until the delayed tail has been produced
    while out.len() < want + delay {
        let block = rs
            .process_partial::<&[f64]>(None, None)
            .map_err(|e| BinsepError::Resample(e.to_string()))?;
        if block[0].is_empty() {
            break;
        }
        out.extend_from_slice(&block[0]);
    }
    let mut samples: Vec<f64> = out.into_iter().skip(delay).take(want).collect();
    samples.resize(want, 0.0);
    Waveform::new(samples, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_clamps_and_rounds() {
        assert_eq!(quantize(2.0), 32767);
        assert_eq!(quantize(-2.0), -32767);
        assert_eq!(quantize(0.0), 0);
    }
}
