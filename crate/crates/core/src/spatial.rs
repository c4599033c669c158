//! Binaural operations: inter-channel phase difference, synthetic spatial rendering
//! and mixing.
//!
//! Azimuth convention: positive azimuth places the source on the listener's left, so
//! the left ear is nearer (louder, undelayed) and the right ear is delayed.

use std::f64::consts::PI;

use crate::error::{BinsepError, Result};
use crate::signal::{ComplexSpectrogram, FeatureMap, FreqScale, Waveform};

/// Head radius in meters for the Woodworth model.
pub const HEAD_RADIUS_M: f64 = 0.0875;
pub const SPEED_OF_SOUND_M_S: f64 = 343.0;
/// Level difference between the ears at |azimuth| = 90°, in dB.
pub const ILD_DB_AT_90: f64 = 6.0;
/// Both magnitudes below this make a bin "silent"; its IPD is defined as 1.
pub const IPD_SILENCE_EPS: f64 = 1e-8;
const DELAY_HALF_TAPS: i64 = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct BinauralClip {
    pub left: Waveform,
    pub right: Waveform,
}

impl BinauralClip {
    pub fn new(left: Waveform, right: Waveform) -> Result<Self> {
        if left.len() != right.len() || left.sample_rate != right.sample_rate {
            return Err(BinsepError::invalid(
                "binaural_clip",
                format!(
                    "channels differ: {} @ {} Hz vs {} @ {} Hz",
                    left.len(),
                    left.sample_rate,
                    right.len(),
                    right.sample_rate
                ),
            ));
        }
        Ok(Self { left, right })
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.left.sample_rate
    }

    /// Channel 0 is left, 1 is right.
    pub fn channel(&self, c: usize) -> &Waveform {
        if c == 0 {
            &self.left
        } else {
            &self.right
        }
    }

    pub fn swapped(&self) -> Self {
        Self { left: self.right.clone(), right: self.left.clone() }
    }
}

/// Cosine of the per-bin phase difference between two spectrograms, on the linear axis.
pub fn compute_ipd(xl: &ComplexSpectrogram, xr: &ComplexSpectrogram) -> Result<FeatureMap> {
    if !xl.same_layout(xr) {
        return Err(BinsepError::shape("compute_ipd", &xl.shape(), &xr.shape()));
    }
    let data = xl
        .bins
        .iter()
        .zip(&xr.bins)
        .map(|(l, r)| {
            let (ml, mr) = (l.norm(), r.norm());
            let denom = ml * mr;
            if (ml < IPD_SILENCE_EPS && mr < IPD_SILENCE_EPS) || denom == 0.0 {
                1.0
            } else {
                ((l * r.conj()).re / denom).clamp(-1.0, 1.0)
            }
        })
        .collect();
    FeatureMap::new(1, xl.frames, xl.freqs, FreqScale::Linear, data)
}

/// Woodworth interaural time difference in seconds (always ≥ 0).
pub fn woodworth_itd_s(azimuth_deg: f64) -> f64 {
    let th = azimuth_deg.abs().to_radians();
    HEAD_RADIUS_M / SPEED_OF_SOUND_M_S * (th + th.sin())
}

/// Linear gains `(left, right)`: ±(k/2)·sin θ dB, so the ears differ by k·sin θ dB.
pub fn ild_gains(azimuth_deg: f64) -> (f64, f64) {
    let half_db = 0.5 * ILD_DB_AT_90 * azimuth_deg.to_radians().sin();
    (10f64.powf(half_db / 20.0), 10f64.powf(-half_db / 20.0))
}

/// Delays `x` by `delay` samples (≥ 0) with a 31-tap Hann-windowed sinc, keeping its length.
pub fn fractional_delay(x: &[f64], delay: f64) -> Vec<f64> {
    assert!(delay >= 0.0, "delay must be non-negative");
    let whole = delay.floor() as i64;
    let frac = delay - whole as f64;
    if frac == 0.0 {
        let mut y = vec![0.0; x.len()];
        let w = whole as usize;
        if w < x.len() {
            y[w..].copy_from_slice(&x[..x.len() - w]);
        }
        return y;
    }
    let half_width = (DELAY_HALF_TAPS + 1) as f64;
    let taps: Vec<(i64, f64)> = (-DELAY_HALF_TAPS..=DELAY_HALF_TAPS)
        .map(|k| {
            let t = k as f64 - frac;
            let sinc = (PI * t).sin() / (PI * t);
            let win = 0.5 * (1.0 + (PI * t / half_width).cos());
            (k, sinc * win)
        })
        .collect();
    let n = x.len() as i64;
    (0..n)
        .map(|i| {
            taps.iter()
                .map(|&(k, h)| {
                    let m = i - whole - k;
                    if (0..n).contains(&m) {
                        x[m as usize] * h
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Spatializes a mono source at `azimuth_deg` ∈ [−90, 90] with Woodworth ITD on the
/// far ear and a sine-law level difference.
pub fn render_binaural(mono: &Waveform, azimuth_deg: f64) -> Result<BinauralClip> {
    if !azimuth_deg.is_finite() || azimuth_deg.abs() > 90.0 {
        return Err(BinsepError::invalid("render_binaural", format!("azimuth {azimuth_deg}° outside [-90, 90]")));
    }
    let delay = woodworth_itd_s(azimuth_deg) * mono.sample_rate as f64;
    let (gl, gr) = ild_gains(azimuth_deg);
    let near = mono.samples.clone();
    let far = fractional_delay(&mono.samples, delay);
    let (l, r) = if azimuth_deg >= 0.0 { (near, far) } else { (far, near) };
    let left = Waveform::new(l.into_iter().map(|v| v * gl).collect(), mono.sample_rate)?;
    let right = Waveform::new(r.into_iter().map(|v| v * gr).collect(), mono.sample_rate)?;
    BinauralClip::new(left, right)
}

/// Per-channel sum of equal-length clips, without normalization.
pub fn mix(clips: &[&BinauralClip]) -> Result<BinauralClip> {
    let first = clips.first().ok_or_else(|| BinsepError::invalid("mix", "no clips"))?;
    let mut l = vec![0.0; first.len()];
    let mut r = vec![0.0; first.len()];
    for c in clips {
        if c.len() != first.len() || c.sample_rate() != first.sample_rate() {
            return Err(BinsepError::invalid(
                "mix",
                format!("clip length {} @ {} Hz differs from {} @ {} Hz", c.len(), c.sample_rate(), first.len(), first.sample_rate()),
            ));
        }
        for (a, b) in l.iter_mut().zip(&c.left.samples) {
            *a += b;
        }
        for (a, b) in r.iter_mut().zip(&c.right.samples) {
            *a += b;
        }
    }
    BinauralClip::new(Waveform::new(l, first.sample_rate())?, Waveform::new(r, first.sample_rate())?)
}

/// Sum of equal-length mono waveforms.
pub fn mix_mono(waves: &[&Waveform]) -> Result<Waveform> {
    let first = waves.first().ok_or_else(|| BinsepError::invalid("mix", "no waveforms"))?;
    let mut acc = vec![0.0; first.len()];
    for w in waves {
        if w.len() != first.len() || w.sample_rate != first.sample_rate {
            return Err(BinsepError::invalid("mix", "waveform lengths or rates differ"));
        }
        for (a, b) in acc.iter_mut().zip(&w.samples) {
            *a += b;
        }
    }
    Waveform::new(acc, first.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_delay_is_exact_shift() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y = fractional_delay(&x, 3.0);
        assert_eq!(&y[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&y[3..], &x[..7]);
    }

    #[test]
    fn gains_are_plus_minus_three_db_at_ninety() {
        let (l, r) = ild_gains(90.0);
        assert!((20.0 * l.log10() - 3.0).abs() < 1e-12);
        assert!((20.0 * r.log10() + 3.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_azimuth_rejected() {
        let w = Waveform::zeros(16, 8000);
        assert!(render_binaural(&w, 91.0).is_err());
    }
}
