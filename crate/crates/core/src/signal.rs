//! Time–frequency transforms: STFT/ISTFT, log compression and log-frequency rescaling.
//!
//! Conventions: Hann (periodic) analysis window, frames centered on `t·hop` by zero
//! padding `frame_len/2` samples on both sides, unnormalized forward DFT. The inverse
//! divides the overlap-added frames by the summed squared window, which reconstructs
//! the input exactly wherever that sum is nonzero.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{BinsepError, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 11025;

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

fn forward_plan(n: usize) -> Arc<dyn RealToComplex<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn inverse_plan(n: usize) -> Arc<dyn ComplexToReal<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Mono time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(BinsepError::invalid("waveform", "empty signal"));
        }
        if sample_rate == 0 {
            return Err(BinsepError::invalid("waveform", "sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(BinsepError::NonFinite("waveform samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn rms(&self) -> f64 {
        (self.energy() / self.len().max(1) as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self { samples: self.samples.iter().map(|v| v * gain).collect(), sample_rate: self.sample_rate }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop_len: usize,
    pub window: Window,
}

impl StftConfig {
    pub fn new(frame_len: usize, hop_len: usize, window: Window) -> Result<Self> {
        if frame_len < 4 || frame_len % 2 != 0 {
            return Err(BinsepError::invalid("stft", format!("frame length {frame_len} must be even and ≥ 4")));
        }
        if hop_len == 0 || hop_len > frame_len {
            return Err(BinsepError::invalid("stft", format!("hop {hop_len} must be in 1..={frame_len}")));
        }
        Ok(Self { frame_len, hop_len, window })
    }

    pub fn hann(frame_len: usize, hop_len: usize) -> Result<Self> {
        Self::new(frame_len, hop_len, Window::Hann)
    }

    pub fn n_freq(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Frame count for a signal of `len` samples under center padding.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop_len + 1
    }

    /// Whether the summed squared window stays positive everywhere (the condition for
    /// exact overlap-add reconstruction).
    pub fn nola(&self) -> bool {
        let w = self.window.coefficients(self.frame_len);
        let hop = self.hop_len;
        (0..hop).all(|r| (r..self.frame_len).step_by(hop).map(|i| w[i] * w[i]).sum::<f64>() > 1e-10)
    }
}

/// Complex STFT, stored frame-major: `bins[t * freqs + f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub freqs: usize,
    pub config: StftConfig,
    pub sample_rate: u32,
    pub bins: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, config: StftConfig, sample_rate: u32) -> Self {
        let freqs = config.n_freq();
        Self { frames, freqs, config, sample_rate, bins: vec![Complex64::new(0.0, 0.0); frames * freqs] }
    }

    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.bins[t * self.freqs + f]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.frames, self.freqs]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.frames == other.frames && self.freqs == other.freqs && self.config == other.config
    }

    /// Elementwise product with a real frame-major mask of the same shape.
    pub fn masked(&self, mask: &[f64]) -> Result<Self> {
        if mask.len() != self.bins.len() {
            return Err(BinsepError::shape("masked", &[self.bins.len()], &[mask.len()]));
        }
        let mut out = self.clone();
        for (b, &m) in out.bins.iter_mut().zip(mask) {
            *b *= m;
        }
        Ok(out)
    }

    /// Per-frame energy `Σ_k c_k |X_k|² / N`, with `c_k = 1` at DC and Nyquist and 2
    /// elsewhere. Equals the energy of the windowed frame (Parseval).
    pub fn frame_energies(&self) -> Vec<f64> {
        let n = self.config.frame_len as f64;
        self.bins
            .chunks(self.freqs)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(k, c)| hermitian_weight(k, self.freqs) * c.norm_sqr())
                    .sum::<f64>()
                    / n
            })
            .collect()
    }
}

fn hermitian_weight(k: usize, freqs: usize) -> f64 {
    if k == 0 || k == freqs - 1 {
        1.0
    } else {
        2.0
    }
}

/// Short-time Fourier transform with center padding.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let n = cfg.frame_len;
    if w.len() < n {
        return Err(BinsepError::InputTooShort { len: w.len(), needed: n });
    }
    let frames = cfg.n_frames(w.len());
    let half = n / 2;
    let mut padded = vec![0.0; w.len() + 2 * half];
    padded[half..half + w.len()].copy_from_slice(&w.samples);
    let win = cfg.window.coefficients(n);
    let fft = forward_plan(n);
    let mut spec = ComplexSpectrogram::zeros(frames, *cfg, w.sample_rate);
    let mut buf = vec![0.0; n];
    let mut out = fft.make_output_vec();
    for t in 0..frames {
        let start = t * cfg.hop_len;
        for (j, b) in buf.iter_mut().enumerate() {
            *b = padded.get(start + j).copied().unwrap_or(0.0) * win[j];
        }
        fft.process(&mut buf, &mut out).map_err(|e| BinsepError::invalid("stft", e.to_string()))?;
        spec.bins[t * spec.freqs..(t + 1) * spec.freqs].copy_from_slice(&out);
    }
    Ok(spec)
}

/// Summed squared window in padded coordinates for `frames` frames.
fn window_square_sum(cfg: &StftConfig, frames: usize) -> Vec<f64> {
    let n = cfg.frame_len;
    let win = cfg.window.coefficients(n);
    let mut acc = vec![0.0; (frames - 1) * cfg.hop_len + n];
    for t in 0..frames {
        for j in 0..n {
            acc[t * cfg.hop_len + j] += win[j] * win[j];
        }
    }
    acc
}

fn check_out_len(s: &ComplexSpectrogram, out_len: usize) -> Result<()> {
    let nominal = s.frames * s.config.hop_len;
    if out_len == 0 || out_len.abs_diff(nominal) > s.config.frame_len {
        return Err(BinsepError::invalid(
            "istft",
            format!("output length {out_len} not within one frame of {nominal}"),
        ));
    }
    Ok(())
}

/// Overlap-add inverse of [`stft`], normalized by the summed squared window.
///
/// Samples where that sum vanishes cannot be reconstructed; they are set to zero and a
/// warning is logged.
pub fn istft(s: &ComplexSpectrogram, out_len: usize) -> Result<Waveform> {
    check_out_len(s, out_len)?;
    let cfg = s.config;
    let n = cfg.frame_len;
    let half = n / 2;
    let win = cfg.window.coefficients(n);
    let ifft = inverse_plan(n);
    let mut acc = vec![0.0; (s.frames - 1) * cfg.hop_len + n];
    let mut spec = ifft.make_input_vec();
    let mut frame = vec![0.0; n];
    for t in 0..s.frames {
        spec.copy_from_slice(&s.bins[t * s.freqs..(t + 1) * s.freqs]);
        spec[0].im = 0.0;
        spec[s.freqs - 1].im = 0.0;
        ifft.process(&mut spec, &mut frame).map_err(|e| BinsepError::invalid("istft", e.to_string()))?;
        for j in 0..n {
            acc[t * cfg.hop_len + j] += frame[j] * win[j] / n as f64;
        }
    }
    let wss = window_square_sum(&cfg, s.frames);
    let mut out = vec![0.0; out_len];
    let mut unstable = 0usize;
    for (i, o) in out.iter_mut().enumerate() {
        match wss.get(i + half) {
            Some(&d) if d > 1e-10 => *o = acc[i + half] / d,
            _ => unstable += 1,
        }
    }
    if unstable > 0 {
        log::warn!("istft: reconstruction not exact, {unstable} samples lack window support");
    }
    Waveform::new(out, s.sample_rate)
}

/// Adjoint of `Y ↦ istft(Y)` restricted to Hermitian-consistent spectra.
///
/// For a gradient `grad` with respect to the output waveform, returns per bin
/// `∂L/∂Re(Y) + i·∂L/∂Im(Y)`, frame-major.
pub fn istft_adjoint(grad: &[f64], cfg: &StftConfig, frames: usize) -> Result<Vec<Complex64>> {
    let n = cfg.frame_len;
    let half = n / 2;
    let freqs = cfg.n_freq();
    let win = cfg.window.coefficients(n);
    let wss = window_square_sum(cfg, frames);
    // gradient of the normalized overlap-add buffer, padded coordinates
    let mut g_acc = vec![0.0; wss.len()];
    for (i, &g) in grad.iter().enumerate() {
        if let Some(&d) = wss.get(i + half) {
            if d > 1e-10 {
                g_acc[i + half] = g / d;
            }
        }
    }
    let fft = forward_plan(n);
    let mut buf = vec![0.0; n];
    let mut spec = fft.make_output_vec();
    let mut out = Vec::with_capacity(frames * freqs);
    for t in 0..frames {
        for j in 0..n {
            buf[j] = g_acc[t * cfg.hop_len + j] * win[j] / n as f64;
        }
        fft.process(&mut buf, &mut spec).map_err(|e| BinsepError::invalid("istft_adjoint", e.to_string()))?;
        for (k, c) in spec.iter().enumerate() {
            let w = hermitian_weight(k, freqs);
            let (re, im) = if k == 0 || k == freqs - 1 { (c.re, 0.0) } else { (c.re, c.im) };
            out.push(Complex64::new(w * re, w * im));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqScale {
    Linear,
    Log,
}

/// Real feature tensor `C × T × F`, stored contiguously in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub frames: usize,
    pub freqs: usize,
    pub scale: FreqScale,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, frames: usize, freqs: usize, scale: FreqScale, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * frames * freqs {
            return Err(BinsepError::shape("feature_map", &[channels * frames * freqs], &[data.len()]));
        }
        Ok(Self { channels, frames, freqs, scale, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.frames, self.freqs]
    }

    pub fn get(&self, c: usize, t: usize, f: usize) -> f64 {
        self.data[(c * self.frames + t) * self.freqs + f]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.frames * self.freqs;
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks single-or-multi-channel maps of equal `T × F` along the channel axis.
    pub fn stack(maps: &[&FeatureMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| BinsepError::invalid("feature_map", "nothing to stack"))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for m in maps {
            if m.frames != first.frames || m.freqs != first.freqs || m.scale != first.scale {
                return Err(BinsepError::shape("feature_map stack", &first.shape(), &m.shape()));
            }
            data.extend_from_slice(&m.data);
            channels += m.channels;
        }
        Self::new(channels, first.frames, first.freqs, first.scale, data)
    }
}

/// `log(1 + |X|)` per bin, one channel on the linear frequency axis.
pub fn log_mag(s: &ComplexSpectrogram) -> FeatureMap {
    let data = s.bins.iter().map(|c| c.norm().ln_1p()).collect();
    FeatureMap { channels: 1, frames: s.frames, freqs: s.freqs, scale: FreqScale::Linear, data }
}

/// Sparse linear map between frequency axes; row `j` of the output is
/// `Σ weight · input[index]` over its entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqResampler {
    pub src: usize,
    pub dst: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl FreqResampler {
    /// Linear bins to a geometric grid from bin 1 to Nyquist; DC is merged into bin 1.
    pub fn linear_to_log(f_lin: usize, f_log: usize) -> Result<Self> {
        if f_log > f_lin {
            return Err(BinsepError::invalid(
                "log_freq_rescale",
                format!("target bins {f_log} exceed source bins {f_lin}"),
            ));
        }
        if f_lin < 3 || f_log < 2 {
            return Err(BinsepError::invalid("log_freq_rescale", "need ≥ 3 source and ≥ 2 target bins"));
        }
        let top = (f_lin - 1) as f64;
        let rows = (0..f_log)
            .map(|j| {
                let p = top.powf(j as f64 / (f_log - 1) as f64);
                let i = (p.floor() as usize).clamp(1, f_lin - 2);
                let a = (p - i as f64).clamp(0.0, 1.0);
                let mut row = Vec::with_capacity(3);
                // v'[1] = (v[0] + v[1]) / 2, v'[k] = v[k] for k ≥ 2
                if i == 1 {
                    row.push((0, 0.5 * (1.0 - a)));
                    row.push((1, 0.5 * (1.0 - a)));
                } else {
                    row.push((i, 1.0 - a));
                }
                row.push((i + 1, a));
                row
            })
            .collect();
        Ok(Self { src: f_lin, dst: f_log, rows })
    }

    /// Companion map from the geometric grid back to linear bins. Linear bin `k ≥ 1`
    /// sits at fractional log index `(F_log − 1)·ln k / ln(F_lin − 1)`; DC copies log bin 0.
    pub fn log_to_linear(f_log: usize, f_lin: usize) -> Result<Self> {
        if f_lin < 3 || f_log < 2 || f_log > f_lin {
            return Err(BinsepError::invalid(
                "linear_freq_rescale",
                format!("cannot map {f_log} log bins onto {f_lin} linear bins"),
            ));
        }
        let scale = (f_log - 1) as f64 / ((f_lin - 1) as f64).ln();
        let rows = (0..f_lin)
            .map(|k| {
                if k <= 1 {
                    return vec![(0, 1.0)];
                }
                let u = scale * (k as f64).ln();
                let i = (u.floor() as usize).min(f_log - 2);
                let a = (u - i as f64).clamp(0.0, 1.0);
                vec![(i, 1.0 - a), (i + 1, a)]
            })
            .collect();
        Ok(Self { src: f_log, dst: f_lin, rows })
    }

    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        for (d, row) in dst.iter_mut().zip(&self.rows) {
            *d = row.iter().map(|&(i, w)| w * src[i]).sum();
        }
    }

    /// Accumulates `Aᵀ · grad_dst` into `grad_src`.
    pub fn apply_transpose(&self, grad_dst: &[f64], grad_src: &mut [f64]) {
        for (g, row) in grad_dst.iter().zip(&self.rows) {
            for &(i, w) in row {
                grad_src[i] += w * g;
            }
        }
    }

    /// Applies the map to every `(channel, frame)` row of a feature map.
    pub fn apply_map(&self, m: &FeatureMap, scale: FreqScale) -> Result<FeatureMap> {
        if m.freqs != self.src {
            return Err(BinsepError::shape("freq_rescale", &[self.src], &[m.freqs]));
        }
        let mut data = vec![0.0; m.channels * m.frames * self.dst];
        for (src, dst) in m.data.chunks(self.src).zip(data.chunks_mut(self.dst)) {
            self.apply(src, dst);
        }
        FeatureMap::new(m.channels, m.frames, self.dst, scale, data)
    }
}

/// Resamples a linear-frequency map onto `f_log` geometrically spaced bins.
pub fn log_freq_rescale(m: &FeatureMap, f_log: usize) -> Result<FeatureMap> {
    if m.scale != FreqScale::Linear {
        return Err(BinsepError::invalid("log_freq_rescale", "input is not on the linear axis"));
    }
    FreqResampler::linear_to_log(m.freqs, f_log)?.apply_map(m, FreqScale::Log)
}

/// Maps a log-frequency map back onto `f_lin` linear bins.
pub fn linear_freq_rescale(m: &FeatureMap, f_lin: usize) -> Result<FeatureMap> {
    if m.scale != FreqScale::Log {
        return Err(BinsepError::invalid("linear_freq_rescale", "input is not on the log axis"));
    }
    FreqResampler::log_to_linear(m.freqs, f_lin)?.apply_map(m, FreqScale::Linear)
}
