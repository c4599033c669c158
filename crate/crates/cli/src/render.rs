//! Grayscale spectrogram images.

use std::path::Path;

use binsep::signal::ComplexSpectrogram;

use crate::error::{CliError, Result};

/// Lowest level shown; anything quieter is black.
pub const FLOOR_DB: f64 = -60.0;

/// An 8-bit grayscale image, row-major, top row first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

/// Maps a level in dB onto [0, 255] over the fixed range [−60, 0].
pub fn db_to_gray(db: f64) -> u8 {
    if db.is_nan() {
        return 0;
    }
    let x = ((db - FLOOR_DB) / -FLOOR_DB).clamp(0.0, 1.0);
    (x * 255.0).round() as u8
}

/// Log-magnitude image of `spec`: one column per frame, low frequencies at the bottom.
/// 0 dB is the peak bin magnitude of a full-scale sinusoid under the analysis window.
pub fn spectrogram_gray(spec: &ComplexSpectrogram) -> GrayImage {
    let window_sum: f64 = spec.config.window.coefficients(spec.config.frame_len).iter().sum();
    let reference = window_sum / 2.0;
    let (w, h) = (spec.frames, spec.freqs);
    let mut pixels = vec![0u8; w * h];
    for t in 0..w {
        for f in 0..h {
            let mag = spec.get(t, f).norm() / reference;
            let db = 20.0 * mag.log10();
            pixels[(h - 1 - f) * w + t] = db_to_gray(db);
        }
    }
    GrayImage { width: w as u32, height: h as u32, pixels }
}

pub fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), img.width, img.height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&img.pixels)?;
    w.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use binsep::signal::{stft, StftConfig, Waveform};

    #[test]
    fn fixed_range_endpoints() {
        assert_eq!(db_to_gray(0.0), 255);
        assert_eq!(db_to_gray(6.0), 255);
        assert_eq!(db_to_gray(-60.0), 0);
        assert_eq!(db_to_gray(-90.0), 0);
        assert_eq!(db_to_gray(f64::NEG_INFINITY), 0);
        assert_eq!(db_to_gray(f64::NAN), 0);
        // 127.5 rounds away from zero.
        assert_eq!(db_to_gray(-30.0), 128);
    }

    #[test]
    fn full_scale_bin_tone_is_white() {
        let cfg = StftConfig::hann(64, 16).unwrap();
        let sr = 8000;
        let k = 8.0;
        let x: Vec<f64> = (0..1024).map(|n| (2.0 * std::f64::consts::PI * k * n as f64 / 64.0).cos()).collect();
        let s = stft(&Waveform::new(x, sr).unwrap(), &cfg).unwrap();
        let img = spectrogram_gray(&s);
        assert_eq!((img.width as usize, img.height as usize), (s.frames, 33));
        // Row for bin 8 counted from the bottom, in a frame away from the edges.
        let t = s.frames / 2;
        let row = 32 - 8;
        assert_eq!(img.pixels[row * img.width as usize + t], 255);
        // Bins far from the tone sit below the floor.
        assert_eq!(img.pixels[(32 - 24) * img.width as usize + t], 0);
    }

    #[test]
    fn silence_is_black_and_png_is_reproducible() {
        let cfg = StftConfig::hann(32, 8).unwrap();
        let s = stft(&Waveform::zeros(256, 8000), &cfg).unwrap();
        let img = spectrogram_gray(&s);
        assert!(img.pixels.iter().all(|&p| p == 0));
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        write_png(&a, &img).unwrap();
        write_png(&b, &img).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
