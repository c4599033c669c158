use binsep::signal::*;
use binsep::BinsepError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_wave(len: usize, sr: u32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), sr).unwrap()
}

/// Direct DFT of one center-padded, windowed frame.
fn dft_oracle(x: &[f64], cfg: &StftConfig, t: usize) -> Vec<(f64, f64)> {
    let n = cfg.frame_len;
    let win = cfg.window.coefficients(n);
    let half = (n / 2) as i64;
    let frame: Vec<f64> = (0..n)
        .map(|j| {
            let idx = (t * cfg.hop_len + j) as i64 - half;
            if idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize] * win[j]
            } else {
                0.0
            }
        })
        .collect();
    (0..=n / 2)
        .map(|k| {
            frame.iter().enumerate().fold((0.0, 0.0), |(re, im), (j, &v)| {
                let a = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

#[test]
fn stft_matches_direct_dft() {
    let cfg = StftConfig::hann(62, 16).unwrap();
    let w = random_wave(400, 8000, 1);
    let s = stft(&w, &cfg).unwrap();
    for t in [0, 1, 5, s.frames - 1] {
        let o = dft_oracle(&w.samples, &cfg, t);
        for (k, &(re, im)) in o.iter().enumerate() {
            let c = s.get(t, k);
            assert!((c.re - re).abs() < 1e-9 && (c.im - im).abs() < 1e-9, "t={t} k={k}");
        }
    }
}

#[test]
fn zero_input_gives_zero_spectrogram_and_waveform() {
    let cfg = StftConfig::hann(1022, 256).unwrap();
    let w = Waveform::zeros(65024, 11025);
    let s = stft(&w, &cfg).unwrap();
    assert_eq!(s.freqs, 512);
    assert!(s.bins.iter().all(|c| c.norm() == 0.0));
    let y = istft(&s, w.len()).unwrap();
    assert!(y.samples.iter().all(|&v| v == 0.0));
    assert!(log_mag(&s).data.iter().all(|&v| v == 0.0));
}

#[test]
fn bin_centered_sinusoid_is_confined_to_its_bin() {
    let n = 64;
    let k0 = 5;
    let x: Vec<f64> = (0..512).map(|i| (2.0 * std::f64::consts::PI * (k0 * i) as f64 / n as f64).cos()).collect();
    let w = Waveform::new(x, 8000).unwrap();
    // rectangular window: exactly one bin in interior frames
    let rect = StftConfig::new(n, 16, Window::Rectangular).unwrap();
    let s = stft(&w, &rect).unwrap();
    let t = 10;
    for k in 0..=n / 2 {
        let m = s.get(t, k).norm();
        if k == k0 {
            assert!((m - n as f64 / 2.0).abs() < 1e-9);
        } else {
            assert!(m < 1e-9, "bin {k} has {m}");
        }
    }
    // Hann: everything beyond the main lobe is below -60 dB
    let hann = StftConfig::hann(n, 16).unwrap();
    let s = stft(&w, &hann).unwrap();
    let peak = s.get(t, k0).norm();
    for k in 0..=n / 2 {
        if k.abs_diff(k0) > 1 {
            assert!(20.0 * (s.get(t, k).norm() / peak).log10() < -60.0);
        }
    }
}

#[test]
fn short_signal_is_rejected() {
    let cfg = StftConfig::hann(254, 64).unwrap();
    let err = stft(&Waveform::zeros(100, 8000), &cfg).unwrap_err();
    assert!(matches!(err, BinsepError::InputTooShort { len: 100, needed: 254 }));
}

#[test]
fn round_trip_is_exact_for_presets() {
    for (n, hop, len) in [(1022, 256, 20000), (254, 64, 4032), (62, 16, 240)] {
        let cfg = StftConfig::hann(n, hop).unwrap();
        assert!(cfg.nola());
        let w = random_wave(len, 8000, n as u64);
        let y = istft(&stft(&w, &cfg).unwrap(), len).unwrap();
        let err = w.samples.iter().zip(&y.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{n}/{hop}: {err}");
    }
}

#[test]
fn identity_mask_reconstructs_mixture() {
    let cfg = StftConfig::hann(254, 64).unwrap();
    let a = random_wave(4032, 8000, 3);
    let b = random_wave(4032, 8000, 4);
    let m: Vec<f64> = a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect();
    let s = stft(&Waveform::new(m.clone(), 8000).unwrap(), &cfg).unwrap();
    let y = istft(&s.masked(&vec![1.0; s.bins.len()]).unwrap(), m.len()).unwrap();
    assert!(m.iter().zip(&y.samples).all(|(a, b)| (a - b).abs() < 1e-5));
}

#[test]
fn parseval_holds_per_frame() {
    let cfg = StftConfig::hann(254, 64).unwrap();
    for seed in 0..5 {
        let w = random_wave(2000, 8000, seed);
        let s = stft(&w, &cfg).unwrap();
        let e = s.frame_energies();
        for t in 0..s.frames {
            let direct: f64 = dft_frame_energy(&w.samples, &cfg, t);
            assert!((e[t] - direct).abs() <= 1e-9 * direct.max(1.0), "frame {t}");
        }
    }
}

fn dft_frame_energy(x: &[f64], cfg: &StftConfig, t: usize) -> f64 {
    let win = cfg.window.coefficients(cfg.frame_len);
    let half = (cfg.frame_len / 2) as i64;
    (0..cfg.frame_len)
        .map(|j| {
            let idx = (t * cfg.hop_len + j) as i64 - half;
            if idx >= 0 && (idx as usize) < x.len() {
                (x[idx as usize] * win[j]).powi(2)
            } else {
                0.0
            }
        })
        .sum()
}

#[test]
fn istft_rejects_far_off_lengths() {
    let cfg = StftConfig::hann(62, 16).unwrap();
    let s = stft(&random_wave(240, 8000, 0), &cfg).unwrap();
    assert!(istft(&s, 1000).is_err());
    assert!(istft(&s, 0).is_err());
}

#[test]
fn istft_without_window_support_still_computes() {
    // a hop larger than the nonzero Hann support leaves gaps; reconstruction is best-effort
    let cfg = StftConfig::hann(8, 8).unwrap();
    assert!(!cfg.nola());
    let s = stft(&random_wave(64, 8000, 2), &cfg).unwrap();
    let y = istft(&s, 64).unwrap();
    assert_eq!(y.len(), 64);
    assert!(y.samples.iter().all(|v| v.is_finite()));
}

#[test]
fn log_freq_rescale_preserves_constants_and_rejects_upsampling() {
    let m = FeatureMap::new(1, 3, 512, FreqScale::Linear, vec![0.7; 3 * 512]).unwrap();
    let l = log_freq_rescale(&m, 256).unwrap();
    assert_eq!(l.shape(), [1, 3, 256]);
    assert!(l.data.iter().all(|v| (v - 0.7).abs() < 1e-12));
    let back = linear_freq_rescale(&l, 512).unwrap();
    assert!(back.data.iter().all(|v| (v - 0.7).abs() < 1e-12));
    let small = FeatureMap::new(1, 1, 16, FreqScale::Linear, vec![0.0; 16]).unwrap();
    assert!(log_freq_rescale(&small, 32).is_err());
}

#[test]
fn delta_at_lowest_bin_lands_in_lowest_log_bin() {
    let mut data = vec![0.0; 512];
    data[1] = 1.0;
    let m = FeatureMap::new(1, 1, 512, FreqScale::Linear, data).unwrap();
    let l = log_freq_rescale(&m, 256).unwrap();
    let argmax = (0..256).max_by(|&a, &b| l.data[a].partial_cmp(&l.data[b]).unwrap()).unwrap();
    assert_eq!(argmax, 0);
    assert!(l.data[0] > 0.0);
}

#[test]
fn smooth_spectrum_survives_log_round_trip() {
    // band-limited in log-frequency: a few slow cosines of ln(k)
    let f_lin = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let coefs: Vec<(f64, f64)> = (1..=4).map(|_| (rng.gen_range(-0.3..0.3), rng.gen_range(0.0..6.28))).collect();
        let u_max = ((f_lin - 1) as f64).ln();
        let data: Vec<f64> = (0..f_lin)
            .map(|k| {
                let u = (k.max(1) as f64).ln() / u_max;
                1.0 + coefs.iter().enumerate().map(|(i, (a, p))| a * (std::f64::consts::PI * (i + 1) as f64 * u + p).cos()).sum::<f64>()
            })
            .collect();
        let m = FeatureMap::new(1, 1, f_lin, FreqScale::Linear, data.clone()).unwrap();
        let back = linear_freq_rescale(&log_freq_rescale(&m, 256).unwrap(), f_lin).unwrap();
        let num: f64 = data.iter().zip(&back.data).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = data.iter().map(|a| a * a).sum();
        assert!((num / den).sqrt() < 0.05, "relative error {}", (num / den).sqrt());
    }
}

#[test]
fn log_mag_values() {
    let cfg = StftConfig::hann(8, 2).unwrap();
    let mut s = ComplexSpectrogram::zeros(1, cfg, 8000);
    s.bins[0].re = std::f64::consts::E - 1.0;
    s.bins[1].im = 3.0;
    s.bins[2].re = 2.0;
    let m = log_mag(&s);
    assert!((m.data[0] - 1.0).abs() < 1e-12);
    assert!(m.data[1] > m.data[2]);
    assert_eq!(m.data[3], 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stft_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let cfg = StftConfig::hann(62, 16).unwrap();
        let x = random_wave(300, 8000, seed);
        let y = random_wave(300, 8000, seed ^ 1);
        let z = Waveform::new(x.samples.iter().zip(&y.samples).map(|(p, q)| a * p + b * q).collect(), 8000).unwrap();
        let (sx, sy, sz) = (stft(&x, &cfg).unwrap(), stft(&y, &cfg).unwrap(), stft(&z, &cfg).unwrap());
        for i in 0..sz.bins.len() {
            prop_assert!((sz.bins[i] - (sx.bins[i] * a + sy.bins[i] * b)).norm() < 1e-6);
        }
    }

    #[test]
    fn round_trip_on_random_lengths(seed in any::<u64>(), len in 62usize..600) {
        let cfg = StftConfig::hann(62, 16).unwrap();
        let x = random_wave(len, 8000, seed);
        let y = istft(&stft(&x, &cfg).unwrap(), len).unwrap();
        for (p, q) in x.samples.iter().zip(&y.samples) {
            prop_assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn parseval_ratio_is_input_independent(seed in any::<u64>()) {
        let cfg = StftConfig::hann(62, 16).unwrap();
        let x = random_wave(300, 8000, seed);
        let s = stft(&x, &cfg).unwrap();
        for (t, row) in s.bins.chunks(s.freqs).enumerate() {
            let time = dft_frame_energy(&x.samples, &cfg, t);
            let freq: f64 = row.iter().enumerate().map(|(k, c)| if k == 0 || k == s.freqs - 1 { 1.0 } else { 2.0 } * c.norm_sqr()).sum();
            prop_assert!((freq / time / cfg.frame_len as f64 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn log_mag_is_monotone(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let cfg = StftConfig::hann(4, 2).unwrap();
        let mut s = ComplexSpectrogram::zeros(1, cfg, 8000);
        s.bins[0].re = a;
        s.bins[1].re = -b;
        let m = log_mag(&s);
        if a > b { prop_assert!(m.data[0] > m.data[1]); }
        if a < b { prop_assert!(m.data[0] < m.data[1]); }
    }
}
