use binsep::datagen::*;
use binsep::separator::{evaluate, prepare_scenes, EvalOptions, Estimator};
use binsep::signal::{stft, StftConfig, Waveform};
use binsep::wav::write_wav;
use binsep::{ModelConfig, Preset};
use proptest::prelude::*;

fn desk() -> SceneSettings {
    SceneSettings::for_config(&ModelConfig::preset(Preset::Desk))
}

/// Magnitude-weighted mean frequency over the whole clip.
fn centroid_hz(w: &Waveform) -> f64 {
    let s = stft(w, &StftConfig::hann(1024, 256).unwrap()).unwrap();
    let mag = s.magnitude();
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..s.frames {
        for k in 0..s.freqs {
            let m = mag[t * s.freqs + k];
            num += m * k as f64 * w.sample_rate as f64 / 1024.0;
            den += m;
        }
    }
    num / den
}

#[test]
fn synthesis_is_deterministic_and_seed_dependent() {
    for c in Category::ALL {
        let a = synth_source(c, 0.5, 8000, 42).unwrap();
        assert_eq!(a, synth_source(c, 0.5, 8000, 42).unwrap(), "{c}");
        assert_ne!(a, synth_source(c, 0.5, 8000, 43).unwrap(), "{c}");
        assert_eq!(a.len(), 4000);
    }
}

#[test]
fn low_harmonics_sit_below_high_harmonics() {
    for seed in 0..20 {
        let lo = centroid_hz(&synth_source(Category::HarmonicLow, 1.0, 11025, seed).unwrap());
        let hi = centroid_hz(&synth_source(Category::HarmonicHigh, 1.0, 11025, seed).unwrap());
        assert!(lo < hi, "seed {seed}: {lo} vs {hi}");
    }
}

#[test]
fn level_and_headroom() {
    for c in Category::ALL {
        for seed in 0..5 {
            let w = synth_source(c, 1.0, 8000, seed).unwrap();
            assert!(w.peak() <= SOURCE_PEAK + 1e-12, "{c}: peak {}", w.peak());
            assert!(w.rms() <= SOURCE_RMS + 1e-12);
            assert!(w.rms() > 0.02, "{c}: rms {}", w.rms());
        }
    }
}

#[test]
fn category_names_round_trip() {
    for c in Category::ALL {
        assert_eq!(c.name().parse::<Category>().unwrap(), c);
        assert_eq!(Category::from_id(c.id()).unwrap(), c);
    }
    assert!("violin".parse::<Category>().is_err());
    assert!(Category::from_id(6).is_err());
}

#[test]
fn opposite_azimuths_favour_opposite_ears() {
    let s = make_scene(&[Category::Pluck, Category::Chirp], &[45.0, -45.0], &desk(), 1).unwrap();
    let (l, r) = (&s.objects[0].binaural, &s.objects[1].binaural);
    assert!(l.left.rms() > l.right.rms());
    assert!(r.right.rms() > r.left.rms());
    // the rendered level difference is the full interaural gain gap
    let db = 20.0 * (l.left.rms() / l.right.rms()).log10();
    assert!((db - 6.0 * 45f64.to_radians().sin()).abs() < 0.1, "{db}");
}

#[test]
fn boxes_follow_the_azimuth_calibration() {
    let st = desk();
    let s = make_scene(&[Category::AmTone, Category::AmTone], &[0.0, 60.0], &st, 2).unwrap();
    let cx = |o: &SceneObject| (o.bbox.x0 + o.bbox.x1) as f64 / 2.0;
    assert!((cx(&s.objects[0]) - st.frame_w as f64 / 2.0).abs() <= 0.5);
    assert!((cx_to_azimuth(cx(&s.objects[1]), st.frame_w) - 60.0).abs() < 90.0 / st.frame_w as f64 + 1e-9);
    assert_eq!(s.objects[0].bbox.width(), BOX_SIZE);
    assert_eq!(s.render_frame().len(), (st.frame_w * st.frame_h * 3) as usize);
}

#[test]
fn same_seed_same_scene() {
    let st = desk();
    let a = make_scene(&[Category::Pluck, Category::NoiseBurst], &[-30.0, 40.0], &st, 9).unwrap();
    let b = make_scene(&[Category::Pluck, Category::NoiseBurst], &[-30.0, 40.0], &st, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(generate_dataset(4, &st, 5, 0.5).unwrap(), generate_dataset(4, &st, 5, 0.5).unwrap());
}

#[test]
fn invalid_scenes_rejected() {
    let st = desk();
    let e = make_scene(&[Category::Pluck, Category::Pluck], &[10.0, 10.0], &st, 0).unwrap_err();
    assert!(e.to_string().contains("indistinguishable scene"), "{e}");
    assert!(make_scene(&[Category::Pluck, Category::Chirp], &[10.0, 10.0], &st, 0).is_ok());
    assert!(make_scene(&[Category::Pluck], &[95.0], &st, 0).is_err());
    assert!(make_scene(&[Category::Pluck], &[], &st, 0).is_err());
}

#[test]
fn layouts_are_always_separable() {
    for seed in 0..100 {
        for i in 0..5 {
            let (c, a) = scene_layout(seed, i, 0.5);
            assert!((a[0] - a[1]).abs() >= MIN_AZIMUTH_GAP, "seed {seed}: {a:?}");
            assert!(a.iter().all(|x| x.abs() <= MAX_SCENE_AZIMUTH));
            let _ = c;
        }
        let (c, _) = scene_layout(seed, 0, 1.0);
        assert_eq!(c[0], c[1]);
        let (c, _) = scene_layout(seed, 0, 0.0);
        assert_ne!(c[0], c[1]);
    }
}

#[test]
fn split_sizes_follow_ratios() {
    for n in [10, 97, 500] {
        let s = split_indices(n, 0.8, 0.1, 1).unwrap();
        let count = |k| s.iter().filter(|&&x| x == k).count() as f64;
        assert!((count(Split::Train) - 0.8 * n as f64).abs() <= 1.0);
        assert!((count(Split::Val) - 0.1 * n as f64).abs() <= 1.0);
        assert_eq!(s.len(), n);
        assert_eq!(s, split_indices(n, 0.8, 0.1, 1).unwrap());
    }
    assert!(split_indices(10, 0.8, 0.3, 0).is_err());
    assert!(split_indices(10, -0.1, 0.3, 0).is_err());
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let st = desk();
    let scenes = generate_dataset(3, &st, 4, 0.5).unwrap();
    let splits = split_indices(3, 0.7, 0.0, 0).unwrap();
    let m = export_dataset(&scenes, &splits, dir.path()).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), m);
    let (m2, back) = import_dataset(dir.path()).unwrap();
    assert_eq!(m2, m);
    assert_eq!(m.version, MANIFEST_VERSION);
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        for (oa, ob) in a.objects.iter().zip(&b.objects) {
            assert_eq!((oa.category, oa.azimuth_deg, oa.bbox), (ob.category, ob.azimuth_deg, ob.bbox));
            let err = oa.binaural.left.samples.iter().zip(&ob.binaural.left.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 1.0 / 32768.0 + 1e-12, "{err}");
        }
    }
}

#[test]
fn tampered_wav_is_named_on_import() {
    let dir = tempfile::tempdir().unwrap();
    let st = desk();
    let scenes = generate_dataset(2, &st, 4, 0.5).unwrap();
    let m = export_dataset(&scenes, &split_indices(2, 1.0, 0.0, 0).unwrap(), dir.path()).unwrap();
    let victim = m.scenes[1].objects[0].stem_wav.clone();
    let short = Waveform::zeros(100, st.sample_rate);
    write_wav(dir.path().join(&victim), &[&short, &short]).unwrap();
    let e = import_dataset(dir.path()).unwrap_err();
    assert!(e.to_string().contains(&victim), "{e}");
    std::fs::remove_file(dir.path().join(&victim)).unwrap();
    let e = import_dataset(dir.path()).unwrap_err();
    assert!(e.to_string().contains(&victim), "{e}");
}

#[test]
fn same_category_oracle_beats_mixture() {
    let cfg = ModelConfig::preset(Preset::Desk);
    let scenes = generate_dataset(6, &SceneSettings::for_config(&cfg), 21, 1.0).unwrap();
    assert!(scenes.iter().all(|s| s.same_category()));
    let prep = prepare_scenes(&scenes, &cfg).unwrap();
    let opts = EvalOptions { filter_len: 64, ..Default::default() };
    let mean = |est| {
        let r = evaluate(&prep, est, &opts).unwrap();
        r.iter().map(|x| x.sdr_db).sum::<f64>() / r.len() as f64
    };
    let (o, b) = (mean(Estimator::Oracle), mean(Estimator::Baseline));
    assert!(o > b, "oracle {o} baseline {b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn calibration_is_a_monotone_bijection(a in -90.0f64..=90.0, b in -90.0f64..=90.0) {
        let w = 1280;
        prop_assert!((cx_to_azimuth(azimuth_to_cx(a, w), w) - a).abs() < 1e-9);
        if a < b {
            prop_assert!(azimuth_to_cx(a, w) < azimuth_to_cx(b, w));
        }
    }
}
