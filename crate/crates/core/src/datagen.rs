//! Synthetic two-object scenes: procedural sources, binaural rendering, object patches
//! whose horizontal position encodes azimuth, and a WAV + JSON manifest format.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{BinsepError, Result};
use crate::posenc::BoundingBox;
use crate::signal::Waveform;
use crate::spatial::{mix, mix_mono, render_binaural, BinauralClip};
use crate::wav::{read_wav, write_wav};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Target RMS of a freshly synthesized source before peak limiting.
pub const SOURCE_RMS: f64 = 0.1;
pub const SOURCE_PEAK: f64 = 0.9;
/// Side of the rendered object box in frame pixels.
pub const BOX_SIZE: u32 = 64;
/// Azimuth range and minimum pairwise separation used by [`generate_dataset`].
pub const MAX_SCENE_AZIMUTH: f64 = 80.0;
pub const MIN_AZIMUTH_GAP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    HarmonicLow,
    HarmonicHigh,
    Pluck,
    NoiseBurst,
    Chirp,
    AmTone,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::HarmonicLow,
        Category::HarmonicHigh,
        Category::Pluck,
        Category::NoiseBurst,
        Category::Chirp,
        Category::AmTone,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| BinsepError::invalid("category", format!("unknown category id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::HarmonicLow => "harmonic-low",
            Category::HarmonicHigh => "harmonic-high",
            Category::Pluck => "pluck",
            Category::NoiseBurst => "noise-burst",
            Category::Chirp => "chirp",
            Category::AmTone => "am-tone",
        }
    }

    /// Base RGB colour and stripe layout of the category texture.
    fn palette(self) -> ([f64; 3], [f64; 3], f64, f64) {
        // (base, stripe, stripe angle in radians, stripes per patch)
        match self {
            Category::HarmonicLow => ([0.75, 0.20, 0.15], [0.35, 0.05, 0.05], 0.0, 3.0),
            Category::HarmonicHigh => ([0.95, 0.80, 0.20], [0.55, 0.40, 0.05], 0.0, 8.0),
            Category::Pluck => ([0.20, 0.60, 0.25], [0.85, 0.95, 0.80], PI / 2.0, 4.0),
            Category::NoiseBurst => ([0.50, 0.50, 0.55], [0.15, 0.15, 0.20], PI / 4.0, 6.0),
            Category::Chirp => ([0.20, 0.35, 0.85], [0.80, 0.90, 1.00], -PI / 4.0, 5.0),
            Category::AmTone => ([0.65, 0.25, 0.70], [0.95, 0.75, 0.95], PI / 2.0, 10.0),
        }
    }
}

impl std::str::FromStr for Category {
    type Err = BinsepError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| BinsepError::invalid("category", format!("unknown category `{s}`")))
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sum of harmonics `1..=n` of `f0(t)` with amplitudes `1/k^tilt`, skipping any above Nyquist.
fn harmonic_note(out: &mut [f64], start: usize, sr: f64, f0: f64, n: usize, tilt: f64, env: impl Fn(f64) -> f64) {
    let mut phase = vec![0.0f64; n];
    for (i, y) in out[start..].iter_mut().enumerate() {
        let t = i as f64 / sr;
        let e = env(t);
        for (k, ph) in phase.iter_mut().enumerate() {
            let f = f0 * (k + 1) as f64;
            if f >= sr / 2.0 {
                break;
            }
            *y += e * ph.sin() / ((k + 1) as f64).powf(tilt);
            *ph += 2.0 * PI * f / sr;
        }
    }
}

/// Deterministic procedural source for `category`, RMS-normalized and peak-limited to 0.9.
pub fn synth_source(category: Category, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if !(duration_s > 0.0) || sample_rate == 0 {
        return Err(BinsepError::invalid("synth_source", "duration and sample rate must be positive"));
    }
    let n = (duration_s * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(BinsepError::invalid("synth_source", "duration shorter than one sample"));
    }
    let sr = sample_rate as f64;
    let nyq = sr / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, category.id() as u64 + 1));
    let mut y = vec![0.0; n];
    match category {
        Category::HarmonicLow | Category::HarmonicHigh => {
            let (lo, hi, harmonics, tilt) = if category == Category::HarmonicLow {
                (80.0, 180.0, 8, 1.5)
            } else {
                ((nyq * 0.2).min(700.0), (nyq * 0.3).min(1100.0), 3, 1.0)
            };
            let notes = rng.gen_range(2..=4);
            let note_len = n / notes + 1;
            for k in 0..notes {
                let f0 = rng.gen_range(lo..hi);
                let start = k * note_len;
                if start >= n {
                    break;
                }
                let len = note_len.min(n - start);
                let attack = 0.02;
                harmonic_note(&mut y[..start + len], start, sr, f0, harmonics, tilt, |t| {
                    (t / attack).min(1.0) * (0.7 + 0.3 * (2.0 * PI * 5.0 * t).cos())
                });
            }
        }
        Category::Pluck => {
            let mut start = 0usize;
            while start < n {
                let f0 = rng.gen_range(220.0..440.0f64);
                let decay = rng.gen_range(6.0..12.0);
                harmonic_note(&mut y, start, sr, f0, 6, 1.2, |t| (-decay * t).exp());
                start += rng.gen_range((0.12 * sr) as usize..(0.3 * sr) as usize).max(1);
            }
        }
        Category::NoiseBurst => {
            let center = rng.gen_range(0.15..0.35) * nyq;
            let r = 0.97;
            let w = 2.0 * PI * center / sr;
            let (a1, a2) = (2.0 * r * w.cos(), -r * r);
            let (mut y1, mut y2) = (0.0, 0.0);
            let period = rng.gen_range(0.15..0.3) * sr;
            let duty = rng.gen_range(0.3..0.6);
            for (i, v) in y.iter_mut().enumerate() {
                let x: f64 = rng.gen_range(-1.0..1.0);
                let out = x + a1 * y1 + a2 * y2;
                y2 = y1;
                y1 = out;
                let phase = (i as f64 % period) / period;
                let gate = if phase < duty { (phase / duty * PI).sin() } else { 0.0 };
                *v = out * gate;
            }
        }
        Category::Chirp => {
            let f_lo = rng.gen_range(0.08..0.15) * nyq;
            let f_hi = rng.gen_range(0.4..0.6) * nyq;
            let sweep = rng.gen_range(0.25..0.5) * sr;
            let up = rng.gen_bool(0.5);
            let mut ph = 0.0f64;
            for (i, v) in y.iter_mut().enumerate() {
                let u = (i as f64 % sweep) / sweep;
                let u = if up { u } else { 1.0 - u };
                let f = f_lo * (f_hi / f_lo).powf(u);
                *v = ph.sin() + 0.3 * (2.0 * ph).sin();
                ph += 2.0 * PI * f / sr;
            }
        }
        Category::AmTone => {
            let fc = rng.gen_range(0.1..0.2) * nyq;
            let fm = rng.gen_range(3.0..8.0);
            let depth = rng.gen_range(0.6..0.95);
            let phi = rng.gen_range(0.0..2.0 * PI);
            for (i, v) in y.iter_mut().enumerate() {
                let t = i as f64 / sr;
                *v = (1.0 + depth * (2.0 * PI * fm * t + phi).sin()) * (2.0 * PI * fc * t).sin();
            }
        }
    }
    let rms = (y.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        y.iter_mut().for_each(|v| *v *= SOURCE_RMS / rms);
    }
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > SOURCE_PEAK {
        y.iter_mut().for_each(|v| *v *= SOURCE_PEAK / peak);
    }
    Waveform::new(y, sample_rate)
}

/// Horizontal box centre for `azimuth_deg`: `cx = W/2·(1 + az/90)`.
pub fn azimuth_to_cx(azimuth_deg: f64, frame_w: u32) -> f64 {
    frame_w as f64 / 2.0 * (1.0 + azimuth_deg / 90.0)
}

/// Inverse of [`azimuth_to_cx`]: `az = 90·(2·cx/W − 1)`.
pub fn cx_to_azimuth(cx: f64, frame_w: u32) -> f64 {
    90.0 * (2.0 * cx / frame_w as f64 - 1.0)
}

/// Shared rendering settings of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSettings {
    pub duration_s: f64,
    pub sample_rate: u32,
    pub frame_w: u32,
    pub frame_h: u32,
    pub box_size: u32,
}

impl SceneSettings {
    /// Clips sized to exactly fill the model's input frames.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        Self {
            duration_s: cfg.clip_duration_s(),
            sample_rate: cfg.sample_rate,
            frame_w: cfg.frame_w,
            frame_h: cfg.frame_h,
            box_size: BOX_SIZE,
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub category: Category,
    pub azimuth_deg: f64,
    /// Dry mono source.
    pub stem: Waveform,
    /// The source rendered at its azimuth.
    pub binaural: BinauralClip,
    pub bbox: BoundingBox,
    /// Seed of the small per-object texture variation.
    pub patch_seed: u64,
}

impl SceneObject {
    /// RGB value in [0, 1] of the object texture at relative position `(u, v) ∈ [0, 1]²`.
    pub fn texture(&self, u: f64, v: f64) -> [f64; 3] {
        texture(self.category, self.patch_seed, u, v)
    }

    /// `[3, size, size]` channel-major patch covering the object box.
    pub fn patch(&self, size: usize) -> Vec<f64> {
        let mut out = vec![0.0; 3 * size * size];
        for i in 0..size {
            for j in 0..size {
                let rgb = self.texture((j as f64 + 0.5) / size as f64, (i as f64 + 0.5) / size as f64);
                for c in 0..3 {
                    out[(c * size + i) * size + j] = rgb[c];
                }
            }
        }
        out
    }
}

fn texture(category: Category, patch_seed: u64, u: f64, v: f64) -> [f64; 3] {
    let (base, stripe, angle, count) = category.palette();
    let jitter = (mix_seed(patch_seed, 7) % 1000) as f64 / 1000.0;
    let shade = 0.85 + 0.3 * jitter;
    let phase = jitter * 2.0 * PI;
    let s = (u - 0.5) * angle.cos() + (v - 0.5) * angle.sin();
    let w = 0.5 + 0.5 * (2.0 * PI * count * s + phase).sin();
    std::array::from_fn(|c| ((base[c] * (1.0 - w) + stripe[c] * w) * shade).clamp(0.0, 1.0))
}

/// Two (or more) objects rendered into one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: usize,
    pub seed: u64,
    pub settings: SceneSettings,
    pub objects: Vec<SceneObject>,
}

impl SceneSample {
    /// Binaural mixture: sum of the rendered stems.
    pub fn mixture(&self) -> Result<BinauralClip> {
        let clips: Vec<&BinauralClip> = self.objects.iter().map(|o| &o.binaural).collect();
        mix(&clips)
    }

    /// Mono mixture: sum of the dry stems.
    pub fn mono_mixture(&self) -> Result<Waveform> {
        let stems: Vec<&Waveform> = self.objects.iter().map(|o| &o.stem).collect();
        mix_mono(&stems)
    }

    pub fn same_category(&self) -> bool {
        self.objects.windows(2).all(|w| w[0].category == w[1].category)
    }

    /// Full `frame_w × frame_h` RGB8 frame, row-major: grey background plus each object
    /// texture drawn in its box (later objects on top).
    pub fn render_frame(&self) -> Vec<u8> {
        let (w, h) = (self.settings.frame_w as usize, self.settings.frame_h as usize);
        let mut img = vec![96u8; w * h * 3];
        for o in &self.objects {
            let b = o.bbox;
            let (bw, bh) = (b.width() as f64, b.height() as f64);
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    let rgb = o.texture((x - b.x0) as f64 / bw, (y - b.y0) as f64 / bh);
                    let idx = (y as usize * w + x as usize) * 3;
                    for c in 0..3 {
                        img[idx + c] = (rgb[c] * 255.0).round() as u8;
                    }
                }
            }
        }
        img
    }
}

/// Builds one scene with one object per (category, azimuth) pair.
pub fn make_scene(
    categories: &[Category],
    azimuths: &[f64],
    settings: &SceneSettings,
    seed: u64,
) -> Result<SceneSample> {
    if categories.is_empty() || categories.len() != azimuths.len() {
        return Err(BinsepError::invalid("make_scene", "need one azimuth per category and at least one object"));
    }
    for (i, &a) in azimuths.iter().enumerate() {
        if !(a.abs() <= 90.0) {
            return Err(BinsepError::invalid("make_scene", format!("azimuth {a} outside [-90, 90]")));
        }
        for j in 0..i {
            if categories[i] == categories[j] && azimuths[j] == a {
                return Err(BinsepError::invalid("make_scene", "indistinguishable scene"));
            }
        }
    }
    let objects = categories
        .iter()
        .zip(azimuths)
        .enumerate()
        .map(|(i, (&category, &azimuth_deg))| {
            let stem = synth_source(category, settings.duration_s, settings.sample_rate, mix_seed(seed, 2 * i as u64))?;
            let binaural = render_binaural(&stem, azimuth_deg)?;
            let bbox = BoundingBox::centered(
                azimuth_to_cx(azimuth_deg, settings.frame_w),
                settings.frame_h as f64 / 2.0,
                settings.box_size,
                settings.box_size,
                settings.frame_w,
                settings.frame_h,
            )?;
            Ok(SceneObject { category, azimuth_deg, stem, binaural, bbox, patch_seed: mix_seed(seed, 2 * i as u64 + 1) })
        })
        .collect::<Result<_>>()?;
    Ok(SceneSample { id: 0, seed, settings: *settings, objects })
}

/// Category and azimuth draw for scene `index` of a dataset.
pub fn scene_layout(seed: u64, index: usize, same_category_fraction: f64) -> ([Category; 2], [f64; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let a = *Category::ALL.choose(&mut rng).expect("non-empty");
    let b = if rng.gen_bool(same_category_fraction.clamp(0.0, 1.0)) {
        a
    } else {
        **Category::ALL.iter().filter(|&&c| c != a).collect::<Vec<_>>().choose(&mut rng).expect("non-empty")
    };
    loop {
        let x = rng.gen_range(-MAX_SCENE_AZIMUTH..=MAX_SCENE_AZIMUTH);
        let y = rng.gen_range(-MAX_SCENE_AZIMUTH..=MAX_SCENE_AZIMUTH);
        if (x - y).abs() >= MIN_AZIMUTH_GAP {
            return ([a, b], [x.round(), y.round()]);
        }
    }
}

/// `n` two-object scenes; scene `i` is fully determined by `(seed, i)`.
pub fn generate_dataset(
    n: usize,
    settings: &SceneSettings,
    seed: u64,
    same_category_fraction: f64,
) -> Result<Vec<SceneSample>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (cats, azs) = scene_layout(seed, i, same_category_fraction);
            let mut s = make_scene(&cats, &azs, settings, mix_seed(seed ^ 0x5CE0E, i as u64))?;
            s.id = i;
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Shuffled disjoint index sets with sizes `round(ratio·n)` (the test split takes the
/// remainder).
pub fn split_indices(n: usize, train: f64, val: f64, seed: u64) -> Result<Vec<Split>> {
    if !(train >= 0.0 && val >= 0.0 && train + val <= 1.0 + 1e-12) {
        return Err(BinsepError::invalid("split", format!("ratios train={train} val={val} are invalid")));
    }
    let n_train = ((train * n as f64).round() as usize).min(n);
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Test; n];
    for (k, &i) in idx.iter().enumerate() {
        out[i] = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub category: Category,
    pub azimuth_deg: f64,
    pub r#box: [u32; 4],
    /// Stereo WAV of the rendered stem, relative to the manifest directory.
    pub stem_wav: String,
    /// Mono WAV of the dry source.
    pub mono_wav: String,
    pub patch_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub seed: u64,
    pub split: Split,
    pub duration_s: f64,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub frame_size: [u32; 2],
    pub sample_rate: u32,
    pub box_size: u32,
    pub scenes: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        self.scenes.iter().filter(|s| s.split == split).map(|s| s.id).collect()
    }
}

/// Writes one stereo and one mono WAV per object plus `manifest.json` into `dir`.
/// Samples are stored as 16-bit PCM, so a re-import differs by at most half an LSB.
pub fn export_dataset(scenes: &[SceneSample], splits: &[Split], dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    if scenes.len() != splits.len() {
        return Err(BinsepError::shape("export_dataset splits", &[scenes.len()], &[splits.len()]));
    }
    let first = scenes.first().ok_or_else(|| BinsepError::invalid("export_dataset", "no scenes"))?;
    fs::create_dir_all(dir.join("wav"))?;
    let records = scenes
        .par_iter()
        .zip(splits)
        .map(|(s, &split)| {
            if s.settings != first.settings {
                return Err(BinsepError::invalid("export_dataset", format!("scene {} uses different settings", s.id)));
            }
            let objects = s
                .objects
                .iter()
                .enumerate()
                .map(|(k, o)| {
                    let stem_wav = format!("wav/scene{:05}_obj{k}_{}.wav", s.id, o.category);
                    let mono_wav = format!("wav/scene{:05}_obj{k}_{}_mono.wav", s.id, o.category);
                    write_wav(dir.join(&stem_wav), &[&o.binaural.left, &o.binaural.right])?;
                    write_wav(dir.join(&mono_wav), &[&o.stem])?;
                    Ok(ObjectRecord {
                        category: o.category,
                        azimuth_deg: o.azimuth_deg,
                        r#box: o.bbox.to_array(),
                        stem_wav,
                        mono_wav,
                        patch_seed: o.patch_seed,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(SceneRecord { id: s.id, seed: s.seed, split, duration_s: s.settings.duration_s, objects })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        frame_size: [first.settings.frame_w, first.settings.frame_h],
        sample_rate: first.settings.sample_rate,
        box_size: first.settings.box_size,
        scenes: records,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn load_checked(path: PathBuf, channels: usize, len: usize, sr: u32) -> Result<Vec<Waveform>> {
    if !path.is_file() {
        return Err(BinsepError::data(&path, "referenced file is missing"));
    }
    let w = read_wav(&path)?;
    if w.len() != channels {
        return Err(BinsepError::data(&path, format!("expected {channels} channels, found {}", w.len())));
    }
    if w[0].len() != len {
        return Err(BinsepError::data(&path, format!("expected {len} samples, found {}", w[0].len())));
    }
    if w[0].sample_rate != sr {
        return Err(BinsepError::data(&path, format!("expected {sr} Hz, found {}", w[0].sample_rate)));
    }
    Ok(w)
}

/// Reads `manifest.json` from `dir` without touching the audio files.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| BinsepError::data(&path, e.to_string()))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| BinsepError::data(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(BinsepError::data(&path, format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Reads a dataset written by [`export_dataset`], verifying every referenced WAV.
pub fn import_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let [frame_w, frame_h] = m.frame_size;
    let scenes = m
        .scenes
        .par_iter()
        .map(|rec| {
            let settings =
                SceneSettings { duration_s: rec.duration_s, sample_rate: m.sample_rate, frame_w, frame_h, box_size: m.box_size };
            let len = settings.n_samples();
            let objects = rec
                .objects
                .iter()
                .map(|o| {
                    let mut st = load_checked(dir.join(&o.stem_wav), 2, len, m.sample_rate)?;
                    let mono = load_checked(dir.join(&o.mono_wav), 1, len, m.sample_rate)?.remove(0);
                    let right = st.remove(1);
                    let left = st.remove(0);
                    let [x0, y0, x1, y1] = o.r#box;
                    Ok(SceneObject {
                        category: o.category,
                        azimuth_deg: o.azimuth_deg,
                        stem: mono,
                        binaural: BinauralClip::new(left, right)?,
                        bbox: BoundingBox::new(x0, y0, x1, y1, frame_w, frame_h)?,
                        patch_seed: o.patch_seed,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(SceneSample { id: rec.id, seed: rec.seed, settings, objects })
        })
        .collect::<Result<_>>()?;
    Ok((m, scenes))
}
