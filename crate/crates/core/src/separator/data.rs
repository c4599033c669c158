use std::sync::Arc;

use binsep_tensornn::{Float, Tensor};
use rayon::prelude::*;

use super::model::ModelInput;
use super::reconstruct::ground_truth_mask;
use crate::config::{MaskTarget, ModelConfig, ModelFlags};
use crate::datagen::SceneSample;
use crate::error::{BinsepError, Result};
use crate::posenc::box_tokens;
use crate::signal::{log_mag, stft, ComplexSpectrogram, FeatureMap, FreqResampler, FreqScale, Waveform};
use crate::spatial::compute_ipd;

/// Spectrogram-domain view of one audio track, ready for the network.
#[derive(Clone, Debug)]
pub struct Track {
    pub spec: Arc<ComplexSpectrogram>,
    /// `log(1 + |X|)` on the log-frequency grid, `T × F`.
    pub log_mag: Vec<f64>,
    /// `|X|` on the log-frequency grid, `T × F`.
    pub mag: Vec<f64>,
}

impl Track {
    pub fn new(w: &Waveform, cfg: &ModelConfig, to_log: &FreqResampler) -> Result<Self> {
        let spec = stft(w, &cfg.stft())?;
        if spec.frames != cfg.frames {
            return Err(BinsepError::shape("track frames", &[cfg.frames], &[spec.frames]));
        }
        let lm = to_log.apply_map(&log_mag(&spec), FreqScale::Log)?.data;
        let lin = FeatureMap::new(1, spec.frames, spec.freqs, FreqScale::Linear, spec.magnitude())?;
        let mag = to_log.apply_map(&lin, FreqScale::Log)?.data;
        Ok(Self { spec: Arc::new(spec), log_mag: lm, mag })
    }
}

/// Per-object targets for one listening channel (or the mono track).
#[derive(Clone, Debug)]
pub struct Target {
    /// Binary mask on the log-frequency grid, `T × F`.
    pub mask: Vec<f64>,
    pub wav: Waveform,
}

/// A scene with every tensor the model, loss and metrics need.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: usize,
    pub same_category: bool,
    /// Left and right mixture tracks.
    pub mix: [Track; 2],
    /// IPD of the mixture on the log-frequency grid, `T × F`.
    pub ipd: Vec<f64>,
    pub mono: Track,
    /// `targets[o][c]`, `c` = 0 left, 1 right.
    pub targets: Vec<[Target; 2]>,
    pub mono_targets: Vec<Target>,
    /// `[3·P·P]` patch per object.
    pub patches: Vec<Vec<f64>>,
    /// `[g² · 4D]` pooled coordinate encoding per object.
    pub positions: Vec<Vec<f64>>,
    pub out_len: usize,
}

/// Binary target for `source` heard in `mixture` (both already on the log grid as `src`
/// and `mix`), following `cfg.mask_target`.
fn target_mask(cfg: &ModelConfig, to_log: &FreqResampler, source: &Waveform, mixture: &Waveform, src: &Track, mix: &Track) -> Result<Vec<f64>> {
    match cfg.mask_target {
        MaskTarget::Mixture => ground_truth_mask(&src.mag, &mix.mag),
        MaskTarget::Dominant => {
            let rest: Vec<f64> = mixture.samples.iter().zip(&source.samples).map(|(m, s)| m - s).collect();
            let rest = Track::new(&Waveform::new(rest, mixture.sample_rate)?, cfg, to_log)?;
            ground_truth_mask(&src.mag, &rest.mag)
        }
    }
}

impl PreparedScene {
    pub fn new(scene: &SceneSample, cfg: &ModelConfig) -> Result<Self> {
        let to_log = FreqResampler::linear_to_log(cfg.f_lin(), cfg.f_log)?;
        let mixture = scene.mixture()?;
        if mixture.sample_rate() != cfg.sample_rate {
            return Err(BinsepError::invalid(
                "prepare_scene",
                format!("scene at {} Hz, model expects {} Hz", mixture.sample_rate(), cfg.sample_rate),
            ));
        }
        let mix = [Track::new(&mixture.left, cfg, &to_log)?, Track::new(&mixture.right, cfg, &to_log)?];
        let ipd = to_log.apply_map(&compute_ipd(&mix[0].spec, &mix[1].spec)?, FreqScale::Log)?.data;
        let mono_mix = scene.mono_mixture()?;
        let mono = Track::new(&mono_mix, cfg, &to_log)?;
        let mut targets = Vec::with_capacity(scene.objects.len());
        let mut mono_targets = Vec::with_capacity(scene.objects.len());
        let mut patches = Vec::new();
        let mut positions = Vec::new();
        let mix_ears = [&mixture.left, &mixture.right];
        for o in &scene.objects {
            let ears = [&o.binaural.left, &o.binaural.right];
            let t: Vec<Target> = (0..2)
                .map(|c| {
                    let src = Track::new(ears[c], cfg, &to_log)?;
                    let mask = target_mask(cfg, &to_log, ears[c], mix_ears[c], &src, &mix[c])?;
                    Ok(Target { mask, wav: ears[c].clone() })
                })
                .collect::<Result<_>>()?;
            let [l, r]: [Target; 2] = t.try_into().expect("two ears");
            targets.push([l, r]);
            let src = Track::new(&o.stem, cfg, &to_log)?;
            let mask = target_mask(cfg, &to_log, &o.stem, &mono_mix, &src, &mono)?;
            mono_targets.push(Target { mask, wav: o.stem.clone() });
            patches.push(o.patch(cfg.patch));
            let tok = box_tokens(&o.bbox, scene.settings.frame_w, scene.settings.frame_h, cfg.octaves, cfg.grid())?;
            positions.push(tok.data().to_vec());
        }
        Ok(Self {
            id: scene.id,
            same_category: scene.same_category(),
            mix,
            ipd,
            mono,
            targets,
            mono_targets,
            patches,
            positions,
            out_len: mixture.len(),
        })
    }

    pub fn n_objects(&self) -> usize {
        self.targets.len()
    }

    /// Network input channels for object-independent sample `(ear c)`.
    fn input_planes(&self, flags: ModelFlags, c: usize) -> Vec<&[f64]> {
        if flags.mono {
            return vec![&self.mono.log_mag];
        }
        let mut planes: Vec<&[f64]> = vec![&self.mix[c].log_mag];
        if flags.use_ipd {
            planes.push(&self.ipd);
        }
        planes
    }

    pub fn mixture_track(&self, flags: ModelFlags, c: usize) -> &Track {
        if flags.mono {
            &self.mono
        } else {
            &self.mix[c]
        }
    }

    pub fn target(&self, flags: ModelFlags, o: usize, c: usize) -> &Target {
        if flags.mono {
            &self.mono_targets[o]
        } else {
            &self.targets[o][c]
        }
    }
}

/// Prepares scenes in parallel.
pub fn prepare_scenes(scenes: &[SceneSample], cfg: &ModelConfig) -> Result<Vec<PreparedScene>> {
    scenes.par_iter().map(|s| PreparedScene::new(s, cfg)).collect()
}

/// One network batch plus the matching targets. Samples run over scenes, then objects,
/// then channels (`passes` per object).
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub input: ModelInput<T>,
    /// `[S, 1, T, F]`.
    pub gt_masks: Tensor<T>,
    /// `[S, len]`.
    pub gt_wavs: Tensor<T>,
    /// Mixture spectrogram each sample's mask is applied to.
    pub mixtures: Vec<Arc<ComplexSpectrogram>>,
    pub out_len: usize,
}

pub fn build_batch<T: Float>(scenes: &[&PreparedScene], cfg: &ModelConfig, flags: ModelFlags) -> Result<Batch<T>> {
    let first = scenes.first().ok_or_else(|| BinsepError::invalid("build_batch", "empty batch"))?;
    let out_len = first.out_len;
    let passes = flags.passes_per_object();
    let tf = cfg.frames * cfg.f_log;
    let (p, g2, c_e) = (cfg.patch, cfg.grid() * cfg.grid(), 4 * cfg.octaves);
    let n_obj: usize = scenes.iter().map(|s| s.n_objects()).sum();
    let s_total = n_obj * passes;
    let c_in = flags.input_channels();
    let mut spec = Vec::with_capacity(s_total * c_in * tf);
    let mut masks = Vec::with_capacity(s_total * tf);
    let mut wavs = Vec::with_capacity(s_total * out_len);
    let mut patches = Vec::with_capacity(n_obj * 3 * p * p);
    let mut positions = Vec::with_capacity(n_obj * g2 * c_e);
    let mut mixtures = Vec::with_capacity(s_total);
    for sc in scenes {
        if sc.out_len != out_len {
            return Err(BinsepError::shape("build_batch clip length", &[out_len], &[sc.out_len]));
        }
        for o in 0..sc.n_objects() {
            patches.extend(sc.patches[o].iter().map(|&v| T::of(v)));
            positions.extend(sc.positions[o].iter().map(|&v| T::of(v)));
            for c in 0..passes {
                for plane in sc.input_planes(flags, c) {
                    spec.extend(plane.iter().map(|&v| T::of(v)));
                }
                let t = sc.target(flags, o, c);
                masks.extend(t.mask.iter().map(|&v| T::of(v)));
                wavs.extend(t.wav.samples.iter().map(|&v| T::of(v)));
                mixtures.push(sc.mixture_track(flags, c).spec.clone());
            }
        }
    }
    let input = ModelInput {
        spec: Tensor::new(&[s_total, c_in, cfg.frames, cfg.f_log], spec)?,
        patches: Tensor::new(&[n_obj, 3, p, p], patches)?,
        positions: if flags.use_position { Some(Tensor::new(&[n_obj, g2, c_e], positions)?) } else { None },
    };
    Ok(Batch {
        input,
        gt_masks: Tensor::new(&[s_total, 1, cfg.frames, cfg.f_log], masks)?,
        gt_wavs: Tensor::new(&[s_total, out_len], wavs)?,
        mixtures,
        out_len,
    })
}
