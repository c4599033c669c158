use rayon::prelude::*;

use super::data::{build_batch, PreparedScene, Track};
use super::model::{LavssModel, ModelInput};
use super::reconstruct::apply_mask_and_reconstruct;
use crate::config::ModelFlags;
use crate::error::{BinsepError, Result};
use crate::losses_metrics::{BssEvaluator, MetricRow, DEFAULT_FILTER_LEN};
use crate::posenc::{box_tokens, BoundingBox};
use crate::signal::{FeatureMap, FreqResampler, FreqScale, Waveform};
use crate::spatial::{compute_ipd, BinauralClip};

/// Where the separated estimates come from.
#[derive(Clone, Copy)]
pub enum Estimator<'a> {
    Model(&'a LavssModel),
    /// Ideal binary masks computed from the ground-truth stems.
    Oracle,
    /// The unprocessed mixture, for every source.
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub filter_len: usize,
    /// Binarize model masks at this level instead of using soft masks.
    pub threshold: Option<f64>,
    /// Score the mono mixture instead of the two ears.
    pub mono: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { filter_len: DEFAULT_FILTER_LEN, threshold: None, mono: false }
    }
}

pub fn channel_label(mono: bool, c: usize) -> &'static str {
    match (mono, c) {
        (true, _) => "mono",
        (false, 0) => "left",
        _ => "right",
    }
}

fn binarize(mask: &mut [f64], threshold: Option<f64>) {
    if let Some(th) = threshold {
        mask.iter_mut().for_each(|v| *v = if *v >= th { 1.0 } else { 0.0 });
    }
}

/// Estimated waveforms `est[o][c]` for one scene.
pub fn estimate_scene(scene: &PreparedScene, est: Estimator<'_>, opts: &EvalOptions) -> Result<Vec<Vec<Waveform>>> {
    let flags = match est {
        Estimator::Model(m) => m.flags(),
        _ if opts.mono => ModelFlags::MONO,
        _ => ModelFlags::ABLATED,
    };
    if flags.mono != opts.mono {
        return Err(BinsepError::invalid("evaluate", "model channel layout differs from the evaluation mode"));
    }
    let passes = flags.passes_per_object();
    let no = scene.n_objects();
    match est {
        Estimator::Baseline => Ok((0..no)
            .map(|_| (0..passes).map(|c| sum_targets(scene, flags, c)).collect::<Result<_>>())
            .collect::<Result<_>>()?),
        Estimator::Oracle => (0..no)
            .map(|o| {
                (0..passes)
                    .map(|c| {
                        let t = scene.target(flags, o, c);
                        reconstruct(&t.mask, scene.mixture_track(flags, c), scene.out_len)
                    })
                    .collect()
            })
            .collect(),
        Estimator::Model(m) => {
            let batch = build_batch::<f32>(&[scene], m.cfg(), flags)?;
            let mut masks = m.masks(&batch.input)?;
            masks.iter_mut().for_each(|mk| binarize(mk, opts.threshold));
            (0..no)
                .map(|o| {
                    (0..passes)
                        .map(|c| reconstruct(&masks[o * passes + c], scene.mixture_track(flags, c), scene.out_len))
                        .collect()
                })
                .collect()
        }
    }
}

fn sum_targets(scene: &PreparedScene, flags: ModelFlags, c: usize) -> Result<Waveform> {
    let first = &scene.target(flags, 0, c).wav;
    let mut acc = vec![0.0; first.len()];
    for o in 0..scene.n_objects() {
        for (a, v) in acc.iter_mut().zip(&scene.target(flags, o, c).wav.samples) {
            *a += v;
        }
    }
    Waveform::new(acc, first.sample_rate)
}

fn reconstruct(mask: &[f64], track: &Track, out_len: usize) -> Result<Waveform> {
    let fl = mask.len() / track.spec.frames;
    let m = FeatureMap::new(1, track.spec.frames, fl, FreqScale::Log, mask.to_vec())?;
    apply_mask_and_reconstruct(&m, &track.spec, out_len)
}

/// SDR/SIR per (scene, object, channel). Scenes are scored in parallel.
pub fn evaluate(scenes: &[PreparedScene], est: Estimator<'_>, opts: &EvalOptions) -> Result<Vec<MetricRow>> {
    let per_scene: Vec<Vec<MetricRow>> = scenes
        .par_iter()
        .map(|scene| {
            let ests = estimate_scene(scene, est, opts)?;
            let flags = if opts.mono { ModelFlags::MONO } else { ModelFlags::ABLATED };
            let passes = flags.passes_per_object();
            let mut rows = Vec::new();
            for c in 0..passes {
                let refs: Vec<&[f64]> =
                    (0..scene.n_objects()).map(|o| scene.target(flags, o, c).wav.samples.as_slice()).collect();
                let ev = BssEvaluator::new(&refs, opts.filter_len)?;
                for (o, e) in ests.iter().enumerate() {
                    let s = ev.score(o, &e[c].samples)?;
                    rows.push(MetricRow {
                        scene_id: scene.id,
                        source_id: o,
                        channel: channel_label(opts.mono, c).to_string(),
                        sdr_db: s.sdr_db,
                        sir_db: s.sir_db,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// One object to extract: its RGB patch (`[3, P, P]`, values in [0, 1]) and frame box.
#[derive(Clone, Debug)]
pub struct ObjectQuery {
    pub patch: Vec<f64>,
    pub bbox: BoundingBox,
}

/// Separates every queried object from a binaural mixture. Both ears share the network;
/// the mixture is processed in consecutive model-sized segments.
pub fn separate(
    model: &LavssModel,
    mixture: &BinauralClip,
    objects: &[ObjectQuery],
    threshold: Option<f64>,
) -> Result<Vec<BinauralClip>> {
    if model.flags().mono {
        return Err(BinsepError::invalid(
            "separate",
            "this is a mono model and cannot take binaural input; use separate_mono",
        ));
    }
    let out = separate_channels(model, &[&mixture.left, &mixture.right], objects, threshold)?;
    out.into_iter()
        .map(|mut ch| {
            let r = ch.pop().expect("two channels");
            let l = ch.pop().expect("two channels");
            BinauralClip::new(l, r)
        })
        .collect()
}

/// Mono counterpart of [`separate`], for models trained on mono mixtures.
pub fn separate_mono(
    model: &LavssModel,
    mixture: &Waveform,
    objects: &[ObjectQuery],
    threshold: Option<f64>,
) -> Result<Vec<Waveform>> {
    if !model.flags().mono {
        return Err(BinsepError::invalid("separate_mono", "this is a binaural model and needs a binaural mixture"));
    }
    Ok(separate_channels(model, &[mixture], objects, threshold)?.into_iter().map(|mut c| c.remove(0)).collect())
}

fn separate_channels(
    model: &LavssModel,
    chans: &[&Waveform],
    objects: &[ObjectQuery],
    threshold: Option<f64>,
) -> Result<Vec<Vec<Waveform>>> {
    let cfg = model.cfg();
    let flags = model.flags();
    if objects.is_empty() {
        return Err(BinsepError::invalid("separate", "no objects to separate"));
    }
    let sr = chans[0].sample_rate;
    if sr != cfg.sample_rate {
        return Err(BinsepError::invalid(
            "separate",
            format!("mixture at {sr} Hz, model expects {} Hz; resample first", cfg.sample_rate),
        ));
    }
    let p = cfg.patch;
    for o in objects {
        if o.patch.len() != 3 * p * p {
            return Err(BinsepError::shape("separate patch", &[3, p, p], &[o.patch.len()]));
        }
    }
    let total = chans[0].len();
    let seg = cfg.clip_len();
    let to_log = FreqResampler::linear_to_log(cfg.f_lin(), cfg.f_log)?;
    let mut out: Vec<Vec<Vec<f64>>> = vec![vec![Vec::with_capacity(total); chans.len()]; objects.len()];
    let (g2, c_e) = (cfg.grid() * cfg.grid(), 4 * cfg.octaves);
    let mut patches = Vec::with_capacity(objects.len() * 3 * p * p);
    let mut positions = Vec::with_capacity(objects.len() * g2 * c_e);
    for o in objects {
        patches.extend(o.patch.iter().map(|&v| v as f32));
        let tok = box_tokens(&o.bbox, cfg.frame_w, cfg.frame_h, cfg.octaves, cfg.grid())?;
        positions.extend(tok.data().iter().map(|&v| v as f32));
    }
    let mut start = 0;
    while start < total {
        let n = seg.min(total - start);
        let tracks: Vec<Track> = chans
            .iter()
            .map(|w| {
                let mut s = w.samples[start..start + n].to_vec();
                s.resize(seg, 0.0);
                Track::new(&Waveform::new(s, sr)?, cfg, &to_log)
            })
            .collect::<Result<_>>()?;
        let ipd = if flags.use_ipd {
            Some(to_log.apply_map(&compute_ipd(&tracks[0].spec, &tracks[1].spec)?, FreqScale::Log)?.data)
        } else {
            None
        };
        let tf = cfg.frames * cfg.f_log;
        let c_in = flags.input_channels();
        let mut spec = Vec::with_capacity(objects.len() * chans.len() * c_in * tf);
        for _ in objects {
            for t in &tracks {
                spec.extend(t.log_mag.iter().map(|&v| v as f32));
                if let Some(ipd) = &ipd {
                    spec.extend(ipd.iter().map(|&v| v as f32));
                }
            }
        }
        let input = ModelInput {
            spec: binsep_tensornn::Tensor::new(&[objects.len() * chans.len(), c_in, cfg.frames, cfg.f_log], spec)?,
            patches: binsep_tensornn::Tensor::new(&[objects.len(), 3, p, p], patches.clone())?,
            positions: if flags.use_position {
                Some(binsep_tensornn::Tensor::new(&[objects.len(), g2, c_e], positions.clone())?)
            } else {
                None
            },
        };
        let mut masks = model.masks(&input)?;
        for (oi, per_obj) in out.iter_mut().enumerate() {
            for (c, dst) in per_obj.iter_mut().enumerate() {
                let mk = &mut masks[oi * chans.len() + c];
                binarize(mk, threshold);
                let w = reconstruct(mk, &tracks[c], seg)?;
                dst.extend_from_slice(&w.samples[..n]);
            }
        }
        start += n;
    }
    out.into_iter()
        .map(|chs| chs.into_iter().map(|s| Waveform::new(s, sr)).collect())
        .collect()
}
