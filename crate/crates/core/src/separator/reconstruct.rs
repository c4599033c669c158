use std::sync::Arc;

use binsep_tensornn::{CustomOp, Float, Graph, Tensor, Var};

use crate::error::{BinsepError, Result};
use crate::signal::{istft, istft_adjoint, ComplexSpectrogram, FeatureMap, FreqResampler, FreqScale, Waveform};

/// Binary target: 1 where the source magnitude is at least the mixture magnitude.
pub fn ground_truth_mask(source_mag: &[f64], mixture_mag: &[f64]) -> Result<Vec<f64>> {
    if source_mag.len() != mixture_mag.len() {
        return Err(BinsepError::shape("ground_truth_mask", &[mixture_mag.len()], &[source_mag.len()]));
    }
    Ok(source_mag.iter().zip(mixture_mag).map(|(s, m)| if s >= m { 1.0 } else { 0.0 }).collect())
}

/// Applies a log-frequency magnitude mask `1 × T × F_log` to the mixture, keeping the
/// mixture phase, and inverts to `out_len` samples.
pub fn apply_mask_and_reconstruct(mask: &FeatureMap, mixture: &ComplexSpectrogram, out_len: usize) -> Result<Waveform> {
    if mask.channels != 1 || mask.frames != mixture.frames || mask.scale != FreqScale::Log {
        return Err(BinsepError::shape(
            "apply_mask_and_reconstruct",
            &[1, mixture.frames, mask.freqs],
            &mask.shape(),
        ));
    }
    if let Some(v) = mask.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(BinsepError::invalid("apply_mask_and_reconstruct", format!("mask value {v} outside [0, 1]")));
    }
    let to_lin = FreqResampler::log_to_linear(mask.freqs, mixture.freqs)?;
    let lin = to_lin.apply_map(mask, FreqScale::Linear)?;
    istft(&mixture.masked(&lin.data)?, out_len)
}

/// Differentiable masked ISTFT: maps masks `[S, 1, T, F_log]` to waveforms `[S, out_len]`,
/// sample `s` using mixture spectrogram `mixtures[s]`.
struct MaskedIstft {
    mixtures: Vec<Arc<ComplexSpectrogram>>,
    to_lin: FreqResampler,
}

impl MaskedIstft {
    fn linear_mask(&self, mask_log: &[f64], frames: usize) -> Vec<f64> {
        let (fl, fm) = (self.to_lin.src, self.to_lin.dst);
        let mut out = vec![0.0; frames * fm];
        for (src, dst) in mask_log.chunks(fl).zip(out.chunks_mut(fm)) {
            self.to_lin.apply(src, dst);
        }
        out
    }
}

impl<T: Float> CustomOp<T> for MaskedIstft {
    fn name(&self) -> &'static str {
        "masked_istft"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let out_len = output.shape()[1];
        let mshape = inputs[0].shape();
        let (frames, fl) = (mshape[2], mshape[3]);
        let fm = self.to_lin.dst;
        let mut gmask = Vec::with_capacity(inputs[0].len());
        for (s, mix) in self.mixtures.iter().enumerate() {
            let g: Vec<f64> = grad.data()[s * out_len..(s + 1) * out_len].iter().map(|v| v.f64()).collect();
            let adj = istft_adjoint(&g, &mix.config, frames).expect("shapes validated in forward");
            let mut glog = vec![0.0; frames * fl];
            for t in 0..frames {
                let glin: Vec<f64> = (0..fm)
                    .map(|k| {
                        let (a, x) = (adj[t * fm + k], mix.bins[t * fm + k]);
                        a.re * x.re + a.im * x.im
                    })
                    .collect();
                self.to_lin.apply_transpose(&glin, &mut glog[t * fl..(t + 1) * fl]);
            }
            gmask.extend(glog.into_iter().map(T::of));
        }
        vec![Some(Tensor::new(mshape, gmask).expect("gradient matches mask shape"))]
    }
}

/// Graph node reconstructing one waveform per mask sample.
pub fn masked_istft<T: Float>(
    g: &mut Graph<T>,
    masks: Var,
    mixtures: Vec<Arc<ComplexSpectrogram>>,
    out_len: usize,
) -> Result<Var> {
    let shape = g.shape(masks).to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[0] != mixtures.len() {
        return Err(BinsepError::shape("masked_istft", &[mixtures.len(), 1, 0, 0], &shape));
    }
    let (frames, fl) = (shape[2], shape[3]);
    let first = &mixtures[0];
    if mixtures.iter().any(|m| m.frames != frames || m.freqs != first.freqs || m.config != first.config) {
        return Err(BinsepError::invalid("masked_istft", "mixture spectrograms disagree with the mask grid"));
    }
    let op = MaskedIstft { to_lin: FreqResampler::log_to_linear(fl, first.freqs)?, mixtures };
    let values = g.value(masks).data();
    let mut out = Vec::with_capacity(shape[0] * out_len);
    for (s, mix) in op.mixtures.iter().enumerate() {
        let m: Vec<f64> = values[s * frames * fl..(s + 1) * frames * fl].iter().map(|v| v.f64()).collect();
        let lin = op.linear_mask(&m, frames);
        let w = istft(&mix.masked(&lin)?, out_len)?;
        out.extend(w.samples.into_iter().map(T::of));
    }
    let value = Tensor::new(&[shape[0], out_len], out)?;
    Ok(g.custom(&[masks], value, Box::new(op))?)
}
