use binsep_tensornn::{Checkpoint, Tensor};

use super::model::LavssModel;
use crate::config::{ModelConfig, ModelFlags};
use crate::error::{BinsepError, Result};

/// Parameter prefixes that exist only in position-aware binaural models.
const POSITION_PREFIXES: [&str; 2] = ["pos.", "vp."];

/// Builds a binaural model from a mono checkpoint.
///
/// Every mono tensor is copied. The first U-Net convolution is inflated along its input
/// channels: the magnitude slice is copied and the IPD slice is zero. The position MLP and
/// vision–position attention keep their fresh initialization from `seed`.
pub fn transfer_from_mono(mono: &Checkpoint, cfg: &ModelConfig, flags: ModelFlags, seed: u64) -> Result<LavssModel> {
    if flags.mono {
        return Err(BinsepError::invalid("transfer_from_mono", "target flags must describe a binaural model"));
    }
    let mut model = LavssModel::new(cfg, flags, seed)?;
    let first = model.net.unet.first_conv_weight();
    let mut mism = Vec::new();
    for (name, t) in &mono.entries {
        let Some(dst) = model.store.tensor_mut(name) else {
            mism.push(format!("{name}: not in binaural model"));
            continue;
        };
        let (ms, bs) = (t.shape().to_vec(), dst.shape().to_vec());
        if ms == bs {
            *dst = t.clone();
        } else if *name == first && ms.len() == 4 && bs.len() == 4 && ms[1] == 1 && ms[0] == bs[0] && ms[2..] == bs[2..] {
            let k = ms[2] * ms[3];
            let src = t.data();
            let mut data = vec![0.0f32; dst.len()];
            for o in 0..bs[0] {
                data[o * bs[1] * k..o * bs[1] * k + k].copy_from_slice(&src[o * k..(o + 1) * k]);
            }
            *dst = Tensor::new(&bs, data)?;
        } else {
            mism.push(format!("{name}: checkpoint {ms:?} vs model {bs:?}"));
        }
    }
    for (name, _) in model.store.tensors() {
        if mono.get(name).is_none() && !POSITION_PREFIXES.iter().any(|p| name.starts_with(p)) {
            mism.push(format!("{name}: missing from checkpoint"));
        }
    }
    if !mism.is_empty() {
        return Err(BinsepError::Incompatible(mism));
    }
    Ok(model)
}
