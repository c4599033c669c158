use binsep_tensornn::{BatchNorm2d, Conv2d, Ctx, Float, ParamStore, Var};
use rand::Rng;

use crate::error::{BinsepError, Result};

/// Strided CNN over RGB object patches: four `conv 3×3 / stride 2 → BN → ReLU` blocks.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub blocks: Vec<(Conv2d, BatchNorm2d)>,
}

impl VisualEncoder {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: &[usize],
    ) -> Result<Self> {
        let mut cin = 3;
        let mut blocks = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            let conv = Conv2d::new(store, rng, &format!("{name}.block{i}.conv"), cin, c, (3, 3), 2, (1, 1))?;
            let bn = BatchNorm2d::new(store, &format!("{name}.block{i}.bn"), c)?;
            blocks.push((conv, bn));
            cin = c;
        }
        Ok(Self { blocks })
    }

    /// `patches` is `[O, 3, P, P]`; returns visual tokens `[O, (P/16)², C_v]`.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, patches: Var) -> Result<Var> {
        let s = ctx.graph.shape(patches).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(BinsepError::shape("visual_encoder", &[0, 3, 0, 0], &s));
        }
        let mut h = patches;
        for (conv, bn) in &self.blocks {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.graph.relu(h)?;
        }
        let s = ctx.graph.shape(h).to_vec();
        let h = ctx.graph.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        Ok(ctx.graph.permute(h, &[0, 2, 1])?)
    }
}
