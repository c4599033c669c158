use binsep_tensornn::{BatchNorm2d, Conv2d, ConvTranspose2d, Ctx, Float, ParamStore, Var};
use rand::Rng;

use crate::error::{BinsepError, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Spectrogram U-Net. Encoder level `i` halves both axes with a 4×4 stride-2 conv,
/// BN and LeakyReLU; the decoder mirrors it with transposed convs, BN, ReLU and skip
/// concatenation. The bottleneck is fused with external guidance by channel
/// concatenation followed by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct UNet {
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub encoder: Vec<(Conv2d, BatchNorm2d)>,
    pub merge: Conv2d,
    /// Decoder stage `i` produces the resolution of encoder level `i − 1` (`i = 0`: output).
    pub decoder: Vec<(ConvTranspose2d, Option<BatchNorm2d>)>,
}

impl UNet {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        guidance_channels: usize,
    ) -> Result<Self> {
        let n = channels.len();
        let mut encoder = Vec::with_capacity(n);
        let mut cin = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            let conv = Conv2d::new(store, rng, &format!("{name}.enc{i}.conv"), cin, c, (4, 4), 2, (1, 1))?;
            let bn = BatchNorm2d::new(store, &format!("{name}.enc{i}.bn"), c)?;
            encoder.push((conv, bn));
            cin = c;
        }
        let cn = channels[n - 1];
        let merge = Conv2d::new(store, rng, &format!("{name}.merge"), cn + guidance_channels, cn, (1, 1), 1, (0, 0))?;
        let mut decoder = Vec::with_capacity(n);
        for i in 0..n {
            let cin = if i == n - 1 { cn } else { 2 * channels[i] };
            let cout = if i == 0 { 1 } else { channels[i - 1] };
            let conv = ConvTranspose2d::new(store, rng, &format!("{name}.dec{i}.conv"), cin, cout, 4, 2, 1)?;
            let bn = if i == 0 { None } else { Some(BatchNorm2d::new(store, &format!("{name}.dec{i}.bn"), cout)?) };
            decoder.push((conv, bn));
        }
        Ok(Self { channels: channels.to_vec(), in_channels, encoder, merge, decoder })
    }

    pub fn first_conv_weight(&self) -> String {
        self.encoder[0].0.weight_name()
    }

    /// Encoder features of every level for input `[S, C_in, T, F]`.
    pub fn encode<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let s = ctx.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(BinsepError::shape("unet input", &[0, self.in_channels, 0, 0], &s));
        }
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (conv, bn) in &self.encoder {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.graph.leaky_relu(h, LEAKY_SLOPE)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Decodes to mask logits `[S, 1, T, F]` from encoder features and guidance
    /// `[S, C_g, T/S, F/S]`.
    pub fn decode<T: Float>(&self, ctx: &mut Ctx<'_, T>, feats: &[Var], guidance: Var) -> Result<Var> {
        let n = self.encoder.len();
        let bottleneck = feats[n - 1];
        let (sb, sg) = (ctx.graph.shape(bottleneck).to_vec(), ctx.graph.shape(guidance).to_vec());
        if sg.len() != 4 || sg[0] != sb[0] || sg[2] != sb[2] || sg[3] != sb[3] {
            return Err(BinsepError::shape("unet guidance", &[sb[0], self.merge.cin - sb[1], sb[2], sb[3]], &sg));
        }
        let cat = ctx.graph.concat(&[bottleneck, guidance], 1)?;
        let mut h = self.merge.forward(ctx, cat)?;
        for i in (0..n).rev() {
            let (conv, bn) = &self.decoder[i];
            h = conv.forward(ctx, h)?;
            if let Some(bn) = bn {
                h = bn.forward(ctx, h)?;
                h = ctx.graph.relu(h)?;
                h = ctx.graph.concat(&[h, feats[i - 1]], 1)?;
            }
        }
        Ok(h)
    }
}
