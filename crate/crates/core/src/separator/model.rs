use binsep_tensornn::{Checkpoint, Ctx, Float, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::unet::UNet;
use super::visual::VisualEncoder;
use crate::config::{ModelConfig, ModelFlags};
use crate::error::{BinsepError, Result};
use crate::fusion::{AudioQueries, AvpFusion, VpCrossAttention};
use crate::posenc::PositionMlp;

/// One batch of network inputs.
///
/// Samples are ordered object-major: for binaural models sample `2·o + c` is object
/// `o` seen through ear `c` (0 = left); mono models have one sample per object.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// `[S, C_in, T, F]`: log-magnitude (and IPD) on the log-frequency grid.
    pub spec: Tensor<T>,
    /// `[O, 3, P, P]` RGB object patches.
    pub patches: Tensor<T>,
    /// `[O, grid², 4·D]` pooled coordinate encodings, required when position is used.
    pub positions: Option<Tensor<T>>,
}

/// Network structure: visual encoder, position MLP, fusion stack and U-Net. Parameter
/// values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Lavss {
    pub cfg: ModelConfig,
    pub flags: ModelFlags,
    pub visual: VisualEncoder,
    pub unet: UNet,
    pub queries: AudioQueries,
    pub avp: AvpFusion,
    pub pos_mlp: Option<PositionMlp>,
    pub vp: Option<VpCrossAttention>,
}

impl Lavss {
    pub fn new<T: Float, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &ModelConfig,
        flags: ModelFlags,
    ) -> Result<Self> {
        cfg.validate()?;
        flags.validate()?;
        let n = cfg.levels();
        let ch = &cfg.unet_channels;
        let d = cfg.d_model;
        let visual = VisualEncoder::new(store, rng, "visual", &cfg.visual_channels)?;
        let unet = UNet::new(store, rng, "unet", flags.input_channels(), ch, d)?;
        let queries = AudioQueries::new(store, rng, "queries", [ch[n - 3], ch[n - 2], ch[n - 1]], d)?;
        let avp = AvpFusion::new(store, rng, "avp", d, cfg.heads, cfg.cma_layers)?;
        let (pos_mlp, vp) = if flags.use_position {
            (
                Some(PositionMlp::new(store, rng, "pos", 4 * cfg.octaves, cfg.pos_hidden, d)?),
                Some(VpCrossAttention::new(store, rng, "vp", d, cfg.heads, cfg.cma_layers)?),
            )
        } else {
            (None, None)
        };
        Ok(Self { cfg: cfg.clone(), flags, visual, unet, queries, avp, pos_mlp, vp })
    }

    /// Visual(-positional) tokens `F_vp`, one row per object: `[O, grid², d]`.
    pub fn visual_tokens<T: Float>(&self, ctx: &mut Ctx<'_, T>, input: &ModelInput<T>) -> Result<Var> {
        let patches = ctx.graph.input(input.patches.clone());
        let fv = self.visual.forward(ctx, patches)?;
        match (&self.pos_mlp, &self.vp) {
            (Some(mlp), Some(vp)) => {
                let pos = input
                    .positions
                    .as_ref()
                    .ok_or_else(|| BinsepError::invalid("model input", "position encodings required"))?;
                let p = ctx.graph.input(pos.clone());
                let fp = mlp.forward(ctx, p)?;
                vp.forward(ctx, fv, fp)
            }
            _ => Ok(fv),
        }
    }

    /// Mask logits `[S, 1, T, F]`.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, input: &ModelInput<T>) -> Result<Var> {
        let passes = self.flags.passes_per_object();
        let (s, o) = (input.spec.shape()[0], input.patches.shape()[0]);
        if s != o * passes {
            return Err(BinsepError::invalid(
                "model input",
                format!("{s} spectrogram samples for {o} objects, expected {}", o * passes),
            ));
        }
        let mut fvp = self.visual_tokens(ctx, input)?;
        if passes > 1 {
            fvp = ctx.graph.repeat_interleave(fvp, passes)?;
        }
        let spec = ctx.graph.input(input.spec.clone());
        let feats = self.unet.encode(ctx, spec)?;
        let n = feats.len();
        let (fa, counts) = self.queries.forward(ctx, &feats[n - 3..])?;
        let guidance = self.avp.forward(ctx, fa, counts, fvp, self.cfg.bottleneck_hw())?;
        self.unet.decode(ctx, &feats, guidance)
    }
}

/// Trainable model: structure plus 32-bit parameters.
#[derive(Clone, Debug)]
pub struct LavssModel {
    pub net: Lavss,
    pub store: ParamStore<f32>,
}

impl LavssModel {
    pub fn new(cfg: &ModelConfig, flags: ModelFlags, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Lavss::new(&mut store, &mut rng, cfg, flags)?;
        Ok(Self { net, store })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn flags(&self) -> ModelFlags {
        self.net.flags
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    /// Builds the structure for `cfg`/`flags` and loads `ckpt`, which must match exactly.
    pub fn from_checkpoint(cfg: &ModelConfig, flags: ModelFlags, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(cfg, flags, 0)?;
        let mism = ckpt.mismatches(&m.store);
        if !mism.is_empty() {
            return Err(BinsepError::Incompatible(mism));
        }
        ckpt.apply_to(&mut m.store)?;
        Ok(m)
    }

    /// Mask logits `[S, 1, T, F]` (training-mode batch norm when `train`).
    pub fn logits(&self, input: &ModelInput<f32>, train: bool) -> Result<Tensor<f32>> {
        let mut ctx = Ctx::new(&self.store, train);
        let y = self.net.forward(&mut ctx, input)?;
        Ok(ctx.graph.value(y).clone())
    }

    /// Inference masks in [0, 1], one `T × F` map per sample.
    pub fn masks(&self, input: &ModelInput<f32>) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(input, false)?;
        let tf = self.cfg().frames * self.cfg().f_log;
        Ok(logits
            .data()
            .chunks(tf)
            .map(|c| c.iter().map(|&v| 1.0 / (1.0 + (-(v as f64)).exp())).collect())
            .collect())
    }
}
