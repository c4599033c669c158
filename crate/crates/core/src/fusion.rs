//! Cross-modal attention stack: CMA blocks, vision–position fusion, multi-scale audio
//! queries and audio–vision–position fusion.
//!
//! Token tensors are `[B, L, d]`; feature maps are `[B, C, H, W]`.

use binsep_tensornn::{Conv2d, Ctx, Float, LayerNorm, Linear, MultiHeadAttention, ParamStore, Var};
use rand::Rng;

use crate::error::{BinsepError, Result};

/// One cross-modal decoder layer:
/// `α = LN(MHA(M, N, N) + M)`, `out = LN(FFN(α) + α)` with FFN `d → 4d → d`.
#[derive(Clone, Debug)]
pub struct CmaLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl CmaLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, 4 * d, true)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), 4 * d, d, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, m: Var, n: Var) -> Result<Var> {
        let a = self.attn.forward(ctx, m, n)?;
        let a = ctx.graph.add(a, m)?;
        let a = self.norm1.forward(ctx, a)?;
        let f = self.ff1.forward(ctx, a)?;
        let f = ctx.graph.relu(f)?;
        let f = self.ff2.forward(ctx, f)?;
        let f = ctx.graph.add(f, a)?;
        Ok(self.norm2.forward(ctx, f)?)
    }
}

/// Stacked CMA layers; every layer attends from the running query sequence to `N`.
#[derive(Clone, Debug)]
pub struct Cma {
    pub d: usize,
    pub layers: Vec<CmaLayer>,
}

impl Cma {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        n_layers: usize,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| CmaLayer::new(store, rng, &format!("{name}.layer{i}"), d, heads))
            .collect::<Result<_>>()?;
        Ok(Self { d, layers })
    }

    /// `m` is `[B, L_m, d]`, `n` is `[B, L_n, d]`; returns `[B, L_m, d]`.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, m: Var, n: Var) -> Result<Var> {
        let (sm, sn) = (ctx.graph.shape(m).to_vec(), ctx.graph.shape(n).to_vec());
        if sm.len() != 3 || sn.len() != 3 || sm[2] != self.d || sn[2] != self.d || sm[0] != sn[0] {
            return Err(BinsepError::shape("cma", &[sm.first().copied().unwrap_or(0), 0, self.d], &sn));
        }
        let mut x = m;
        for layer in &self.layers {
            x = layer.forward(ctx, x, n)?;
        }
        Ok(x)
    }
}

/// Vision–position cross attention: both directions of CMA, concatenated and projected
/// back to `d` channels per token.
#[derive(Clone, Debug)]
pub struct VpCrossAttention {
    pub vis_to_pos: Cma,
    pub pos_to_vis: Cma,
    pub proj: Linear,
}

impl VpCrossAttention {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        n_layers: usize,
    ) -> Result<Self> {
        Ok(Self {
            vis_to_pos: Cma::new(store, rng, &format!("{name}.vp"), d, heads, n_layers)?,
            pos_to_vis: Cma::new(store, rng, &format!("{name}.pv"), d, heads, n_layers)?,
            proj: Linear::new(store, rng, &format!("{name}.proj"), 2 * d, d, true)?,
        })
    }

    /// `fv`, `fp` are `[B, H·W, d]`; returns `F_vp` as `[B, H·W, d]`.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, fv: Var, fp: Var) -> Result<Var> {
        if ctx.graph.shape(fv) != ctx.graph.shape(fp) {
            let (a, b) = (ctx.graph.shape(fv).to_vec(), ctx.graph.shape(fp).to_vec());
            return Err(BinsepError::shape("vp_cross_attention", &a, &b));
        }
        let a = self.vis_to_pos.forward(ctx, fv, fp)?;
        let b = self.pos_to_vis.forward(ctx, fp, fv)?;
        let cat = ctx.graph.concat(&[a, b], 2)?;
        Ok(self.proj.forward(ctx, cat)?)
    }
}

/// Query counts per U-Net level, ordered `[q_N, q_{N−1}, q_{N−2}]` as concatenated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryCounts(pub [usize; 3]);

impl QueryCounts {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn bottleneck(&self) -> usize {
        self.0[0]
    }
}

/// 1×1 projections of the last three encoder levels to `d` channels.
#[derive(Clone, Debug)]
pub struct AudioQueries {
    /// Projections for levels N, N−1, N−2.
    pub projs: Vec<Conv2d>,
}

impl AudioQueries {
    /// `level_channels` are the widths of levels `[N−2, N−1, N]`.
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        level_channels: [usize; 3],
        d: usize,
    ) -> Result<Self> {
        let projs = (0..3)
            .map(|i| {
                let c = level_channels[2 - i];
                Conv2d::new(store, rng, &format!("{name}.proj{i}"), c, d, (1, 1), 1, (0, 0)).map_err(Into::into)
            })
            .collect::<Result<_>>()?;
        Ok(Self { projs })
    }

    /// `feats` are encoder outputs of levels `[N−2, N−1, N]`; returns `F_a` as `[B, Q_a, d]`
    /// with the level-N queries first.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, feats: &[Var]) -> Result<(Var, QueryCounts)> {
        if feats.len() != 3 {
            return Err(BinsepError::invalid("audio_queries", format!("need 3 levels, got {}", feats.len())));
        }
        let shapes: Vec<Vec<usize>> = feats.iter().map(|&f| ctx.graph.shape(f).to_vec()).collect();
        for w in shapes.windows(2) {
            if w[0].len() != 4 || w[1].len() != 4 || w[0][2] != 2 * w[1][2] || w[0][3] != 2 * w[1][3] {
                return Err(BinsepError::shape("audio_queries", &w[0], &w[1]));
            }
        }
        let mut parts = Vec::with_capacity(3);
        let mut counts = [0; 3];
        for (i, proj) in self.projs.iter().enumerate() {
            let f = feats[2 - i];
            let y = proj.forward(ctx, f)?;
            let s = ctx.graph.shape(y).to_vec();
            let (b, d, q) = (s[0], s[1], s[2] * s[3]);
            let y = ctx.graph.reshape(y, &[b, d, q])?;
            parts.push(ctx.graph.permute(y, &[0, 2, 1])?);
            counts[i] = q;
        }
        Ok((ctx.graph.concat(&parts, 1)?, QueryCounts(counts)))
    }
}

/// Audio–vision–position fusion producing the bottleneck guidance `F_avp`.
///
/// Branch one attends from the level-N queries to `F_vp`. Branch two attends from
/// `F_vp` to all queries, runs a token-preserving 1-D convolution and is averaged over
/// tokens, then broadcast to every level-N query. The concatenated `2d` features are
/// laid out on the bottleneck grid and reduced to `d` by a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct AvpFusion {
    pub audio_cma: Cma,
    pub visual_cma: Cma,
    pub f1: Conv2d,
    pub f2: Conv2d,
}

impl AvpFusion {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        n_layers: usize,
    ) -> Result<Self> {
        Ok(Self {
            audio_cma: Cma::new(store, rng, &format!("{name}.audio"), d, heads, n_layers)?,
            visual_cma: Cma::new(store, rng, &format!("{name}.visual"), d, heads, n_layers)?,
            f1: Conv2d::new(store, rng, &format!("{name}.f1"), d, d, (1, 3), 1, (0, 1))?,
            f2: Conv2d::new(store, rng, &format!("{name}.f2"), 2 * d, d, (3, 3), 1, (1, 1))?,
        })
    }

    /// `fa` is `[B, Q_a, d]`, `fvp` is `[B, L_v, d]`; returns `[B, d, h, w]` where
    /// `(h, w)` is the bottleneck grid and `h·w = q_N`.
    pub fn forward<T: Float>(
        &self,
        ctx: &mut Ctx<'_, T>,
        fa: Var,
        counts: QueryCounts,
        fvp: Var,
        hw: (usize, usize),
    ) -> Result<Var> {
        let sa = ctx.graph.shape(fa).to_vec();
        let (h, w) = hw;
        let qn = counts.bottleneck();
        if sa.len() != 3 || sa[1] != counts.total() || qn != h * w {
            return Err(BinsepError::invalid(
                "avp_fusion",
                format!("queries {sa:?} inconsistent with counts {:?} and grid {h}×{w}", counts.0),
            ));
        }
        let (b, d) = (sa[0], sa[2]);
        let qn_tokens = ctx.graph.slice(fa, 1, 0, qn)?;
        let branch1 = self.audio_cma.forward(ctx, qn_tokens, fvp)?;

        let v = self.visual_cma.forward(ctx, fvp, fa)?;
        let lv = ctx.graph.shape(v)[1];
        let v = ctx.graph.permute(v, &[0, 2, 1])?;
        let v = ctx.graph.reshape(v, &[b, d, 1, lv])?;
        let v = self.f1.forward(ctx, v)?;
        let v = ctx.graph.reshape(v, &[b, d, lv])?;
        let v = ctx.graph.mean_axis(v, 2)?;
        let v = ctx.graph.reshape(v, &[b, 1, d])?;
        let branch2 = ctx.graph.expand(v, 1, qn)?;

        let cat = ctx.graph.concat(&[branch1, branch2], 2)?;
        let cat = ctx.graph.permute(cat, &[0, 2, 1])?;
        let grid = ctx.graph.reshape(cat, &[b, 2 * d, h, w])?;
        Ok(self.f2.forward(ctx, grid)?)
    }
}
