//! Sinusoidal encoding of object pixel coordinates and its projection to the
//! position feature consumed by the fusion stack.

use std::f64::consts::PI;

use binsep_tensornn::{Ctx, Float, Linear, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BinsepError, Result};

/// Number of frequency octaves of the coordinate encoding.
pub const DEFAULT_OCTAVES: usize = 16;

/// Pixel box `[x0, x1) × [y0, y1)` inside a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32, frame_w: u32, frame_h: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(BinsepError::invalid("bounding_box", format!("degenerate box [{x0}, {y0}, {x1}, {y1}]")));
        }
        if x1 > frame_w || y1 > frame_h {
            return Err(BinsepError::invalid(
                "bounding_box",
                format!("box [{x0}, {y0}, {x1}, {y1}] exceeds frame {frame_w}×{frame_h}"),
            ));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Box of nominal size `w × h` centered at `(cx, cy)`, clipped to the frame.
    pub fn centered(cx: f64, cy: f64, w: u32, h: u32, frame_w: u32, frame_h: u32) -> Result<Self> {
        let lx = (cx - w as f64 / 2.0).round();
        let ly = (cy - h as f64 / 2.0).round();
        let x0 = lx.clamp(0.0, frame_w as f64) as u32;
        let y0 = ly.clamp(0.0, frame_h as f64) as u32;
        let x1 = (lx + w as f64).clamp(0.0, frame_w as f64) as u32;
        let y1 = (ly + h as f64).clamp(0.0, frame_h as f64) as u32;
        Self::new(x0, y0, x1, y1, frame_w, frame_h)
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn center_x(&self) -> f64 {
        (self.x0 + self.x1) as f64 / 2.0
    }

    pub fn to_array(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Maps pixel index `i` of an axis with `size` pixels to `[-1, 1]` using its center.
pub fn normalize_pixel(i: u32, size: u32) -> f64 {
    2.0 * (i as f64 + 0.5) / size as f64 - 1.0
}

/// `[sin(2^k πx), cos(2^k πx), sin(2^k πy), cos(2^k πy)]` for k = 0..octaves.
pub fn gamma(x: f64, y: f64, octaves: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * octaves);
    for k in 0..octaves {
        let f = (1u64 << k) as f64 * PI;
        out.extend_from_slice(&[(f * x).sin(), (f * x).cos(), (f * y).sin(), (f * y).cos()]);
    }
    out
}

/// Encodes every pixel of `b` into a `4·octaves × H_b × W_b` tensor.
pub fn encode_region(b: &BoundingBox, frame_w: u32, frame_h: u32, octaves: usize) -> Result<Tensor<f64>> {
    let b = BoundingBox::new(b.x0, b.y0, b.x1, b.y1, frame_w, frame_h)?;
    if octaves == 0 {
        return Err(BinsepError::invalid("encode_region", "need at least one octave"));
    }
    let (hb, wb) = (b.height() as usize, b.width() as usize);
    let c = 4 * octaves;
    let mut out = Tensor::zeros(&[c, hb, wb]);
    let data = out.data_mut();
    for (iy, py) in (b.y0..b.y1).enumerate() {
        let y = normalize_pixel(py, frame_h);
        for (ix, px) in (b.x0..b.x1).enumerate() {
            let x = normalize_pixel(px, frame_w);
            for (ch, v) in gamma(x, y, octaves).into_iter().enumerate() {
                data[(ch * hb + iy) * wb + ix] = v;
            }
        }
    }
    Ok(out)
}

/// Adaptive max pooling of a `C × H_in × W_in` tensor to `C × H × W`; output cell `i`
/// covers input rows `floor(i·H_in/H) .. ceil((i+1)·H_in/H)`.
pub fn adaptive_max_pool(x: &Tensor<f64>, target: (usize, usize)) -> Result<Tensor<f64>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(BinsepError::shape("adaptive_max_pool", &[0, 0, 0], s));
    }
    let (c, hi, wi) = (s[0], s[1], s[2]);
    let (ho, wo) = target;
    if ho == 0 || wo == 0 || ho > hi || wo > wi {
        return Err(BinsepError::invalid(
            "adaptive_max_pool",
            format!("target {ho}×{wo} larger than input {hi}×{wi}"),
        ));
    }
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let d = x.data();
    for ch in 0..c {
        for oy in 0..ho {
            let (y0, y1) = (oy * hi / ho, ((oy + 1) * hi).div_ceil(ho));
            for ox in 0..wo {
                let (x0, x1) = (ox * wi / wo, ((ox + 1) * wi).div_ceil(wo));
                let mut m = f64::NEG_INFINITY;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        m = m.max(d[(ch * hi + yy) * wi + xx]);
                    }
                }
                out.set(&[ch, oy, ox], m);
            }
        }
    }
    Ok(out)
}

/// Encoding of a box pooled to `grid × grid` cells, laid out as tokens `[grid², 4·octaves]`.
pub fn box_tokens(b: &BoundingBox, frame_w: u32, frame_h: u32, octaves: usize, grid: usize) -> Result<Tensor<f64>> {
    let pooled = adaptive_max_pool(&encode_region(b, frame_w, frame_h, octaves)?, (grid, grid))?;
    Ok(pooled.reshape(&[4 * octaves, grid * grid])?.permute(&[1, 0])?)
}

/// Pointwise two-layer MLP `C_e → hidden → C_out` with ReLU between the layers.
#[derive(Clone, Debug)]
pub struct PositionMlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl PositionMlp {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_e: usize,
        hidden: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, rng, &format!("{name}.fc1"), c_e, hidden, true)?,
            l2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, c_out, true)?,
        })
    }

    /// `tokens` is `[B, L, C_e]`; returns `[B, L, C_out]`.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, tokens: Var) -> Result<Var> {
        let h = self.l1.forward(ctx, tokens)?;
        let h = ctx.graph.relu(h)?;
        Ok(self.l2.forward(ctx, h)?)
    }
}

/// Pools a batch of encodings `[B, C_e, H_b, W_b]` to `target` and projects every cell,
/// returning position tokens `[B, H·W, C_out]`.
pub fn pool_and_project<T: Float>(
    ctx: &mut Ctx<'_, T>,
    encodings: &[Tensor<f64>],
    target: (usize, usize),
    mlp: &PositionMlp,
) -> Result<Var> {
    let first = encodings.first().ok_or_else(|| BinsepError::invalid("pool_and_project", "empty batch"))?;
    let c_e = first.shape()[0];
    let l = target.0 * target.1;
    let mut data = Vec::with_capacity(encodings.len() * l * c_e);
    for e in encodings {
        let tok = adaptive_max_pool(e, target)?.reshape(&[c_e, l])?.permute(&[1, 0])?;
        data.extend(tok.data().iter().map(|&v| T::of(v)));
    }
    let x = ctx.graph.input(Tensor::new(&[encodings.len(), l, c_e], data)?);
    mlp.forward(ctx, x)
}
