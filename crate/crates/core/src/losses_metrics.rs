//! Training objective and bss_eval-style separation metrics.
//!
//! Loss reduction: every norm is mean-reduced over elements and then averaged over the
//! (object, channel) samples, so the weights α and β do not depend on the preset size.

use std::path::Path;

use binsep_tensornn::{Float, Graph, Tensor, Var};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{BinsepError, Result};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_FILTER_LEN: usize = 512;
/// Scores are clipped to ±this many dB.
pub const DB_CAP: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub freq_l1: f64,
    pub freq_l2: f64,
    pub time_l1: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(freq_l1: f64, freq_l2: f64, time_l1: f64, alpha: f64, beta: f64) -> Self {
        Self { freq_l1, freq_l2, time_l1, total: freq_l1 + alpha * freq_l2 + beta * time_l1, alpha, beta }
    }

    pub fn freq(&self) -> f64 {
        self.freq_l1 + self.alpha * self.freq_l2
    }
}

fn check_pairs(what: &'static str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(BinsepError::shape(what, &[b.len()], &[a.len()]));
    }
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() || x.is_empty() {
            return Err(BinsepError::shape(what, &[y.len()], &[x.len()]));
        }
    }
    Ok(())
}

/// Mask L1 + α·(root-mean-square) error plus β·waveform L1, one entry per
/// (object, channel) sample.
pub fn binaural_loss(
    pred_masks: &[Vec<f64>],
    gt_masks: &[Vec<f64>],
    pred_wavs: &[Vec<f64>],
    gt_wavs: &[Vec<f64>],
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    check_pairs("binaural_loss masks", pred_masks, gt_masks)?;
    check_pairs("binaural_loss waveforms", pred_wavs, gt_wavs)?;
    let n = pred_masks.len() as f64;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (p, g) in pred_masks.iter().zip(gt_masks) {
        let m = p.len() as f64;
        l1 += p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / m;
        l2 += (p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m).sqrt();
    }
    let nw = pred_wavs.len() as f64;
    let time: f64 = pred_wavs
        .iter()
        .zip(gt_wavs)
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
        .sum::<f64>()
        / nw;
    Ok(LossBreakdown::new(l1 / n, l2 / n, time, alpha, beta))
}

/// Graph nodes of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub freq_l1: Var,
    pub freq_l2: Var,
    pub time_l1: Option<Var>,
    pub total: Var,
}

/// Differentiable version of [`binaural_loss`]. `pred_masks` is `[S, …]` (flattened per
/// sample), `pred_wavs` is `[S, len]`; pass `None` to drop the waveform term.
pub fn loss_graph<T: Float>(
    g: &mut Graph<T>,
    pred_masks: Var,
    gt_masks: Tensor<T>,
    pred_wavs: Option<(Var, Tensor<T>)>,
    alpha: f64,
    beta: f64,
) -> Result<LossVars> {
    let s = g.shape(pred_masks)[0];
    let per = g.value(pred_masks).len() / s.max(1);
    let pm = g.reshape(pred_masks, &[s, per])?;
    let gt = g.input(gt_masks.reshape(&[s, per])?);
    let d = g.sub(pm, gt)?;
    let ad = g.abs(d)?;
    let freq_l1 = g.mean(ad)?;
    let sq = g.square(d)?;
    let ms = g.mean_axis(sq, 1)?;
    let rms = g.sqrt(ms)?;
    let freq_l2 = g.mean(rms)?;
    let scaled = g.scale(freq_l2, T::of(alpha))?;
    let mut total = g.add(freq_l1, scaled)?;
    let mut time_l1 = None;
    if let Some((pw, gw)) = pred_wavs {
        let gw = g.input(gw);
        let dw = g.sub(pw, gw)?;
        let adw = g.abs(dw)?;
        let t = g.mean(adw)?;
        let tb = g.scale(t, T::of(beta))?;
        total = g.add(total, tb)?;
        time_l1 = Some(t);
    }
    Ok(LossVars { freq_l1, freq_l2, time_l1, total })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationScore {
    pub sdr_db: f64,
    pub sir_db: f64,
}

fn capped_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return DB_CAP;
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

/// Factorized projection onto `filter_len` delayed copies of a set of references.
struct ShiftProjector {
    sources: Vec<usize>,
    chol: Cholesky<f64, Dyn>,
}

/// Precomputed reference statistics shared by every estimate scored against the same
/// references.
pub struct BssEvaluator {
    refs: Vec<Vec<f64>>,
    filter_len: usize,
    /// `xcorr[i][k][τ + L − 1] = Σ_u s_i[u]·s_k[u − τ]` for |τ| < L.
    xcorr: Vec<Vec<Vec<f64>>>,
    all: ShiftProjector,
    own: Vec<ShiftProjector>,
}

impl BssEvaluator {
    pub fn new(references: &[&[f64]], filter_len: usize) -> Result<Self> {
        let first = references.first().ok_or_else(|| BinsepError::invalid("bss_eval", "no references"))?;
        if filter_len == 0 {
            return Err(BinsepError::invalid("bss_eval", "filter length must be positive"));
        }
        for (i, r) in references.iter().enumerate() {
            if r.len() != first.len() {
                return Err(BinsepError::shape("bss_eval references", &[first.len()], &[r.len()]));
            }
            if r.iter().all(|&v| v == 0.0) {
                return Err(BinsepError::invalid("bss_eval", format!("reference {i} is silent")));
            }
        }
        let refs: Vec<Vec<f64>> = references.iter().map(|r| r.to_vec()).collect();
        let l = filter_len as isize;
        let xcorr: Vec<Vec<Vec<f64>>> = refs
            .iter()
            .map(|si| {
                refs.iter()
                    .map(|sk| {
                        (-(l - 1)..l)
                            .map(|tau| {
                                let n = si.len() as isize;
                                let lo = tau.max(0);
                                let hi = n.min(n + tau);
                                (lo..hi).map(|u| si[u as usize] * sk[(u - tau) as usize]).sum()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut ev = Self {
            refs,
            filter_len,
            xcorr,
            all: ShiftProjector { sources: vec![], chol: Cholesky::new(DMatrix::identity(1, 1)).expect("identity") },
            own: vec![],
        };
        ev.all = ev.projector((0..references.len()).collect())?;
        ev.own = (0..references.len()).map(|j| ev.projector(vec![j])).collect::<Result<_>>()?;
        Ok(ev)
    }

    fn projector(&self, sources: Vec<usize>) -> Result<ShiftProjector> {
        let l = self.filter_len;
        let dim = sources.len() * l;
        let gram = DMatrix::from_fn(dim, dim, |r, c| {
            let (i, a) = (sources[r / l], r % l);
            let (k, b) = (sources[c / l], c % l);
            // Σ_t s_i[t − a]·s_k[t − b] = xcorr_ik(b − a)
            self.xcorr[i][k][(b as isize - a as isize + l as isize - 1) as usize]
        });
        let scale = (0..dim).map(|i| gram[(i, i)]).sum::<f64>() / dim as f64;
        let mut jitter = 0.0;
        for _ in 0..8 {
            let mut g = gram.clone();
            for i in 0..dim {
                g[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(g) {
                return Ok(ShiftProjector { sources, chol });
            }
            jitter = if jitter == 0.0 { scale * 1e-12 } else { jitter * 100.0 };
        }
        Err(BinsepError::invalid("bss_eval", "reference Gram matrix is not positive definite"))
    }

    /// Projection of the zero-padded estimate onto the span of the shifted references.
    fn project(&self, p: &ShiftProjector, est: &[f64]) -> Vec<f64> {
        let l = self.filter_len;
        let n = est.len();
        let rhs = DVector::from_fn(p.sources.len() * l, |r, _| {
            let (i, a) = (p.sources[r / l], r % l);
            // Σ_t s_i[t − a]·est[t]
            let s = &self.refs[i];
            (0..n.saturating_sub(a)).map(|u| s[u] * est[u + a]).sum()
        });
        let coef = p.chol.solve(&rhs);
        let mut out = vec![0.0; n + l - 1];
        for (r, &c) in coef.iter().enumerate() {
            let (i, a) = (p.sources[r / l], r % l);
            for (u, &v) in self.refs[i].iter().enumerate() {
                out[u + a] += c * v;
            }
        }
        out
    }

    /// Scores `estimate` against reference `j`.
    pub fn score(&self, j: usize, estimate: &[f64]) -> Result<SeparationScore> {
        if j >= self.refs.len() {
            return Err(BinsepError::invalid("bss_eval", format!("no reference {j}")));
        }
        if estimate.len() != self.refs[j].len() {
            return Err(BinsepError::shape("bss_eval estimate", &[self.refs[j].len()], &[estimate.len()]));
        }
        let s_target = self.project(&self.own[j], estimate);
        let p_all = self.project(&self.all, estimate);
        let mut e_interf = 0.0;
        let mut e_total = 0.0;
        let mut target = 0.0;
        for t in 0..p_all.len() {
            let est = estimate.get(t).copied().unwrap_or(0.0);
            let interf = p_all[t] - s_target[t];
            let artif = est - p_all[t];
            target += s_target[t] * s_target[t];
            e_interf += interf * interf;
            e_total += (interf + artif) * (interf + artif);
        }
        Ok(SeparationScore { sdr_db: capped_db(target, e_total), sir_db: capped_db(target, e_interf) })
    }
}

/// SDR/SIR of each estimate against the reference with the same index.
pub fn bss_eval(estimates: &[&[f64]], references: &[&[f64]], filter_len: usize) -> Result<Vec<SeparationScore>> {
    if estimates.len() != references.len() {
        return Err(BinsepError::shape("bss_eval", &[references.len()], &[estimates.len()]));
    }
    let ev = BssEvaluator::new(references, filter_len)?;
    estimates.iter().enumerate().map(|(j, e)| ev.score(j, e)).collect()
}

/// One line of the metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene_id: usize,
    pub source_id: usize,
    pub channel: String,
    pub sdr_db: f64,
    pub sir_db: f64,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| BinsepError::data(path.as_ref(), e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| BinsepError::data(path.as_ref(), e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean SDR and SIR per channel label, sorted by label.
pub fn summarize(rows: &[MetricRow]) -> Vec<(String, f64, f64, usize)> {
    let mut map: std::collections::BTreeMap<&str, (f64, f64, usize)> = Default::default();
    for r in rows {
        let e = map.entry(r.channel.as_str()).or_default();
        e.0 += r.sdr_db;
        e.1 += r.sir_db;
        e.2 += 1;
    }
    map.into_iter().map(|(k, (s, i, n))| (k.to_string(), s / n as f64, i / n as f64, n)).collect()
}

pub fn mean_sdr(rows: &[MetricRow]) -> f64 {
    rows.iter().map(|r| r.sdr_db).sum::<f64>() / rows.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_total_combines_terms() {
        let l = LossBreakdown::new(0.1, 0.2, 0.4, 0.5, 0.25);
        assert!((l.total - 0.3).abs() < 1e-15);
    }

    #[test]
    fn silent_reference_rejected() {
        let z = vec![0.0; 16];
        let r: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert!(bss_eval(&[&r, &r], &[&r, &z], 1).is_err());
    }
}
