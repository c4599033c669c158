use std::io::Write;
use std::path::Path;

use binsep_tensornn::{Adam, Ctx};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{build_batch, PreparedScene};
use super::model::LavssModel;
use super::reconstruct::masked_istft;
use crate::error::{BinsepError, Result};
use crate::losses_metrics::{loss_graph, DEFAULT_ALPHA, DEFAULT_BETA};

/// Running-statistics momentum of batch norm during training.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per step; each contributes `objects × passes` samples.
    pub batch_scenes: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_scenes: 8, lr: 1e-3, weight_decay: 1e-4, alpha: DEFAULT_ALPHA, beta: DEFAULT_BETA, seed: 0 }
    }
}

/// Mean losses over the steps of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_freq: f64,
    pub loss_time: f64,
    pub loss_total: f64,
}

/// One optimizer step on `batch`; returns `(freq, time, total)` losses.
pub fn train_step(model: &mut LavssModel, batch: &[&PreparedScene], tc: &TrainConfig, adam: &Adam) -> Result<(f64, f64, f64)> {
    let cfg = model.cfg().clone();
    let flags = model.flags();
    let b = build_batch::<f32>(batch, &cfg, flags)?;
    let mut ctx = Ctx::new(&model.store, true);
    let logits = model.net.forward(&mut ctx, &b.input)?;
    let g = &mut ctx.graph;
    let masks = g.sigmoid(logits)?;
    let wavs = if tc.beta != 0.0 { Some((masked_istft(g, masks, b.mixtures.clone(), b.out_len)?, b.gt_wavs)) } else { None };
    let loss = loss_graph(g, masks, b.gt_masks, wavs, tc.alpha, tc.beta)?;
    let total = g.value(loss.total).data()[0] as f64;
    let freq = g.value(loss.freq_l1).data()[0] as f64 + tc.alpha * g.value(loss.freq_l2).data()[0] as f64;
    let time = loss.time_l1.map(|t| g.value(t).data()[0] as f64).unwrap_or(0.0);
    if !total.is_finite() {
        return Err(BinsepError::NonFinite(format!(
            "training loss is {total} (freq {freq}, time {time}) on scenes {:?}",
            batch.iter().map(|s| s.id).collect::<Vec<_>>()
        )));
    }
    let grads = ctx.graph.backward(loss.total)?;
    let (_, bindings, bn) = ctx.finish();
    model.store.zero_grad();
    model.store.accumulate_grads(&bindings, &grads)?;
    adam.step(&mut model.store)?;
    model.store.apply_bn_updates(&bn, BN_MOMENTUM)?;
    Ok((freq, time, total))
}

/// Mix-and-separate training over `scenes`; deterministic for a fixed seed. `on_epoch`
/// sees every epoch's log as soon as it is complete.
pub fn train(
    model: &mut LavssModel,
    scenes: &[PreparedScene],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &LavssModel),
) -> Result<Vec<EpochLog>> {
    if scenes.is_empty() {
        return Err(BinsepError::invalid("train", "no training scenes"));
    }
    if tc.batch_scenes == 0 {
        return Err(BinsepError::invalid("train", "batch size must be positive"));
    }
    let adam = Adam { lr: tc.lr, weight_decay: tc.weight_decay, ..Adam::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut f, mut t, mut tot, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(tc.batch_scenes) {
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let (a, b, c) = train_step(model, &batch, tc, &adam)?;
            f += a;
            t += b;
            tot += c;
            steps += 1;
        }
        let n = steps as f64;
        let log = EpochLog { epoch: epoch + 1, loss_freq: f / n, loss_time: t / n, loss_total: tot / n };
        log::info!("epoch {} loss {:.5} (freq {:.5}, time {:.5})", log.epoch, log.loss_total, log.loss_freq, log.loss_time);
        on_epoch(&log, model);
        logs.push(log);
    }
    Ok(logs)
}

/// Writes the training log as CSV: `epoch,loss_freq,loss_time,loss_total`.
pub fn write_train_log(path: impl AsRef<Path>, logs: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,loss_freq,loss_time,loss_total")?;
    for l in logs {
        writeln!(f, "{},{},{},{}", l.epoch, l.loss_freq, l.loss_time, l.loss_total)?;
    }
    Ok(())
}
