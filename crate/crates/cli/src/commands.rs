use std::ffi::OsString;
use std::path::{Path, PathBuf};

use binsep::datagen::{export_dataset, generate_dataset, import_dataset, split_indices, DatasetManifest, SceneSample, SceneSettings, Split};
use binsep::losses_metrics::{mean_sdr, summarize, write_metrics_csv, MetricRow};
use binsep::separator::{
    channel_label, estimate_scene, evaluate, separate as separate_stereo, separate_mono, train as train_model,
    transfer_from_mono, write_train_log, EpochLog, EvalOptions, Estimator, LavssModel, ObjectQuery, PreparedScene,
    TrainConfig,
};
use binsep::signal::stft;
use binsep::wav::write_wav;
use binsep::{BinsepError, ModelConfig, ModelFlags, Preset};
use binsep_tensornn::Checkpoint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::render::{spectrogram_gray, write_png};
use crate::SplitArg;

/// Settings a dataset directory was generated with, in the run-config format.
const DATASET_CONFIG: &str = "dataset.cfg";

/// Everything needed to rebuild a checkpoint's network, stored next to it as `<ckpt>.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub model: ModelConfig,
    pub flags: ModelFlags,
    pub train: TrainConfig,
    pub from_mono: Option<PathBuf>,
    pub logs: Vec<EpochLog>,
}

pub enum Source {
    Checkpoint(PathBuf),
    Oracle,
    Baseline,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".json")
}

pub fn train_log_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".log.csv")
}

/// The preset recorded by `gen-data`, if any.
fn dataset_preset(data: &Path) -> Result<Option<Preset>> {
    let p = data.join(DATASET_CONFIG);
    if !p.is_file() {
        return Ok(None);
    }
    let mut rc = RunConfig::default();
    rc.load_file(&p)?;
    Ok(rc.preset)
}

/// Model settings for a fresh network: explicit preset, else the dataset's, else desk.
fn fresh_model_config(rc: &RunConfig, data: &Path) -> Result<ModelConfig> {
    let mut rc = rc.clone();
    if rc.preset.is_none() {
        rc.preset = dataset_preset(data)?;
    }
    rc.model_config(None)
}

fn load_data(data: &Path, cfg: &ModelConfig) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let (m, scenes) = import_dataset(data)?;
    if m.sample_rate != cfg.sample_rate {
        return Err(CliError::config(format!(
            "dataset is sampled at {} Hz but the {} model expects {} Hz",
            m.sample_rate, cfg.preset, cfg.sample_rate
        )));
    }
    Ok((m, scenes))
}

fn select(m: &DatasetManifest, scenes: Vec<SceneSample>, split: SplitArg) -> Vec<SceneSample> {
    let want = match split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    };
    m.scenes
        .iter()
        .zip(scenes)
        .filter(|(rec, _)| want.map_or(true, |w| rec.split == w))
        .map(|(_, s)| s)
        .collect()
}

fn find_scene(scenes: Vec<SceneSample>, id: usize) -> Result<SceneSample> {
    scenes.into_iter().find(|s| s.id == id).ok_or_else(|| CliError::data(format!("no scene with id {id}")))
}

fn training_scenes(data: &Path, cfg: &ModelConfig) -> Result<Vec<PreparedScene>> {
    let (m, scenes) = load_data(data, cfg)?;
    let scenes = select(&m, scenes, SplitArg::Train);
    if scenes.is_empty() {
        return Err(CliError::data(format!("{} has no training scenes", data.display())));
    }
    Ok(binsep::separator::prepare_scenes(&scenes, cfg)?)
}

fn check_logs(logs: &[EpochLog]) -> Result<()> {
    match logs.iter().find(|l| !l.loss_total.is_finite()) {
        Some(l) => Err(CliError::Numeric(format!("training loss became {} in epoch {}", l.loss_total, l.epoch))),
        None => Ok(()),
    }
}

fn fit(model: &mut LavssModel, scenes: &[PreparedScene], tc: &TrainConfig) -> Result<Vec<EpochLog>> {
    let logs = train_model(model, scenes, tc, |_, _| {})?;
    check_logs(&logs)?;
    Ok(logs)
}

fn save_model(out: &Path, model: &LavssModel, side: &Sidecar) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    model.checkpoint().save(out)?;
    std::fs::write(sidecar_path(out), serde_json::to_string_pretty(side)?)?;
    write_train_log(train_log_path(out), &side.logs)?;
    println!("wrote {} ({} epochs)", out.display(), side.logs.len());
    Ok(())
}

fn read_sidecar(ckpt: &Path) -> Result<Sidecar> {
    let p = sidecar_path(ckpt);
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

fn read_checkpoint(ckpt: &Path) -> Result<(Checkpoint, Sidecar)> {
    let side = read_sidecar(ckpt)?;
    let c = Checkpoint::load(ckpt).map_err(|e| CliError::data(format!("{}: {e}", ckpt.display())))?;
    Ok((c, side))
}

/// Rebuilds a saved model. Shape keys set in the run config override the recorded ones;
/// a checkpoint that no longer fits is reported tensor by tensor.
pub fn load_model(rc: &RunConfig, ckpt: &Path) -> Result<(LavssModel, Sidecar)> {
    let (c, side) = read_checkpoint(ckpt)?;
    let cfg = rc.model_config(Some(&side.model))?;
    let model = LavssModel::from_checkpoint(&cfg, side.flags, &c).map_err(|e| match e {
        BinsepError::Incompatible(list) => CliError::config(format!(
            "checkpoint {} does not match the configured model:\n  {}",
            ckpt.display(),
            list.join("\n  ")
        )),
        other => other.into(),
    })?;
    Ok((model, side))
}

pub fn gen_data(rc: &RunConfig, out: &Path, n: usize, force: bool) -> Result<()> {
    if n == 0 {
        return Err(CliError::config("--scenes must be at least 1"));
    }
    if !(0.0..=1.0).contains(&rc.same_category) {
        return Err(CliError::config(format!("same_category = {} must lie in [0, 1]", rc.same_category)));
    }
    if out.exists() {
        let non_empty = std::fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::config(format!("{} exists and is not empty; pass --force to overwrite", out.display())));
        }
        if force {
            for f in ["manifest.json", DATASET_CONFIG] {
                let p = out.join(f);
                if p.is_file() {
                    std::fs::remove_file(p)?;
                }
            }
            if out.join("wav").is_dir() {
                std::fs::remove_dir_all(out.join("wav"))?;
            }
        }
    }
    let preset = rc.preset.unwrap_or(Preset::Desk);
    let cfg = ModelConfig::preset(preset);
    let settings = SceneSettings::for_config(&cfg);
    let scenes = generate_dataset(n, &settings, rc.seed, rc.same_category)?;
    let splits = split_indices(n, rc.train_frac, rc.val_frac, rc.seed)?;
    let m = export_dataset(&scenes, &splits, out)?;
    std::fs::write(
        out.join(DATASET_CONFIG),
        format!(
            "preset = {preset}\nseed = {}\nsame_category = {}\ntrain_frac = {}\nval_frac = {}\n",
            rc.seed, rc.same_category, rc.train_frac, rc.val_frac
        ),
    )?;
    let count = |s| m.split_ids(s).len();
    let same = scenes.iter().filter(|s| s.same_category()).count();
    println!(
        "wrote {n} scenes to {}: {} train, {} val, {} test; {same} same-category",
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

pub fn pretrain_mono(rc: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let flags = rc.mono_flags()?;
    let cfg = fresh_model_config(rc, data)?;
    let tc = rc.train_config()?;
    let scenes = training_scenes(data, &cfg)?;
    let mut model = LavssModel::new(&cfg, flags, rc.seed)?;
    let logs = fit(&mut model, &scenes, &tc)?;
    save_model(out, &model, &Sidecar { model: cfg, flags, train: tc, from_mono: None, logs })
}

fn initial_model(rc: &RunConfig, data: &Path, flags: ModelFlags) -> Result<LavssModel> {
    match &rc.from_mono {
        Some(p) => {
            let (c, side) = read_checkpoint(p)?;
            if !side.flags.mono {
                return Err(CliError::config(format!("{} is not a mono checkpoint", p.display())));
            }
            let cfg = rc.model_config(Some(&side.model))?;
            Ok(transfer_from_mono(&c, &cfg, flags, rc.seed)?)
        }
        None => Ok(LavssModel::new(&fresh_model_config(rc, data)?, flags, rc.seed)?),
    }
}

pub fn train(rc: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let flags = rc.binaural_flags();
    let tc = rc.train_config()?;
    let mut model = initial_model(rc, data, flags)?;
    let cfg = model.cfg().clone();
    let scenes = training_scenes(data, &cfg)?;
    let logs = fit(&mut model, &scenes, &tc)?;
    save_model(out, &model, &Sidecar { model: cfg, flags, train: tc, from_mono: rc.from_mono.clone(), logs })
}

/// Scores every scene independently so one bad scene does not hide the others.
fn score_scenes(
    scenes: &[SceneSample],
    cfg: &ModelConfig,
    est: Estimator<'_>,
    opts: &EvalOptions,
) -> Vec<(usize, std::result::Result<Vec<MetricRow>, CliError>)> {
    scenes
        .par_iter()
        .map(|s| {
            let res = PreparedScene::new(s, cfg)
                .and_then(|p| evaluate(std::slice::from_ref(&p), est, opts))
                .map_err(CliError::from)
                .and_then(|rows| {
                    if rows.iter().all(|r| r.sdr_db.is_finite() && r.sir_db.is_finite()) {
                        Ok(rows)
                    } else {
                        Err(CliError::Numeric(format!("scene {} produced a non-finite score", s.id)))
                    }
                });
            (s.id, res)
        })
        .collect()
}

fn print_summary(rows: &[MetricRow]) {
    println!("{:<8} {:>10} {:>10} {:>6}", "channel", "SDR (dB)", "SIR (dB)", "n");
    for (ch, sdr, sir, n) in summarize(rows) {
        println!("{ch:<8} {sdr:>10.3} {sir:>10.3} {n:>6}");
    }
    let sir = rows.iter().map(|r| r.sir_db).sum::<f64>() / rows.len().max(1) as f64;
    println!("{:<8} {:>10.3} {:>10.3} {:>6}", "average", mean_sdr(rows), sir, rows.len());
}

pub fn eval(rc: &RunConfig, data: &Path, source: Source, mono: bool, split: SplitArg, out: &Path) -> Result<()> {
    let loaded = match &source {
        Source::Checkpoint(p) => Some(load_model(rc, p)?.0),
        _ => None,
    };
    let (cfg, est, mono) = match (&loaded, source) {
        (Some(m), _) => (m.cfg().clone(), Estimator::Model(m), m.flags().mono),
        (None, Source::Oracle) => (fresh_model_config(rc, data)?, Estimator::Oracle, mono),
        (None, _) => (fresh_model_config(rc, data)?, Estimator::Baseline, mono),
    };
    let opts = EvalOptions { filter_len: rc.filter_len, threshold: rc.threshold, mono };
    if opts.filter_len == 0 {
        return Err(CliError::config("filter_len must be positive"));
    }
    let (m, scenes) = load_data(data, &cfg)?;
    let scenes = select(&m, scenes, split);
    if scenes.is_empty() {
        return Err(CliError::data(format!("no scenes in the {split:?} split of {}", data.display())));
    }
    let results = score_scenes(&scenes, &cfg, est, &opts);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => {
                log::error!("scene {id}: {e}");
                failures.push(e);
            }
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_metrics_csv(out, &rows)?;
    print_summary(&rows);
    println!("{} of {} scenes scored; metrics in {}", scenes.len() - failures.len(), scenes.len(), out.display());
    match failures.into_iter().next() {
        None => Ok(()),
        Some(first) => {
            let msg = format!("some scenes failed; first: {first}");
            Err(match first {
                CliError::Numeric(_) => CliError::Numeric(msg),
                CliError::Config(_) => CliError::Config(msg),
                CliError::Data(_) => CliError::Data(msg),
            })
        }
    }
}

pub fn separate(rc: &RunConfig, ckpt: &Path, data: &Path, scene: usize, out: &Path) -> Result<()> {
    let (model, _) = load_model(rc, ckpt)?;
    let cfg = model.cfg();
    let (_, scenes) = load_data(data, cfg)?;
    let scene = find_scene(scenes, scene)?;
    let queries: Vec<ObjectQuery> =
        scene.objects.iter().map(|o| ObjectQuery { patch: o.patch(cfg.patch), bbox: o.bbox }).collect();
    std::fs::create_dir_all(out)?;
    let name = |k: usize| out.join(format!("object{k}_{}.wav", scene.objects[k].category));
    if model.flags().mono {
        let mix = scene.mono_mixture()?;
        write_wav(out.join("mixture.wav"), &[&mix])?;
        for (k, w) in separate_mono(&model, &mix, &queries, rc.threshold)?.iter().enumerate() {
            write_wav(name(k), &[w])?;
        }
    } else {
        let mix = scene.mixture()?;
        write_wav(out.join("mixture.wav"), &[&mix.left, &mix.right])?;
        for (k, c) in separate_stereo(&model, &mix, &queries, rc.threshold)?.iter().enumerate() {
            write_wav(name(k), &[&c.left, &c.right])?;
        }
    }
    println!("wrote {} object tracks to {}", queries.len(), out.display());
    Ok(())
}

pub fn render_spec(rc: &RunConfig, data: &Path, scene: usize, out: &Path, ckpt: Option<&Path>) -> Result<()> {
    let model = ckpt.map(|p| load_model(rc, p)).transpose()?.map(|(m, _)| m);
    let (cfg, flags, est) = match &model {
        Some(m) => (m.cfg().clone(), m.flags(), Estimator::Model(m)),
        None => (fresh_model_config(rc, data)?, ModelFlags::ABLATED, Estimator::Oracle),
    };
    let (_, scenes) = load_data(data, &cfg)?;
    let prepared = PreparedScene::new(&find_scene(scenes, scene)?, &cfg)?;
    let opts = EvalOptions { threshold: rc.threshold, mono: flags.mono, ..EvalOptions::default() };
    let estimates = estimate_scene(&prepared, est, &opts)?;
    std::fs::create_dir_all(out)?;
    let st = cfg.stft();
    let mut written = 0;
    for c in 0..flags.passes_per_object() {
        let ch = channel_label(flags.mono, c);
        write_png(&out.join(format!("mixture_{ch}.png")), &spectrogram_gray(&prepared.mixture_track(flags, c).spec))?;
        written += 1;
        for (o, e) in estimates.iter().enumerate() {
            let truth = stft(&prepared.target(flags, o, c).wav, &st)?;
            write_png(&out.join(format!("truth_object{o}_{ch}.png")), &spectrogram_gray(&truth))?;
            write_png(&out.join(format!("estimate_object{o}_{ch}.png")), &spectrogram_gray(&stft(&e[c], &st)?))?;
            written += 2;
        }
    }
    println!("wrote {written} spectrograms to {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    use_ipd: bool,
    use_position: bool,
    mono_pretrain: bool,
    epochs: usize,
    final_loss: Option<f64>,
    mean_sdr: f64,
    mean_sir: f64,
    rows: usize,
}

pub fn ablation(rc: &RunConfig, data: &Path, split: SplitArg, out: &Path) -> Result<()> {
    let cfg = fresh_model_config(rc, data)?;
    let tc = rc.train_config()?;
    let (m, all) = load_data(data, &cfg)?;
    let train_set = select(&m, all.clone(), SplitArg::Train);
    let eval_set = select(&m, all, split);
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(CliError::data(format!("{} needs both training and evaluation scenes", data.display())));
    }
    let train_set = binsep::separator::prepare_scenes(&train_set, &cfg)?;
    let eval_set = binsep::separator::prepare_scenes(&eval_set, &cfg)?;

    let mut mono = LavssModel::new(&cfg, ModelFlags::MONO, rc.seed)?;
    log::info!("pretraining the mono model");
    fit(&mut mono, &train_set, &tc)?;
    let mono_ckpt = mono.checkpoint();

    let mut out_rows = Vec::new();
    for mono_pretrain in [false, true] {
        for use_ipd in [true, false] {
            for use_position in [true, false] {
                let flags = ModelFlags::binaural(use_ipd, use_position);
                log::info!("cell ipd={use_ipd} position={use_position} mono_pretrain={mono_pretrain}");
                let mut model = if mono_pretrain {
                    transfer_from_mono(&mono_ckpt, &cfg, flags, rc.seed)?
                } else {
                    LavssModel::new(&cfg, flags, rc.seed)?
                };
                let logs = fit(&mut model, &train_set, &tc)?;
                let opts = EvalOptions { filter_len: rc.filter_len, threshold: rc.threshold, mono: false };
                let rows = evaluate(&eval_set, Estimator::Model(&model), &opts)?;
                let sir = rows.iter().map(|r| r.sir_db).sum::<f64>() / rows.len().max(1) as f64;
                out_rows.push(AblationRow {
                    use_ipd,
                    use_position,
                    mono_pretrain,
                    epochs: tc.epochs,
                    final_loss: logs.last().map(|l| l.loss_total),
                    mean_sdr: mean_sdr(&rows),
                    mean_sir: sir,
                    rows: rows.len(),
                });
            }
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    for r in &out_rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("{:<5} {:<8} {:<5} {:>10} {:>10}", "ipd", "position", "mono", "SDR (dB)", "SIR (dB)");
    for r in &out_rows {
        println!(
            "{:<5} {:<8} {:<5} {:>10.3} {:>10.3}",
            r.use_ipd, r.use_position, r.mono_pretrain, r.mean_sdr, r.mean_sir
        );
    }
    println!("wrote {} ablation rows to {}", out_rows.len(), out.display());
    Ok(())
}
