//! Run settings: a flat `key = value` file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use binsep::separator::TrainConfig;
use binsep::{MaskTarget, ModelConfig, ModelFlags, Preset};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const KEYS: [&str; 20] = [
    "preset",
    "seed",
    "lr",
    "batch",
    "epochs",
    "alpha",
    "beta",
    "weight_decay",
    "heads",
    "octaves",
    "levels",
    "mask_target",
    "filter_len",
    "threshold",
    "use_ipd",
    "use_position",
    "from_mono",
    "same_category",
    "train_frac",
    "val_frac",
];

/// Everything a command may need. Model-shape keys are optional so that a checkpoint's
/// recorded shape is used unless one is set explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub weight_decay: f64,
    pub heads: Option<usize>,
    pub octaves: Option<usize>,
    /// U-Net levels N; truncates the preset's channel schedule.
    pub levels: Option<usize>,
    pub mask_target: Option<MaskTarget>,
    pub filter_len: usize,
    pub threshold: Option<f64>,
    pub use_ipd: Option<bool>,
    pub use_position: Option<bool>,
    pub from_mono: Option<PathBuf>,
    /// Fraction of generated scenes whose two objects share a category.
    pub same_category: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tc = TrainConfig::default();
        Self {
            preset: None,
            seed: 0,
            lr: tc.lr,
            batch: tc.batch_scenes,
            epochs: tc.epochs,
            alpha: tc.alpha,
            beta: tc.beta,
            weight_decay: tc.weight_decay,
            heads: None,
            octaves: None,
            levels: None,
            mask_target: None,
            filter_len: binsep::losses_metrics::DEFAULT_FILTER_LEN,
            threshold: None,
            use_ipd: None,
            use_position: None,
            from_mono: None,
            same_category: 0.5,
            train_frac: 0.8,
            val_frac: 0.1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CliError::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(CliError::config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "preset" => self.preset = Some(v.parse().map_err(|e: binsep::BinsepError| CliError::config(e.to_string()))?),
            "seed" => self.seed = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "heads" => self.heads = Some(parse(key, v)?),
            "octaves" => self.octaves = Some(parse(key, v)?),
            "levels" => self.levels = Some(parse(key, v)?),
            "mask_target" => self.mask_target = Some(v.parse().map_err(|e: binsep::BinsepError| CliError::config(e.to_string()))?),
            "filter_len" => self.filter_len = parse(key, v)?,
            "threshold" => self.threshold = Some(parse(key, v)?),
            "use_ipd" => self.use_ipd = Some(parse_bool(key, v)?),
            "use_position" => self.use_position = Some(parse_bool(key, v)?),
            "from_mono" => self.from_mono = Some(PathBuf::from(v)),
            "same_category" => self.same_category = parse(key, v)?,
            "train_frac" => self.train_frac = parse(key, v)?,
            "val_frac" => self.val_frac = parse(key, v)?,
            other => {
                return Err(CliError::config(format!("unknown key `{other}` (known keys: {})", KEYS.join(", "))));
            }
        }
        Ok(())
    }

    /// Applies a `key=value` assignment as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| CliError::config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Applies every assignment of a config file; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            self.set(k, v).map_err(|e| CliError::config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    /// Model settings: `base` (or the desk preset) with this run's overrides applied.
    pub fn model_config(&self, base: Option<&ModelConfig>) -> Result<ModelConfig> {
        let mut cfg = match (base, self.preset) {
            (Some(b), Some(p)) if b.preset != p => ModelConfig::preset(p),
            (Some(b), _) => b.clone(),
            (None, p) => ModelConfig::preset(p.unwrap_or(Preset::Desk)),
        };
        if let Some(h) = self.heads {
            cfg.heads = h;
        }
        if let Some(d) = self.octaves {
            cfg.octaves = d;
        }
        if let Some(n) = self.levels {
            if n < 3 || n > cfg.unet_channels.len() {
                return Err(CliError::config(format!(
                    "levels = {n} is outside 3..={} for the {} preset",
                    cfg.unet_channels.len(),
                    cfg.preset
                )));
            }
            cfg.unet_channels.truncate(n);
            cfg.d_model = cfg.unet_channels[n - 1];
        }
        if let Some(t) = self.mask_target {
            cfg.mask_target = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        if self.batch == 0 {
            return Err(CliError::config("batch must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CliError::config(format!("lr = {} must be a finite non-negative number", self.lr)));
        }
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_scenes: self.batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
        })
    }

    pub fn binaural_flags(&self) -> ModelFlags {
        ModelFlags::binaural(self.use_ipd.unwrap_or(true), self.use_position.unwrap_or(true))
    }

    /// Mono pretraining takes neither IPD nor position input.
    pub fn mono_flags(&self) -> Result<ModelFlags> {
        if self.use_ipd == Some(true) || self.use_position == Some(true) {
            return Err(CliError::config("mono pretraining cannot use IPD or position input"));
        }
        Ok(ModelFlags::MONO)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# experiment\npreset = tiny\nlr=0.01 # faster\n\nuse_ipd = false\n").unwrap();
        let mut rc = RunConfig::default();
        rc.load_file(&p).unwrap();
        rc.set_pair("lr=0.002").unwrap();
        assert_eq!(rc.preset, Some(Preset::Tiny));
        assert_eq!(rc.lr, 0.002);
        assert_eq!(rc.binaural_flags(), ModelFlags::binaural(false, true));
        assert!(rc.mono_flags().is_ok());
    }

    #[test]
    fn bad_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "seed = 1\nbogus = 3\n").unwrap();
        let e = RunConfig::default().load_file(&p).unwrap_err();
        assert!(e.to_string().contains(":2:") && e.to_string().contains("bogus"), "{e}");
        assert!(RunConfig::default().set_pair("seed").is_err());
        assert!(RunConfig::default().set("epochs", "-1").is_err());
    }

    #[test]
    fn mono_forbids_spatial_inputs() {
        let mut rc = RunConfig::default();
        rc.set("use_position", "true").unwrap();
        assert!(rc.mono_flags().is_err());
    }

    #[test]
    fn model_overrides() {
        let mut rc = RunConfig::default();
        rc.set("preset", "desk").unwrap();
        rc.set("levels", "4").unwrap();
        rc.set("heads", "4").unwrap();
        let cfg = rc.model_config(None).unwrap();
        assert_eq!(cfg.unet_channels, vec![16, 32, 64, 128]);
        assert_eq!((cfg.heads, cfg.d_model), (4, 128));
        rc.set("levels", "9").unwrap();
        assert!(rc.model_config(None).is_err());
    }

    #[test]
    fn recorded_shape_wins_without_overrides() {
        let tiny = ModelConfig::preset(Preset::Tiny);
        let rc = RunConfig::default();
        assert_eq!(rc.model_config(Some(&tiny)).unwrap(), tiny);
    }
}
