//! Flat key-value run configuration. Defaults mirror the published
//! training regime; a `desk` profile shrinks everything for laptop-scale
//! synthetic runs. Files are `key = value` lines with `#` comments.

use std::collections::BTreeSet;
use std::path::Path;

use crate::darts::{NetworkConfig, SearchSchedule};
use crate::error::{Error, Result};
use crate::features::SpectrogramConfig;
use crate::fusion::FusionTrainConfig;
use crate::optim::{AdamConfig, SgdConfig};
use crate::rnn::SelectConfig;
use crate::space::CnnOpKind;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub sample_rate: u32,

    pub spec_duration_s: f64,
    pub spec_window_ms: f64,
    pub spec_overlap_ms: f64,
    pub spec_bins: usize,
    pub spec_rows: usize,

    pub cnn_cells: usize,
    pub cnn_channels: usize,
    pub cnn_nodes: usize,
    pub cnn_op_set: Vec<CnnOpKind>,
    pub cnn_reductions: Vec<usize>,
    pub cnn_epochs: usize,
    pub cnn_warmup_epochs: usize,
    pub cnn_retrain_epochs: usize,
    pub cnn_batch_size: usize,
    pub cnn_omega_lr: f32,
    pub cnn_omega_momentum: f32,
    pub cnn_omega_weight_decay: f32,
    pub cnn_alpha_lr: f32,

    pub rnn_cells: usize,
    pub rnn_hidden: usize,
    pub rnn_lr: f32,
    pub rnn_epochs: usize,
    pub rnn_batch_size: usize,

    pub fusion_lr: f32,
    pub fusion_epochs: usize,
    pub fusion_batch_size: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            sample_rate: 16_000,
            spec_duration_s: 8.0,
            spec_window_ms: 25.0,
            spec_overlap_ms: 14.0,
            spec_bins: 140,
            spec_rows: 140,
            cnn_cells: 3,
            cnn_channels: 6,
            cnn_nodes: 4,
            cnn_op_set: CnnOpKind::ALL.to_vec(),
            cnn_reductions: vec![1],
            cnn_epochs: 50,
            cnn_warmup_epochs: 0,
            cnn_retrain_epochs: 50,
            cnn_batch_size: 8,
            cnn_omega_lr: 0.025,
            cnn_omega_momentum: 0.9,
            cnn_omega_weight_decay: 3e-4,
            cnn_alpha_lr: 3e-4,
            rnn_cells: 2,
            rnn_hidden: 256,
            rnn_lr: 1e-3,
            rnn_epochs: 50,
            rnn_batch_size: 8,
            fusion_lr: 1e-3,
            fusion_epochs: 100,
            fusion_batch_size: 8,
        }
    }
}

impl Config {
    /// Laptop-scale profile for the synthetic corpus: small spectrograms,
    /// a slim supernet, short schedules.
    pub fn desk() -> Self {
        Config {
            spec_duration_s: 2.0,
            spec_bins: 32,
            spec_rows: 32,
            cnn_cells: 2,
            cnn_channels: 4,
            cnn_nodes: 2,
            cnn_reductions: vec![1],
            cnn_epochs: 16,
            cnn_warmup_epochs: 5,
            cnn_retrain_epochs: 40,
            cnn_batch_size: 8,
            cnn_alpha_lr: 0.02,
            rnn_hidden: 32,
            rnn_epochs: 15,
            fusion_epochs: 400,
            fusion_lr: 3e-3,
            ..Default::default()
        }
    }

    pub fn by_profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Config::default()),
            "desk" => Ok(Config::desk()),
            other => Err(Error::InvalidConfig(format!(
                "unknown profile `{other}` (expected paper or desk)"
            ))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value `{v}` for key `{key}`")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "spectrogram.duration_s" => self.spec_duration_s = parse(key, value)?,
            "spectrogram.window_ms" => self.spec_window_ms = parse(key, value)?,
            "spectrogram.overlap_ms" => self.spec_overlap_ms = parse(key, value)?,
            "spectrogram.bins" => self.spec_bins = parse(key, value)?,
            "spectrogram.rows" => self.spec_rows = parse(key, value)?,
            "cnn.cells" => self.cnn_cells = parse(key, value)?,
            "cnn.channels" => self.cnn_channels = parse(key, value)?,
            "cnn.nodes" => self.cnn_nodes = parse(key, value)?,
            "cnn.op_set" => {
                let mut ops = Vec::new();
                for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let op = CnnOpKind::from_name(name).ok_or_else(|| {
                        Error::InvalidConfig(format!("unknown cnn op `{name}`"))
                    })?;
                    ops.push(op);
                }
                if ops.is_empty() {
                    return Err(Error::InvalidConfig("cnn.op_set is empty".into()));
                }
                self.cnn_op_set = ops;
            }
            "cnn.reductions" => {
                let mut cells = Vec::new();
                for tok in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    cells.push(parse::<usize>(key, tok)?);
                }
                self.cnn_reductions = cells;
            }
            "cnn.epochs" => self.cnn_epochs = parse(key, value)?,
            "cnn.warmup_epochs" => self.cnn_warmup_epochs = parse(key, value)?,
            "cnn.retrain_epochs" => self.cnn_retrain_epochs = parse(key, value)?,
            "cnn.batch_size" => self.cnn_batch_size = parse(key, value)?,
            "cnn.omega.lr" => self.cnn_omega_lr = parse(key, value)?,
            "cnn.omega.momentum" => self.cnn_omega_momentum = parse(key, value)?,
            "cnn.omega.weight_decay" => self.cnn_omega_weight_decay = parse(key, value)?,
            "cnn.alpha.lr" => self.cnn_alpha_lr = parse(key, value)?,
            "rnn.cells" => self.rnn_cells = parse(key, value)?,
            "rnn.hidden" => self.rnn_hidden = parse(key, value)?,
            "rnn.lr" => self.rnn_lr = parse(key, value)?,
            "rnn.epochs" => self.rnn_epochs = parse(key, value)?,
            "rnn.batch_size" => self.rnn_batch_size = parse(key, value)?,
            "fusion.lr" => self.fusion_lr = parse(key, value)?,
            "fusion.epochs" => self.fusion_epochs = parse(key, value)?,
            "fusion.batch_size" => self.fusion_batch_size = parse(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key `{other}`")))
            }
        }
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = Config::default();
        cfg.parse_text(&text)?;
        Ok(cfg)
    }

    /// Overrides of the form `key=value`.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "override `{pair}` is not key=value"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical sorted `key = value` dump: the reproducibility manifest.
    pub fn to_canonical_string(&self) -> String {
        let ops = self
            .cnn_op_set
            .iter()
            .map(|o| o.name())
            .collect::<Vec<_>>()
            .join(",");
        let reductions = self
            .cnn_reductions
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut pairs: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("sample_rate".into(), self.sample_rate.to_string()),
            ("spectrogram.duration_s".into(), format!("{}", self.spec_duration_s)),
            ("spectrogram.window_ms".into(), format!("{}", self.spec_window_ms)),
            ("spectrogram.overlap_ms".into(), format!("{}", self.spec_overlap_ms)),
            ("spectrogram.bins".into(), self.spec_bins.to_string()),
            ("spectrogram.rows".into(), self.spec_rows.to_string()),
            ("cnn.cells".into(), self.cnn_cells.to_string()),
            ("cnn.channels".into(), self.cnn_channels.to_string()),
            ("cnn.nodes".into(), self.cnn_nodes.to_string()),
            ("cnn.op_set".into(), ops),
            ("cnn.reductions".into(), reductions),
            ("cnn.epochs".into(), self.cnn_epochs.to_string()),
            ("cnn.warmup_epochs".into(), self.cnn_warmup_epochs.to_string()),
            ("cnn.retrain_epochs".into(), self.cnn_retrain_epochs.to_string()),
            ("cnn.batch_size".into(), self.cnn_batch_size.to_string()),
            ("cnn.omega.lr".into(), format!("{}", self.cnn_omega_lr)),
            ("cnn.omega.momentum".into(), format!("{}", self.cnn_omega_momentum)),
            ("cnn.omega.weight_decay".into(), format!("{}", self.cnn_omega_weight_decay)),
            ("cnn.alpha.lr".into(), format!("{}", self.cnn_alpha_lr)),
            ("rnn.cells".into(), self.rnn_cells.to_string()),
            ("rnn.hidden".into(), self.rnn_hidden.to_string()),
            ("rnn.lr".into(), format!("{}", self.rnn_lr)),
            ("rnn.epochs".into(), self.rnn_epochs.to_string()),
            ("rnn.batch_size".into(), self.rnn_batch_size.to_string()),
            ("fusion.lr".into(), format!("{}", self.fusion_lr)),
            ("fusion.epochs".into(), self.fusion_epochs.to_string()),
            ("fusion.batch_size".into(), self.fusion_batch_size.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    // derived sub-configurations

    pub fn spectrogram_config(&self) -> SpectrogramConfig {
        SpectrogramConfig {
            target_duration_s: self.spec_duration_s,
            sample_rate: self.sample_rate,
            window_ms: self.spec_window_ms,
            overlap_ms: self.spec_overlap_ms,
            feature_bins: self.spec_bins,
            output_rows: self.spec_rows,
        }
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            num_cells: self.cnn_cells,
            channels: self.cnn_channels,
            num_nodes: self.cnn_nodes,
            reduction_positions: BTreeSet::from_iter(self.cnn_reductions.iter().copied()),
            input_channels: 1,
            input_height: self.spec_rows,
            input_width: self.spec_bins,
            num_classes: crate::dataset::NUM_CLASSES,
            op_set: self.cnn_op_set.clone(),
        }
    }

    pub fn search_schedule(&self) -> SearchSchedule {
        SearchSchedule {
            epochs: self.cnn_epochs,
            batch_size: self.cnn_batch_size,
            warmup_epochs: self.cnn_warmup_epochs,
            patience: 5,
            seed: self.seed,
        }
    }

    pub fn omega_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.cnn_omega_lr,
            momentum: self.cnn_omega_momentum,
            weight_decay: self.cnn_omega_weight_decay,
        }
    }

    pub fn alpha_adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.cnn_alpha_lr)
    }

    pub fn rnn_select(&self) -> SelectConfig {
        SelectConfig {
            adam: AdamConfig::with_lr(self.rnn_lr),
            epochs: self.rnn_epochs,
            batch_size: self.rnn_batch_size,
            seed: self.seed,
        }
    }

    pub fn fusion_train(&self) -> FusionTrainConfig {
        FusionTrainConfig {
            adam: AdamConfig::with_lr(self.fusion_lr),
            epochs: self.fusion_epochs,
            batch_size: self.fusion_batch_size,
            seed: self.seed,
        }
    }
}
