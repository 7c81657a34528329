//! Flat key=value run configuration. Unknown keys are rejected; every key
//! has a documented default (see [`RunConfig::default_file_text`]).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::SplitFractions;
use crate::error::{Error, Result};
use crate::stage2::Stage2Mode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Sines,
    Trend,
    ArmaLike,
    Csv(PathBuf),
}

impl DataSource {
    fn parse(value: &str) -> Result<DataSource> {
        match value {
            "sines" => Ok(DataSource::Sines),
            "trend" => Ok(DataSource::Trend),
            "arma-like" => Ok(DataSource::ArmaLike),
            other => match other.strip_prefix("csv:") {
                Some(path) if !path.is_empty() => Ok(DataSource::Csv(PathBuf::from(path))),
                _ => Err(Error::Config(format!(
                    "data.source must be sines | trend | arma-like | csv:<path>, got '{other}'"
                ))),
            },
        }
    }

    fn render(&self) -> String {
        match self {
            DataSource::Sines => "sines".into(),
            DataSource::Trend => "trend".into(),
            DataSource::ArmaLike => "arma-like".into(),
            DataSource::Csv(path) => format!("csv:{}", path.display()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub source: DataSource,
    pub channels: usize,
    pub length: usize,
    pub noise_std: f64,
    pub components: usize,
    pub arma_phi: f64,
    pub arma_theta: f64,
    pub csv_columns: Option<Vec<String>>,
    pub lookback: usize,
    pub horizon: usize,
    /// 0 means "use the horizon" (the default window stride).
    pub window_stride: usize,
    pub splits: SplitFractions,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub backbone: BackboneConfig,
    pub stage1_epochs: usize,
    pub stage1_batch: usize,
    pub stage1_lr: f64,
    pub stage2_epochs: usize,
    pub stage2_batch: usize,
    pub stage2_lr: f64,
    /// 0 means auto: max(8, n/16) clamped below n.
    pub core_size: usize,
    pub top_k: usize,
    pub attn_heads: usize,
    pub mode: Stage2Mode,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub log_every: usize,
    pub eval_horizons: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            source: DataSource::Sines,
            channels: 4,
            length: 1280,
            noise_std: 0.05,
            components: 3,
            arma_phi: 0.8,
            arma_theta: 0.2,
            csv_columns: None,
            lookback: 64,
            horizon: 16,
            window_stride: 0,
            splits: SplitFractions::default(),
            patch_len: 16,
            patch_stride: 8,
            backbone: BackboneConfig::default(),
            stage1_epochs: 5,
            stage1_batch: 16,
            stage1_lr: 0.01,
            stage2_epochs: 3,
            stage2_batch: 16,
            stage2_lr: 0.01,
            core_size: 0,
            top_k: 4,
            attn_heads: 4,
            mode: Stage2Mode::Sim,
            seed: 42,
            out_dir: PathBuf::from("out"),
            log_every: 10,
            eval_horizons: vec![8, 16, 24, 32],
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{value}' for key '{key}'")))
}

impl RunConfig {
    pub fn effective_window_stride(&self) -> usize {
        if self.window_stride == 0 {
            self.horizon
        } else {
            self.window_stride
        }
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_str_checked(&text)
    }

    pub fn from_str_checked(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got '{line}'",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.source" => self.source = DataSource::parse(value)?,
            "data.channels" => self.channels = parse_num(key, value)?,
            "data.length" => self.length = parse_num(key, value)?,
            "data.noise_std" => self.noise_std = parse_num(key, value)?,
            "data.components" => self.components = parse_num(key, value)?,
            "data.arma_phi" => self.arma_phi = parse_num(key, value)?,
            "data.arma_theta" => self.arma_theta = parse_num(key, value)?,
            "data.columns" => {
                self.csv_columns = if value.is_empty() {
                    None
                } else {
                    Some(value.split(',').map(|s| s.trim().to_string()).collect())
                }
            }
            "data.lookback" => self.lookback = parse_num(key, value)?,
            "data.horizon" => self.horizon = parse_num(key, value)?,
            "data.window_stride" => self.window_stride = parse_num(key, value)?,
            "data.split_train" => self.splits.train = parse_num(key, value)?,
            "data.split_val" => self.splits.val = parse_num(key, value)?,
            "data.split_test" => self.splits.test = parse_num(key, value)?,
            "patch.len" => self.patch_len = parse_num(key, value)?,
            "patch.stride" => self.patch_stride = parse_num(key, value)?,
            "backbone.dim" => self.backbone.dim = parse_num(key, value)?,
            "backbone.heads" => self.backbone.heads = parse_num(key, value)?,
            "backbone.layers" => self.backbone.layers = parse_num(key, value)?,
            "backbone.max_seq" => self.backbone.max_seq = parse_num(key, value)?,
            "backbone.seed" => self.backbone.seed = parse_num(key, value)?,
            "stage1.epochs" => self.stage1_epochs = parse_num(key, value)?,
            "stage1.batch_size" => self.stage1_batch = parse_num(key, value)?,
            "stage1.lr" => self.stage1_lr = parse_num(key, value)?,
            "stage2.epochs" => self.stage2_epochs = parse_num(key, value)?,
            "stage2.batch_size" => self.stage2_batch = parse_num(key, value)?,
            "stage2.lr" => self.stage2_lr = parse_num(key, value)?,
            "stage2.core_size" => self.core_size = parse_num(key, value)?,
            "stage2.top_k" => self.top_k = parse_num(key, value)?,
            "stage2.attn_heads" => self.attn_heads = parse_num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = parse_num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "log_every" => self.log_every = parse_num(key, value)?,
            "eval.horizons" => {
                self.eval_horizons = value
                    .split(',')
                    .map(|s| parse_num("eval.horizons", s.trim()))
                    .collect::<Result<_>>()?;
            }
            unknown => {
                return Err(Error::Config(format!("unknown config key '{unknown}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("data.horizon must be >= 1".into()));
        }
        if self.lookback < 2 {
            return Err(Error::Config("data.lookback must be >= 2".into()));
        }
        if self.eval_horizons.is_empty() {
            return Err(Error::Config("eval.horizons must not be empty".into()));
        }
        if self.stage1_batch == 0 || self.stage2_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        self.splits.validate()?;
        self.backbone.validate()?;
        Ok(())
    }

    /// The documented default config. Parsing this text reproduces
    /// `RunConfig::default()`.
    pub fn default_file_text() -> String {
        let d = RunConfig::default();
        format!(
            "# data: sines | trend | arma-like | csv:<path>\n\
             data.source = {}\n\
             data.channels = {}\n\
             data.length = {}\n\
             data.noise_std = {}\n\
             data.components = {}\n\
             data.arma_phi = {}\n\
             data.arma_theta = {}\n\
             # data.columns: comma-separated CSV value columns; empty = all\n\
             data.columns =\n\
             data.lookback = {}\n\
             data.horizon = {}\n\
             # 0 = use the horizon\n\
             data.window_stride = {}\n\
             data.split_train = {}\n\
             data.split_val = {}\n\
             data.split_test = {}\n\
             patch.len = {}\n\
             patch.stride = {}\n\
             backbone.dim = {}\n\
             backbone.heads = {}\n\
             backbone.layers = {}\n\
             backbone.max_seq = {}\n\
             backbone.seed = {}\n\
             stage1.epochs = {}\n\
             stage1.batch_size = {}\n\
             stage1.lr = {}\n\
             stage2.epochs = {}\n\
             stage2.batch_size = {}\n\
             stage2.lr = {}\n\
             # 0 = auto: max(8, n/16), clamped below n\n\
             stage2.core_size = {}\n\
             stage2.top_k = {}\n\
             stage2.attn_heads = {}\n\
             # sim | attn\n\
             mode = {}\n\
             seed = {}\n\
             out_dir = {}\n\
             log_every = {}\n\
             eval.horizons = {}\n",
            d.source.render(),
            d.channels,
            d.length,
            d.noise_std,
            d.components,
            d.arma_phi,
            d.arma_theta,
            d.lookback,
            d.horizon,
            d.window_stride,
            d.splits.train,
            d.splits.val,
            d.splits.test,
            d.patch_len,
            d.patch_stride,
            d.backbone.dim,
            d.backbone.heads,
            d.backbone.layers,
            d.backbone.max_seq,
            d.backbone.seed,
            d.stage1_epochs,
            d.stage1_batch,
            d.stage1_lr,
            d.stage2_epochs,
            d.stage2_batch,
            d.stage2_lr,
            d.core_size,
            d.top_k,
            d.attn_heads,
            d.mode.as_str(),
            d.seed,
            d.out_dir.display(),
            d.log_every,
            d.eval_horizons
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_file_parses_back_to_defaults() {
        let cfg = RunConfig::from_str_checked(&RunConfig::default_file_text()).unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.source, d.source);
        assert_eq!(cfg.lookback, d.lookback);
        assert_eq!(cfg.eval_horizons, d.eval_horizons);
        assert_eq!(cfg.seed, d.seed);
        assert_eq!(cfg.mode, d.mode);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_str_checked("no.such.key = 5").unwrap_err();
        assert!(err.to_string().contains("no.such.key"));
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::from_str_checked(
            "# comment\n\nmode = attn\nseed = 7\ndata.source = csv:some/file.csv\neval.horizons = 4, 8\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, Stage2Mode::Attn);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.source, DataSource::Csv(PathBuf::from("some/file.csv")));
        assert_eq!(cfg.eval_horizons, vec![4, 8]);
    }

    #[test]
    fn bad_values_and_shapes_rejected() {
        assert!(RunConfig::from_str_checked("seed = banana").is_err());
        assert!(RunConfig::from_str_checked("just a line").is_err());
        assert!(RunConfig::from_str_checked("data.horizon = 0").is_err());
        assert!(RunConfig::from_str_checked("data.split_train = 0.9").is_err());
        assert!(RunConfig::from_str_checked("backbone.dim = 30\nbackbone.heads = 4").is_err());
    }

    #[test]
    fn window_stride_defaults_to_horizon() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.effective_window_stride(), cfg.horizon);
        let cfg = RunConfig::from_str_checked("data.window_stride = 3").unwrap();
        assert_eq!(cfg.effective_window_stride(), 3);
    }
}
