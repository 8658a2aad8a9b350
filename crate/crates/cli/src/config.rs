//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later keys win, and
//! command-line flags win over the file.

use std::path::PathBuf;

use ath_core::data::DatasetSpec;
use ath_core::losses::{Distance, LossMode};
use ath_core::metrics::ApNormalization;
use ath_core::network::AthConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// Fraction of each class held out as queries.
    pub test_fraction: f64,
    /// Drives data generation, the split and model initialisation.
    pub seed: u64,
    /// `None` means "take it from the checkpoint" for read commands and 36
    /// for training.
    pub k: Option<usize>,
    pub r: f64,
    pub base_channels: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub attention: bool,
    pub mode: LossMode,
    pub distance: Distance,
    pub topn: Vec<usize>,
    pub ap_norm: ApNormalization,
    pub r_values: Vec<f64>,
    pub k_values: Vec<usize>,
    pub threads: usize,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = AthConfig::default();
        RunConfig {
            dataset: DatasetSpec::default(),
            test_fraction: 0.5,
            seed: 0,
            k: None,
            r: model.r,
            base_channels: model.base_channels,
            lr: model.lr,
            momentum: model.momentum,
            batch: model.batch,
            epochs: model.epochs,
            attention: true,
            mode: LossMode::Combined,
            distance: Distance::default(),
            topn: vec![10],
            ap_norm: ApNormalization::default(),
            r_values: vec![0.3, 0.5, 0.7],
            k_values: vec![12, 24, 36, 48],
            threads: 1,
            data: None,
            checkpoint: None,
            index: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim().parse().map_err(|_| CliError::Usage(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    let out: Vec<T> = v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err(CliError::Usage(format!("{key}: empty list")));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "class_counts" => self.dataset.class_counts = parse_list(key, v)?,
            "image_size" => self.dataset.image_size = parse(key, v)?,
            "roi_size" => self.dataset.roi_size = parse(key, v)?,
            "noise_level" => self.dataset.noise_level = parse(key, v)?,
            "contrast" => self.dataset.contrast = parse(key, v)?,
            "jitter" => self.dataset.jitter = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "k" => self.k = Some(parse(key, v)?),
            "r" => self.r = parse(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "attention" => self.attention = parse(key, v)?,
            "mode" => self.mode = LossMode::parse(v).ok_or_else(|| CliError::Usage(format!("mode: unknown mode {v:?}")))?,
            "distance" => {
                self.distance = match v {
                    "squared" => Distance::SquaredEuclidean,
                    "euclidean" => Distance::Euclidean,
                    _ => return Err(CliError::Usage(format!("distance: expected squared or euclidean, got {v:?}"))),
                }
            }
            "topn" => self.topn = parse_list(key, v)?,
            "ap_norm" => {
                self.ap_norm = ApNormalization::parse(v).ok_or_else(|| CliError::Usage(format!("ap_norm: expected retrieved or corpus, got {v:?}")))?
            }
            "r_values" => self.r_values = parse_list(key, v)?,
            "k_values" => self.k_values = parse_list(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "index" => self.index = Some(PathBuf::from(v)),
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(key.trim(), value).map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.topn.contains(&0) {
            return Err(CliError::Usage("topn must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CliError::Usage(format!("test_fraction {} must lie in (0, 1)", self.test_fraction)));
        }
        if self.threads == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Dataset spec with the run seed applied.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            ..self.dataset.clone()
        }
    }

    /// Model config for a dataset of the given extent and class count.
    pub fn model_config(&self, input_size: usize, classes: usize) -> AthConfig {
        AthConfig {
            base_channels: self.base_channels,
            r: self.r,
            seed: self.seed,
            lr: self.lr,
            momentum: self.momentum,
            batch: self.batch,
            epochs: self.epochs,
            attention: self.attention,
            ..AthConfig::for_input(input_size, self.k.unwrap_or(36), classes)
        }
    }
}
