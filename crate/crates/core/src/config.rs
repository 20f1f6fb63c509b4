//! Training configuration as a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`TrainConfig::to_kv`] writes every key, so a dump is a
//! complete, reloadable configuration.

use std::path::PathBuf;

use crate::data::PreprocessConfig;
use crate::edges::CannyParams;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::GeneratorConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Domain-A (thermal) image directory.
    pub data_a: Option<PathBuf>,
    /// Domain-B (daylight) image directory.
    pub data_b: Option<PathBuf>,
    pub skip_undecodable: bool,
    /// Edge-map cache directory; defaults to `<out>/edges` on the CLI.
    pub edge_cache: Option<PathBuf>,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Iterations per epoch; 0 means the larger domain size.
    pub iters_per_epoch: usize,
    pub ssim_accs_start_iter: u64,
    pub batch_size: usize,
    /// Checkpoint period in iterations; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    /// Sample-grid period in iterations; 0 disables samples.
    pub sample_every: u64,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub ndf: usize,
    pub preprocess: PreprocessConfig,
    pub patch_size: usize,
    pub edges: CannyParams,
}

impl Default for TrainConfig {
    /// Full-scale settings.
    fn default() -> Self {
        Self {
            seed: 0,
            data_a: None,
            data_b: None,
            skip_undecodable: false,
            edge_cache: None,
            lr0: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 80,
            iters_per_epoch: 0,
            ssim_accs_start_iter: 50_000,
            batch_size: 1,
            checkpoint_every: 0,
            sample_every: 0,
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            ndf: 64,
            preprocess: PreprocessConfig::default(),
            patch_size: crate::edges::PATCH_SIZE,
            edges: CannyParams::default(),
        }
    }
}

/// Every key in dump order.
pub const KEYS: &[&str] = &[
    "seed",
    "data_a",
    "data_b",
    "skip_undecodable",
    "edge_cache",
    "lr0",
    "beta1",
    "beta2",
    "epochs",
    "iters_per_epoch",
    "ssim_accs_start_iter",
    "batch_size",
    "checkpoint_every",
    "sample_every",
    "lambda_cyc",
    "lambda_ssim",
    "lambda_tv",
    "lambda_att",
    "lambda_sga",
    "alpha",
    "beta",
    "ngf",
    "n_res_enc",
    "n_res_dec",
    "gn_groups",
    "ndf",
    "resize_w",
    "resize_h",
    "crop_w",
    "crop_h",
    "train_crop",
    "hflip_prob",
    "patch_size",
    "edge_sigma",
    "edge_high",
    "edge_low",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    /// Desk-scale preset: 64×64 images used whole, a small network, the
    /// schedule gates at iteration 100 and 2000 iterations in total.
    pub fn desk() -> Self {
        Self {
            epochs: 100,
            iters_per_epoch: 20,
            ssim_accs_start_iter: 100,
            generator: GeneratorConfig { ngf: 8, n_res_enc: 2, n_res_dec: 2, gn_groups: 8 },
            ndf: 8,
            preprocess: PreprocessConfig { resize: (64, 64), crop: (64, 64), train_crop: 64, hflip_prob: 0.5 },
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data_a" => self.data_a = opt_path(v),
            "data_b" => self.data_b = opt_path(v),
            "skip_undecodable" => self.skip_undecodable = parse(key, v)?,
            "edge_cache" => self.edge_cache = opt_path(v),
            "lr0" => self.lr0 = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "iters_per_epoch" => self.iters_per_epoch = parse(key, v)?,
            "ssim_accs_start_iter" => self.ssim_accs_start_iter = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "sample_every" => self.sample_every = parse(key, v)?,
            "lambda_cyc" => self.weights.lambda_cyc = parse(key, v)?,
            "lambda_ssim" => self.weights.lambda_ssim = parse(key, v)?,
            "lambda_tv" => self.weights.lambda_tv = parse(key, v)?,
            "lambda_att" => self.weights.lambda_att = parse(key, v)?,
            "lambda_sga" => self.weights.lambda_sga = parse(key, v)?,
            "alpha" => self.weights.alpha = parse(key, v)?,
            "beta" => self.weights.beta = parse(key, v)?,
            "ngf" => self.generator.ngf = parse(key, v)?,
            "n_res_enc" => self.generator.n_res_enc = parse(key, v)?,
            "n_res_dec" => self.generator.n_res_dec = parse(key, v)?,
            "gn_groups" => self.generator.gn_groups = parse(key, v)?,
            "ndf" => self.ndf = parse(key, v)?,
            "resize_w" => self.preprocess.resize.0 = parse(key, v)?,
            "resize_h" => self.preprocess.resize.1 = parse(key, v)?,
            "crop_w" => self.preprocess.crop.0 = parse(key, v)?,
            "crop_h" => self.preprocess.crop.1 = parse(key, v)?,
            "train_crop" => self.preprocess.train_crop = parse(key, v)?,
            "hflip_prob" => self.preprocess.hflip_prob = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "edge_sigma" => self.edges.sigma = parse(key, v)?,
            "edge_high" => self.edges.high = parse(key, v)?,
            "edge_low" => self.edges.low = parse(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let w = &self.weights;
        let g = &self.generator;
        let p = &self.preprocess;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "data_a" => show_path(&self.data_a),
            "data_b" => show_path(&self.data_b),
            "skip_undecodable" => self.skip_undecodable.to_string(),
            "edge_cache" => show_path(&self.edge_cache),
            "lr0" => self.lr0.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "epochs" => self.epochs.to_string(),
            "iters_per_epoch" => self.iters_per_epoch.to_string(),
            "ssim_accs_start_iter" => self.ssim_accs_start_iter.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "sample_every" => self.sample_every.to_string(),
            "lambda_cyc" => w.lambda_cyc.to_string(),
            "lambda_ssim" => w.lambda_ssim.to_string(),
            "lambda_tv" => w.lambda_tv.to_string(),
            "lambda_att" => w.lambda_att.to_string(),
            "lambda_sga" => w.lambda_sga.to_string(),
            "alpha" => w.alpha.to_string(),
            "beta" => w.beta.to_string(),
            "ngf" => g.ngf.to_string(),
            "n_res_enc" => g.n_res_enc.to_string(),
            "n_res_dec" => g.n_res_dec.to_string(),
            "gn_groups" => g.gn_groups.to_string(),
            "ndf" => self.ndf.to_string(),
            "resize_w" => p.resize.0.to_string(),
            "resize_h" => p.resize.1.to_string(),
            "crop_w" => p.crop.0.to_string(),
            "crop_h" => p.crop.1.to_string(),
            "train_crop" => p.train_crop.to_string(),
            "hflip_prob" => p.hflip_prob.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "edge_sigma" => self.edges.sigma.to_string(),
            "edge_high" => self.edges.high.to_string(),
            "edge_low" => self.edges.low.to_string(),
            _ => return Err(Error::UnknownKey(key.to_string())),
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || !self.epochs.is_multiple_of(2) {
            return Err(Error::Config(format!("epochs must be even and positive, got {}", self.epochs)));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        if self.ndf == 0 {
            return Err(Error::Config("ndf must be positive".into()));
        }
        if self.patch_size == 0 || self.patch_size > self.preprocess.train_crop {
            return Err(Error::Config(format!(
                "patch_size {} must be in [1, train_crop = {}]",
                self.patch_size, self.preprocess.train_crop
            )));
        }
        if !self.preprocess.train_crop.is_multiple_of(crate::networks::INPUT_DIVISOR) {
            return Err(Error::Config(format!(
                "train_crop {} must be divisible by {}",
                self.preprocess.train_crop,
                crate::networks::INPUT_DIVISOR
            )));
        }
        if !(self.edges.sigma > 0.0) || !(0.0..=1.0).contains(&self.edges.low) || self.edges.low > self.edges.high {
            return Err(Error::Config("edge parameters need sigma > 0 and 0 ≤ low ≤ high".into()));
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.preprocess.validate()
    }
}
