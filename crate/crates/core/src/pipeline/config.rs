//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::discovery::LossWeights;
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::reparam::MergeMode;

/// Backbone geometry: a stack of same-padded CONV+BN blocks, each followed by
/// ReLU, then global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub padding: usize,
}

impl Architecture {
    pub fn specs(&self) -> Result<Vec<ConvSpec>> {
        let mut specs = Vec::with_capacity(self.channels.len());
        let mut c_in = self.input_channels;
        for &c_out in &self.channels {
            specs.push(ConvSpec::new(c_in, c_out, self.kernel_size, 1, self.padding)?);
            c_in = c_out;
        }
        Ok(specs)
    }

    pub fn input_dim(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }

    pub fn feature_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(self.input_channels)
    }

    pub fn input_shape(&self, n: usize) -> [usize; 4] {
        [n, self.input_channels, self.input_height, self.input_width]
    }

    /// Stable 64-bit digest of the geometry; checkpoints carry it.
    pub fn hash(&self) -> u64 {
        let canonical = format!(
            "input={}x{}x{};channels={};kernel={};padding={};stride=1",
            self.input_channels,
            self.input_height,
            self.input_width,
            join(&self.channels),
            self.kernel_size,
            self.padding
        );
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("input extents must be positive".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must list at least one positive width".into()));
        }
        if 2 * self.padding + 1 != self.kernel_size {
            return Err(Error::Config(format!(
                "padding {} does not preserve spatial size for kernel {}",
                self.padding, self.kernel_size
            )));
        }
        self.specs().map(|_| ())
    }
}

/// Everything an experiment run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arch: Architecture,
    pub base_classes: usize,
    /// Class count of each unlabeled task, in order.
    pub novel_classes: Vec<usize>,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub separation: f64,
    pub cluster_std: f64,
    pub view_noise: f64,
    pub view_mask: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub bn_momentum: f64,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub novel_lr: f64,
    pub novel_epochs: usize,
    pub head_init_std: f64,
    pub projection_dim: usize,
    pub replay_per_class: usize,
    pub losses: LossWeights<f32>,
    pub merge_mode: MergeMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: Architecture {
                input_channels: 8,
                input_height: 1,
                input_width: 1,
                channels: vec![8, 16, 32],
                kernel_size: 3,
                padding: 1,
            },
            base_classes: 5,
            novel_classes: vec![5],
            samples_per_class: 200,
            test_samples_per_class: 100,
            separation: 6.0,
            cluster_std: 1.0,
            view_noise: 0.1,
            view_mask: 0.2,
            batch_size: 100,
            momentum: 0.9,
            bn_momentum: 0.1,
            pretrain_lr: 0.1,
            pretrain_epochs: 30,
            novel_lr: 0.1,
            novel_epochs: 100,
            head_init_std: 0.01,
            projection_dim: 128,
            replay_per_class: 10,
            losses: LossWeights {
                kd: 0.5,
                ..LossWeights::default()
            },
            merge_mode: MergeMode::Amm,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|p| parse_value(key, p.trim())).collect()
}

/// Keys accepted by [`ExperimentConfig::parse`], in rendering order.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "input_channels",
    "input_height",
    "input_width",
    "channels",
    "kernel_size",
    "padding",
    "base_classes",
    "novel_classes",
    "samples_per_class",
    "test_samples_per_class",
    "separation",
    "cluster_std",
    "view_noise",
    "view_mask",
    "batch_size",
    "momentum",
    "bn_momentum",
    "pretrain_lr",
    "pretrain_epochs",
    "novel_lr",
    "novel_epochs",
    "head_init_std",
    "projection_dim",
    "replay_per_class",
    "temperature",
    "rampup_length",
    "margin",
    "hinge",
    "weight_kd",
    "weight_contrastive",
    "weight_replay",
    "weight_triplet",
    "weight_prob_reg",
    "weight_self_train",
    "merge_mode",
];

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", lineno + 1)));
            }
            seen.push(key);
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.losses;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "input_channels" => self.arch.input_channels = parse_value(key, v)?,
            "input_height" => self.arch.input_height = parse_value(key, v)?,
            "input_width" => self.arch.input_width = parse_value(key, v)?,
            "channels" => self.arch.channels = parse_list(key, v)?,
            "kernel_size" => self.arch.kernel_size = parse_value(key, v)?,
            "padding" => self.arch.padding = parse_value(key, v)?,
            "base_classes" => self.base_classes = parse_value(key, v)?,
            "novel_classes" => {
                self.novel_classes = if v.is_empty() { Vec::new() } else { parse_list(key, v)? }
            }
            "samples_per_class" => self.samples_per_class = parse_value(key, v)?,
            "test_samples_per_class" => self.test_samples_per_class = parse_value(key, v)?,
            "separation" => self.separation = parse_value(key, v)?,
            "cluster_std" => self.cluster_std = parse_value(key, v)?,
            "view_noise" => self.view_noise = parse_value(key, v)?,
            "view_mask" => self.view_mask = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "bn_momentum" => self.bn_momentum = parse_value(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse_value(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, v)?,
            "novel_lr" => self.novel_lr = parse_value(key, v)?,
            "novel_epochs" => self.novel_epochs = parse_value(key, v)?,
            "head_init_std" => self.head_init_std = parse_value(key, v)?,
            "projection_dim" => self.projection_dim = parse_value(key, v)?,
            "replay_per_class" => self.replay_per_class = parse_value(key, v)?,
            "temperature" => w.temperature = parse_value(key, v)?,
            "rampup_length" => w.rampup_length = parse_value(key, v)?,
            "margin" => w.margin = parse_value(key, v)?,
            "hinge" => w.hinge = parse_value(key, v)?,
            "weight_kd" => w.kd = parse_value(key, v)?,
            "weight_contrastive" => w.contrastive = parse_value(key, v)?,
            "weight_replay" => w.replay = parse_value(key, v)?,
            "weight_triplet" => w.triplet = parse_value(key, v)?,
            "weight_prob_reg" => w.prob_reg = parse_value(key, v)?,
            "weight_self_train" => w.self_train = parse_value(key, v)?,
            "merge_mode" => self.merge_mode = v.parse().map_err(|e: Error| Error::Config(strip_prefix(e)))?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.losses.validate()?;
        let positive = [
            ("base_classes", self.base_classes),
            ("samples_per_class", self.samples_per_class),
            ("test_samples_per_class", self.test_samples_per_class),
            ("batch_size", self.batch_size),
            ("projection_dim", self.projection_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config("`samples_per_class` must be at least 2".into()));
        }
        if self.novel_classes.contains(&0) {
            return Err(Error::Config("every novel task needs at least one class".into()));
        }
        if self.merge_mode == MergeMode::Aff && self.novel_classes.len() > 1 {
            return Err(Error::Config(
                "merge_mode = aff supports a single novel task: its branches cannot be merged, \
                 so a second task would have nothing to expand"
                    .into(),
            ));
        }
        if !(self.separation > 0.0) || !(self.cluster_std >= 0.0) {
            return Err(Error::Config("`separation` must be positive and `cluster_std` non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.view_mask) || !(self.view_noise >= 0.0) {
            return Err(Error::Config("`view_mask` must lie in [0, 1) and `view_noise` be non-negative".into()));
        }
        for (name, v) in [("momentum", self.momentum), ("bn_momentum", self.bn_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("`{name}` must lie in [0, 1]")));
            }
        }
        for (name, v) in [("pretrain_lr", self.pretrain_lr), ("novel_lr", self.novel_lr), ("head_init_std", self.head_init_std)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("`{name}` must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Renders the full configuration in the accepted file format.
    pub fn render(&self) -> String {
        let w = &self.losses;
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.arch.input_channels.to_string(),
            self.arch.input_height.to_string(),
            self.arch.input_width.to_string(),
            join(&self.arch.channels),
            self.arch.kernel_size.to_string(),
            self.arch.padding.to_string(),
            self.base_classes.to_string(),
            join(&self.novel_classes),
            self.samples_per_class.to_string(),
            self.test_samples_per_class.to_string(),
            self.separation.to_string(),
            self.cluster_std.to_string(),
            self.view_noise.to_string(),
            self.view_mask.to_string(),
            self.batch_size.to_string(),
            self.momentum.to_string(),
            self.bn_momentum.to_string(),
            self.pretrain_lr.to_string(),
            self.pretrain_epochs.to_string(),
            self.novel_lr.to_string(),
            self.novel_epochs.to_string(),
            self.head_init_std.to_string(),
            self.projection_dim.to_string(),
            self.replay_per_class.to_string(),
            w.temperature.to_string(),
            w.rampup_length.to_string(),
            w.margin.to_string(),
            w.hinge.to_string(),
            w.kd.to_string(),
            w.contrastive.to_string(),
            w.replay.to_string(),
            w.triplet.to_string(),
            w.prob_reg.to_string(),
            w.self_train.to_string(),
            self.merge_mode.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
