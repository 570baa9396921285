use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::diffcore::AdamConfig;
use crate::discriminators::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::objective::{LossStyle, ObjectiveConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub objective: ObjectiveConfig,
    pub checkpoint_every: u64,
    /// Discriminator updates per generator update.
    pub d_steps_per_g: usize,
    pub g_base_channels: usize,
    pub g_down_stages: usize,
    pub g_body_blocks: usize,
    pub d_base_channels: usize,
    pub d_stack_layers: usize,
    pub batch_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let d = DiscriminatorConfig::default();
        Self {
            seed: 0,
            image_size: 32,
            batch_size: 8,
            epochs: 30,
            adam: AdamConfig::default(),
            objective: ObjectiveConfig::default(),
            checkpoint_every: 1000,
            d_steps_per_g: 1,
            g_base_channels: g.base_channels,
            g_down_stages: g.num_down_stages,
            g_body_blocks: g.num_body_blocks,
            d_base_channels: d.base_channels,
            d_stack_layers: d.num_stack_layers,
            batch_norm: true,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in echo order.
pub const TRAIN_KEYS: &[&str] = &[
    "seed",
    "image_size",
    "batch_size",
    "epochs",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "lambda",
    "loss_style",
    "g_uses_both_terms",
    "checkpoint_every",
    "d_steps_per_g",
    "g_base_channels",
    "g_down_stages",
    "g_body_blocks",
    "d_base_channels",
    "d_stack_layers",
    "batch_norm",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key `{key}`")))
}

impl TrainConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            base_channels: self.g_base_channels,
            num_down_stages: self.g_down_stages,
            num_body_blocks: self.g_body_blocks,
            batch_norm: self.batch_norm,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_size: self.image_size,
            base_channels: self.d_base_channels,
            num_stack_layers: self.d_stack_layers,
            batch_norm: self.batch_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.adam.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.adam.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if self.d_steps_per_g < 1 {
            return bad("d_steps_per_g must be at least 1".into());
        }
        if !(self.objective.lambda >= 0.0) || !self.objective.lambda.is_finite() {
            return bad(format!("lambda must be a nonnegative real, got {}", self.objective.lambda));
        }
        self.generator().validate()?;
        self.discriminator().validate()
    }

    /// Sets one key from its text form. Unknown keys are config errors
    /// naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "lambda" => self.objective.lambda = parse(key, value)?,
            "loss_style" => self.objective.style = value.trim().parse::<LossStyle>()?,
            "g_uses_both_terms" => self.objective.g_uses_both_terms = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "d_steps_per_g" => self.d_steps_per_g = parse(key, value)?,
            "g_base_channels" => self.g_base_channels = parse(key, value)?,
            "g_down_stages" => self.g_down_stages = parse(key, value)?,
            "g_body_blocks" => self.g_body_blocks = parse(key, value)?,
            "d_base_channels" => self.d_base_channels = parse(key, value)?,
            "d_stack_layers" => self.d_stack_layers = parse(key, value)?,
            "batch_norm" => self.batch_norm = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Effective values of every key, in [`TRAIN_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        let values = [
            s(self.seed),
            s(self.image_size),
            s(self.batch_size),
            s(self.epochs),
            s(self.adam.lr),
            s(self.adam.beta1),
            s(self.adam.beta2),
            s(self.adam.eps),
            s(self.objective.lambda),
            s(self.objective.style),
            s(self.objective.g_uses_both_terms),
            s(self.checkpoint_every),
            s(self.d_steps_per_g),
            s(self.g_base_channels),
            s(self.g_down_stages),
            s(self.g_body_blocks),
            s(self.d_base_channels),
            s(self.d_stack_layers),
            s(self.batch_norm),
        ];
        TRAIN_KEYS.iter().copied().zip(values).collect()
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Defaults overlaid with `pairs`.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// Parses flat `key = value` text. Blank lines and lines starting with `#`
/// are skipped; a repeated key is an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}
