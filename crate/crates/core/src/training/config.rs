use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::{StructureMode, DEFAULT_GAMMA_FINE, DEFAULT_GAMMA_PRE, DEFAULT_NEGATIVES};
use crate::syntax::{Opening, DEFAULT_ALPHA_INIT};
use crate::treebank::GoldDistanceMode;

/// What to do with a sentence that lacks a gold tree in supervised mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingTreePolicy {
    /// Drop the sentence from training and count it.
    #[default]
    Skip,
    Abort,
}

impl FromStr for MissingTreePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(MissingTreePolicy::Skip),
            "abort" => Ok(MissingTreePolicy::Abort),
            other => Err(Error::Config(format!("unknown missing-tree policy `{other}` (expected skip or abort)"))),
        }
    }
}

impl std::fmt::Display for MissingTreePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MissingTreePolicy::Skip => "skip",
            MissingTreePolicy::Abort => "abort",
        })
    }
}

/// Learning rates considered for tuning.
pub const LR_GRID: [f64; 4] = [8e-6, 1e-5, 2e-5, 3e-5];
pub const BATCH_SIZE_GRID: [usize; 3] = [16, 24, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gamma_pre: f64,
    pub gamma_fine: f64,
    pub lambda_unsup: f64,
    pub lambda_sup: f64,
    pub mode: StructureMode,
    pub negatives: usize,
    pub gold_mode: GoldDistanceMode,
    pub missing_tree: MissingTreePolicy,
    pub opening: Opening,
    pub mask_rate: f64,
    pub min_freq: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// `None` selects `n_layers / 2`.
    pub structure_layer: Option<usize>,
    pub dropout: f64,
    pub alpha_init: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 5,
            seed: 0,
            gamma_pre: DEFAULT_GAMMA_PRE,
            gamma_fine: DEFAULT_GAMMA_FINE,
            lambda_unsup: 0.5,
            lambda_sup: 0.7,
            mode: StructureMode::Unsupervised,
            negatives: DEFAULT_NEGATIVES,
            gold_mode: GoldDistanceMode::DepDepth,
            missing_tree: MissingTreePolicy::Skip,
            opening: Opening::Single,
            mask_rate: 0.15,
            min_freq: 1,
            n_layers: 6,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_len: 64,
            structure_layer: None,
            dropout: 0.0,
            alpha_init: DEFAULT_ALPHA_INIT,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "gamma_pre",
    "gamma_fine",
    "lambda_unsup",
    "lambda_sup",
    "mode",
    "negatives",
    "gold_mode",
    "missing_tree",
    "opening",
    "mask_rate",
    "min_freq",
    "n_layers",
    "n_heads",
    "d_model",
    "d_ff",
    "max_len",
    "structure_layer",
    "dropout",
    "alpha_init",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_alphas(value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse::<f64>("alpha_init", p.trim()))
        .collect::<Result<_>>()?;
    <[f64; 3]>::try_from(parts)
        .map_err(|p| Error::Config(format!("alpha_init needs 3 comma-separated values, got {}", p.len())))
}

impl TrainConfig {
    pub fn structure_layer(&self) -> usize {
        self.structure_layer.unwrap_or(self.n_layers / 2)
    }

    /// Threshold used for segmentation in the configured mode.
    pub fn lambda(&self) -> f64 {
        match self.mode {
            StructureMode::Unsupervised => self.lambda_unsup,
            StructureMode::Supervised => self.lambda_sup,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
            structure_layer: self.structure_layer(),
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.negatives == 0 || self.min_freq == 0 {
            return fail("batch_size, epochs, negatives and min_freq must be positive".into());
        }
        for (name, g) in [("gamma_pre", self.gamma_pre), ("gamma_fine", self.gamma_fine)] {
            if !(g >= 0.0 && g.is_finite()) {
                return fail(format!("{name} must be non-negative, got {g}"));
            }
        }
        for (name, l) in [("lambda_unsup", self.lambda_unsup), ("lambda_sup", self.lambda_sup)] {
            if !(0.0..=1.0).contains(&l) {
                return fail(format!("{name} must lie in [0, 1], got {l}"));
            }
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return fail(format!("mask_rate must lie in (0, 1), got {}", self.mask_rate));
        }
        if self.alpha_init.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return fail(format!("alpha_init values must be positive, got {:?}", self.alpha_init));
        }
        self.encoder_config(crate::data::RESERVED.len() + 1).validate()
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "gamma_pre" => self.gamma_pre = parse(key, v)?,
            "gamma_fine" => self.gamma_fine = parse(key, v)?,
            "lambda_unsup" => self.lambda_unsup = parse(key, v)?,
            "lambda_sup" => self.lambda_sup = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "negatives" => self.negatives = parse(key, v)?,
            "gold_mode" => self.gold_mode = v.parse()?,
            "missing_tree" => self.missing_tree = v.parse()?,
            "opening" => self.opening = v.parse()?,
            "mask_rate" => self.mask_rate = parse(key, v)?,
            "min_freq" => self.min_freq = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "structure_layer" => self.structure_layer = Some(parse(key, v)?),
            "dropout" => self.dropout = parse(key, v)?,
            "alpha_init" => self.alpha_init = parse_alphas(v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Serializes every field as `key = value` lines accepted by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("lr", self.lr.to_string());
        line("weight_decay", self.weight_decay.to_string());
        line("batch_size", self.batch_size.to_string());
        line("epochs", self.epochs.to_string());
        line("seed", self.seed.to_string());
        line("gamma_pre", self.gamma_pre.to_string());
        line("gamma_fine", self.gamma_fine.to_string());
        line("lambda_unsup", self.lambda_unsup.to_string());
        line("lambda_sup", self.lambda_sup.to_string());
        line("mode", self.mode.to_string());
        line("negatives", self.negatives.to_string());
        line("gold_mode", self.gold_mode.to_string());
        line("missing_tree", self.missing_tree.to_string());
        line("opening", self.opening.to_string());
        line("mask_rate", self.mask_rate.to_string());
        line("min_freq", self.min_freq.to_string());
        line("n_layers", self.n_layers.to_string());
        line("n_heads", self.n_heads.to_string());
        line("d_model", self.d_model.to_string());
        line("d_ff", self.d_ff.to_string());
        line("max_len", self.max_len.to_string());
        if let Some(l) = self.structure_layer {
            line("structure_layer", l.to_string());
        }
        line("dropout", self.dropout.to_string());
        line(
            "alpha_init",
            self.alpha_init.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.structure_layer(), 3);
        assert_eq!(c.lambda(), 0.5);
        assert!(LR_GRID.contains(&c.lr));
        assert!(BATCH_SIZE_GRID.contains(&c.batch_size));
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.mode = StructureMode::Supervised;
        c.structure_layer = Some(2);
        c.alpha_init = [0.2, 0.3, 0.5];
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn file_syntax() {
        let c = TrainConfig::from_text("# comment\nlr = 1e-5  # inline\n\n n_layers=4\nmode = supervised\n").unwrap();
        assert_eq!(c.lr, 1e-5);
        assert_eq!(c.n_layers, 4);
        assert_eq!(c.lambda(), 0.7);
        assert!(matches!(TrainConfig::from_text("colour = red"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_text("lr 3"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_text("lr = fast"), Err(Error::Config(_))));
    }

    #[test]
    fn every_key_is_settable() {
        let c = TrainConfig::default();
        let text = c.to_text();
        for key in CONFIG_KEYS.iter().filter(|k| **k != "structure_layer") {
            assert!(text.contains(&format!("{key} = ")), "{key}");
        }
        let mut c = c;
        c.set("structure_layer", "2").unwrap();
        assert_eq!(c.structure_layer(), 2);
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.n_layers = 2;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lambda_sup = 1.5;
        assert!(c.validate().is_err());
    }
}
