//! Flat `key = value` experiment configuration.
//!
//! Every tunable the experiments depend on lives here with its default, a run
//! serializes its fully resolved config next to its outputs, and unknown keys
//! are rejected so stale files fail loudly instead of silently drifting.

use crate::error::{Error, Result};
use crate::meta::{AdaptConfig, MetaConfig, Optimizer};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Token channel width of the whole model.
    pub d_model: usize,
    /// Attention heads (must divide d_model).
    pub heads: usize,
    /// Attention window size.
    pub window_size: usize,
    /// Cyclic shift of the second/windowed attention passes.
    pub shift_size: usize,
    /// Maximum stacked transformer layers during training (T).
    pub max_layers: usize,
    /// Inner updates per task (k); 1 is the zero-shot regime.
    pub inner_steps: usize,
    /// Inner learning rate (delta).
    pub inner_lr: f64,
    /// Outer blend rate (eta).
    pub outer_lr: f64,
    /// Style loss weight (lambda).
    pub style_weight: f64,
    pub batch_size: usize,
    /// Square side of training images; multiple of 8, at least 16.
    pub image_size: usize,
    /// Run seed: parameters, data, and sampling all derive from it.
    pub seed: u64,
    /// Seed of the frozen loss network.
    pub loss_net_seed: u64,
    /// Fast-adaptation steps.
    pub adapt_steps: usize,
    /// Fast-adaptation learning rate.
    pub adapt_lr: f64,
    /// Stacked layers used for adaptation-time and inference forwards.
    pub infer_layers: usize,
    /// Outer meta-training iterations.
    pub outer_iters: usize,
    /// Synthetic dataset sizes.
    pub content_count: usize,
    pub style_count: usize,
    /// Inner-loop optimizer: "sgd" (exact reductions) or "adam".
    pub optimizer: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            d_model: 32,
            heads: 4,
            window_size: 4,
            shift_size: 2,
            max_layers: 4,
            inner_steps: 2,
            inner_lr: 1e-4,
            outer_lr: 1e-4,
            style_weight: 10.0,
            batch_size: 4,
            image_size: 64,
            seed: 0,
            loss_net_seed: 7,
            adapt_steps: 100,
            adapt_lr: 1e-4,
            infer_layers: 1,
            outer_iters: 300,
            content_count: 8,
            style_count: 4,
            optimizer: "sgd".to_string(),
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $f:ident) => {
        $f!(d_model);
        $f!(heads);
        $f!(window_size);
        $f!(shift_size);
        $f!(max_layers);
        $f!(inner_steps);
        $f!(inner_lr);
        $f!(outer_lr);
        $f!(style_weight);
        $f!(batch_size);
        $f!(image_size);
        $f!(seed);
        $f!(loss_net_seed);
        $f!(adapt_steps);
        $f!(adapt_lr);
        $f!(infer_layers);
        $f!(outer_iters);
        $f!(content_count);
        $f!(style_count);
        $f!(optimizer);
    };
}

impl ExperimentConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unknown keys and
    /// malformed values are errors, then the result is validated.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: "config",
                detail: format!("line {}: expected key = value, got {raw:?}", lineno + 1),
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| Error::Parse {
                what: "config",
                detail: format!("line {}: {e}", lineno + 1),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        macro_rules! try_set {
            ($field:ident) => {
                if key == stringify!($field) {
                    self.$field = value
                        .parse()
                        .map_err(|e| format!("bad value for {key}: {e}"))?;
                    return Ok(());
                }
            };
        }
        config_keys!(self, try_set);
        Err(format!("unknown key {key:?}"))
    }

    /// Apply the `MASTER_SEED` environment override, if set.
    pub fn apply_env_override(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("MASTER_SEED") {
            self.seed = v.parse().map_err(|e| Error::Parse {
                what: "config",
                detail: format!("MASTER_SEED: {e}"),
            })?;
        }
        Ok(())
    }

    /// Serialize every resolved key, one per line, in declaration order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($field:ident) => {
                writeln!(out, "{} = {}", stringify!($field), self.$field).expect("string write");
            };
        }
        config_keys!(self, emit);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(format!("config: {msg}")));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must divide into heads {}",
                self.d_model, self.heads
            ));
        }
        if self.window_size == 0 || self.shift_size >= self.window_size {
            return fail(format!(
                "shift_size {} must be smaller than window_size {}",
                self.shift_size, self.window_size
            ));
        }
        if !self.image_size.is_multiple_of(8) || self.image_size < 16 {
            return fail(format!(
                "image_size {} must be a multiple of 8 and at least 16",
                self.image_size
            ));
        }
        if self.inner_lr <= 0.0 || self.outer_lr <= 0.0 || self.adapt_lr <= 0.0 {
            return fail("learning rates must be positive".to_string());
        }
        if self.inner_steps == 0 || self.max_layers == 0 {
            return fail("inner_steps and max_layers must be at least 1".to_string());
        }
        if self.batch_size == 0 || self.content_count == 0 || self.style_count == 0 {
            return fail("batch_size and dataset counts must be at least 1".to_string());
        }
        if self.style_weight < 0.0 {
            return fail("style_weight must be nonnegative".to_string());
        }
        if self.optimizer != "sgd" && self.optimizer != "adam" {
            return fail(format!("optimizer {:?} (sgd|adam)", self.optimizer));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            window: self.window_size,
            shift: self.shift_size,
        }
    }

    pub fn meta(&self) -> MetaConfig {
        MetaConfig {
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            inner_steps: self.inner_steps,
            max_layers: self.max_layers,
            outer_iters: self.outer_iters,
            batch_size: self.batch_size,
            optimizer: self.optimizer_kind(),
        }
    }

    pub fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            steps: self.adapt_steps,
            lr: self.adapt_lr,
            layers: self.infer_layers,
            batch_size: self.batch_size,
            optimizer: self.optimizer_kind(),
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.style_weight)
    }

    fn optimizer_kind(&self) -> Optimizer {
        match self.optimizer.as_str() {
            "adam" => Optimizer::adam(),
            _ => Optimizer::Sgd,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_override_with_comments() {
        let cfg = ExperimentConfig::parse(
            "# toy run\nimage_size = 32\nseed = 9  # inline comment\n\nd_model=16\n",
        )
        .unwrap();
        assert_eq!(cfg.image_size, 32);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.d_model, 16);
        assert_eq!(cfg.heads, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn invalid_combinations_rejected() {
        assert!(ExperimentConfig::parse("d_model = 30").is_err());
        assert!(ExperimentConfig::parse("image_size = 20").is_err());
        assert!(ExperimentConfig::parse("shift_size = 4").is_err());
        assert!(ExperimentConfig::parse("optimizer = rmsprop").is_err());
    }
}
