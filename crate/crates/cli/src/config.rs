//! Flat run configuration: defaults, then the JSON file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use icst_core::model::{ModelConfig, Variant};
use icst_core::stcl::Expansion;
use icst_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Every key is optional; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatConfig {
    pub slot_minutes: Option<u32>,
    pub start: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda_l2: Option<f64>,
    pub seed: Option<u64>,
    pub keep_best: Option<bool>,
    pub train_stride: Option<usize>,
    pub eval_stride: Option<usize>,
    pub variant: Option<String>,
    pub horizon: Option<usize>,
    pub recent: Option<usize>,
    pub daily: Option<usize>,
    pub weekly: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub spatial_layers: Option<usize>,
    pub temporal_layers: Option<usize>,
    pub tcl_blocks: Option<usize>,
    pub gamma_terminal: Option<f64>,
    pub nf_layers: Option<usize>,
    pub share_weights: Option<bool>,
    pub expansion: Option<Expansion>,
    pub max_pairs: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub margin: Option<f64>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl FlatConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("config {} does not match the schema", path.display()))
    }

    /// Values set in `other` replace ours.
    pub fn overlay(&mut self, other: &FlatConfig) {
        overlay!(self, other; slot_minutes, start, epochs, batch_size, lr, lambda_l2, seed, keep_best,
            train_stride, eval_stride, variant, horizon, recent, daily, weekly, heads, head_dim,
            spatial_layers, temporal_layers, tcl_blocks, gamma_terminal, nf_layers, share_weights,
            expansion, max_pairs, embedding_dim, margin);
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        macro_rules! set {
            ($dst:expr, $v:expr) => {
                if let Some(v) = $v.clone() {
                    $dst = v;
                }
            };
        }
        set!(train.epochs, self.epochs);
        set!(train.batch_size, self.batch_size);
        set!(train.lr, self.lr);
        set!(train.lambda_l2, self.lambda_l2);
        set!(train.seed, self.seed);
        set!(train.keep_best, self.keep_best);
        set!(train.train_stride, self.train_stride);
        set!(train.eval_stride, self.eval_stride);
        if let Some(v) = &self.variant {
            model.variant = Variant::parse(v)?;
        }
        set!(model.horizon, self.horizon);
        set!(model.recent, self.recent);
        set!(model.daily, self.daily);
        set!(model.weekly, self.weekly);
        set!(model.attention.heads, self.heads);
        set!(model.attention.head_dim, self.head_dim);
        set!(model.attention.spatial_layers, self.spatial_layers);
        set!(model.attention.temporal_layers, self.temporal_layers);
        set!(model.stcl.blocks, self.tcl_blocks);
        set!(model.stcl.gamma_terminal, self.gamma_terminal);
        set!(model.stcl.nf_layers, self.nf_layers);
        set!(model.stcl.share_weights, self.share_weights);
        set!(model.stcl.expansion, self.expansion);
        set!(model.embedding.dim, self.embedding_dim);
        model.max_pairs = self.max_pairs.or(model.max_pairs);
        model.validate()?;
        train.validate()?;
        let margin = self.margin.unwrap_or(0.05);
        if !(0.0..1.0).contains(&margin) {
            bail!("margin must lie in [0, 1), got {margin}");
        }
        let start = match &self.start {
            Some(s) => icst_core::dataio::parse_start(s)?,
            None => icst_core::dataio::default_start(),
        };
        Ok(Resolved {
            model,
            train,
            slot_minutes: self.slot_minutes.unwrap_or(5),
            start,
            margin,
        })
    }
}

/// Fully resolved settings.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub slot_minutes: u32,
    pub start: icst_core::dataio::NaiveDateTime,
    pub margin: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_over_file_over_default() {
        let mut base = FlatConfig::default();
        let file: FlatConfig = serde_json::from_str(r#"{"epochs": 7, "lr": 0.01, "variant": "+TA"}"#).unwrap();
        let flags = FlatConfig {
            epochs: Some(3),
            ..FlatConfig::default()
        };
        base.overlay(&file);
        base.overlay(&flags);
        let r = base.resolve().unwrap();
        assert_eq!(r.train.epochs, 3);
        assert_eq!(r.train.lr, 0.01);
        assert_eq!(r.train.batch_size, 128);
        assert_eq!(r.model.variant, Variant::Ta);
    }

    #[test]
    fn schema_violations_name_the_field() {
        let e = serde_json::from_str::<FlatConfig>(r#"{"epoch": 7}"#).unwrap_err().to_string();
        assert!(e.contains("epoch"), "{e}");
        let e = serde_json::from_str::<FlatConfig>(r#"{"epochs": "x"}"#).unwrap_err().to_string();
        assert!(e.contains("invalid type"), "{e}");
        let bad = FlatConfig {
            variant: Some("+XX".into()),
            ..FlatConfig::default()
        };
        assert!(bad.resolve().is_err());
    }
}
