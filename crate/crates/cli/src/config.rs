//! Layered run configuration: preset defaults, then an optional TOML file,
//! then command-line flags. Every knob of the model, the optimizer and the
//! sweep grid is reachable from the file; flags override the file.

use lpattn_core::attention::AttentionVariant;
use lpattn_core::error::{Error, Result};
use lpattn_core::model::ModelConfig;
use lpattn_core::training::TrainConfig;
use serde::Deserialize;
use std::path::Path;
use std::str::FromStr;

/// The experiment grid of the reference protocol.
pub const PAPER_P_VALUES: [f64; 7] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-scale protocol: 6 layers, 6 heads, d=384, T=256, 5000 iters.
    Paper,
    /// Desk-scale smoke: 2 layers, 2 heads, d=64, T=64, 500 iters, batch 32.
    Tiny,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected \"paper\" or \"tiny\")"
            ))),
        }
    }
}

/// Fully resolved settings for a sweep or a single run.
#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepSettings,
}

#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub p_values: Vec<f64>,
    pub variants: Vec<AttentionVariant>,
    pub k_folds: usize,
    pub parallelism: usize,
    pub base_seed: u64,
}

impl Settings {
    pub fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Paper => (
                ModelConfig::paper(AttentionVariant::Lp, 2.0, 1337).expect("paper preset"),
                TrainConfig::default(),
            ),
            Preset::Tiny => (
                ModelConfig::tiny(AttentionVariant::Lp, 2.0, 1337).expect("tiny preset"),
                TrainConfig {
                    max_iters: 500,
                    eval_interval: 100,
                    batch_size: 32,
                    warmup_iters: 100,
                    ..TrainConfig::default()
                },
            ),
        };
        Settings {
            model,
            train,
            sweep: SweepSettings {
                p_values: PAPER_P_VALUES.to_vec(),
                variants: vec![AttentionVariant::Lp],
                k_folds: 10,
                parallelism: 1,
                base_seed: 1337,
            },
        }
    }

    /// Apply a TOML config file over these settings.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ConfigFile =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply(file)
    }

    pub fn apply(&mut self, file: ConfigFile) -> Result<()> {
        if let Some(m) = file.model {
            if let Some(v) = m.n_layer {
                self.model.n_layer = v;
            }
            if let Some(v) = m.n_head {
                self.model.n_head = v;
            }
            if let Some(v) = m.d_model {
                self.model.d_model = v;
            }
            if let Some(v) = m.context_len {
                self.model.context_len = v;
            }
            if let Some(v) = m.vocab_size {
                self.model.vocab_size = v;
            }
            if let Some(v) = m.dropout {
                self.model.dropout = v;
            }
            if let Some(v) = m.seed {
                self.model.seed = v;
            }
            if let Some(v) = m.tie_lm_head {
                self.model.tie_lm_head = v;
            }
            // geometry or dropout may have moved: rebuild the attention
            // sub-config so head_dim, alpha default and dropout stay in sync
            let variant = match &m.variant {
                Some(v) => v.parse()?,
                None => self.model.attention.variant,
            };
            let p = m.p.unwrap_or(self.model.attention.p);
            self.rebuild_attention(variant, p)?;
            if let Some(v) = m.alpha_init {
                self.model.attention.alpha_init = v;
            }
            if let Some(v) = m.norm_epsilon {
                self.model.attention.norm_epsilon = v;
            }
        }
        if let Some(t) = file.train {
            if let Some(v) = t.max_iters {
                self.train.max_iters = v;
            }
            if let Some(v) = t.eval_interval {
                self.train.eval_interval = v;
            }
            if let Some(v) = t.eval_tile_stride {
                self.train.eval_tile_stride = Some(v);
            }
            if let Some(v) = t.batch_size {
                self.train.batch_size = v;
            }
            if let Some(v) = t.warmup_iters {
                self.train.warmup_iters = v;
            }
            if let Some(v) = t.lr_max {
                self.train.lr_max = v;
            }
            if let Some(v) = t.lr_min {
                self.train.lr_min = v;
            }
            if let Some(v) = t.grad_clip {
                self.train.grad_clip = v;
            }
            if let Some(v) = t.beta1 {
                self.train.beta1 = v;
            }
            if let Some(v) = t.beta2 {
                self.train.beta2 = v;
            }
            if let Some(v) = t.eps {
                self.train.eps = v;
            }
            if let Some(v) = t.weight_decay {
                self.train.weight_decay = v;
            }
            if let Some(v) = t.seed {
                self.train.seed = v;
            }
        }
        if let Some(s) = file.sweep {
            if let Some(v) = s.p_values {
                if v.is_empty() {
                    return Err(Error::Config("sweep.p_values must not be empty".into()));
                }
                self.sweep.p_values = v;
            }
            if let Some(v) = s.variants {
                if v.is_empty() {
                    return Err(Error::Config("sweep.variants must not be empty".into()));
                }
                self.sweep.variants = v
                    .iter()
                    .map(|name| name.parse())
                    .collect::<Result<Vec<_>>>()?;
            }
            if let Some(v) = s.k_folds {
                self.sweep.k_folds = v;
            }
            if let Some(v) = s.parallelism {
                self.sweep.parallelism = v;
            }
            if let Some(v) = s.base_seed {
                self.sweep.base_seed = v;
            }
        }
        Ok(())
    }

    fn rebuild_attention(&mut self, variant: AttentionVariant, p: f64) -> Result<()> {
        use lpattn_core::attention::AttentionConfig;
        if self.model.n_head == 0 || !self.model.d_model.is_multiple_of(self.model.n_head) {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_head ({})",
                self.model.d_model, self.model.n_head
            )));
        }
        let head_dim = self.model.d_model / self.model.n_head;
        self.model.attention = match variant {
            AttentionVariant::Standard => {
                AttentionConfig::standard(self.model.n_head, head_dim, self.model.dropout)?
            }
            AttentionVariant::QkNorm => {
                AttentionConfig::qknorm(self.model.n_head, head_dim, self.model.dropout)?
            }
            AttentionVariant::Lp => {
                AttentionConfig::lp(p, self.model.n_head, head_dim, self.model.dropout)?
            }
        };
        Ok(())
    }

    /// Flag-level variant override (keeps the configured p).
    pub fn set_variant(&mut self, variant: AttentionVariant) -> Result<()> {
        let p = self.model.attention.p;
        self.rebuild_attention(variant, p)
    }

    /// Flag-level p override (keeps the configured variant).
    pub fn set_p(&mut self, p: f64) -> Result<()> {
        if !p.is_finite() || p < 1.0 {
            return Err(Error::Config(format!(
                "p must be a finite real >= 1, got {p}"
            )));
        }
        self.model.attention.p = p;
        Ok(())
    }

    /// Final validation once all layers are applied.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.sweep.k_folds == 0 {
            return Err(Error::Config("k_folds must be positive".into()));
        }
        if self.sweep.parallelism == 0 {
            return Err(Error::Config("parallelism must be positive".into()));
        }
        for &p in &self.sweep.p_values {
            if !p.is_finite() || p < 1.0 {
                return Err(Error::Config(format!(
                    "sweep p values must be finite reals >= 1, got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Raw, everything-optional mirror of the three config sections.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<ModelSection>,
    pub train: Option<TrainSection>,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layer: Option<usize>,
    pub n_head: Option<usize>,
    pub d_model: Option<usize>,
    pub context_len: Option<usize>,
    pub vocab_size: Option<usize>,
    pub dropout: Option<f64>,
    pub variant: Option<String>,
    pub p: Option<f64>,
    pub alpha_init: Option<f64>,
    pub norm_epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub tie_lm_head: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub max_iters: Option<usize>,
    pub eval_interval: Option<usize>,
    pub eval_tile_stride: Option<usize>,
    pub batch_size: Option<usize>,
    pub warmup_iters: Option<usize>,
    pub lr_max: Option<f64>,
    pub lr_min: Option<f64>,
    pub grad_clip: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub p_values: Option<Vec<f64>>,
    pub variants: Option<Vec<String>>,
    pub k_folds: Option<usize>,
    pub parallelism: Option<usize>,
    pub base_seed: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Settings::preset(Preset::Paper).validate().unwrap();
        Settings::preset(Preset::Tiny).validate().unwrap();
    }

    #[test]
    fn tiny_preset_matches_the_smoke_protocol() {
        let s = Settings::preset(Preset::Tiny);
        assert_eq!(s.model.n_layer, 2);
        assert_eq!(s.model.n_head, 2);
        assert_eq!(s.model.d_model, 64);
        assert_eq!(s.model.context_len, 64);
        assert_eq!(s.train.batch_size, 32);
        assert_eq!(s.train.max_iters, 500);
    }

    #[test]
    fn paper_preset_grid_is_70_runs() {
        let s = Settings::preset(Preset::Paper);
        assert_eq!(s.sweep.p_values.len() * s.sweep.k_folds, 70);
        assert_eq!(s.model.n_layer, 6);
        assert_eq!(s.train.max_iters, 5000);
    }

    #[test]
    fn file_overrides_preset_and_flags_override_file() {
        let mut s = Settings::preset(Preset::Tiny);
        let file: ConfigFile = toml::from_str(
            r#"
            [model]
            n_layer = 3
            p = 2.5
            variant = "lp"

            [train]
            max_iters = 42
            lr_max = 0.005

            [sweep]
            p_values = [2.0, 4.0]
            k_folds = 3
            "#,
        )
        .unwrap();
        s.apply(file).unwrap();
        assert_eq!(s.model.n_layer, 3);
        assert_eq!(s.model.attention.p, 2.5);
        assert_eq!(s.train.max_iters, 42);
        assert_eq!(s.train.lr_max, 0.005);
        assert_eq!(s.sweep.p_values, vec![2.0, 4.0]);
        assert_eq!(s.sweep.k_folds, 3);
        // flag layer
        s.set_p(3.5).unwrap();
        assert_eq!(s.model.attention.p, 3.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let parsed: std::result::Result<ConfigFile, _> = toml::from_str("[model]\nnlayers = 4\n");
        assert!(parsed.is_err(), "typo'd key must not be silently ignored");
    }

    #[test]
    fn bad_variant_and_bad_p_are_config_errors() {
        let mut s = Settings::preset(Preset::Tiny);
        assert!(s.set_p(0.5).is_err());
        let file: ConfigFile = toml::from_str("[model]\nvariant = \"l3\"\n").unwrap();
        assert!(matches!(s.apply(file), Err(Error::Config(_))));
    }
}
