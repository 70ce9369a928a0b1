//! Run configuration: a flat `key = value` file plus command-line
//! overrides, validated in full before any command touches the disk.

use std::path::{Path, PathBuf};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::features::{DataSchema, FeatureSchema};
use crate::model::{Ablation, ModelConfig};
use crate::train::TrainConfig;

pub const KEYS: &[&str] = &[
    "seed",
    "data_dir",
    "out_dir",
    "cards",
    "lens",
    "vocabs",
    "tasks",
    "d",
    "cat_proxies",
    "shared_task_tokens",
    "blocks",
    "attn_heads",
    "d_k",
    "mode",
    "batch_size",
    "learning_rate",
    "optimizer",
    "l2_weight",
    "dropout",
    "patience",
    "max_epochs",
    "grad_clip",
    "task_weights",
    "noise_rate",
    "train_examples",
    "val_examples",
    "test_examples",
    "users",
    "cat_subset_frac",
    "item_subset_frac",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub schema: FeatureSchema,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataSchema {
            cards: vec![10, 10, 10, 20],
            lens: vec![6, 6],
            vocabs: vec![30, 30],
            tasks: 3,
        };
        RunConfig {
            seed: 42,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            schema: FeatureSchema::new(data.clone(), 16),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SyntheticSpec::new(data),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "cards" => self.schema.data.cards = parse_list(key, v)?,
            "lens" => self.schema.data.lens = parse_list(key, v)?,
            "vocabs" => self.schema.data.vocabs = parse_list(key, v)?,
            "tasks" => self.schema.data.tasks = parse(key, v)?,
            "d" => self.schema.d = parse(key, v)?,
            "cat_proxies" => self.schema.cat_proxies = parse(key, v)?,
            "shared_task_tokens" => self.schema.shared_task_tokens = parse(key, v)?,
            "blocks" => self.model.blocks = parse(key, v)?,
            "attn_heads" => self.model.heads = parse(key, v)?,
            "d_k" => {
                self.model.d_k = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "mode" => self.model.ablation = v.parse()?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "optimizer" => self.train.optimizer = v.parse()?,
            "l2_weight" => self.train.l2_weight = parse(key, v)?,
            "dropout" => self.train.dropout = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "grad_clip" => self.train.grad_clip = parse(key, v)?,
            "task_weights" => {
                self.train.task_weights = if v == "none" {
                    None
                } else {
                    Some(parse_list(key, v)?)
                }
            }
            "noise_rate" => self.synth.noise_rate = parse(key, v)?,
            "train_examples" => self.synth.examples[0] = parse(key, v)?,
            "val_examples" => self.synth.examples[1] = parse(key, v)?,
            "test_examples" => self.synth.examples[2] = parse(key, v)?,
            "users" => self.synth.users = parse(key, v)?,
            "cat_subset_frac" => self.synth.cat_subset_frac = parse(key, v)?,
            "item_subset_frac" => self.synth.item_subset_frac = parse(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a whole config text. `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`", i + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        cfg.sync();
        Ok(cfg)
    }

    /// Propagates shared values (seed, data schema) into the sub-configs.
    pub fn sync(&mut self) {
        self.train.seed = self.seed;
        self.synth.schema = self.schema.data.clone();
    }

    /// Checks every domain. Schema problems surface as config errors here
    /// because they come from the configuration, not from data.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.schema.validate().map_err(as_config)?;
        if self.model.blocks == 0 {
            return Err(Error::Config("blocks must be >= 1".into()));
        }
        let dims = crate::block::BlockDims {
            d: self.schema.d,
            d_k: self.model.d_k.unwrap_or(self.schema.d),
            heads: self.model.heads,
            cat_proxies: self.schema.cat_proxies,
            behaviors: self.schema.data.num_behaviors(),
            tasks: self.schema.tasks(),
            shared: self.schema.shared_task_tokens,
        };
        dims.validate().map_err(as_config)?;
        self.train.validate(self.schema.tasks())
    }

    /// [`validate`](Self::validate) plus the generator's own constraints.
    pub fn validate_for_generation(&self) -> Result<()> {
        self.validate()?;
        let mut synth = self.synth.clone();
        synth.schema = self.schema.data.clone();
        synth.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })
    }

    pub fn with_mode(&self, mode: Ablation) -> Self {
        let mut c = self.clone();
        c.model.ablation = mode;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides_last_wins() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\nd = 8  # trailing\nblocks=1\n\nmode = wo2\n",
            "t",
        )
        .unwrap();
        c.apply_override("d=12").unwrap();
        assert_eq!(c.schema.d, 12);
        assert_eq!(c.model.blocks, 1);
        assert_eq!(c.model.ablation, Ablation::NoHomogeneous);
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("colour", "red"), Err(Error::Config(_))));
        assert!(matches!(c.set("d", "many"), Err(Error::Config(_))));
        assert!(c.apply_text("d 8", "t").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let sample = |k: &str| match k {
            "cards" | "lens" | "vocabs" | "task_weights" => "3,3,3",
            "mode" => "full",
            "optimizer" => "adam",
            "data_dir" | "out_dir" => "x",
            "learning_rate" | "l2_weight" | "dropout" | "noise_rate" | "grad_clip" => "0.1",
            "cat_subset_frac" | "item_subset_frac" => "0.5",
            _ => "3",
        };
        for k in KEYS {
            RunConfig::default().set(k, sample(k)).unwrap();
        }
    }

    #[test]
    fn validation_catches_domains() {
        let mut c = RunConfig::default();
        c.sync();
        c.validate().unwrap();
        c.set("dropout", "1.5").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("tasks", "0").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
