//! Run configuration: defaults, then a `key = value` file, then flags.

use std::path::{Path, PathBuf};

use langneck_core::model::ModelConfig;
use langneck_core::objectives::LossWeights;
use langneck_core::train::{config_hash, DecodePath, OptimizerKind, TrainConfig, Variant};
use langneck_core::Error;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub variant: Variant,
    pub lambda_sim: f64,
    pub lambda_llm: f64,
    pub epochs: usize,
    pub lr_prompt: f64,
    pub lr_head: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub warmup_batch_size: usize,
    pub model: ModelConfig,
    pub path: DecodePath,
    pub count: usize,
    pub h: f64,
    pub data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        RunConfig {
            seed: t.seed,
            train_count: 2048,
            val_count: 512,
            variant: Variant::Plain,
            lambda_sim: w.lambda_sim,
            lambda_llm: w.lambda_llm,
            epochs: t.epochs,
            lr_prompt: t.lr_prompt,
            lr_head: t.lr_head,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            warmup_epochs: t.warmup_epochs,
            warmup_lr: t.warmup_lr,
            warmup_batch_size: t.warmup_batch_size,
            model: ModelConfig::default(),
            path: DecodePath::Hard,
            count: 8,
            h: 1e-4,
            data: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value.parse().map_err(|_| Error::Argument(format!("cannot parse {key} = {value:?}")))
}

impl RunConfig {
    /// Sets one key. Dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "seed" => self.seed = parse(k, v)?,
            "train" | "train_count" => self.train_count = parse(k, v)?,
            "val" | "val_count" => self.val_count = parse(k, v)?,
            "variant" => self.variant = Variant::parse(v)?,
            "lambda_sim" => self.lambda_sim = parse(k, v)?,
            "lambda_llm" => self.lambda_llm = parse(k, v)?,
            "epochs" => self.epochs = parse(k, v)?,
            "lr_prompt" => self.lr_prompt = parse(k, v)?,
            "lr_head" => self.lr_head = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(v)?,
            "warmup_epochs" => self.warmup_epochs = parse(k, v)?,
            "warmup_lr" => self.warmup_lr = parse(k, v)?,
            "warmup_batch_size" => self.warmup_batch_size = parse(k, v)?,
            "d_model" => self.model.d_model = parse(k, v)?,
            "heads" => self.model.heads = parse(k, v)?,
            "enc_blocks" => self.model.enc_blocks = parse(k, v)?,
            "dec_blocks" => self.model.dec_blocks = parse(k, v)?,
            "mlp_hidden" => self.model.mlp_hidden = parse(k, v)?,
            "n_prompt" => {
                self.model.n_prompt = parse(k, v)?;
                self.model.max_positions = self.model.max_positions.max(2 * self.model.n_prompt + 2);
            }
            "bos_prefix" => self.model.bos_prefix = parse(k, v)?,
            "path" => self.path = DecodePath::parse(v)?,
            "count" => self.count = parse(k, v)?,
            "h" => self.h = parse(k, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            _ => return Err(Error::Argument(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file; blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("cannot read config {}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        self.variant.weights(self.lambda_sim, self.lambda_llm)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr_prompt: self.lr_prompt,
            lr_head: self.lr_head,
            batch_size: self.batch_size,
            seed: self.seed,
            weights: self.weights(),
            warmup_epochs: self.warmup_epochs,
            optimizer: self.optimizer,
            warmup_lr: self.warmup_lr,
            warmup_batch_size: self.warmup_batch_size,
        }
    }

    /// Canonical `key = value` text; this is what gets hashed.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let data = self.data.as_ref().map_or(String::new(), |p| p.display().to_string());
        [
            ("seed", self.seed.to_string()),
            ("train_count", self.train_count.to_string()),
            ("val_count", self.val_count.to_string()),
            ("variant", self.variant.name().to_owned()),
            ("lambda_sim", self.lambda_sim.to_string()),
            ("lambda_llm", self.lambda_llm.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr_prompt", self.lr_prompt.to_string()),
            ("lr_head", self.lr_head.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("optimizer", self.optimizer.name().to_owned()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("warmup_lr", self.warmup_lr.to_string()),
            ("warmup_batch_size", self.warmup_batch_size.to_string()),
            ("d_model", m.d_model.to_string()),
            ("heads", m.heads.to_string()),
            ("enc_blocks", m.enc_blocks.to_string()),
            ("dec_blocks", m.dec_blocks.to_string()),
            ("mlp_hidden", m.mlp_hidden.to_string()),
            ("n_prompt", m.n_prompt.to_string()),
            ("bos_prefix", m.bos_prefix.to_string()),
            ("path", self.path.name().to_owned()),
            ("count", self.count.to_string()),
            ("h", self.h.to_string()),
            ("data", data),
        ]
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.set("variant", "token_sim").unwrap();
        c.set("lr-prompt", "0.05").unwrap();
        c.set("data", "some/dir").unwrap();
        let mut back = RunConfig::default();
        for line in c.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k, v).unwrap();
        }
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn defaults_follow_the_library() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.lr_prompt, c.lr_head), (5, 0.1, 5e-3));
        assert_eq!(c.train_config().weights, LossWeights::PLAIN);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_argument_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("colour", "1"), Err(Error::Argument(_))));
        assert!(matches!(c.set("epochs", "five"), Err(Error::Argument(_))));
        assert!(matches!(c.set("variant", "ours"), Err(Error::Argument(_))));
    }
}
