use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "sgd_momentum_0.9")]
    SgdMomentum,
    #[serde(rename = "adam")]
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd_momentum_0.9",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd_momentum_0.9" | "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Argument(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_prompt: f64,
    pub lr_head: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub warmup_epochs: usize,
    pub optimizer: OptimizerKind,
    /// Adam step size of the captioning warm-up.
    pub warmup_lr: f64,
    pub warmup_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr_prompt: 1e-1,
            lr_head: 5e-3,
            batch_size: 32,
            seed: 0,
            weights: LossWeights::PLAIN,
            warmup_epochs: 3,
            optimizer: OptimizerKind::Adam,
            warmup_lr: 1e-3,
            warmup_batch_size: 8,
        }
    }
}

impl TrainConfig {
    /// Learning rates may be zero (a no-op run) but not negative.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.warmup_batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        for (name, lr) in [("lr_prompt", self.lr_prompt), ("lr_head", self.lr_head), ("warmup_lr", self.warmup_lr)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Argument(format!("{name} must be finite and non-negative, got {lr}")));
            }
        }
        self.weights.validate()
    }
}

/// The experiment rows: which loss terms train and which path is reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    TokenSim,
    LlmLoss,
    NoRepEval,
    CaptionBaseline,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Plain, Variant::TokenSim, Variant::LlmLoss, Variant::NoRepEval, Variant::CaptionBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::TokenSim => "token_sim",
            Variant::LlmLoss => "llm_loss",
            Variant::NoRepEval => "no_rep_eval",
            Variant::CaptionBaseline => "caption_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown variant {s:?}")))
    }

    /// Loss weights for this row given the configured lambdas.
    pub fn weights(self, lambda_sim: f64, lambda_llm: f64) -> LossWeights {
        match self {
            Variant::TokenSim => LossWeights { lambda_sim, lambda_llm: 0.0 },
            Variant::LlmLoss => LossWeights { lambda_sim: 0.0, lambda_llm },
            _ => LossWeights::PLAIN,
        }
    }
}
