use std::path::Path;

use latentmotion::dataio::DecoderConfig;
use latentmotion::latent_model::ModelConfig;
use latentmotion::losses::LossWeights;
use latentmotion::metrics::EvalConfig;
use latentmotion::training::TrainConfig;
use latentmotion::{Error, Result};
use serde::{Deserialize, Serialize};

/// The single JSON file shared by every subcommand. Missing sections and
/// fields take their defaults; unknown ones are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    pub decoder: DecoderConfig,
    /// Whether the file spelled out `train.seed`, as opposed to inheriting the default.
    #[serde(skip)]
    pub train_seed_given: bool,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Config = serde_json::from_str(text).map_err(|e| {
            // serde names the offending field in the message, e.g. "unknown field `epochz`".
            let field = e.to_string().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.to_string())
        })?;
        let raw: serde_json::Value = serde_json::from_str(text).expect("already parsed");
        cfg.train_seed_given = raw.pointer("/train/seed").is_some();
        cfg.validate()?;
        Ok(cfg)
    }

    /// `train.seed` if the file set it.
    pub fn train_seed(&self) -> Option<u64> {
        self.train_seed_given.then_some(self.train.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }
}

/// Seed precedence: command-line flag, then config file, then
/// `LATENTMOTION_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var("LATENTMOTION_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config("LATENTMOTION_SEED", format!("not an unsigned integer: {v:?}"))),
        Err(_) => Ok(0),
    }
}
