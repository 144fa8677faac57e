//! One JSON document for a whole run: data generation, every model
//! module, the loss, the optimizer, and the harness knobs.
//!
//! Ablation switches are ordinary nested fields; `--ablate KEY=VAL` from
//! the command line maps each short key onto the field it controls, so a
//! config file and an ablation flag always agree on what they mean. The
//! digest is a SHA-256 over the canonical JSON form and is embedded in
//! checkpoints and eval reports so artifacts can be traced to the exact
//! configuration that produced them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::GeneratorConfig;
use crate::context::CondenseStrategy;
use crate::decoder::{AggregationStrategy, DecoderConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::optim::OptimizerConfig;
use crate::responder::{ResponderConfig, Vocab};

/// Context aggregation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamConfig {
    /// When false the model runs without any text-conditioned context.
    pub enabled: bool,
    /// Adds `x_txt` back onto the attention output before the FFN. The
    /// default formula has no residual; this exists for ablation.
    pub residual: bool,
    /// Query text is padded or truncated to this many tokens (`M`).
    pub query_len: usize,
    /// Rows kept after condensation (`K`).
    pub keep: usize,
    pub strategy: CondenseStrategy,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            residual: false,
            query_len: 8,
            keep: 4,
            strategy: CondenseStrategy::AttnMax,
        }
    }
}

impl CamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_len == 0 {
            return Err(Error::Config("cam.query_len must be at least 1".into()));
        }
        if self.keep == 0 || self.keep > self.query_len {
            return Err(Error::Config(format!(
                "cam.keep must be in 1..={} (got {})",
                self.query_len, self.keep
            )));
        }
        Ok(())
    }
}

/// Complete configuration for generate, train, eval and infer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for data generation, init and batch order.
    pub seed: u64,
    /// Episodes to generate across all splits.
    pub n_episodes: usize,
    /// Train, val, test fractions; must sum to 1.
    pub split_ratios: [f64; 3],
    /// Episodes per training step.
    pub batch_size: usize,
    /// Checkpoint cadence in iterations (a final save always happens).
    pub save_every: usize,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub cam: CamConfig,
    pub responder: ResponderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_episodes: 100,
            split_ratios: [0.64, 0.16, 0.20],
            batch_size: 4,
            save_every: 100,
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            cam: CamConfig::default(),
            responder: ResponderConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RunConfig {
    /// Checks every module config plus the constraints that cut across
    /// them (pyramid divisibility, condensation bounds, vocab size).
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 {
            return Err(Error::Config("n_episodes must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.save_every == 0 {
            return Err(Error::Config("save_every must be at least 1".into()));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split_ratios must be nonnegative and sum to 1 (got {:?})",
                self.split_ratios
            )));
        }
        self.generator.validate()?;
        if self.encoder.patch == 0 || self.encoder.channels == 0 || self.encoder.scales == 0 {
            return Err(Error::Config(
                "encoder patch, channels and scales must all be at least 1".into(),
            ));
        }
        let coarsest = self.encoder.patch << (self.encoder.scales - 1);
        if self.generator.canvas_h % coarsest != 0 || self.generator.canvas_w % coarsest != 0 {
            return Err(Error::Config(format!(
                "canvas {}x{} is not divisible by the coarsest patch size {}",
                self.generator.canvas_h, self.generator.canvas_w, coarsest
            )));
        }
        self.cam.validate()?;
        let r = &self.responder;
        if r.tokens_per_scale == 0 || r.hidden == 0 || r.layers == 0 || r.max_len == 0 {
            return Err(Error::Config(
                "responder tokens_per_scale, hidden, layers and max_len must all be at least 1"
                    .into(),
            ));
        }
        if r.heads != 1 {
            return Err(Error::Config(format!(
                "responder.heads must be 1 (got {})",
                r.heads
            )));
        }
        Vocab::build(r.tokens_per_scale)?;
        self.decoder.validate(self.encoder.scales)?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }

    /// Applies one `--ablate KEY=VAL` switch onto the nested field it
    /// controls. Unknown keys and malformed values are config errors.
    pub fn apply_ablation(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "cam_on" => self.cam.enabled = parse_bool(key, value)?,
            "cam_residual" => self.cam.residual = parse_bool(key, value)?,
            "vfdec_on" => self.decoder.aggregate_enabled = parse_bool(key, value)?,
            "aggregation_strategy" => {
                self.decoder.strategy = match value {
                    "similarity" => AggregationStrategy::Similarity,
                    "fusion" => AggregationStrategy::Fusion,
                    _ => {
                        return Err(Error::Config(format!(
                            "aggregation_strategy must be similarity or fusion (got {value})"
                        )))
                    }
                }
            }
            "scale_count" => {
                let n = parse_usize(key, value)?;
                self.encoder.scales = n;
                self.decoder.layers = n;
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation key {key}; known keys: cam_on, cam_residual, \
                     vfdec_on, aggregation_strategy, scale_count"
                )))
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key} must be true or false (got {value})"
        ))),
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("{key} must be a nonnegative integer (got {value})")))
}

/// Reads, parses and validates a config file. Every failure mode here is
/// a usage error, so problems map to exit code 1.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(cfg).expect("config serialization cannot fail");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
