//! Flat run configuration shared by every subcommand.
//!
//! The file is flat TOML with a `schema_version` key. Unknown keys are
//! rejected. Command-line overrides are `key=value` pairs whose value is
//! parsed as a TOML value (bare words fall back to strings) and replace the
//! file value before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{SimulatorConfig, VisitVocab};
use crate::decoder::DecoderConfig;
use crate::encoders::EncoderConfig;
use crate::error::{EvaError, Result};
use crate::eval::PredictorConfig;
use crate::generator::{condition_vector, GenerationMode, GenerationRequest, ReservoirPolicy};
use crate::latent::HierarchyHyper;
use crate::model::{ModelConfig, TrainedModel, Variant};
use crate::trainer::{PsgldConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSetting {
    #[default]
    Unconditional,
    Conditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub variant: Variant,

    pub n_records: usize,
    pub n_conditions: usize,
    pub structure_seed: u64,

    pub vocab_size: usize,
    pub t_max: usize,

    pub latent_dim: usize,
    pub channels: usize,
    pub deconv_layers: usize,
    pub deconv_stride: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
    pub tau: f64,
    pub gamma: f64,

    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub step_size: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub sampler_temperature: f64,
    pub burn_in: Option<usize>,
    pub thinning: usize,
    pub reservoir_size: usize,
    pub grad_clip: f64,
    pub log_interval: usize,

    pub count: usize,
    pub mode: ModeSetting,
    pub conditions: Vec<String>,
    pub temperature: f64,
    pub policy: ReservoirPolicy,
    pub max_visits: Option<usize>,

    pub split_fraction: f64,
    pub top_k: Vec<usize>,
    pub predictor_hidden: usize,
    pub predictor_epochs: usize,
    pub prior: f64,
    pub ordered: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimulatorConfig::default();
        let dec = DecoderConfig::with_tokens(1);
        let enc = EncoderConfig::default();
        let hyper = HierarchyHyper::default();
        let tc = TrainConfig::default();
        let pc = PredictorConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            variant: Variant::Eva,
            n_records: sim.n_records,
            n_conditions: sim.n_conditions,
            structure_seed: sim.structure_seed,
            vocab_size: 200,
            t_max: dec.t_max,
            latent_dim: dec.latent_dim,
            channels: dec.channels,
            deconv_layers: dec.deconv_layers,
            deconv_stride: dec.deconv_stride,
            kernel_size: dec.kernel_size,
            dilations: dec.dilations,
            embed_dim: enc.embed_dim,
            lstm_hidden: enc.lstm_hidden,
            mlp_hidden: enc.mlp_hidden,
            tau: hyper.tau,
            gamma: hyper.gamma,
            iterations: tc.iterations,
            batch_size: tc.batch_size,
            learning_rate: tc.learning_rate,
            step_size: tc.psgld.step_size,
            alpha: tc.psgld.alpha,
            lambda: tc.psgld.lambda,
            sampler_temperature: tc.psgld.temperature,
            burn_in: tc.burn_in,
            thinning: tc.thinning,
            reservoir_size: tc.reservoir_size,
            grad_clip: tc.grad_clip,
            log_interval: tc.log_interval,
            count: 1000,
            mode: ModeSetting::Unconditional,
            conditions: Vec::new(),
            temperature: 1.0,
            policy: ReservoirPolicy::Ensemble,
            max_visits: None,
            split_fraction: 0.8,
            top_k: vec![5, 20, 30],
            predictor_hidden: pc.hidden,
            predictor_epochs: pc.epochs,
            prior: crate::eval::DEFAULT_PRIOR,
            ordered: false,
        }
    }
}

fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| EvaError::Config(format!("override {raw:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(EvaError::Config(format!("override {raw:?} has an empty key")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    Ok((key.to_owned(), parsed))
}

impl RunConfig {
    /// Parses a config file body and applies `overrides` on top.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| EvaError::Config(e.message().to_owned()))?;
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            table.insert(k, v);
        }
        if let Some(v) = table.get("schema_version") {
            if v.as_integer() != Some(SCHEMA_VERSION as i64) {
                return Err(EvaError::Config(format!("unsupported schema_version {v}")));
            }
        }
        let cfg: RunConfig = table.try_into().map_err(|e| EvaError::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when absent) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| EvaError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(&canonical))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EvaError::Config(m.to_owned()));
        if self.schema_version != SCHEMA_VERSION {
            return bad("unsupported schema_version");
        }
        if self.vocab_size == 0 || self.t_max == 0 || self.n_records == 0 {
            return bad("vocab_size, t_max and n_records must be positive");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction must lie in (0, 1)");
        }
        if self.top_k.is_empty() || self.top_k.contains(&0) {
            return bad("top_k must list positive integers");
        }
        if !(0.0..=1.0).contains(&self.prior) {
            return bad("prior must lie in [0, 1]");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be non-negative");
        }
        if self.max_visits == Some(0) {
            return bad("max_visits must be at least 1");
        }
        self.train_config().validate()?;
        self.simulator_config().validate()?;
        self.decoder_config(3).validate()
    }

    pub fn simulator_config(&self) -> SimulatorConfig {
        SimulatorConfig {
            n_records: self.n_records,
            n_conditions: self.n_conditions,
            structure_seed: self.structure_seed,
            ..Default::default()
        }
    }

    fn decoder_config(&self, num_tokens: usize) -> DecoderConfig {
        DecoderConfig {
            num_tokens,
            latent_dim: self.latent_dim,
            channels: self.channels,
            deconv_layers: self.deconv_layers,
            deconv_stride: self.deconv_stride,
            kernel_size: self.kernel_size,
            dilations: self.dilations.clone(),
            t_max: self.t_max,
        }
    }

    /// Model shape for a vocabulary and the cohort's condition names.
    pub fn model_config(&self, vocab: &VisitVocab, condition_names: &[String]) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            variant: self.variant,
            decoder: self.decoder_config(vocab.num_output_tokens()),
            encoder: EncoderConfig {
                embed_dim: self.embed_dim,
                lstm_hidden: self.lstm_hidden,
                mlp_hidden: self.mlp_hidden,
            },
            hyper: HierarchyHyper {
                tau: self.tau,
                gamma: self.gamma,
            },
            condition_names: match self.variant {
                Variant::Eva => Vec::new(),
                Variant::Evac => condition_names.to_vec(),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            psgld: PsgldConfig {
                step_size: self.step_size,
                alpha: self.alpha,
                lambda: self.lambda,
                temperature: self.sampler_temperature,
            },
            burn_in: self.burn_in,
            thinning: self.thinning,
            reservoir_size: self.reservoir_size,
            grad_clip: self.grad_clip,
            log_interval: self.log_interval,
            seed: self.seed,
        }
    }

    pub fn predictor_config(&self, seed: u64) -> PredictorConfig {
        PredictorConfig {
            hidden: self.predictor_hidden,
            epochs: self.predictor_epochs,
            seed,
            ..Default::default()
        }
    }

    pub fn generation_request(&self, model: &TrainedModel) -> Result<GenerationRequest> {
        let mode = match self.mode {
            ModeSetting::Unconditional => GenerationMode::Unconditional,
            ModeSetting::Conditional => {
                if model.variant() != Variant::Evac {
                    return Err(EvaError::ConditionalRequiresEvac);
                }
                let names: Vec<&str> = self.conditions.iter().map(String::as_str).collect();
                GenerationMode::Conditional(condition_vector(model, &names)?)
            }
        };
        Ok(GenerationRequest {
            count: self.count,
            mode,
            temperature: self.temperature,
            t_max: self.max_visits,
            seed: self.seed,
            policy: self.policy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let d = RunConfig::default();
        let back = RunConfig::from_toml_str(&d.to_toml_string(), &[]).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.digest(), d.digest());
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), d);
    }

    #[test]
    fn overrides_replace_file_values() {
        let c = RunConfig::from_toml_str(
            "seed = 3\nvariant = \"evac\"\n",
            &["seed=9".into(), "dilations=[1, 2]".into(), "policy=point".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.variant, Variant::Evac);
        assert_eq!(c.dilations, vec![1, 2]);
        assert_eq!(c.policy, ReservoirPolicy::Point);
        assert_ne!(c.digest(), RunConfig::default().digest());
    }

    #[test]
    fn rejects_bad_input() {
        for (text, ov) in [
            ("unknown_key = 1", vec![]),
            ("schema_version = 2", vec![]),
            ("", vec!["seed".to_string()]),
            ("", vec!["iterations=0".to_string()]),
            ("", vec!["variant=vae".to_string()]),
            ("", vec!["split_fraction=1.0".to_string()]),
            ("seed = ", vec![]),
        ] {
            let err = RunConfig::from_toml_str(text, &ov).unwrap_err();
            assert!(err.is_config_error(), "{text:?} {ov:?}: {err}");
        }
    }
}
