//! Model configuration, global parameters and the checkpoint container.
//!
//! A checkpoint is a single JSON document holding the model config, the
//! visit vocabulary, the inference networks and every retained posterior
//! sample of the global parameters. Tensors are stored by name with their
//! shape and little-endian `f64` bytes in base64.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{VisitVocab, VocabEntry, BACKGROUND};
use crate::decoder::{DecoderConfig, DecoderParams};
use crate::encoders::{EncoderConfig, LocalEncoders};
use crate::error::{EvaError, Result};
use crate::latent::{ConditionMatrix, HierarchyHyper};
use crate::params::ParamGroup;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "eva-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Unconditional model with a standard normal latent prior.
    Eva,
    /// Conditional model with the hierarchical condition prior.
    Evac,
}

impl std::str::FromStr for Variant {
    type Err = EvaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eva" => Ok(Variant::Eva),
            "evac" => Ok(Variant::Evac),
            other => Err(EvaError::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Eva => "eva",
            Variant::Evac => "evac",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub decoder: DecoderConfig,
    pub encoder: EncoderConfig,
    pub hyper: HierarchyHyper,
    pub condition_names: Vec<String>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.encoder.validate()?;
        self.hyper.validate()?;
        if self.variant == Variant::Evac && self.condition_names.is_empty() {
            return Err(EvaError::Config("the conditional model needs at least one condition".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.latent_dim
    }

    pub fn num_conditions(&self) -> usize {
        self.condition_names.len()
    }

    pub fn background_index(&self) -> Option<usize> {
        self.condition_names.iter().position(|n| n == BACKGROUND)
    }

    pub fn init_encoders(&self, rng: &mut impl Rng) -> LocalEncoders {
        let v = self.decoder.num_tokens;
        match self.variant {
            Variant::Eva => LocalEncoders::init_eva(v, self.latent_dim(), &self.encoder, rng),
            Variant::Evac => {
                LocalEncoders::init_evac(v, self.latent_dim(), self.num_conditions(), &self.encoder, rng)
            }
        }
    }

    pub fn init_globals(&self, rng: &mut impl Rng) -> GlobalParams {
        let decoder = DecoderParams::init(&self.decoder, rng);
        let conditions = match self.variant {
            Variant::Eva => None,
            Variant::Evac => Some(ConditionMatrix::sample_prior(
                self.condition_names.clone(),
                self.latent_dim(),
                rng,
            )),
        };
        GlobalParams { decoder, conditions }
    }
}

/// The global variables `(theta, H)`; `H` is absent for the unconditional model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub decoder: DecoderParams,
    pub conditions: Option<ConditionMatrix>,
}

impl GlobalParams {
    /// Slot index of `H` within this group, if present.
    pub fn conditions_slot(&self) -> Option<usize> {
        self.conditions.as_ref().map(|_| self.decoder.num_tensors())
    }
}

impl ParamGroup for GlobalParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.decoder.tensors();
        if let Some(h) = &self.conditions {
            v.push(&h.rows);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.decoder.tensors_mut();
        if let Some(h) = &mut self.conditions {
            v.push(&mut h.rows);
        }
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = self.decoder.names();
        if self.conditions.is_some() {
            v.push("conditions".into());
        }
        v
    }
}

/// Provenance recorded alongside a trained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub iterations: usize,
    pub samples_collected: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// A trained model: inference networks plus retained posterior samples of
/// the global parameters, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub vocab: VisitVocab,
    pub encoders: LocalEncoders,
    pub reservoir: Vec<GlobalParams>,
    pub meta: TrainingMeta,
}

impl TrainedModel {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// The most recent posterior sample.
    pub fn last_sample(&self) -> Result<&GlobalParams> {
        self.reservoir
            .last()
            .ok_or_else(|| EvaError::invalid("model has no retained posterior samples"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.entries().to_vec(),
            encoders: pack(&self.encoders),
            reservoir: self.reservoir.iter().map(pack).collect(),
            meta: self.meta.clone(),
        };
        let text = serde_json::to_string(&doc)?;
        fs::write(path, text).map_err(|e| EvaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EvaError::io(path, e))?;
        let doc: CheckpointDoc = serde_json::from_str(&text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(EvaError::invalid(format!("{} is not a model checkpoint", path.display())));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(EvaError::invalid(format!("unsupported checkpoint version {}", doc.version)));
        }
        doc.config.validate()?;
        let vocab = VisitVocab::from_entries(doc.vocab)?;
        if vocab.num_output_tokens() != doc.config.decoder.num_tokens {
            return Err(EvaError::invalid("checkpoint vocabulary does not match decoder size"));
        }
        let mut rng = crate::rng::rng_from_seed(0);
        let mut encoders = doc.config.init_encoders(&mut rng);
        unpack(&mut encoders, &doc.encoders)?;
        let mut reservoir = Vec::with_capacity(doc.reservoir.len());
        for sample in &doc.reservoir {
            let mut g = doc.config.init_globals(&mut rng);
            unpack(&mut g, sample)?;
            reservoir.push(g);
        }
        Ok(Self {
            config: doc.config,
            vocab,
            encoders,
            reservoir,
            meta: doc.meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vec<VocabEntry>,
    encoders: Vec<NamedTensor>,
    reservoir: Vec<Vec<NamedTensor>>,
    meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    data: String,
}

fn pack<G: ParamGroup + ?Sized>(group: &G) -> Vec<NamedTensor> {
    group
        .names()
        .into_iter()
        .zip(group.tensors())
        .map(|(name, t)| {
            let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
            NamedTensor {
                name,
                shape: [t.rows(), t.cols()],
                data: B64.encode(bytes),
            }
        })
        .collect()
}

fn unpack<G: ParamGroup + ?Sized>(group: &mut G, stored: &[NamedTensor]) -> Result<()> {
    let names = group.names();
    if names.len() != stored.len() {
        return Err(EvaError::invalid("checkpoint tensor count does not match config"));
    }
    for ((name, t), s) in names.iter().zip(group.tensors_mut()).zip(stored) {
        if &s.name != name || s.shape != [t.rows(), t.cols()] {
            return Err(EvaError::invalid(format!(
                "checkpoint tensor {} {:?} does not match expected {name} {:?}",
                s.name,
                s.shape,
                [t.rows(), t.cols()]
            )));
        }
        let bytes = B64
            .decode(&s.data)
            .map_err(|e| EvaError::invalid(format!("tensor {name}: {e}")))?;
        if bytes.len() != 8 * t.len() {
            return Err(EvaError::invalid(format!("tensor {name}: wrong byte length")));
        }
        for (x, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        if !t.is_finite() {
            return Err(EvaError::numerical(format!("checkpoint tensor {name}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Visit;
    use crate::rng::rng_from_seed;

    fn config(variant: Variant) -> ModelConfig {
        let mut decoder = DecoderConfig::with_tokens(4);
        decoder.latent_dim = 3;
        decoder.channels = 4;
        decoder.t_max = 6;
        ModelConfig {
            variant,
            decoder,
            encoder: EncoderConfig {
                embed_dim: 3,
                lstm_hidden: 3,
                mlp_hidden: 3,
            },
            hyper: HierarchyHyper::default(),
            condition_names: vec!["hf".into(), BACKGROUND.into()],
        }
    }

    fn vocab() -> VisitVocab {
        VisitVocab::from_entries(
            ["a", "b", "c"]
                .iter()
                .map(|c| VocabEntry {
                    codes: Visit::new([*c]).unwrap(),
                    frequency: 1,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        for variant in [Variant::Eva, Variant::Evac] {
            let cfg = config(variant);
            let mut rng = rng_from_seed(3);
            let model = TrainedModel {
                encoders: cfg.init_encoders(&mut rng),
                reservoir: vec![cfg.init_globals(&mut rng), cfg.init_globals(&mut rng)],
                config: cfg,
                vocab: vocab(),
                meta: TrainingMeta {
                    seed: 9,
                    iterations: 10,
                    samples_collected: 2,
                    config_digest: Some("d".into()),
                },
            };
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.json");
            model.save(&p).unwrap();
            assert_eq!(TrainedModel::load(&p).unwrap(), model);
        }
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let cfg = config(Variant::Eva);
        let mut rng = rng_from_seed(3);
        let model = TrainedModel {
            encoders: cfg.init_encoders(&mut rng),
            reservoir: vec![cfg.init_globals(&mut rng)],
            config: cfg,
            vocab: vocab(),
            meta: TrainingMeta::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        model.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replace("\"channels\":4", "\"channels\":5");
        std::fs::write(&p, text).unwrap();
        assert!(TrainedModel::load(&p).is_err());
        std::fs::write(&p, "{}").unwrap();
        assert!(TrainedModel::load(&p).is_err());
    }
}
