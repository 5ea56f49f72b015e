//! Synthetic cohort generation by ancestral sampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{decode_tokens, Cohort, PatientRecord};
use crate::decoder::{ancestral_sample, draw, IncrementalDecoder};
use crate::error::{EvaError, Result};
use crate::latent::{sample_prior_eva, sample_prior_evac, with_background};
use crate::model::{GlobalParams, TrainedModel, Variant};
use crate::rng::{derive_seed, rng_from_seed, SeededRng};

/// Attempts made before an empty generation is forced to one visit.
pub const MAX_EMPTY_RESAMPLES: usize = 5;
const RECORD_TAG: u64 = 0x67_656e;

/// Which retained posterior sample of the globals each record uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReservoirPolicy {
    /// A uniformly drawn sample per record.
    #[default]
    Ensemble,
    /// The most recent sample for every record.
    Point,
}

impl std::str::FromStr for ReservoirPolicy {
    type Err = EvaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ensemble" => Ok(Self::Ensemble),
            "point" => Ok(Self::Point),
            other => Err(EvaError::Config(format!("unknown reservoir policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GenerationMode {
    Unconditional,
    /// Condition indicator vector aligned with the model's condition names.
    Conditional(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub count: usize,
    pub mode: GenerationMode,
    pub temperature: f64,
    /// Length cap; defaults to the decoder's `t_max`.
    pub t_max: Option<usize>,
    pub seed: u64,
    pub policy: ReservoirPolicy,
}

impl GenerationRequest {
    pub fn unconditional(count: usize, seed: u64) -> Self {
        Self {
            count,
            mode: GenerationMode::Unconditional,
            temperature: 1.0,
            t_max: None,
            seed,
            policy: ReservoirPolicy::Ensemble,
        }
    }
}

/// Builds the condition vector for the named conditions.
pub fn condition_vector(model: &TrainedModel, names: &[&str]) -> Result<Vec<f64>> {
    let all = &model.config.condition_names;
    let mut y = vec![0.0; all.len()];
    for n in names {
        let k = all
            .iter()
            .position(|c| c == n)
            .ok_or_else(|| EvaError::UnknownCondition((*n).to_owned()))?;
        y[k] = 1.0;
    }
    Ok(y)
}

/// Generates `request.count` records. Conditional models asked for
/// unconditional output are conditioned on the background condition.
pub fn generate_cohort(model: &TrainedModel, request: &GenerationRequest) -> Result<Cohort> {
    if model.reservoir.is_empty() {
        return Err(EvaError::invalid("model has no retained posterior samples"));
    }
    if !(request.temperature >= 0.0) {
        return Err(EvaError::invalid("temperature must be non-negative"));
    }
    let cfg = &model.config;
    let y = match (&request.mode, cfg.variant) {
        (GenerationMode::Conditional(_), Variant::Eva) => return Err(EvaError::ConditionalRequiresEvac),
        (GenerationMode::Conditional(y), Variant::Evac) => {
            if y.len() != cfg.num_conditions() {
                return Err(EvaError::invalid("condition vector length does not match the model"));
            }
            Some(with_background(y, cfg.background_index())?)
        }
        (GenerationMode::Unconditional, Variant::Evac) => {
            Some(with_background(&vec![0.0; cfg.num_conditions()], cfg.background_index())?)
        }
        (GenerationMode::Unconditional, Variant::Eva) => None,
    };
    let t_max = request.t_max.unwrap_or(cfg.decoder.t_max).min(cfg.decoder.t_max);
    if t_max == 0 {
        return Err(EvaError::invalid("t_max must be at least 1"));
    }
    let records: Vec<Result<PatientRecord>> = (0..request.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(request.seed, RECORD_TAG, i as u64));
            let globals = pick_sample(model, request.policy, &mut rng);
            let body = sample_body(model, globals, y.as_deref(), t_max, request.temperature, &mut rng)?;
            let visits = decode_tokens(&body, &model.vocab)?;
            let conditions = match &y {
                Some(y) => y.iter().map(|&v| v == 1.0).collect(),
                None => Vec::new(),
            };
            Ok(PatientRecord {
                id: format!("g{:x}-{i:06}", request.seed),
                visits,
                conditions,
            })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let names = match cfg.variant {
        Variant::Eva => Vec::new(),
        Variant::Evac => cfg.condition_names.clone(),
    };
    let mut cohort = Cohort::new(records, names)?;
    cohort.vocab = Some(model.vocab.clone());
    Ok(cohort)
}

/// Case and control cohorts: cases conditioned on `condition`, controls on
/// the background condition.
pub fn generate_case_control(
    model: &TrainedModel,
    condition: &str,
    n_case: usize,
    n_control: usize,
    seed: u64,
) -> Result<(Cohort, Cohort)> {
    if model.variant() != Variant::Evac {
        return Err(EvaError::ConditionalRequiresEvac);
    }
    let case_y = condition_vector(model, &[condition])?;
    let bg = model
        .config
        .background_index()
        .ok_or_else(|| EvaError::UnknownCondition(crate::corpus::BACKGROUND.into()))?;
    let mut control_y = vec![0.0; case_y.len()];
    control_y[bg] = 1.0;
    let request = |count, y, s| GenerationRequest {
        count,
        mode: GenerationMode::Conditional(y),
        temperature: 1.0,
        t_max: None,
        seed: s,
        policy: ReservoirPolicy::Ensemble,
    };
    let cases = generate_cohort(model, &request(n_case, case_y, derive_seed(seed, 1, 0)))?;
    let controls = generate_cohort(model, &request(n_control, control_y, derive_seed(seed, 2, 0)))?;
    Ok((cases, controls))
}

fn pick_sample<'m>(model: &'m TrainedModel, policy: ReservoirPolicy, rng: &mut SeededRng) -> &'m GlobalParams {
    use rand::Rng;
    match policy {
        ReservoirPolicy::Point => model.reservoir.last().expect("non-empty reservoir"),
        ReservoirPolicy::Ensemble => &model.reservoir[rng.random_range(0..model.reservoir.len())],
    }
}

/// Samples a non-empty visit-token body, redrawing the latent after an
/// immediate EOS. When every attempt is empty the record is kept as a single
/// visit drawn with EOS excluded.
fn sample_body(
    model: &TrainedModel,
    globals: &GlobalParams,
    y: Option<&[f64]>,
    t_max: usize,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    let cfg = &model.config;
    let eos = model.vocab.eos_id();
    let draw_latent = |rng: &mut SeededRng| -> Result<Vec<f64>> {
        Ok(match (y, &globals.conditions) {
            (Some(y), Some(h)) => sample_prior_evac(h, y, &cfg.hyper, rng)?.z,
            _ => sample_prior_eva(cfg.latent_dim(), rng),
        })
    };
    for _ in 0..MAX_EMPTY_RESAMPLES {
        let z = draw_latent(rng)?;
        let s = ancestral_sample(&cfg.decoder, &globals.decoder, &z, eos, t_max, temperature, rng)?;
        if !s.body.is_empty() {
            return Ok(s.body);
        }
    }
    let z = draw_latent(rng)?;
    let mut logits = IncrementalDecoder::new(&cfg.decoder, &globals.decoder, &z)?.step(None)?;
    logits[eos] = f64::NEG_INFINITY;
    Ok(vec![draw(&logits, temperature, rng)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Visit, VisitVocab, VocabEntry, BACKGROUND};
    use crate::decoder::{DecoderConfig, DecoderParams};
    use crate::encoders::EncoderConfig;
    use crate::latent::HierarchyHyper;
    use crate::model::{ModelConfig, TrainingMeta};
    use crate::tensor::Tensor;

    fn toy_model(variant: Variant) -> TrainedModel {
        let vocab = VisitVocab::from_entries(
            ["a", "b", "c"]
                .iter()
                .map(|c| VocabEntry {
                    codes: Visit::new([*c]).unwrap(),
                    frequency: 1,
                })
                .collect(),
        )
        .unwrap();
        let mut decoder = DecoderConfig::with_tokens(4);
        decoder.latent_dim = 2;
        decoder.channels = 3;
        decoder.t_max = 5;
        let cfg = ModelConfig {
            variant,
            decoder,
            encoder: EncoderConfig {
                embed_dim: 2,
                lstm_hidden: 2,
                mlp_hidden: 2,
            },
            hyper: HierarchyHyper::default(),
            condition_names: vec!["hf".into(), BACKGROUND.into()],
        };
        let mut rng = rng_from_seed(1);
        let encoders = cfg.init_encoders(&mut rng);
        let reservoir = (0..3).map(|_| cfg.init_globals(&mut rng)).collect();
        TrainedModel {
            config: cfg,
            vocab,
            encoders,
            reservoir,
            meta: TrainingMeta::default(),
        }
    }

    #[test]
    fn records_are_valid_and_bounded() {
        let m = toy_model(Variant::Eva);
        let c = generate_cohort(&m, &GenerationRequest::unconditional(200, 3)).unwrap();
        assert_eq!(c.len(), 200);
        for r in &c.records {
            assert!(!r.visits.is_empty() && r.visits.len() <= 5);
            for v in &r.visits {
                assert!(m.vocab.token_of(v).is_some());
            }
        }
    }

    #[test]
    fn point_policy_is_deterministic() {
        let m = toy_model(Variant::Evac);
        let mut req = GenerationRequest::unconditional(50, 11);
        req.policy = ReservoirPolicy::Point;
        assert_eq!(generate_cohort(&m, &req).unwrap(), generate_cohort(&m, &req).unwrap());
    }

    #[test]
    fn conditional_request_needs_conditional_model() {
        let m = toy_model(Variant::Eva);
        let mut req = GenerationRequest::unconditional(5, 0);
        req.mode = GenerationMode::Conditional(vec![1.0, 0.0]);
        let err = generate_cohort(&m, &req).unwrap_err();
        assert_eq!(err.to_string(), "conditional generation requires evac");
        assert!(generate_case_control(&m, "hf", 1, 1, 0).is_err());
    }

    #[test]
    fn case_control_sizes_and_labels() {
        let m = toy_model(Variant::Evac);
        let (cases, controls) = generate_case_control(&m, "hf", 0, 7, 5).unwrap();
        assert!(cases.is_empty());
        assert_eq!(controls.len(), 7);
        assert!(controls.records.iter().all(|r| r.conditions == vec![false, true]));
        let (cases, _) = generate_case_control(&m, "hf", 4, 0, 5).unwrap();
        assert!(cases.records.iter().all(|r| r.conditions == vec![true, false]));
        assert!(matches!(
            generate_case_control(&m, "nope", 1, 1, 5),
            Err(EvaError::UnknownCondition(_))
        ));
    }

    #[test]
    fn immediate_eos_is_resampled_then_forced() {
        let mut m = toy_model(Variant::Eva);
        for g in &mut m.reservoir {
            g.decoder = DecoderParams::zeros(&m.config.decoder);
            g.decoder.out_b = Tensor::row_vector(vec![0.0, 0.0, 0.0, 50.0]);
        }
        let c = generate_cohort(&m, &GenerationRequest::unconditional(10, 2)).unwrap();
        assert!(c.records.iter().all(|r| r.visits.len() == 1));
    }
}
