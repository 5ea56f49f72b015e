//! Hybrid inference: amortized variational updates for the local latents
//! alternating with preconditioned Langevin sampling of the globals.
//!
//! Each iteration draws a minibatch, samples the local latents from the
//! current inference networks and runs one shared forward/backward pass.
//! The pass supplies both the global gradient (taken at the current
//! posterior sample) and the encoder gradient, so the encoder step uses the
//! sample from before this iteration's Langevin move.

mod adam;
mod objective;
mod psgld;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

pub use adam::{clip_global_norm, Adam};
pub use objective::{
    batch_pass, entropy_diag_gaussian, evaluate_objective, global_grad_estimate, kl_diag_gaussians, local_objective,
    record_pass, BatchGradients, ElboReport, LocalNoise, RecordTerms,
};
pub use psgld::{psgld_step, PsgldConfig, SamplerState};

use crate::corpus::{EncodedCohort, VisitVocab};
use crate::encoders::LocalEncoders;
use crate::error::{EvaError, Result};
use crate::latent::with_background;
use crate::model::{GlobalParams, ModelConfig, TrainedModel, TrainingMeta, Variant};
use crate::params::ParamGroup;
use crate::rng::{derive_seed, rng_from_seed};

const INIT_TAG: u64 = 1;
const BATCH_TAG: u64 = 2;
const NOISE_TAG: u64 = 3;
const LANGEVIN_TAG: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Adam learning rate for the inference networks.
    pub learning_rate: f64,
    pub psgld: PsgldConfig,
    /// Iterations before samples are retained; defaults to half the budget.
    pub burn_in: Option<usize>,
    pub thinning: usize,
    pub reservoir_size: usize,
    /// Global-norm clip applied to the encoder gradient.
    pub grad_clip: f64,
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            psgld: PsgldConfig::default(),
            burn_in: None,
            thinning: 200,
            reservoir_size: 10,
            grad_clip: 10.0,
            log_interval: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EvaError::Config(format!("train: {m}")));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be non-negative");
        }
        if self.thinning == 0 || self.reservoir_size == 0 || self.log_interval == 0 {
            return bad("thinning, reservoir_size and log_interval must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        self.psgld.validate()
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.iterations / 2).min(self.iterations - 1)
    }

    /// Whether the state after iteration `it` (0-based) is retained.
    pub fn collects_at(&self, it: usize) -> bool {
        let done = it + 1;
        let b = self.burn_in();
        done > b && ((done - b).is_multiple_of(self.thinning) || done == self.iterations)
    }
}

/// One line of the training metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub report: ElboReport,
}

/// Initial encoders and globals for a training seed.
pub fn initial_state(cfg: &ModelConfig, seed: u64) -> (LocalEncoders, GlobalParams) {
    let mut rng = rng_from_seed(derive_seed(seed, INIT_TAG, 0));
    let phi = cfg.init_encoders(&mut rng);
    let globals = cfg.init_globals(&mut rng);
    (phi, globals)
}

/// Checks an encoded cohort against the model and, for the conditional
/// model, replaces all-zero condition vectors by the background indicator.
pub fn prepare_data(cfg: &ModelConfig, data: &EncodedCohort) -> Result<EncodedCohort> {
    if data.is_empty() {
        return Err(EvaError::EmptyCorpus);
    }
    if data.num_output_tokens != cfg.decoder.num_tokens {
        return Err(EvaError::Config(format!(
            "decoder has {} output tokens, data has {}",
            cfg.decoder.num_tokens, data.num_output_tokens
        )));
    }
    if data.t_max > cfg.decoder.t_max {
        return Err(EvaError::Config(format!(
            "data t_max {} exceeds decoder t_max {}",
            data.t_max, cfg.decoder.t_max
        )));
    }
    let mut out = data.clone();
    if cfg.variant == Variant::Evac {
        let bg = cfg.background_index();
        for s in &mut out.sequences {
            if s.conditions.len() != cfg.num_conditions() {
                return Err(EvaError::invalid("condition vector length does not match the model"));
            }
            s.conditions = with_background(&s.conditions, bg)?;
        }
    }
    Ok(out)
}

/// Runs the alternating sampler/optimizer and returns the trained model.
/// `on_metric` receives a report every `log_interval` iterations and at the
/// final iteration.
pub fn train(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    data: &EncodedCohort,
    vocab: &VisitVocab,
    mut on_metric: impl FnMut(&MetricRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    tc.validate()?;
    if vocab.num_output_tokens() != cfg.decoder.num_tokens {
        return Err(EvaError::Config("vocabulary size does not match decoder".into()));
    }
    let data = prepare_data(cfg, data)?;
    let n = data.len();
    let m = tc.batch_size.min(n);

    let (mut phi, mut globals) = initial_state(cfg, tc.seed);
    let mut adam = Adam::new(tc.learning_rate, &phi.zeros_like());
    let mut sampler = SamplerState::new(&globals.zeros_like());
    let mut langevin_rng = rng_from_seed(derive_seed(tc.seed, LANGEVIN_TAG, 0));
    let mut reservoir: Vec<GlobalParams> = Vec::new();
    let mut collected = 0;
    let mut last_report: Option<ElboReport> = None;

    for it in 0..tc.iterations {
        let mut batch_rng = rng_from_seed(derive_seed(tc.seed, BATCH_TAG, it as u64));
        let batch = sample_indices(&mut batch_rng, n, m).into_vec();
        let noise_seed = derive_seed(tc.seed, NOISE_TAG, it as u64);
        let grads = batch_pass(cfg, &phi, &globals, &data, &batch, noise_seed).map_err(|e| diverged(e, it, last_report))?;
        if !grads.report.is_finite() {
            return Err(diverged(EvaError::numerical("objective"), it, last_report));
        }

        if it == 0 {
            sampler.warm(&grads.globals);
        }
        psgld_step(&mut sampler, &mut globals.tensors_mut(), &grads.globals, &tc.psgld, &mut langevin_rng);
        if !globals.is_finite() {
            return Err(diverged(EvaError::numerical("global parameters"), it, Some(grads.report)));
        }

        let mut g_phi = grads.phi;
        clip_global_norm(&mut g_phi, tc.grad_clip);
        adam.step(&mut phi.tensors_mut(), &g_phi);
        if !phi.is_finite() {
            return Err(diverged(EvaError::numerical("encoder parameters"), it, Some(grads.report)));
        }

        if tc.collects_at(it) {
            collected += 1;
            reservoir.push(globals.clone());
            if reservoir.len() > tc.reservoir_size {
                reservoir.remove(0);
            }
        }
        last_report = Some(grads.report);
        if (it + 1) % tc.log_interval == 0 || it + 1 == tc.iterations {
            on_metric(&MetricRecord {
                iteration: it + 1,
                report: grads.report,
            });
        }
    }

    Ok(TrainedModel {
        config: cfg.clone(),
        vocab: vocab.clone(),
        encoders: phi,
        reservoir,
        meta: TrainingMeta {
            seed: tc.seed,
            iterations: tc.iterations,
            samples_collected: collected,
            config_digest: None,
        },
    })
}

fn diverged(err: EvaError, it: usize, last: Option<ElboReport>) -> EvaError {
    let last = match last {
        Some(r) => format!("; last objective {:.6} (recon {:.6})", r.total, r.recon),
        None => String::new(),
    };
    match err {
        EvaError::Numerical { term } => EvaError::numerical(format!("{term} at iteration {}{last}", it + 1)),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collection_schedule() {
        let tc = TrainConfig {
            iterations: 1000,
            thinning: 200,
            ..Default::default()
        };
        let points: Vec<usize> = (0..1000).filter(|&i| tc.collects_at(i)).map(|i| i + 1).collect();
        assert_eq!(points, vec![700, 900, 1000]);
        let short = TrainConfig {
            iterations: 3,
            ..Default::default()
        };
        assert_eq!((0..3).filter(|&i| short.collects_at(i)).count(), 1);
    }
}
