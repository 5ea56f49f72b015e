//! Held-out evaluation of the variational bound.

use rayon::prelude::*;

use crate::corpus::{encode_cohort, replace_rare_visits, Cohort};
use crate::error::{EvaError, Result};
use crate::model::{TrainedModel, Variant};
use crate::trainer::{prepare_data, record_pass, LocalNoise};

/// Mean per-record bound on held-out records, with every local latent set
/// to its encoder mean and the most recent posterior sample of the globals.
///
/// For the conditional model the expectation of the latent cross term over
/// `q(z)` is taken in closed form, so the bound is exact given the means of
/// `w` and `b`. Records are mapped onto the model vocabulary first and
/// truncated to the decoder's `t_max`.
pub fn elbo_holdout(model: &TrainedModel, test: &Cohort) -> Result<f64> {
    if test.is_empty() {
        return Err(EvaError::EmptyCorpus);
    }
    let cfg = &model.config;
    let globals = model.last_sample()?;
    let mapped = replace_rare_visits(test, &model.vocab)?;
    let data = prepare_data(cfg, &encode_cohort(&mapped, &model.vocab, cfg.decoder.t_max)?)?;
    let noise = LocalNoise::zeros(cfg);
    let bounds: Vec<Result<f64>> = data
        .sequences
        .par_iter()
        .map(|s| {
            let terms = record_pass(cfg, &model.encoders, globals, s.targets(), &s.conditions, &noise, None)?;
            let mut bound = terms.elbo();
            if cfg.variant == Variant::Evac {
                let qz = model.encoders.z.encode(&s.tokens, &s.mask, &s.conditions)?;
                bound -= qz.var.iter().sum::<f64>() / (2.0 * cfg.hyper.tau);
            }
            Ok(bound)
        })
        .collect();
    let mut sum = 0.0;
    for b in bounds {
        sum += b?;
    }
    Ok(sum / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_visit_vocab, simulate_toy_cohort, SimulatorConfig};
    use crate::decoder::{DecoderConfig, DecoderParams};
    use crate::encoders::EncoderConfig;
    use crate::latent::HierarchyHyper;
    use crate::model::{ModelConfig, TrainingMeta};
    use crate::rng::rng_from_seed;

    fn untrained(variant: Variant, cohort: &Cohort) -> TrainedModel {
        let vocab = build_visit_vocab(cohort, 50).unwrap();
        let mut decoder = DecoderConfig::with_tokens(vocab.num_output_tokens());
        decoder.latent_dim = 4;
        decoder.channels = 8;
        decoder.t_max = 20;
        let config = ModelConfig {
            variant,
            decoder,
            encoder: EncoderConfig {
                embed_dim: 4,
                lstm_hidden: 4,
                mlp_hidden: 4,
            },
            hyper: HierarchyHyper::default(),
            condition_names: if variant == Variant::Evac { cohort.condition_names.clone() } else { vec![] },
        };
        let mut rng = rng_from_seed(3);
        let encoders = config.init_encoders(&mut rng);
        let mut g = config.init_globals(&mut rng);
        g.decoder = DecoderParams::zeros(&config.decoder);
        TrainedModel {
            config,
            vocab,
            encoders,
            reservoir: vec![g],
            meta: TrainingMeta::default(),
        }
    }

    fn toy() -> Cohort {
        let cfg = SimulatorConfig {
            n_records: 40,
            ..Default::default()
        };
        simulate_toy_cohort(&cfg, 1).unwrap()
    }

    #[test]
    fn uniform_decoder_respects_analytic_ceiling() {
        let c = toy();
        for variant in [Variant::Eva, Variant::Evac] {
            let m = untrained(variant, &c);
            let v = m.vocab.num_output_tokens() as f64;
            let mean_steps = c.records.iter().map(|r| (r.visits.len().min(20) + 1) as f64).sum::<f64>() / c.len() as f64;
            let b = elbo_holdout(&m, &c).unwrap();
            assert!(b <= -mean_steps * v.ln() + 1e-9, "{variant}: {b}");
            assert!(b < 0.0);
        }
    }
}
