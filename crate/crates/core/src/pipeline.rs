//! End-to-end steps composed from the library modules, shared by the
//! command line, the C interface and the integration tests.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{build_visit_vocab, encode_cohort, replace_rare_visits, Cohort, EncodedCohort, PatientRecord, VisitVocab};
use crate::error::{EvaError, Result};
use crate::eval::{
    avg_jaccard, elbo_holdout, ngram_stats, pearson_marginal, presence_disclosure, topk_recall,
    train_next_visit_predictor, unique_token_ratio, AttackOutcome, Metric,
};
use crate::model::TrainedModel;
use crate::trainer::{train, MetricRecord};

/// A cohort mapped onto a vocabulary and encoded as token rows.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub vocab: VisitVocab,
    pub cohort: Cohort,
    pub encoded: EncodedCohort,
}

/// Builds a vocabulary of at most `vocab_size` entries unless one is given,
/// replaces rare visits and encodes to `t_max`.
pub fn prepare_corpus(cohort: &Cohort, vocab: Option<&VisitVocab>, vocab_size: usize, t_max: usize) -> Result<PreparedCorpus> {
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => build_visit_vocab(cohort, vocab_size)?,
    };
    let mapped = replace_rare_visits(cohort, &vocab)?;
    let encoded = encode_cohort(&mapped, &vocab, t_max)?;
    Ok(PreparedCorpus {
        vocab,
        cohort: mapped,
        encoded,
    })
}

/// Prepares `cohort` and trains the configured model on it. The returned
/// model records the config digest.
pub fn train_on_cohort(
    run: &RunConfig,
    cohort: &Cohort,
    vocab: Option<&VisitVocab>,
    on_metric: impl FnMut(&MetricRecord),
) -> Result<TrainedModel> {
    let prepared = prepare_corpus(cohort, vocab, run.vocab_size, run.t_max)?;
    let cfg = run.model_config(&prepared.vocab, &cohort.condition_names)?;
    let mut model = train(&cfg, &run.train_config(), &prepared.encoded, &prepared.vocab, on_metric)?;
    model.meta.config_digest = Some(run.digest());
    Ok(model)
}

/// Metric report comparing a real and a synthetic cohort, with utility and
/// held-out likelihood when a held-out cohort (and a model) are supplied.
pub fn evaluate_cohorts(
    run: &RunConfig,
    real: &Cohort,
    synthetic: &Cohort,
    holdout: Option<&Cohort>,
    model: Option<&TrainedModel>,
) -> Result<Vec<Metric>> {
    let digest = run.digest();
    let seed = run.seed;
    let mut out = Vec::new();
    let mut push = |name: &str, value: f64| out.push(Metric::new(name, value, Some(&digest), seed));
    for n in [1, 2] {
        let rho = pearson_marginal(&ngram_stats(real, n)?, &ngram_stats(synthetic, n)?)?;
        push(if n == 1 { "unigram_pearson" } else { "bigram_pearson" }, rho);
    }
    for (label, c) in [("real", real), ("synthetic", synthetic)] {
        if let Ok(j) = avg_jaccard(c) {
            push(&format!("avg_jaccard_{label}"), j.value);
        }
        push(&format!("unique_token_ratio_{label}"), unique_token_ratio(c)?);
    }
    if let Some(test) = holdout {
        let pc = run.predictor_config(seed);
        let real_p = train_next_visit_predictor(real, &pc)?;
        let synth_p = train_next_visit_predictor(synthetic, &pc)?;
        for &k in &run.top_k {
            push(&format!("top{k}_recall_real"), topk_recall(&real_p, test, k)?.value);
            push(&format!("top{k}_recall_synthetic"), topk_recall(&synth_p, test, k)?.value);
        }
        if let Some(m) = model {
            push("elbo_holdout", elbo_holdout(m, test)?);
        }
    }
    Ok(out)
}

/// Known records labelled by training membership.
pub fn known_records(members: &Cohort, non_members: &Cohort) -> Vec<(PatientRecord, bool)> {
    members
        .records
        .iter()
        .map(|r| (r.clone(), true))
        .chain(non_members.records.iter().map(|r| (r.clone(), false)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub config_digest: String,
    pub seed: u64,
    pub outcome: AttackOutcome,
    pub member_fraction: f64,
}

pub fn attack(run: &RunConfig, synthetic: &Cohort, members: &Cohort, non_members: &Cohort) -> Result<AttackReport> {
    if members.is_empty() && non_members.is_empty() {
        return Err(EvaError::invalid("no known records to attack"));
    }
    let outcome = presence_disclosure(synthetic, &known_records(members, non_members), run.prior, run.ordered)?;
    Ok(AttackReport {
        config_digest: run.digest(),
        seed: run.seed,
        member_fraction: outcome.member_fraction(),
        outcome,
    })
}
