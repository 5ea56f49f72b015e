//! Fidelity, diversity, utility and privacy evaluations.

mod diversity;
mod likelihood;
mod ngram;
mod predictor;
mod privacy;

use serde::{Deserialize, Serialize};

pub use diversity::{avg_jaccard, unique_token_ratio, JaccardReport};
pub use likelihood::elbo_holdout;
pub use ngram::{independent_unigram_cohort, ngram_stats, pearson, pearson_marginal, write_scatter, NgramStats};
pub use predictor::{
    predictor_loss, recall_of, topk_recall, train_next_visit_predictor, NextVisitPredictor, PredictorConfig,
    RecallReport,
};
pub use privacy::{presence_disclosure, AttackOutcome, ConfusionCounts, DEFAULT_PRIOR};

/// One named scalar in a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub config_digest: Option<String>,
    pub seed: u64,
}

impl Metric {
    pub fn new(name: impl Into<String>, value: f64, config_digest: Option<&str>, seed: u64) -> Self {
        Self {
            name: name.into(),
            value,
            config_digest: config_digest.map(str::to_owned),
            seed,
        }
    }
}
