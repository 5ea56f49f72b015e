//! Within-record diversity measures.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Cohort;
use crate::error::{EvaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    pub value: f64,
    pub records_used: usize,
    /// Records with fewer than two visits.
    pub records_skipped: usize,
}

/// Mean over records of the mean Jaccard index between consecutive visits.
pub fn avg_jaccard(cohort: &Cohort) -> Result<JaccardReport> {
    let mut sum = 0.0;
    let mut used = 0;
    for r in &cohort.records {
        if r.visits.len() < 2 {
            continue;
        }
        let pairs = r.visits.windows(2);
        let n = pairs.len() as f64;
        sum += pairs.map(|w| w[0].jaccard(&w[1])).sum::<f64>() / n;
        used += 1;
    }
    if used == 0 {
        return Err(EvaError::invalid("no record has two or more visits"));
    }
    Ok(JaccardReport {
        value: sum / used as f64,
        records_used: used,
        records_skipped: cohort.len() - used,
    })
}

/// Mean over records of distinct visit tokens divided by visit count.
pub fn unique_token_ratio(cohort: &Cohort) -> Result<f64> {
    if cohort.is_empty() {
        return Err(EvaError::EmptyCorpus);
    }
    let total: f64 = cohort
        .records
        .iter()
        .map(|r| {
            let distinct: BTreeSet<_> = r.visits.iter().collect();
            distinct.len() as f64 / r.visits.len() as f64
        })
        .sum();
    Ok(total / cohort.len() as f64)
}
