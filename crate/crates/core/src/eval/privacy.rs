//! Presence-disclosure attack by record matching.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Cohort, PatientRecord, Visit};
use crate::error::{EvaError, Result};

/// Prior membership probability assumed by the attacker when unspecified.
pub const DEFAULT_PRIOR: f64 = 0.8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub sensitivity: f64,
    /// Zero when the attacker makes no membership claim.
    pub precision: f64,
    pub counts: ConfusionCounts,
    /// Reported alongside the rates; it does not reweight the counts.
    pub prior: f64,
    /// Whether matching required the same visit order.
    pub ordered: bool,
}

impl AttackOutcome {
    /// Fraction of known records that were in training.
    pub fn member_fraction(&self) -> f64 {
        let c = self.counts;
        (c.tp + c.fn_) as f64 / (c.tp + c.fp + c.fn_ + c.tn) as f64
    }

    /// Binomial standard error of a rate estimated from `n` trials.
    pub fn standard_error(rate: f64, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            (rate * (1.0 - rate) / n as f64).sqrt()
        }
    }
}

fn signature(r: &PatientRecord, ordered: bool) -> Vec<Visit> {
    if ordered {
        r.visits.clone()
    } else {
        r.visit_multiset()
    }
}

/// Claims membership for every known record matched by some synthetic
/// record: the same multiset of visit code-sets, or with `ordered` the same
/// visit sequence.
pub fn presence_disclosure(
    synthetic: &Cohort,
    known: &[(PatientRecord, bool)],
    prior: f64,
    ordered: bool,
) -> Result<AttackOutcome> {
    if known.is_empty() {
        return Err(EvaError::invalid("no known records to attack"));
    }
    if !(0.0..=1.0).contains(&prior) {
        return Err(EvaError::invalid("prior must lie in [0, 1]"));
    }
    let synth: HashSet<Vec<Visit>> = synthetic.records.iter().map(|r| signature(r, ordered)).collect();
    let mut c = ConfusionCounts::default();
    for (r, member) in known {
        match (synth.contains(&signature(r, ordered)), *member) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    Ok(AttackOutcome {
        sensitivity: ratio(c.tp, c.fn_),
        precision: ratio(c.tp, c.fp),
        counts: c,
        prior,
        ordered,
    })
}
