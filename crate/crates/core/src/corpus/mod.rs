//! Patient records, visit vocabularies and the toy-corpus simulator.

mod io;
mod simulator;
mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{EvaError, Result};

pub use io::{read_cohort, read_vocab, write_cohort, write_encoded, write_vocab, write_vocab_with, CohortHeader};
pub use simulator::{simulate_toy_cohort, GroundTruth, MarkovStructure, SimulatorConfig};
pub use vocab::{build_visit_vocab, decode_tokens, encode_cohort, replace_rare_visits, EncodedCohort, EncodedSequence, VisitVocab, VocabEntry};

/// Name of the condition coordinate that stands for "none of the modelled
/// conditions".
pub const BACKGROUND: &str = "background";

/// A single encounter: a non-empty set of clinical code identifiers.
///
/// Codes are kept sorted, so the derived ordering is the lexicographic
/// order of the sorted code lists.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Visit(BTreeSet<String>);

impl Visit {
    pub fn new<I, S>(codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = BTreeSet::new();
        for c in codes {
            let c = c.into();
            if c.is_empty() {
                return Err(EvaError::invalid("empty code identifier"));
            }
            set.insert(c);
        }
        if set.is_empty() {
            return Err(EvaError::invalid("a visit needs at least one code"));
        }
        Ok(Visit(set))
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn code_set(&self) -> &BTreeSet<String> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.0.contains(code)
    }

    pub fn intersection_size(&self, other: &Visit) -> usize {
        self.0.intersection(&other.0).count()
    }

    pub fn jaccard(&self, other: &Visit) -> f64 {
        let inter = self.intersection_size(other);
        let union = self.len() + other.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Canonical string form, `code|code|...`, used as an n-gram key.
    pub fn key(&self) -> String {
        self.0.iter().cloned().collect::<Vec<_>>().join("|")
    }
}

/// One patient: an ordered, non-empty visit sequence plus a binary
/// condition indicator aligned with the owning cohort's condition names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub id: String,
    pub visits: Vec<Visit>,
    pub conditions: Vec<bool>,
}

impl PatientRecord {
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn condition_vector(&self) -> Vec<f64> {
        self.conditions.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }

    /// Visits sorted, for order-insensitive comparison.
    pub fn visit_multiset(&self) -> Vec<Visit> {
        let mut v = self.visits.clone();
        v.sort();
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub vocab: Option<VisitVocab>,
    pub condition_names: Vec<String>,
}

impl Cohort {
    pub fn new(records: Vec<PatientRecord>, condition_names: Vec<String>) -> Result<Self> {
        let cohort = Self {
            records,
            vocab: None,
            condition_names,
        };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_conditions(&self) -> usize {
        self.condition_names.len()
    }

    pub fn condition_index(&self, name: &str) -> Option<usize> {
        self.condition_names.iter().position(|n| n == name)
    }

    pub fn background_index(&self) -> Option<usize> {
        self.condition_index(BACKGROUND)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.condition_names.len();
        for r in &self.records {
            if r.visits.is_empty() {
                return Err(EvaError::invalid(format!("patient {} has no visits", r.id)));
            }
            if r.conditions.len() != k {
                return Err(EvaError::invalid(format!(
                    "patient {} has {} condition flags, cohort has {k} conditions",
                    r.id,
                    r.conditions.len()
                )));
            }
        }
        if let Some(vocab) = &self.vocab {
            for r in &self.records {
                for v in &r.visits {
                    if vocab.token_of(v).is_none() {
                        return Err(EvaError::OutOfVocab {
                            patient: r.id.clone(),
                            visit: v.codes().map(str::to_owned).collect(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Splits into `(first, rest)` where `first` holds `fraction` of the
    /// records chosen by a seeded shuffle.
    pub fn split(&self, fraction: f64, seed: u64) -> (Cohort, Cohort) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        idx.shuffle(&mut crate::rng::rng_from_seed(seed));
        let cut = ((self.records.len() as f64) * fraction).round() as usize;
        let pick = |ids: &[usize]| Cohort {
            records: ids.iter().map(|&i| self.records[i].clone()).collect(),
            vocab: self.vocab.clone(),
            condition_names: self.condition_names.clone(),
        };
        (pick(&idx[..cut]), pick(&idx[cut..]))
    }
}

#[cfg(test)]
pub(crate) fn visit(codes: &[&str]) -> Visit {
    Visit::new(codes.iter().copied()).unwrap()
}
