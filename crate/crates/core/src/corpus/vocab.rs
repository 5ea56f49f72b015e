use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Cohort, PatientRecord, Visit};
use crate::error::{EvaError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub codes: Visit,
    pub frequency: usize,
}

/// Bidirectional map between frequent visit code-sets and dense token ids.
///
/// Data tokens occupy `0..len()`; `eos_id() == len()` and
/// `pad_id() == len() + 1`.
#[derive(Clone, Debug)]
pub struct VisitVocab {
    entries: Vec<VocabEntry>,
    index: HashMap<Visit, usize>,
}

impl PartialEq for VisitVocab {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl VisitVocab {
    /// Entries must already be in token-id order.
    pub fn from_entries(entries: Vec<VocabEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(EvaError::EmptyVocab);
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.codes.clone(), i).is_some() {
                return Err(EvaError::invalid(format!(
                    "duplicate vocabulary entry {}",
                    e.codes.key()
                )));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn eos_id(&self) -> usize {
        self.entries.len()
    }

    pub fn pad_id(&self) -> usize {
        self.entries.len() + 1
    }

    /// Size of the categorical the decoder predicts over: data tokens plus EOS.
    pub fn num_output_tokens(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn token_of(&self, visit: &Visit) -> Option<usize> {
        self.index.get(visit).copied()
    }

    pub fn visit_of(&self, token: usize) -> Option<&Visit> {
        self.entries.get(token).map(|e| &e.codes)
    }

    pub fn frequency(&self, token: usize) -> usize {
        self.entries[token].frequency
    }

    /// Best in-vocabulary stand-in for `visit`: largest intersection, then
    /// larger Jaccard similarity, then higher frequency, then the
    /// lexicographically smallest code list. Falls back to the most
    /// frequent entry when nothing intersects.
    pub fn best_match(&self, visit: &Visit) -> usize {
        if let Some(t) = self.token_of(visit) {
            return t;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for (t, e) in self.entries.iter().enumerate() {
            let inter = e.codes.intersection_size(visit);
            if inter == 0 {
                continue;
            }
            let jac = e.codes.jaccard(visit);
            let better = match best {
                None => true,
                Some((bt, bi, bj)) => {
                    let be = &self.entries[bt];
                    (inter, jac, e.frequency) > (bi, bj, be.frequency)
                        || (inter == bi
                            && jac == bj
                            && e.frequency == be.frequency
                            && e.codes < be.codes)
                }
            };
            if better {
                best = Some((t, inter, jac));
            }
        }
        match best {
            Some((t, _, _)) => t,
            None => self.most_frequent(),
        }
    }

    fn most_frequent(&self) -> usize {
        // entries are sorted by descending frequency when built from a corpus,
        // but a hand-assembled vocabulary need not be
        let mut best = 0;
        for (t, e) in self.entries.iter().enumerate() {
            let b = &self.entries[best];
            if e.frequency > b.frequency || (e.frequency == b.frequency && e.codes < b.codes) {
                best = t;
            }
        }
        best
    }
}

/// The `max_size` most frequent distinct visits, ties broken by the
/// lexicographic order of their sorted code lists.
pub fn build_visit_vocab(cohort: &Cohort, max_size: usize) -> Result<VisitVocab> {
    if cohort.records.is_empty() {
        return Err(EvaError::EmptyCorpus);
    }
    if max_size == 0 {
        return Err(EvaError::invalid("max_size must be at least 1"));
    }
    let mut counts: HashMap<&Visit, usize> = HashMap::new();
    for r in &cohort.records {
        for v in &r.visits {
            *counts.entry(v).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&Visit, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);
    VisitVocab::from_entries(
        ranked
            .into_iter()
            .map(|(v, f)| VocabEntry {
                codes: v.clone(),
                frequency: f,
            })
            .collect(),
    )
}

/// Maps every out-of-vocabulary visit onto its best in-vocabulary match and
/// attaches the vocabulary to the returned cohort.
pub fn replace_rare_visits(cohort: &Cohort, vocab: &VisitVocab) -> Result<Cohort> {
    if vocab.is_empty() {
        return Err(EvaError::EmptyVocab);
    }
    let mut memo: HashMap<&Visit, usize> = HashMap::new();
    let mut records = Vec::with_capacity(cohort.records.len());
    for r in &cohort.records {
        let visits = r
            .visits
            .iter()
            .map(|v| {
                let t = *memo.entry(v).or_insert_with(|| vocab.best_match(v));
                vocab.entries[t].codes.clone()
            })
            .collect();
        records.push(PatientRecord {
            id: r.id.clone(),
            visits,
            conditions: r.conditions.clone(),
        });
    }
    Ok(Cohort {
        records,
        vocab: Some(vocab.clone()),
        condition_names: cohort.condition_names.clone(),
    })
}

/// One record as a fixed-length token row: `[x_1 .. x_T, EOS, PAD ..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub conditions: Vec<f64>,
}

impl EncodedSequence {
    /// Real steps including the final EOS.
    pub fn targets(&self) -> &[usize] {
        let n = self.mask.iter().filter(|&&m| m).count();
        &self.tokens[..n]
    }

    /// Visit tokens only (EOS excluded).
    pub fn body(&self) -> &[usize] {
        let t = self.targets();
        &t[..t.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCohort {
    pub t_max: usize,
    pub eos: usize,
    pub pad: usize,
    pub num_output_tokens: usize,
    pub sequences: Vec<EncodedSequence>,
}

impl EncodedCohort {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Tokenises a fully in-vocabulary cohort. Records longer than `t_max`
/// keep their first `t_max` visits; every row ends in EOS and is padded to
/// `t_max + 1`.
pub fn encode_cohort(cohort: &Cohort, vocab: &VisitVocab, t_max: usize) -> Result<EncodedCohort> {
    if t_max == 0 {
        return Err(EvaError::invalid("t_max must be at least 1"));
    }
    let mut sequences = Vec::with_capacity(cohort.records.len());
    for r in &cohort.records {
        let mut tokens = Vec::with_capacity(t_max + 1);
        for v in r.visits.iter().take(t_max) {
            let t = vocab.token_of(v).ok_or_else(|| EvaError::OutOfVocab {
                patient: r.id.clone(),
                visit: v.codes().map(str::to_owned).collect(),
            })?;
            tokens.push(t);
        }
        tokens.push(vocab.eos_id());
        let real = tokens.len();
        tokens.resize(t_max + 1, vocab.pad_id());
        let mask = (0..t_max + 1).map(|i| i < real).collect();
        sequences.push(EncodedSequence {
            tokens,
            mask,
            conditions: r.condition_vector(),
        });
    }
    Ok(EncodedCohort {
        t_max,
        eos: vocab.eos_id(),
        pad: vocab.pad_id(),
        num_output_tokens: vocab.num_output_tokens(),
        sequences,
    })
}

/// Maps visit tokens back to code-sets, stopping at the first EOS or PAD.
pub fn decode_tokens(tokens: &[usize], vocab: &VisitVocab) -> Result<Vec<Visit>> {
    let mut visits = Vec::new();
    for &t in tokens {
        if t == vocab.eos_id() || t == vocab.pad_id() {
            break;
        }
        let v = vocab.visit_of(t).ok_or(EvaError::TokenOutOfRange {
            token: t,
            size: vocab.len(),
        })?;
        visits.push(v.clone());
    }
    Ok(visits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::visit;
    use proptest::prelude::*;

    fn cohort_of(records: Vec<Vec<Visit>>) -> Cohort {
        Cohort {
            records: records
                .into_iter()
                .enumerate()
                .map(|(i, visits)| PatientRecord {
                    id: format!("p{i}"),
                    visits,
                    conditions: vec![true],
                })
                .collect(),
            vocab: None,
            condition_names: vec!["background".into()],
        }
    }

    fn ab_cohort() -> Cohort {
        let ab = visit(&["a", "b"]);
        let a = visit(&["a"]);
        let bc = visit(&["b", "c"]);
        cohort_of(vec![
            vec![ab.clone(), a.clone(), ab.clone()],
            vec![ab, a, bc],
        ])
    }

    #[test]
    fn vocab_orders_by_frequency() {
        let v = build_visit_vocab(&ab_cohort(), 2).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.visit_of(0), Some(&visit(&["a", "b"])));
        assert_eq!(v.visit_of(1), Some(&visit(&["a"])));
        assert_eq!(v.eos_id(), 2);
        assert_eq!(v.pad_id(), 3);
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let c = cohort_of(vec![vec![visit(&["b"]), visit(&["a"]), visit(&["b"]), visit(&["a"])]]);
        let v = build_visit_vocab(&c, 1).unwrap();
        assert_eq!(v.visit_of(0), Some(&visit(&["a"])));
    }

    #[test]
    fn vocab_errors() {
        let empty = cohort_of(vec![]);
        assert!(matches!(build_visit_vocab(&empty, 3), Err(EvaError::EmptyCorpus)));
        assert!(build_visit_vocab(&ab_cohort(), 0).is_err());
        assert!(matches!(VisitVocab::from_entries(vec![]), Err(EvaError::EmptyVocab)));
    }

    #[test]
    fn replacement_rules() {
        let v = build_visit_vocab(&ab_cohort(), 2).unwrap();
        assert_eq!(v.best_match(&visit(&["b", "c"])), 0);
        assert_eq!(v.best_match(&visit(&["a", "b", "c"])), 0);
        // zero intersection falls back to the most frequent entry
        assert_eq!(v.best_match(&visit(&["x", "y"])), 0);
        // intersection 1 with both; {a} has the larger Jaccard
        assert_eq!(v.best_match(&visit(&["a", "z"])), 1);
    }

    #[test]
    fn replacement_prefers_frequency_then_lexicographic() {
        let vocab = VisitVocab::from_entries(vec![
            VocabEntry { codes: visit(&["a", "q"]), frequency: 1 },
            VocabEntry { codes: visit(&["a", "r"]), frequency: 5 },
            VocabEntry { codes: visit(&["a", "p"]), frequency: 5 },
        ])
        .unwrap();
        // all three share one code with equal Jaccard
        assert_eq!(vocab.best_match(&visit(&["a", "z"])), 2);
    }

    #[test]
    fn replacement_covers_everything_and_is_idempotent() {
        let c = ab_cohort();
        let v = build_visit_vocab(&c, 2).unwrap();
        let once = replace_rare_visits(&c, &v).unwrap();
        once.validate().unwrap();
        let twice = replace_rare_visits(&once, &v).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.records[1].visits[2], visit(&["a", "b"]));
    }

    #[test]
    fn encode_pads_and_terminates() {
        let c = cohort_of(vec![vec![visit(&["a", "b"]), visit(&["a"])]]);
        let v = build_visit_vocab(&c, 5).unwrap();
        let enc = encode_cohort(&c, &v, 4).unwrap();
        let s = &enc.sequences[0];
        // equal frequency: {a} sorts before {a, b}
        assert_eq!(s.tokens, vec![1, 0, 2, 3, 3]);
        assert_eq!(s.mask, vec![true, true, true, false, false]);
        assert_eq!(s.body(), &[1, 0]);
    }

    #[test]
    fn encode_truncates_long_records_and_names_oov_patient() {
        let c = cohort_of(vec![vec![visit(&["a"]); 6]]);
        let v = build_visit_vocab(&c, 5).unwrap();
        let enc = encode_cohort(&c, &v, 3).unwrap();
        assert_eq!(enc.sequences[0].tokens, vec![0, 0, 0, 1]);

        let other = cohort_of(vec![vec![visit(&["zz"])]]);
        match encode_cohort(&other, &v, 3) {
            Err(EvaError::OutOfVocab { patient, .. }) => assert_eq!(patient, "p0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            raw in prop::collection::vec(prop::collection::vec(0usize..6, 1..8), 1..6),
            t_max in 1usize..10,
        ) {
            let alphabet = ["a", "b", "c", "d", "e", "f"];
            let records: Vec<Vec<Visit>> = raw.iter()
                .map(|r| r.iter().map(|&i| visit(&[alphabet[i], alphabet[(i + 1) % 6]])).collect())
                .collect();
            let c = cohort_of(records);
            let v = build_visit_vocab(&c, 100).unwrap();
            let enc = encode_cohort(&c, &v, t_max).unwrap();
            for (rec, seq) in c.records.iter().zip(&enc.sequences) {
                let decoded = decode_tokens(&seq.tokens, &v).unwrap();
                if rec.visits.len() <= t_max {
                    prop_assert_eq!(&decoded, &rec.visits);
                } else {
                    prop_assert_eq!(&decoded[..], &rec.visits[..t_max]);
                }
            }
        }

        #[test]
        fn vocab_is_deterministic_under_record_permutation(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut c = ab_cohort();
            let v1 = build_visit_vocab(&c, 2).unwrap();
            c.records.shuffle(&mut crate::rng::rng_from_seed(seed));
            let v2 = build_visit_vocab(&c, 2).unwrap();
            prop_assert_eq!(v1, v2);
        }
    }
}
