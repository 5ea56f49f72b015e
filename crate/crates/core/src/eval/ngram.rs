//! Marginal n-gram statistics over visits and their correlation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Cohort, PatientRecord, Visit};
use crate::error::{EvaError, Result};
use crate::rng::rng_from_seed;

/// Relative frequencies of visit n-grams, keyed by the canonical visit keys
/// of the n consecutive visits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NgramStats {
    pub n: usize,
    pub total: usize,
    pub freqs: BTreeMap<Vec<String>, f64>,
}

impl NgramStats {
    pub fn get(&self, key: &[String]) -> f64 {
        self.freqs.get(key).copied().unwrap_or(0.0)
    }
}

/// Unigram (`n = 1`) or consecutive-visit bigram (`n = 2`) frequencies.
pub fn ngram_stats(cohort: &Cohort, n: usize) -> Result<NgramStats> {
    if !(1..=2).contains(&n) {
        return Err(EvaError::invalid("n-gram order must be 1 or 2"));
    }
    let mut counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let mut total = 0;
    for r in &cohort.records {
        let keys: Vec<String> = r.visits.iter().map(|v| v.key()).collect();
        for w in keys.windows(n) {
            *counts.entry(w.to_vec()).or_default() += 1;
            total += 1;
        }
    }
    let freqs = counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / total.max(1) as f64))
        .collect();
    Ok(NgramStats { n, total, freqs })
}

/// Pearson correlation of two frequency maps over the union of their keys,
/// with absent keys counted as zero.
pub fn pearson_marginal(a: &NgramStats, b: &NgramStats) -> Result<f64> {
    let keys: BTreeSet<&Vec<String>> = a.freqs.keys().chain(b.freqs.keys()).collect();
    if keys.len() < 2 {
        return Err(EvaError::invalid("correlation needs at least two distinct n-grams"));
    }
    let x: Vec<f64> = keys.iter().map(|k| a.get(k)).collect();
    let y: Vec<f64> = keys.iter().map(|k| b.get(k)).collect();
    pearson(&x, &y)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(EvaError::invalid("correlation needs two equal-length series of length >= 2"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvaError::invalid("correlation undefined for a constant series"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Baseline sampler: record lengths drawn from the empirical length
/// distribution of `reference` and every visit drawn independently from its
/// visit unigram frequencies.
pub fn independent_unigram_cohort(reference: &Cohort, count: usize, seed: u64) -> Result<Cohort> {
    use rand::Rng;
    if reference.is_empty() {
        return Err(EvaError::EmptyCorpus);
    }
    let pool: Vec<&Visit> = reference.records.iter().flat_map(|r| r.visits.iter()).collect();
    let mut rng = rng_from_seed(seed);
    let records = (0..count)
        .map(|i| {
            let len = reference.records[rng.random_range(0..reference.len())].visits.len();
            PatientRecord {
                id: format!("u{seed:x}-{i:06}"),
                visits: (0..len).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect(),
                conditions: Vec::new(),
            }
        })
        .collect();
    Cohort::new(records, Vec::new())
}

/// Writes `ngram<TAB>freq_real<TAB>freq_synth` rows for external plotting.
pub fn write_scatter(path: &Path, real: &NgramStats, synth: &NgramStats) -> Result<()> {
    let keys: BTreeSet<&Vec<String>> = real.freqs.keys().chain(synth.freqs.keys()).collect();
    let io = |e| EvaError::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "ngram\tfreq_real\tfreq_synth").map_err(io)?;
    for k in keys {
        writeln!(w, "{}\t{}\t{}", k.join(" > "), real.get(k), synth.get(k)).map_err(io)?;
    }
    w.flush().map_err(io)
}
