//! Ground-truth toy corpus.
//!
//! Patients walk a Markov chain over code groups. Each modelled condition
//! owns one group and a transition matrix that pulls the chain towards it;
//! patients with several conditions use the average of their matrices, and
//! patients with none use the background matrix. Every visit emits one of a
//! fixed catalogue of code-sets for the current group, occasionally with one
//! extra random code so that rare visits exist for the vocabulary step.
//!
//! Because the chain and emissions are explicit, expected unigram and
//! bigram statistics follow in closed form ([`GroundTruth`]).

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Cohort, PatientRecord, Visit, BACKGROUND};
use crate::error::{EvaError, Result};
use crate::rng::{derive_seed, rng_from_seed, sample_categorical};

const RECORD_STREAM: u64 = 0x51;
const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub n_records: usize,
    pub n_conditions: usize,
    pub n_general_groups: usize,
    pub codes_per_group: usize,
    pub visit_types_per_group: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Independent per-condition probability that a patient has it.
    pub condition_prevalence: f64,
    /// Self-transition probability of every group.
    pub persistence: f64,
    /// Probability mass every row moves onto a condition's own group.
    pub condition_pull: f64,
    /// Total background mass flowing into condition groups per step.
    pub background_leak: f64,
    /// Probability that a visit gains one extra random code.
    pub noise_code_prob: f64,
    /// Seed for the transition matrices and visit catalogue.
    pub structure_seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            n_records: 2000,
            n_conditions: 4,
            n_general_groups: 8,
            codes_per_group: 5,
            visit_types_per_group: 8,
            min_len: 3,
            max_len: 20,
            condition_prevalence: 0.15,
            persistence: 0.5,
            condition_pull: 0.35,
            background_leak: 0.02,
            noise_code_prob: 0.03,
            structure_seed: 7,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EvaError::Config(format!("simulator: {m}")));
        if self.n_general_groups == 0 {
            return bad("n_general_groups must be at least 1");
        }
        if self.codes_per_group == 0 || self.visit_types_per_group == 0 {
            return bad("codes_per_group and visit_types_per_group must be positive");
        }
        let max_types = (1..=3.min(self.codes_per_group))
            .map(|k| binomial(self.codes_per_group, k))
            .sum::<usize>();
        if self.visit_types_per_group > max_types {
            return bad("visit_types_per_group exceeds distinct code-sets of size 1..=3");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        for (name, p) in [
            ("condition_prevalence", self.condition_prevalence),
            ("persistence", self.persistence),
            ("condition_pull", self.condition_pull),
            ("background_leak", self.background_leak),
            ("noise_code_prob", self.noise_code_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.persistence + self.background_leak > 1.0 {
            return bad("persistence + background_leak must not exceed 1");
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Explicit generative structure of the toy corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovStructure {
    pub condition_names: Vec<String>,
    pub group_codes: Vec<Vec<String>>,
    /// Per group: catalogue of visits and their emission probabilities.
    pub emissions: Vec<Vec<(Visit, f64)>>,
    pub background: Vec<Vec<f64>>,
    pub background_initial: Vec<f64>,
    /// One transition matrix per modelled condition (background excluded).
    pub conditions: Vec<Vec<Vec<f64>>>,
    pub condition_initial: Vec<Vec<f64>>,
}

impl MarkovStructure {
    pub fn generate(config: &SimulatorConfig) -> Result<Self> {
        config.validate()?;
        let k = config.n_conditions;
        let g = k + config.n_general_groups;
        let mut rng = rng_from_seed(config.structure_seed);

        let group_codes: Vec<Vec<String>> = (0..g)
            .map(|grp| {
                (0..config.codes_per_group)
                    .map(|c| {
                        if grp < k {
                            format!("K{grp}_{c}")
                        } else {
                            format!("G{}_{c}", grp - k)
                        }
                    })
                    .collect()
            })
            .collect();

        let emissions = group_codes
            .iter()
            .map(|codes| {
                let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
                let max_size = 3.min(codes.len());
                while seen.len() < config.visit_types_per_group {
                    let size = 1 + rng.random_range(0..max_size);
                    let mut pick: Vec<usize> = Vec::new();
                    while pick.len() < size {
                        let c = rng.random_range(0..codes.len());
                        if !pick.contains(&c) {
                            pick.push(c);
                        }
                    }
                    pick.sort_unstable();
                    seen.insert(pick);
                }
                // shuffle catalogue order deterministically, then Zipf weights
                let mut types: Vec<Vec<usize>> = seen.into_iter().collect();
                for i in (1..types.len()).rev() {
                    let j = rng.random_range(0..=i);
                    types.swap(i, j);
                }
                let z: f64 = (0..types.len()).map(|r| 1.0 / (r as f64 + 1.0)).sum();
                types
                    .into_iter()
                    .enumerate()
                    .map(|(r, t)| {
                        let v = Visit::new(t.iter().map(|&c| codes[c].clone()))
                            .expect("catalogue visits are non-empty");
                        (v, 1.0 / (r as f64 + 1.0) / z)
                    })
                    .collect()
            })
            .collect();

        // background chain: sticky, mostly over general groups
        let general_weights: Vec<Vec<f64>> = (0..g)
            .map(|_| {
                (0..config.n_general_groups)
                    .map(|_| 0.2 + rng.random::<f64>())
                    .collect()
            })
            .collect();
        let mut background = vec![vec![0.0; g]; g];
        for (i, row) in background.iter_mut().enumerate() {
            let w = &general_weights[i];
            let wsum: f64 = w.iter().sum();
            let leak = if k > 0 { config.background_leak } else { 0.0 };
            let spread = 1.0 - config.persistence - leak;
            for (j, wj) in w.iter().enumerate() {
                row[k + j] += spread * wj / wsum;
            }
            for c in 0..k {
                row[c] += leak / k as f64;
            }
            row[i] += config.persistence;
        }
        let mut background_initial = vec![0.0; g];
        for j in 0..config.n_general_groups {
            background_initial[k + j] = 1.0 / config.n_general_groups as f64;
        }

        let pull = config.condition_pull;
        let conditions = (0..k)
            .map(|c| {
                background
                    .iter()
                    .map(|row| {
                        let mut r: Vec<f64> = row.iter().map(|p| p * (1.0 - pull)).collect();
                        r[c] += pull;
                        r
                    })
                    .collect()
            })
            .collect();
        let condition_initial = (0..k)
            .map(|c| {
                let mut r: Vec<f64> = background_initial.iter().map(|p| p * (1.0 - pull)).collect();
                r[c] += pull;
                r
            })
            .collect();

        let mut condition_names: Vec<String> = (0..k).map(|c| format!("cond{c}")).collect();
        condition_names.push(BACKGROUND.to_owned());

        let s = Self {
            condition_names,
            group_codes,
            emissions,
            background,
            background_initial,
            conditions,
            condition_initial,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n_groups(&self) -> usize {
        self.group_codes.len()
    }

    pub fn n_conditions(&self) -> usize {
        self.conditions.len()
    }

    /// Codes owned by modelled condition `k`.
    pub fn condition_codes(&self, k: usize) -> &[String] {
        &self.group_codes[k]
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.n_groups();
        let check = |name: &str, row_idx: usize, row: &[f64], width: Option<usize>| -> Result<()> {
            let sum: f64 = row.iter().sum();
            if width.is_some_and(|w| row.len() != w) {
                return Err(EvaError::Config(format!("{name} row {row_idx} has {} entries, expected {g}", row.len())));
            }
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(EvaError::InvalidStochasticMatrix {
                    name: name.to_owned(),
                    row: row_idx,
                    sum,
                });
            }
            Ok(())
        };
        let check_row = |name: &str, row_idx: usize, row: &[f64]| check(name, row_idx, row, Some(g));
        if self.background.len() != g || self.emissions.len() != g {
            return Err(EvaError::Config("structure has inconsistent group counts".into()));
        }
        for (i, row) in self.background.iter().enumerate() {
            check_row("background", i, row)?;
        }
        check_row("background_initial", 0, &self.background_initial)?;
        if self.condition_initial.len() != self.conditions.len()
            || self.condition_names.len() != self.conditions.len() + 1
        {
            return Err(EvaError::Config("structure has inconsistent condition counts".into()));
        }
        for (c, m) in self.conditions.iter().enumerate() {
            if m.len() != g {
                return Err(EvaError::Config(format!("condition {c} matrix has {} rows", m.len())));
            }
            for (i, row) in m.iter().enumerate() {
                check_row(&format!("condition {c}"), i, row)?;
            }
            check_row(&format!("condition {c} initial"), 0, &self.condition_initial[c])?;
        }
        for (grp, e) in self.emissions.iter().enumerate() {
            let probs: Vec<f64> = e.iter().map(|(_, p)| *p).collect();
            check(&format!("emission {grp}"), 0, &probs, None)?;
        }
        Ok(())
    }

    /// Transition matrix and initial distribution for a condition pattern
    /// (modelled conditions only; all-false means background).
    pub fn chain_for(&self, active: &[bool]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let on: Vec<usize> = active.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i).collect();
        if on.is_empty() {
            return (self.background.clone(), self.background_initial.clone());
        }
        let g = self.n_groups();
        let w = 1.0 / on.len() as f64;
        let mut m = vec![vec![0.0; g]; g];
        let mut init = vec![0.0; g];
        for &c in &on {
            for i in 0..g {
                for j in 0..g {
                    m[i][j] += w * self.conditions[c][i][j];
                }
                init[i] += w * self.condition_initial[c][i];
            }
        }
        (m, init)
    }

    /// Draws a cohort. Records are sampled from independent per-record
    /// streams, so record `i` depends only on `(seed, i)`.
    pub fn sample_cohort(&self, config: &SimulatorConfig, seed: u64) -> Result<Cohort> {
        self.validate()?;
        config.validate()?;
        let k = self.n_conditions();
        let all_codes: Vec<&String> = self.group_codes.iter().flatten().collect();
        let mut records = Vec::with_capacity(config.n_records);
        for i in 0..config.n_records {
            let mut rng = rng_from_seed(derive_seed(seed, RECORD_STREAM, i as u64));
            let active: Vec<bool> = (0..k)
                .map(|_| rng.random::<f64>() < config.condition_prevalence)
                .collect();
            let (trans, init) = self.chain_for(&active);
            let len = rng.random_range(config.min_len..=config.max_len);
            let mut state = sample_categorical(&mut rng, &init);
            let mut visits = Vec::with_capacity(len);
            for t in 0..len {
                if t > 0 {
                    state = sample_categorical(&mut rng, &trans[state]);
                }
                let cat = &self.emissions[state];
                let probs: Vec<f64> = cat.iter().map(|(_, p)| *p).collect();
                let mut v = cat[sample_categorical(&mut rng, &probs)].0.clone();
                if rng.random::<f64>() < config.noise_code_prob {
                    let extra = all_codes[rng.random_range(0..all_codes.len())];
                    let mut codes: Vec<String> = v.codes().map(str::to_owned).collect();
                    codes.push(extra.clone());
                    v = Visit::new(codes)?;
                }
                visits.push(v);
            }
            let mut conditions = active.clone();
            conditions.push(!active.iter().any(|&a| a));
            records.push(PatientRecord {
                id: format!("s{seed:x}-{i:05}"),
                visits,
                conditions,
            });
        }
        Cohort::new(records, self.condition_names.clone())
    }

    /// Closed-form expected statistics of cohorts drawn with `config`.
    pub fn ground_truth(&self, config: &SimulatorConfig) -> GroundTruth {
        let g = self.n_groups();
        let k = self.n_conditions();
        let p = config.condition_prevalence;
        let n_len = (config.max_len - config.min_len + 1) as f64;
        // P(T >= t) for t = 1..=max_len
        let survival: Vec<f64> = (1..=config.max_len)
            .map(|t| {
                if t <= config.min_len {
                    1.0
                } else {
                    (config.max_len - t + 1) as f64 / n_len
                }
            })
            .collect();

        let mut uni = vec![0.0; g];
        let mut bi = vec![vec![0.0; g]; g];
        for pattern in 0..(1usize << k) {
            let active: Vec<bool> = (0..k).map(|c| pattern >> c & 1 == 1).collect();
            let on = active.iter().filter(|&&a| a).count();
            let weight = p.powi(on as i32) * (1.0 - p).powi((k - on) as i32);
            if weight == 0.0 {
                continue;
            }
            let (trans, init) = self.chain_for(&active);
            let mut marginal = init;
            for t in 1..=config.max_len {
                let s_t = survival[t - 1];
                for j in 0..g {
                    uni[j] += weight * s_t * marginal[j];
                }
                let s_next = if t < config.max_len { survival[t] } else { 0.0 };
                let mut next = vec![0.0; g];
                for i in 0..g {
                    for j in 0..g {
                        let flow = marginal[i] * trans[i][j];
                        bi[i][j] += weight * s_next * flow;
                        next[j] += flow;
                    }
                }
                marginal = next;
            }
        }
        let ut: f64 = uni.iter().sum();
        let bt: f64 = bi.iter().flatten().sum();
        let group_unigram: Vec<f64> = uni.iter().map(|x| x / ut).collect();
        let group_bigram: Vec<Vec<f64>> = bi.iter().map(|r| r.iter().map(|x| x / bt).collect()).collect();

        let mut visit_unigram = HashMap::new();
        let mut visit_bigram = HashMap::new();
        for a in 0..g {
            for (va, pa) in &self.emissions[a] {
                *visit_unigram.entry(va.key()).or_insert(0.0) += group_unigram[a] * pa;
                for b in 0..g {
                    if group_bigram[a][b] == 0.0 {
                        continue;
                    }
                    for (vb, pb) in &self.emissions[b] {
                        *visit_bigram.entry((va.key(), vb.key())).or_insert(0.0) +=
                            group_bigram[a][b] * pa * pb;
                    }
                }
            }
        }
        GroundTruth {
            group_unigram,
            group_bigram,
            visit_unigram,
            visit_bigram,
        }
    }
}

/// Expected relative frequencies implied by a [`MarkovStructure`], ignoring
/// the extra-code noise.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub group_unigram: Vec<f64>,
    pub group_bigram: Vec<Vec<f64>>,
    pub visit_unigram: HashMap<String, f64>,
    pub visit_bigram: HashMap<(String, String), f64>,
}

/// Generates the structure from `config.structure_seed` and draws
/// `config.n_records` patients with `seed`.
pub fn simulate_toy_cohort(config: &SimulatorConfig, seed: u64) -> Result<Cohort> {
    MarkovStructure::generate(config)?.sample_cohort(config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimulatorConfig {
        SimulatorConfig {
            n_records: 300,
            ..Default::default()
        }
    }

    #[test]
    fn identical_seeds_identical_cohorts() {
        let a = simulate_toy_cohort(&small(), 11).unwrap();
        let b = simulate_toy_cohort(&small(), 11).unwrap();
        assert_eq!(a, b);
        let c = simulate_toy_cohort(&small(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_record_respects_length_bounds() {
        let cfg = SimulatorConfig {
            n_records: 1,
            ..Default::default()
        };
        let c = simulate_toy_cohort(&cfg, 3).unwrap();
        assert_eq!(c.len(), 1);
        let n = c.records[0].visits.len();
        assert!((cfg.min_len..=cfg.max_len).contains(&n));
    }

    #[test]
    fn condition_flags_match_generating_pattern() {
        let c = simulate_toy_cohort(&small(), 5).unwrap();
        assert_eq!(c.condition_names.last().unwrap(), BACKGROUND);
        for r in &c.records {
            let any = r.conditions[..4].iter().any(|&x| x);
            assert_eq!(r.conditions[4], !any);
        }
        // condition holders visit their own group far more often
        let s = MarkovStructure::generate(&small()).unwrap();
        let codes: BTreeSet<&String> = s.condition_codes(0).iter().collect();
        let rate = |with: bool| {
            let (mut hit, mut tot) = (0usize, 0usize);
            for r in c.records.iter().filter(|r| r.conditions[0] == with) {
                for v in &r.visits {
                    tot += 1;
                    hit += v.codes().any(|x| codes.contains(&x.to_owned())) as usize;
                }
            }
            hit as f64 / tot as f64
        };
        assert!(rate(true) > 3.0 * rate(false));
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let mut s = MarkovStructure::generate(&small()).unwrap();
        s.background[2][0] += 1e-6;
        match s.sample_cohort(&small(), 1) {
            Err(EvaError::InvalidStochasticMatrix { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let mut s = MarkovStructure::generate(&small()).unwrap();
        s.conditions[1][0][3] += 1e-12;
        assert!(s.validate().is_ok(), "within 1e-9 tolerance");
    }

    #[test]
    fn empirical_statistics_match_closed_form() {
        let cfg = SimulatorConfig {
            n_records: 20_000,
            noise_code_prob: 0.0,
            ..Default::default()
        };
        let s = MarkovStructure::generate(&cfg).unwrap();
        let truth = s.ground_truth(&cfg);
        assert!((truth.visit_unigram.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((truth.visit_bigram.values().sum::<f64>() - 1.0).abs() < 1e-9);

        let c = s.sample_cohort(&cfg, 99).unwrap();
        let mut uni: HashMap<String, f64> = HashMap::new();
        let mut bi: HashMap<(String, String), f64> = HashMap::new();
        let (mut nu, mut nb) = (0.0, 0.0);
        for r in &c.records {
            for (t, v) in r.visits.iter().enumerate() {
                *uni.entry(v.key()).or_default() += 1.0;
                nu += 1.0;
                if t + 1 < r.visits.len() {
                    *bi.entry((v.key(), r.visits[t + 1].key())).or_default() += 1.0;
                    nb += 1.0;
                }
            }
        }
        let max_uni = truth
            .visit_unigram
            .iter()
            .map(|(k, p)| (uni.get(k).copied().unwrap_or(0.0) / nu - p).abs())
            .fold(0.0, f64::max);
        assert!(max_uni < 2e-3, "unigram deviation {max_uni}");
        let max_bi = truth
            .visit_bigram
            .iter()
            .map(|(k, p)| (bi.get(k).copied().unwrap_or(0.0) / nb - p).abs())
            .fold(0.0, f64::max);
        assert!(max_bi < 1e-3, "bigram deviation {max_bi}");
    }
}
