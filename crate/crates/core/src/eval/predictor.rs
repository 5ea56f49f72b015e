//! Next-visit code prediction as a downstream utility measure.
//!
//! An LSTM reads the multi-hot code vectors of visits `1..t` and scores
//! every code for visit `t + 1`; it is trained with a softmax cross-entropy
//! against the normalised multi-hot target.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{Cohort, PatientRecord, Visit};
use crate::encoders::LstmCell;
use crate::error::{EvaError, Result};
use crate::params::{bind, init_weight, ParamGroup};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use crate::trainer::{clip_global_norm, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 8,
            batch_size: 16,
            learning_rate: 5e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextVisitPredictor {
    /// Code universe, sorted; column `i` of the scores is `codes[i]`.
    pub codes: Vec<String>,
    pub lstm: LstmCell,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl ParamGroup for NextVisitPredictor {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.lstm.w_x, &self.lstm.w_h, &self.lstm.b, &self.out_w, &self.out_b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.lstm.w_x, &mut self.lstm.w_h, &mut self.lstm.b, &mut self.out_w, &mut self.out_b]
    }

    fn names(&self) -> Vec<String> {
        ["lstm.w_x", "lstm.w_h", "lstm.b", "out_w", "out_b"].map(String::from).to_vec()
    }
}

impl NextVisitPredictor {
    fn index(&self) -> BTreeMap<&str, usize> {
        self.codes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect()
    }

    fn multi_hot(index: &BTreeMap<&str, usize>, visits: &[Visit]) -> Tensor {
        let mut x = Tensor::zeros(visits.len(), index.len());
        for (t, v) in visits.iter().enumerate() {
            for c in v.codes() {
                if let Some(&i) = index.get(c) {
                    x.set(t, i, 1.0);
                }
            }
        }
        x
    }

    /// Mean next-visit cross-entropy of one record; gradients go to `grads`.
    fn record_loss(&self, index: &BTreeMap<&str, usize>, r: &PatientRecord, grads: Option<&mut [Tensor]>) -> f64 {
        let steps = r.visits.len() - 1;
        let x = Self::multi_hot(index, &r.visits[..steps]);
        let mut targets = Self::multi_hot(index, &r.visits[1..]);
        for t in 0..steps {
            let n: f64 = targets.row(t).iter().sum();
            if n > 0.0 {
                targets.row_mut(t).iter_mut().for_each(|v| *v /= n);
            }
        }
        let mut tape = Tape::new();
        let p = bind(self, &mut tape, grads.as_ref().map(|_| 0));
        let xv = tape.constant(x);
        let xw = tape.matmul(xv, p[0]);
        let hs = self.lstm.run_states(&mut tape, xw, p[1], p[2], 0..steps);
        let h = tape.concat_cols(&hs);
        let h = tape.reshape(h, steps, self.lstm.w_h.rows());
        let logits = tape.matmul(h, p[3]);
        let logits = tape.add_row(logits, p[4]);
        let ll = tape.log_softmax_dot(logits, targets);
        let loss = tape.scale(ll, -1.0 / steps as f64);
        if let Some(g) = grads {
            tape.backward(loss, g);
        }
        tape.scalar(loss)
    }

    /// Code scores for the visit following `history`.
    pub fn scores(&self, history: &[Visit]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(EvaError::invalid("prediction needs at least one visit"));
        }
        let index = self.index();
        let mut tape = Tape::new();
        let p = bind(self, &mut tape, None);
        let xv = tape.constant(Self::multi_hot(&index, history));
        let xw = tape.matmul(xv, p[0]);
        let h = *self.lstm.run_states(&mut tape, xw, p[1], p[2], 0..history.len()).last().expect("non-empty");
        let logits = tape.matmul(h, p[3]);
        let logits = tape.add_row(logits, p[4]);
        Ok(tape.value(logits).data().to_vec())
    }

    /// The `k` highest-scoring codes, best first; ties go to the lower index.
    pub fn top_k(&self, history: &[Visit], k: usize) -> Result<Vec<&str>> {
        let s = self.scores(history)?;
        Ok(rank(&s, k).into_iter().map(|i| self.codes[i].as_str()).collect())
    }
}

fn rank(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of `truth` codes contained in `predicted`.
pub fn recall_of(predicted: &[&str], truth: &Visit) -> f64 {
    let hit = truth.codes().filter(|c| predicted.contains(c)).count();
    hit as f64 / truth.len() as f64
}

/// Trains the predictor on every record of `train` with at least two
/// visits.
pub fn train_next_visit_predictor(train: &Cohort, cfg: &PredictorConfig) -> Result<NextVisitPredictor> {
    if cfg.hidden == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(EvaError::Config("predictor: hidden, batch_size and learning_rate must be positive".into()));
    }
    let eligible: Vec<&PatientRecord> = train.records.iter().filter(|r| r.visits.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(EvaError::invalid("no training record has two or more visits"));
    }
    let mut codes: Vec<String> = train
        .records
        .iter()
        .flat_map(|r| r.visits.iter().flat_map(|v| v.codes().map(String::from)))
        .collect();
    codes.sort();
    codes.dedup();

    let mut rng = rng_from_seed(cfg.seed);
    let c = codes.len();
    let mut model = NextVisitPredictor {
        codes,
        lstm: LstmCell::init(c, cfg.hidden, &mut rng),
        out_w: init_weight(&mut rng, cfg.hidden, c, cfg.hidden, 1.0),
        out_b: Tensor::zeros(1, c),
    };
    let mut adam = Adam::new(cfg.learning_rate, &model.zeros_like());
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let index = model.index();
            let per_record: Vec<Vec<Tensor>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = model.zeros_like();
                    model.record_loss(&index, eligible[i], Some(&mut g));
                    g
                })
                .collect();
            let mut grad = model.zeros_like();
            for g in per_record {
                for (a, b) in grad.iter_mut().zip(&g) {
                    a.add_assign(b);
                }
            }
            grad.iter_mut().for_each(|g| g.scale_assign(1.0 / batch.len() as f64));
            clip_global_norm(&mut grad, 5.0);
            adam.step(&mut model.tensors_mut(), &grad);
        }
    }
    if !model.is_finite() {
        return Err(EvaError::numerical("next-visit predictor parameters"));
    }
    Ok(model)
}

/// Mean cross-entropy of the predictor over eligible records of `cohort`.
pub fn predictor_loss(model: &NextVisitPredictor, cohort: &Cohort) -> Result<f64> {
    let index = model.index();
    let losses: Vec<f64> = cohort
        .records
        .iter()
        .filter(|r| r.visits.len() >= 2)
        .map(|r| model.record_loss(&index, r, None))
        .collect();
    if losses.is_empty() {
        return Err(EvaError::invalid("no record has two or more visits"));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    pub value: f64,
    /// Prediction steps averaged over.
    pub steps: usize,
    pub records_skipped: usize,
}

/// Top-k recall of next-visit codes, averaged over every prediction step of
/// every test record with at least two visits.
pub fn topk_recall(model: &NextVisitPredictor, test: &Cohort, k: usize) -> Result<RecallReport> {
    if k == 0 {
        return Err(EvaError::invalid("k must be at least 1"));
    }
    let per_record: Vec<Result<(f64, usize)>> = test
        .records
        .par_iter()
        .filter(|r| r.visits.len() >= 2)
        .map(|r| {
            let mut sum = 0.0;
            for t in 1..r.visits.len() {
                let top = model.top_k(&r.visits[..t], k)?;
                sum += recall_of(&top, &r.visits[t]);
            }
            Ok((sum, r.visits.len() - 1))
        })
        .collect();
    let (mut sum, mut steps, mut used) = (0.0, 0, 0);
    for r in per_record {
        let (s, n) = r?;
        sum += s;
        steps += n;
        used += 1;
    }
    if steps == 0 {
        return Err(EvaError::invalid("no test record has two or more visits"));
    }
    Ok(RecallReport {
        k,
        value: sum / steps as f64,
        steps,
        records_skipped: test.len() - used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::visit;

    fn record(id: &str, vs: Vec<&[&str]>) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            visits: vs.into_iter().map(visit).collect(),
            conditions: vec![],
        }
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_of(&["a", "c"], &visit(&["a", "b"])), 0.5);
        assert_eq!(recall_of(&["b", "a"], &visit(&["a", "b"])), 1.0);
        assert_eq!(rank(&[0.1, 0.5, 0.5, 0.2], 3), vec![1, 2, 3]);
    }

    #[test]
    fn learns_a_deterministic_alternation() {
        let recs: Vec<PatientRecord> = (0..40)
            .map(|i| {
                let vs: Vec<&[&str]> = (0..6).map(|t| if (t + i) % 2 == 0 { &["a", "b"][..] } else { &["c"][..] }).collect();
                record(&i.to_string(), vs)
            })
            .collect();
        let train = Cohort::new(recs, vec![]).unwrap();
        let cfg = PredictorConfig {
            hidden: 8,
            epochs: 30,
            learning_rate: 2e-2,
            ..Default::default()
        };
        let m = train_next_visit_predictor(&train, &cfg).unwrap();
        let r = topk_recall(&m, &train, 1).unwrap();
        // k = 1 can recover at most one of {a, b}
        assert!(r.value > 0.7, "{r:?}");
        let r2 = topk_recall(&m, &train, 2).unwrap();
        assert!(r2.value > 0.99, "{r2:?}");
        assert_eq!(r2.steps, 40 * 5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let train = Cohort::new(
            vec![record("x", vec![&["a"], &["b", "c"], &["a", "c"]]), record("y", vec![&["c"], &["c"]])],
            vec![],
        )
        .unwrap();
        let cfg = PredictorConfig {
            hidden: 3,
            epochs: 0,
            ..Default::default()
        };
        let m = train_next_visit_predictor(&train, &cfg).unwrap();
        let index = m.index();
        let r = &train.records[0];
        let mut g = m.zeros_like();
        m.record_loss(&index, r, Some(&mut g));
        let h = 1e-6;
        for (ti, gt) in g.iter().enumerate() {
            for j in 0..gt.len() {
                let mut plus = m.clone();
                plus.tensors_mut()[ti].data_mut()[j] += h;
                let mut minus = m.clone();
                minus.tensors_mut()[ti].data_mut()[j] -= h;
                let fd = (plus.record_loss(&index, r, None) - minus.record_loss(&index, r, None)) / (2.0 * h);
                let an = gt.data()[j];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "tensor {ti} entry {j}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn recall_ignores_record_order_and_skips_short_records() {
        let mut test = Cohort::new(
            vec![record("x", vec![&["a"], &["b"]]), record("y", vec![&["b"]]), record("z", vec![&["b"], &["a"]])],
            vec![],
        )
        .unwrap();
        let cfg = PredictorConfig {
            epochs: 2,
            ..Default::default()
        };
        let m = train_next_visit_predictor(&test, &cfg).unwrap();
        let a = topk_recall(&m, &test, 1).unwrap();
        assert_eq!(a.records_skipped, 1);
        test.records.reverse();
        assert_eq!(a, topk_recall(&m, &test, 1).unwrap());
    }
}
