//! The per-record evidence bound and its gradients.
//!
//! One tape per record computes the single-sample bound
//! `recon + cross + entropy - kl_z - kl_b - kl_w` (unused terms are zero for
//! the respective variant). A single backward pass yields the encoder
//! gradient of the bound, the decoder gradient of the reconstruction term
//! and the `H` gradient of the latent cross term, since each global only
//! enters through its own term.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::EncodedCohort;
use crate::decoder::{forward_on_tape, one_hot, shifted_inputs};
use crate::encoders::{reparam_on_tape, DiagGaussian, GaussianVars, LocalEncoders};
use crate::error::{EvaError, Result};
use crate::model::{GlobalParams, ModelConfig, Variant};
use crate::params::ParamGroup;
use crate::rng::{derive_seed, rng_from_seed, standard_normal};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const NOISE_TAG: u64 = 0x6e_6f69_7365;

/// `KL(q || N(prior_mean, diag(prior_var)))`, summed over dimensions.
pub fn kl_diag_gaussians(q: &DiagGaussian, prior_mean: &[f64], prior_var: &[f64]) -> Result<f64> {
    q.validate()?;
    if prior_mean.len() != q.dim() || prior_var.len() != q.dim() {
        return Err(EvaError::invalid("prior dimension mismatch"));
    }
    if prior_var.iter().any(|&v| !(v > 0.0)) {
        return Err(EvaError::invalid("prior variances must be positive"));
    }
    Ok((0..q.dim())
        .map(|i| {
            let (m, v, pm, pv) = (q.mean[i], q.var[i], prior_mean[i], prior_var[i]);
            0.5 * ((pv / v).ln() + (v + (m - pm).powi(2)) / pv - 1.0)
        })
        .sum())
}

/// `0.5 * sum_d (1 + ln(2 pi v_d))`.
pub fn entropy_diag_gaussian(g: &DiagGaussian) -> Result<f64> {
    g.validate()?;
    Ok(g.var.iter().map(|v| 0.5 * (1.0 + LN_2PI + v.ln())).sum())
}

/// Batch-averaged terms of the objective. `total` is the negative bound
/// `J`, and `kl_fraction` is the share of `J` contributed by the
/// divergence between the posterior and the prior over local latents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub recon: f64,
    pub latent_cross: f64,
    pub entropy_z: f64,
    pub kl_z: f64,
    pub kl_b: f64,
    pub kl_w: f64,
    pub total: f64,
    pub kl_fraction: f64,
}

impl ElboReport {
    /// Estimate of `KL(q(z, w, b) || p(z, w, b))`.
    pub fn kl_total(&self) -> f64 {
        self.kl_z - self.latent_cross - self.entropy_z + self.kl_b + self.kl_w
    }

    pub fn elbo(&self) -> f64 {
        -self.total
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon,
            self.latent_cross,
            self.entropy_z,
            self.kl_z,
            self.kl_b,
            self.kl_w,
            self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }

    fn from_terms(sum: &RecordTerms, n: usize) -> Self {
        let n = n.max(1) as f64;
        let mut r = ElboReport {
            recon: sum.recon / n,
            latent_cross: sum.cross / n,
            entropy_z: sum.entropy / n,
            kl_z: sum.kl_z / n,
            kl_b: sum.kl_b / n,
            kl_w: sum.kl_w / n,
            total: 0.0,
            kl_fraction: 0.0,
        };
        r.total = -(r.recon + r.latent_cross + r.entropy_z - r.kl_z - r.kl_b - r.kl_w);
        r.kl_fraction = if r.total != 0.0 { r.kl_total() / r.total } else { 0.0 };
        r
    }
}

/// Per-record terms of the single-sample bound.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RecordTerms {
    pub recon: f64,
    pub cross: f64,
    pub entropy: f64,
    pub kl_z: f64,
    pub kl_b: f64,
    pub kl_w: f64,
}

impl RecordTerms {
    pub fn elbo(&self) -> f64 {
        self.recon + self.cross + self.entropy - self.kl_z - self.kl_b - self.kl_w
    }

    fn add(&mut self, o: &RecordTerms) {
        self.recon += o.recon;
        self.cross += o.cross;
        self.entropy += o.entropy;
        self.kl_z += o.kl_z;
        self.kl_b += o.kl_b;
        self.kl_w += o.kl_w;
    }
}

/// Standard normal noise for the reparameterized local samples of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalNoise {
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LocalNoise {
    pub fn draw(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let d = cfg.latent_dim();
        let z = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let (w, b) = match cfg.variant {
            Variant::Eva => (Vec::new(), Vec::new()),
            Variant::Evac => (
                (0..cfg.num_conditions()).map(|_| standard_normal(&mut rng)).collect(),
                (0..d).map(|_| standard_normal(&mut rng)).collect(),
            ),
        };
        Self { z, w, b }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.latent_dim();
        let k = if cfg.variant == Variant::Evac { cfg.num_conditions() } else { 0 };
        let b = if cfg.variant == Variant::Evac { d } else { 0 };
        Self {
            z: vec![0.0; d],
            w: vec![0.0; k],
            b: vec![0.0; b],
        }
    }

    /// Noise for record `index` under the iteration seed `seed`. Keyed by
    /// the record rather than its minibatch slot, so a record sees the same
    /// noise in every minibatch drawn with the same seed.
    pub fn for_record(cfg: &ModelConfig, seed: u64, index: usize) -> Self {
        Self::draw(cfg, derive_seed(seed, NOISE_TAG, index as u64))
    }
}

/// `KL(q || N(0, prior_var I))` on a tape.
fn kl_isotropic(tape: &mut Tape<'_>, q: GaussianVars, prior_var: f64) -> Var {
    let d = tape.value(q.mean).cols() as f64;
    let m2 = tape.square(q.mean);
    let s = tape.add(q.var, m2);
    let s = tape.scale(s, 1.0 / prior_var);
    let lv = tape.ln(q.var);
    let s = tape.sub(s, lv);
    let s = tape.sum(s);
    let s = tape.add_scalar(s, d * (prior_var.ln() - 1.0));
    tape.scale(s, 0.5)
}

/// Evaluates the bound for one record. With `grads`, the gradient of the
/// bound is accumulated into `grads`, laid out as the encoder tensors
/// followed by the global tensors.
pub fn record_pass(
    cfg: &ModelConfig,
    phi: &LocalEncoders,
    globals: &GlobalParams,
    targets: &[usize],
    y: &[f64],
    noise: &LocalNoise,
    grads: Option<&mut [Tensor]>,
) -> Result<RecordTerms> {
    let n_phi = phi.num_tensors();
    let with_grad = grads.is_some();
    let slot = |o: usize| with_grad.then_some(o);
    let (oz, ow, ob) = phi.offsets();
    let mut tape = Tape::new();

    let qz = phi.z.on_tape(&mut tape, slot(oz), targets, y);
    let z = reparam_on_tape(&mut tape, qz, &noise.z);
    let logits = forward_on_tape(&cfg.decoder, &globals.decoder, &mut tape, slot(n_phi), z, shifted_inputs(targets));
    if !tape.value(logits).is_finite() {
        return Err(EvaError::numerical("reconstruction"));
    }
    let recon = tape.log_softmax_dot(logits, one_hot(targets, cfg.decoder.num_tokens));

    let mut terms = RecordTerms::default();
    let bound = match cfg.variant {
        Variant::Eva => {
            let kl = kl_isotropic(&mut tape, qz, 1.0);
            terms.kl_z = tape.scalar(kl);
            tape.sub(recon, kl)
        }
        Variant::Evac => {
            let (Some(pw), Some(pb), Some(h)) = (&phi.w, &phi.b, &globals.conditions) else {
                return Err(EvaError::invalid("conditional model is missing w, b or H"));
            };
            let d = cfg.latent_dim() as f64;
            let tau = cfg.hyper.tau;
            let qw = pw.on_tape(&mut tape, slot(ow), targets, y);
            let qb = pb.on_tape(&mut tape, slot(ob), targets, y);
            let w = reparam_on_tape(&mut tape, qw, &noise.w);
            let b = reparam_on_tape(&mut tape, qb, &noise.b);

            let sw = tape.sigmoid(w);
            let mask = tape.constant(Tensor::row_vector(y.to_vec()));
            let pi = tape.mul(sw, mask);
            let hv = match globals.conditions_slot() {
                Some(s) if with_grad => tape.param(&h.rows, n_phi + s),
                _ => tape.frozen(&h.rows),
            };
            let hp = tape.matmul(pi, hv);
            let mean = tape.add(hp, b);
            let diff = tape.sub(z, mean);
            let sq = tape.square(diff);
            let sq = tape.sum(sq);
            let cross = tape.scale(sq, -0.5 / tau);
            let cross = tape.add_scalar(cross, -0.5 * d * (LN_2PI + tau.ln()));

            let lv = tape.ln(qz.var);
            let ent = tape.sum(lv);
            let ent = tape.scale(ent, 0.5);
            let ent = tape.add_scalar(ent, 0.5 * d * (1.0 + LN_2PI));

            let kl_b = kl_isotropic(&mut tape, qb, cfg.hyper.gamma);
            let kl_w = kl_isotropic(&mut tape, qw, 1.0);
            terms.cross = tape.scalar(cross);
            terms.entropy = tape.scalar(ent);
            terms.kl_b = tape.scalar(kl_b);
            terms.kl_w = tape.scalar(kl_w);

            let s = tape.add(recon, cross);
            let s = tape.add(s, ent);
            let s = tape.sub(s, kl_b);
            tape.sub(s, kl_w)
        }
    };
    terms.recon = tape.scalar(recon);
    if !tape.scalar(bound).is_finite() {
        let term = if !terms.recon.is_finite() { "reconstruction" } else { "latent terms" };
        return Err(EvaError::numerical(term));
    }
    if let Some(g) = grads {
        tape.backward(bound, g);
    }
    Ok(terms)
}

/// Gradients from one minibatch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub report: ElboReport,
    /// Gradient of the batch-averaged `J` with respect to the encoders.
    pub phi: Vec<Tensor>,
    /// `N/M`-rescaled data gradient plus the standard normal prior gradient
    /// of the log joint with respect to `(theta, H)`.
    pub globals: Vec<Tensor>,
}

/// Runs [`record_pass`] over `batch` (indices into `data`). `y` vectors must
/// already be background-completed for the conditional model.
pub fn batch_pass(
    cfg: &ModelConfig,
    phi: &LocalEncoders,
    globals: &GlobalParams,
    data: &EncodedCohort,
    batch: &[usize],
    noise_seed: u64,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(EvaError::invalid("empty minibatch"));
    }
    let n_phi = phi.num_tensors();
    let shapes: Vec<Tensor> = phi.zeros_like().into_iter().chain(globals.zeros_like()).collect();
    let per_record: Vec<Result<(RecordTerms, Vec<Tensor>)>> = batch
        .par_iter()
        .map(|&i| {
            let seq = data
                .sequences
                .get(i)
                .ok_or_else(|| EvaError::invalid(format!("record index {i} out of range")))?;
            let mut g = shapes.clone();
            let noise = LocalNoise::for_record(cfg, noise_seed, i);
            let t = record_pass(cfg, phi, globals, seq.targets(), &seq.conditions, &noise, Some(&mut g))?;
            Ok((t, g))
        })
        .collect();

    let mut sum = RecordTerms::default();
    let mut acc = shapes;
    for r in per_record {
        let (t, g) = r?;
        sum.add(&t);
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    let m = batch.len() as f64;
    let n = data.len() as f64;
    let mut globals_grad = acc.split_off(n_phi);
    for (g, p) in globals_grad.iter_mut().zip(globals.tensors()) {
        g.scale_assign(n / m);
        for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
            *gv -= pv;
        }
    }
    for g in acc.iter_mut() {
        g.scale_assign(-1.0 / m);
    }
    Ok(BatchGradients {
        report: ElboReport::from_terms(&sum, batch.len()),
        phi: acc,
        globals: globals_grad,
    })
}

/// The local objective `J` (batch-averaged) and its encoder gradient.
pub fn local_objective(
    cfg: &ModelConfig,
    phi: &LocalEncoders,
    globals: &GlobalParams,
    data: &EncodedCohort,
    batch: &[usize],
    noise_seed: u64,
) -> Result<(ElboReport, Vec<Tensor>)> {
    let b = batch_pass(cfg, phi, globals, data, batch, noise_seed)?;
    Ok((b.report, b.phi))
}

/// Stochastic gradient of `ln p(D, theta, H)` with respect to the globals.
pub fn global_grad_estimate(
    cfg: &ModelConfig,
    phi: &LocalEncoders,
    globals: &GlobalParams,
    data: &EncodedCohort,
    batch: &[usize],
    noise_seed: u64,
) -> Result<Vec<Tensor>> {
    Ok(batch_pass(cfg, phi, globals, data, batch, noise_seed)?.globals)
}

/// Objective value only, without gradients.
pub fn evaluate_objective(
    cfg: &ModelConfig,
    phi: &LocalEncoders,
    globals: &GlobalParams,
    data: &EncodedCohort,
    batch: &[usize],
    noise_seed: u64,
) -> Result<ElboReport> {
    let terms: Vec<Result<RecordTerms>> = batch
        .par_iter()
        .map(|&i| {
            let seq = &data.sequences[i];
            let noise = LocalNoise::for_record(cfg, noise_seed, i);
            record_pass(cfg, phi, globals, seq.targets(), &seq.conditions, &noise, None)
        })
        .collect();
    let mut sum = RecordTerms::default();
    for t in terms {
        sum.add(&t?);
    }
    Ok(ElboReport::from_terms(&sum, batch.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn kl_closed_forms() {
        let kl = |m: f64, v: f64| kl_diag_gaussians(&DiagGaussian::new(vec![m], vec![v]).unwrap(), &[0.0], &[1.0]).unwrap();
        assert_eq!(kl(0.0, 1.0), 0.0);
        assert!((kl(1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((kl(0.0, 2.0) - 0.153_426_409_720_027_3).abs() < 1e-12);
        assert!(kl_diag_gaussians(&DiagGaussian { mean: vec![0.0], var: vec![-1.0] }, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = DiagGaussian::new(vec![0.0], vec![2.0]).unwrap();
        let mut rng = rng_from_seed(21);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x = 2f64.sqrt() * standard_normal(&mut rng);
            // ln q(x) - ln p(x)
            acc += -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - x * x / 4.0
                + 0.5 * (2.0 * std::f64::consts::PI).ln()
                + x * x / 2.0;
        }
        let mc = acc / n as f64;
        let exact = kl_diag_gaussians(&q, &[0.0], &[1.0]).unwrap();
        assert!((mc - exact).abs() < 1e-2, "{mc} vs {exact}");
    }

    #[test]
    fn entropy_closed_forms_and_monte_carlo() {
        let e = entropy_diag_gaussian(&DiagGaussian::standard(1)).unwrap();
        assert!((e - 1.418_938_533_204_672_7).abs() < 1e-12);
        let wide = entropy_diag_gaussian(&DiagGaussian::new(vec![0.0], vec![4.0]).unwrap()).unwrap();
        assert!((wide - e - std::f64::consts::LN_2).abs() < 1e-12);

        let g = DiagGaussian::new(vec![0.5, -1.0], vec![0.3, 2.5]).unwrap();
        let mut rng = rng_from_seed(2);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x: Vec<f64> = (0..2).map(|i| g.mean[i] + g.var[i].sqrt() * standard_normal(&mut rng)).collect();
            let lq: f64 = (0..2)
                .map(|i| -0.5 * (2.0 * std::f64::consts::PI * g.var[i]).ln() - (x[i] - g.mean[i]).powi(2) / (2.0 * g.var[i]))
                .sum();
            acc -= lq;
        }
        assert!((acc / n as f64 - entropy_diag_gaussian(&g).unwrap()).abs() < 1e-2);
    }

    #[test]
    fn report_total_follows_sign_convention() {
        let t = RecordTerms {
            recon: -10.0,
            cross: 1.5,
            entropy: -0.5,
            kl_z: 0.0,
            kl_b: 0.25,
            kl_w: 0.75,
        };
        let r = ElboReport::from_terms(&t, 1);
        assert_eq!(r.total, -(-10.0 + 1.5 - 0.5 - 0.25 - 0.75));
        assert_eq!(r.total, -t.elbo());
        assert!((r.kl_fraction - (-1.5 + 0.5 + 1.0) / r.total).abs() < 1e-15);
    }
}
