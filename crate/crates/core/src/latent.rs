//! Latent priors.
//!
//! The unconditional model draws `z ~ N(0, I)`. The conditional model
//! composes `z = H pi + b + eps` from per-condition representations `h_k`,
//! intensities `pi = y * sigmoid(w)`, a patient bias `b ~ N(0, gamma I)` and
//! noise `eps ~ N(0, tau I)`, with `w ~ N(0, I_K)`. Both `tau` and `gamma`
//! are variances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EvaError, Result};
use crate::rng::standard_normal;
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyHyper {
    pub tau: f64,
    pub gamma: f64,
}

impl Default for HierarchyHyper {
    fn default() -> Self {
        Self { tau: 0.1, gamma: 0.1 }
    }
}

impl HierarchyHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.gamma > 0.0) || !self.tau.is_finite() || !self.gamma.is_finite() {
            return Err(EvaError::Config("tau and gamma must be positive and finite".into()));
        }
        Ok(())
    }
}

/// The condition representations `h_1 .. h_K`, stored one per row
/// (`K x D`), so that `H pi` is the row-vector product `pi^T rows`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMatrix {
    pub names: Vec<String>,
    pub rows: Tensor,
}

impl ConditionMatrix {
    pub fn new(names: Vec<String>, rows: Tensor) -> Result<Self> {
        if names.is_empty() || names.len() != rows.rows() {
            return Err(EvaError::invalid("condition matrix needs one named row per condition"));
        }
        if !rows.is_finite() {
            return Err(EvaError::numerical("condition matrix"));
        }
        Ok(Self { names, rows })
    }

    /// Draws every entry from the standard normal prior.
    pub fn sample_prior(names: Vec<String>, latent_dim: usize, rng: &mut impl Rng) -> Self {
        let rows = crate::rng::normal_tensor(rng, names.len(), latent_dim);
        Self { names, rows }
    }

    pub fn num_conditions(&self) -> usize {
        self.rows.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.rows.cols()
    }

    /// Representation `h_k` of condition `k`.
    pub fn column(&self, k: usize) -> &[f64] {
        self.rows.row(k)
    }

    /// `H pi`.
    pub fn combine(&self, pi: &[f64]) -> Vec<f64> {
        assert_eq!(pi.len(), self.num_conditions(), "intensity length");
        let mut out = vec![0.0; self.latent_dim()];
        for (k, &p) in pi.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, h) in out.iter_mut().zip(self.column(k)) {
                *o += p * h;
            }
        }
        out
    }
}

/// Local latent variables of one patient under the conditional model.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientLatents {
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub pi: Vec<f64>,
}

fn check_binary(y: &[f64]) -> Result<()> {
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(EvaError::invalid("condition vector must be binary"));
    }
    Ok(())
}

/// `pi_k = y_k * sigmoid(w_k)`.
pub fn compose_intensities(y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    check_binary(y)?;
    if y.len() != w.len() {
        return Err(EvaError::invalid("condition vector and weights differ in length"));
    }
    Ok(y.iter().zip(w).map(|(&yk, &wk)| if yk == 0.0 { 0.0 } else { sigmoid(wk) }).collect())
}

/// Turns an all-zero condition vector into the background indicator.
pub fn with_background(y: &[f64], background: Option<usize>) -> Result<Vec<f64>> {
    check_binary(y)?;
    if y.contains(&1.0) {
        return Ok(y.to_vec());
    }
    match background {
        Some(k) if k < y.len() => {
            let mut out = y.to_vec();
            out[k] = 1.0;
            Ok(out)
        }
        _ => Err(EvaError::invalid("condition vector is all zero and there is no background condition")),
    }
}

fn check_shapes(h: &ConditionMatrix, pi: &[f64], b: &[f64]) -> Result<()> {
    if pi.len() != h.num_conditions() || b.len() != h.latent_dim() {
        return Err(EvaError::invalid("latent shapes do not match the condition matrix"));
    }
    Ok(())
}

/// Draws `z = H pi + b + eps`, `eps ~ N(0, tau I)`.
pub fn compose_patient_latent(
    h: &ConditionMatrix,
    pi: &[f64],
    b: &[f64],
    tau: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_shapes(h, pi, b)?;
    if !(tau >= 0.0) {
        return Err(EvaError::invalid("tau must be non-negative"));
    }
    let sd = tau.sqrt();
    let mean = h.combine(pi);
    Ok(mean
        .iter()
        .zip(b)
        .map(|(m, bv)| m + bv + sd * standard_normal(rng))
        .collect())
}

/// `ln N(z | H pi + b, tau I)`.
pub fn latent_log_density(z: &[f64], h: &ConditionMatrix, pi: &[f64], b: &[f64], tau: f64) -> Result<f64> {
    check_shapes(h, pi, b)?;
    if !(tau > 0.0) {
        return Err(EvaError::invalid("tau must be positive"));
    }
    if z.len() != h.latent_dim() {
        return Err(EvaError::invalid("latent dimension mismatch"));
    }
    let mean = h.combine(pi);
    let sq: f64 = z
        .iter()
        .zip(&mean)
        .zip(b)
        .map(|((zv, m), bv)| (zv - m - bv).powi(2))
        .sum();
    let d = z.len() as f64;
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * tau).ln() - sq / (2.0 * tau))
}

/// `z ~ N(0, I_D)`.
pub fn sample_prior_eva(latent_dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..latent_dim).map(|_| standard_normal(rng)).collect()
}

/// Ancestral draw `w ~ N(0, I_K)`, `b ~ N(0, gamma I_D)`, then `z` given `y`.
pub fn sample_prior_evac(
    h: &ConditionMatrix,
    y: &[f64],
    hyper: &HierarchyHyper,
    rng: &mut impl Rng,
) -> Result<PatientLatents> {
    hyper.validate()?;
    if y.len() != h.num_conditions() {
        return Err(EvaError::invalid("condition vector length mismatch"));
    }
    let w: Vec<f64> = (0..h.num_conditions()).map(|_| standard_normal(rng)).collect();
    let gsd = hyper.gamma.sqrt();
    let b: Vec<f64> = (0..h.latent_dim()).map(|_| gsd * standard_normal(rng)).collect();
    let pi = compose_intensities(y, &w)?;
    let z = compose_patient_latent(h, &pi, &b, hyper.tau, rng)?;
    Ok(PatientLatents { z, w, b, pi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use statrs::distribution::{Continuous, Normal};

    fn identity2() -> ConditionMatrix {
        ConditionMatrix::new(vec!["a".into(), "b".into()], Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0])).unwrap()
    }

    #[test]
    fn intensities() {
        assert_eq!(compose_intensities(&[1.0, 0.0], &[0.0, 100.0]).unwrap(), vec![0.5, 0.0]);
        assert_eq!(compose_intensities(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(compose_intensities(&[0.0, 0.0, 0.0], &[3.0, -2.0, 9.0]).unwrap(), vec![0.0; 3]);
        assert!(compose_intensities(&[0.5], &[0.0]).is_err());
        for w in [-1e3, -5.0, 0.0, 7.0, 1e3] {
            let p = compose_intensities(&[1.0], &[w]).unwrap()[0];
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn background_fills_empty_condition_vectors() {
        assert_eq!(with_background(&[0.0, 0.0, 0.0], Some(2)).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(with_background(&[1.0, 0.0, 0.0], Some(2)).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(with_background(&[0.0, 0.0], None).is_err());
    }

    #[test]
    fn composition_without_noise() {
        let h = identity2();
        let z = compose_patient_latent(&h, &[0.5, 0.5], &[0.0, 0.0], 0.0, &mut rng_from_seed(1)).unwrap();
        assert_eq!(z, vec![0.5, 0.5]);
        let z = compose_patient_latent(&h, &[0.0, 0.0], &[0.0, 0.0], 0.0, &mut rng_from_seed(1)).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn composition_mean_matches_analytic() {
        let h = ConditionMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            Tensor::from_vec(3, 2, vec![1.0, -2.0, 0.5, 0.3, 4.0, 4.0]),
        )
        .unwrap();
        let pi = [0.7, 0.2, 0.0];
        let b = [0.1, -0.1];
        let tau: f64 = 0.1;
        let n = 10_000;
        let mut rng = rng_from_seed(5);
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let z = compose_patient_latent(&h, &pi, &b, tau, &mut rng).unwrap();
            sum[0] += z[0];
            sum[1] += z[1];
        }
        let expected = [0.7 * 1.0 + 0.2 * 0.5 + 0.1, 0.7 * -2.0 + 0.2 * 0.3 - 0.1];
        let bound = 4.0 * tau.sqrt() / (n as f64).sqrt();
        for d in 0..2 {
            assert!((sum[d] / n as f64 - expected[d]).abs() < bound);
        }
    }

    #[test]
    fn inactive_conditions_do_not_influence_z() {
        let mut h = identity2();
        let pi = compose_intensities(&[1.0, 0.0], &[0.3, 0.3]).unwrap();
        let a = compose_patient_latent(&h, &pi, &[0.2, 0.2], 0.1, &mut rng_from_seed(3)).unwrap();
        h.rows.row_mut(1).copy_from_slice(&[50.0, -50.0]);
        let b = compose_patient_latent(&h, &pi, &[0.2, 0.2], 0.1, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_density_closed_forms() {
        let h = ConditionMatrix::new(vec!["a".into()], Tensor::from_vec(1, 1, vec![2.0])).unwrap();
        let mode = latent_log_density(&[1.0 + 0.5], &h, &[0.5], &[0.5], 0.1).unwrap();
        assert!((mode - 0.232_354_013_292_350_1).abs() < 1e-12);
        let off = latent_log_density(&[2.5], &h, &[0.5], &[0.5], 0.1).unwrap();
        assert!((off - (mode - 5.0)).abs() < 1e-12);
        assert!((off + 4.767_646).abs() < 1e-6);
        assert!(latent_log_density(&[0.0], &h, &[0.5], &[0.5], 0.0).is_err());
    }

    #[test]
    fn log_density_matches_normal_pdf_and_quadrature() {
        let mut rng = rng_from_seed(11);
        for _ in 0..20 {
            let hv = 2.0 * rng.random::<f64>() - 1.0;
            let pi = rng.random::<f64>();
            let b = 0.5 * rng.random::<f64>() - 0.25;
            let tau = 0.05 + rng.random::<f64>();
            let h = ConditionMatrix::new(vec!["a".into()], Tensor::from_vec(1, 1, vec![hv])).unwrap();
            let reference = Normal::new(hv * pi + b, tau.sqrt()).unwrap();
            let z = 3.0 * rng.random::<f64>() - 1.5;
            let ld = latent_log_density(&[z], &h, &[pi], &[b], tau).unwrap();
            assert!((ld - reference.ln_pdf(z)).abs() < 1e-10);

            // trapezoid rule: the density integrates to one with the right mean
            let (lo, hi, n) = (-12.0, 12.0, 24_000);
            let step = (hi - lo) / n as f64;
            let mut mass = 0.0;
            let mut first = 0.0;
            for i in 0..=n {
                let x = lo + i as f64 * step;
                let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
                let p = latent_log_density(&[x], &h, &[pi], &[b], tau).unwrap().exp();
                mass += wgt * p * step;
                first += wgt * x * p * step;
            }
            assert!((mass - 1.0).abs() < 1e-6);
            assert!((first - (hv * pi + b)).abs() < 1e-6);
        }
    }

    #[test]
    fn log_density_peaks_at_mean() {
        let h = identity2();
        let pi = [0.3, 0.9];
        let b = [0.05, -0.2];
        let mode = [0.35, 0.7];
        let best = latent_log_density(&mode, &h, &pi, &b, 0.1).unwrap();
        for dz in [[0.01, 0.0], [0.0, -0.01], [0.3, 0.3]] {
            let z = [mode[0] + dz[0], mode[1] + dz[1]];
            assert!(latent_log_density(&z, &h, &pi, &b, 0.1).unwrap() < best);
        }
    }

    #[test]
    fn prior_moments() {
        let mut rng = rng_from_seed(8);
        let n = 10_000;
        let mut sum = vec![0.0; 3];
        for _ in 0..n {
            for (s, z) in sum.iter_mut().zip(sample_prior_eva(3, &mut rng)) {
                *s += z;
            }
        }
        for s in sum {
            assert!((s / n as f64).abs() < 4.0 / (n as f64).sqrt());
        }

        let h = identity2();
        let hyper = HierarchyHyper::default();
        let mut sq = 0.0;
        let mut count = 0;
        for _ in 0..n {
            let l = sample_prior_evac(&h, &[1.0, 0.0], &hyper, &mut rng).unwrap();
            assert_eq!(l.pi[1], 0.0);
            for b in l.b {
                sq += b * b;
                count += 1;
            }
        }
        let var = sq / count as f64;
        assert!((var - 0.1).abs() < 0.01, "{var}");
    }

    #[test]
    fn prior_draws_are_reproducible() {
        let h = identity2();
        let hyper = HierarchyHyper::default();
        let a = sample_prior_evac(&h, &[1.0, 1.0], &hyper, &mut rng_from_seed(4)).unwrap();
        let b = sample_prior_evac(&h, &[1.0, 1.0], &hyper, &mut rng_from_seed(4)).unwrap();
        assert_eq!(a, b);
    }
}
