//! Adam for the inference network parameters.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[Tensor]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s.rows(), s.cols())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grad: &[Tensor]) {
        assert_eq!(params.len(), grad.len(), "parameter/gradient count mismatch");
        self.t = self.t.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.learning_rate * (*mv / c1) / ((*vv / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Rescales `grad` in place so its global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grad.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec(1, 2, vec![1.0, 1.0]);
        let g = vec![Tensor::from_vec(1, 2, vec![3.0, -0.01])];
        let mut a = Adam::new(0.1, &g);
        a.step(&mut [&mut p], &g);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::from_vec(1, 1, vec![5.0]);
        let mut a = Adam::new(0.05, &[p.clone()]);
        for _ in 0..2000 {
            let g = vec![p.map(|x| 2.0 * (x - 1.5))];
            a.step(&mut [&mut p], &g);
        }
        assert!((p.data()[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::from_vec(1, 1, vec![0.5])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.5);
    }
}
