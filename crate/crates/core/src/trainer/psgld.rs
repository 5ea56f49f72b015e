//! Preconditioned stochastic gradient Langevin dynamics.
//!
//! An RMSprop-style diagonal preconditioner `G = 1 / (lambda + sqrt(V))`
//! scales both the drift and the injected noise. The curvature correction
//! term of the full sampler is omitted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EvaError, Result};
use crate::rng::standard_normal;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsgldConfig {
    pub step_size: f64,
    pub alpha: f64,
    pub lambda: f64,
    /// Multiplies the injected noise; 0 gives preconditioned gradient ascent.
    pub temperature: f64,
}

impl Default for PsgldConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            alpha: 0.99,
            lambda: 1e-5,
            temperature: 1.0,
        }
    }
}

impl PsgldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(EvaError::Config("pSGLD step size must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(EvaError::Config("pSGLD alpha must lie in [0, 1]".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(EvaError::Config("pSGLD lambda must be positive".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(EvaError::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// Second-moment accumulator, one tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    pub v: Vec<Tensor>,
    pub steps: u64,
}

impl SamplerState {
    pub fn new(shapes: &[Tensor]) -> Self {
        Self {
            v: shapes.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
            steps: 0,
        }
    }

    /// Seeds the accumulator with `g^2` so the first steps are not taken
    /// with a near-singular preconditioner.
    pub fn warm(&mut self, grad: &[Tensor]) {
        for (v, g) in self.v.iter_mut().zip(grad) {
            *v = g.map(|x| x * x);
        }
    }
}

/// One update: `V <- aV + (1-a) g^2`, `G = 1/(lambda + sqrt V)`,
/// `p <- p + (eps/2) G g + sqrt(eps G) * temperature * N(0, 1)`.
/// `grad` is the gradient of the log posterior (an ascent direction).
pub fn psgld_step(
    state: &mut SamplerState,
    params: &mut [&mut Tensor],
    grad: &[Tensor],
    cfg: &PsgldConfig,
    rng: &mut impl Rng,
) {
    assert_eq!(params.len(), grad.len(), "parameter/gradient count mismatch");
    assert_eq!(params.len(), state.v.len(), "sampler state does not match parameters");
    let eps = cfg.step_size;
    for ((p, g), v) in params.iter_mut().zip(grad).zip(state.v.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = cfg.alpha * *vv + (1.0 - cfg.alpha) * gv * gv;
            let precond = 1.0 / (cfg.lambda + vv.sqrt());
            let mut delta = 0.5 * eps * precond * gv;
            if cfg.temperature > 0.0 {
                delta += (eps * precond).sqrt() * cfg.temperature * standard_normal(rng);
            }
            *pv += delta;
        }
    }
    state.steps += 1;
}
