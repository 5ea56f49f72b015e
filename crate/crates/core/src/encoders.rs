//! Amortized inference networks.
//!
//! Each local latent gets a diagonal Gaussian from a bidirectional LSTM over
//! the visit tokens and, for the conditional model, a second Gaussian from
//! a small MLP over the condition vector. The two experts are combined by
//! adding precisions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{EvaError, Result};
use crate::params::{bind, init_weight, ParamGroup};
use crate::rng::standard_normal;
use crate::tensor::Tensor;

/// Added to every softplus variance so precisions stay finite.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let g = Self { mean, var };
        g.validate()?;
        Ok(g)
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.var.len() {
            return Err(EvaError::invalid("gaussian mean and variance differ in length"));
        }
        if self.var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(EvaError::invalid("gaussian variances must be positive and finite"));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(EvaError::numerical("gaussian mean"));
        }
        Ok(())
    }
}

/// Product of two diagonal Gaussian experts, renormalised.
pub fn poe_combine(a: &DiagGaussian, b: &DiagGaussian) -> Result<DiagGaussian> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(EvaError::invalid("experts differ in dimension"));
    }
    let mut mean = Vec::with_capacity(a.dim());
    let mut var = Vec::with_capacity(a.dim());
    for i in 0..a.dim() {
        let (pa, pb) = (1.0 / a.var[i], 1.0 / b.var[i]);
        let v = 1.0 / (pa + pb);
        var.push(v);
        mean.push(v * (a.mean[i] * pa + b.mean[i] * pb));
    }
    Ok(DiagGaussian { mean, var })
}

/// `mean + sqrt(var) * eta`, `eta ~ N(0, I)`.
pub fn reparam_sample(g: &DiagGaussian, rng: &mut impl Rng) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.var)
        .map(|(m, v)| m + v.sqrt() * standard_normal(rng))
        .collect()
}

/// A diagonal Gaussian living on a tape, both parts `1 x dim`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub var: Var,
}

impl GaussianVars {
    pub fn read(&self, tape: &Tape<'_>) -> DiagGaussian {
        DiagGaussian {
            mean: tape.value(self.mean).data().to_vec(),
            var: tape.value(self.var).data().to_vec(),
        }
    }
}

pub fn poe_on_tape(tape: &mut Tape<'_>, a: GaussianVars, b: GaussianVars) -> GaussianVars {
    let dim = tape.value(a.mean).cols();
    let ones = tape.constant(Tensor::filled(1, dim, 1.0));
    let pa = tape.div(ones, a.var);
    let pb = tape.div(ones, b.var);
    let prec = tape.add(pa, pb);
    let var = tape.div(ones, prec);
    let wa = tape.mul(a.mean, pa);
    let wb = tape.mul(b.mean, pb);
    let s = tape.add(wa, wb);
    let mean = tape.mul(var, s);
    GaussianVars { mean, var }
}

/// Reparameterized draw on a tape with the supplied standard normal noise.
pub fn reparam_on_tape(tape: &mut Tape<'_>, g: GaussianVars, eta: &[f64]) -> Var {
    let sd = tape.sqrt(g.var);
    let noise = tape.constant(Tensor::row_vector(eta.to_vec()));
    let scaled = tape.mul(sd, noise);
    tape.add(g.mean, scaled)
}

fn gaussian_head<'a>(tape: &mut Tape<'a>, h: Var, mw: Var, mb: Var, vw: Var, vb: Var) -> GaussianVars {
    let m = tape.matmul(h, mw);
    let mean = tape.add_row(m, mb);
    let v = tape.matmul(h, vw);
    let v = tape.add_row(v, vb);
    let v = tape.softplus(v);
    let var = tape.add_scalar(v, VARIANCE_FLOOR);
    GaussianVars { mean, var }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            lstm_hidden: 32,
            mlp_hidden: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.lstm_hidden == 0 || self.mlp_hidden == 0 {
            return Err(EvaError::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// One LSTM direction; gate columns are ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

impl LstmCell {
    pub(crate) fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut b = Tensor::zeros(1, 4 * hidden);
        for c in hidden..2 * hidden {
            b.set(0, c, 1.0);
        }
        Self {
            w_x: init_weight(rng, input, 4 * hidden, input, 1.0),
            w_h: init_weight(rng, hidden, 4 * hidden, hidden, 1.0),
            b,
        }
    }

    fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    /// Runs over the rows of `xw = x W_x` in `order`; returns the final state.
    fn run<'a>(&self, tape: &mut Tape<'a>, xw: Var, w_h: Var, b: Var, order: impl Iterator<Item = usize>) -> Var {
        *self.run_states(tape, xw, w_h, b, order).last().expect("at least one step")
    }

    /// As [`LstmCell::run`], returning the hidden state after every step.
    pub(crate) fn run_states<'a>(
        &self,
        tape: &mut Tape<'a>,
        xw: Var,
        w_h: Var,
        b: Var,
        order: impl Iterator<Item = usize>,
    ) -> Vec<Var> {
        let hd = self.hidden();
        let mut states = Vec::new();
        let mut state: Option<(Var, Var)> = None;
        for t in order {
            let mut pre = tape.rows(xw, t, 1);
            if let Some((h, _)) = state {
                let rec = tape.matmul(h, w_h);
                pre = tape.add(pre, rec);
            }
            let pre = tape.add_row(pre, b);
            let i = tape.slice_cols(pre, 0, hd);
            let i = tape.sigmoid(i);
            let g = tape.slice_cols(pre, 2 * hd, hd);
            let g = tape.tanh(g);
            let o = tape.slice_cols(pre, 3 * hd, hd);
            let o = tape.sigmoid(o);
            let mut c = tape.mul(i, g);
            if let Some((_, c_prev)) = state {
                let f = tape.slice_cols(pre, hd, hd);
                let f = tape.sigmoid(f);
                let keep = tape.mul(f, c_prev);
                c = tape.add(c, keep);
            }
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc);
            state = Some((h, c));
            states.push(h);
        }
        states
    }
}

/// Bidirectional LSTM over visit tokens with Gaussian heads on the
/// concatenated final states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEncoder {
    pub embed: Tensor,
    pub forward: LstmCell,
    pub backward: LstmCell,
    pub mean_w: Tensor,
    pub mean_b: Tensor,
    pub var_w: Tensor,
    pub var_b: Tensor,
}

impl SequenceEncoder {
    pub fn init(num_tokens: usize, out: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let (e, h) = (cfg.embed_dim, cfg.lstm_hidden);
        Self {
            embed: init_weight(rng, num_tokens, e, 1, 0.3),
            forward: LstmCell::init(e, h, rng),
            backward: LstmCell::init(e, h, rng),
            mean_w: init_weight(rng, 2 * h, out, 2 * h, 0.5),
            mean_b: Tensor::zeros(1, out),
            var_w: init_weight(rng, 2 * h, out, 2 * h, 0.1),
            var_b: Tensor::zeros(1, out),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mean_b.cols()
    }

    pub fn num_tokens(&self) -> usize {
        self.embed.rows()
    }

    /// Records the encoder on `tape`; `tokens` are the real (unpadded) steps.
    pub fn on_tape<'a>(&'a self, tape: &mut Tape<'a>, slot_offset: Option<usize>, tokens: &[usize]) -> GaussianVars {
        let v = bind(self, tape, slot_offset);
        let x = tape.gather(v[0], tokens.iter().map(|&t| Some(t)).collect());
        let xf = tape.matmul(x, v[1]);
        let hf = self.forward.run(tape, xf, v[2], v[3], 0..tokens.len());
        let xb = tape.matmul(x, v[4]);
        let hb = self.backward.run(tape, xb, v[5], v[6], (0..tokens.len()).rev());
        let pooled = tape.concat_cols(&[hf, hb]);
        gaussian_head(tape, pooled, v[7], v[8], v[9], v[10])
    }

    /// Posterior factor for the real prefix of `tokens` selected by `mask`.
    pub fn encode(&self, tokens: &[usize], mask: &[bool]) -> Result<DiagGaussian> {
        let real = real_steps(tokens, mask)?;
        self.check_tokens(&real)?;
        let mut tape = Tape::new();
        let g = self.on_tape(&mut tape, None, &real);
        let out = g.read(&tape);
        out.validate()?;
        Ok(out)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(EvaError::invalid("sequence has no unmasked steps"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.num_tokens()) {
            return Err(EvaError::TokenOutOfRange {
                token: t,
                size: self.num_tokens(),
            });
        }
        Ok(())
    }
}

/// Tokens at positions where `mask` is set, in order.
pub fn real_steps(tokens: &[usize], mask: &[bool]) -> Result<Vec<usize>> {
    if tokens.len() != mask.len() {
        return Err(EvaError::invalid("mask length differs from token length"));
    }
    let real: Vec<usize> = tokens.iter().zip(mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
    if real.is_empty() {
        return Err(EvaError::invalid("sequence has no unmasked steps"));
    }
    Ok(real)
}

impl ParamGroup for SequenceEncoder {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.embed,
            &self.forward.w_x,
            &self.forward.w_h,
            &self.forward.b,
            &self.backward.w_x,
            &self.backward.w_h,
            &self.backward.b,
            &self.mean_w,
            &self.mean_b,
            &self.var_w,
            &self.var_b,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.embed,
            &mut self.forward.w_x,
            &mut self.forward.w_h,
            &mut self.forward.b,
            &mut self.backward.w_x,
            &mut self.backward.w_h,
            &mut self.backward.b,
            &mut self.mean_w,
            &mut self.mean_b,
            &mut self.var_w,
            &mut self.var_b,
        ]
    }

    fn names(&self) -> Vec<String> {
        [
            "embed", "fwd.w_x", "fwd.w_h", "fwd.b", "bwd.w_x", "bwd.w_h", "bwd.b", "mean.weight", "mean.bias",
            "var.weight", "var.bias",
        ]
        .iter()
        .map(|s| format!("lstm.{s}"))
        .collect()
    }
}

/// One-hidden-layer tanh MLP over the condition vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEncoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub mean_w: Tensor,
    pub mean_b: Tensor,
    pub var_w: Tensor,
    pub var_b: Tensor,
}

impl ConditionEncoder {
    pub fn init(num_conditions: usize, out: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.mlp_hidden;
        Self {
            w1: init_weight(rng, num_conditions, h, num_conditions, 1.0),
            b1: Tensor::zeros(1, h),
            mean_w: init_weight(rng, h, out, h, 0.5),
            mean_b: Tensor::zeros(1, out),
            var_w: init_weight(rng, h, out, h, 0.1),
            var_b: Tensor::zeros(1, out),
        }
    }

    pub fn num_conditions(&self) -> usize {
        self.w1.rows()
    }

    pub fn on_tape<'a>(&'a self, tape: &mut Tape<'a>, slot_offset: Option<usize>, y: &[f64]) -> GaussianVars {
        let v = bind(self, tape, slot_offset);
        let x = tape.constant(Tensor::row_vector(y.to_vec()));
        let h = tape.matmul(x, v[0]);
        let h = tape.add_row(h, v[1]);
        let h = tape.tanh(h);
        gaussian_head(tape, h, v[2], v[3], v[4], v[5])
    }

    pub fn encode(&self, y: &[f64]) -> Result<DiagGaussian> {
        if y.len() != self.num_conditions() {
            return Err(EvaError::invalid("condition vector length mismatch"));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(EvaError::invalid("condition vector must be binary"));
        }
        let mut tape = Tape::new();
        let g = self.on_tape(&mut tape, None, y);
        let out = g.read(&tape);
        out.validate()?;
        Ok(out)
    }
}

impl ParamGroup for ConditionEncoder {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.mean_w, &self.mean_b, &self.var_w, &self.var_b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.mean_w,
            &mut self.mean_b,
            &mut self.var_w,
            &mut self.var_b,
        ]
    }

    fn names(&self) -> Vec<String> {
        ["hidden.weight", "hidden.bias", "mean.weight", "mean.bias", "var.weight", "var.bias"]
            .iter()
            .map(|s| format!("mlp.{s}"))
            .collect()
    }
}

/// The inference network for one local latent: a sequence expert and, in
/// the conditional model, a condition expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertPair {
    pub sequence: SequenceEncoder,
    pub condition: Option<ConditionEncoder>,
}

impl ExpertPair {
    pub fn init(
        num_tokens: usize,
        num_conditions: Option<usize>,
        out: usize,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let sequence = SequenceEncoder::init(num_tokens, out, cfg, rng);
        let condition = num_conditions.map(|k| ConditionEncoder::init(k, out, cfg, rng));
        Self { sequence, condition }
    }

    pub fn out_dim(&self) -> usize {
        self.sequence.out_dim()
    }

    /// Posterior on a tape; `y` is ignored without a condition expert.
    pub fn on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        slot_offset: Option<usize>,
        tokens: &[usize],
        y: &[f64],
    ) -> GaussianVars {
        let n_seq = self.sequence.num_tensors();
        let s = self.sequence.on_tape(tape, slot_offset, tokens);
        match &self.condition {
            Some(c) => {
                let g = c.on_tape(tape, slot_offset.map(|o| o + n_seq), y);
                poe_on_tape(tape, s, g)
            }
            None => s,
        }
    }

    pub fn encode(&self, tokens: &[usize], mask: &[bool], y: &[f64]) -> Result<DiagGaussian> {
        let s = self.sequence.encode(tokens, mask)?;
        match &self.condition {
            Some(c) => poe_combine(&s, &c.encode(y)?),
            None => Ok(s),
        }
    }
}

impl ParamGroup for ExpertPair {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.sequence.tensors();
        if let Some(c) = &self.condition {
            v.extend(c.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.sequence.tensors_mut();
        if let Some(c) = &mut self.condition {
            v.extend(c.tensors_mut());
        }
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = self.sequence.names();
        if let Some(c) = &self.condition {
            v.extend(c.names());
        }
        v
    }
}

/// Inference networks for all local latents (`phi`). The unconditional
/// model only has `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalEncoders {
    pub z: ExpertPair,
    pub w: Option<ExpertPair>,
    pub b: Option<ExpertPair>,
}

impl LocalEncoders {
    pub fn init_eva(num_tokens: usize, latent_dim: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        Self {
            z: ExpertPair::init(num_tokens, None, latent_dim, cfg, rng),
            w: None,
            b: None,
        }
    }

    pub fn init_evac(
        num_tokens: usize,
        latent_dim: usize,
        num_conditions: usize,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let k = Some(num_conditions);
        Self {
            z: ExpertPair::init(num_tokens, k, latent_dim, cfg, rng),
            w: Some(ExpertPair::init(num_tokens, k, num_conditions, cfg, rng)),
            b: Some(ExpertPair::init(num_tokens, k, latent_dim, cfg, rng)),
        }
    }

    fn parts(&self) -> Vec<(&'static str, &ExpertPair)> {
        let mut v = vec![("z", &self.z)];
        if let Some(w) = &self.w {
            v.push(("w", w));
        }
        if let Some(b) = &self.b {
            v.push(("b", b));
        }
        v
    }

    /// Slot offsets of the `z`, `w` and `b` networks relative to the group.
    pub fn offsets(&self) -> (usize, usize, usize) {
        let nz = self.z.num_tensors();
        let nw = self.w.as_ref().map_or(0, |w| w.num_tensors());
        (0, nz, nz + nw)
    }
}

impl ParamGroup for LocalEncoders {
    fn tensors(&self) -> Vec<&Tensor> {
        self.parts().into_iter().flat_map(|(_, p)| p.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.z.tensors_mut();
        if let Some(w) = &mut self.w {
            v.extend(w.tensors_mut());
        }
        if let Some(b) = &mut self.b {
            v.extend(b.tensors_mut());
        }
        v
    }

    fn names(&self) -> Vec<String> {
        self.parts()
            .into_iter()
            .flat_map(|(tag, p)| p.names().into_iter().map(move |n| format!("encoder.{tag}.{n}")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use statrs::distribution::{Continuous, Normal};

    fn g(mean: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 3,
            lstm_hidden: 4,
            mlp_hidden: 3,
        }
    }

    #[test]
    fn poe_closed_forms() {
        let p = poe_combine(&g(&[0.0], &[1.0]), &g(&[0.0], &[1.0])).unwrap();
        assert_eq!((p.mean[0], p.var[0]), (0.0, 0.5));
        let p = poe_combine(&g(&[0.0], &[1.0]), &g(&[2.0], &[1.0])).unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-15 && (p.var[0] - 0.5).abs() < 1e-15);
        assert!(poe_combine(&g(&[0.0], &[1.0]), &DiagGaussian { mean: vec![0.0], var: vec![0.0] }).is_err());
    }

    #[test]
    fn poe_matches_normalised_density_product() {
        let a = Normal::new(1.0, 0.25f64.sqrt()).unwrap();
        let b = Normal::new(3.0, 0.75f64.sqrt()).unwrap();
        let (lo, hi, n) = (-6.0, 10.0, 160_000);
        let h = (hi - lo) / n as f64;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let p = w * a.pdf(x) * b.pdf(x);
            m0 += p;
            m1 += p * x;
            m2 += p * x * x;
        }
        let mean = m1 / m0;
        let var = m2 / m0 - mean * mean;
        let p = poe_combine(&g(&[1.0], &[0.25]), &g(&[3.0], &[0.75])).unwrap();
        assert!((p.mean[0] - 1.5).abs() < 1e-12 && (p.var[0] - 0.1875).abs() < 1e-12);
        assert!((p.mean[0] - mean).abs() < 1e-6);
        assert!((p.var[0] - var).abs() < 1e-6);
    }

    #[test]
    fn poe_symmetry_contraction_and_identity_limit() {
        let mut rng = rng_from_seed(2);
        for _ in 0..100 {
            let a = g(&[standard_normal(&mut rng)], &[0.01 + rng.random::<f64>()]);
            let b = g(&[standard_normal(&mut rng)], &[0.01 + rng.random::<f64>()]);
            let ab = poe_combine(&a, &b).unwrap();
            assert_eq!(ab, poe_combine(&b, &a).unwrap());
            assert!(ab.var[0] <= a.var[0].min(b.var[0]));
            let wide = g(&[b.mean[0]], &[1e12]);
            let lim = poe_combine(&a, &wide).unwrap();
            assert!((lim.mean[0] - a.mean[0]).abs() < 1e-6 && (lim.var[0] - a.var[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn reparam_moments_and_limits() {
        let d = g(&[1.5, -2.0], &[0.25, 4.0]);
        let mut rng = rng_from_seed(6);
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| reparam_sample(&d, &mut rng)).collect();
        for k in 0..2 {
            let m = draws.iter().map(|x| x[k]).sum::<f64>() / n as f64;
            let v = draws.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((m - d.mean[k]).abs() < 4.0 * (d.var[k] / n as f64).sqrt());
            // variance of the sample variance is about 2 v^2 / n
            assert!((v - d.var[k]).abs() < 4.0 * d.var[k] * (2.0 / n as f64).sqrt());
        }
        let tight = g(&[0.3], &[1e-30]);
        assert!((reparam_sample(&tight, &mut rng)[0] - 0.3).abs() < 1e-12);
        assert_eq!(reparam_sample(&d, &mut rng_from_seed(1)), reparam_sample(&d, &mut rng_from_seed(1)));
    }

    #[test]
    fn sequence_encoder_contracts() {
        let enc = SequenceEncoder::init(6, 3, &small_cfg(), &mut rng_from_seed(3));
        let out = enc.encode(&[1, 4, 2, 5, 5], &[true, true, true, false, false]).unwrap();
        assert!(out.var.iter().all(|&v| v > 0.0));
        let other = enc.encode(&[1, 4, 2, 0, 3], &[true, true, true, false, false]).unwrap();
        assert_eq!(out, other);
        assert!(enc.encode(&[1, 2], &[false, false]).is_err());
        assert!(enc.encode(&[1, 9], &[true, true]).is_err());
        assert_eq!(enc.encode(&[1, 4, 2], &[true; 3]).unwrap(), out);
    }

    #[test]
    fn condition_encoder_contracts() {
        let enc = ConditionEncoder::init(3, 2, &small_cfg(), &mut rng_from_seed(3));
        let a = enc.encode(&[1.0, 0.0, 1.0]).unwrap();
        assert!(a.var.iter().all(|&v| v > 0.0));
        assert_eq!(a, enc.encode(&[1.0, 0.0, 1.0]).unwrap());
        assert!(enc.encode(&[1.0, 0.0]).is_err());
    }

    /// Scalar `sum(a * mean) + sum(c * var)` for fixed random weights.
    fn head_objective<G: ParamGroup>(
        group: &G,
        run: &dyn for<'a> Fn(&'a G, &mut Tape<'a>, Option<usize>) -> GaussianVars,
        weights: &(Vec<f64>, Vec<f64>),
        grads: Option<&mut Vec<Tensor>>,
    ) -> f64 {
        let mut tape = Tape::new();
        let out = run(group, &mut tape, grads.as_ref().map(|_| 0));
        let a = tape.constant(Tensor::row_vector(weights.0.clone()));
        let c = tape.constant(Tensor::row_vector(weights.1.clone()));
        let am = tape.mul(out.mean, a);
        let cv = tape.mul(out.var, c);
        let s = tape.add(am, cv);
        let total = tape.sum(s);
        if let Some(gr) = grads {
            tape.backward(total, gr);
        }
        tape.scalar(total)
    }

    fn check_fd<G: ParamGroup + Clone>(
        group: &G,
        run: &dyn for<'a> Fn(&'a G, &mut Tape<'a>, Option<usize>) -> GaussianVars,
        out: usize,
    ) {
        let mut rng = rng_from_seed(17);
        let weights = (
            (0..out).map(|_| standard_normal(&mut rng)).collect(),
            (0..out).map(|_| standard_normal(&mut rng)).collect(),
        );
        let mut grads = group.zeros_like();
        head_objective(group, run, &weights, Some(&mut grads));
        let h = 1e-6;
        for (ti, gt) in grads.iter().enumerate() {
            for k in 0..gt.len() {
                let mut p = group.clone();
                p.tensors_mut()[ti].data_mut()[k] += h;
                let mut m = group.clone();
                m.tensors_mut()[ti].data_mut()[k] -= h;
                let fd = (head_objective(&p, run, &weights, None) - head_objective(&m, run, &weights, None)) / (2.0 * h);
                let an = gt.data()[k];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "tensor {ti}[{k}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn sequence_encoder_gradients_match_finite_differences() {
        let enc = SequenceEncoder::init(6, 3, &small_cfg(), &mut rng_from_seed(5));
        let tokens = [1usize, 4, 2, 5];
        check_fd(&enc, &|e, tape, slot| e.on_tape(tape, slot, &tokens), 3);
    }

    #[test]
    fn condition_encoder_and_poe_gradients_match_finite_differences() {
        let pair = ExpertPair::init(6, Some(3), 2, &small_cfg(), &mut rng_from_seed(8));
        let tokens = [3usize, 0, 5];
        let y = [0.0, 1.0, 1.0];
        check_fd(&pair, &|p, tape, slot| p.on_tape(tape, slot, &tokens, &y), 2);
    }

    #[test]
    fn tape_poe_matches_closed_form() {
        let pair = ExpertPair::init(6, Some(3), 2, &small_cfg(), &mut rng_from_seed(8));
        let tokens = [3usize, 0, 5];
        let y = [0.0, 1.0, 1.0];
        let mut tape = Tape::new();
        let on = pair.on_tape(&mut tape, None, &tokens, &y).read(&tape);
        let direct = pair.encode(&tokens, &[true; 3], &y).unwrap();
        for i in 0..2 {
            assert!((on.mean[i] - direct.mean[i]).abs() < 1e-14);
            assert!((on.var[i] - direct.var[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn encoder_groups_have_unique_names() {
        let enc = LocalEncoders::init_evac(6, 4, 3, &small_cfg(), &mut rng_from_seed(1));
        let names = enc.names();
        assert_eq!(names.len(), enc.num_tensors());
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        let (_, ow, ob) = enc.offsets();
        assert_eq!(ow, enc.z.num_tensors());
        assert_eq!(ob - ow, enc.w.as_ref().unwrap().num_tensors());
    }
}
