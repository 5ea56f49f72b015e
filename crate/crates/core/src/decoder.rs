//! Autoregressive likelihood over visit tokens.
//!
//! The latent vector is tiled to a coarse length and up-sampled by
//! stride-`k` transposed convolutions (kernel = stride, so each layer is a
//! matrix product followed by a row-major reshape). The previous token's
//! embedding is added to the up-sampled stream, and a stack of gated,
//! residual, causal dilated convolutions produces per-step logits.
//!
//! Position `t` (0-based) sees the embedding of token `t - 1`, so the
//! logits predicting token `t` depend on `z` and on at most
//! [`receptive_field`] previous tokens, and position 0 depends on `z` only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{EvaError, Result};
use crate::params::{bind, init_weight, ParamGroup};
use crate::tensor::{log_softmax, sigmoid, Tensor};

/// Number of past tokens conditioned on by kernel `u` with the given dilations.
pub fn receptive_field(kernel_size: usize, dilations: &[usize]) -> usize {
    (kernel_size - 1) * dilations.iter().sum::<usize>() + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Size of the output categorical: data tokens plus EOS.
    pub num_tokens: usize,
    pub latent_dim: usize,
    pub channels: usize,
    pub deconv_layers: usize,
    pub deconv_stride: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub t_max: usize,
}

impl DecoderConfig {
    /// Desk-scale defaults for a vocabulary with `num_tokens` outputs.
    pub fn with_tokens(num_tokens: usize) -> Self {
        Self {
            num_tokens,
            latent_dim: 16,
            channels: 64,
            deconv_layers: 2,
            deconv_stride: 2,
            kernel_size: 3,
            dilations: vec![1, 2, 4],
            t_max: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EvaError::Config(format!("decoder: {m}")));
        if self.num_tokens < 2 {
            return bad("num_tokens must be at least 2");
        }
        if self.latent_dim == 0 || self.channels == 0 {
            return bad("latent_dim and channels must be positive");
        }
        if self.kernel_size == 0 {
            return bad("kernel_size must be at least 1");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilations must be non-empty and positive");
        }
        if self.deconv_stride == 0 {
            return bad("deconv_stride must be positive");
        }
        if self.t_max == 0 {
            return bad("t_max must be positive");
        }
        if self.deconv_layers == 0 && self.latent_dim != self.channels {
            return bad("without up-sampling layers latent_dim must equal channels");
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.kernel_size, &self.dilations)
    }

    /// Longest token row the decoder handles (visits plus EOS).
    pub fn max_steps(&self) -> usize {
        self.t_max + 1
    }

    fn upsample_factor(&self) -> usize {
        self.deconv_stride.pow(self.deconv_layers as u32)
    }

    /// Length of the tiled latent before up-sampling.
    pub fn base_len(&self) -> usize {
        self.max_steps().div_ceil(self.upsample_factor())
    }
}

/// Decoder weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub deconv_w: Vec<Tensor>,
    pub deconv_b: Vec<Tensor>,
    pub embed: Tensor,
    pub conv_w: Vec<Tensor>,
    pub conv_b: Vec<Tensor>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl DecoderParams {
    pub fn init(cfg: &DecoderConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let s = cfg.deconv_stride;
        let mut deconv_w = Vec::new();
        let mut deconv_b = Vec::new();
        for l in 0..cfg.deconv_layers {
            let cin = if l == 0 { cfg.latent_dim } else { c };
            deconv_w.push(init_weight(rng, cin, s * c, cin, 1.0));
            deconv_b.push(Tensor::zeros(1, s * c));
        }
        let conv_w = cfg
            .dilations
            .iter()
            .map(|_| init_weight(rng, cfg.kernel_size * c, 2 * c, cfg.kernel_size * c, 1.0))
            .collect();
        let conv_b = cfg.dilations.iter().map(|_| Tensor::zeros(1, 2 * c)).collect();
        Self {
            deconv_w,
            deconv_b,
            embed: init_weight(rng, cfg.num_tokens, c, 1, 0.3),
            conv_w,
            conv_b,
            out_w: init_weight(rng, c, cfg.num_tokens, c, 0.5),
            out_b: Tensor::zeros(1, cfg.num_tokens),
        }
    }

    /// All-zero weights: every step predicts the uniform distribution.
    pub fn zeros(cfg: &DecoderConfig) -> Self {
        let mut p = Self::init(cfg, &mut crate::rng::rng_from_seed(0));
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        p
    }

    pub fn check_shapes(&self, cfg: &DecoderConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        let ok = self.tensors().len() == expected.tensors().len()
            && self
                .tensors()
                .iter()
                .zip(expected.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if ok {
            Ok(())
        } else {
            Err(EvaError::Config("decoder parameters do not match config".into()))
        }
    }
}

impl ParamGroup for DecoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::new();
        for (w, b) in self.deconv_w.iter().zip(&self.deconv_b) {
            v.push(w);
            v.push(b);
        }
        v.push(&self.embed);
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            v.push(w);
            v.push(b);
        }
        v.push(&self.out_w);
        v.push(&self.out_b);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for (w, b) in self.deconv_w.iter_mut().zip(self.deconv_b.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.embed);
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in 0..self.deconv_w.len() {
            v.push(format!("decoder.deconv{l}.weight"));
            v.push(format!("decoder.deconv{l}.bias"));
        }
        v.push("decoder.embed".into());
        for l in 0..self.conv_w.len() {
            v.push(format!("decoder.conv{l}.weight"));
            v.push(format!("decoder.conv{l}.bias"));
        }
        v.push("decoder.out.weight".into());
        v.push("decoder.out.bias".into());
        v
    }
}

/// Records the decoder forward pass on `tape` and returns the `steps x
/// num_tokens` logits. `inputs[t]` is the token fed at position `t`
/// (`None` at position 0).
pub fn forward_on_tape<'a>(
    cfg: &DecoderConfig,
    params: &'a DecoderParams,
    tape: &mut Tape<'a>,
    slot_offset: Option<usize>,
    z: Var,
    inputs: Vec<Option<usize>>,
) -> Var {
    let vars = bind(params, tape, slot_offset);
    let n_deconv = params.deconv_w.len();
    let n_conv = params.conv_w.len();
    let c = cfg.channels;
    let steps = inputs.len();

    let mut h = tape.tile_rows(z, cfg.base_len());
    for l in 0..n_deconv {
        let (w, b) = (vars[2 * l], vars[2 * l + 1]);
        let rows = tape.value(h).rows();
        let lin = tape.matmul(h, w);
        let lin = tape.add_row(lin, b);
        let up = tape.reshape(lin, rows * cfg.deconv_stride, c);
        h = tape.tanh(up);
    }
    let stream = tape.rows(h, 0, steps);

    let embed = vars[2 * n_deconv];
    let emb = tape.gather(embed, inputs);
    let mut h = tape.add(stream, emb);

    for (l, &d) in cfg.dilations.iter().enumerate() {
        let w = vars[2 * n_deconv + 1 + 2 * l];
        let b = vars[2 * n_deconv + 2 + 2 * l];
        let a = tape.causal_conv(h, w, cfg.kernel_size, d);
        let a = tape.add_row(a, b);
        let filt = tape.slice_cols(a, 0, c);
        let gate = tape.slice_cols(a, c, c);
        let filt = tape.tanh(filt);
        let gate = tape.sigmoid(gate);
        let g = tape.mul(filt, gate);
        h = tape.add(h, g);
    }
    let out_w = vars[2 * n_deconv + 1 + 2 * n_conv];
    let out_b = vars[2 * n_deconv + 2 + 2 * n_conv];
    let logits = tape.matmul(h, out_w);
    tape.add_row(logits, out_b)
}

/// Teacher-forcing inputs for predicting `targets`.
pub fn shifted_inputs(targets: &[usize]) -> Vec<Option<usize>> {
    std::iter::once(None)
        .chain(targets.iter().take(targets.len().saturating_sub(1)).map(|&t| Some(t)))
        .collect()
}

fn check_tokens(cfg: &DecoderConfig, tokens: &[usize]) -> Result<()> {
    if tokens.len() > cfg.max_steps() {
        return Err(EvaError::invalid(format!(
            "sequence of {} steps exceeds t_max + 1 = {}",
            tokens.len(),
            cfg.max_steps()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.num_tokens) {
        return Err(EvaError::TokenOutOfRange {
            token: t,
            size: cfg.num_tokens,
        });
    }
    Ok(())
}

fn check_latent(cfg: &DecoderConfig, z: &[f64]) -> Result<()> {
    if z.len() != cfg.latent_dim {
        return Err(EvaError::invalid(format!(
            "latent has dimension {}, decoder expects {}",
            z.len(),
            cfg.latent_dim
        )));
    }
    Ok(())
}

/// Logits for each position of `tokens`: row `t` is the distribution of
/// `tokens[t]` given `z` and `tokens[..t]`.
pub fn decode_logits(cfg: &DecoderConfig, params: &DecoderParams, z: &[f64], tokens: &[usize]) -> Result<Tensor> {
    check_latent(cfg, z)?;
    check_tokens(cfg, tokens)?;
    if tokens.is_empty() {
        return Ok(Tensor::zeros(0, cfg.num_tokens));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::row_vector(z.to_vec()));
    let logits = forward_on_tape(cfg, params, &mut tape, None, zv, shifted_inputs(tokens));
    Ok(tape.value(logits).clone())
}

/// `sum_t mask_t * ln Categorical(tokens[t] | softmax(logits_t))`.
pub fn sequence_log_likelihood(
    cfg: &DecoderConfig,
    params: &DecoderParams,
    z: &[f64],
    tokens: &[usize],
    mask: &[bool],
) -> Result<f64> {
    let real = real_prefix(tokens, mask)?;
    let logits = decode_logits(cfg, params, z, real)?;
    if !logits.is_finite() {
        return Err(EvaError::numerical("decoder logits"));
    }
    Ok(real
        .iter()
        .enumerate()
        .map(|(t, &x)| log_softmax(logits.row(t))[x])
        .sum())
}

/// Gradients of [`sequence_log_likelihood`].
#[derive(Clone, Debug)]
pub struct LikelihoodGrad {
    pub value: f64,
    pub params: Vec<Tensor>,
    pub z: Vec<f64>,
}

pub fn sequence_log_likelihood_grad(
    cfg: &DecoderConfig,
    params: &DecoderParams,
    z: &[f64],
    tokens: &[usize],
    mask: &[bool],
) -> Result<LikelihoodGrad> {
    let real = real_prefix(tokens, mask)?;
    check_latent(cfg, z)?;
    check_tokens(cfg, real)?;
    let n = params.num_tensors();
    let mut grads = params.zeros_like();
    grads.push(Tensor::zeros(1, z.len()));
    let mut tape = Tape::new();
    let zv = tape.input(Tensor::row_vector(z.to_vec()), n);
    let logits = forward_on_tape(cfg, params, &mut tape, Some(0), zv, shifted_inputs(real));
    if !tape.value(logits).is_finite() {
        return Err(EvaError::numerical("decoder logits"));
    }
    let ll = tape.log_softmax_dot(logits, one_hot(real, cfg.num_tokens));
    tape.backward(ll, &mut grads);
    let zg = grads.pop().expect("latent slot").into_data();
    Ok(LikelihoodGrad {
        value: tape.scalar(ll),
        params: grads,
        z: zg,
    })
}

fn real_prefix<'t>(tokens: &'t [usize], mask: &[bool]) -> Result<&'t [usize]> {
    if mask.len() != tokens.len() {
        return Err(EvaError::invalid("mask length differs from token length"));
    }
    let n = mask.iter().take_while(|&&m| m).count();
    if mask[n..].iter().any(|&m| m) {
        return Err(EvaError::invalid("mask must be a prefix of real steps"));
    }
    Ok(&tokens[..n])
}

pub fn one_hot(tokens: &[usize], width: usize) -> Tensor {
    let mut t = Tensor::zeros(tokens.len(), width);
    for (r, &x) in tokens.iter().enumerate() {
        t.set(r, x, 1.0);
    }
    t
}

/// Output of [`ancestral_sample`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledSequence {
    /// Visit tokens, EOS excluded.
    pub body: Vec<usize>,
    /// Whether EOS was drawn before the length cap.
    pub terminated: bool,
}

/// Step-by-step decoder state for sampling; each step costs one position
/// rather than a full re-decode of the prefix.
pub struct IncrementalDecoder<'p> {
    cfg: &'p DecoderConfig,
    params: &'p DecoderParams,
    stream: Tensor,
    /// `layers[l]` holds the rows fed into conv layer `l`; the last entry
    /// holds the stack output.
    layers: Vec<Vec<Vec<f64>>>,
}

impl<'p> IncrementalDecoder<'p> {
    pub fn new(cfg: &'p DecoderConfig, params: &'p DecoderParams, z: &[f64]) -> Result<Self> {
        check_latent(cfg, z)?;
        let mut h = Tensor::from_fn(cfg.base_len(), cfg.latent_dim, |_, c| z[c]);
        for (w, b) in params.deconv_w.iter().zip(&params.deconv_b) {
            let mut lin = h.matmul(w);
            for r in 0..lin.rows() {
                for (x, bv) in lin.row_mut(r).iter_mut().zip(b.data()) {
                    *x += bv;
                }
            }
            let rows = lin.rows() * cfg.deconv_stride;
            h = lin.reshaped(rows, cfg.channels).map(f64::tanh);
        }
        Ok(Self {
            cfg,
            params,
            stream: h,
            layers: vec![Vec::new(); cfg.dilations.len() + 1],
        })
    }

    pub fn position(&self) -> usize {
        self.layers[0].len()
    }

    /// Feeds the previous token (`None` at the first position) and returns
    /// the logits for the current position.
    pub fn step(&mut self, prev: Option<usize>) -> Result<Vec<f64>> {
        let t = self.position();
        if t >= self.cfg.max_steps() {
            return Err(EvaError::invalid("decoder ran past t_max + 1 steps"));
        }
        let c = self.cfg.channels;
        let mut x: Vec<f64> = self.stream.row(t).to_vec();
        if let Some(tok) = prev {
            if tok >= self.cfg.num_tokens {
                return Err(EvaError::TokenOutOfRange {
                    token: tok,
                    size: self.cfg.num_tokens,
                });
            }
            for (a, e) in x.iter_mut().zip(self.params.embed.row(tok)) {
                *a += e;
            }
        }
        self.layers[0].push(x);
        let u = self.cfg.kernel_size;
        for (l, &d) in self.cfg.dilations.iter().enumerate() {
            let w = &self.params.conv_w[l];
            let mut a = self.params.conv_b[l].data().to_vec();
            for j in 0..u {
                let back = (u - 1 - j) * d;
                if back > t {
                    continue;
                }
                let src = &self.layers[l][t - back];
                for (p, &xv) in src.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (o, &wv) in a.iter_mut().zip(w.row(j * c + p)) {
                        *o += xv * wv;
                    }
                }
            }
            let prev_h = &self.layers[l][t];
            let next: Vec<f64> = (0..c)
                .map(|q| prev_h[q] + a[q].tanh() * sigmoid(a[c + q]))
                .collect();
            self.layers[l + 1].push(next);
        }
        let h = self.layers.last().expect("output layer").last().expect("current row");
        let mut logits = self.params.out_b.data().to_vec();
        for (p, &hv) in h.iter().enumerate() {
            for (o, &wv) in logits.iter_mut().zip(self.params.out_w.row(p)) {
                *o += hv * wv;
            }
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(EvaError::numerical("decoder logits"));
        }
        Ok(logits)
    }
}

/// Draws a token sequence from the decoder. Temperature 0 takes the argmax
/// (lowest index on ties). Stops at EOS (`eos`) or after `t_max` visits.
pub fn ancestral_sample(
    cfg: &DecoderConfig,
    params: &DecoderParams,
    z: &[f64],
    eos: usize,
    t_max: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<SampledSequence> {
    if !(temperature >= 0.0) {
        return Err(EvaError::invalid("temperature must be non-negative"));
    }
    let t_max = t_max.min(cfg.t_max);
    let mut dec = IncrementalDecoder::new(cfg, params, z)?;
    let mut body = Vec::new();
    let mut prev = None;
    while body.len() < t_max {
        let logits = dec.step(prev)?;
        let tok = draw(&logits, temperature, rng);
        if tok == eos {
            return Ok(SampledSequence {
                body,
                terminated: true,
            });
        }
        body.push(tok);
        prev = Some(tok);
    }
    Ok(SampledSequence {
        body,
        terminated: false,
    })
}

pub(crate) fn draw(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    crate::rng::sample_categorical(rng, &probs)
}
