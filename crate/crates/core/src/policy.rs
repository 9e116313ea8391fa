//! The generative model: a shared MLP trunk over (state, task embedding,
//! normalized step) with three heads — forward Gaussian policy, backward
//! Gaussian policy, and a scalar coefficient — plus a permutation-invariant
//! conditioning encoder.
//!
//! Means are parameterized residually (μ(s) = s + Δ(s)) so a freshly zeroed
//! model is the identity map, and scales go through softplus plus a floor so
//! the densities stay well-defined for every reachable parameter vector.
//!
//! Everything is differentiated by hand. Forward passes retain caches;
//! backward passes accumulate into a flat gradient the same length as the
//! flat parameter vector, and also return the gradient with respect to the
//! anchor state so sampling chains can be unrolled reverse-mode.

use std::fs::File;
use std::io::{BufWriter, Read, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{
    self, Activation, ForwardTrace, MlpSpec, OutputKind, ParameterVector,
};
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LOHP-PHI";
pub const CHECKPOINT_VERSION: u16 = 1;

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;

/// Architecture of the generative model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PolicySpec {
    /// Dim of the weight vectors being generated.
    pub state_dim: usize,
    /// Conditioning encoder widths `[dim_x, ..., embed]`; empty disables
    /// conditioning entirely.
    pub encoder_widths: Vec<usize>,
    /// Trunk hidden widths; the trunk input is `state_dim + embed + 1` (the
    /// +1 is the normalized step t/N).
    pub trunk_hidden: Vec<usize>,
    /// Additive lower bound for every Gaussian scale.
    pub sigma_floor: f64,
}

impl PolicySpec {
    pub fn new(
        state_dim: usize,
        encoder_widths: Vec<usize>,
        trunk_hidden: Vec<usize>,
        sigma_floor: f64,
    ) -> Result<Self> {
        let spec = Self {
            state_dim,
            encoder_widths,
            trunk_hidden,
            sigma_floor,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::InvalidArgument("state_dim must be > 0".into()));
        }
        if self.encoder_widths.len() == 1 {
            return Err(Error::InvalidArgument(
                "encoder needs >= 2 widths (or none at all)".into(),
            ));
        }
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("encoder widths must be >= 1".into()));
        }
        if self.trunk_hidden.is_empty() || self.trunk_hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(
                "trunk needs >= 1 nonzero hidden width".into(),
            ));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma_floor must be > 0, got {}",
                self.sigma_floor
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder_widths.last().copied().unwrap_or(0)
    }

    pub fn cond_input_dim(&self) -> usize {
        self.encoder_widths.first().copied().unwrap_or(0)
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.state_dim + self.embed_dim() + 1
    }

    pub fn trunk_out_dim(&self) -> usize {
        *self.trunk_hidden.last().unwrap()
    }

    fn encoder_spec(&self) -> Option<MlpSpec> {
        if self.encoder_widths.is_empty() {
            None
        } else {
            Some(
                MlpSpec::new(
                    self.encoder_widths.clone(),
                    Activation::Tanh,
                    OutputKind::Scalar,
                )
                .expect("validated widths"),
            )
        }
    }

    fn trunk_spec(&self) -> MlpSpec {
        let mut widths = vec![self.trunk_input_dim()];
        widths.extend_from_slice(&self.trunk_hidden);
        MlpSpec::new(widths, Activation::Tanh, OutputKind::Scalar).expect("validated widths")
    }

    pub fn param_count(&self) -> usize {
        let l = self.layout();
        l.coeff_b + 1
    }

    fn layout(&self) -> Layout {
        let enc_len = self
            .encoder_spec()
            .map(|s| s.param_count())
            .unwrap_or(0);
        let trunk_len = self.trunk_spec().param_count();
        let d = self.state_dim;
        let h = self.trunk_out_dim();
        let enc = 0..enc_len;
        let trunk = enc.end..enc.end + trunk_len;
        let fwd_w = trunk.end..trunk.end + 2 * d * h;
        let fwd_b = fwd_w.end..fwd_w.end + 2 * d;
        let bwd_w = fwd_b.end..fwd_b.end + 2 * d * h;
        let bwd_b = bwd_w.end..bwd_w.end + 2 * d;
        let coeff_w = bwd_b.end..bwd_b.end + h;
        let coeff_b = coeff_w.end;
        Layout {
            enc,
            trunk,
            fwd_w,
            fwd_b,
            bwd_w,
            bwd_b,
            coeff_w,
            coeff_b,
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    enc: std::ops::Range<usize>,
    trunk: std::ops::Range<usize>,
    fwd_w: std::ops::Range<usize>,
    fwd_b: std::ops::Range<usize>,
    bwd_w: std::ops::Range<usize>,
    bwd_b: std::ops::Range<usize>,
    coeff_w: std::ops::Range<usize>,
    coeff_b: usize,
}

/// Flat parameters of the generative model, with derived layout and
/// component specs cached (they are pure functions of the spec and sit on
/// the hot path).
#[derive(Debug, Clone)]
pub struct PolicyParams {
    spec: PolicySpec,
    values: Vec<f64>,
    layout: Layout,
    trunk_mlp: MlpSpec,
    encoder_mlp: Option<MlpSpec>,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.values == other.values
    }
}

impl PolicyParams {
    fn from_parts(spec: PolicySpec, values: Vec<f64>) -> Self {
        let layout = spec.layout();
        let trunk_mlp = spec.trunk_spec();
        let encoder_mlp = spec.encoder_spec();
        Self {
            spec,
            values,
            layout,
            trunk_mlp,
            encoder_mlp,
        }
    }

    pub fn zeros(spec: PolicySpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.param_count();
        Ok(Self::from_parts(spec, vec![0.0; n]))
    }

    /// Near-identity init: weights ~ N(0, scale²/fan_in) per layer, biases 0,
    /// except the raw-scale biases which are set to `sigma_bias` (so the
    /// initial σ is softplus(sigma_bias) + floor everywhere).
    pub fn init(spec: PolicySpec, weight_scale: f64, sigma_bias: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let layout = p.layout.clone();
        // Encoder + trunk: per-layer scaled Gaussians on weight blocks only.
        if let Some(enc) = p.encoder_mlp.clone() {
            init_mlp_block(&enc, &mut p.values[layout.enc.clone()], weight_scale, rng);
        }
        let trunk = p.trunk_mlp.clone();
        init_mlp_block(&trunk, &mut p.values[layout.trunk.clone()], weight_scale, rng);
        let h = p.spec.trunk_out_dim();
        let d = p.spec.state_dim;
        for i in layout.fwd_w.clone() {
            p.values[i] = rng.normal() * weight_scale / (h as f64).sqrt();
        }
        for i in layout.bwd_w.clone() {
            p.values[i] = rng.normal() * weight_scale / (h as f64).sqrt();
        }
        for i in layout.coeff_w.clone() {
            p.values[i] = rng.normal() * weight_scale / (h as f64).sqrt();
        }
        // Raw-scale biases: entries d..2d of each Gaussian head bias block.
        for j in 0..d {
            p.values[layout.fwd_b.start + d + j] = sigma_bias;
            p.values[layout.bwd_b.start + d + j] = sigma_bias;
        }
        Ok(p)
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn init_mlp_block(spec: &MlpSpec, block: &mut [f64], weight_scale: f64, rng: &mut Rng) {
    // Mirrors the flat layout of nn::MlpSpec: W (out×in) then b per layer.
    let mut offset = 0;
    for w in spec.layer_widths().windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        for i in 0..n_in * n_out {
            block[offset + i] = rng.normal() * weight_scale / (n_in as f64).sqrt();
        }
        offset += n_in * n_out + n_out; // biases stay zero
    }
}

/// Task conditioning: the unlabeled sample set (canonically ordered so the
/// encoding is permutation-invariant bit-for-bit) plus the normalized step.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    x: Matrix,
    pub t_norm: f64,
}

impl Conditioning {
    pub fn new(x: &Matrix) -> Self {
        Self {
            x: x.with_sorted_rows(),
            t_norm: 0.0,
        }
    }

    pub fn empty() -> Self {
        Self {
            x: Matrix::zeros(0, 0),
            t_norm: 0.0,
        }
    }

    pub fn at_time(&self, t: usize, n: usize) -> Self {
        Self {
            x: self.x.clone(),
            t_norm: t as f64 / n.max(1) as f64,
        }
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }
}

/// Which head a caller wants from [`policy_eval`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyHead {
    Forward,
    Backward,
    Coeff,
}

/// One head's Gaussian (μ, σ) plus the scalar coefficient output.
///
/// For `PolicyHead::Coeff` the Gaussian mirrors the forward head; the field
/// of interest is `log_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mu: ParameterVector,
    pub sigma: Vec<f64>,
    pub log_c: f64,
    pub sigma_floor: f64,
}

fn softplus(x: f64) -> f64 {
    // Stable: max(x,0) + ln(1 + e^{-|x|}).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pooled task embedding with the caches needed to backpropagate into the
/// encoder. Computed once per task and shared across anchor evaluations.
#[derive(Debug, Clone)]
pub(crate) struct EncodedTask {
    emb: Vec<f64>,
    trace: Option<ForwardTrace>,
    rows: usize,
}

pub(crate) fn encode_task(params: &PolicyParams, x: &Matrix) -> Result<EncodedTask> {
    let spec = &params.spec;
    let e = spec.embed_dim();
    let Some(enc_spec) = params.encoder_mlp.as_ref() else {
        return Ok(EncodedTask {
            emb: Vec::new(),
            trace: None,
            rows: 0,
        });
    };
    if x.rows() == 0 {
        return Ok(EncodedTask {
            emb: vec![0.0; e],
            trace: None,
            rows: 0,
        });
    }
    if x.cols() != spec.cond_input_dim() {
        return Err(Error::DimMismatch {
            context: "conditioning sample width",
            expected: spec.cond_input_dim(),
            actual: x.cols(),
        });
    }
    let layout = &params.layout;
    let trace = nn::forward_traced_raw(enc_spec, &params.values[layout.enc.clone()], x)?;
    let out = trace.output();
    let mut emb = vec![0.0; e];
    for r in 0..out.rows() {
        for (j, v) in emb.iter_mut().enumerate() {
            *v += out.get(r, j);
        }
    }
    for v in emb.iter_mut() {
        *v /= out.rows() as f64;
    }
    Ok(EncodedTask {
        emb,
        trace: Some(trace),
        rows: x.rows(),
    })
}

/// Accumulates d(loss)/d(embedding) into encoder parameter gradients.
pub(crate) fn encoder_backward(
    params: &PolicyParams,
    encoded: &EncodedTask,
    d_emb: &[f64],
    grad_out: &mut [f64],
) -> Result<()> {
    let Some(trace) = &encoded.trace else {
        return Ok(());
    };
    let enc_spec = params.encoder_mlp.as_ref().expect("trace implies encoder");
    let layout = &params.layout;
    // Mean pooling: every row receives d_emb / rows.
    let mut upstream = Matrix::zeros(encoded.rows, d_emb.len());
    for r in 0..encoded.rows {
        for (j, &d) in d_emb.iter().enumerate() {
            upstream.set(r, j, d / encoded.rows as f64);
        }
    }
    nn::backward_traced_raw(
        enc_spec,
        &params.values[layout.enc.clone()],
        trace,
        &upstream,
        &mut grad_out[layout.enc.clone()],
    )?;
    Ok(())
}

/// Full evaluation of trunk + all heads at one anchor state, with caches.
#[derive(Debug, Clone)]
pub(crate) struct AnchorEval {
    pub fwd_mu: Vec<f64>,
    pub fwd_sigma: Vec<f64>,
    pub bwd_mu: Vec<f64>,
    pub bwd_sigma: Vec<f64>,
    pub log_c: f64,
    trunk_trace: ForwardTrace,
    h: Vec<f64>,
    raw_sigma_f: Vec<f64>,
    raw_sigma_b: Vec<f64>,
}

pub(crate) fn eval_anchor(
    params: &PolicyParams,
    state: &[f64],
    encoded: &EncodedTask,
    t_norm: f64,
) -> Result<AnchorEval> {
    let spec = &params.spec;
    if state.len() != spec.state_dim {
        return Err(Error::DimMismatch {
            context: "policy state dim",
            expected: spec.state_dim,
            actual: state.len(),
        });
    }
    let layout = &params.layout;
    let mut input = Vec::with_capacity(spec.trunk_input_dim());
    input.extend_from_slice(state);
    input.extend_from_slice(&encoded.emb);
    input.push(t_norm);
    let trunk_trace = nn::forward_traced_raw(
        &params.trunk_mlp,
        &params.values[layout.trunk.clone()],
        &Matrix::from_rows(&[input])?,
    )?;
    // Activate the (linear) trunk output so the heads see bounded features.
    let h: Vec<f64> = trunk_trace.output().row(0).iter().map(|z| z.tanh()).collect();
    let d = spec.state_dim;
    let hw = spec.trunk_out_dim();
    let vals = &params.values;

    let head = |w_range: &std::ops::Range<usize>, b_range: &std::ops::Range<usize>| -> (Vec<f64>, Vec<f64>) {
        let w = &vals[w_range.clone()];
        let b = &vals[b_range.clone()];
        let mut mu = Vec::with_capacity(d);
        let mut raw_sigma = Vec::with_capacity(d);
        for j in 0..2 * d {
            let z = b[j] + crate::linalg::dot(&w[j * hw..(j + 1) * hw], &h);
            if j < d {
                mu.push(state[j] + z);
            } else {
                raw_sigma.push(z);
            }
        }
        (mu, raw_sigma)
    };
    let (fwd_mu, raw_sigma_f) = head(&layout.fwd_w, &layout.fwd_b);
    let (bwd_mu, raw_sigma_b) = head(&layout.bwd_w, &layout.bwd_b);
    let fwd_sigma: Vec<f64> = raw_sigma_f
        .iter()
        .map(|&r| softplus(r) + spec.sigma_floor)
        .collect();
    let bwd_sigma: Vec<f64> = raw_sigma_b
        .iter()
        .map(|&r| softplus(r) + spec.sigma_floor)
        .collect();
    let log_c = vals[layout.coeff_b] + crate::linalg::dot(&vals[layout.coeff_w.clone()], &h);
    Ok(AnchorEval {
        fwd_mu,
        fwd_sigma,
        bwd_mu,
        bwd_sigma,
        log_c,
        trunk_trace,
        h,
        raw_sigma_f,
        raw_sigma_b,
    })
}

/// Upstream gradients flowing into one anchor evaluation. σ-gradients are
/// with respect to the floored scales (conversion through softplus happens
/// inside the backward pass).
#[derive(Debug, Clone)]
pub(crate) struct AnchorUpstream {
    pub d_fwd_mu: Vec<f64>,
    pub d_fwd_sigma: Vec<f64>,
    pub d_bwd_mu: Vec<f64>,
    pub d_bwd_sigma: Vec<f64>,
    pub d_log_c: f64,
}

impl AnchorUpstream {
    pub fn zeros(d: usize) -> Self {
        Self {
            d_fwd_mu: vec![0.0; d],
            d_fwd_sigma: vec![0.0; d],
            d_bwd_mu: vec![0.0; d],
            d_bwd_sigma: vec![0.0; d],
            d_log_c: 0.0,
        }
    }

}

/// Reverse pass through one anchor: accumulates parameter gradients into
/// `grad_out` and embedding gradients into `d_emb_accum`, returning the
/// gradient with respect to the anchor state.
pub(crate) fn anchor_backward(
    params: &PolicyParams,
    eval: &AnchorEval,
    up: &AnchorUpstream,
    grad_out: &mut [f64],
    d_emb_accum: &mut [f64],
) -> Result<Vec<f64>> {
    let spec = &params.spec;
    let d = spec.state_dim;
    let hw = spec.trunk_out_dim();
    let layout = &params.layout;
    let vals = &params.values;
    let mut d_h = vec![0.0; hw];
    // Residual skip: μ = s + Δ contributes upstream μ-gradients directly to s.
    let mut d_state: Vec<f64> = up
        .d_fwd_mu
        .iter()
        .zip(&up.d_bwd_mu)
        .map(|(a, b)| a + b)
        .collect();

    let mut head_back = |w_range: &std::ops::Range<usize>,
                         b_range: &std::ops::Range<usize>,
                         d_mu: &[f64],
                         d_sigma: &[f64],
                         raw_sigma: &[f64],
                         d_h: &mut [f64]| {
        for j in 0..2 * d {
            let d_raw = if j < d {
                d_mu[j]
            } else {
                d_sigma[j - d] * sigmoid(raw_sigma[j - d])
            };
            if d_raw == 0.0 {
                continue;
            }
            crate::linalg::axpy(
                &mut grad_out[w_range.start + j * hw..w_range.start + (j + 1) * hw],
                d_raw,
                &eval.h,
            );
            crate::linalg::axpy(d_h, d_raw, &vals[w_range.start + j * hw..w_range.start + (j + 1) * hw]);
            grad_out[b_range.start + j] += d_raw;
        }
    };
    head_back(
        &layout.fwd_w,
        &layout.fwd_b,
        &up.d_fwd_mu,
        &up.d_fwd_sigma,
        &eval.raw_sigma_f,
        &mut d_h,
    );
    head_back(
        &layout.bwd_w,
        &layout.bwd_b,
        &up.d_bwd_mu,
        &up.d_bwd_sigma,
        &eval.raw_sigma_b,
        &mut d_h,
    );
    if up.d_log_c != 0.0 {
        crate::linalg::axpy(
            &mut grad_out[layout.coeff_w.clone()],
            up.d_log_c,
            &eval.h,
        );
        crate::linalg::axpy(&mut d_h, up.d_log_c, &vals[layout.coeff_w.clone()]);
        grad_out[layout.coeff_b] += up.d_log_c;
    }
    // Through the tanh on the trunk output, then the trunk itself.
    let d_trunk_out: Vec<f64> = d_h
        .iter()
        .zip(&eval.h)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    let d_input = nn::backward_traced_raw(
        &params.trunk_mlp,
        &vals[layout.trunk.clone()],
        &eval.trunk_trace,
        &Matrix::from_rows(&[d_trunk_out])?,
        &mut grad_out[layout.trunk.clone()],
    )?;
    let e = spec.embed_dim();
    for j in 0..d {
        d_state[j] += d_input.get(0, j);
    }
    for j in 0..e {
        d_emb_accum[j] += d_input.get(0, d + j);
    }
    // d_input[0, d+e] is the step-feature slot; time is not a parameter.
    Ok(d_state)
}

/// Evaluates the requested head at one state. Deterministic; σ ≥ floor.
pub fn policy_eval(
    params: &PolicyParams,
    state: &ParameterVector,
    cond: &Conditioning,
    head: PolicyHead,
) -> Result<PolicyOutput> {
    let encoded = encode_task(params, cond.x())?;
    let eval = eval_anchor(params, state.values(), &encoded, cond.t_norm)?;
    let (mu, sigma) = match head {
        PolicyHead::Forward | PolicyHead::Coeff => (eval.fwd_mu, eval.fwd_sigma),
        PolicyHead::Backward => (eval.bwd_mu, eval.bwd_sigma),
    };
    Ok(PolicyOutput {
        mu: ParameterVector::new(mu)?,
        sigma,
        log_c: eval.log_c,
        sigma_floor: params.spec.sigma_floor,
    })
}

pub(crate) fn diag_gaussian_log_prob(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for i in 0..x.len() {
        let z = (x[i] - mu[i]) / sigma[i];
        quad += z * z;
        log_det += (2.0 * std::f64::consts::PI * sigma[i] * sigma[i]).ln();
    }
    -0.5 * quad - 0.5 * log_det
}

/// Log-density together with its gradients wrt (x, μ, σ); the workhorse of
/// the balance-loss backward pass.
pub(crate) fn log_prob_parts(
    x: &[f64],
    mu: &[f64],
    sigma: &[f64],
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let lp = diag_gaussian_log_prob(x, mu, sigma);
    let (d_x, d_mu, d_sigma) = diag_gaussian_log_prob_grads(x, mu, sigma);
    (lp, d_x, d_mu, d_sigma)
}

/// d log N(x; μ, σ) with respect to x, μ, σ.
pub(crate) fn diag_gaussian_log_prob_grads(
    x: &[f64],
    mu: &[f64],
    sigma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut d_x = vec![0.0; n];
    let mut d_mu = vec![0.0; n];
    let mut d_sigma = vec![0.0; n];
    for i in 0..n {
        let diff = x[i] - mu[i];
        let inv_var = 1.0 / (sigma[i] * sigma[i]);
        d_x[i] = -diff * inv_var;
        d_mu[i] = diff * inv_var;
        d_sigma[i] = diff * diff * inv_var / sigma[i] - 1.0 / sigma[i];
    }
    (d_x, d_mu, d_sigma)
}

/// Log-density of a state under a head's diagonal Gaussian.
pub fn gaussian_log_prob(s_next: &ParameterVector, out: &PolicyOutput) -> Result<f64> {
    if s_next.dim() != out.mu.dim() {
        return Err(Error::DimMismatch {
            context: "gaussian_log_prob state dim",
            expected: out.mu.dim(),
            actual: s_next.dim(),
        });
    }
    if out.sigma.iter().any(|&s| s < out.sigma_floor) {
        return Err(Error::InvalidArgument(format!(
            "sigma below floor {} — scale invariant breached upstream",
            out.sigma_floor
        )));
    }
    Ok(diag_gaussian_log_prob(
        s_next.values(),
        out.mu.values(),
        &out.sigma,
    ))
}

/// A sampled inference trajectory with everything needed to replay it
/// deterministically: states, per-transition log-probs under both heads, and
/// the reparameterization noise.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineTrajectory {
    pub states: Vec<ParameterVector>,
    /// log P_fwd(s_{t+1} | s_t), one per transition.
    pub fwd_log_probs: Vec<f64>,
    /// log P_bwd(s_t | s_{t+1}), one per transition.
    pub bwd_log_probs: Vec<f64>,
    /// z_t with s_{t+1} = μ(s_t) + σ(s_t)⊙z_t.
    pub noises: Vec<Vec<f64>>,
}

impl OnlineTrajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &ParameterVector {
        self.states.last().unwrap()
    }
}

/// A sampled trajectory together with the anchor evaluations and task
/// encoding produced along the way, so a subsequent loss computation under
/// the same parameters can skip the forward regeneration.
#[derive(Debug, Clone)]
pub(crate) struct Rollout {
    pub traj: OnlineTrajectory,
    pub anchors: Vec<AnchorEval>,
    pub encoded: EncodedTask,
}

pub(crate) fn sample_rollout(
    params: &PolicyParams,
    s0: &ParameterVector,
    cond: &Conditioning,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<Rollout> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    let d = params.spec.state_dim;
    if s0.dim() != d {
        return Err(Error::DimMismatch {
            context: "initial state dim",
            expected: d,
            actual: s0.dim(),
        });
    }
    let encoded = encode_task(params, cond.x())?;
    let mut states = vec![s0.clone()];
    let mut fwd_log_probs = Vec::with_capacity(n_steps);
    let mut bwd_log_probs = Vec::with_capacity(n_steps);
    let mut noises = Vec::with_capacity(n_steps);
    let mut anchors = Vec::with_capacity(n_steps + 1);
    anchors.push(eval_anchor(params, s0.values(), &encoded, 0.0)?);
    for t in 0..n_steps {
        let z = rng.normal_vec(d);
        let anchor = anchors.last().unwrap();
        let next: Vec<f64> = anchor
            .fwd_mu
            .iter()
            .zip(&anchor.fwd_sigma)
            .zip(&z)
            .map(|((m, s), zi)| m + s * zi)
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("online state at step {}", t + 1)));
        }
        let flp = diag_gaussian_log_prob(&next, &anchor.fwd_mu, &anchor.fwd_sigma);
        let next_anchor = eval_anchor(params, &next, &encoded, (t + 1) as f64 / n_steps as f64)?;
        let blp = diag_gaussian_log_prob(
            states.last().unwrap().values(),
            &next_anchor.bwd_mu,
            &next_anchor.bwd_sigma,
        );
        if !flp.is_finite() || !blp.is_finite() {
            return Err(Error::NonFinite(format!("log-prob at step {}", t + 1)));
        }
        states.push(ParameterVector::new(next)?);
        fwd_log_probs.push(flp);
        bwd_log_probs.push(blp);
        noises.push(z);
        anchors.push(next_anchor);
    }
    Ok(Rollout {
        traj: OnlineTrajectory {
            states,
            fwd_log_probs,
            bwd_log_probs,
            noises,
        },
        anchors,
        encoded,
    })
}

/// Rolls the forward policy for `n_steps` transitions from `s0`.
pub fn sample_online_trajectory(
    params: &PolicyParams,
    s0: &ParameterVector,
    cond: &Conditioning,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<OnlineTrajectory> {
    Ok(sample_rollout(params, s0, cond, n_steps, rng)?.traj)
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "LOHP-PHI" | version u16 | state_dim u32
// | sigma_floor f64 | enc width count u32, widths u32... | trunk width count
// u32, widths u32... | param count u64 | values f64...
// ---------------------------------------------------------------------------

pub fn save_policy(path: &Path, params: &PolicyParams) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| -> Result<()> {
        w.write_all(bytes)?;
        Ok(())
    };
    put(CHECKPOINT_MAGIC)?;
    put(&CHECKPOINT_VERSION.to_le_bytes())?;
    let spec = &params.spec;
    put(&(spec.state_dim as u32).to_le_bytes())?;
    put(&spec.sigma_floor.to_le_bytes())?;
    put(&(spec.encoder_widths.len() as u32).to_le_bytes())?;
    for &wd in &spec.encoder_widths {
        put(&(wd as u32).to_le_bytes())?;
    }
    put(&(spec.trunk_hidden.len() as u32).to_le_bytes())?;
    for &wd in &spec.trunk_hidden {
        put(&(wd as u32).to_le_bytes())?;
    }
    put(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        put(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let fail = |pos: usize, m: &str| Error::Parse {
        offset: pos as u64,
        message: m.to_string(),
    };
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Parse {
                offset: *pos as u64,
                message: format!("truncated checkpoint: need {n} bytes"),
            });
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
        return Err(fail(0, "bad checkpoint magic"));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(8, "unsupported checkpoint version"));
    }
    let state_dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let sigma_floor = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let n_enc = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut encoder_widths = Vec::with_capacity(n_enc);
    for _ in 0..n_enc {
        encoder_widths.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
    }
    let n_trunk = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut trunk_hidden = Vec::with_capacity(n_trunk);
    for _ in 0..n_trunk {
        trunk_hidden.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
    }
    let spec = PolicySpec::new(state_dim, encoder_widths, trunk_hidden, sigma_floor)
        .map_err(|e| fail(pos, &e.to_string()))?;
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    if count != spec.param_count() {
        return Err(fail(pos, "parameter count does not match spec"));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
    }
    if pos != buf.len() {
        return Err(fail(pos, "trailing bytes in checkpoint"));
    }
    Ok(PolicyParams::from_parts(spec, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> PolicySpec {
        PolicySpec::new(3, vec![2, 4, 3], vec![5], DEFAULT_SIGMA_FLOOR).unwrap()
    }

    fn random_x(rng: &mut Rng, rows: usize) -> Matrix {
        Matrix::from_rows(&(0..rows).map(|_| rng.normal_vec(2)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_params_give_identity_mean_and_softplus_sigma() {
        let params = PolicyParams::zeros(tiny_spec()).unwrap();
        let mut rng = Rng::new(1);
        let s = nn::gaussian_sample(&mut rng, 3).unwrap();
        let cond = Conditioning::new(&random_x(&mut rng, 4));
        let out = policy_eval(&params, &s, &cond, PolicyHead::Forward).unwrap();
        assert_eq!(out.mu, s);
        let want_sigma = softplus(0.0) + DEFAULT_SIGMA_FLOOR;
        for &sg in &out.sigma {
            assert!((sg - want_sigma).abs() < 1e-15);
        }
        assert_eq!(out.log_c, 0.0);
        let bwd = policy_eval(&params, &s, &cond, PolicyHead::Backward).unwrap();
        assert_eq!(bwd.mu, s);
    }

    #[test]
    fn permutation_of_conditioning_is_bit_identical() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let params =
                PolicyParams::init(tiny_spec(), 0.5, -0.3, &mut rng).unwrap();
            let s = nn::gaussian_sample(&mut rng, 3).unwrap();
            let x = random_x(&mut rng, 6);
            // Build a shuffled copy of the rows.
            let mut order: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut order);
            let shuffled =
                Matrix::from_rows(&order.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
                    .unwrap();
            let a = policy_eval(&params, &s, &Conditioning::new(&x), PolicyHead::Forward).unwrap();
            let b = policy_eval(
                &params,
                &s,
                &Conditioning::new(&shuffled),
                PolicyHead::Forward,
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sigma_positivity_for_random_params() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let params = PolicyParams::init(tiny_spec(), 2.0, rng.normal() * 3.0, &mut rng).unwrap();
            let s = nn::gaussian_sample(&mut rng, 3).unwrap();
            let cond = Conditioning::new(&random_x(&mut rng, 3));
            for head in [PolicyHead::Forward, PolicyHead::Backward] {
                let out = policy_eval(&params, &s, &cond, head).unwrap();
                assert!(out.sigma.iter().all(|&sg| sg >= DEFAULT_SIGMA_FLOOR));
            }
        }
    }

    /// Straight-line duplicate of the full forward evaluation for the tiny
    /// spec, reading the flat layout directly.
    fn duplicate_eval(
        params: &PolicyParams,
        s: &[f64; 3],
        x: &Matrix,
        t_norm: f64,
    ) -> (Vec<f64>, Vec<f64>, f64) {
        let v = params.values();
        // encoder [2,4,3]: W0 (4x2) @0, b0 @8, W1 (3x4) @12, b1 @24; len 27
        let sorted = x.with_sorted_rows();
        let mut emb = [0.0f64; 3];
        for r in 0..sorted.rows() {
            let xi = sorted.row(r);
            let mut hid = [0.0f64; 4];
            for j in 0..4 {
                hid[j] = (v[j * 2] * xi[0] + v[j * 2 + 1] * xi[1] + v[8 + j]).tanh();
            }
            for j in 0..3 {
                let base = 12 + j * 4;
                emb[j] += v[base] * hid[0]
                    + v[base + 1] * hid[1]
                    + v[base + 2] * hid[2]
                    + v[base + 3] * hid[3]
                    + v[24 + j];
            }
        }
        for e in emb.iter_mut() {
            *e /= sorted.rows() as f64;
        }
        // trunk [7,5]: W (5x7) @27, b @62; len 40 → trunk block 27..67
        let input = [s[0], s[1], s[2], emb[0], emb[1], emb[2], t_norm];
        let mut h = [0.0f64; 5];
        for j in 0..5 {
            let mut z = v[27 + 35 + j];
            for k in 0..7 {
                z += v[27 + j * 7 + k] * input[k];
            }
            h[j] = z.tanh(); // trunk output then tanh
        }
        // fwd head: W (6x5) @67, b (6) @97
        let mut mu = vec![0.0f64; 3];
        let mut sigma = vec![0.0f64; 3];
        for j in 0..6 {
            let mut z = v[97 + j];
            for k in 0..5 {
                z += v[67 + j * 5 + k] * h[k];
            }
            if j < 3 {
                mu[j] = s[j] + z;
            } else {
                sigma[j - 3] = softplus(z) + params.spec().sigma_floor;
            }
        }
        // bwd head 103..139; coeff W (5) @139, b @144
        let mut log_c = v[144];
        for k in 0..5 {
            log_c += v[139 + k] * h[k];
        }
        (mu, sigma, log_c)
    }

    #[test]
    fn eval_matches_duplicate_implementation() {
        let mut rng = Rng::new(4);
        let spec = tiny_spec();
        assert_eq!(spec.param_count(), 145);
        for _ in 0..10 {
            let params = PolicyParams::init(spec.clone(), 1.0, 0.2, &mut rng).unwrap();
            let s = [rng.normal(), rng.normal(), rng.normal()];
            let x = random_x(&mut rng, 5);
            let mut cond = Conditioning::new(&x);
            cond.t_norm = 0.4;
            let out = policy_eval(
                &params,
                &ParameterVector::new(s.to_vec()).unwrap(),
                &cond,
                PolicyHead::Forward,
            )
            .unwrap();
            let (mu, sigma, log_c) = duplicate_eval(&params, &s, &x, 0.4);
            for i in 0..3 {
                assert!((out.mu.values()[i] - mu[i]).abs() <= 1e-10);
                assert!((out.sigma[i] - sigma[i]).abs() <= 1e-10);
            }
            assert!((out.log_c - log_c).abs() <= 1e-10);
        }
    }

    #[test]
    fn log_prob_standard_normal_values() {
        // d=1, μ=0, σ=1, s=0 → −½ln(2π).
        let out = PolicyOutput {
            mu: ParameterVector::zeros(1),
            sigma: vec![1.0],
            log_c: 0.0,
            sigma_floor: 1e-3,
        };
        let lp = gaussian_log_prob(&ParameterVector::zeros(1), &out).unwrap();
        assert!((lp - (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((lp - (-0.918938533204673)).abs() < 1e-12);

        // d=2, μ=0, σ=1, s=(1,1) → −1 − ln(2π).
        let out2 = PolicyOutput {
            mu: ParameterVector::zeros(2),
            sigma: vec![1.0, 1.0],
            log_c: 0.0,
            sigma_floor: 1e-3,
        };
        let lp2 = gaussian_log_prob(&ParameterVector::new(vec![1.0, 1.0]).unwrap(), &out2).unwrap();
        assert!((lp2 - (-1.0 - (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((lp2 - (-2.837877066409345)).abs() < 1e-12);
    }

    #[test]
    fn log_prob_rejects_sigma_below_floor() {
        let out = PolicyOutput {
            mu: ParameterVector::zeros(1),
            sigma: vec![1e-6],
            log_c: 0.0,
            sigma_floor: 1e-3,
        };
        assert!(gaussian_log_prob(&ParameterVector::zeros(1), &out).is_err());
    }

    #[test]
    fn log_prob_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let d = 1 + rng.index(4);
            let x = rng.normal_vec(d);
            let mu = rng.normal_vec(d);
            let sigma: Vec<f64> = (0..d).map(|_| 0.3 + rng.uniform() * 2.0).collect();
            let (d_x, d_mu, d_sigma) = diag_gaussian_log_prob_grads(&x, &mu, &sigma);
            let h = 1e-6;
            for i in 0..d {
                let fd = |which: u8| {
                    let mut xu = x.clone();
                    let mut mu_u = mu.clone();
                    let mut sg_u = sigma.clone();
                    let mut xd = x.clone();
                    let mut mu_d = mu.clone();
                    let mut sg_d = sigma.clone();
                    match which {
                        0 => {
                            xu[i] += h;
                            xd[i] -= h;
                        }
                        1 => {
                            mu_u[i] += h;
                            mu_d[i] -= h;
                        }
                        _ => {
                            sg_u[i] += h;
                            sg_d[i] -= h;
                        }
                    }
                    (diag_gaussian_log_prob(&xu, &mu_u, &sg_u)
                        - diag_gaussian_log_prob(&xd, &mu_d, &sg_d))
                        / (2.0 * h)
                };
                for (which, g) in [(0u8, d_x[i]), (1, d_mu[i]), (2, d_sigma[i])] {
                    let f = fd(which);
                    let denom = f.abs().max(g.abs());
                    if denom > 1e-6 {
                        assert!((f - g).abs() / denom < 1e-4, "which {which}: {f} vs {g}");
                    }
                }
            }
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        // Scalar projections of every head output, differentiated wrt φ.
        let mut rng = Rng::new(6);
        let spec = tiny_spec();
        for case in 0..20 {
            let params = PolicyParams::init(spec.clone(), 0.8, 0.1, &mut rng).unwrap();
            let s = rng.normal_vec(3);
            let x = random_x(&mut rng, 3);
            let t_norm = rng.uniform();
            let w_mu = rng.normal_vec(3);
            let w_sigma = rng.normal_vec(3);
            let use_bwd = case % 2 == 1;

            let scalar = |p: &PolicyParams| -> f64 {
                let enc = encode_task(p, &x.with_sorted_rows()).unwrap();
                let ev = eval_anchor(p, &s, &enc, t_norm).unwrap();
                let (mu, sigma) = if use_bwd {
                    (&ev.bwd_mu, &ev.bwd_sigma)
                } else {
                    (&ev.fwd_mu, &ev.fwd_sigma)
                };
                crate::linalg::dot(mu, &w_mu) + crate::linalg::dot(sigma, &w_sigma) + 0.7 * ev.log_c
            };

            // Analytic gradient.
            let enc = encode_task(&params, &x.with_sorted_rows()).unwrap();
            let ev = eval_anchor(&params, &s, &enc, t_norm).unwrap();
            let mut up = AnchorUpstream::zeros(3);
            if use_bwd {
                up.d_bwd_mu = w_mu.clone();
                up.d_bwd_sigma = w_sigma.clone();
            } else {
                up.d_fwd_mu = w_mu.clone();
                up.d_fwd_sigma = w_sigma.clone();
            }
            up.d_log_c = 0.7;
            let mut grad = vec![0.0; params.dim()];
            let mut d_emb = vec![0.0; spec.embed_dim()];
            anchor_backward(&params, &ev, &up, &mut grad, &mut d_emb).unwrap();
            encoder_backward(&params, &enc, &d_emb, &mut grad).unwrap();

            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            for i in 0..params.dim() {
                let mut up_p = params.clone();
                up_p.values_mut()[i] += h;
                let mut dn_p = params.clone();
                dn_p.values_mut()[i] -= h;
                let fd = (scalar(&up_p) - scalar(&dn_p)) / (2.0 * h);
                let denom = fd.abs().max(grad[i].abs());
                if denom > 1e-6 {
                    max_rel = max_rel.max((fd - grad[i]).abs() / denom);
                }
            }
            assert!(max_rel <= 1e-4, "case {case}: max rel err {max_rel}");
        }
    }

    #[test]
    fn trajectory_sampling_is_deterministic_and_replayable() {
        let mut rng = Rng::new(7);
        let params = PolicyParams::init(tiny_spec(), 0.6, -0.5, &mut rng).unwrap();
        let s0 = nn::gaussian_sample(&mut rng, 3).unwrap();
        let cond = Conditioning::new(&random_x(&mut rng, 4));
        let a = sample_online_trajectory(&params, &s0, &cond, 6, &mut Rng::new(100)).unwrap();
        let b = sample_online_trajectory(&params, &s0, &cond, 6, &mut Rng::new(100)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), 7);
        assert_eq!(a.fwd_log_probs.len(), 6);

        // Recompute every per-step log-prob offline.
        for t in 0..6 {
            let c = cond.at_time(t, 6);
            let out = policy_eval(&params, &a.states[t], &c, PolicyHead::Forward).unwrap();
            let lp = gaussian_log_prob(&a.states[t + 1], &out).unwrap();
            assert!((lp - a.fwd_log_probs[t]).abs() < 1e-12);
            let cb = cond.at_time(t + 1, 6);
            let outb = policy_eval(&params, &a.states[t + 1], &cb, PolicyHead::Backward).unwrap();
            let lpb = gaussian_log_prob(&a.states[t], &outb).unwrap();
            assert!((lpb - a.bwd_log_probs[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn floored_identity_policy_barely_drifts() {
        // Zero weights, strongly negative σ bias: σ ≈ floor, μ = s.
        let spec = tiny_spec();
        let mut params = PolicyParams::zeros(spec.clone()).unwrap();
        let layout = spec.layout();
        for j in 0..3 {
            params.values_mut()[layout.fwd_b.start + 3 + j] = -40.0;
            params.values_mut()[layout.bwd_b.start + 3 + j] = -40.0;
        }
        let s0 = ParameterVector::new(vec![0.5, -1.0, 2.0]).unwrap();
        let n = 16;
        let traj = sample_online_trajectory(
            &params,
            &s0,
            &Conditioning::empty(),
            n,
            &mut Rng::new(8),
        )
        .unwrap();
        let bound = 5.0 * DEFAULT_SIGMA_FLOOR * (n as f64).sqrt();
        for (a, b) in traj.final_state().values().iter().zip(s0.values()) {
            assert!((a - b).abs() <= bound, "drift {} > {bound}", (a - b).abs());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = Rng::new(9);
        let params = PolicyParams::init(tiny_spec(), 1.2, 0.4, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.bin");
        save_policy(&path, &params).unwrap();
        let back = load_policy(&path).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let mut rng = Rng::new(10);
        let params = PolicyParams::init(tiny_spec(), 1.0, 0.0, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.bin");
        save_policy(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes).unwrap();
        assert!(matches!(load_policy(&cut), Err(Error::Parse { .. })));
    }
}
