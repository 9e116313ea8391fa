//! Balance losses over matched sub-trajectories and the policy training loop.
//!
//! The hybrid loss compares two log-domain brackets over a matched segment
//! [m', n'] of a sampled trajectory:
//!
//! ```text
//! r = [log C(s_m') + log R(s_m') + Σ log P_fwd] − [log C(s_n') + log R(s_n') + Σ log P_bwd]
//! ```
//!
//! with reward log R(s) = −‖s − θ_n‖² against the offline endpoint, and the
//! loss is |r| (unsquared, so segment residuals compose by the triangle
//! inequality). The vanilla variant drops the rewards, keeps the scalar head
//! as a log-flow at both ends, and squares the residual.
//!
//! Gradients are pathwise: sampled states are reparameterized as
//! s_{t+1} = μ(s_t) + σ(s_t)⊙z_t with the noise held fixed, and the whole
//! chain from s_0 is unrolled reverse-mode, so the loss is an ordinary
//! differentiable function of the policy parameters (finite differences
//! agree — that is tested).

use crate::error::{Error, Result};
use crate::nn::{self, Gradient, MlpSpec, ParameterVector};
use crate::optim::{optimizer_step, OptimizerConfig, OptimizerState, PolicyKind};
use crate::policy::{
    encode_task, encoder_backward, eval_anchor, AnchorUpstream, Conditioning, OnlineTrajectory,
    PolicyParams, PolicySpec,
};
use crate::rng::Rng;
use crate::store::SubTrajectorySample;
use crate::tasks::{classification_loss_grad, Episode, QuadraticTask};

/// log R_n(s) = −‖s − θ_n‖²; computed and consumed strictly in log domain.
pub fn reward_log(s: &ParameterVector, theta_n: &ParameterVector) -> Result<f64> {
    Ok(-s.squared_distance(theta_n)?)
}

/// An offline sub-trajectory sample matched to its online counterpart via
/// the uniform index map m' = m/k, n' = n/k.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub sample: SubTrajectorySample,
    pub online: OnlineTrajectory,
    pub k: usize,
    pub m_prime: usize,
    pub n_prime: usize,
}

impl MatchedPair {
    /// Online states of the matched segment (s_{m'}..s_{n'}).
    pub fn segment_states(&self) -> &[ParameterVector] {
        &self.online.states[self.m_prime..=self.n_prime]
    }

    /// Cached forward log-probs over the segment's transitions.
    pub fn segment_fwd_log_probs(&self) -> &[f64] {
        &self.online.fwd_log_probs[self.m_prime..self.n_prime]
    }

    /// Cached backward log-probs over the segment's transitions.
    pub fn segment_bwd_log_probs(&self) -> &[f64] {
        &self.online.bwd_log_probs[self.m_prime..self.n_prime]
    }
}

/// Aligns an offline sample with an online trajectory. The store guarantees
/// alignment; this re-checks it defensively.
pub fn match_segments(
    sample: &SubTrajectorySample,
    online: &OnlineTrajectory,
    k: usize,
) -> Result<MatchedPair> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let (m, n, t) = (sample.m as usize, sample.n as usize, sample.t_total as usize);
    if m % k != 0 || n % k != 0 || t % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "indices (m={m}, n={n}, T={t}) not aligned to k={k}"
        )));
    }
    let n_steps = t / k;
    if online.n_steps() != n_steps {
        return Err(Error::DimMismatch {
            context: "online trajectory length (T/k)",
            expected: n_steps,
            actual: online.n_steps(),
        });
    }
    if online.states[0].dim() != sample.dim() {
        return Err(Error::DimMismatch {
            context: "online/offline state dim",
            expected: sample.dim(),
            actual: online.states[0].dim(),
        });
    }
    Ok(MatchedPair {
        sample: sample.clone(),
        online: online.clone(),
        k,
        m_prime: m / k,
        n_prime: n / k,
    })
}

/// What sits at the two bracket ends.
enum BalanceKind<'a> {
    /// Scalar head as log C, plus log-rewards against `theta_n` at both ends;
    /// loss = |r|.
    Hybrid,
    /// Scalar head as log-flow at both ends, no rewards; loss = r². When
    /// `terminal_reward` is set and the segment ends at the trajectory's
    /// final state, the closing flow term is replaced by the terminal
    /// log-reward against it.
    Vanilla { terminal_reward: Option<&'a ParameterVector> },
}

struct BalanceEval {
    loss: f64,
    residual: f64,
    grad: Vec<f64>,
}

/// Shared loss core: regenerates the online prefix from the pair's noise
/// under the current parameters, computes the residual over [m', n'], and
/// backpropagates through every path (heads, rewards, and the sampling
/// chain down to s_0).
fn balance_loss(
    pair: &MatchedPair,
    params: &PolicyParams,
    cond: &Conditioning,
    kind: BalanceKind<'_>,
    cached: Option<&crate::policy::Rollout>,
) -> Result<BalanceEval> {
    balance_loss_with_estimator(pair, params, cond, kind, cached, GradEstimator::Pathwise)
}

fn balance_loss_with_estimator(
    pair: &MatchedPair,
    params: &PolicyParams,
    cond: &Conditioning,
    kind: BalanceKind<'_>,
    cached: Option<&crate::policy::Rollout>,
    estimator: GradEstimator,
) -> Result<BalanceEval> {
    let spec = params.spec();
    let d = spec.state_dim;
    if pair.sample.dim() != d {
        return Err(Error::DimMismatch {
            context: "pair state dim",
            expected: d,
            actual: pair.sample.dim(),
        });
    }
    let n_steps = pair.online.n_steps();
    let (mp, np) = (pair.m_prime, pair.n_prime);

    // Forward: regenerate s_0..s_{n'} from the recorded noise (so the loss is
    // a pure function of the parameters), or reuse the rollout's anchors and
    // states when the caller guarantees the parameters are the ones that
    // produced it.
    let mut owned_anchors = Vec::new();
    let mut owned_states: Vec<Vec<f64>> = Vec::new();
    #[allow(unused_assignments)]
    let mut owned_encoded: Option<crate::policy::EncodedTask> = None;
    let (anchors, encoded, states): (
        &[crate::policy::AnchorEval],
        &crate::policy::EncodedTask,
        Vec<&[f64]>,
    ) = if let Some(rollout) = cached {
        (
            &rollout.anchors[..=np],
            &rollout.encoded,
            pair.online.states[..=np].iter().map(|s| s.values()).collect(),
        )
    } else {
        owned_encoded = Some(encode_task(params, cond.x())?);
        let encoded = owned_encoded.as_ref().unwrap();
        owned_states.reserve(np + 1);
        owned_states.push(pair.online.states[0].values().to_vec());
        owned_anchors.reserve(np + 1);
        owned_anchors.push(eval_anchor(params, &owned_states[0], encoded, 0.0)?);
        for t in 0..np {
            let z = &pair.online.noises[t];
            let a = &owned_anchors[t];
            let next: Vec<f64> = a
                .fwd_mu
                .iter()
                .zip(&a.fwd_sigma)
                .zip(z)
                .map(|((m, s), zi)| m + s * zi)
                .collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "regenerated state at step {}",
                    t + 1
                )));
            }
            owned_anchors.push(eval_anchor(
                params,
                &next,
                encoded,
                (t + 1) as f64 / n_steps as f64,
            )?);
            owned_states.push(next);
        }
        (
            &owned_anchors[..],
            owned_encoded.as_ref().unwrap(),
            owned_states.iter().map(|v| v.as_slice()).collect(),
        )
    };

    let theta_n = pair.sample.theta_n.values();
    let sq_dist = |s: &[f64], t: &[f64]| -> f64 {
        s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum()
    };

    // Residual assembly.
    let terminal_replaced = match &kind {
        BalanceKind::Vanilla {
            terminal_reward: Some(_),
        } => np == n_steps,
        _ => false,
    };
    let mut bracket_open = anchors[mp].log_c;
    let mut bracket_close = if terminal_replaced {
        let BalanceKind::Vanilla {
            terminal_reward: Some(target),
        } = &kind
        else {
            unreachable!()
        };
        -sq_dist(states[np], target.values())
    } else {
        anchors[np].log_c
    };
    if matches!(kind, BalanceKind::Hybrid) {
        bracket_open += -sq_dist(states[mp], theta_n);
        bracket_close += -sq_dist(states[np], theta_n);
    }
    // Per-transition density terms and their local gradients.
    let mut fwd_terms = Vec::with_capacity(np - mp);
    let mut bwd_terms = Vec::with_capacity(np - mp);
    for t in mp..np {
        let a = &anchors[t];
        let b = &anchors[t + 1];
        let flp = crate::policy::log_prob_parts(states[t + 1], &a.fwd_mu, &a.fwd_sigma);
        let blp = crate::policy::log_prob_parts(states[t], &b.bwd_mu, &b.bwd_sigma);
        bracket_open += flp.0;
        bracket_close += blp.0;
        fwd_terms.push(flp);
        bwd_terms.push(blp);
    }
    let residual = bracket_open - bracket_close;
    if !residual.is_finite() {
        return Err(Error::NonFinite(format!(
            "balance residual (open {bracket_open}, close {bracket_close}, \
             segment {mp}..{np}, target dist {})",
            sq_dist(states[np], theta_n)
        )));
    }
    let (loss, dl_dr) = match kind {
        // Subgradient 0 at r = 0.
        BalanceKind::Hybrid => (
            residual.abs(),
            if residual == 0.0 { 0.0 } else { residual.signum() },
        ),
        BalanceKind::Vanilla { .. } => (residual * residual, 2.0 * residual),
    };

    // Backward. Upstreams per anchor plus direct state gradients of r.
    // ds_direct carries every state-mediated term (densities + rewards);
    // ds_reward isolates the reward terms for the reward-pathwise estimator.
    let mut ups: Vec<AnchorUpstream> = (0..=np).map(|_| AnchorUpstream::zeros(d)).collect();
    let mut ds_direct: Vec<Vec<f64>> = (0..=np).map(|_| vec![0.0; d]).collect();
    let mut ds_reward: Vec<Vec<f64>> = (0..=np).map(|_| vec![0.0; d]).collect();
    let mut ds_reward_carry: Vec<Vec<f64>> = (0..=np).map(|_| vec![0.0; d]).collect();
    ups[mp].d_log_c += 1.0;
    if terminal_replaced {
        let BalanceKind::Vanilla {
            terminal_reward: Some(target),
        } = &kind
        else {
            unreachable!()
        };
        // r includes −(−‖s_{n'} − θ_T‖²).
        for (j, (s, t)) in states[np].iter().zip(target.values()).enumerate() {
            let g = 2.0 * (s - t);
            ds_direct[np][j] += g;
            ds_reward[np][j] += g;
        }
    } else {
        ups[np].d_log_c -= 1.0;
    }
    if matches!(kind, BalanceKind::Hybrid) {
        for (j, (s, t)) in states[mp].iter().zip(theta_n).enumerate() {
            let g = -2.0 * (s - t);
            ds_direct[mp][j] += g;
            ds_reward[mp][j] += g;
        }
        for (j, (s, t)) in states[np].iter().zip(theta_n).enumerate() {
            let g = 2.0 * (s - t);
            ds_direct[np][j] += g;
            ds_reward[np][j] += g;
        }
    }
    for (i, t) in (mp..np).enumerate() {
        let (_, ref d_x_f, ref d_mu_f, ref d_sigma_f) = fwd_terms[i];
        for j in 0..d {
            ups[t].d_fwd_mu[j] += d_mu_f[j];
            ups[t].d_fwd_sigma[j] += d_sigma_f[j];
            ds_direct[t + 1][j] += d_x_f[j];
        }
        let (_, ref d_x_b, ref d_mu_b, ref d_sigma_b) = bwd_terms[i];
        for j in 0..d {
            ups[t + 1].d_bwd_mu[j] -= d_mu_b[j];
            ups[t + 1].d_bwd_sigma[j] -= d_sigma_b[j];
            ds_direct[t][j] -= d_x_b[j];
        }
    }

    let mut grad = vec![0.0; params.dim()];
    let mut d_emb = vec![0.0; spec.embed_dim()];
    match estimator {
        GradEstimator::Pathwise => {
            let mut ds_next: Vec<f64> = Vec::new();
            for t in (0..=np).rev() {
                let mut up = std::mem::replace(&mut ups[t], AnchorUpstream::zeros(0));
                if t < np {
                    // Chain through s_{t+1} = μ + σ⊙z.
                    let z = &pair.online.noises[t];
                    for j in 0..d {
                        up.d_fwd_mu[j] += ds_next[j];
                        up.d_fwd_sigma[j] += ds_next[j] * z[j];
                    }
                }
                let ds_eval = crate::policy::anchor_backward(
                    params,
                    &anchors[t],
                    &up,
                    &mut grad,
                    &mut d_emb,
                )?;
                ds_next = ds_direct[t].clone();
                for j in 0..d {
                    ds_next[j] += ds_eval[j];
                }
            }
        }
        GradEstimator::Detached => {
            // States are constants: only the anchors inside the segment carry
            // upstream gradients, and nothing chains between steps.
            for t in mp..=np {
                let up = std::mem::replace(&mut ups[t], AnchorUpstream::zeros(0));
                crate::policy::anchor_backward(params, &anchors[t], &up, &mut grad, &mut d_emb)?;
            }
        }
        GradEstimator::RewardPathwise => {
            // Density and scalar-head terms stay local; the reward state
            // gradients (already isolated in ds_reward) are chained through
            // the reparameterized sampling steps, so moving the policy mean
            // moves the rewarded endpoints.
            let mut ds_next: Vec<f64> = Vec::new();
            for t in (0..=np).rev() {
                let mut up = std::mem::replace(&mut ups[t], AnchorUpstream::zeros(0));
                if t < np {
                    let z = &pair.online.noises[t];
                    for j in 0..d {
                        up.d_fwd_mu[j] += ds_next[j];
                        up.d_fwd_sigma[j] += ds_next[j] * z[j];
                    }
                }
                crate::policy::anchor_backward(params, &anchors[t], &up, &mut grad, &mut d_emb)?;
                ds_next = ds_reward[t].clone();
                if t < np {
                    // Rigid carry: deeper steps shift every later state
                    // equally (∂s_{t+1}/∂s_t ≈ I through the residual mean),
                    // so reward pulls propagate without density feedback.
                    let prev = &ds_reward_carry[t + 1];
                    for j in 0..d {
                        ds_next[j] += prev[j];
                    }
                }
                ds_reward_carry[t] = ds_next.clone();
            }
        }
    }
    encoder_backward(params, &encoded, &d_emb, &mut grad)?;
    for g in grad.iter_mut() {
        *g *= dl_dr;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("balance loss gradient".into()));
    }
    Ok(BalanceEval {
        loss,
        residual,
        grad,
    })
}

/// Hybrid-policy balance loss |r| with its parameter gradient. The
/// subgradient at r = 0 is 0.
pub fn hybrid_subtb_loss(
    pair: &MatchedPair,
    params: &PolicyParams,
    cond: &Conditioning,
) -> Result<(f64, Gradient)> {
    let eval = balance_loss(pair, params, cond, BalanceKind::Hybrid, None)?;
    Ok((eval.loss, Gradient::new(eval.grad)?))
}

/// Signed hybrid residual (the quantity inside |·|), without gradients.
pub fn hybrid_residual(
    pair: &MatchedPair,
    params: &PolicyParams,
    cond: &Conditioning,
) -> Result<f64> {
    Ok(balance_loss(pair, params, cond, BalanceKind::Hybrid, None)?.residual)
}

/// Vanilla sub-trajectory balance r² with the scalar head as log-flow at
/// both ends.
pub fn vanilla_subtb_loss(
    pair: &MatchedPair,
    params: &PolicyParams,
    cond: &Conditioning,
) -> Result<(f64, Gradient)> {
    let eval = balance_loss(
        pair,
        params,
        cond,
        BalanceKind::Vanilla {
            terminal_reward: None,
        },
        None,
    )?;
    Ok((eval.loss, Gradient::new(eval.grad)?))
}

/// The global-optimum-only objective: vanilla balance, except segments that
/// reach the trajectory end anchor their closing term to the terminal
/// reward against θ_T instead of the flow head. Intermediate offline
/// checkpoints are never consulted.
pub fn lo_op_loss(
    pair: &MatchedPair,
    params: &PolicyParams,
    cond: &Conditioning,
) -> Result<(f64, Gradient)> {
    let terminal = if pair.sample.n == pair.sample.t_total {
        Some(&pair.sample.theta_n)
    } else {
        None
    };
    let eval = balance_loss(
        pair,
        params,
        cond,
        BalanceKind::Vanilla {
            terminal_reward: terminal,
        },
        None,
    )?;
    Ok((eval.loss, Gradient::new(eval.grad)?))
}

/// Hybrid residuals of every unit segment [i, i+1] of the pair's online
/// trajectory, all rewarded against the pair's θ_n. Their sum telescopes to
/// the full-span residual, which is what makes the triangle-inequality
/// composition check meaningful.
pub fn unit_segment_residuals(
    pair: &MatchedPair,
    params: &PolicyParams,
    cond: &Conditioning,
) -> Result<Vec<f64>> {
    let n_steps = pair.online.n_steps();
    let encoded = encode_task(params, cond.x())?;
    let mut anchors = Vec::with_capacity(n_steps + 1);
    for t in 0..=n_steps {
        anchors.push(eval_anchor(
            params,
            pair.online.states[t].values(),
            &encoded,
            t as f64 / n_steps as f64,
        )?);
    }
    segment_residuals_from_anchors(pair, &anchors)
}

fn segment_residuals_from_anchors(
    pair: &MatchedPair,
    anchors: &[crate::policy::AnchorEval],
) -> Result<Vec<f64>> {
    let n_steps = pair.online.n_steps();
    let theta_n = pair.sample.theta_n.values();
    let log_r = |t: usize| -> f64 {
        -pair.online.states[t]
            .values()
            .iter()
            .zip(theta_n)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    (0..n_steps)
        .map(|t| {
            let flp = crate::policy::log_prob_parts(
                pair.online.states[t + 1].values(),
                &anchors[t].fwd_mu,
                &anchors[t].fwd_sigma,
            )
            .0;
            let blp = crate::policy::log_prob_parts(
                pair.online.states[t].values(),
                &anchors[t + 1].bwd_mu,
                &anchors[t + 1].bwd_sigma,
            )
            .0;
            Ok((anchors[t].log_c + log_r(t) + flp)
                - (anchors[t + 1].log_c + log_r(t + 1) + blp))
        })
        .collect()
}

/// Training objective selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    LoHp,
    LoOp,
    Hypernet,
}

/// How the trainer treats sampled states when differentiating the balance
/// residual.
///
/// `Pathwise` reparameterizes the whole chain (s_{t+1} = μ + σ⊙z with z
/// frozen) and is what the standalone loss functions implement — exact and
/// finite-difference checkable. `Detached` treats the sampled states as
/// constants of a stochastic environment, so gradients flow only through
/// the density parameters and the scalar head at the visited states; the
/// residual then acts as a per-sample advantage and transitions that led to
/// better-balanced endpoints get their probability raised. That
/// score-function-style credit assignment is what makes drift learnable in
/// practice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradEstimator {
    Pathwise,
    Detached,
    /// Densities detached, reward terms reparameterized: the endpoint
    /// rewards pull the sampled states through the chain while the density
    /// terms contribute only their local parameter gradients.
    RewardPathwise,
}

/// Policy-trainer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Learning rate α for the parameter update.
    pub alpha: f64,
    /// Multiplier the learning rate decays to by the final step
    /// (exponential schedule); 1.0 disables decay.
    pub alpha_decay: f64,
    /// Number of training steps.
    pub steps: usize,
    /// Segmentation factor k (online length is T/k).
    pub k: usize,
    /// Matched pairs averaged per step.
    pub batch_size: usize,
    pub mode: TrainMode,
    /// Optimizer applied to the policy parameters.
    pub optimizer: PolicyKind,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    /// Gradient estimator used by the training loop.
    pub estimator: GradEstimator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            alpha_decay: 1.0,
            steps: 6000,
            k: 2,
            batch_size: 8,
            mode: TrainMode::LoHp,
            optimizer: PolicyKind::Adam,
            grad_clip: None,
            estimator: GradEstimator::Detached,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("alpha must be > 0".into()));
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha_decay must be in (0, 1], got {}",
                self.alpha_decay
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.steps == 0 && self.batch_size == 0 {
            return Err(Error::InvalidArgument("empty training config".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Architecture knobs for building a [`PolicySpec`] once the state and
/// conditioning dims are known.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetConfig {
    pub encoder_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub trunk_hidden: Vec<usize>,
    pub sigma_floor: f64,
    pub init_weight_scale: f64,
    pub init_sigma_bias: f64,
}

impl Default for PolicyNetConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![16],
            embed_dim: 8,
            trunk_hidden: vec![64],
            sigma_floor: crate::policy::DEFAULT_SIGMA_FLOOR,
            init_weight_scale: 0.3,
            init_sigma_bias: -1.0,
        }
    }
}

impl PolicyNetConfig {
    pub fn build_spec(&self, state_dim: usize, cond_dim: usize) -> Result<PolicySpec> {
        let encoder_widths = if cond_dim == 0 {
            Vec::new()
        } else {
            let mut w = vec![cond_dim];
            w.extend_from_slice(&self.encoder_hidden);
            w.push(self.embed_dim);
            w
        };
        PolicySpec::new(
            state_dim,
            encoder_widths,
            self.trunk_hidden.clone(),
            self.sigma_floor,
        )
    }
}

/// Downstream tasks for the end-to-end baseline objective (which needs
/// labeled losses, not just endpoints).
#[derive(Debug, Clone)]
pub enum DownstreamTasks<'a> {
    Episodes {
        episodes: &'a [Episode],
        net: &'a MlpSpec,
    },
    Quadratics(&'a [QuadraticTask]),
}

impl DownstreamTasks<'_> {
    fn len(&self) -> usize {
        match self {
            DownstreamTasks::Episodes { episodes, .. } => episodes.len(),
            DownstreamTasks::Quadratics(ts) => ts.len(),
        }
    }

    fn state_dim(&self) -> usize {
        match self {
            DownstreamTasks::Episodes { net, .. } => net.param_count(),
            DownstreamTasks::Quadratics(ts) => ts[0].dim(),
        }
    }

    fn cond_dim(&self) -> usize {
        match self {
            DownstreamTasks::Episodes { episodes, .. } => episodes[0].unlabeled_x.cols(),
            DownstreamTasks::Quadratics(_) => 0,
        }
    }

    fn conditioning(&self, idx: usize) -> Conditioning {
        match self {
            DownstreamTasks::Episodes { episodes, .. } => {
                Conditioning::new(&episodes[idx].unlabeled_x)
            }
            DownstreamTasks::Quadratics(_) => Conditioning::empty(),
        }
    }

    fn loss_grad(&self, idx: usize, theta: &ParameterVector) -> Result<(f64, Gradient)> {
        match self {
            DownstreamTasks::Episodes { episodes, net } => {
                let ep = &episodes[idx];
                classification_loss_grad(net, theta, &ep.train_x, &ep.train_y)
            }
            DownstreamTasks::Quadratics(ts) => ts[idx].loss_grad(theta),
        }
    }
}

/// Per-run training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mean batch loss per step.
    pub loss_curve: Vec<f64>,
    /// Step at which training hit a non-finite value and stopped, if any.
    pub diverged_at: Option<usize>,
    /// Full-span triangle-composition checks performed / violated.
    pub triangle_checks: usize,
    pub triangle_violations: usize,
}

/// One-shot weight prediction: the forward mean at a zero state, step 0.
/// This is the inference path of the end-to-end baseline mode.
pub fn predict_oneshot(params: &PolicyParams, cond: &Conditioning) -> Result<ParameterVector> {
    let encoded = encode_task(params, cond.x())?;
    let zero = vec![0.0; params.spec().state_dim];
    let anchor = eval_anchor(params, &zero, &encoded, 0.0)?;
    ParameterVector::new(anchor.fwd_mu)
}

/// Trains the generative model per the configured mode.
///
/// Each step draws a minibatch of offline samples, rolls a fresh online
/// trajectory from s_0 ~ N(0, I) per sample, matches segments, averages the
/// loss gradients and updates the parameters. On divergence the last finite
/// parameters are returned with `diverged_at` set.
pub fn train_policy(
    samples: &[SubTrajectorySample],
    downstream: Option<&DownstreamTasks<'_>>,
    net_cfg: &PolicyNetConfig,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(PolicyParams, TrainOutcome)> {
    config.validate()?;
    let (state_dim, cond_dim) = match (config.mode, downstream) {
        (TrainMode::Hypernet, Some(d)) => (d.state_dim(), d.cond_dim()),
        (TrainMode::Hypernet, None) => {
            return Err(Error::InvalidArgument(
                "end-to-end baseline mode needs downstream tasks".into(),
            ))
        }
        _ => {
            if samples.is_empty() {
                return Err(Error::InvalidArgument("empty sample store".into()));
            }
            let dim = samples[0].dim();
            if samples.iter().any(|s| s.dim() != dim) {
                return Err(Error::InvalidArgument(
                    "samples have inconsistent dims".into(),
                ));
            }
            let cond_dim = samples
                .iter()
                .map(|s| s.conditioning.cols())
                .max()
                .unwrap_or(0);
            (dim, cond_dim)
        }
    };
    let spec = net_cfg.build_spec(state_dim, cond_dim)?;
    let mut params = PolicyParams::init(
        spec,
        net_cfg.init_weight_scale,
        net_cfg.init_sigma_bias,
        rng,
    )?;

    // Pre-sort conditioning once per sample (or per task for the baseline).
    let conds: Vec<Conditioning> = samples
        .iter()
        .map(|s| Conditioning::new(&s.conditioning))
        .collect();
    // Group sample indices by task: every step rolls one online trajectory
    // for one task and averages the balance loss over a minibatch of that
    // task's aligned (m, n) pairs — the per-trajectory expectation over
    // segment choices.
    let mut task_groups: Vec<Vec<usize>> = Vec::new();
    {
        let mut order: Vec<u64> = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            match order.iter().position(|&t| t == s.task_id) {
                Some(g) => task_groups[g].push(i),
                None => {
                    order.push(s.task_id);
                    task_groups.push(vec![i]);
                }
            }
        }
    }

    let mut opt_config = OptimizerConfig {
        policy: config.optimizer,
        learning_rate: config.alpha,
        ..Default::default()
    };
    let mut opt_state = OptimizerState::new(&opt_config, params.dim());
    let mut outcome = TrainOutcome {
        loss_curve: Vec::with_capacity(config.steps),
        diverged_at: None,
        triangle_checks: 0,
        triangle_violations: 0,
    };

    for step in 0..config.steps {
        if config.alpha_decay < 1.0 && config.steps > 1 {
            let frac = step as f64 / (config.steps - 1) as f64;
            opt_config.learning_rate = config.alpha * config.alpha_decay.powf(frac);
        }
        let mut batch_grad = vec![0.0; params.dim()];
        let mut batch_loss = 0.0;
        let mut failed = false;
        match config.mode {
            TrainMode::Hypernet => {
                for _ in 0..config.batch_size {
                    let tasks = downstream.expect("checked above");
                    let idx = rng.index(tasks.len());
                    let cond = tasks.conditioning(idx);
                    match hypernet_step(&params, tasks, idx, &cond) {
                        Ok((loss, grad)) => {
                            batch_loss += loss;
                            for (b, g) in batch_grad.iter_mut().zip(grad.values()) {
                                *b += g;
                            }
                        }
                        Err(Error::NonFinite(_)) => {
                            failed = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            TrainMode::LoHp | TrainMode::LoOp => {
                let group = &task_groups[rng.index(task_groups.len())];
                let rep = group[0];
                let n_steps = samples[rep].t_total as usize / config.k;
                let s0 = nn::gaussian_sample(rng, state_dim)?;
                let rollout = match crate::policy::sample_rollout(
                    &params,
                    &s0,
                    &conds[rep],
                    n_steps,
                    rng,
                ) {
                    Ok(r) => r,
                    Err(Error::NonFinite(_)) => {
                        outcome.diverged_at = Some(step);
                        break;
                    }
                    Err(e) => return Err(e),
                };
                for _ in 0..config.batch_size {
                    let idx = group[rng.index(group.len())];
                    let sample = &samples[idx];
                    let result = match_segments(sample, &rollout.traj, config.k).and_then(|pair| {
                        let kind = if config.mode == TrainMode::LoHp {
                            BalanceKind::Hybrid
                        } else {
                            BalanceKind::Vanilla {
                                terminal_reward: if pair.sample.n == pair.sample.t_total {
                                    Some(&pair.sample.theta_n)
                                } else {
                                    None
                                },
                            }
                        };
                        let eval = balance_loss_with_estimator(
                            &pair,
                            &params,
                            &conds[idx],
                            kind,
                            Some(&rollout),
                            config.estimator,
                        )?;
                        // Composition invariant on full-span draws: the full
                        // residual never exceeds the summed unit residuals.
                        if pair.sample.is_full_span() && config.mode == TrainMode::LoHp {
                            if let Ok(gs) = segment_residuals_from_anchors(&pair, &rollout.anchors)
                            {
                                let total: f64 = gs.iter().sum();
                                let bound: f64 = gs.iter().map(|g| g.abs()).sum();
                                outcome.triangle_checks += 1;
                                if total.abs() > bound * (1.0 + 1e-12) + 1e-12 {
                                    outcome.triangle_violations += 1;
                                }
                            }
                        }
                        Ok((eval.loss, Gradient::new(eval.grad)?))
                    });
                    match result {
                        Ok((loss, grad)) => {
                            batch_loss += loss;
                            for (b, g) in batch_grad.iter_mut().zip(grad.values()) {
                                *b += g;
                            }
                        }
                        Err(Error::NonFinite(_)) => {
                            failed = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        if failed {
            outcome.diverged_at = Some(step);
            break;
        }
        let scale = 1.0 / config.batch_size as f64;
        for g in batch_grad.iter_mut() {
            *g *= scale;
        }
        if let Some(clip) = config.grad_clip {
            let norm = crate::linalg::norm(&batch_grad);
            if norm > clip {
                let s = clip / norm;
                for g in batch_grad.iter_mut() {
                    *g *= s;
                }
            }
        }
        let theta = ParameterVector::new(params.values().to_vec())?;
        let grad = Gradient::new(batch_grad)?;
        match optimizer_step(&opt_config, &opt_state, &theta, &grad) {
            Ok((next, st)) => {
                params.values_mut().copy_from_slice(next.values());
                opt_state = st;
            }
            Err(Error::NonFinite(_)) => {
                outcome.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
        outcome.loss_curve.push(batch_loss * scale);
    }
    Ok((params, outcome))
}

fn hypernet_step(
    params: &PolicyParams,
    tasks: &DownstreamTasks<'_>,
    idx: usize,
    cond: &Conditioning,
) -> Result<(f64, Gradient)> {
    let d = params.spec().state_dim;
    let encoded = encode_task(params, cond.x())?;
    let zero = vec![0.0; d];
    let anchor = eval_anchor(params, &zero, &encoded, 0.0)?;
    let theta_hat = ParameterVector::new(anchor.fwd_mu.clone())?;
    let (loss, d_theta) = tasks.loss_grad(idx, &theta_hat)?;
    let mut up = AnchorUpstream::zeros(d);
    up.d_fwd_mu.copy_from_slice(d_theta.values());
    let mut grad = vec![0.0; params.dim()];
    let mut d_emb = vec![0.0; params.spec().embed_dim()];
    crate::policy::anchor_backward(params, &anchor, &up, &mut grad, &mut d_emb)?;
    encoder_backward(params, &encoded, &d_emb, &mut grad)?;
    Ok((loss, Gradient::new(grad)?))
}
