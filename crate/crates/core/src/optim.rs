//! Real-world optimization policies for the weight-preparation stage.
//!
//! SGD and Adam steps are purely functional (state in, state out), the
//! sharpness-aware wrapper evaluates the gradient at a normalized ascent
//! perturbation, and [`prepare_trajectory`] records every checkpoint with
//! early stopping on eval loss.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{self, Gradient, MlpSpec, ParameterVector};
use crate::rng::Rng;
use crate::store::{OfflineTrajectory, PolicyLabel};
use crate::tasks::{self, Episode, Landscape2D, QuadraticTask};

/// Base optimizer selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Sgd,
    Adam,
}

/// Optimizer settings for trajectory preparation.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub policy: PolicyKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub sam_enabled: bool,
    pub sam_rho: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Minibatch size for episode tasks; `None` = full batch.
    pub batch_size: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Sgd,
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            sam_enabled: false,
            sam_rho: 0.05,
            max_epochs: 100,
            early_stop_patience: 5,
            batch_size: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.sam_rho < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sam_rho must be >= 0, got {}",
                self.sam_rho
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Moment buffers for Adam; empty for SGD. Step counter advances on every
/// update.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, dim: usize) -> Self {
        match config.policy {
            PolicyKind::Sgd => Self {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
            },
            PolicyKind::Adam => Self {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
            },
        }
    }
}

/// Gradient evaluated at the sharpness-aware perturbation point, plus a flag
/// marking draws where the perturbation was skipped because the gradient was
/// numerically flat.
#[derive(Debug, Clone, PartialEq)]
pub struct SamGradient {
    pub grad: Gradient,
    pub flat_gradient: bool,
}

/// g = ∇L(θ + ρ·∇L(θ)/‖∇L(θ)‖); with ρ = 0 this is exactly the plain gradient.
///
/// The normalization is singular at ‖∇L‖ ≈ 0, so below 1e-12 the perturbation
/// is skipped and the plain gradient returned with `flat_gradient` set.
pub fn sam_gradient<F>(mut loss_grad: F, theta: &ParameterVector, rho: f64) -> Result<SamGradient>
where
    F: FnMut(&ParameterVector) -> Result<(f64, Gradient)>,
{
    if rho < 0.0 {
        return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")));
    }
    let (_, base) = loss_grad(theta)?;
    if rho == 0.0 {
        return Ok(SamGradient {
            grad: base,
            flat_gradient: false,
        });
    }
    let norm = base.norm();
    if norm < 1e-12 {
        return Ok(SamGradient {
            grad: base,
            flat_gradient: true,
        });
    }
    let mut perturbed = theta.clone();
    perturbed.axpy(rho / norm, base.values());
    let (_, grad) = loss_grad(&perturbed)?;
    Ok(SamGradient {
        grad,
        flat_gradient: false,
    })
}

/// One purely functional optimizer update.
pub fn optimizer_step(
    config: &OptimizerConfig,
    state: &OptimizerState,
    theta: &ParameterVector,
    grad: &Gradient,
) -> Result<(ParameterVector, OptimizerState)> {
    if grad.dim() != theta.dim() {
        return Err(Error::DimMismatch {
            context: "optimizer gradient dim",
            expected: theta.dim(),
            actual: grad.dim(),
        });
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient at optimizer step {}",
            state.t + 1
        )));
    }
    let lr = config.learning_rate;
    let mut next = theta.clone();
    let mut new_state = state.clone();
    new_state.t += 1;
    match config.policy {
        PolicyKind::Sgd => {
            next.axpy(-lr, grad.values());
        }
        PolicyKind::Adam => {
            if state.m.len() != theta.dim() || state.v.len() != theta.dim() {
                return Err(Error::DimMismatch {
                    context: "adam moment buffers",
                    expected: theta.dim(),
                    actual: state.m.len(),
                });
            }
            let t = new_state.t as i32;
            let bc1 = 1.0 - config.beta1.powi(t);
            let bc2 = 1.0 - config.beta2.powi(t);
            for i in 0..theta.dim() {
                let g = grad.values()[i];
                new_state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
                new_state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
                let m_hat = new_state.m[i] / bc1;
                let v_hat = new_state.v[i] / bc2;
                next.values_mut()[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
    }
    if !next.is_finite() {
        return Err(Error::NonFinite(format!(
            "parameters after optimizer step {}",
            new_state.t
        )));
    }
    Ok((next, new_state))
}

/// A task that can drive trajectory preparation: a training gradient, an
/// eval loss for early stopping, and the conditioning samples recorded with
/// the trajectory.
pub trait TrajectoryTask {
    fn dim(&self) -> usize;
    fn task_id(&self) -> u64;
    /// Training loss/gradient; `rng` draws the batch when the task is
    /// stochastic.
    fn train_loss_grad(&self, theta: &ParameterVector, rng: &mut Rng)
        -> Result<(f64, Gradient)>;
    fn eval_loss(&self, theta: &ParameterVector) -> Result<f64>;
    fn conditioning(&self) -> Matrix;
}

impl TrajectoryTask for QuadraticTask {
    fn dim(&self) -> usize {
        QuadraticTask::dim(self)
    }

    fn task_id(&self) -> u64 {
        QuadraticTask::task_id(self)
    }

    fn train_loss_grad(
        &self,
        theta: &ParameterVector,
        _rng: &mut Rng,
    ) -> Result<(f64, Gradient)> {
        self.loss_grad(theta)
    }

    fn eval_loss(&self, theta: &ParameterVector) -> Result<f64> {
        self.loss(theta)
    }

    fn conditioning(&self) -> Matrix {
        Matrix::zeros(0, 0)
    }
}

/// Episode + downstream net, optionally minibatched.
#[derive(Debug, Clone)]
pub struct ClassificationTask {
    pub episode: Episode,
    pub net: MlpSpec,
    pub batch_size: Option<usize>,
}

impl TrajectoryTask for ClassificationTask {
    fn dim(&self) -> usize {
        self.net.param_count()
    }

    fn task_id(&self) -> u64 {
        self.episode.task_id
    }

    fn train_loss_grad(
        &self,
        theta: &ParameterVector,
        rng: &mut Rng,
    ) -> Result<(f64, Gradient)> {
        let total = self.episode.train_x.rows();
        match self.batch_size {
            Some(b) if b < total => {
                let mut xs = Vec::with_capacity(b);
                let mut ys = Vec::with_capacity(b);
                for _ in 0..b {
                    let i = rng.index(total);
                    xs.push(self.episode.train_x.row(i).to_vec());
                    ys.push(self.episode.train_y[i]);
                }
                tasks::classification_loss_grad(
                    &self.net,
                    theta,
                    &Matrix::from_rows(&xs)?,
                    &ys,
                )
            }
            _ => tasks::classification_loss_grad(
                &self.net,
                theta,
                &self.episode.train_x,
                &self.episode.train_y,
            ),
        }
    }

    fn eval_loss(&self, theta: &ParameterVector) -> Result<f64> {
        // Cross-entropy on the held-out split; the gradient is discarded.
        let (loss, _) = tasks::classification_loss_grad(
            &self.net,
            theta,
            &self.episode.eval_x,
            &self.episode.eval_y,
        )?;
        Ok(loss)
    }

    fn conditioning(&self) -> Matrix {
        self.episode.unlabeled_x.clone()
    }
}

/// 2-D landscape as a trajectory task (for overlay exports).
#[derive(Debug, Clone)]
pub struct LandscapeTask {
    pub landscape: Landscape2D,
    pub task_id: u64,
}

impl TrajectoryTask for LandscapeTask {
    fn dim(&self) -> usize {
        2
    }

    fn task_id(&self) -> u64 {
        self.task_id
    }

    fn train_loss_grad(
        &self,
        theta: &ParameterVector,
        _rng: &mut Rng,
    ) -> Result<(f64, Gradient)> {
        let (loss, g) = self
            .landscape
            .loss_grad([theta.values()[0], theta.values()[1]]);
        Ok((loss, Gradient::new(g.to_vec())?))
    }

    fn eval_loss(&self, theta: &ParameterVector) -> Result<f64> {
        Ok(self
            .landscape
            .loss_grad([theta.values()[0], theta.values()[1]])
            .0)
    }

    fn conditioning(&self) -> Matrix {
        Matrix::zeros(0, 0)
    }
}

/// Runs the configured optimizer from a Gaussian init, recording every
/// checkpoint. T is set by early stopping (patience on best eval loss) and
/// capped by `max_epochs`; the returned states hold T+1 entries.
pub fn prepare_trajectory(
    task: &dyn TrajectoryTask,
    config: &OptimizerConfig,
    rng: &mut Rng,
) -> Result<OfflineTrajectory> {
    config.validate()?;
    let dim = task.dim();
    let theta0 = nn::gaussian_sample(rng, dim)?;
    let mut states = vec![theta0];
    let mut eval_losses = vec![task.eval_loss(&states[0])?];
    let mut opt_state = OptimizerState::new(config, dim);
    let mut best = eval_losses[0];
    let mut since_best = 0usize;
    let label = PolicyLabel {
        kind: config.policy,
        sam: config.sam_enabled,
    };
    let make_prefix = |states: &[ParameterVector], losses: &[f64], cond: Matrix| OfflineTrajectory {
        task_id: task.task_id(),
        label,
        states: states.to_vec(),
        eval_losses: losses.to_vec(),
        conditioning: cond,
    };

    for epoch in 0..config.max_epochs {
        let theta = states.last().unwrap();
        let rho = if config.sam_enabled { config.sam_rho } else { 0.0 };
        let sam = sam_gradient(|p| task.train_loss_grad(p, rng), theta, rho);
        let grad = match sam {
            Ok(s) => s.grad,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    step: epoch,
                    prefix: Box::new(make_prefix(&states, &eval_losses, task.conditioning())),
                })
            }
            Err(e) => return Err(e),
        };
        let stepped = optimizer_step(config, &opt_state, theta, &grad);
        let (next, next_state) = match stepped {
            Ok(x) => x,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    step: epoch,
                    prefix: Box::new(make_prefix(&states, &eval_losses, task.conditioning())),
                })
            }
            Err(e) => return Err(e),
        };
        let eval = task.eval_loss(&next)?;
        if !eval.is_finite() {
            return Err(Error::Diverged {
                step: epoch,
                prefix: Box::new(make_prefix(&states, &eval_losses, task.conditioning())),
            });
        }
        states.push(next);
        eval_losses.push(eval);
        opt_state = next_state;
        if eval < best {
            best = eval;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                break;
            }
        }
    }
    Ok(OfflineTrajectory {
        task_id: task.task_id(),
        label,
        states,
        eval_losses,
        conditioning: task.conditioning(),
    })
}

/// Both sides of the gradient-descent contraction bound for strongly convex
/// quadratics, checked after exactly T steps at step size 1/l.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// lhs = ‖θ_T − θ*‖², rhs = (2[L(θ⁰) − L(θ*)]/μ)·(1 − μ/l)^T after T plain
/// gradient-descent steps with step size exactly 1/l.
pub fn gd_bound_check(task: &QuadraticTask, theta0: &ParameterVector, t_steps: usize) -> Result<BoundCheck> {
    let l = task.smoothness();
    let mu = task.mu();
    let mut theta = theta0.clone();
    let loss0 = task.loss(theta0)?;
    let loss_star = task.loss(task.theta_star())?;
    for _ in 0..t_steps {
        let (_, g) = task.loss_grad(&theta)?;
        theta.axpy(-1.0 / l, g.values());
    }
    let lhs = theta.squared_distance(task.theta_star())?;
    let rhs = 2.0 * (loss0 - loss_star) / mu * (1.0 - mu / l).powi(t_steps as i32);
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-9),
    })
}
