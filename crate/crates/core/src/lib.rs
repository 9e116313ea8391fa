//! Decoupled two-stage weight generation at desk scale.
//!
//! Stage one ("weight preparation") runs real optimizers — SGD and Adam,
//! optionally wrapped in sharpness-aware perturbation — on small synthetic
//! tasks and records the weight checkpoints as offline trajectories. Stage
//! two ("policy learning") trains a conditioned Gaussian policy with a
//! hybrid-policy sub-trajectory balance objective so that sampling the
//! policy for `N = T/k` steps reproduces optimizer-like weight updates
//! without gradients.
//!
//! The crate also ships a verification lab: finite layered DAGs with tabular
//! policies where the flow identity behind the balance objective can be
//! checked by exhaustive trajectory enumeration, plus closed-form bound
//! checks for gradient descent on strongly convex quadratics.
//!
//! Modules:
//!
//! - [`nn`] — flat parameter vectors, a small analytic MLP, seeded RNG.
//! - [`tasks`] — synthetic downstream tasks: quadratics, 2-D landscapes,
//!   Gaussian-blob classification episodes.
//! - [`optim`] — SGD/Adam steps, SAM gradients, trajectory recording,
//!   the gradient-descent contraction bound.
//! - [`store`] — sub-trajectory sampling and the binary store format with
//!   constant per-record size.
//! - [`policy`] — the generative model: shared trunk, forward/backward
//!   Gaussian heads, scalar coefficient head, task conditioning.
//! - [`hybrid`] — reward, the hybrid and vanilla balance losses, trajectory
//!   matching, and the training loop.
//! - [`theorem`] — brute-force verifiers on enumerable micro-environments.
//! - [`pipeline`] — experiment configs, the prepare/train/infer/eval/verify
//!   pipeline, diagnostics, and report serialization.

pub mod error;
pub mod hybrid;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod store;
pub mod tasks;
pub mod theorem;

pub use error::{Error, Result};
pub use nn::{Gradient, MlpSpec, ParameterVector};
pub use rng::Rng;
