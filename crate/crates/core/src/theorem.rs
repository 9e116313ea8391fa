//! Brute-force verification lab.
//!
//! The balance identities are only exactly checkable where every trajectory
//! can be enumerated, so this module builds finite layered DAGs with tabular
//! softmax policies, trains them to (near) zero residual, and then verifies
//! the claimed flow identities by literal enumeration. Quadratic tasks with
//! known constants feed the convergence-bound checks.

use crate::error::{Error, Result};
use crate::nn::ParameterVector;
use crate::optim::{optimizer_step, OptimizerConfig, OptimizerState, PolicyKind};
use crate::rng::Rng;
use crate::tasks::QuadraticTask;

/// Cap on enumerated trajectories per call.
const ENUMERATION_GUARD: usize = 1_000_000;

/// Layered DAG with `layers` layers of `width` states each, complete edges
/// between consecutive layers, tabular softmax policies in both directions,
/// a learnable scalar per state, and a fixed log-reward per state.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroEnv {
    pub layers: usize,
    pub width: usize,
    /// fwd_logits[l][s][s']: transition layer l → l+1.
    pub fwd_logits: Vec<Vec<Vec<f64>>>,
    /// bwd_logits[l][s'][s]: predecessor distribution at layer l+1 state s'.
    pub bwd_logits: Vec<Vec<Vec<f64>>>,
    /// log_c[l][s]: learnable scalar head.
    pub log_c: Vec<Vec<f64>>,
    /// log_r[l][s]: fixed reward table.
    pub log_r: Vec<Vec<f64>>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl MicroEnv {
    pub fn random(layers: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        if layers < 2 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "need >= 2 layers and width >= 1, got {layers}x{width}"
            )));
        }
        let table3 = |rng: &mut Rng| -> Vec<Vec<Vec<f64>>> {
            (0..layers - 1)
                .map(|_| (0..width).map(|_| rng.normal_vec(width)).collect())
                .collect()
        };
        Ok(Self {
            layers,
            width,
            fwd_logits: table3(rng),
            bwd_logits: table3(rng),
            log_c: (0..layers).map(|_| rng.normal_vec(width)).collect(),
            log_r: (0..layers)
                .map(|_| rng.normal_vec(width).iter().map(|v| v * 0.5).collect())
                .collect(),
        })
    }

    /// Exactly balanced instance built by the flow construction: pick a
    /// backward policy and terminal flows, back-propagate flows, and set the
    /// forward policy and scalars so that every edge residual is zero.
    pub fn balanced(layers: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        let mut env = Self::random(layers, width, rng)?;
        // Flows: log F at last layer random; recursively
        // F(s) = Σ_{s'} F(s') P_bwd(s | s').
        let mut log_f = vec![vec![0.0; width]; layers];
        log_f[layers - 1] = rng.normal_vec(width);
        for l in (0..layers - 1).rev() {
            for s in 0..width {
                let mut f = 0.0;
                for sp in 0..width {
                    let pb = softmax(&env.bwd_logits[l][sp]);
                    f += log_f[l + 1][sp].exp() * pb[s];
                }
                log_f[l][s] = f.ln();
            }
        }
        for l in 0..layers - 1 {
            for s in 0..width {
                for sp in 0..width {
                    let pb = softmax(&env.bwd_logits[l][sp]);
                    // P_fwd(s'|s) = F(s') P_bwd(s|s') / F(s); store as logits.
                    env.fwd_logits[l][s][sp] = log_f[l + 1][sp] + pb[s].ln() - log_f[l][s];
                }
            }
        }
        for l in 0..layers {
            for s in 0..width {
                env.log_c[l][s] = log_f[l][s] - env.log_r[l][s];
            }
        }
        Ok(env)
    }

    pub fn p_fwd(&self, layer: usize, state: usize) -> Vec<f64> {
        softmax(&self.fwd_logits[layer][state])
    }

    pub fn p_bwd(&self, transition: usize, next_state: usize) -> Vec<f64> {
        softmax(&self.bwd_logits[transition][next_state])
    }

    /// Signed residual of one path (states at layers `from..=from+path.len()-1`).
    pub fn residual(&self, from: usize, path: &[usize]) -> f64 {
        let to = from + path.len() - 1;
        let (s0, s1) = (path[0], path[path.len() - 1]);
        let mut open = self.log_c[from][s0] + self.log_r[from][s0];
        let mut close = self.log_c[to][s1] + self.log_r[to][s1];
        for (i, w) in path.windows(2).enumerate() {
            let l = from + i;
            open += self.p_fwd(l, w[0])[w[1]].ln();
            close += self.p_bwd(l, w[1])[w[0]].ln();
        }
        open - close
    }

    /// Every path between two layers (all states free). Guarded.
    pub fn enumerate_paths(&self, from: usize, to: usize) -> Result<Vec<Vec<usize>>> {
        if from >= to || to >= self.layers {
            return Err(Error::InvalidArgument(format!(
                "bad layer span {from}..{to} in {} layers",
                self.layers
            )));
        }
        let span = to - from + 1;
        let count = self.width.checked_pow(span as u32).unwrap_or(usize::MAX);
        if count > ENUMERATION_GUARD {
            return Err(Error::InvalidArgument(format!(
                "enumeration guard exceeded: {count} paths"
            )));
        }
        let mut out = Vec::with_capacity(count);
        let mut path = vec![0usize; span];
        loop {
            out.push(path.clone());
            // Odometer increment.
            let mut i = 0;
            loop {
                if i == span {
                    return Ok(out);
                }
                path[i] += 1;
                if path[i] < self.width {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    /// Worst |residual| over all sub-trajectories of the environment.
    pub fn max_abs_residual(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for from in 0..self.layers - 1 {
            for to in from + 1..self.layers {
                for path in self.enumerate_paths(from, to)? {
                    worst = worst.max(self.residual(from, &path).abs());
                }
            }
        }
        Ok(worst)
    }

    // Flat parameter packing for the trainer: fwd logits, bwd logits, log_c.
    fn pack(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for t in &self.fwd_logits {
            for row in t {
                v.extend_from_slice(row);
            }
        }
        for t in &self.bwd_logits {
            for row in t {
                v.extend_from_slice(row);
            }
        }
        for row in &self.log_c {
            v.extend_from_slice(row);
        }
        v
    }

    fn unpack(&mut self, v: &[f64]) {
        let mut it = v.iter();
        for t in self.fwd_logits.iter_mut() {
            for row in t.iter_mut() {
                for slot in row.iter_mut() {
                    *slot = *it.next().unwrap();
                }
            }
        }
        for t in self.bwd_logits.iter_mut() {
            for row in t.iter_mut() {
                for slot in row.iter_mut() {
                    *slot = *it.next().unwrap();
                }
            }
        }
        for row in self.log_c.iter_mut() {
            for slot in row.iter_mut() {
                *slot = *it.next().unwrap();
            }
        }
        assert!(it.next().is_none());
    }

    fn param_offsets(&self) -> (usize, usize) {
        let block = (self.layers - 1) * self.width * self.width;
        (block, 2 * block)
    }
}

/// Mean squared residual over every sub-trajectory, with its gradient in the
/// packed-parameter layout.
fn full_batch_loss_grad(env: &MicroEnv) -> Result<(f64, Vec<f64>)> {
    let (bwd_off, c_off) = env.param_offsets();
    let w = env.width;
    let mut grad = vec![0.0; c_off + env.layers * w];
    let mut loss = 0.0;
    let mut count = 0usize;

    // Cache softmaxes.
    let fwd_p: Vec<Vec<Vec<f64>>> = (0..env.layers - 1)
        .map(|l| (0..w).map(|s| env.p_fwd(l, s)).collect())
        .collect();
    let bwd_p: Vec<Vec<Vec<f64>>> = (0..env.layers - 1)
        .map(|l| (0..w).map(|s| env.p_bwd(l, s)).collect())
        .collect();

    for from in 0..env.layers - 1 {
        for to in from + 1..env.layers {
            for path in env.enumerate_paths(from, to)? {
                let (s0, s1) = (path[0], path[path.len() - 1]);
                let mut r = env.log_c[from][s0] + env.log_r[from][s0]
                    - env.log_c[to][s1]
                    - env.log_r[to][s1];
                for (i, pw) in path.windows(2).enumerate() {
                    let l = from + i;
                    r += fwd_p[l][pw[0]][pw[1]].ln() - bwd_p[l][pw[1]][pw[0]].ln();
                }
                loss += r * r;
                count += 1;
                let dr = 2.0 * r;
                grad[c_off + from * w + s0] += dr;
                grad[c_off + to * w + s1] -= dr;
                for (i, pw) in path.windows(2).enumerate() {
                    let l = from + i;
                    // d log softmax(z)[j*] / dz[j] = δ − p[j].
                    let base_f = (l * w + pw[0]) * w;
                    for j in 0..w {
                        let delta = if j == pw[1] { 1.0 } else { 0.0 };
                        grad[base_f + j] += dr * (delta - fwd_p[l][pw[0]][j]);
                    }
                    let base_b = bwd_off + (l * w + pw[1]) * w;
                    for j in 0..w {
                        let delta = if j == pw[0] { 1.0 } else { 0.0 };
                        grad[base_b + j] -= dr * (delta - bwd_p[l][pw[1]][j]);
                    }
                }
            }
        }
    }
    let scale = 1.0 / count as f64;
    loss *= scale;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok((loss, grad))
}

/// Full-batch descent on the squared residuals of all sub-trajectories.
///
/// Adam on the logits with a staged step-size decay; a zero-residual
/// configuration always exists (the flow construction), so long runs drive
/// the worst residual toward machine precision.
pub fn train_microenv(env: &MicroEnv, steps: usize, lr: f64) -> Result<MicroEnv> {
    let mut env = env.clone();
    if steps == 0 || lr == 0.0 {
        return Ok(env);
    }
    let mut flat = ParameterVector::new(env.pack())?;
    let mut config = OptimizerConfig {
        policy: PolicyKind::Adam,
        learning_rate: lr,
        ..Default::default()
    };
    let mut state = OptimizerState::new(&config, flat.dim());
    for step in 0..steps {
        // Staged decay sharpens the endgame without stalling early progress.
        config.learning_rate = if step * 10 >= steps * 9 {
            lr * 0.01
        } else if step * 10 >= steps * 7 {
            lr * 0.1
        } else {
            lr
        };
        let (_, grad) = full_batch_loss_grad(&env)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("microenv logits at step {step}")));
        }
        let (next, st) = optimizer_step(
            &config,
            &state,
            &flat,
            &crate::nn::Gradient::new(grad)?,
        )?;
        flat = next;
        state = st;
        env.unpack(flat.values());
    }
    Ok(env)
}

/// One terminal's comparison: enumerated forward mass against the
/// coefficient/reward ratio times the enumerated backward mass.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCheck {
    pub terminal: usize,
    /// Σ over enumerated source→terminal paths of Π P_fwd.
    pub lhs: f64,
    /// [C(b)R(b) / (C(a)R(a))] · backward_mass.
    pub rhs: f64,
    /// Σ over the same paths of Π P_bwd. Equals 1 exactly when the source is
    /// the only state backward walks from the terminal can reach (the
    /// single-root setting), in which case `rhs` reduces to the plain
    /// coefficient/reward ratio.
    pub backward_mass: f64,
    pub rel_error: f64,
}

/// Result of a flow-identity verification from one source state.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityVerdict {
    pub checks: Vec<TerminalCheck>,
    pub worst_rel_error: f64,
    /// Relative spread across terminals of lhs / (C·R·backward_mass); near
    /// zero iff the enumerated forward mass is proportional to C·R.
    pub proportionality_spread: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Enumerates all trajectories from (layer m', `source`) to every terminal
/// state at layer n' and checks the summed balance identity
///
/// ```text
/// Σ_paths Π P_fwd = [C(s_n')·R(s_n') / (C(s_m')·R(s_m'))] · Σ_paths Π P_bwd
/// ```
///
/// which is the per-trajectory exponentiated balance summed over the fixed
/// endpoint pair. With a unique sub-root the backward mass is exactly 1 and
/// the right side is the plain C·R ratio.
pub fn verify_theorem1(
    env: &MicroEnv,
    m_prime: usize,
    n_prime: usize,
    source: usize,
    tolerance: f64,
) -> Result<IdentityVerdict> {
    if m_prime >= n_prime || n_prime >= env.layers || source >= env.width {
        return Err(Error::InvalidArgument(format!(
            "bad identity span ({m_prime}, {n_prime}, source {source})"
        )));
    }
    let span = n_prime - m_prime;
    let count = env.width.checked_pow(span as u32).unwrap_or(usize::MAX);
    if count > ENUMERATION_GUARD {
        return Err(Error::InvalidArgument(format!(
            "enumeration guard exceeded: {count} paths"
        )));
    }
    // Literal enumeration of every path out of the source.
    let mut fwd_mass = vec![0.0f64; env.width];
    let mut bwd_mass = vec![0.0f64; env.width];
    let mut suffix = vec![0usize; span];
    'enumerate: loop {
        let mut fwd = 1.0;
        let mut bwd = 1.0;
        let mut prev = source;
        for (i, &s) in suffix.iter().enumerate() {
            fwd *= env.p_fwd(m_prime + i, prev)[s];
            bwd *= env.p_bwd(m_prime + i, s)[prev];
            prev = s;
        }
        let terminal = *suffix.last().unwrap();
        fwd_mass[terminal] += fwd;
        bwd_mass[terminal] += bwd;
        let mut i = 0;
        loop {
            if i == span {
                break 'enumerate;
            }
            suffix[i] += 1;
            if suffix[i] < env.width {
                continue 'enumerate;
            }
            suffix[i] = 0;
            i += 1;
        }
    }
    let log_src = env.log_c[m_prime][source] + env.log_r[m_prime][source];
    let mut checks = Vec::with_capacity(env.width);
    let mut worst: f64 = 0.0;
    let mut ratios = Vec::with_capacity(env.width);
    for b in 0..env.width {
        let cr_ratio = (env.log_c[n_prime][b] + env.log_r[n_prime][b] - log_src).exp();
        let rhs = cr_ratio * bwd_mass[b];
        let rel = (fwd_mass[b] - rhs).abs() / rhs.abs().max(1e-300);
        worst = worst.max(rel);
        ratios.push(
            fwd_mass[b]
                / ((env.log_c[n_prime][b] + env.log_r[n_prime][b]).exp() * bwd_mass[b]),
        );
        checks.push(TerminalCheck {
            terminal: b,
            lhs: fwd_mass[b],
            rhs,
            backward_mass: bwd_mass[b],
            rel_error: rel,
        });
    }
    let r_max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let r_min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = (r_max - r_min) / r_max.abs().max(1e-300);
    Ok(IdentityVerdict {
        checks,
        worst_rel_error: worst,
        proportionality_spread: spread,
        tolerance,
        pass: worst <= tolerance,
    })
}

/// |Σ g_i| vs Σ |g_i| over a contiguous partition of one full path.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionCheck {
    pub segments: Vec<f64>,
    pub full_residual: f64,
    pub sum_abs: f64,
    pub holds: bool,
}

/// Exact triangle-inequality comparison for a list of segment residuals.
pub fn triangle_check(gs: &[f64]) -> (f64, f64, bool) {
    let total: f64 = gs.iter().sum();
    let bound: f64 = gs.iter().map(|g| g.abs()).sum();
    (total.abs(), bound, total.abs() <= bound)
}

/// Splits `path` (one state per layer, covering layer 0..=L−1) at the given
/// boundary layers and checks that the segmentwise residuals compose.
pub fn verify_theorem2_composition(
    env: &MicroEnv,
    path: &[usize],
    boundaries: &[usize],
) -> Result<CompositionCheck> {
    if path.len() != env.layers {
        return Err(Error::DimMismatch {
            context: "path length (one state per layer)",
            expected: env.layers,
            actual: path.len(),
        });
    }
    if boundaries.first() != Some(&0)
        || boundaries.last() != Some(&(env.layers - 1))
        || boundaries.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::InvalidArgument(format!(
            "boundaries {boundaries:?} must strictly increase from 0 to {}",
            env.layers - 1
        )));
    }
    let segments: Vec<f64> = boundaries
        .windows(2)
        .map(|w| env.residual(w[0], &path[w[0]..=w[1]]))
        .collect();
    let (full_abs, sum_abs, holds) = triangle_check(&segments);
    let full_residual: f64 = segments.iter().sum();
    debug_assert!((full_residual.abs() - full_abs).abs() < 1e-12);
    Ok(CompositionCheck {
        segments,
        full_residual,
        sum_abs,
        holds,
    })
}

/// Both sides of the end-to-end error bound on a quadratic task.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem3Check {
    pub lhs: f64,
    pub rhs: f64,
    /// Measured reconstruction error ‖θ̂ − θ_T‖².
    pub c: f64,
    /// Loss bound ψ = L(θ⁰).
    pub psi: f64,
    pub holds: bool,
}

/// Runs T gradient-descent steps at 1/l from θ⁰, measures the reconstruction
/// error of θ̂ against the resulting θ_T, and checks
/// L(θ̂) − L(θ*) ≤ (λ/2)[c + (2ψ/μ)(1 − μ/l)^T] with λ the largest Hessian
/// eigenvalue.
pub fn verify_theorem3_decomposition(
    task: &QuadraticTask,
    theta_hat: &ParameterVector,
    theta0: &ParameterVector,
    t_steps: usize,
) -> Result<Theorem3Check> {
    let l = task.smoothness();
    let mu = task.mu();
    let lambda = l;
    let psi = task.loss(theta0)?;
    let mut theta_t = theta0.clone();
    for _ in 0..t_steps {
        let (_, g) = task.loss_grad(&theta_t)?;
        theta_t.axpy(-1.0 / l, g.values());
    }
    let c = theta_hat.squared_distance(&theta_t)?;
    let lhs = task.loss(theta_hat)? - task.loss(task.theta_star())?;
    let rhs = 0.5 * lambda * (c + 2.0 * psi / mu * (1.0 - mu / l).powi(t_steps as i32));
    Ok(Theorem3Check {
        lhs,
        rhs,
        c,
        psi,
        holds: lhs <= rhs * (1.0 + 1e-9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;

    #[test]
    fn forward_mass_sums_to_one() {
        let env = MicroEnv::random(4, 3, &mut Rng::new(1)).unwrap();
        for source in 0..3 {
            let mut total = 0.0;
            for path in env.enumerate_paths(0, 3).unwrap() {
                if path[0] != source {
                    continue;
                }
                let mut p = 1.0;
                for (i, w) in path.windows(2).enumerate() {
                    p *= env.p_fwd(i, w[0])[w[1]];
                }
                total += p;
            }
            assert!((total - 1.0).abs() <= 1e-12, "source {source}: {total}");
        }
    }

    #[test]
    fn backward_mass_sums_to_one() {
        // The fact the identity proof leans on: summed backward products over
        // all paths into a fixed terminal equal 1.
        let env = MicroEnv::random(4, 3, &mut Rng::new(2)).unwrap();
        for terminal in 0..3 {
            let mut total = 0.0;
            for path in env.enumerate_paths(0, 3).unwrap() {
                if *path.last().unwrap() != terminal {
                    continue;
                }
                let mut p = 1.0;
                for (i, w) in path.windows(2).enumerate() {
                    p *= env.p_bwd(i, w[1])[w[0]];
                }
                total += p;
            }
            assert!((total - 1.0).abs() <= 1e-12, "terminal {terminal}: {total}");
        }
    }

    #[test]
    fn balanced_construction_has_zero_residuals() {
        for seed in 0..5 {
            let env = MicroEnv::balanced(4, 3, &mut Rng::new(seed)).unwrap();
            let worst = env.max_abs_residual().unwrap();
            assert!(worst <= 1e-10, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn uniform_env_is_balanced_and_training_is_noop() {
        let mut env = MicroEnv::random(3, 2, &mut Rng::new(3)).unwrap();
        for t in env.fwd_logits.iter_mut().chain(env.bwd_logits.iter_mut()) {
            for row in t.iter_mut() {
                row.iter_mut().for_each(|z| *z = 0.0);
            }
        }
        for row in env.log_c.iter_mut() {
            row.iter_mut().for_each(|c| *c = 0.3);
        }
        for row in env.log_r.iter_mut() {
            row.iter_mut().for_each(|r| *r = -0.7);
        }
        assert!(env.max_abs_residual().unwrap() <= 1e-12);
        let trained = train_microenv(&env, 100, 0.05).unwrap();
        // Zero gradients everywhere: parameters unchanged.
        assert_eq!(trained, env);
    }

    #[test]
    fn zero_lr_is_noop() {
        let env = MicroEnv::random(3, 2, &mut Rng::new(4)).unwrap();
        let same = train_microenv(&env, 50, 0.0).unwrap();
        assert_eq!(env, same);
    }

    #[test]
    fn training_drives_residuals_below_tolerance() {
        let env = MicroEnv::random(3, 2, &mut Rng::new(5)).unwrap();
        assert!(env.max_abs_residual().unwrap() > 1e-3);
        let trained = train_microenv(&env, 5000, 0.05).unwrap();
        let worst = trained.max_abs_residual().unwrap();
        assert!(worst <= 1e-6, "max residual {worst}");
    }

    #[test]
    fn scalar_perturbation_moves_residual_linearly() {
        // Balanced env, then +δ on log C at one terminal state: every
        // sub-trajectory ending there gets |r| = δ exactly.
        let mut env = MicroEnv::balanced(3, 2, &mut Rng::new(6)).unwrap();
        let delta = 0.37;
        env.log_c[2][1] += delta;
        for path in env.enumerate_paths(0, 2).unwrap() {
            let r = env.residual(0, &path);
            if path[2] == 1 {
                assert!((r.abs() - delta).abs() <= 1e-10, "{r}");
            } else {
                assert!(r.abs() <= 1e-10, "{r}");
            }
        }
    }

    #[test]
    fn identity_single_edge_env() {
        // Width 1: a single trajectory; the identity reduces to the
        // residual-zero equation.
        let env = MicroEnv::balanced(2, 1, &mut Rng::new(7)).unwrap();
        let verdict = verify_theorem1(&env, 0, 1, 0, 1e-9).unwrap();
        assert!(verdict.pass, "rel error {}", verdict.worst_rel_error);
    }

    #[test]
    fn identity_holds_on_trained_env_and_fails_on_random() {
        let env = MicroEnv::random(4, 3, &mut Rng::new(8)).unwrap();
        let trained = train_microenv(&env, 6000, 0.05).unwrap();
        assert!(trained.max_abs_residual().unwrap() <= 1e-6);
        for m in 0..3 {
            for n in m + 1..4 {
                for source in 0..3 {
                    let v = verify_theorem1(&trained, m, n, source, 1e-3).unwrap();
                    assert!(
                        v.pass,
                        "span ({m},{n}) source {source}: rel {}",
                        v.worst_rel_error
                    );
                    assert!(v.proportionality_spread.is_finite());
                }
            }
        }
        // Negative control: the untrained env must fail.
        let v = verify_theorem1(&env, 0, 3, 0, 1e-3).unwrap();
        assert!(!v.pass, "random env unexpectedly passed");
    }

    #[test]
    fn triangle_check_examples() {
        assert_eq!(triangle_check(&[0.0, 0.0]), (0.0, 0.0, true));
        let (lhs, rhs, holds) = triangle_check(&[1.0, -1.0]);
        assert_eq!((lhs, rhs), (0.0, 2.0));
        assert!(holds);
    }

    #[test]
    fn composition_holds_on_random_partitions() {
        let env = MicroEnv::random(4, 3, &mut Rng::new(9)).unwrap();
        let mut rng = Rng::new(10);
        for _ in 0..1000 {
            let path: Vec<usize> = (0..4).map(|_| rng.index(3)).collect();
            // Random strictly increasing boundary set from {0..3}.
            let mut boundaries = vec![0usize];
            for layer in 1..3 {
                if rng.chance(0.5) {
                    boundaries.push(layer);
                }
            }
            boundaries.push(3);
            let check = verify_theorem2_composition(&env, &path, &boundaries).unwrap();
            assert!(check.holds);
            // Telescoping: segment sum equals the direct full residual.
            let direct = env.residual(0, &path);
            assert!((check.full_residual - direct).abs() <= 1e-10);
        }
    }

    #[test]
    fn theorem3_trivial_and_sweeps() {
        let mut rng = Rng::new(11);
        // θ̂ = θ_T = θ*: lhs 0 ≤ rhs.
        let task = QuadraticTask::random(4, 0.5, 5.0, 0, &mut rng).unwrap();
        let star = task.theta_star().clone();
        let check = verify_theorem3_decomposition(&task, &star, &star, 3).unwrap();
        assert!(check.holds);
        assert!(check.lhs.abs() <= 1e-18);

        // c = 0 sweeps: θ̂ set to the actual GD iterate.
        for case in 0..100 {
            let dim = 1 + rng.index(8);
            let task = QuadraticTask::random(dim, 0.3, 8.0, case, &mut rng).unwrap();
            let theta0 = nn::gaussian_sample(&mut rng, dim).unwrap();
            let t = rng.index(60);
            let l = task.smoothness();
            let mut theta_t = theta0.clone();
            for _ in 0..t {
                let (_, g) = task.loss_grad(&theta_t).unwrap();
                theta_t.axpy(-1.0 / l, g.values());
            }
            let check = verify_theorem3_decomposition(&task, &theta_t, &theta0, t).unwrap();
            assert!(check.holds, "case {case}: lhs {} rhs {}", check.lhs, check.rhs);
            assert!(check.c.abs() <= 1e-18);
        }

        // Adversarial θ̂ far from θ_T: rhs grows with the measured c.
        for case in 0..100 {
            let dim = 1 + rng.index(8);
            let task = QuadraticTask::random(dim, 0.3, 8.0, 1000 + case, &mut rng).unwrap();
            let theta0 = nn::gaussian_sample(&mut rng, dim).unwrap();
            let mut theta_hat = nn::gaussian_sample(&mut rng, dim).unwrap();
            for v in theta_hat.values_mut() {
                *v *= 10.0;
            }
            let check = verify_theorem3_decomposition(&task, &theta_hat, &theta0, 10).unwrap();
            assert!(check.holds, "case {case}: lhs {} rhs {}", check.lhs, check.rhs);
        }
    }
}
