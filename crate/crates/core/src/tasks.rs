//! Synthetic downstream tasks.
//!
//! Quadratics with known strong-convexity/smoothness constants feed the
//! bound checks; Gaussian-blob classification episodes feed the end-to-end
//! pipeline; 2-D analytic landscapes feed trajectory-overlay exports.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{self, Gradient, MlpSpec, ParameterVector};
use crate::rng::Rng;

/// Strongly convex quadratic ½(θ−θ*)ᵀA(θ−θ*) with A = Qᵀ diag(eigs) Q.
///
/// The extreme eigenvalues are the strong-convexity constant μ and the
/// smoothness constant l, exactly by construction.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    dim: usize,
    eigs: Vec<f64>,
    theta_star: ParameterVector,
    rotation_seed: u64,
    task_id: u64,
    /// Rows of q are the orthonormal eigen-directions.
    q: Matrix,
}

impl QuadraticTask {
    pub fn new(
        eigs: Vec<f64>,
        theta_star: ParameterVector,
        rotation_seed: u64,
        task_id: u64,
    ) -> Result<Self> {
        if eigs.is_empty() {
            return Err(Error::InvalidArgument("quadratic needs >= 1 eigenvalue".into()));
        }
        if eigs.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "hessian eigenvalues must be positive and finite, got {eigs:?}"
            )));
        }
        let dim = eigs.len();
        if theta_star.dim() != dim {
            return Err(Error::DimMismatch {
                context: "quadratic optimum dim",
                expected: dim,
                actual: theta_star.dim(),
            });
        }
        let q = linalg::random_orthogonal(dim, &mut Rng::new(rotation_seed));
        Ok(Self {
            dim,
            eigs,
            theta_star,
            rotation_seed,
            task_id,
            q,
        })
    }

    /// Random instance with eigenvalues log-uniform in [min_eig, max_eig].
    pub fn random(
        dim: usize,
        min_eig: f64,
        max_eig: f64,
        task_id: u64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dim == 0 || !(min_eig > 0.0) || max_eig < min_eig {
            return Err(Error::InvalidArgument(format!(
                "bad quadratic parameters dim={dim} eigs in [{min_eig}, {max_eig}]"
            )));
        }
        let mut eigs: Vec<f64> = (0..dim)
            .map(|_| {
                let u = rng.uniform();
                (min_eig.ln() + u * (max_eig.ln() - min_eig.ln())).exp()
            })
            .collect();
        // Pin the extremes so the declared (μ, l) span the requested range.
        if dim >= 2 {
            eigs[0] = min_eig;
            eigs[1] = max_eig;
        }
        let theta_star = nn::gaussian_sample(rng, dim)?;
        let rotation_seed = rng.next_u64();
        Self::new(eigs, theta_star, rotation_seed, task_id)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn task_id(&self) -> u64 {
        self.task_id
    }

    pub fn rotation_seed(&self) -> u64 {
        self.rotation_seed
    }

    pub fn theta_star(&self) -> &ParameterVector {
        &self.theta_star
    }

    pub fn hessian_eigs(&self) -> &[f64] {
        &self.eigs
    }

    /// Strong-convexity constant (smallest Hessian eigenvalue).
    pub fn mu(&self) -> f64 {
        self.eigs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Smoothness constant (largest Hessian eigenvalue).
    pub fn smoothness(&self) -> f64 {
        self.eigs.iter().cloned().fold(0.0, f64::max)
    }

    fn is_isotropic(&self) -> bool {
        self.eigs.iter().all(|&e| e == self.eigs[0])
    }

    /// A·v for an arbitrary vector. Isotropic tasks skip the rotation so the
    /// scaling is arithmetically exact (A = cI regardless of basis).
    pub fn apply_hessian(&self, v: &[f64]) -> Vec<f64> {
        if self.is_isotropic() {
            return v.iter().map(|x| x * self.eigs[0]).collect();
        }
        let mut u = self.q.matvec(v);
        for (ui, e) in u.iter_mut().zip(&self.eigs) {
            *ui *= e;
        }
        self.q.matvec_t(&u)
    }

    pub fn loss(&self, theta: &ParameterVector) -> Result<f64> {
        Ok(self.loss_grad(theta)?.0)
    }
}

/// Loss and gradient of a quadratic task: L = ½dᵀAd, ∇L = Ad with d = θ−θ*.
pub fn quadratic_loss_grad(
    task: &QuadraticTask,
    theta: &ParameterVector,
) -> Result<(f64, Gradient)> {
    if theta.dim() != task.dim {
        return Err(Error::DimMismatch {
            context: "quadratic input dim",
            expected: task.dim,
            actual: theta.dim(),
        });
    }
    let d: Vec<f64> = theta
        .values()
        .iter()
        .zip(task.theta_star.values())
        .map(|(t, s)| t - s)
        .collect();
    if task.is_isotropic() {
        let e = task.eigs[0];
        let loss = 0.5 * e * d.iter().map(|x| x * x).sum::<f64>();
        let grad: Vec<f64> = d.iter().map(|x| e * x).collect();
        return Ok((loss, Gradient::new(grad)?));
    }
    let u = task.q.matvec(&d);
    let loss = 0.5
        * u.iter()
            .zip(&task.eigs)
            .map(|(ui, e)| e * ui * ui)
            .sum::<f64>();
    let mut eu = u;
    for (ui, e) in eu.iter_mut().zip(&task.eigs) {
        *ui *= e;
    }
    let grad = task.q.matvec_t(&eu);
    Ok((loss, Gradient::new(grad)?))
}

impl QuadraticTask {
    pub fn loss_grad(&self, theta: &ParameterVector) -> Result<(f64, Gradient)> {
        quadratic_loss_grad(self, theta)
    }
}

/// Analytic 2-D loss surfaces used for trajectory-overlay exports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Landscape2D {
    /// (x² − a)² + b·y²: two symmetric basins at (±√a, 0).
    TwoBasin { a: f64, b: f64 },
    /// (a − x)² + b(y − x²)²: curved valley.
    RosenbrockLike { a: f64, b: f64 },
}

impl Landscape2D {
    pub fn loss_grad(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let [x, y] = p;
        match *self {
            Landscape2D::TwoBasin { a, b } => {
                let t = x * x - a;
                let loss = t * t + b * y * y;
                (loss, [4.0 * x * t, 2.0 * b * y])
            }
            Landscape2D::RosenbrockLike { a, b } => {
                let t = y - x * x;
                let loss = (a - x) * (a - x) + b * t * t;
                (loss, [-2.0 * (a - x) - 4.0 * b * x * t, 2.0 * b * t])
            }
        }
    }
}

/// One downstream classification task: conditioning samples, labeled
/// train/eval splits, and the class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub unlabeled_x: Matrix,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub eval_x: Matrix,
    pub eval_y: Vec<usize>,
    pub n_classes: usize,
    pub task_id: u64,
    /// Per-class mixture means (one row per class); kept for diagnostics.
    pub class_means: Matrix,
}

impl Episode {
    /// Smallest pairwise distance between class means.
    pub fn min_mean_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.n_classes {
            for j in (i + 1)..self.n_classes {
                let d = linalg::squared_distance(self.class_means.row(i), self.class_means.row(j))
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

/// Shape of a blob-episode suite.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub n_episodes: usize,
    pub n_classes: usize,
    pub dim_x: usize,
    pub samples_per_class: usize,
    /// Class means are drawn from `mean_scale · N(0, I)`; unit-variance
    /// clusters, so this directly controls separation in standard deviations.
    pub mean_scale: f64,
    /// Number of unlabeled conditioning samples per episode.
    pub conditioning_samples: usize,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            n_episodes: 8,
            n_classes: 3,
            dim_x: 2,
            samples_per_class: 20,
            mean_scale: 4.0,
            conditioning_samples: 16,
        }
    }
}

/// Deterministic suite of Gaussian-mixture classification episodes.
///
/// Each episode draws its own class means, so tasks genuinely differ; eval
/// points are held out from the train split by construction.
pub fn make_blob_episodes(rng: &mut Rng, cfg: &BlobConfig) -> Result<Vec<Episode>> {
    if cfg.n_episodes == 0
        || cfg.n_classes < 2
        || cfg.dim_x == 0
        || cfg.samples_per_class == 0
        || cfg.conditioning_samples == 0
    {
        return Err(Error::InvalidArgument(format!(
            "bad blob config {cfg:?} (all counts positive, n_classes >= 2)"
        )));
    }
    let mut episodes = Vec::with_capacity(cfg.n_episodes);
    for e in 0..cfg.n_episodes {
        let task_id = e as u64;
        let means: Vec<Vec<f64>> = (0..cfg.n_classes)
            .map(|_| {
                rng.normal_vec(cfg.dim_x)
                    .into_iter()
                    .map(|v| v * cfg.mean_scale)
                    .collect()
            })
            .collect();
        let draw = |rng: &mut Rng, class: usize| -> Vec<f64> {
            means[class]
                .iter()
                .map(|m| m + rng.normal())
                .collect()
        };
        let mut train_x = Vec::new();
        let mut train_y = Vec::new();
        let mut eval_x = Vec::new();
        let mut eval_y = Vec::new();
        for class in 0..cfg.n_classes {
            for _ in 0..cfg.samples_per_class {
                train_x.push(draw(rng, class));
                train_y.push(class);
            }
            for _ in 0..cfg.samples_per_class {
                eval_x.push(draw(rng, class));
                eval_y.push(class);
            }
        }
        let unlabeled: Vec<Vec<f64>> = (0..cfg.conditioning_samples)
            .map(|i| draw(rng, i % cfg.n_classes))
            .collect();
        episodes.push(Episode {
            unlabeled_x: Matrix::from_rows(&unlabeled)?,
            train_x: Matrix::from_rows(&train_x)?,
            train_y,
            eval_x: Matrix::from_rows(&eval_x)?,
            eval_y,
            n_classes: cfg.n_classes,
            task_id,
            class_means: Matrix::from_rows(&means)?,
        });
    }
    Ok(episodes)
}

/// Mean cross-entropy (with logits) and its parameter gradient over a batch.
pub fn classification_loss_grad(
    spec: &MlpSpec,
    theta: &ParameterVector,
    x: &Matrix,
    y: &[usize],
) -> Result<(f64, Gradient)> {
    if x.rows() != y.len() {
        return Err(Error::DimMismatch {
            context: "batch labels",
            expected: x.rows(),
            actual: y.len(),
        });
    }
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty classification batch".into()));
    }
    let n_classes = spec.output_dim();
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let trace = nn::mlp_forward_traced(spec, theta, x)?;
    let logits = trace.output();
    let batch = x.rows();
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(batch, n_classes);
    for r in 0..batch {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[y[r]];
        let d = dlogits.row_mut(r);
        for (c, dc) in d.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *dc = (p - if c == y[r] { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    loss /= batch as f64;
    let (grad, _) = nn::mlp_backward_traced(spec, theta, &trace, &dlogits)?;
    Ok((loss, grad))
}

/// Fraction of correctly argmax-classified rows.
pub fn classification_accuracy(
    spec: &MlpSpec,
    theta: &ParameterVector,
    x: &Matrix,
    y: &[usize],
) -> Result<f64> {
    if x.rows() != y.len() || x.rows() == 0 {
        return Err(Error::InvalidArgument(
            "accuracy needs a nonempty batch with matching labels".into(),
        ));
    }
    let logits = nn::mlp_forward(spec, theta, x)?;
    let mut correct = 0usize;
    for r in 0..x.rows() {
        let row = logits.row(r);
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == y[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / x.rows() as f64)
}
