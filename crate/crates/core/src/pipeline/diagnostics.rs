//! Post-training diagnostics: local-policy cosine similarity and 2-D
//! trajectory projections for plotting.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::ParameterVector;
use crate::policy::{sample_online_trajectory, Conditioning, PolicyParams};
use crate::rng::Rng;
use crate::store::OfflineTrajectory;

/// Histogram over [−1, 1] with bin width 0.1 plus the mean cosine between
/// matched online and offline displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct CosSimDiagnostic {
    /// 20 bins covering [−1, 1].
    pub histogram: [u32; 20],
    pub mean: f64,
    pub n_pairs: usize,
    /// Pairs where a displacement had ~zero norm (counted as cos = 0).
    pub zero_displacement_flags: usize,
}

/// Samples matched index pairs from full offline trajectories, rolls the
/// policy over the same horizon, and compares displacement directions:
/// cos((s_n' − s_m'), (θ_n − θ_m)).
pub fn cos_sim_diagnostic(
    params: &PolicyParams,
    trajectories: &[OfflineTrajectory],
    k: usize,
    n_pairs: usize,
    rng: &mut Rng,
) -> Result<CosSimDiagnostic> {
    if trajectories.is_empty() || n_pairs == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "need trajectories, pairs >= 1, k >= 1".into(),
        ));
    }
    let mut histogram = [0u32; 20];
    let mut total = 0.0;
    let mut flags = 0usize;
    // Cache conditioning and online rolls per trajectory index.
    let conds: Vec<Conditioning> = trajectories
        .iter()
        .map(|t| Conditioning::new(&t.conditioning))
        .collect();
    for _ in 0..n_pairs {
        let ti = rng.index(trajectories.len());
        let traj = &trajectories[ti];
        let t_len = traj.t_len();
        if t_len < k {
            return Err(Error::InvalidArgument(format!(
                "trajectory {ti} shorter than one segment"
            )));
        }
        let segments = t_len / k;
        // Aligned pair (m, n), uniform.
        let n_aligned_pairs = segments * (segments + 1) / 2;
        let mut idx = rng.index(n_aligned_pairs);
        let mut i = 0usize;
        let mut row = segments;
        while idx >= row {
            idx -= row;
            i += 1;
            row -= 1;
        }
        let j = i + 1 + idx;
        let (m, n) = (i * k, j * k);
        let s0 = crate::nn::gaussian_sample(rng, traj.dim())?;
        let online = sample_online_trajectory(params, &s0, &conds[ti], segments, rng)?;
        let online_disp: Vec<f64> = online.states[j]
            .values()
            .iter()
            .zip(online.states[i].values())
            .map(|(a, b)| a - b)
            .collect();
        let offline_disp: Vec<f64> = traj.states[n]
            .values()
            .iter()
            .zip(traj.states[m].values())
            .map(|(a, b)| a - b)
            .collect();
        let cos = match linalg::cosine_similarity(&online_disp, &offline_disp) {
            Some(c) => c,
            None => {
                flags += 1;
                0.0
            }
        };
        let bin = (((cos + 1.0) / 0.1) as usize).min(19);
        histogram[bin] += 1;
        total += cos;
    }
    Ok(CosSimDiagnostic {
        histogram,
        mean: total / n_pairs as f64,
        n_pairs,
        zero_displacement_flags: flags,
    })
}

/// One projected state.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    pub traj_id: u64,
    pub step: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    pub points: Vec<ProjectedPoint>,
    /// Set when the pooled covariance was degenerate and the projection fell
    /// back to the first two raw coordinates.
    pub degenerate_fallback: bool,
    /// Variance captured along the two projection directions (identity
    /// projection reports total variance).
    pub captured_variance: f64,
}

/// Projects trajectories into the plane: identity when states are already
/// 2-D, otherwise onto the top-2 principal directions of the pooled states
/// (sign convention: first nonzero loading positive).
pub fn project_trajectories_2d(
    trajectories: &[(u64, Vec<ParameterVector>)],
) -> Result<Projection2D> {
    if trajectories.is_empty() || trajectories.iter().any(|(_, t)| t.is_empty()) {
        return Err(Error::InvalidArgument("need non-empty trajectories".into()));
    }
    let dim = trajectories[0].1[0].dim();
    if dim < 2 {
        return Err(Error::InvalidArgument("state dim must be >= 2".into()));
    }
    if dim > 2 && trajectories.len() < 2 && trajectories[0].1.len() < 2 {
        return Err(Error::InvalidArgument(
            "projection needs >= 2 states overall or 2-D inputs".into(),
        ));
    }
    if dim == 2 {
        let mut points = Vec::new();
        let mut total_var = 0.0;
        let n: usize = trajectories.iter().map(|(_, t)| t.len()).sum();
        let mut mean = [0.0f64; 2];
        for (_, t) in trajectories {
            for s in t {
                mean[0] += s.values()[0];
                mean[1] += s.values()[1];
            }
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for (id, t) in trajectories {
            for (step, s) in t.iter().enumerate() {
                points.push(ProjectedPoint {
                    traj_id: *id,
                    step,
                    u: s.values()[0],
                    v: s.values()[1],
                });
                total_var += (s.values()[0] - mean[0]).powi(2) + (s.values()[1] - mean[1]).powi(2);
            }
        }
        return Ok(Projection2D {
            points,
            degenerate_fallback: false,
            captured_variance: total_var / n as f64,
        });
    }

    // Pool and center.
    let n: usize = trajectories.iter().map(|(_, t)| t.len()).sum();
    let mut mean = vec![0.0; dim];
    for (_, t) in trajectories {
        for s in t {
            for (m, v) in mean.iter_mut().zip(s.values()) {
                *m += v;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(dim, dim);
    for (_, t) in trajectories {
        for s in t {
            let d: Vec<f64> = s.values().iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..dim {
                for j in 0..dim {
                    cov.set(i, j, cov.get(i, j) + d[i] * d[j] / n as f64);
                }
            }
        }
    }
    let total_var: f64 = (0..dim).map(|i| cov.get(i, i)).sum();
    let (mut points, fallback, captured): (Vec<ProjectedPoint>, bool, f64) = if total_var < 1e-18
    {
        // All states identical: project onto raw coordinates and flag it.
        let points = trajectories
            .iter()
            .flat_map(|(id, t)| {
                t.iter().enumerate().map(move |(step, s)| ProjectedPoint {
                    traj_id: *id,
                    step,
                    u: s.values()[0],
                    v: s.values()[1],
                })
            })
            .collect();
        (points, true, 0.0)
    } else {
        let (eigs, vecs) = linalg::symmetric_eigen(&cov)?;
        let mut dir1 = vecs.row(0).to_vec();
        let mut dir2 = vecs.row(1).to_vec();
        // Deterministic sign: first nonzero loading positive.
        for dir in [&mut dir1, &mut dir2] {
            if let Some(first) = dir.iter().find(|v| v.abs() > 1e-12) {
                if *first < 0.0 {
                    for v in dir.iter_mut() {
                        *v = -*v;
                    }
                }
            }
        }
        let points = trajectories
            .iter()
            .flat_map(|(id, t)| {
                let dir1 = &dir1;
                let dir2 = &dir2;
                let mean = &mean;
                t.iter().enumerate().map(move |(step, s)| {
                    let d: Vec<f64> =
                        s.values().iter().zip(mean).map(|(v, m)| v - m).collect();
                    ProjectedPoint {
                        traj_id: *id,
                        step,
                        u: linalg::dot(&d, dir1),
                        v: linalg::dot(&d, dir2),
                    }
                })
            })
            .collect();
        (points, false, eigs[0].max(0.0) + eigs[1].max(0.0))
    };
    points.sort_by(|a, b| (a.traj_id, a.step).cmp(&(b.traj_id, b.step)));
    Ok(Projection2D {
        points,
        degenerate_fallback: fallback,
        captured_variance: captured,
    })
}

/// CSV rows (traj_id, step, u, v) for external plotting.
pub fn projection_to_csv(p: &Projection2D) -> String {
    let mut out = String::from("traj_id,step,u,v\n");
    for pt in &p.points {
        out.push_str(&format!("{},{},{},{}\n", pt.traj_id, pt.step, pt.u, pt.v));
    }
    out
}

/// CSV rows (bin_low,bin_high,count) for the cosine histogram.
pub fn cos_hist_to_csv(d: &CosSimDiagnostic) -> String {
    let mut out = String::from("bin_low,bin_high,count\n");
    for (i, c) in d.histogram.iter().enumerate() {
        let low = -1.0 + 0.1 * i as f64;
        out.push_str(&format!("{:.1},{:.1},{}\n", low, low + 0.1, c));
    }
    out
}
