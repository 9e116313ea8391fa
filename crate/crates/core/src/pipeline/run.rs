//! The prepare → store → train → infer → eval → diagnose → verify pipeline.
//!
//! Everything is seeded: a run is a pure function of (config, seed) except
//! for wall-clock measurements, which are quarantined in the report's timing
//! fields. Seeds run sequentially and merge in seed order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::hybrid::{self, DownstreamTasks, TrainMode, TrainOutcome};
use crate::nn::{self, MlpSpec, ParameterVector};
use crate::optim::{
    prepare_trajectory, ClassificationTask, LandscapeTask, PolicyKind, TrajectoryTask,
};
use crate::pipeline::config::{ExperimentConfig, TaskSuite};
use crate::pipeline::diagnostics::{
    cos_hist_to_csv, cos_sim_diagnostic, project_trajectories_2d, projection_to_csv,
};
use crate::pipeline::report::{Metric, PhaseTiming, RunReport, Verdict};
use crate::policy::{sample_online_trajectory, Conditioning, PolicyParams};
use crate::rng::Rng;
use crate::store::{sample_subtrajectories, write_episodes, write_store, OfflineTrajectory};
use crate::tasks::{make_blob_episodes, Episode, Landscape2D, QuadraticTask};
use crate::theorem;

// Substream ids per phase, so any phase can be reproduced in isolation.
const STREAM_TASKS: u64 = 1;
const STREAM_PREPARE: u64 = 2;
const STREAM_STORE: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_INFER: u64 = 5;
const STREAM_DIAG: u64 = 6;
const STREAM_VERIFY: u64 = 7;
const STREAM_PER_TASK: u64 = 1000;

/// Generates weights for an episode by rolling the trained policy `n_steps`
/// transitions from s_0 ~ N(0, I); returns the final state and the
/// wall-clock seconds spent inside sampling only.
pub fn infer_weights(
    params: &PolicyParams,
    episode: &Episode,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<(ParameterVector, f64)> {
    infer_weights_cond(params, &Conditioning::new(&episode.unlabeled_x), n_steps, rng)
}

/// Conditioning-level variant of [`infer_weights`] for tasks without an
/// episode (quadratics, landscapes).
pub fn infer_weights_cond(
    params: &PolicyParams,
    cond: &Conditioning,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<(ParameterVector, f64)> {
    let s0 = nn::gaussian_sample(rng, params.spec().state_dim)?;
    let start = Instant::now();
    let traj = sample_online_trajectory(params, &s0, cond, n_steps, rng)?;
    let latency = start.elapsed().as_secs_f64();
    Ok((traj.final_state().clone(), latency))
}

/// Held-out accuracy of generated weights on an episode.
pub fn eval_generated_weights(
    theta_hat: &ParameterVector,
    episode: &Episode,
    spec: &MlpSpec,
) -> Result<f64> {
    crate::tasks::classification_accuracy(spec, theta_hat, &episode.eval_x, &episode.eval_y)
}

/// The per-seed task suite plus its offline trajectories.
pub struct PreparedSuite {
    pub trajectories: Vec<OfflineTrajectory>,
    pub episodes: Vec<Episode>,
    pub quadratics: Vec<QuadraticTask>,
    pub net: Option<MlpSpec>,
}

impl PreparedSuite {
    /// Downstream tasks for the end-to-end baseline mode, when the suite has
    /// labeled losses.
    pub fn downstream(&self) -> Option<DownstreamTasks<'_>> {
        if !self.episodes.is_empty() {
            Some(DownstreamTasks::Episodes {
                episodes: &self.episodes,
                net: self.net.as_ref().expect("blob suite carries a net"),
            })
        } else if !self.quadratics.is_empty() {
            Some(DownstreamTasks::Quadratics(&self.quadratics))
        } else {
            None
        }
    }
}

/// Builds the task suite for one seed and records its offline trajectories
/// (prepare phase). Pure function of (config, seed).
pub fn prepare_suite(config: &ExperimentConfig, seed: u64) -> Result<PreparedSuite> {
    let seed_rng = Rng::new(seed);
    prepare_suite_inner(config, &seed_rng)
}

fn prepare_suite_inner(config: &ExperimentConfig, seed_rng: &Rng) -> Result<PreparedSuite> {
    let mut task_rng = seed_rng.substream(STREAM_TASKS);
    let k = config.train.k;
    let mut trajectories = Vec::with_capacity(config.task.n_tasks);
    let mut episodes = Vec::new();
    let mut quadratics = Vec::new();
    let mut net = None;

    let tasks: Vec<Box<dyn TrajectoryTask>> = match config.task.suite {
        TaskSuite::Blobs => {
            let spec = config.net_spec()?;
            if spec.input_dim() != config.task.dim_x || spec.output_dim() != config.task.n_classes
            {
                return Err(Error::InvalidArgument(format!(
                    "net widths {:?} do not match dim_x={} / n_classes={}",
                    config.net.widths, config.task.dim_x, config.task.n_classes
                )));
            }
            episodes = make_blob_episodes(&mut task_rng, &config.blob_config())?;
            net = Some(spec.clone());
            episodes
                .iter()
                .map(|ep| {
                    Box::new(ClassificationTask {
                        episode: ep.clone(),
                        net: spec.clone(),
                        batch_size: config.optimizer_config(PolicyKind::Sgd).batch_size,
                    }) as Box<dyn TrajectoryTask>
                })
                .collect()
        }
        TaskSuite::Quadratic => {
            quadratics = (0..config.task.n_tasks)
                .map(|i| {
                    QuadraticTask::random(
                        config.task.quad_dim,
                        config.task.min_eig,
                        config.task.max_eig,
                        i as u64,
                        &mut task_rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            quadratics
                .iter()
                .map(|q| Box::new(q.clone()) as Box<dyn TrajectoryTask>)
                .collect()
        }
        TaskSuite::Landscape2d => (0..config.task.n_tasks)
            .map(|i| {
                Box::new(LandscapeTask {
                    landscape: if i % 2 == 0 {
                        Landscape2D::TwoBasin { a: 1.0, b: 0.5 }
                    } else {
                        Landscape2D::RosenbrockLike { a: 1.0, b: 5.0 }
                    },
                    task_id: i as u64,
                }) as Box<dyn TrajectoryTask>
            })
            .collect(),
    };

    let mut assign_rng = seed_rng.substream(STREAM_PREPARE);
    for (i, task) in tasks.iter().enumerate() {
        let kind = if assign_rng.chance(config.prepare.adam_fraction) {
            PolicyKind::Adam
        } else {
            PolicyKind::Sgd
        };
        let opt = config.optimizer_config(kind);
        let mut traj_rng = seed_rng.substream(STREAM_PER_TASK + i as u64);
        let mut traj = prepare_trajectory(task.as_ref(), &opt, &mut traj_rng)?;
        traj.truncate_to_multiple_of(k)?;
        trajectories.push(traj);
    }
    Ok(PreparedSuite {
        trajectories,
        episodes,
        quadratics,
        net,
    })
}

/// Samples the sub-trajectory store for one seed (store phase).
pub fn draw_store_samples(
    config: &ExperimentConfig,
    suite: &PreparedSuite,
    seed: u64,
) -> Result<Vec<crate::store::SubTrajectorySample>> {
    let mut store_rng = Rng::new(seed).substream(STREAM_STORE);
    let mut samples = Vec::new();
    for traj in &suite.trajectories {
        samples.extend(sample_subtrajectories(
            traj,
            config.prepare.samples_per_trajectory,
            config.train.k,
            config.prepare.full_span_prob,
            &mut store_rng,
        )?);
    }
    Ok(samples)
}

/// Trains the policy for one seed from store samples (train phase). The
/// suite is only consulted for the end-to-end baseline mode's labeled tasks.
pub fn train_seeded(
    config: &ExperimentConfig,
    samples: &[crate::store::SubTrajectorySample],
    suite: Option<&PreparedSuite>,
    seed: u64,
) -> Result<(PolicyParams, TrainOutcome)> {
    let downstream = suite.and_then(|s| s.downstream());
    let mut train_rng = Rng::new(seed).substream(STREAM_TRAIN);
    hybrid::train_policy(
        samples,
        downstream.as_ref(),
        &config.policy_net_config(),
        &config.train_config(),
        &mut train_rng,
    )
}

/// One generated weight vector per task.
#[derive(Debug, Clone, PartialEq)]
pub struct InferResult {
    pub task_id: u64,
    pub theta: ParameterVector,
    pub n_steps: usize,
    pub latency_seconds: f64,
}

/// Generates weights for every task in the suite (infer phase).
pub fn infer_suite(
    config: &ExperimentConfig,
    suite: &PreparedSuite,
    params: &PolicyParams,
    seed: u64,
) -> Result<Vec<InferResult>> {
    let infer_rng = Rng::new(seed).substream(STREAM_INFER);
    let k = config.train.k;
    let mut out = Vec::with_capacity(suite.trajectories.len());
    for (i, traj) in suite.trajectories.iter().enumerate() {
        let n_steps = traj.t_len() / k;
        let mut task_rng = infer_rng.substream(i as u64);
        let (theta, latency) = match (config.task.suite, config.train.mode) {
            (TaskSuite::Blobs, TrainMode::Hypernet) => {
                let start = Instant::now();
                let theta = hybrid::predict_oneshot(
                    params,
                    &Conditioning::new(&suite.episodes[i].unlabeled_x),
                )?;
                (theta, start.elapsed().as_secs_f64())
            }
            (TaskSuite::Blobs, _) => {
                infer_weights(params, &suite.episodes[i], n_steps, &mut task_rng)?
            }
            (_, TrainMode::Hypernet) => {
                let start = Instant::now();
                let theta = hybrid::predict_oneshot(params, &Conditioning::empty())?;
                (theta, start.elapsed().as_secs_f64())
            }
            _ => infer_weights_cond(params, &Conditioning::empty(), n_steps, &mut task_rng)?,
        };
        out.push(InferResult {
            task_id: traj.task_id,
            theta,
            n_steps,
            latency_seconds: latency,
        });
    }
    Ok(out)
}

/// Named per-seed scalar results.
#[derive(Default)]
struct SeedMetrics {
    values: Vec<(String, f64)>,
    timings: Vec<(String, f64)>,
}

impl SeedMetrics {
    fn put(&mut self, name: &str, v: f64) {
        self.values.push((name.to_string(), v));
    }

    fn put_timing(&mut self, name: &str, v: f64) {
        self.timings.push((name.to_string(), v));
    }
}

struct SeedArtifacts {
    metrics: SeedMetrics,
    theorem3_failures: usize,
    theorem3_total: usize,
    outcome: TrainOutcome,
}

fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    timings: &mut Vec<PhaseTiming>,
) -> Result<SeedArtifacts> {
    let seed_dir = out_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&seed_dir)?;
    let seed_rng = Rng::new(seed);
    let k = config.train.k;
    let mut metrics = SeedMetrics::default();

    // Prepare.
    let t0 = Instant::now();
    let suite = prepare_suite_inner(config, &seed_rng)?;
    timings.push(PhaseTiming {
        phase: format!("seed{seed}/prepare"),
        seconds: t0.elapsed().as_secs_f64(),
    });
    let mean_t = suite
        .trajectories
        .iter()
        .map(|t| t.t_len() as f64)
        .sum::<f64>()
        / suite.trajectories.len() as f64;
    metrics.put("mean_trajectory_len", mean_t);

    // Store.
    let t0 = Instant::now();
    let samples = draw_store_samples(config, &suite, seed)?;
    write_store(&seed_dir.join("store.lohp"), &samples)?;
    if !suite.episodes.is_empty() {
        write_episodes(&seed_dir.join("episodes.bin"), &suite.episodes)?;
    }
    timings.push(PhaseTiming {
        phase: format!("seed{seed}/store"),
        seconds: t0.elapsed().as_secs_f64(),
    });
    metrics.put("store_samples", samples.len() as f64);

    // Train.
    let t0 = Instant::now();
    let (params, outcome) = train_seeded(config, &samples, Some(&suite), seed)?;
    timings.push(PhaseTiming {
        phase: format!("seed{seed}/train"),
        seconds: t0.elapsed().as_secs_f64(),
    });
    crate::policy::save_policy(&seed_dir.join("policy.phi"), &params)?;
    {
        let mut csv = String::from("step,loss\n");
        for (i, l) in outcome.loss_curve.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(seed_dir.join("loss_curve.csv"), csv)?;
    }
    if let Some(step) = outcome.diverged_at {
        return Err(Error::NonFinite(format!(
            "training diverged at step {step} (seed {seed})"
        )));
    }
    let window = 50.min(outcome.loss_curve.len().max(1));
    if !outcome.loss_curve.is_empty() {
        let head: f64 = outcome.loss_curve[..window].iter().sum::<f64>() / window as f64;
        let tail: f64 = outcome.loss_curve[outcome.loss_curve.len() - window..]
            .iter()
            .sum::<f64>()
            / window as f64;
        metrics.put("train_loss_head", head);
        metrics.put("train_loss_tail", tail);
    }

    // Infer + eval.
    let t0 = Instant::now();
    let mut gen_scores = Vec::new();
    let mut ref_scores = Vec::new();
    let mut gen_losses = Vec::new();
    let mut step_counts = Vec::new();
    let mut theorem3_failures = 0usize;
    let mut theorem3_total = 0usize;
    let infer_results = infer_suite(config, &suite, &params, seed)?;
    for (i, traj) in suite.trajectories.iter().enumerate() {
        let n_steps = infer_results[i].n_steps;
        step_counts.push(n_steps as f64);
        let theta_hat = infer_results[i].theta.clone();
        match config.task.suite {
            TaskSuite::Blobs => {
                let ep = &suite.episodes[i];
                let net = suite.net.as_ref().unwrap();
                gen_scores.push(eval_generated_weights(&theta_hat, ep, net)?);
                ref_scores.push(eval_generated_weights(traj.last(), ep, net)?);
                let (gen_loss, _) = crate::tasks::classification_loss_grad(
                    net,
                    &theta_hat,
                    &ep.eval_x,
                    &ep.eval_y,
                )?;
                gen_losses.push(gen_loss);
            }
            TaskSuite::Quadratic => {
                let task = &suite.quadratics[i];
                gen_scores.push(task.loss(&theta_hat)?);
                ref_scores.push(task.loss(traj.last())?);
                gen_losses.push(task.loss(&theta_hat)?);
                let check = theorem::verify_theorem3_decomposition(
                    task,
                    &theta_hat,
                    traj.initial(),
                    traj.t_len(),
                )?;
                theorem3_total += 1;
                if !check.holds {
                    theorem3_failures += 1;
                }
            }
            TaskSuite::Landscape2d => {
                let v = theta_hat.values();
                let landscape = if i % 2 == 0 {
                    Landscape2D::TwoBasin { a: 1.0, b: 0.5 }
                } else {
                    Landscape2D::RosenbrockLike { a: 1.0, b: 5.0 }
                };
                gen_scores.push(landscape.loss_grad([v[0], v[1]]).0);
                let lv = traj.last().values();
                ref_scores.push(landscape.loss_grad([lv[0], lv[1]]).0);
                gen_losses.push(gen_scores[i]);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    match config.task.suite {
        TaskSuite::Blobs => {
            metrics.put("gen_accuracy", mean(&gen_scores));
            metrics.put("ref_accuracy", mean(&ref_scores));
            metrics.put(
                "accuracy_ratio",
                if mean(&ref_scores) > 0.0 {
                    mean(&gen_scores) / mean(&ref_scores)
                } else {
                    0.0
                },
            );
        }
        _ => {
            metrics.put("gen_loss", mean(&gen_scores));
            metrics.put("ref_loss", mean(&ref_scores));
        }
    }
    metrics.put("gen_eval_loss", mean(&gen_losses));
    metrics.put("mean_infer_steps", mean(&step_counts));

    // Latency: median over reps on task 0's horizon.
    let n0 = suite.trajectories[0].t_len() / k;
    let cond0 = match config.task.suite {
        TaskSuite::Blobs => Conditioning::new(&suite.episodes[0].unlabeled_x),
        _ => Conditioning::empty(),
    };
    let mut lat_rng = seed_rng.substream(STREAM_INFER + 100);
    let mut lats = Vec::with_capacity(config.run.latency_reps);
    for _ in 0..config.run.latency_reps {
        let (_, lat) = infer_weights_cond(&params, &cond0, n0, &mut lat_rng)?;
        lats.push(lat);
    }
    metrics.put_timing("infer_latency_median_s", median(&mut lats));
    timings.push(PhaseTiming {
        phase: format!("seed{seed}/infer_eval"),
        seconds: t0.elapsed().as_secs_f64(),
    });

    // Diagnostics.
    let t0 = Instant::now();
    let mut diag_rng = seed_rng.substream(STREAM_DIAG);
    let diag = cos_sim_diagnostic(
        &params,
        &suite.trajectories,
        k,
        config.run.cos_sim_pairs,
        &mut diag_rng,
    )?;
    metrics.put("cos_sim_mean", diag.mean);
    std::fs::write(seed_dir.join("cosine_hist.csv"), cos_hist_to_csv(&diag))?;

    // Figure-style 2-D projection: offline trajectories plus one generated
    // rollout per task (ids offset by 10_000).
    let mut proj_inputs: Vec<(u64, Vec<ParameterVector>)> = suite
        .trajectories
        .iter()
        .map(|t| (t.task_id, t.states.clone()))
        .collect();
    let mut proj_rng = seed_rng.substream(STREAM_DIAG + 100);
    for (i, traj) in suite.trajectories.iter().enumerate() {
        let cond = match config.task.suite {
            TaskSuite::Blobs => Conditioning::new(&suite.episodes[i].unlabeled_x),
            _ => Conditioning::empty(),
        };
        let s0 = nn::gaussian_sample(&mut proj_rng, traj.dim())?;
        let online =
            sample_online_trajectory(&params, &s0, &cond, traj.t_len() / k, &mut proj_rng)?;
        proj_inputs.push((10_000 + traj.task_id, online.states));
    }
    let projection = project_trajectories_2d(&proj_inputs)?;
    std::fs::write(seed_dir.join("trajectories.csv"), projection_to_csv(&projection))?;
    timings.push(PhaseTiming {
        phase: format!("seed{seed}/diagnostics"),
        seconds: t0.elapsed().as_secs_f64(),
    });

    // Optional k sweep: step counts and sampling latency at each k with the
    // trained policy (horizon floor(T/k) per task 0).
    if !config.run.ksweep.is_empty() {
        let mut csv = String::from("k,mean_steps,median_latency_s\n");
        for &ks in &config.run.ksweep {
            if ks == 0 {
                return Err(Error::InvalidArgument("ksweep k must be >= 1".into()));
            }
            let mean_steps = suite
                .trajectories
                .iter()
                .map(|t| (t.t_len() / ks) as f64)
                .sum::<f64>()
                / suite.trajectories.len() as f64;
            let n = (suite.trajectories[0].t_len() / ks).max(1);
            let mut sweep_rng = seed_rng.substream(STREAM_INFER + 200 + ks as u64);
            let mut lats = Vec::with_capacity(config.run.latency_reps);
            for _ in 0..config.run.latency_reps {
                let (_, lat) = infer_weights_cond(&params, &cond0, n, &mut sweep_rng)?;
                lats.push(lat);
            }
            metrics.put(&format!("ksweep_steps_k{ks}"), mean_steps);
            metrics.put_timing(&format!("ksweep_latency_k{ks}"), median(&mut lats));
            csv.push_str(&format!("{ks},{mean_steps},{}\n", median(&mut lats)));
        }
        std::fs::write(seed_dir.join("ksweep.csv"), csv)?;
    }

    Ok(SeedArtifacts {
        metrics,
        theorem3_failures,
        theorem3_total,
        outcome,
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// One detailed verifier comparison, printable as a table row.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CheckRow {
    pub claim: String,
    pub instance: String,
    pub lhs: f64,
    pub rhs: f64,
    pub rel_error: f64,
    pub pass: bool,
}

/// The full deterministic verifier battery as detailed rows.
pub fn verify_battery_rows(rng_base: &Rng) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut rng = rng_base.substream(STREAM_VERIFY);

    // Contraction bound sweep.
    for case in 0..100u64 {
        let dim = 1 + rng.index(20);
        let cond = 1.0 + rng.uniform() * 99.0;
        let task = QuadraticTask::random(dim, 1.0, cond, case, &mut rng)?;
        let theta0 = nn::gaussian_sample(&mut rng, dim)?;
        let t = rng.index(201);
        let check = crate::optim::gd_bound_check(&task, &theta0, t)?;
        rows.push(CheckRow {
            claim: "gd_contraction_bound".into(),
            instance: format!("dim={dim} cond={cond:.1} T={t}"),
            lhs: check.lhs,
            rhs: check.rhs,
            rel_error: if check.rhs.abs() > 0.0 {
                (check.lhs / check.rhs).max(0.0)
            } else {
                0.0
            },
            pass: check.holds,
        });
    }

    // Flow identity on trained micro-environments plus a negative control.
    for (layers, width) in [(3usize, 2usize), (4, 3)] {
        let env = theorem::MicroEnv::random(layers, width, &mut rng)?;
        let trained = theorem::train_microenv(&env, 6000, 0.05)?;
        let residual = trained.max_abs_residual()?;
        rows.push(CheckRow {
            claim: "microenv_trained_residual".into(),
            instance: format!("L={layers} W={width}"),
            lhs: residual,
            rhs: 1e-6,
            rel_error: residual,
            pass: residual <= 1e-6,
        });
        for m in 0..layers - 1 {
            for n in m + 1..layers {
                for s in 0..width {
                    let v = theorem::verify_theorem1(&trained, m, n, s, 1e-3)?;
                    let worst = v
                        .checks
                        .iter()
                        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
                        .expect("at least one terminal");
                    rows.push(CheckRow {
                        claim: "flow_identity".into(),
                        instance: format!("L={layers} W={width} span=({m},{n}) src={s}"),
                        lhs: worst.lhs,
                        rhs: worst.rhs,
                        rel_error: v.worst_rel_error,
                        pass: v.pass,
                    });
                }
            }
        }
    }
    let control = theorem::MicroEnv::random(4, 3, &mut rng)?;
    let control_verdict = theorem::verify_theorem1(&control, 0, 3, 0, 1e-3)?;
    rows.push(CheckRow {
        claim: "flow_identity_negative_control".into(),
        instance: "untrained L=4 W=3 (expected to fail)".into(),
        lhs: control_verdict.checks[0].lhs,
        rhs: control_verdict.checks[0].rhs,
        rel_error: control_verdict.worst_rel_error,
        pass: !control_verdict.pass,
    });

    // Composition sweep.
    let env = theorem::MicroEnv::random(4, 3, &mut rng)?;
    let mut comp_ok = true;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst = (0.0, 0.0);
    for _ in 0..1000 {
        let path: Vec<usize> = (0..4).map(|_| rng.index(3)).collect();
        let mut boundaries = vec![0usize];
        for layer in 1..3 {
            if rng.chance(0.5) {
                boundaries.push(layer);
            }
        }
        boundaries.push(3);
        let check = theorem::verify_theorem2_composition(&env, &path, &boundaries)?;
        comp_ok &= check.holds;
        let gap = check.full_residual.abs() - check.sum_abs;
        if gap > worst_gap {
            worst_gap = gap;
            worst = (check.full_residual.abs(), check.sum_abs);
        }
    }
    rows.push(CheckRow {
        claim: "composition_triangle".into(),
        instance: "1000 random partitions".into(),
        lhs: worst.0,
        rhs: worst.1,
        rel_error: worst_gap.max(0.0),
        pass: comp_ok,
    });
    Ok(rows)
}

/// Verifier battery aggregated into report verdicts. `t3` carries
/// (failures, total) of the per-task end-to-end bound checks done during
/// eval, when the suite admits them.
pub fn verify_battery(rng_base: &Rng, t3: (usize, usize)) -> Result<Vec<Verdict>> {
    let rows = verify_battery_rows(rng_base)?;
    let mut verdicts = Vec::new();
    let mut claims: Vec<String> = Vec::new();
    for r in &rows {
        if !claims.contains(&r.claim) {
            claims.push(r.claim.clone());
        }
    }
    for claim in claims {
        let group: Vec<&CheckRow> = rows.iter().filter(|r| r.claim == claim).collect();
        let failures = group.iter().filter(|r| !r.pass).count();
        verdicts.push(Verdict {
            name: claim,
            pass: failures == 0,
            detail: format!("{failures} failures / {} checks", group.len()),
        });
    }
    let (fails, total) = t3;
    if total > 0 {
        verdicts.push(Verdict {
            name: "error_bound_inference".into(),
            pass: fails == 0,
            detail: format!("{fails} violations / {total} tasks (measured c)"),
        });
    }
    Ok(verdicts)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct InferResultFile {
    task_id: u64,
    n_steps: usize,
    latency_seconds: f64,
    values: Vec<f64>,
}

/// Writes generated weights as JSON (one record per task).
pub fn write_infer_results(path: &Path, results: &[InferResult]) -> Result<()> {
    let dto: Vec<InferResultFile> = results
        .iter()
        .map(|r| InferResultFile {
            task_id: r.task_id,
            n_steps: r.n_steps,
            latency_seconds: r.latency_seconds,
            values: r.theta.values().to_vec(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&dto).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_infer_results(path: &Path) -> Result<Vec<InferResult>> {
    let text = std::fs::read_to_string(path)?;
    let dto: Vec<InferResultFile> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: 0,
        message: e.to_string(),
    })?;
    dto.into_iter()
        .map(|d| {
            Ok(InferResult {
                task_id: d.task_id,
                theta: ParameterVector::new(d.values)?,
                n_steps: d.n_steps,
                latency_seconds: d.latency_seconds,
            })
        })
        .collect()
}

/// Everything a pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: RunReport,
    pub out_dir: PathBuf,
}

/// Runs the full pipeline across the configured seeds, writes artifacts and
/// `report.json` under the output dir, and returns the aggregated report.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let out_dir = PathBuf::from(&config.run.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut timings = Vec::new();
    let mut per_seed: Vec<SeedArtifacts> = Vec::new();
    for &seed in &config.run.seeds {
        match run_seed(config, seed, &out_dir, &mut timings) {
            Ok(a) => per_seed.push(a),
            Err(e) => {
                // Preserve whatever completed before the failing phase.
                let partial = aggregate_report(config, &per_seed, timings.clone(), Vec::new());
                if let Ok(json) = partial.to_json() {
                    let _ = std::fs::write(out_dir.join("report.json"), json);
                }
                return Err(e);
            }
        }
    }

    let verdicts = if config.run.verify {
        let t0 = Instant::now();
        let t3_failures = per_seed.iter().map(|a| a.theorem3_failures).sum();
        let t3_total = per_seed.iter().map(|a| a.theorem3_total).sum();
        let triangle_violations: usize =
            per_seed.iter().map(|a| a.outcome.triangle_violations).sum();
        let triangle_checks: usize = per_seed.iter().map(|a| a.outcome.triangle_checks).sum();
        let mut v = verify_battery(&Rng::new(config.run.seeds[0]), (t3_failures, t3_total))?;
        if triangle_checks > 0 {
            v.push(Verdict {
                name: "training_triangle_composition".into(),
                pass: triangle_violations == 0,
                detail: format!("{triangle_violations} violations / {triangle_checks} checks"),
            });
        }
        timings.push(PhaseTiming {
            phase: "verify".into(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        v
    } else {
        Vec::new()
    };

    let report = aggregate_report(config, &per_seed, timings, verdicts);
    std::fs::write(out_dir.join("report.json"), report.to_json()?)?;
    // Promote the first seed's diagnostics to the root for plotting.
    let first = out_dir.join(format!("seed_{}", config.run.seeds[0]));
    for name in ["trajectories.csv", "cosine_hist.csv", "ksweep.csv"] {
        let src = first.join(name);
        if src.exists() {
            std::fs::copy(&src, out_dir.join(name))?;
        }
    }
    Ok(PipelineOutput { report, out_dir })
}

fn aggregate_report(
    config: &ExperimentConfig,
    per_seed: &[SeedArtifacts],
    timings: Vec<PhaseTiming>,
    verdicts: Vec<Verdict>,
) -> RunReport {
    // Collect the union of metric names in first-seen order.
    let mut names: Vec<String> = Vec::new();
    for a in per_seed {
        for (n, _) in &a.metrics.values {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
    }
    let metrics = names
        .iter()
        .map(|name| {
            let vals: Vec<f64> = per_seed
                .iter()
                .flat_map(|a| {
                    a.metrics
                        .values
                        .iter()
                        .filter(|(n, _)| n == name)
                        .map(|(_, v)| *v)
                })
                .collect();
            Metric::aggregate(name, &vals)
        })
        .collect();
    let mut timing_names: Vec<String> = Vec::new();
    for a in per_seed {
        for (n, _) in &a.metrics.timings {
            if !timing_names.contains(n) {
                timing_names.push(n.clone());
            }
        }
    }
    let timing_metrics = timing_names
        .iter()
        .map(|name| {
            let vals: Vec<f64> = per_seed
                .iter()
                .flat_map(|a| {
                    a.metrics
                        .timings
                        .iter()
                        .filter(|(n, _)| n == name)
                        .map(|(_, v)| *v)
                })
                .collect();
            Metric::aggregate(name, &vals)
        })
        .collect();
    RunReport {
        config: config.clone(),
        seeds: config.run.seeds.clone(),
        metrics,
        timing_metrics,
        phase_timings: timings,
        verdicts,
    }
}
