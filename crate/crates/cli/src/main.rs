//! Command-line surface for the decoupled weight-generation pipeline.
//!
//! Subcommands mirror the pipeline phases; everything is driven by a strict
//! TOML config plus a seed. Exit codes: 0 ok, 1 usage, 2 phase failure,
//! 3 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use lohp_core::hybrid::TrainMode;
use lohp_core::pipeline::config::TaskSuite;
use lohp_core::pipeline::diagnostics::{
    cos_hist_to_csv, cos_sim_diagnostic, project_trajectories_2d, projection_to_csv,
};
use lohp_core::pipeline::run::{
    self, draw_store_samples, eval_generated_weights, infer_suite, prepare_suite, run_pipeline,
    train_seeded,
};
use lohp_core::pipeline::ExperimentConfig;
use lohp_core::policy::{load_policy, save_policy};
use lohp_core::rng::Rng;
use lohp_core::store::{read_store, write_episodes, write_store};

#[derive(Parser)]
#[command(
    name = "lohp",
    about = "Offline-trajectory weight generation: prepare, train, infer, eval, diagnose, verify"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    #[value(name = "lo_hp")]
    LoHp,
    #[value(name = "lo_op")]
    LoOp,
    #[value(name = "hypernet")]
    Hypernet,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::LoHp => TrainMode::LoHp,
            ModeArg::LoOp => TrainMode::LoOp,
            ModeArg::Hypernet => TrainMode::Hypernet,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Record offline trajectories and write the sub-trajectory store.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        /// Output store file.
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the generative model from a store.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Input store file.
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<ModeArg>,
    },
    /// Generate weights for every task with a trained model.
    Infer {
        #[arg(long)]
        config: PathBuf,
        /// Trained model checkpoint.
        #[arg(long)]
        phi: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<ModeArg>,
    },
    /// Score generated weights against the offline reference.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// weights.json produced by `infer`.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cosine-similarity histogram and 2-D trajectory projection.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        phi: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Brute-force verifier battery; prints one row per check.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full prepare → train → infer → eval → diagnose → verify run.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<ModeArg>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Phase(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

enum CliError {
    Usage(String),
    Phase(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Phase(e)
    }
}

impl From<lohp_core::Error> for CliError {
    fn from(e: lohp_core::Error) -> Self {
        CliError::Phase(anyhow::Error::new(e))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Phase(anyhow::Error::new(e))
    }
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    mode: Option<ModeArg>,
) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        config.run.seeds = vec![s];
    }
    if let Some(o) = out {
        config.run.out_dir = o.display().to_string();
    }
    if let Some(m) = mode {
        config.train.mode = m.into();
    }
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

fn first_seed(config: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(config.run.seeds[0])
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.cmd {
        Cmd::Prepare {
            config,
            store,
            seed,
        } => {
            let config = load_config(&config, seed, None, None)?;
            let seed = first_seed(&config, seed);
            let suite = prepare_suite(&config, seed)?;
            let samples = draw_store_samples(&config, &suite, seed)?;
            let count = write_store(&store, &samples)?;
            if !suite.episodes.is_empty() {
                let episodes_path = store.with_extension("episodes.bin");
                write_episodes(&episodes_path, &suite.episodes)?;
                println!("episodes: {}", episodes_path.display());
            }
            let mean_t = suite
                .trajectories
                .iter()
                .map(|t| t.t_len() as f64)
                .sum::<f64>()
                / suite.trajectories.len() as f64;
            println!(
                "prepared {} trajectories (mean T {:.1}), wrote {count} samples to {}",
                suite.trajectories.len(),
                mean_t,
                store.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train {
            config,
            store,
            out,
            seed,
            mode,
        } => {
            let config = load_config(&config, seed, None, mode)?;
            let seed = first_seed(&config, seed);
            let samples = read_store(&store)?;
            let suite = if config.train.mode == TrainMode::Hypernet {
                Some(prepare_suite(&config, seed)?)
            } else {
                None
            };
            let (params, outcome) = train_seeded(&config, &samples, suite.as_ref(), seed)?;
            std::fs::create_dir_all(&out)?;
            save_policy(&out.join("policy.phi"), &params)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in outcome.loss_curve.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            std::fs::write(out.join("loss_curve.csv"), csv)?;
            if let Some(step) = outcome.diverged_at {
                return Err(CliError::Phase(anyhow::anyhow!(
                    "training diverged at step {step}; last finite checkpoint written to {}",
                    out.join("policy.phi").display()
                )));
            }
            let last = outcome.loss_curve.last().copied().unwrap_or(0.0);
            println!(
                "trained {} steps on {} samples, final batch loss {last:.6}; checkpoint {}",
                outcome.loss_curve.len(),
                samples.len(),
                out.join("policy.phi").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Infer {
            config,
            phi,
            out,
            seed,
            mode,
        } => {
            let config = load_config(&config, seed, None, mode)?;
            let seed = first_seed(&config, seed);
            let suite = prepare_suite(&config, seed)?;
            let params = load_policy(&phi)?;
            let results = infer_suite(&config, &suite, &params, seed)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("weights.json");
            run::write_infer_results(&path, &results)?;
            let mut lats: Vec<f64> = results.iter().map(|r| r.latency_seconds).collect();
            lats.sort_by(|a, b| a.total_cmp(b));
            println!(
                "generated weights for {} tasks (median latency {:.3} ms) -> {}",
                results.len(),
                1e3 * lats[lats.len() / 2],
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            config,
            weights,
            out,
            seed,
        } => {
            let config = load_config(&config, seed, None, None)?;
            let seed = first_seed(&config, seed);
            let suite = prepare_suite(&config, seed)?;
            let results = run::read_infer_results(&weights)?;
            let mut rows = Vec::new();
            for r in &results {
                let idx = suite
                    .trajectories
                    .iter()
                    .position(|t| t.task_id == r.task_id)
                    .ok_or_else(|| {
                        CliError::Usage(format!("unknown task id {} in weights", r.task_id))
                    })?;
                let (gen, reference, metric) = match config.task.suite {
                    TaskSuite::Blobs => {
                        let ep = &suite.episodes[idx];
                        let net = suite.net.as_ref().expect("blob suite has a net");
                        (
                            eval_generated_weights(&r.theta, ep, net)?,
                            eval_generated_weights(suite.trajectories[idx].last(), ep, net)?,
                            "accuracy",
                        )
                    }
                    TaskSuite::Quadratic => {
                        let task = &suite.quadratics[idx];
                        (
                            task.loss(&r.theta)?,
                            task.loss(suite.trajectories[idx].last())?,
                            "loss",
                        )
                    }
                    TaskSuite::Landscape2d => {
                        let v = r.theta.values();
                        let lv = suite.trajectories[idx].last().values();
                        let shape = lohp_core::tasks::Landscape2D::TwoBasin { a: 1.0, b: 0.5 };
                        (
                            shape.loss_grad([v[0], v[1]]).0,
                            shape.loss_grad([lv[0], lv[1]]).0,
                            "loss",
                        )
                    }
                };
                println!(
                    "task {:>3}: generated {metric} {gen:.4}, reference {reference:.4}",
                    r.task_id
                );
                rows.push(serde_json::json!({
                    "task_id": r.task_id,
                    "metric": metric,
                    "generated": gen,
                    "reference": reference,
                }));
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("eval.json"),
                serde_json::to_string_pretty(&rows).context("serialize eval table")?,
            )?;
            println!("wrote {}", out.join("eval.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Diagnose {
            config,
            phi,
            out,
            seed,
        } => {
            let config = load_config(&config, seed, None, None)?;
            let seed = first_seed(&config, seed);
            let suite = prepare_suite(&config, seed)?;
            let params = load_policy(&phi)?;
            let mut rng = Rng::new(seed).substream(600);
            let diag = cos_sim_diagnostic(
                &params,
                &suite.trajectories,
                config.train.k,
                config.run.cos_sim_pairs,
                &mut rng,
            )?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("cosine_hist.csv"), cos_hist_to_csv(&diag))?;
            let inputs: Vec<(u64, Vec<lohp_core::ParameterVector>)> = suite
                .trajectories
                .iter()
                .map(|t| (t.task_id, t.states.clone()))
                .collect();
            let projection = project_trajectories_2d(&inputs)?;
            std::fs::write(out.join("trajectories.csv"), projection_to_csv(&projection))?;
            println!(
                "cos-sim mean {:.4} over {} pairs ({} zero-displacement flags); CSVs in {}",
                diag.mean,
                diag.n_pairs,
                diag.zero_displacement_flags,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify { seed, out } => {
            let rows = run::verify_battery_rows(&Rng::new(seed.unwrap_or(1)))?;
            println!(
                "{:<34} {:<34} {:>12} {:>12} {:>10}  {}",
                "claim", "instance", "lhs", "rhs", "rel_error", "verdict"
            );
            let mut failures = 0usize;
            for r in &rows {
                if !r.pass {
                    failures += 1;
                }
                println!(
                    "{:<34} {:<34} {:>12.4e} {:>12.4e} {:>10.2e}  {}",
                    r.claim,
                    r.instance,
                    r.lhs,
                    r.rhs,
                    r.rel_error,
                    if r.pass { "PASS" } else { "FAIL" }
                );
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(
                    dir.join("verify.json"),
                    serde_json::to_string_pretty(&rows).context("serialize verify rows")?,
                )?;
            }
            println!("{} checks, {failures} failures", rows.len());
            if failures > 0 {
                Ok(ExitCode::from(3))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Cmd::Pipeline {
            config,
            out,
            seed,
            mode,
        } => {
            let config = load_config(&config, seed, out.as_deref(), mode)?;
            let output = run_pipeline(&config)?;
            let report = &output.report;
            for m in &report.metrics {
                println!(
                    "{:<28} {:>12.6} ± {:.6}  (n={})",
                    m.name, m.value, m.std, m.n_seeds
                );
            }
            for m in &report.timing_metrics {
                println!("{:<28} {:>12.6} ± {:.6}  (timing)", m.name, m.value, m.std);
            }
            for v in &report.verdicts {
                println!(
                    "verify {:<32} {}  ({})",
                    v.name,
                    if v.pass { "PASS" } else { "FAIL" },
                    v.detail
                );
            }
            println!("report: {}", output.out_dir.join("report.json").display());
            if report.all_verdicts_pass() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}
