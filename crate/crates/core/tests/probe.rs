//! Scratch diagnostics for policy-training dynamics (ignored by default).

use lohp_core::nn;
use lohp_core::pipeline::config::ExperimentConfig;
use lohp_core::pipeline::run::{draw_store_samples, prepare_suite, train_seeded};
use lohp_core::policy::{policy_eval, sample_online_trajectory, Conditioning, PolicyHead};
use lohp_core::rng::Rng;

fn base_config(out: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        r#"
[task]
suite = "blobs"
n_tasks = 12
n_classes = 3
dim_x = 2
samples_per_class = 20
conditioning_samples = 16
mean_scale = 4.0

[net]
widths = [2, 16, 3]

[prepare]
learning_rate = 0.05
adam_fraction = 0.0
sam = false
max_epochs = 32
patience = 32
samples_per_trajectory = 32
full_span_prob = 0.1

[policy_net]
encoder_hidden = [16]
embed_dim = 8
trunk_hidden = [64]
init_weight_scale = 0.3
init_sigma_bias = -1.0

[train]
alpha = 0.001
steps = 2000
k = 2
batch_size = 8
mode = "lo_hp"

[run]
seeds = [1]
out_dir = "{out}"
latency_reps = 5
cos_sim_pairs = 100
verify = false
"#
    ))
    .unwrap()
}

#[test]
#[ignore]
fn probe_noise_tolerance_of_reference_weights() {
    for (scale, lr, epochs) in [
        (4.0, 1.0, 32usize),
        (4.0, 2.0, 32),
        (4.0, 4.0, 32),
        (6.0, 2.0, 32),
        (6.0, 4.0, 32),
    ] {
        let mut config = base_config("/tmp/probe_nt");
        config.task.mean_scale = scale;
        config.task.n_tasks = 20;
        config.prepare.learning_rate = lr;
        config.prepare.max_epochs = epochs;
        config.prepare.patience = epochs;
        let suite = prepare_suite(&config, 1).unwrap();
        let net = suite.net.as_ref().unwrap();
        let mut rng = Rng::new(5);
        let mut line;
        let mut ref_acc = 0.0;
        for (i, traj) in suite.trajectories.iter().enumerate() {
            ref_acc += lohp_core::tasks::classification_accuracy(
                net,
                traj.last(),
                &suite.episodes[i].eval_x,
                &suite.episodes[i].eval_y,
            )
            .unwrap();
        }
        ref_acc /= suite.trajectories.len() as f64;
        let mut norm2 = 0.0;
        let mut travel = 0.0;
        for traj in &suite.trajectories {
            norm2 += lohp_core::linalg::dot(traj.last().values(), traj.last().values());
            travel += traj.initial().squared_distance(traj.last()).unwrap();
        }
        norm2 /= suite.trajectories.len() as f64;
        travel /= suite.trajectories.len() as f64;
        line = format!("scale {scale} lr {lr}: ref {ref_acc:.3} |θT|²={norm2:.0} |θT−θ0|²={travel:.0} |");
        for d2 in [50.0, 100.0, 150.0, 250.0_f64] {
            let mut acc = 0.0;
            for (i, traj) in suite.trajectories.iter().enumerate() {
                for _ in 0..3 {
                    let mut noisy = traj.last().clone();
                    let z = rng.normal_vec(noisy.dim());
                    let zn = lohp_core::linalg::norm(&z);
                    for (w, zi) in noisy.values_mut().iter_mut().zip(&z) {
                        *w += zi / zn * d2.sqrt();
                    }
                    acc += lohp_core::tasks::classification_accuracy(
                        net,
                        &noisy,
                        &suite.episodes[i].eval_x,
                        &suite.episodes[i].eval_y,
                    )
                    .unwrap();
                }
            }
            acc /= 3.0 * suite.trajectories.len() as f64;
            line.push_str(&format!(" d2={d2}: {acc:.3}"));
        }
        println!("{line}");
    }
}

#[test]
#[ignore]
fn probe_blob_training_dynamics() {
    let mut config = base_config("/tmp/probe");
    config.task.n_tasks = 40;
    config.policy_net.sigma_floor = 0.05;
    config.policy_net.trunk_hidden = vec![128];
    config.prepare.full_span_prob = 0.2;
    config.prepare.learning_rate = 4.0;
    config.train.steps = 4000;
    for (label, est, alpha, decay, batch, fs, sb) in [
        ("grp rp a.003 b16", "rp", 0.003, 0.03, 16usize, 0.2, -1.0),
        ("grp rp a.01 b16", "rp", 0.01, 0.01, 16, 0.2, -1.0),
        ("grp pw a.01 b16", "pw", 0.01, 0.01, 16, 0.2, -1.0),
        ("grp det a.003 b16", "det", 0.003, 0.03, 16, 0.2, -1.0),
    ] {
        config.train.estimator = match est {
            "rp" => lohp_core::hybrid::GradEstimator::RewardPathwise,
            "det" => lohp_core::hybrid::GradEstimator::Detached,
            _ => lohp_core::hybrid::GradEstimator::Pathwise,
        };
        config.train.alpha = alpha;
        config.train.alpha_decay = decay;
        config.train.batch_size = batch;
        config.prepare.full_span_prob = fs;
        config.policy_net.init_sigma_bias = sb;
        run_probe(label, &config);
    }
}

fn run_probe(label: &str, config: &ExperimentConfig) {
    let seed = 1u64;
    let suite = prepare_suite(config, seed).unwrap();
    let samples = draw_store_samples(config, &suite, seed).unwrap();
    let (params, outcome) = train_seeded(config, &samples, Some(&suite), seed).unwrap();

    let w = 100.min(outcome.loss_curve.len());
    let head: f64 = outcome.loss_curve[..w].iter().sum::<f64>() / w as f64;
    let tail: f64 =
        outcome.loss_curve[outcome.loss_curve.len() - w..].iter().sum::<f64>() / w as f64;

    // Roll the trained policy on each task; measure endpoint distance and σ.
    let mut rng = Rng::new(99);
    let k = config.train.k;
    let net = suite.net.as_ref().unwrap();
    let mut d0 = 0.0;
    let mut dn = 0.0;
    let mut sigma0 = 0.0;
    let mut sigman = 0.0;
    let mut acc = 0.0;
    let mut racc = 0.0;
    for (i, traj) in suite.trajectories.iter().enumerate() {
        let n = traj.t_len() / k;
        let cond = Conditioning::new(&suite.episodes[i].unlabeled_x);
        let s0 = nn::gaussian_sample(&mut rng, traj.dim()).unwrap();
        let online = sample_online_trajectory(&params, &s0, &cond, n, &mut rng).unwrap();
        let theta_t = traj.last();
        d0 += s0.squared_distance(theta_t).unwrap();
        dn += online.final_state().squared_distance(theta_t).unwrap();
        let out0 = policy_eval(&params, &s0, &cond.at_time(0, n), PolicyHead::Forward).unwrap();
        let outn = policy_eval(
            &params,
            online.final_state(),
            &cond.at_time(n - 1, n),
            PolicyHead::Forward,
        )
        .unwrap();
        sigma0 += out0.sigma.iter().sum::<f64>() / out0.sigma.len() as f64;
        sigman += outn.sigma.iter().sum::<f64>() / outn.sigma.len() as f64;
        acc += lohp_core::tasks::classification_accuracy(
            net,
            online.final_state(),
            &suite.episodes[i].eval_x,
            &suite.episodes[i].eval_y,
        )
        .unwrap();
        racc += lohp_core::tasks::classification_accuracy(
            net,
            theta_t,
            &suite.episodes[i].eval_x,
            &suite.episodes[i].eval_y,
        )
        .unwrap();
    }
    let nt = suite.trajectories.len() as f64;
    // Does the final state vary with the task in the direction of its target?
    let mut finals = Vec::new();
    let mut targets = Vec::new();
    let mut rng2 = Rng::new(123);
    for (i, traj) in suite.trajectories.iter().enumerate() {
        let n = traj.t_len() / k;
        let cond = Conditioning::new(&suite.episodes[i].unlabeled_x);
        let s0 = nn::gaussian_sample(&mut rng2, traj.dim()).unwrap();
        let online = sample_online_trajectory(&params, &s0, &cond, n, &mut rng2).unwrap();
        finals.push(online.final_state().values().to_vec());
        targets.push(traj.last().values().to_vec());
    }
    let dim = finals[0].len();
    let mean_of = |rows: &Vec<Vec<f64>>| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for r in rows {
            for (mi, v) in m.iter_mut().zip(r) {
                *mi += v / rows.len() as f64;
            }
        }
        m
    };
    let fm = mean_of(&finals);
    let tm = mean_of(&targets);
    let mut cond_cos = 0.0;
    for (f, t) in finals.iter().zip(&targets) {
        let df: Vec<f64> = f.iter().zip(&fm).map(|(a, b)| a - b).collect();
        let dt: Vec<f64> = t.iter().zip(&tm).map(|(a, b)| a - b).collect();
        cond_cos += lohp_core::linalg::cosine_similarity(&df, &dt).unwrap_or(0.0);
    }
    cond_cos /= finals.len() as f64;
    println!("    cond-use cos {cond_cos:.3}");
    println!(
        "{label:>10}: loss {head:8.2} -> {tail:8.2} | d(s0,θT) {:6.1} d(sN,θT) {:6.1} | σ0 {:.4} σN {:.4} | acc {:.3} ref {:.3}",
        d0 / nt,
        dn / nt,
        sigma0 / nt,
        sigman / nt,
        acc / nt,
        racc / nt,
    );
}

#[test]
#[ignore]
fn probe_step_cost_breakdown() {
    use std::time::Instant;
    let mut config = base_config("/tmp/probe_cost");
    config.task.n_tasks = 8;
    config.policy_net.trunk_hidden = vec![128];
    config.policy_net.sigma_floor = 0.05;
    let suite = prepare_suite(&config, 1).unwrap();
    let samples = draw_store_samples(&config, &suite, 1).unwrap();

    // Raw dot throughput.
    let a: Vec<f64> = (0..128).map(|i| i as f64 * 0.01).collect();
    let b: Vec<f64> = (0..128).map(|i| (i as f64 * 0.02).sin()).collect();
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..2_000_000 {
        acc += lohp_core::linalg::dot(&a, &b);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("dot128 x2e6: {:.3}s = {:.2} Gmult/s (acc {acc:.1})", dt, 2.0 * 128.0 / dt / 1e3);

    // Train-step cost at the A6 shape.
    config.train.steps = 50;
    config.train.batch_size = 8;
    let t0 = Instant::now();
    let _ = train_seeded(&config, &samples, Some(&suite), 1).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("50 train steps: {:.3}s -> {:.1}s per 4000 steps", dt, dt * 80.0);

    // Rollout-only cost.
    let spec = config
        .policy_net_config()
        .build_spec(99, 2)
        .unwrap();
    let params = lohp_core::policy::PolicyParams::init(spec, 0.3, -1.0, &mut Rng::new(5)).unwrap();
    let cond = Conditioning::new(&suite.episodes[0].unlabeled_x);
    let mut rng = Rng::new(6);
    let s0 = nn::gaussian_sample(&mut rng, 99).unwrap();
    let t0 = Instant::now();
    for _ in 0..400 {
        let _ = sample_online_trajectory(&params, &s0, &cond, 16, &mut rng).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("400 rollouts(16): {:.3}s = {:.0} us/anchor-eval", dt, dt * 1e6 / (400.0 * 17.0));
}

#[test]
#[ignore]
fn probe_conditional_mean_weights() {
    use lohp_core::optim::{prepare_trajectory, ClassificationTask, PolicyKind};
    for (label, kind, lr) in [
        ("sgd4", PolicyKind::Sgd, 4.0),
        ("sgd2", PolicyKind::Sgd, 2.0),
        ("adam.1", PolicyKind::Adam, 0.1),
        ("adam.05", PolicyKind::Adam, 0.05),
        ("adam.2", PolicyKind::Adam, 0.2),
    ] {
        let mut config = base_config("/tmp/probe_cm");
        config.task.n_tasks = 12;
        config.task.mean_scale = 4.0;
        let suite = prepare_suite(&config, 1).unwrap();
        let net = suite.net.as_ref().unwrap();
        let mut opt = config.optimizer_config(kind);
        opt.learning_rate = lr;
        opt.max_epochs = 32;
        opt.early_stop_patience = 32;
        let mut ref_acc = 0.0;
        let mut mean_acc = 0.0;
        let mut travel = 0.0;
        let mut div = 0;
        let root = Rng::new(55);
        for (i, ep) in suite.episodes.iter().enumerate() {
            let task = ClassificationTask {
                episode: ep.clone(),
                net: net.clone(),
                batch_size: None,
            };
            let mut finals = Vec::new();
            for init in 0..4u64 {
                match prepare_trajectory(&task, &opt, &mut root.substream(i as u64 * 10 + init)) {
                    Ok(t) => {
                        travel += t.initial().squared_distance(t.last()).unwrap() / 48.0;
                        finals.push(t.last().clone());
                    }
                    Err(_) => div += 1,
                }
            }
            if finals.is_empty() {
                continue;
            }
            ref_acc += lohp_core::tasks::classification_accuracy(
                net,
                &finals[0],
                &ep.eval_x,
                &ep.eval_y,
            )
            .unwrap()
                / 12.0;
            let mut mean = vec![0.0; finals[0].dim()];
            for f in &finals {
                for (m, v) in mean.iter_mut().zip(f.values()) {
                    *m += v / finals.len() as f64;
                }
            }
            let mean_theta = lohp_core::nn::ParameterVector::new(mean).unwrap();
            mean_acc += lohp_core::tasks::classification_accuracy(
                net,
                &mean_theta,
                &ep.eval_x,
                &ep.eval_y,
            )
            .unwrap()
                / 12.0;
        }
        println!(
            "{label:>8}: ref {ref_acc:.3} mean-weights {mean_acc:.3} travel2 {travel:.0} diverged {div}"
        );
    }
}

#[test]
#[ignore]
fn probe_hypernet_ceiling() {
    use lohp_core::hybrid::TrainMode;
    let mut config = base_config("/tmp/probe_hn");
    config.task.n_tasks = 40;
    config.prepare.learning_rate = 4.0;
    config.policy_net.trunk_hidden = vec![128];
    config.policy_net.sigma_floor = 0.05;
    for (label, steps, alpha, decay) in [
        ("hn 2k a.01", 2000usize, 0.01, 0.01),
        ("hn 4k a.003", 4000, 0.003, 0.03),
    ] {
        config.train.mode = TrainMode::Hypernet;
        config.train.steps = steps;
        config.train.alpha = alpha;
        config.train.alpha_decay = decay;
        config.train.batch_size = 8;
        let suite = prepare_suite(&config, 1).unwrap();
        let samples = draw_store_samples(&config, &suite, 1).unwrap();
        let (params, outcome) = train_seeded(&config, &samples, Some(&suite), 1).unwrap();
        let net = suite.net.as_ref().unwrap();
        let mut acc = 0.0;
        let mut racc = 0.0;
        let mut d = 0.0;
        for (i, traj) in suite.trajectories.iter().enumerate() {
            let cond = Conditioning::new(&suite.episodes[i].unlabeled_x);
            let theta = lohp_core::hybrid::predict_oneshot(&params, &cond).unwrap();
            acc += lohp_core::tasks::classification_accuracy(
                net,
                &theta,
                &suite.episodes[i].eval_x,
                &suite.episodes[i].eval_y,
            )
            .unwrap();
            racc += lohp_core::tasks::classification_accuracy(
                net,
                traj.last(),
                &suite.episodes[i].eval_x,
                &suite.episodes[i].eval_y,
            )
            .unwrap();
            d += theta.squared_distance(traj.last()).unwrap();
        }
        let nt = suite.trajectories.len() as f64;
        let tail = outcome.loss_curve[outcome.loss_curve.len() - 50..]
            .iter()
            .sum::<f64>()
            / 50.0;
        println!(
            "{label}: acc {:.3} ref {:.3} d {:.0} train-loss-tail {tail:.3}",
            acc / nt,
            racc / nt,
            d / nt
        );
    }
}
