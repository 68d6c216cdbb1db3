//! Calibration probe for the desk-scale covariate-shift reproduction: trains
//! BC and each fine-tuning variant across seeds and prints the metric table.

use catk_core::metrics::{evaluate_categorical, rollout_seed, EvalConfig};
use catk_core::policy::{feature_dim, PolicyModel};
use catk_core::rollout::{rollout_deterministic, rollout_sample, SamplerConfig};
use catk_core::scenario::{generate_fork_world, split_holdout, Scenario, HISTORY_STEPS};
use catk_core::training::{finetune_closed_loop, pretrain_bc, Strategy, TrainConfig};
use catk_core::vocabulary::{build_vocabulary, TokenVocabulary};
use catk_core::world::{in_drivable, AgentState};
use std::time::Instant;

/// Where and how rollouts leave the road, plus branch agreement with GT.
fn diagnose(
    model: &PolicyModel,
    holdout: &[Scenario],
    vocab: &TokenVocabulary,
    k_infer: usize,
    seed: u64,
) {
    let mut det_off = 0usize;
    let mut det_total = 0usize;
    let mut first_off_hist = vec![0usize; 17];
    let mut samp_off = 0usize;
    let mut samp_total = 0usize;
    let mut wrong_branch = 0usize;
    let mut branch_total = 0usize;
    for scenario in holdout.iter().take(60) {
        let det = rollout_deterministic(model, scenario, vocab, 0.5);
        for states in &det.states {
            det_total += 1;
            if states.iter().any(|s| !in_drivable(&scenario.map, s.x, s.y)) {
                det_off += 1;
            }
        }
        for r in 0..4u64 {
            let rec = rollout_sample(
                model,
                scenario,
                vocab,
                k_infer,
                1.0,
                rollout_seed(seed, &scenario.id, r as usize),
                0.5,
            );
            for (i, states) in rec.states.iter().enumerate() {
                samp_total += 1;
                if let Some(first) =
                    states.iter().position(|s| !in_drivable(&scenario.map, s.x, s.y))
                {
                    samp_off += 1;
                    first_off_hist[first.min(16)] += 1;
                }
                // Branch agreement: compare endpoint arm with GT endpoint arm.
                let arm = |s: &AgentState| -> u8 {
                    if s.x.abs() < 5.0 && s.y.abs() < 5.0 {
                        4
                    } else if s.y > s.x.abs() {
                        0
                    } else if -s.y > s.x.abs() {
                        2
                    } else if s.x > 0.0 {
                        1
                    } else {
                        3
                    }
                };
                let gt_end = scenario.agents[i].state(scenario.horizon());
                let got = arm(states.last().unwrap());
                let want = arm(&gt_end);
                if want != 4 && got != 4 && got != 3 {
                    branch_total += 1;
                    if got != want {
                        wrong_branch += 1;
                    }
                }
            }
        }
    }
    println!(
        "   diag: det_offroad {:.4} | samp_offroad {:.4} | wrong_branch {:.3} | first_off_step {:?}",
        det_off as f64 / det_total as f64,
        samp_off as f64 / samp_total as f64,
        wrong_branch as f64 / branch_total.max(1) as f64,
        first_off_hist
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };
    let n_scen = get("--n", 3300.0) as usize;
    let holdout_n = get("--holdout", 300.0) as usize;
    let vocab_size = get("--vocab", 64.0) as usize;
    let noise = get("--noise", 0.15);
    let bc_epochs = get("--bc-epochs", 15.0) as usize;
    let ft_epochs = get("--ft-epochs", 10.0) as usize;
    let bc_lr = get("--bc-lr", 3e-3);
    let ft_lr = get("--ft-lr", 1e-3);
    let k = get("--k", 16.0) as usize;
    let k_infer = get("--k-infer", 16.0) as usize;
    let baseline_k = get("--baseline-k", 5.0) as usize;
    let rollouts = get("--rollouts", 16.0) as usize;
    let hidden = get("--hidden", 64.0) as usize;
    let n_seeds = get("--seeds", 3.0) as usize;
    let strategies = args
        .iter()
        .position(|a| a == "--strategies")
        .and_then(|i| args.get(i + 1))
        .cloned()
        .unwrap_or_else(|| "catk".to_string());

    println!("n={n_scen} holdout={holdout_n} vocab={vocab_size} noise={noise} bc={bc_epochs}@{bc_lr} ft={ft_epochs}@{ft_lr} K={k} K_infer={k_infer} R={rollouts} hidden={hidden}");

    let t0 = Instant::now();
    let scenarios = generate_fork_world(n_scen, 2, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], noise, 0)
        .unwrap();
    let (train, holdout) = split_holdout(scenarios, holdout_n);
    let trajs: Vec<Vec<AgentState>> = train
        .iter()
        .flat_map(|s| (0..s.n_agents()).map(|i| s.agents[i].states()))
        .collect();
    let vocab = build_vocabulary(&trajs, vocab_size, 0.5, 0).unwrap();
    println!("setup: {:?} (train {} / holdout {})", t0.elapsed(), train.len(), holdout.len());

    for seed in 0..n_seeds as u64 {
        let t = Instant::now();
        let model = PolicyModel::new_categorical(
            feature_dim(HISTORY_STEPS),
            hidden,
            vocab.len(),
            1000 + seed,
        );
        let bc_cfg = TrainConfig {
            epochs: bc_epochs,
            batch_scenarios: 4,
            learning_rate: bc_lr,
            strategy: Strategy::Bc,
            seed,
            ..TrainConfig::default()
        };
        let bc = pretrain_bc(&model, &train, &vocab, &bc_cfg, None).unwrap();
        let eval_cfg = EvalConfig {
            n_rollouts: rollouts,
            k_infer,
            tau: 1.0,
            seed: 9000 + seed,
            ..EvalConfig::default()
        };
        let bc_report = evaluate_categorical(&bc.model, &holdout, &vocab, &eval_cfg);
        println!(
            "seed {seed} bc        loss {:.3} | ade {:.3} minade {:.3} offroad {:.4} collision {:.4} | {:?}",
            bc.trace.last().unwrap().loss,
            bc_report.ade,
            bc_report.min_ade,
            bc_report.offroad_rate,
            bc_report.collision_rate,
            t.elapsed()
        );
        diagnose(&bc.model, &holdout, &vocab, k_infer, 9000 + seed);
        if args.iter().any(|a| a == "--kinfer-grid") {
            for kg in [4usize, 8, 12, 16] {
                let cfg = EvalConfig { k_infer: kg, ..eval_cfg };
                let r = evaluate_categorical(&bc.model, &holdout, &vocab, &cfg);
                println!("   bc   k_infer {kg:2}: ade {:.3} minade {:.3} offroad {:.4} collision {:.4}", r.ade, r.min_ade, r.offroad_rate, r.collision_rate);
            }
        }

        for strat_name in strategies.split(',') {
            let t = Instant::now();
            let strategy: Strategy = strat_name.parse().unwrap();
            let ft_cfg = TrainConfig {
                epochs: ft_epochs,
                batch_scenarios: 4,
                learning_rate: ft_lr,
                strategy,
                sampler: SamplerConfig {
                    k,
                    k_infer,
                    tau: if strategy == Strategy::Trajeglish { 0.05 } else { 1.0 },
                    distance_threshold: 2.0,
                },
                seed,
                ..TrainConfig::default()
            };
            let ft_cfg = match strategy {
                Strategy::Trajeglish | Strategy::Smart => TrainConfig {
                    sampler: SamplerConfig {
                        k: baseline_k,
                        ..ft_cfg.sampler
                    },
                    ..ft_cfg
                },
                _ => ft_cfg,
            };
            let ft = finetune_closed_loop(&bc.model, &train, &vocab, &ft_cfg, None).unwrap();
            let report = evaluate_categorical(&ft.model, &holdout, &vocab, &eval_cfg);
            println!(
                "seed {seed} {:<9} loss {:.3} rollout_ade {:.3} | ade {:.3} minade {:.3} offroad {:.4} collision {:.4} | {:?}",
                strat_name,
                ft.trace.last().unwrap().loss,
                ft.trace.last().unwrap().ade_rollout_gt,
                report.ade,
                report.min_ade,
                report.offroad_rate,
                report.collision_rate,
                t.elapsed()
            );
            diagnose(&ft.model, &holdout, &vocab, k_infer, 9000 + seed);
            if args.iter().any(|a| a == "--kinfer-grid") {
                for kg in [4usize, 8, 12, 16] {
                    let cfg = EvalConfig { k_infer: kg, ..eval_cfg };
                    let r = evaluate_categorical(&ft.model, &holdout, &vocab, &cfg);
                    println!("   {strat_name} k_infer {kg:2}: ade {:.3} minade {:.3} offroad {:.4} collision {:.4}", r.ade, r.min_ade, r.offroad_rate, r.collision_rate);
                }
            }
        }
    }
    println!("total {:?}", t0.elapsed());
}
