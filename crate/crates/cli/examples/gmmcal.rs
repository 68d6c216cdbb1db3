//! Calibration probe for the GMM ego policy: BC pre-training vs CAT-K and
//! deterministic-rollout fine-tuning, evaluated by minADE over 32 sampled
//! rollouts (top-3 over modes, temperature 1).

use catk_core::metrics::{evaluate_gmm, EvalConfig};
use catk_core::policy::{feature_dim, PolicyModel};
use catk_core::rollout::SamplerConfig;
use catk_core::scenario::{generate_fork_world, split_holdout, HISTORY_STEPS, PERIOD_S};
use catk_core::training::{finetune_gmm, pretrain_bc, Strategy, TrainConfig};
use catk_core::vocabulary::TokenVocabulary;
use catk_core::world::ActionToken;
use std::time::Instant;

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
    let noise = get("--noise", 0.15);
    let bc_epochs = get("--bc-epochs", 15.0) as usize;
    let ft_epochs = get("--ft-epochs", 5.0) as usize;
    let bc_lr = get("--bc-lr", 3e-3);
    let ft_lr = get("--ft-lr", 3e-4);
    let sigma = get("--sigma", 0.2);
    let modes = get("--modes", 16.0) as usize;
    let k = get("--k", 3.0) as usize;
    let n_seeds = get("--seeds", 3.0) as usize;

    println!(
        "gmm: n={n_scen} holdout={holdout_n} noise={noise} bc={bc_epochs}@{bc_lr} ft={ft_epochs}@{ft_lr} sigma={sigma} modes={modes} K={k}"
    );
    let t0 = Instant::now();
    let scenarios =
        generate_fork_world(n_scen, 2, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], noise, 0).unwrap();
    let (train, holdout) = split_holdout(scenarios, holdout_n);
    // The GMM pipeline only needs the token clock from a vocabulary.
    let vocab = TokenVocabulary::new(
        vec![ActionToken::new(2.0, 0.0, 0.0), ActionToken::new(3.0, 0.0, 0.0)],
        PERIOD_S,
    );

    for seed in 0..n_seeds as u64 {
        let t = Instant::now();
        let model = PolicyModel::new_gmm(feature_dim(HISTORY_STEPS), 64, modes, sigma, 2000 + seed);
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
            n_rollouts: 32,
            k_infer: k,
            tau: 1.0,
            seed: 9000 + seed,
            ..EvalConfig::default()
        };
        let bc_report = evaluate_gmm(&bc.model, &holdout, PERIOD_S, &eval_cfg);
        println!(
            "seed {seed} gmm-bc    loss {:.3} | ade {:.3} minade32 {:.4} offroad {:.4} | {:?}",
            bc.trace.last().unwrap().loss,
            bc_report.ade,
            bc_report.min_ade,
            bc_report.offroad_rate,
            t.elapsed()
        );
        for (name, strategy, kk) in [
            ("cat-3", Strategy::Catk, k),
            ("cat-1", Strategy::Deterministic, 1),
        ] {
            let t = Instant::now();
            let cfg = TrainConfig {
                epochs: ft_epochs,
                batch_scenarios: 4,
                learning_rate: ft_lr,
                strategy,
                sampler: SamplerConfig {
                    k: kk,
                    ..SamplerConfig::default()
                },
                seed,
                ..TrainConfig::default()
            };
            let ft = finetune_gmm(&bc.model, &train, PERIOD_S, &cfg, None).unwrap();
            let report = evaluate_gmm(&ft.model, &holdout, PERIOD_S, &eval_cfg);
            println!(
                "seed {seed} gmm-{name:<5} loss {:.3} rollout_ade {:.3} | ade {:.3} minade32 {:.4} offroad {:.4} | {:?}",
                ft.trace.last().unwrap().loss,
                ft.trace.last().unwrap().ade_rollout_gt,
                report.ade,
                report.min_ade,
                report.offroad_rate,
                t.elapsed()
            );
        }
    }
    println!("total {:?}", t0.elapsed());
}
