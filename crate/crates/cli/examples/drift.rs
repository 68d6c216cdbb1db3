//! Measures how far CAT-K training rollouts drift from GT, by K, and how
//! often they exit by a different arm than the GT did.

use catk_core::policy::{feature_dim, PolicyModel};
use catk_core::rollout::rollout_catk;
use catk_core::scenario::{generate_fork_world, split_holdout, HISTORY_STEPS};
use catk_core::training::{pretrain_bc, Strategy, TrainConfig};
use catk_core::vocabulary::build_vocabulary;
use catk_core::world::AgentState;

fn arm(s: &AgentState) -> u8 {
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
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bc_epochs = args
        .iter()
        .position(|a| a == "--bc-epochs")
        .and_then(|i| args.get(i + 1))
        .and_then(|v| v.parse().ok())
        .unwrap_or(60usize);
    let n: usize = args.iter().position(|a| a == "--n").and_then(|i| args.get(i+1)).and_then(|v| v.parse().ok()).unwrap_or(600);
    let scenarios = generate_fork_world(n, 2, [1.0 / 3.0; 3], 0.15, 0).unwrap();
    let (train, _) = split_holdout(scenarios, n / 10);
    let trajs: Vec<Vec<AgentState>> = train
        .iter()
        .flat_map(|s| (0..s.n_agents()).map(|i| s.agents[i].states()))
        .collect();
    let vocab = build_vocabulary(&trajs, 64, 0.5, 0).unwrap();
    let model = PolicyModel::new_categorical(feature_dim(HISTORY_STEPS), 64, 64, 1000);
    let bc_cfg = TrainConfig {
        epochs: bc_epochs,
        learning_rate: 3e-3,
        strategy: Strategy::Bc,
        seed: 0,
        ..TrainConfig::default()
    };
    let bc = pretrain_bc(&model, &train, &vocab, &bc_cfg, None).unwrap();
    println!("bc final loss {:.3}", bc.trace.last().unwrap().loss);

    for k in [4usize, 8, 16, 32, 64] {
        let mut ade_sum = 0.0;
        let mut worst: f64 = 0.0;
        let mut count = 0usize;
        let mut wrong_arm = 0usize;
        let mut arm_known = 0usize;
        for scenario in train.iter().take(200) {
            let rec = rollout_catk(&bc.model, scenario, &vocab, k, 0.5);
            let h = scenario.history_len;
            for (i, states) in rec.states.iter().enumerate() {
                let mut total = 0.0;
                for (t, s) in states.iter().enumerate() {
                    let d = s.planar_distance(&scenario.agents[i].state(h + t));
                    total += d;
                    worst = worst.max(d);
                }
                ade_sum += total / states.len() as f64;
                count += 1;
                let want = arm(&scenario.agents[i].state(scenario.horizon()));
                let got = arm(states.last().unwrap());
                if want != 4 && want != 3 {
                    arm_known += 1;
                    if got != want {
                        wrong_arm += 1;
                    }
                }
            }
        }
        println!(
            "K={k:2}: rollout-GT ade {:.3}  worst {:.2}  wrong_arm {:.3}",
            ade_sum / count as f64,
            worst,
            wrong_arm as f64 / arm_known as f64
        );
    }
}
