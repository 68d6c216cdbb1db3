//! Prints one deterministic rollout against GT, step by step, for a model
//! before/after fine-tuning. Scratch diagnostics for the training recipe.

use catk_core::policy::{feature_dim, forward_categorical, PolicyModel};
use catk_core::rollout::{rollout_deterministic, SamplerConfig};
use catk_core::scenario::{generate_fork_world, split_holdout, HISTORY_STEPS};
use catk_core::training::{finetune_closed_loop, pretrain_bc, Strategy, TrainConfig};
use catk_core::vocabulary::build_vocabulary;
use catk_core::world::{boundary_distance, AgentState};

fn main() {
    let scenarios = generate_fork_world(3300, 2, [1.0 / 3.0; 3], 0.15, 0).unwrap();
    let (train, holdout) = split_holdout(scenarios, 300);
    let trajs: Vec<Vec<AgentState>> = train
        .iter()
        .flat_map(|s| (0..s.n_agents()).map(|i| s.agents[i].states()))
        .collect();
    let vocab = build_vocabulary(&trajs, 64, 0.5, 0).unwrap();
    let model = PolicyModel::new_categorical(feature_dim(HISTORY_STEPS), 64, 64, 1000);
    let bc_cfg = TrainConfig {
        epochs: 40,
        learning_rate: 3e-3,
        strategy: Strategy::Bc,
        seed: 0,
        ..TrainConfig::default()
    };
    let bc = pretrain_bc(&model, &train, &vocab, &bc_cfg, None).unwrap();
    let ft_cfg = TrainConfig {
        epochs: 10,
        learning_rate: 3e-4,
        strategy: Strategy::Catk,
        sampler: SamplerConfig {
            k: 16,
            ..SamplerConfig::default()
        },
        seed: 0,
        ..TrainConfig::default()
    };
    let ft = finetune_closed_loop(&bc.model, &train, &vocab, &ft_cfg, None).unwrap();

    // Find a holdout scenario where the fine-tuned deterministic rollout
    // leaves the road and print both policies' behavior on it.
    for scenario in &holdout {
        let det_ft = rollout_deterministic(&ft.model, scenario, &vocab, 0.5);
        let off = det_ft.states[0]
            .iter()
            .any(|s| boundary_distance(&scenario.map, s.x, s.y) < 0.0);
        if !off {
            continue;
        }
        let det_bc = rollout_deterministic(&bc.model, scenario, &vocab, 0.5);
        println!(
            "scenario {} branch {:?}",
            scenario.id,
            scenario.mode_label.as_ref().unwrap()[0]
        );
        println!("step |              GT              |            BC det             |            CATK det           | bdFT  pmaxFT");
        let h = scenario.history_len;
        for t in 0..det_ft.states[0].len() {
            let g = scenario.agents[0].state(h + t);
            let b = det_bc.states[0][t];
            let f = det_ft.states[0][t];
            let bd = boundary_distance(&scenario.map, f.x, f.y);
            // Policy confidence at this step for the fine-tuned model.
            let pmax = if t < det_ft.states[0].len() - 1 {
                det_ft.probs_at_chosen[0][t]
            } else {
                f64::NAN
            };
            println!(
                "{t:4} | {:6.2} {:6.2} {:5.2} | {:6.2} {:6.2} {:5.2} | {:6.2} {:6.2} {:5.2} | {:5.2} {:.3}",
                g.x, g.y, g.yaw, b.x, b.y, b.yaw, f.x, f.y, f.yaw, bd, pmax
            );
        }
        // Show the fine-tuned policy's per-step entropy along its own rollout.
        let period = vocab.replanning_period();
        let mut timeline: Vec<AgentState> =
            (0..=h).map(|t| scenario.agents[0].state(t)).collect();
        for step in 0..(scenario.horizon() - h) {
            let hist = &timeline[step..=step + h];
            let neighbors: Vec<AgentState> = (1..scenario.n_agents())
                .map(|j| scenario.agents[j].state(h + step))
                .collect();
            let feats = catk_core::policy::encode(hist, &neighbors, &scenario.map, period);
            let out = forward_categorical(&ft.model, &feats);
            let entropy: f64 = out.probs.iter().map(|p| if *p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
            let cur = *timeline.last().unwrap();
            let chosen = det_ft.chosen[0][step];
            let tok = vocab.token(chosen);
            println!(
                "  step {step:2}: H(pi) {entropy:.2}  chosen {chosen:2} (dx {:5.2} dy {:5.2} dyaw {:5.2})",
                tok.dx, tok.dy, tok.dyaw
            );
            timeline.push(catk_core::world::apply_token(&cur, tok));
        }
        break;
    }
}
