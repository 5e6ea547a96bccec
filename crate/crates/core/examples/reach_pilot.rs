//! Runs both arms of the reach experiment and prints their success curves.
//!
//! `cargo run --release -p sketchlift-core --example reach_pilot -- [seeds] [steps] [experiment JSON]`

use std::time::Instant;

use sketchlift_core::rl::{Arm, ReachExperiment};

fn main() {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(40_000);
    let mut exp: ReachExperiment = args.next().map(|j| serde_json::from_str(&j).expect("experiment JSON")).unwrap_or_default();
    exp.td3.total_steps = steps;
    for arm in [Arm::Demo, Arm::Scratch] {
        for seed in 0..seeds {
            let t0 = Instant::now();
            let r = exp.run(arm, seed).expect("training run");
            let curve: Vec<String> =
                r.curve.iter().map(|p| format!("{:.2}/{:.3}/{:.4}", p.success_rate, p.actor_loss, p.critic_loss)).collect();
            println!(
                "{arm:?} seed {seed}: best {:.2} final {:.2} in {:.1}s  [{}]",
                r.best_success(),
                r.final_success(),
                t0.elapsed().as_secs_f64(),
                curve.join(" ")
            );
        }
    }
}
