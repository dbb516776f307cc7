//! PPO on cart-pole balance from the true state, compared with a uniform
//! random policy under the deterministic-evaluation protocol.
//!
//! cargo run --release --example ppo_balance -- [env_steps]

use mftcn::envsim::Task;
use mftcn::rl::{
    evaluate_policy, evaluate_random_policy, train_policy, ObsMode, ObservationSource, PolicyEnv, PolicyTrainConfig,
};

fn main() -> anyhow::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(100_000);
    let env = PolicyEnv::new(Task::Balance, 64, 32);
    let cfg = PolicyTrainConfig {
        total_steps: steps,
        ..PolicyTrainConfig::default()
    };
    let out = train_policy(
        &env,
        ObsMode::TrueState,
        ObservationSource::true_state(),
        &cfg,
        |p, s| {
            println!(
                "{:8} steps  episode reward {:7.1}  value loss {:.3}",
                p.env_steps, p.mean_reward, s.value_loss
            )
        },
    )?;
    let (episodes, horizon) = (20, 1000);
    let trained = evaluate_policy(
        &out.policy,
        &env,
        &mut ObservationSource::true_state(),
        episodes,
        horizon,
        1,
    )?;
    let random = evaluate_random_policy(&env, episodes, horizon, 1)?;
    println!("trained {:.1} +/- {:.1}", trained.mean, trained.std);
    println!("random  {:.1} +/- {:.1}", random.mean, random.std);
    Ok(())
}
