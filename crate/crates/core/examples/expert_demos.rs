//! Observe-the-expert pipeline: train a true-state balance policy, record its
//! best rollouts from two cameras as a multi-view dataset, train an mfTCN on
//! them, then train a policy from that embedding.
//!
//! cargo run --release --example expert_demos -- [policy_steps]

use std::sync::Arc;

use mftcn::envsim::{CameraSpec, Task};
use mftcn::model::MfTcnConfig;
use mftcn::rl::{
    evaluate_policy, record_expert_demos, train_policy, ObsMode, ObservationSource, PolicyEnv, PolicyTrainConfig,
};
use mftcn::sampler::SamplerConfig;
use mftcn::train::{train_embedding, EmbedTrainConfig};

fn main() -> anyhow::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(60_000);
    let env = PolicyEnv {
        horizon: 200,
        ..PolicyEnv::new(Task::Balance, 64, 32)
    };
    let cfg = PolicyTrainConfig {
        total_steps: steps,
        ..PolicyTrainConfig::default()
    };
    let expert = train_policy(
        &env,
        ObsMode::TrueState,
        ObservationSource::true_state(),
        &cfg,
        |_, _| {},
    )?
    .policy;

    let cams = vec![CameraSpec::fixed(0, 64, 32), CameraSpec::tracking(1, 64, 32)];
    let (demos, returns) = record_expert_demos(&expert, &env, cams, 12, 50.0, 3)?;
    println!(
        "kept {} of {} demonstrations (returns {:?})",
        demos.trajectories.len(),
        returns.len(),
        returns.iter().map(|r| *r as i64).collect::<Vec<_>>()
    );

    let embed_cfg = EmbedTrainConfig {
        model: MfTcnConfig {
            n_frames: 4,
            ..MfTcnConfig::default()
        },
        sampler: SamplerConfig {
            n_frames: 4,
            timesteps_per_traj: 6,
            trajs_per_batch: 3,
            ..SamplerConfig::default()
        },
        steps: 300,
        log_every: 100,
        ..EmbedTrainConfig::default()
    };
    let dir = tempfile::tempdir()?;
    let model = train_embedding(&demos, &embed_cfg, dir.path(), false, |r| {
        println!("embedding step {} loss {:.3}", r.step, r.loss)
    })?
    .model;

    let model = Arc::new(model);
    let student = train_policy(
        &env,
        ObsMode::Embedding,
        ObservationSource::embedding(model.clone()),
        &cfg,
        |_, _| {},
    )?;
    let mut src = ObservationSource::embedding(model);
    let report = evaluate_policy(&student.policy, &env, &mut src, 10, 200, 4)?;
    println!(
        "embedding policy: {:.1} +/- {:.1} over {} episodes",
        report.mean, report.std, report.episodes
    );
    Ok(())
}
