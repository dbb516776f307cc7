//! Train a small mfTCN on a freshly generated dataset, logging the n-pairs
//! loss, then resume from the checkpoint for a few more steps.
//!
//! cargo run --release --example train_embedding -- [steps]

use mftcn::dataset::MultiViewDataset;
use mftcn::envsim::EnvConfig;
use mftcn::model::MfTcnConfig;
use mftcn::sampler::SamplerConfig;
use mftcn::train::{train_embedding, EmbedTrainConfig};

fn main() -> anyhow::Result<()> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let ds = MultiViewDataset::generate_random(&EnvConfig::with_resolution(64, 32), 0, 16, 200)?;
    let (train, _) = ds.split(0.8, 0)?;
    let mut cfg = EmbedTrainConfig {
        model: MfTcnConfig {
            n_frames: 4,
            ..MfTcnConfig::default()
        },
        sampler: SamplerConfig {
            n_frames: 4,
            ..SamplerConfig::default()
        },
        steps,
        log_every: (steps / 10).max(1),
        ..EmbedTrainConfig::default()
    };
    let dir = tempfile::tempdir()?;
    let out = train_embedding(&train, &cfg, dir.path(), false, |r| {
        println!("step {:5}  loss {:.4}  ({:.1}s)", r.step, r.loss, r.wall_time)
    })?;
    println!(
        "initial loss {:.4} (log P = {:.4})",
        out.losses[0],
        (cfg.sampler.timesteps_per_traj as f64).ln()
    );

    cfg.steps += 20;
    let resumed = train_embedding(&train, &cfg, dir.path(), true, |_| {})?;
    println!("resumed from step {} to {}", out.final_step, resumed.final_step);
    Ok(())
}
